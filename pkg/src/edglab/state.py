"""Truncated cluster-size distributions."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = ["ClusterState", "Norm", "moment", "tail", "distance", "states_to_csv",
           "states_from_csv"]


@dataclass(frozen=True, eq=False)
class ClusterState:
    """Densities ``c_0..c_N`` at time ``t``.

    ``c_0`` is the empty-volume fraction. The array is copied and made
    read-only, so a state can be shared freely.
    """

    c: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        c = np.array(self.c, dtype=float, copy=True).ravel()
        if c.size < 2:
            raise ValueError("a cluster state needs at least c_0 and c_1")
        if not np.all(np.isfinite(c)):
            raise ValueError("cluster densities must be finite")
        if np.any(c < 0):
            j = int(np.flatnonzero(c < 0)[0])
            raise ValueError(f"negative density c_{j} = {c[j]!r}")
        c.flags.writeable = False
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "t", float(self.t))

    @property
    def N(self) -> int:
        return self.c.size - 1

    @property
    def eta(self) -> float:
        """Total volume ``M_0``."""
        return float(self.c.sum())

    @property
    def rho(self) -> float:
        """Total mass ``M_1``."""
        return float(np.arange(self.c.size) @ self.c)

    def moment(self, p: float) -> float:
        return moment(self, p)

    def at(self, t: float) -> "ClusterState":
        return ClusterState(self.c, t)

    def __eq__(self, other):
        if not isinstance(other, ClusterState):
            return NotImplemented
        return self.t == other.t and np.array_equal(self.c, other.c)

    def to_json(self) -> dict[str, Any]:
        return {"t": self.t, "N": self.N, "c": self.c.tolist()}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ClusterState":
        c = d["c"]
        if "N" in d and len(c) != int(d["N"]) + 1:
            raise ValueError(f"state declares N={d['N']} but carries {len(c)} densities")
        return cls(np.asarray(c, dtype=float), d.get("t", 0.0))


def moment(state: ClusterState, p: float) -> float:
    """``sum_j j**p c_j`` with ``0**0 == 1``."""
    if p < 0:
        raise ValueError("moment order must be non-negative")
    j = np.arange(state.c.size, dtype=float)
    w = np.power(j, p)   # numpy gives 0.0**0 == 1 and 0.0**p == 0 for p > 0
    return float(w @ state.c)


def tail(state: ClusterState) -> np.ndarray:
    """Tail sums ``C_j = sum_{k>=j} c_k`` for ``j = 1..N`` (array index ``j-1``)."""
    return np.cumsum(state.c[:0:-1])[::-1]


class Norm(str, Enum):
    WEAK0 = "weak0"
    STRONG1 = "strong1"
    TAIL_WEAK = "tail_weak"


def distance(a: ClusterState, b: ClusterState, norm: Norm | str = Norm.WEAK0) -> float:
    """Distance between two states of equal truncation order.

    ``weak0``: ``sum_{j>=0} |a_j - b_j|``; ``strong1``: ``sum_{j>=1} j |a_j - b_j|``;
    ``tail_weak``: ``sum_{j>=1} |A_j - B_j|`` over tail sums.
    """
    if a.N != b.N:
        raise ValueError(f"truncation orders differ: {a.N} != {b.N}")
    norm = Norm(norm)
    if norm is Norm.WEAK0:
        return float(np.abs(a.c - b.c).sum())
    if norm is Norm.STRONG1:
        return float(np.arange(a.c.size) @ np.abs(a.c - b.c))
    return float(np.abs(tail(a) - tail(b)).sum())


def states_to_csv(states: Iterable[ClusterState], fh: io.TextIOBase | None = None) -> str | None:
    """Write ``t, N, c_0, ..., c_N`` rows; returns the text when ``fh`` is None."""
    states = list(states)
    own = fh is None
    out = io.StringIO() if own else fh
    w = csv.writer(out, lineterminator="\n")
    if states:
        w.writerow(["t", "N"] + [f"c_{j}" for j in range(states[0].N + 1)])
    for s in states:
        w.writerow([repr(s.t), s.N] + [repr(float(x)) for x in s.c])
    return out.getvalue() if own else None


def states_from_csv(text: str | Sequence[str]) -> list[ClusterState]:
    lines = text.splitlines() if isinstance(text, str) else list(text)
    rows = list(csv.reader(lines))
    out = []
    for row in rows[1:]:
        t, n, *c = row
        if len(c) != int(n) + 1:
            raise ValueError(f"row at t={t} declares N={n} but has {len(c)} densities")
        out.append(ClusterState(np.array(c, dtype=float), float(t)))
    return out


def state_to_json_text(state: ClusterState) -> str:
    return json.dumps(state.to_json())
