import numpy as np
import pytest
from hypothesis import given, strategies as st

from edglab.state import (ClusterState, Norm, distance, moment, states_from_csv, states_to_csv,
                          tail)

from conftest import states


def test_moment_examples():
    s = ClusterState([0.5, 0.3, 0.2])
    assert moment(s, 1) == pytest.approx(0.7)
    assert moment(s, 0) == pytest.approx(1.0)
    assert moment(ClusterState([0, 0, 1]), 2) == 4.0


def test_fractional_moment():
    s = ClusterState([0.0, 0.0, 1.0])
    assert moment(s, 1.5) == pytest.approx(2**1.5)


def test_tail_examples():
    assert tail(ClusterState([0.5, 0.3, 0.2])).tolist() == pytest.approx([0.5, 0.2])
    assert tail(ClusterState([0.0, 0.0, 0.0])).tolist() == [0.0, 0.0]
    assert tail(ClusterState([0, 1, 0, 0])).tolist() == [1.0, 0.0, 0.0]


def test_distance_examples():
    a, b = ClusterState([1, 0]), ClusterState([0, 1])
    assert distance(a, a, Norm.WEAK0) == 0 and distance(a, a, Norm.STRONG1) == 0
    assert distance(a, b, Norm.WEAK0) == 2
    assert distance(a, b, Norm.STRONG1) == 1
    x, y = ClusterState([0.5, 0.5, 0]), ClusterState([0.5, 0, 0.5])
    assert distance(x, y, Norm.TAIL_WEAK) == pytest.approx(0.5)


def test_distance_mismatched_n():
    with pytest.raises(ValueError):
        distance(ClusterState([1, 0]), ClusterState([1, 0, 0]))


def test_invalid_states():
    with pytest.raises(ValueError):
        ClusterState([0.5, -0.1])
    with pytest.raises(ValueError):
        ClusterState([1.0])
    with pytest.raises(ValueError):
        ClusterState([np.nan, 1.0])


def test_state_is_immutable():
    s = ClusterState([0.5, 0.5])
    with pytest.raises(ValueError):
        s.c[0] = 1.0


@given(st.data())
def test_norm_axioms(data):
    N = data.draw(st.integers(2, 20))
    a, b, c = (data.draw(states(N, N)) for _ in range(3))
    for norm in Norm:
        assert distance(a, b, norm) == pytest.approx(distance(b, a, norm))
        assert distance(a, c, norm) <= distance(a, b, norm) + distance(b, c, norm) + 1e-12
        assert distance(a, a, norm) == 0
    assert distance(a, b, Norm.STRONG1) >= distance(a, b, Norm.WEAK0) - abs(a.c[0] - b.c[0]) - 1e-12


@given(states())
def test_tail_reconstruction(s):
    C = tail(s)
    c = np.empty_like(s.c)
    c[0] = s.eta - C[0]
    c[1:-1] = C[:-1] - C[1:]
    c[-1] = C[-1]
    assert np.allclose(c, s.c, atol=1e-15)
    assert np.all(np.diff(C) <= 1e-15)


def test_csv_and_json_roundtrip():
    s = [ClusterState([0.5, 0.3, 0.2], 0.0), ClusterState([0.4, 0.4, 0.2], 1.5)]
    text = states_to_csv(s)
    assert text.splitlines()[0] == "t,N,c_0,c_1,c_2"
    assert states_from_csv(text) == s
    assert ClusterState.from_json(s[1].to_json()) == s[1]
