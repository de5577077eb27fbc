import numpy as np
import pytest
from hypothesis import settings, strategies as st

from edglab.rates import KernelSpec, RateSequence as R
from edglab.state import ClusterState

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def ones_kernel():
    return KernelSpec.product(R.constant(1.0), R.constant(1.0))


@pytest.fixture
def factorial_kernel():
    return KernelSpec.product(R.constant(1.0), R.linear(1.0))


@pytest.fixture
def tele4_kernel():
    return KernelSpec.product(R.constant(1.0), R.telescoping(4))


def random_state(rng, N, zeros=False):
    c = rng.random(N + 1) * rng.random(N + 1) ** 2
    if zeros:
        c[rng.random(N + 1) < 0.2] = 0.0
    c[0] = max(c[0], 1e-3)
    return ClusterState(c / c.sum())


@st.composite
def product_kernels(draw):
    ca = draw(st.floats(0.2, 3.0))
    pa = draw(st.floats(0.0, 1.0))
    cb = draw(st.floats(0.2, 3.0))
    pb = draw(st.floats(0.0, 1.0))
    a0 = draw(st.floats(0.2, 3.0))
    a = R.table([a0, ca], "constant") if pa == 0 else R.power(ca, pa)
    if pa > 0:
        # keep a_0 positive so Q is not absorbing
        a = R.table([a0] + [ca * j**pa for j in range(1, 30)], "power")
    return KernelSpec.product(a, R.power(cb, pb) if pb > 0 else R.constant(cb))


@st.composite
def sum_kernels(draw):
    a = R.table(draw(st.lists(st.floats(0.3, 2.0), min_size=1, max_size=4)), "periodic")
    b = R.power(draw(st.floats(0.2, 2.0)), draw(st.floats(0.5, 1.0)))
    al = R.constant(draw(st.floats(0.0, 2.0)))
    be = R.table(draw(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=3)), "constant")
    return KernelSpec.sum(a, b, al, be, eps=draw(st.floats(0.0, 0.5)))


@st.composite
def states(draw, n_min=2, n_max=30):
    N = draw(st.integers(n_min, n_max))
    c = draw(st.lists(st.floats(0.0, 1.0), min_size=N + 1, max_size=N + 1))
    c[0] = max(c[0], 1e-3)
    c = np.array(c)
    return ClusterState(c / c.sum())
