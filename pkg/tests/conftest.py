import numpy as np
import pytest
from hypothesis import settings, strategies as st

from scanrecon.core import RigidTransform, exp_so3

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng, scale=100.0):
    return RigidTransform(random_rotation(rng), rng.uniform(-scale, scale, 3))


@st.composite
def transforms(draw, max_angle=np.pi, max_t=200.0):
    ax = np.array(draw(st.tuples(*[st.floats(-1, 1)] * 3)))
    n = np.linalg.norm(ax)
    ax = np.array([1.0, 0, 0]) if n < 1e-3 else ax / n
    ang = draw(st.floats(0.0, max_angle))
    t = draw(st.tuples(*[st.floats(-max_t, max_t)] * 3))
    return RigidTransform(exp_so3(ax * ang), t)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
