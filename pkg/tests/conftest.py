import numpy as np
import pytest

from fc3.kinematics import Frame, Scene, Shape


@pytest.fixture
def arm_scene():
    """3-link planar arm with a grasp frame plus two free blocks."""
    frames = [
        Frame("world"),
        Frame("base", parent="world", joint="fixed", offset=(0.0, 0.0, 0.0)),
        Frame("link1", parent="base", joint="revolute", offset=(0.0, 0.0, 0.0), limits=(-2.9, 2.9)),
        Frame("link2", parent="link1", joint="revolute", offset=(0.33, 0.0, 0.0), limits=(-2.7, 2.7)),
        Frame("link3", parent="link2", joint="revolute", offset=(0.25, 0.0, 0.0), limits=(-2.7, 2.7)),
        Frame("gripper", parent="link3", joint="fixed", offset=(0.17, 0.0, 0.0), shape=Shape("disk", (0.03,))),
        Frame("grasp", parent="gripper", joint="fixed", offset=(0.06, 0.0, 0.0)),
        Frame("block_a", parent="world", joint="free", shape=Shape("box", (0.06, 0.06))),
        Frame("block_b", parent="world", joint="free", shape=Shape("box", (0.06, 0.06))),
    ]
    return Scene(frames)


def random_config(scene, rng, scale=1.5):
    return rng.uniform(-scale, scale, scene.dim)


def fd_jacobian(f, x, h=1e-6):
    """Central finite differences of f(x) -> vector."""
    y0 = np.asarray(f(x))
    J = np.zeros((y0.size, x.size))
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h)
    return J
