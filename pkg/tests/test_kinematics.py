import math

import numpy as np
import pytest

from fc3.kinematics import (
    AttachError,
    DimensionError,
    Frame,
    KinematicState,
    Scene,
    SceneError,
    attach,
    detach,
    effective_config,
    forward_kinematics,
    jacobian,
    pose_compose,
    pose_inverse,
)
from tests.conftest import fd_jacobian, random_config


def make_state(scene, config=None):
    c = config if config is not None else np.zeros(scene.dim)
    return KinematicState(config=c, velocity=np.zeros(scene.dim), attachments={})


def test_pose_compose_inverse_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.uniform(-2, 2, 3)
        back = pose_compose(a, pose_inverse(a))
        assert np.allclose(back, 0.0, atol=1e-12)


def test_fk_chain_of_two_links_at_zero():
    scene = Scene(
        [
            Frame("world"),
            Frame("j1", parent="world", joint="revolute", offset=(1.0, 0.0, 0.0)),
            Frame("j2", parent="j1", joint="revolute", offset=(1.0, 0.0, 0.0)),
        ]
    )
    fk = forward_kinematics(scene, np.zeros(2))
    assert np.allclose(fk.pose("j2"), [2.0, 0.0, 0.0])


def test_fk_quarter_turn():
    scene = Scene(
        [
            Frame("world"),
            Frame("j1", parent="world", joint="revolute"),
            Frame("tip", parent="j1", joint="fixed", offset=(1.0, 0.0, 0.0)),
        ]
    )
    fk = forward_kinematics(scene, np.array([math.pi / 2]))
    assert np.allclose(fk.pose("tip"), [0.0, 1.0, math.pi / 2], atol=1e-12)


def test_fk_dimension_mismatch_names_root():
    scene = Scene([Frame("world"), Frame("j", parent="world", joint="revolute")])
    with pytest.raises(DimensionError):
        forward_kinematics(scene, np.zeros(3))


def test_scene_rejects_duplicate_and_cycle_and_two_roots():
    with pytest.raises(SceneError):
        Scene([Frame("world"), Frame("a", parent="world"), Frame("a", parent="world")])
    with pytest.raises(SceneError):
        Scene([Frame("world"), Frame("b", parent="world")] + [Frame("lone")])


def test_jacobian_world_frame_is_zero(arm_scene):
    J = jacobian(arm_scene, np.zeros(arm_scene.dim), "world")
    assert np.allclose(J, 0.0)


def test_jacobian_lever_arm():
    scene = Scene(
        [
            Frame("world"),
            Frame("j1", parent="world", joint="revolute"),
            Frame("tip", parent="j1", joint="fixed", offset=(0.7, 0.0, 0.0)),
        ]
    )
    J = jacobian(scene, np.array([0.3]), "tip")
    assert np.isclose(np.linalg.norm(J[:, 0]), 0.7, atol=1e-12)


def test_jacobian_zero_columns_off_root_path(arm_scene):
    rng = np.random.default_rng(1)
    q = random_config(arm_scene, rng)
    J = jacobian(arm_scene, q, "grasp")
    for name in ("block_a", "block_b"):
        start, n = arm_scene.span(name)
        assert np.allclose(J[:, start : start + n], 0.0)


@pytest.mark.parametrize("frame", ["link3", "grasp", "block_a"])
def test_jacobian_matches_finite_differences(arm_scene, frame):
    rng = np.random.default_rng(7)
    for _ in range(100):
        q = random_config(arm_scene, rng)
        Jp = jacobian(arm_scene, q, frame, "position")
        Jo = jacobian(arm_scene, q, frame, "orientation")

        def pos(x):
            return forward_kinematics(arm_scene, x).pose(frame)[:2]

        def ang(x):
            return forward_kinematics(arm_scene, x).pose(frame)[2:]

        Jp_fd = fd_jacobian(pos, q)
        Jo_fd = fd_jacobian(ang, q)
        scale = max(np.max(np.abs(Jp_fd)), 1.0)
        assert np.max(np.abs(Jp - Jp_fd)) / scale < 1e-4
        assert np.max(np.abs(Jo - Jo_fd)) < 1e-4


def test_jacobian_through_attachment(arm_scene):
    rng = np.random.default_rng(3)
    q = np.zeros(arm_scene.dim)
    # Put block_a at the grasp frame, attach, then check jacobian routing.
    fk = forward_kinematics(arm_scene, q)
    start, _ = arm_scene.span("block_a")
    q[start : start + 3] = fk.pose("grasp")
    state = attach(arm_scene, make_state(arm_scene, q), "grasp", "block_a")
    for _ in range(50):
        qq = q.copy()
        qq[arm_scene.actuated] = rng.uniform(-1.5, 1.5, 3)
        J = jacobian(arm_scene, qq, "block_a", "position", state.attachments)

        def pos(x):
            return forward_kinematics(arm_scene, x, state.attachments).pose("block_a")[:2]

        J_fd = fd_jacobian(pos, qq)
        assert np.max(np.abs(J - J_fd)) < 1e-4


def test_attach_detach_roundtrip_preserves_poses(arm_scene):
    q = np.zeros(arm_scene.dim)
    fk = forward_kinematics(arm_scene, q)
    start, _ = arm_scene.span("block_a")
    q[start : start + 3] = fk.pose("grasp") + np.array([0.01, 0.005, 0.05])
    state = make_state(arm_scene, q)
    before = forward_kinematics(arm_scene, state.config, state.attachments)
    s2 = attach(arm_scene, state, "grasp", "block_a")
    mid = forward_kinematics(arm_scene, s2.config, s2.attachments)
    s3 = detach(arm_scene, s2, "block_a")
    after = forward_kinematics(arm_scene, s3.config, s3.attachments)
    for name in before.poses:
        assert np.max(np.abs(before.pose(name) - mid.pose(name))) < 1e-12
        assert np.max(np.abs(before.pose(name) - after.pose(name))) < 1e-12


def test_attached_object_follows_gripper(arm_scene):
    q = np.zeros(arm_scene.dim)
    fk = forward_kinematics(arm_scene, q)
    start, _ = arm_scene.span("block_a")
    q[start : start + 3] = fk.pose("grasp")
    state = attach(arm_scene, make_state(arm_scene, q), "grasp", "block_a")
    q2 = state.config.copy()
    q2[arm_scene.actuated] += np.array([0.3, -0.2, 0.5])
    fk2 = forward_kinematics(arm_scene, q2, state.attachments)
    rel = pose_compose(pose_inverse(fk2.pose("grasp")), fk2.pose("block_a"))
    assert np.allclose(rel, state.attachments["block_a"].offset, atol=1e-12)


def test_attach_beyond_tolerance_errors(arm_scene):
    q = np.zeros(arm_scene.dim)
    start, _ = arm_scene.span("block_a")
    q[start] = 2.0  # 0.5+ m away from the grasp frame
    with pytest.raises(AttachError):
        attach(arm_scene, make_state(arm_scene, q), "grasp", "block_a")


def test_detach_unattached_errors(arm_scene):
    with pytest.raises(AttachError):
        detach(arm_scene, make_state(arm_scene), "block_a")


def test_attachment_does_not_change_layout(arm_scene):
    q = np.zeros(arm_scene.dim)
    fk = forward_kinematics(arm_scene, q)
    start, _ = arm_scene.span("block_a")
    q[start : start + 3] = fk.pose("grasp")
    layout_before = dict(arm_scene.layout)
    state = attach(arm_scene, make_state(arm_scene, q), "grasp", "block_a")
    assert arm_scene.layout == layout_before
    assert state.config.shape == (arm_scene.dim,)
    eff = effective_config(arm_scene, state)
    assert eff.shape == (arm_scene.dim,)
