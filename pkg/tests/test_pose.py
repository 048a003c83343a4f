"""Pose network and SE(3) exponential."""

import numpy as np
import pytest

import monovit.autodiff as ad
from monovit.autodiff import Tensor
from monovit.gradcheck import max_rel_error
from monovit.posenet import POSE_SCALE, Pose6DoF, PoseNet, se3_exp


def pose(aa, tr):
    return Pose6DoF(Tensor(np.atleast_2d(aa)), Tensor(np.atleast_2d(tr)))


def test_exp_of_zero_is_identity():
    se3 = se3_exp(pose([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]))
    np.testing.assert_allclose(se3.rotation.data[0], np.eye(3), atol=1e-15)
    np.testing.assert_allclose(se3.translation.data[0], 0.0)


def test_quarter_turn_about_z():
    se3 = se3_exp(pose([0.0, 0.0, np.pi / 2], [0.0, 0.0, 0.0]))
    rotated = se3.rotation.data[0] @ np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(rotated, [0.0, 1.0, 0.0], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_rotation_is_orthonormal(seed):
    rng = np.random.default_rng(seed)
    aa = rng.uniform(-2.0, 2.0, size=(4, 3))
    se3 = se3_exp(Pose6DoF(Tensor(aa), Tensor(np.zeros((4, 3)))))
    for r in se3.rotation.data:
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(r) - 1.0) < 1e-9


def test_inverse_rotation_composes_to_identity():
    rng = np.random.default_rng(3)
    aa = rng.uniform(-1.5, 1.5, size=(1, 3))
    fwd = se3_exp(Pose6DoF(Tensor(aa), Tensor(np.zeros((1, 3)))))
    bwd = se3_exp(Pose6DoF(Tensor(-aa), Tensor(np.zeros((1, 3)))))
    np.testing.assert_allclose(
        fwd.rotation.data[0] @ bwd.rotation.data[0], np.eye(3), atol=1e-9)


def test_tiny_angle_uses_series_not_nan():
    aa = Tensor(np.full((1, 3), 1e-10), requires_grad=True)
    se3 = se3_exp(Pose6DoF(aa, Tensor(np.zeros((1, 3)))))
    assert np.all(np.isfinite(se3.rotation.data))
    ad.backward(ad.sum_(se3.rotation * se3.rotation))
    # gradient at near-zero angle must stay finite (series branch)
    assert np.all(np.isfinite(aa.grad))


def test_exp_rejects_nonfinite():
    with pytest.raises(ValueError):
        se3_exp(pose([np.nan, 0.0, 0.0], [0.0, 0.0, 0.0]))


def test_exp_gradients_match_differences():
    def build(ts):
        se3 = se3_exp(Pose6DoF(ts[0], ts[1]))
        w = ad.Tensor(np.random.default_rng(0).normal(size=(2, 3, 3)))
        return ad.sum_(se3.rotation * w) + ad.sum_(se3.translation)

    rng = np.random.default_rng(11)
    err = max_rel_error(build, [rng.uniform(0.2, 1.5, size=(2, 3)),
                                rng.normal(size=(2, 3))])
    assert err < 1e-4


def test_posenet_zero_head_gives_identity_pose():
    net = PoseNet(np.random.default_rng(0))
    net.head_w.data[:] = 0.0
    net.head_b.data[:] = 0.0
    p = net(Tensor(np.random.default_rng(1).uniform(size=(2, 6, 16, 16))))
    np.testing.assert_allclose(p.axis_angle.data, 0.0)
    np.testing.assert_allclose(p.translation.data, 0.0)


def test_posenet_outputs_finite_and_small():
    net = PoseNet(np.random.default_rng(0))
    p = net(Tensor(np.random.default_rng(2).uniform(size=(1, 6, 32, 32))))
    out = np.concatenate([p.axis_angle.data, p.translation.data], axis=1)
    assert out.shape == (1, 6)
    assert np.all(np.isfinite(out))


def test_posenet_output_scaling_is_linear_factor():
    net = PoseNet(np.random.default_rng(0))
    x = Tensor(np.random.default_rng(3).uniform(size=(1, 6, 16, 16)))
    p = net(x)
    loss = ad.sum_(p.translation)
    ad.backward(loss)
    g = net.head_b.grad
    # d(output)/d(pre-scale bias) is exactly the 0.01 factor
    np.testing.assert_allclose(g, [0.0, 0.0, 0.0, POSE_SCALE, POSE_SCALE, POSE_SCALE])


def test_posenet_rejects_wrong_channel_count():
    net = PoseNet(np.random.default_rng(0))
    with pytest.raises(ValueError):
        net(Tensor(np.zeros((1, 3, 16, 16))))
