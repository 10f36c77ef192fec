import numpy as np
import pytest

from divflow.autodiff import MlpWeights
from divflow.fourier import (
    PotentialNet,
    analytic_divergence,
    embed,
    load_checkpoint,
    potential_hessian,
    predict_velocity,
    sample_fourier_map,
    save_checkpoint,
    scale_sigma,
)

BOX = ((0.01, -0.02, 0.0), (0.04, 0.01, 0.05))


def random_potential(seed, m=16, width=12, depth=3, dtype=np.float64, venc=1.5):
    rng = np.random.default_rng(seed)
    fmap = sample_fourier_map(m, 1.0, seed)
    mlp = MlpWeights.init(2 * m, width, depth, seed=seed, dtype=dtype)
    for W, b in mlp.layers:
        b[:] = 0.2 * rng.normal(size=b.shape)
    return PotentialNet(fmap, mlp, BOX[0], BOX[1], venc)


def linear_potential(A, c=None, venc=2.0, box=BOX):
    """Identity embedding, no hidden layer: Phi(r) = A r + c (in units of the length scale)."""
    mlp = MlpWeights([(np.asarray(A, float), np.zeros(3) if c is None else np.asarray(c, float))])
    return PotentialNet(None, mlp, box[0], box[1], venc)


def test_fourier_map_deterministic():
    a = sample_fourier_map(64, 0.5, 9)
    b = sample_fourier_map(64, 0.5, 9)
    np.testing.assert_array_equal(a.B, b.B)
    assert a.B.shape == (64, 3)
    with pytest.raises(ValueError):
        a.B[0, 0] = 1.0


def test_fourier_map_std():
    B = sample_fourier_map(256, 1.0, 0).B
    assert 0.9 <= B.std() <= 1.1


def test_fourier_map_scales_exactly():
    np.testing.assert_array_equal(sample_fourier_map(32, 2.0, 5).B, 2 * sample_fourier_map(32, 1.0, 5).B)


def test_fourier_map_rejects_bad_args():
    with pytest.raises(ValueError):
        sample_fourier_map(0, 1.0, 0)
    with pytest.raises(ValueError):
        sample_fourier_map(4, 0.0, 0)


def test_embed_origin_and_bounds(rng):
    fmap = sample_fourier_map(8, 3.0, 1)
    feats, _ = embed(np.zeros((1, 3)), fmap)
    np.testing.assert_array_equal(feats[0], np.r_[np.ones(8), np.zeros(8)])
    feats, _ = embed(rng.random((50, 3)), fmap)
    assert np.all(np.abs(feats) <= 1)


def test_embed_tangents_fd(rng):
    fmap = sample_fourier_map(16, 2.0, 3)
    r = rng.random((40, 3))
    _, seeds = embed(r, fmap)
    h = 1e-6
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        fd = (embed(r + e, fmap)[0] - embed(r - e, fmap)[0]) / (2 * h)
        assert np.abs(fd - seeds[:, :, d]).max() / np.abs(fd).max() < 1e-6


def test_curl_of_rigged_potential():
    # Phi = (0, 0, x_phys): with the identity chart r = (x - lo) / ext and
    # Phi_net = Phi / L, the net is linear in r
    net = linear_potential(np.zeros((3, 3)))
    L, ext, lo = net.length_scale, net.extent, np.asarray(BOX[0])
    A = np.zeros((3, 3))
    A[2, 0] = ext[0] / L
    c = np.array([0.0, 0.0, lo[0] / L])
    net = linear_potential(A, c, venc=2.0)
    v = predict_velocity(net, np.random.default_rng(0).random((5, 3)))
    np.testing.assert_allclose(v, np.tile([0.0, -2.0, 0.0], (5, 1)), atol=1e-12)


def test_constant_potential_gives_zero_velocity():
    net = linear_potential(np.zeros((3, 3)), c=[1.0, -2.0, 3.0])
    assert np.all(predict_velocity(net, np.random.default_rng(0).random((5, 3))) == 0)


def test_linear_net_curl_is_additive(rng):
    A1, A2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    r = rng.random((10, 3))
    v1 = predict_velocity(linear_potential(A1), r)
    v2 = predict_velocity(linear_potential(A2), r)
    v12 = predict_velocity(linear_potential(A1 + A2), r)
    np.testing.assert_allclose(v12, v1 + v2, rtol=1e-12, atol=1e-12)


def test_velocity_matches_fd_curl(rng):
    net = random_potential(2)
    r = rng.random((30, 3))
    h = 1e-6
    L, ext = net.length_scale, net.extent
    from divflow.autodiff import forward

    def phi(rr):
        return forward(net.mlp, embed(rr, net.fourier)[0]) * L

    J = np.empty((30, 3, 3))
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        J[:, :, d] = (phi(r + e) - phi(r - e)) / (2 * h) / ext[d]
    curl = np.stack([J[:, 2, 1] - J[:, 1, 2], J[:, 0, 2] - J[:, 2, 0], J[:, 1, 0] - J[:, 0, 1]], axis=1)
    np.testing.assert_allclose(predict_velocity(net, r), net.venc * curl, rtol=1e-6, atol=1e-6 * np.abs(curl).max())


def test_hessian_matches_fd(rng):
    net = random_potential(4)
    r = rng.random((20, 3))
    from divflow.autodiff import forward_with_tangents

    def jac(rr):
        return forward_with_tangents(net.mlp, *embed(rr, net.fourier)).tangents

    H = potential_hessian(net, r)
    h = 1e-5
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fd = (jac(r + e) - jac(r - e)) / (2 * h)
        assert np.abs(fd - H[..., a]).max() / np.abs(H).max() < 1e-7


@pytest.mark.parametrize("dtype, tol", [(np.float32, 1e-3), (np.float64, 1e-8)])
def test_divergence_free(rng, dtype, tol):
    for seed in range(5):
        net = random_potential(seed, dtype=dtype)
        div = analytic_divergence(net, rng.random((100, 3)))
        assert np.abs(div).max() < tol


def test_divergence_fd_cross_check(rng):
    """Finite-difference divergence of predict_velocity shrinks like h^2."""
    net = random_potential(7)
    r = rng.random((20, 3))
    ext = net.extent

    def fd_div(h):
        total = 0.0
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            total = total + (predict_velocity(net, r + e)[:, a] - predict_velocity(net, r - e)[:, a]) / (2 * h * ext[a])
        return np.abs(total).max()

    scale = np.abs(predict_velocity(net, r)).max() / ext.min()
    assert fd_div(1e-3) < 1e-3 * scale
    assert fd_div(2e-3) / fd_div(1e-3) > 3.5
    assert fd_div(1e-3) / fd_div(5e-4) > 3.5


def test_predict_deterministic(rng):
    net = random_potential(1, dtype=np.float32)
    r = rng.random((64, 3))
    np.testing.assert_array_equal(predict_velocity(net, r), predict_velocity(net, r))
    # BLAS kernels depend on the row count, so chunking is only reproducible to rounding
    np.testing.assert_allclose(predict_velocity(net, r, chunk=7), predict_velocity(net, r), rtol=1e-4, atol=1e-5)


@pytest.mark.parametrize(
    "args, tau",
    [
        (((1, 1, 1), (1, 1, 1), (3, 4, 5), (3, 4, 5)), 1.0),
        (((2, 2, 2), (1, 1, 1), (3, 4, 5), (3, 4, 5)), 8.0),
        (((1, 1, 1), (1, 1, 1), (3, 4, 5), (6, 4, 5)), 2.0),
    ],
)
def test_scale_sigma(args, tau):
    assert scale_sigma(*args, 1.5) == 1.5 * tau


def test_scale_sigma_rejects_nonpositive():
    with pytest.raises(ValueError):
        scale_sigma((1, 0, 1), (1, 1, 1), (1, 1, 1), (1, 1, 1), 1.0)


def test_checkpoint_roundtrip(tmp_path, rng):
    net = random_potential(3, dtype=np.float32)
    net.timeframe, net.config_digest = 4, "abc"
    save_checkpoint(net, tmp_path / "a.f4n")
    back = load_checkpoint(tmp_path / "a.f4n")
    assert back.timeframe == 4 and back.config_digest == "abc" and back.venc == net.venc
    np.testing.assert_array_equal(back.fourier.B, net.fourier.B)
    r = rng.random((10, 3))
    np.testing.assert_array_equal(predict_velocity(back, r), predict_velocity(net, r))
    save_checkpoint(back, tmp_path / "b.f4n")
    assert (tmp_path / "a.f4n").read_bytes() == (tmp_path / "b.f4n").read_bytes()
    assert (tmp_path / "a.f4n").read_bytes()[:4] == b"F4DN"
