import numpy as np
import pytest

from orthoflow import autodiff as ad
from orthoflow.fields import (
    MLP,
    GeneratorParams,
    MeanField,
    SpatialFeatures,
    eval_m_skew,
    eval_u,
    time_embedding,
    time_frequencies,
)
from orthoflow.function_space import Domain, sample_quadrature
from orthoflow.training import Adam


@pytest.fixture(scope="module")
def small():
    return GeneratorParams(dim=1, channels=2, rank=3, seed=0, width=16, depth=2)


def test_time_embedding():
    g0 = time_embedding(0.0)
    assert g0.shape == (512,) and np.all(g0[0::2] == 0.0) and np.all(g0[1::2] == 1.0)
    w = time_frequencies()
    assert w[0] == 1.0 and w[-1] == pytest.approx(8.0)
    for t in np.linspace(0, 1, 7):
        assert np.sum(time_embedding(t) ** 2) == pytest.approx(256.0)


def test_spatial_feature_count_is_fixed():
    feats = SpatialFeatures(2, np.random.default_rng(0))
    assert feats.size == 2 * sum(max(1, 64 // 2**lvl) for lvl in range(8))
    x = np.random.default_rng(1).random((5, 2))
    assert np.array_equal(feats(x), feats(x))


def test_u_shape_and_zero_heads(small):
    pts = sample_quadrature(Domain(1), 10, seed=0)
    assert eval_u(small, 0.3, pts).shape == (3, 10, 2)
    U = small.children["U"]
    saved = {k: p.data.copy() for k, p in U.named_parameters().items()}
    U.children["head"].params["weight"].data[:] = 0.0
    U.children["residual"].children["head"].params["weight"].data[:] = 0.0
    assert np.all(eval_u(small, 0.3, pts).data == 0.0)
    # residual only: coefficient 1 for rank 0 / channel 0 on the DC element
    field = U.children["residual"].children["head"]
    res_k = U.res_index[:, 0]
    k0 = int(np.where(res_k == 0)[0][0])
    field.params["bias"].data[:] = 0.0
    field.params["bias"].data[k0 * 6 + 0] = 1.0  # (nk, r*C) layout, entry (rank 0, channel 0)
    u = eval_u(small, 0.3, pts).data
    assert np.allclose(u[0, :, 0], 1.0) and np.allclose(u[1:], 0.0) and np.allclose(u[0, :, 1], 0.0)
    for k, p in U.named_parameters().items():
        p.data = saved[k]


def test_u_gradient_finite_difference(small):
    pts = sample_quadrature(Domain(1), 6, seed=1)
    params = small.named_parameters()
    rng = np.random.default_rng(2)
    for name in ["U.in_space", "U.linear1.weight", "U.residual.head.weight", "U.norm_in.gain"]:
        p = params[name]
        small.zero_grad()
        ad.sum(ad.sin(small.eval_u(np.array([0.2, 0.7]), pts))).backward()
        idx = tuple(rng.integers(0, s) for s in p.shape)
        fd = ad.central_difference(lambda: np.sum(np.sin(small.eval_u(np.array([0.2, 0.7]), pts).data)), p.data, idx)
        assert abs(fd - p.grad[idx]) <= 1e-4 * max(abs(fd), 1e-4), name


def test_skew_examples():
    for r in (2, 5):
        params = GeneratorParams(rank=r, seed=r, width=8, depth=1)
        S = eval_m_skew(params, 0.37).data
        assert np.array_equal(S + S.T, np.zeros((r, r)))
        assert np.all(np.diag(S) == 0.0)
    S2 = eval_m_skew(GeneratorParams(rank=2, seed=1, width=8, depth=1), 0.1).data
    assert S2[0, 0] == 0 and S2[1, 1] == 0 and S2[0, 1] == -S2[1, 0]


def test_construction_is_reproducible():
    pts = sample_quadrature(Domain(2), 8, seed=0)
    a = GeneratorParams(2, 1, 4, seed=11, width=16, depth=2).eval_u(np.array([0.5]), pts).data
    b = GeneratorParams(2, 1, 4, seed=11, width=16, depth=2).eval_u(np.array([0.5]), pts).data
    assert np.array_equal(a, b)


def test_parameter_sets_disjoint():
    g = GeneratorParams(width=8, depth=1, seed=0)
    m = MeanField(seed=0)
    ids = {id(p) for p in g.parameters()}
    assert not ids & {id(p) for p in m.parameters()}


def test_mean_field_zero_head_and_gradient():
    m = MeanField(1, 1, seed=0)
    pts = sample_quadrature(Domain(1), 12, seed=0)
    X = np.sin(3 * pts.points)
    w = m.children["mlp"].children["linear0"].params["weight"]
    m.zero_grad()
    d = m(pts) - ad.Tensor(X)
    ad.mean(d * d).backward()
    for idx in [(0, 0), (5, 17), (40, 100)]:
        fd = ad.central_difference(lambda: float(np.mean((m(pts).data - X) ** 2)), w.data, idx)
        assert abs(fd - w.grad[idx]) <= 1e-4 * max(abs(fd), 1e-5)
    head = m.children["mlp"].children["head"]
    head.params["weight"].data[:] = 0.0
    head.params["bias"].data[:] = 0.0
    assert np.all(m(pts).data == 0.0)


def test_mean_field_fits_constant():
    m = MeanField(1, 1, seed=3)
    opt = Adam(m.named_parameters())
    rng = np.random.default_rng(0)
    for _ in range(500):
        pts = rng.random((32, 1))
        d = m(pts) - 3.0
        ad.mean(d * d).backward()
        opt.step()
        opt.zero_grad()
    assert abs(m(rng.random((200, 1))).data.mean() - 3.0) < 0.05


def test_mlp_without_norm_has_no_gain():
    mlp = MLP(4, [8, 8], 2, np.random.default_rng(0), norm=False)
    assert not any("gain" in k for k in mlp.named_parameters())
