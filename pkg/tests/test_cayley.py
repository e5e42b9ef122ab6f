import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from orthoflow import autodiff as ad
from orthoflow.cayley import (
    TimeGrid,
    apply_q,
    cayley_step,
    dense_cayley,
    integrate,
    integrate_factors,
    low_rank_step,
)
from orthoflow.errors import IntegrationError
from orthoflow.fields import GeneratorParams
from orthoflow.function_space import Domain, IndexPrior, gram, sample_quadrature, uniform_grid


class ConstantGenerator:
    """Time-independent ``U`` (``(r, D, C)``) and skew ``S``."""

    channels = 1

    def __init__(self, U, S):
        self.U, self.S = np.asarray(U, dtype=np.float64), np.asarray(S, dtype=np.float64)

    def eval_u(self, times, points):
        return ad.Tensor(np.broadcast_to(self.U, (np.size(times),) + self.U.shape).copy())

    def eval_skew(self, times):
        return ad.Tensor(np.broadcast_to(self.S, (np.size(times),) + self.S.shape).copy())


def random_skew(r, rng):
    M = rng.standard_normal((r, r))
    return M - M.T


def discrete_norms(phi):
    return np.sum(phi**2, axis=tuple(range(1, phi.ndim))) / phi.shape[1]


def test_time_grid():
    g = TimeGrid.uniform(4)
    assert np.allclose(g.knots, [0, 0.25, 0.5, 0.75, 1.0]) and np.allclose(g.midpoints, [0.125, 0.375, 0.625, 0.875])
    r = TimeGrid.random(20, seed=3)
    assert r.knots[0] == 0.0 and r.knots[-1] == 1.0 and np.all(np.diff(r.knots) > 0) and r.steps == 20


def test_zero_generator_is_identity_for_every_method():
    rng = np.random.default_rng(0)
    D = 16
    phi = rng.standard_normal((3, D, 1))
    gen = ConstantGenerator(np.zeros((2, D, 1)), random_skew(2, rng))
    pts = uniform_grid(Domain(1), D)
    for method in ("cayley", "euler-fwd", "euler-bwd"):
        out = integrate(gen, TimeGrid.uniform(5), pts, ad.Tensor(phi), method).data
        assert np.array_equal(out, phi)


@pytest.mark.parametrize("r", [2, 3, 7])
def test_step_matches_dense_cayley(r):
    rng = np.random.default_rng(r)
    D = 64
    U = rng.standard_normal((r, D))
    S = random_skew(r, rng)
    phi = np.eye(D)  # one-hot functions
    fast = low_rank_step(ad.Tensor(U), ad.Tensor(S), ad.Tensor(phi), D).data
    slow = (dense_cayley(U, S, D) @ phi.T).T
    assert np.linalg.norm(fast - slow) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(8, 80), st.floats(0.01, 3.0), st.integers(0, 2**31))
def test_discrete_inner_products_preserved(r, D, scale, seed):
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((r, D)) * scale
    S = random_skew(r, rng)
    phi = rng.standard_normal((4, D))
    out = low_rank_step(ad.Tensor(U), ad.Tensor(S), ad.Tensor(phi), D).data
    before, after = phi @ phi.T / D, out @ out.T / D
    assert np.abs(after - before).max() <= 1e-8 * max(np.abs(np.diag(before)).max(), 1.0)


def test_norm_preserved_through_trained_shape_network():
    params = GeneratorParams(1, 2, rank=4, seed=1, width=32, depth=2)
    rng = np.random.default_rng(0)
    for p in params.parameters():  # far from identity
        p.data = p.data + rng.standard_normal(p.shape) * 0.5
    pts = sample_quadrature(Domain(1), 100, seed=2)
    phi = rng.standard_normal((3, 100, 2))
    out, states = integrate(params, TimeGrid.random(10, seed=4), pts, ad.Tensor(phi), record=True)
    for s in states:
        assert np.abs(discrete_norms(s.data.reshape(3, 100, 2)) - discrete_norms(phi)).max() <= 1e-9


def test_euler_norm_factors():
    D = 64
    pts = uniform_grid(Domain(1), D)
    x = pts.points[:, 0]
    a, b = np.sqrt(2) * np.cos(2 * np.pi * x), np.sqrt(2) * np.sin(2 * np.pi * x)
    sigma, dt = 1.3, 0.1
    # K = sigma (a b^T - b a^T)/D, singular pair sigma on span{a, b}
    U = np.sqrt(sigma) * np.stack([a, b])[:, :, None]
    S = np.array([[0.0, -1.0], [1.0, 0.0]])
    gen = ConstantGenerator(U, S)
    phi = a[None, :, None]
    grid = TimeGrid(np.array([0.0, dt]))
    fwd = integrate(gen, grid, pts, ad.Tensor(phi), "euler-fwd").data
    bwd = integrate(gen, grid, pts, ad.Tensor(phi), "euler-bwd").data
    cay = integrate(gen, grid, pts, ad.Tensor(phi), "cayley").data
    n0 = np.sqrt(discrete_norms(phi)[0])
    assert np.sqrt(discrete_norms(fwd)[0]) / n0 == pytest.approx(np.sqrt(1 + (dt * sigma) ** 2), abs=1e-10)
    assert np.sqrt(discrete_norms(bwd)[0]) / n0 == pytest.approx(1 / np.sqrt(1 + (dt * sigma) ** 2), abs=1e-10)
    assert np.sqrt(discrete_norms(cay)[0]) / n0 == pytest.approx(1.0, abs=1e-12)


def test_euler_strictly_inflates_and_deflates():
    rng = np.random.default_rng(9)
    D = 40
    U = rng.standard_normal((3, D)) * 0.5
    S = random_skew(3, rng)
    phi = rng.standard_normal((5, D))
    n0 = discrete_norms(phi)
    fwd = low_rank_step(ad.Tensor(U), ad.Tensor(S), ad.Tensor(phi), D, "euler-fwd").data
    bwd = low_rank_step(ad.Tensor(U), ad.Tensor(S), ad.Tensor(phi), D, "euler-bwd").data
    assert np.all(discrete_norms(fwd) > n0) and np.all(discrete_norms(bwd) < n0)


def test_second_order_convergence_against_expm():
    rng = np.random.default_rng(2)
    D, r = 32, 4
    U = rng.standard_normal((r, D, 1)) * 0.4
    S = random_skew(r, rng)
    gen = ConstantGenerator(U, S)
    pts = uniform_grid(Domain(1), D)
    K = U[:, :, 0].T @ S @ U[:, :, 0] / D
    exact = expm(K)
    errs = []
    for L in (20, 40):
        out = integrate(gen, TimeGrid.uniform(L), pts, ad.Tensor(np.eye(D)[:, :, None])).data[:, :, 0]
        errs.append(np.linalg.norm(out.T - exact))
    assert errs[0] >= 3.5 * errs[1]


def test_ill_conditioned_step_raises_integration_error():
    # G = diag(1, 0) and S = [[0, s], [-s, 0]] give I - G S / 2 = [[1, -s/2], [0, 1]], condition ~ s^2 / 4
    D = 8
    U = np.zeros((2, D))
    U[0, 0] = np.sqrt(D)
    S = np.array([[0.0, 1e8], [-1e8, 0.0]])
    with pytest.raises(IntegrationError) as exc:
        low_rank_step(ad.Tensor(U), ad.Tensor(S), ad.Tensor(np.eye(D)), D, "cayley", step=7)
    assert exc.value.step == 7 and exc.value.condition > 1e12


def test_batched_matches_single_calls():
    params = GeneratorParams(1, 1, rank=3, seed=0, width=16, depth=2)
    pts = sample_quadrature(Domain(1), 50, seed=1)
    grid = TimeGrid.uniform(4)
    idx = IndexPrior(1).ordered(2)
    both = apply_q(params, idx, pts, grid).data
    for n in range(2):
        one = apply_q(params, idx[n : n + 1], pts, grid).data
        assert np.array_equal(one[0], both[n])


def test_apply_q_gram_and_near_identity():
    params = GeneratorParams(1, 1, rank=10, seed=3, width=32, depth=2)
    pts = sample_quadrature(Domain(1), 4096, seed=5)
    idx = IndexPrior(1).ordered(8)
    out = apply_q(params, idx, pts, TimeGrid.uniform(10)).data
    assert np.abs(gram(out) - np.eye(8)).max() <= 0.05
    from orthoflow.function_space import fourier_values

    ref = fourier_values(idx, pts, 1)
    assert np.abs(out - ref).max() <= 1e-2


def test_cayley_step_single_time():
    params = GeneratorParams(1, 1, rank=3, seed=0, width=16, depth=2)
    pts = sample_quadrature(Domain(1), 20, seed=0)
    phi = np.random.default_rng(1).standard_normal((20, 1))
    one = cayley_step(params, 0.5, 1.0, pts, ad.Tensor(phi)).data
    full = integrate(params, TimeGrid.uniform(1), pts, ad.Tensor(phi)).data
    assert np.allclose(one, full, atol=1e-14)


def test_gradient_through_five_steps():
    params = GeneratorParams(1, 1, rank=3, seed=2, width=16, depth=2)
    pts = sample_quadrature(Domain(1), 24, seed=0)
    target = np.sin(6 * pts.points)[None]
    grid = TimeGrid.uniform(5)
    idx = IndexPrior(1).ordered(3)
    rng = np.random.default_rng(4)
    for p in params.parameters():
        p.data = p.data + rng.standard_normal(p.shape) * 0.3

    def loss():
        q = apply_q(params, idx, pts, grid)
        d = q - ad.Tensor(target)
        return ad.mean(d * d)

    params.zero_grad()
    loss().backward()
    named = params.named_parameters()
    for name in ["U.in_space", "U.linear1.weight", "U.head.bias", "U.residual.linear0.weight", "M.mlp.head.weight"]:
        p = named[name]
        for _ in range(2):
            i = tuple(rng.integers(0, s) for s in p.shape)
            fd = ad.central_difference(lambda: loss().item(), p.data, i)
            assert abs(fd - p.grad[i]) <= 1e-3 * max(abs(fd), 1e-7), (name, i)


def test_integrate_factors_record():
    rng = np.random.default_rng(0)
    U = rng.standard_normal((3, 2, 10))
    S = np.stack([random_skew(2, rng) for _ in range(3)])
    phi = rng.standard_normal((2, 10))
    out, states = integrate_factors(ad.Tensor(U), ad.Tensor(S), ad.Tensor(phi), 10, record=True)
    assert len(states) == 4 and np.array_equal(states[-1].data, out.data)
