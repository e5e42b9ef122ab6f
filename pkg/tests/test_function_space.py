import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthoflow import autodiff as ad
from orthoflow.errors import ConfigError, ShapeError
from orthoflow.function_space import (
    Domain,
    FourierIndex,
    IndexPrior,
    eval_fourier,
    fourier_values,
    inner_product,
    partition_constant,
    sample_quadrature,
    stratified_expectation,
    uniform_grid,
)


def test_quadrature_stratified_1d():
    pts = sample_quadrature(Domain(1), 4, seed=3).points[:, 0]
    assert sorted(np.floor(pts * 4).astype(int)) == [0, 1, 2, 3]


def test_quadrature_stratified_2d():
    pts = sample_quadrature(Domain(2), 16, seed=3).points
    cells = {tuple(c) for c in np.floor(pts * 4).astype(int)}
    assert len(cells) == 16


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_quadrature_in_cube_and_reproducible(d, D, seed):
    a = sample_quadrature(Domain(d), D, seed).points
    b = sample_quadrature(Domain(d), D, seed).points
    assert a.shape == (D, d) and np.all((a >= 0) & (a <= 1)) and np.array_equal(a, b)


def test_quadrature_mean():
    pts = sample_quadrature(Domain(1), 10_000, seed=0).points
    assert abs(pts.mean() - 0.5) < 0.01


def test_fourier_examples():
    pts = sample_quadrature(Domain(1), 32, seed=0)
    dc = eval_fourier(FourierIndex((0,), 1), pts, channels=2).data
    assert np.all(dc[:, 1] == 1.0) and np.all(dc[:, 0] == 0.0)
    at0 = fourier_values(FourierIndex((1,)), np.zeros((1, 1)), 1)
    assert at0[0, 0, 0] == pytest.approx(np.sqrt(2.0))
    f = eval_fourier(FourierIndex((-2,)), sample_quadrature(Domain(1), 4096, seed=1))
    assert abs(inner_product(f, f).item() - 1.0) < 0.02


def test_fourier_dimension_mismatch():
    with pytest.raises(ShapeError):
        fourier_values(np.array([[1, 2, 0]]), np.zeros((3, 1)), 1)


def test_inner_product_examples():
    ones = ad.Tensor(np.ones((10, 1)))
    assert inner_product(ones, ones).item() == 1.0
    pts = sample_quadrature(Domain(1), 4096, seed=2)
    f, g = eval_fourier(FourierIndex((3,)), pts), eval_fourier(FourierIndex((-5,)), pts)
    assert abs(inner_product(f, g).item()) < 0.03
    a = eval_fourier(FourierIndex((1,), 0), pts, 2)
    b = eval_fourier(FourierIndex((1,), 1), pts, 2)
    assert inner_product(a, b).item() == 0.0
    with pytest.raises(ShapeError):
        inner_product(ones, ad.Tensor(np.ones((9, 1))))


def test_mc_orthogonality_low_frequencies():
    pts = sample_quadrature(Domain(1), 4096, seed=4)
    idx = np.array([[k, 0] for k in range(-16, 17)])
    F = fourier_values(idx, pts, 1)[:, :, 0]
    G = F @ F.T / 4096
    assert np.abs(G - np.diag(np.diag(G))).max() < 0.05


def test_partition_constant_closed_form():
    assert partition_constant(1.0, 1) == pytest.approx(np.pi / np.tanh(np.pi), abs=1e-4)
    with pytest.raises(ConfigError):
        partition_constant(0.5, 1)
    with pytest.raises(ConfigError):
        IndexPrior(2, alpha=1.0)


def test_partition_constant_2d_against_row_sums():
    # sum_k (a^2 + k^2)^-2 in closed form per row, rows summed to 1e6 plus their a^-3 tail
    j = np.arange(-10**6, 10**6 + 1, dtype=np.float64)
    a = np.sqrt(1.0 + j**2)
    pa = np.pi * a
    rows = np.pi / (2 * a**3) / np.tanh(pa) + np.pi**2 / (2 * a**2) * (2.0 * np.exp(-np.minimum(pa, 300.0)) / (1.0 - np.exp(-2.0 * pa))) ** 2
    exact = np.sum(rows) + np.pi / (2 * 1e6**2)
    assert partition_constant(2.0, 2) == pytest.approx(exact, abs=1e-8)


def test_prior_probability_properties():
    prior = IndexPrior(1)
    ordered = prior.ordered(50)
    p = prior.probability(ordered)
    assert np.argmax(p) == 0 and np.all(np.diff(p) <= 0)
    assert prior.probability(FourierIndex((0,))) == pytest.approx(1.0 / prior.Z)
    k = np.arange(-200000, 200001)
    total = np.sum((1.0 + k.astype(float) ** 2) ** -1.5) / prior.Z
    assert total == pytest.approx(1.0, abs=1e-4)


def test_ranking_is_strict_total_order():
    for prior in (IndexPrior(1), IndexPrior(2), IndexPrior(2, channels=3)):
        idx = prior.ordered(300)
        assert len({tuple(r) for r in idx}) == 300
        n2 = np.sum(idx[:, :-1] ** 2, axis=1)
        assert np.all(np.diff(n2) >= 0)


def test_stratum_threshold():
    prior = IndexPrior(1, alpha=1.0)
    S = prior.stratum(1e-3)
    p = prior.probability(S)
    assert np.all(p >= 1e-3)
    nxt = prior.ordered(S.shape[0] + 1)[-1]
    assert prior.probability(nxt[None])[0] < 1e-3
    with pytest.raises(ConfigError):
        prior.stratum(0.0)


def test_stratified_constant_integrand():
    prior = IndexPrior(1)
    draw = prior.stratified_draw(1e-3, 16, seed=0)
    est = stratified_expectation(prior, 1e-3, 16, lambda idx: ad.Tensor(np.ones(len(idx))), seed=0).item()
    expected = prior.probability(prior.stratum(1e-3)).sum() + (16 - draw.tail_rejected) / 16
    assert est == pytest.approx(expected)


def test_normalisation_oracle():
    prior = IndexPrior(1)
    s = prior.probability(prior.stratum(1e-3)).sum()
    rng = np.random.default_rng(0)
    pos = prior.sample_positions(100_000, rng)
    outside = np.mean(pos >= prior.stratum(1e-3).shape[0])
    assert s + outside == pytest.approx(1.0, abs=1e-3)


def test_empty_stratum_estimates_sum_of_squares():
    prior = IndexPrior(1)
    k = np.arange(-100, 101)
    exact = np.sum(((1.0 + k.astype(float) ** 2) ** -1.5 / prior.Z) ** 2)
    draws = prior.sample(100_000, seed=1)
    vals = prior.probability(draws)
    se = vals.std() / np.sqrt(vals.size)
    assert abs(vals.mean() - exact) <= 2 * se + 1e-12


def test_stratified_unbiased_over_seeds():
    prior = IndexPrior(1)

    def f(idx):
        return ad.Tensor(np.cos(0.3 * idx[:, 0]) + 0.1 * idx[:, 0] ** 0)

    k = np.arange(-50, 51)
    exact = np.sum(prior.probability(np.stack([k, 0 * k], 1)) * (np.cos(0.3 * k) + 0.1))
    ests = np.array([stratified_expectation(prior, 1e-2, 8, f, seed=s).item() for s in range(200)])
    se = ests.std(ddof=1) / np.sqrt(ests.size)
    # the |i| > 50 tail of p carries about 1e-4 of mass, bounded integrand keeps its effect tiny
    assert abs(ests.mean() - exact) <= 3 * se + 3e-4


def test_table_setting_stratum_for_alpha_one():
    prior = IndexPrior(1, alpha=1.0)
    S = prior.stratum(1e-3)
    k = np.arange(-1000, 1001)
    expected = np.sum((1.0 + k.astype(float) ** 2) ** -1.0 / prior.Z >= 1e-3)
    assert S.shape[0] == expected


def test_uniform_grid_is_cell_centred():
    g = uniform_grid(Domain(2), 4).points
    assert g.shape == (16, 2) and set(np.round(g[:, 0], 6)) == {0.125, 0.375, 0.625, 0.875}
