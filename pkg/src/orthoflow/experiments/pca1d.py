"""One-dimensional functional PCA on a discontinuous synthetic family.

Each sample is ``sign * (sin(2 pi k x) + 2x)`` left of ``x = 0.5`` and
``sign * (-sin(2 pi k x) + 2x - 2)`` right of it, with a fair random sign
and ``k`` geometric with success probability 1/3.  Every sample jumps by
``-2 sign`` at the midpoint, which a truncated Fourier basis resolves only
slowly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..cayley import TimeGrid, apply_q
from ..errors import ConfigError
from ..fields import GeneratorParams, MeanField
from ..function_space import Domain, IndexPrior, QuadratureSet, as_rng, fourier_values, uniform_grid
from ..objectives import AnalyticDataset, GriddedDataset, pca_terms
from ..training import Adam, Task, norm_drift, register, stream_rng
from .common import nested_captured_energy, plot_lines, write_csv

JUMP_AT = 0.5


@dataclass
class Synthetic1D:
    sign: float
    k: int

    def __call__(self, points):
        x = points.points[:, 0] if isinstance(points, QuadratureSet) else np.asarray(points, dtype=np.float64)
        x = x.reshape(-1)
        wave = np.sin(2.0 * np.pi * self.k * x)
        left = wave + 2.0 * x
        right = -wave + 2.0 * x - 2.0
        return (self.sign * np.where(x <= JUMP_AT, left, right))[:, None]


def sample_synthetic_1d(seed=None):
    rng = as_rng(seed)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return Synthetic1D(sign, int(rng.geometric(1.0 / 3.0)))


def synthetic_dataset():
    return AnalyticDataset(sampler=sample_synthetic_1d, channels=1)


def held_out_samples(count, points, seed):
    rng = as_rng(seed)
    return np.stack([sample_synthetic_1d(rng)(points)[:, 0] for _ in range(count)])


# -- baselines --------------------------------------------------------------------------


@dataclass
class FinitePCA:
    """Empirical covariance eigenbasis of grid-sampled functions."""

    nodes: np.ndarray  # (G,)
    mean: np.ndarray  # (G,)
    components: np.ndarray  # (n, G), orthonormal for the (1/G) sum
    eigenvalues: np.ndarray

    def evaluate(self, x):
        """Components at arbitrary ``x`` by linear interpolation, ``(n, len(x))``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return np.stack([np.interp(x, self.nodes, c) for c in self.components])

    def evaluate_mean(self, x):
        return np.interp(np.asarray(x, dtype=np.float64).reshape(-1), self.nodes, self.mean)


def finite_pca_baseline(samples, n_components):
    """``samples`` is ``(m, G)`` on the cell-centred grid ``(j + 1/2) / G``."""
    X = np.asarray(samples, dtype=np.float64)
    m, G = X.shape
    if m < 1:
        raise ConfigError("finite PCA needs at least one sample")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / m
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    comps = vecs[:, order].T * np.sqrt(G)
    nodes = (np.arange(G) + 0.5) / G
    # eigenvalues of the covariance operator for the (1/G) inner product
    return FinitePCA(nodes, mean, comps, np.maximum(vals[order], 0.0) / G)


def fourier_basis(count, points):
    idx = IndexPrior(1).ordered(count)
    return fourier_values(idx, points, 1)[:, :, 0]


# -- training task ------------------------------------------------------------------------

PCA_DEFAULTS = dict(
    rank=30,
    steps_L=20,
    D=64,
    tau=1e-3,
    n_tail=16,
    budget=3000,
    data_batch=1,
    eval_samples=64,
    eval_cutoff=16,
    dataset="",
)


@register("pca")
class PCATask(Task):
    metric_names = ("mean-loss",)
    eval_names = ("captured-energy", "fourier-energy")

    def __init__(self, config):
        super().__init__(config)
        if config.dim != 1 and not config.get("dataset"):
            raise ConfigError("the built-in synthetic dataset is one-dimensional")
        seed = int(config["seed"])
        init = stream_rng(seed, "init", 0)
        bandwidth = config["bandwidth"] or None
        self.params = GeneratorParams(
            config.dim, config.channels, config["rank"], bandwidth, init, config["width"], config["depth"]
        )
        self.mean = MeanField(config.dim, config.channels, seed=init)
        self.modules = {"theta": self.params, "psi": self.mean}
        self.optimizers = {
            "theta": Adam(self.params.named_parameters(), lr=config["lr"], clip=config["clip"]),
            "psi": Adam(self.mean.named_parameters(), lr=config["mean_lr"], clip=config["clip"]),
        }
        self.prior = IndexPrior(config.dim, config.channels, alpha=config["alpha"] or None)
        path = config.get("dataset")
        self.dataset = GriddedDataset.load(path) if path else synthetic_dataset()
        self._eval_cache = None

    def step_loss(self, points, grid, index_rng, data_rng):
        cfg = self.config
        draw = self.prior.stratified_draw(cfg["tau"], cfg["n_tail"], index_rng)
        q = apply_q(self.params, draw.indices, points, grid)
        nu = self.mean(points)
        objective = None
        mean_loss = None
        batch = cfg["data_batch"]
        for _ in range(batch):
            X = self.dataset.sample(data_rng)(points)
            X = X.reshape(points.size, -1)
            sq, ml = pca_terms(q, X, nu)
            j = ad.sum(sq * draw.weights)
            objective = j if objective is None else objective + j
            mean_loss = ml if mean_loss is None else mean_loss + ml
        objective = ad.scale(objective, 1.0 / batch)
        mean_loss = ad.scale(mean_loss, 1.0 / batch)
        # the two terms touch disjoint parameters, so one backward serves both
        loss = mean_loss - objective
        drift = norm_drift(q, fourier_values(draw.indices, points, self.params.channels))
        return loss, {"objective": objective.item(), "norm-drift": drift, "mean-loss": mean_loss.item()}

    def _eval_data(self, points):
        if self._eval_cache is None or self._eval_cache[0] is not points:
            rng = stream_rng(int(self.config["seed"]), "eval", 0)
            X = np.stack(
                [self.dataset.sample(rng)(points).reshape(points.size) for _ in range(self.config["eval_samples"])]
            )
            cutoff = self.config["eval_cutoff"]
            fourier, _ = nested_captured_energy(fourier_basis(cutoff, points), X)
            self._eval_cache = (points, X, fourier[-1])
        return self._eval_cache[1:]

    def evaluate(self, points, grid):
        X, fourier = self._eval_data(points)
        cutoff = self.config["eval_cutoff"]
        basis = learned_basis(self.params, cutoff, points, grid)
        nu = self.mean(points).data[:, 0]
        captured, _ = nested_captured_energy(basis, X, nu)
        return {"captured-energy": captured[-1], "fourier-energy": fourier}


def learned_basis(params, count, points, grid=None, chunk=64):
    """First ``count`` learned functions ``Q phi_i`` in rank order, ``(count, D)``."""
    grid = grid or TimeGrid.uniform(20)
    idx = IndexPrior(params.dim, params.channels).ordered(count)
    out = [apply_q(params, idx[s : s + chunk], points, grid).data[:, :, 0] for s in range(0, count, chunk)]
    return np.concatenate(out)


# -- report --------------------------------------------------------------------------------


@dataclass
class PCAReport:
    cutoffs: np.ndarray
    learned_error: np.ndarray
    fourier_error: np.ndarray
    finite_error: np.ndarray
    learned_energy: np.ndarray
    fourier_energy: np.ndarray
    total_energy: float
    max_gram_deviation: float


def pca_report(task, samples=256, max_cutoff=128, eval_points=None, grid_size=64, seed=None, steps_L=None):
    """Reconstruction error and captured energy against the baselines."""
    cfg = task.config
    seed = int(cfg["seed"]) if seed is None else seed
    points = eval_points or uniform_grid(Domain(1), cfg["D"] * cfg["eval_multiplier"])
    grid = TimeGrid.uniform(steps_L or cfg["steps_L"])
    # past G - 1 functions the uniform grid aliases Fourier elements onto each other
    max_cutoff = min(max_cutoff, points.size - 1)
    rng = stream_rng(seed, "eval", 1)
    X = np.stack([task.dataset.sample(rng)(points).reshape(points.size) for _ in range(samples)])
    nu = task.mean(points).data[:, 0]
    learned = learned_basis(task.params, max_cutoff, points, grid)
    fourier = fourier_basis(max_cutoff, points)
    gram = learned @ learned.T / points.size
    l_cap, total = nested_captured_energy(learned, X, nu)
    f_cap, _ = nested_captured_energy(fourier, X, nu)
    # finite PCA from an independent training set on a coarse grid
    train_grid = uniform_grid(Domain(1), grid_size)
    train_rng = stream_rng(seed, "eval", 2)
    train = np.stack([task.dataset.sample(train_rng)(train_grid).reshape(grid_size) for _ in range(4 * samples)])
    fpca = finite_pca_baseline(train, min(max_cutoff, grid_size))
    fin_basis = fpca.evaluate(points.points[:, 0])
    fin_cap, _ = nested_captured_energy(fin_basis, X, nu)
    finite_err = np.full(max_cutoff, np.nan)
    finite_err[: fin_cap.size] = total - fin_cap
    finite_err[fin_cap.size :] = total - fin_cap[-1]
    return PCAReport(
        cutoffs=np.arange(1, max_cutoff + 1),
        learned_error=np.maximum(total - l_cap, 0.0),
        fourier_error=np.maximum(total - f_cap, 0.0),
        finite_error=np.maximum(finite_err, 0.0),
        learned_energy=l_cap,
        fourier_energy=f_cap,
        total_energy=total,
        max_gram_deviation=float(np.abs(gram - np.eye(max_cutoff)).max()),
    )


def write_pca_report(report, out_dir, plots=True):
    rows = zip(
        report.cutoffs,
        report.learned_error,
        report.fourier_error,
        report.finite_error,
        report.learned_energy,
        report.fourier_energy,
    )
    path = os.path.join(out_dir, "reconstruction.csv")
    write_csv(path, ["cutoff", "learned-error", "fourier-error", "finite-pca-error", "learned-energy", "fourier-energy"], rows)
    if plots:
        c = report.cutoffs
        plot_lines(
            os.path.join(out_dir, "reconstruction.svg"),
            {"learned": (c, report.learned_error), "fourier": (c, report.fourier_error), "finite PCA": (c, report.finite_error)},
            xlabel="cutoff",
            ylabel="reconstruction error",
            logy=True,
        )
    return path
