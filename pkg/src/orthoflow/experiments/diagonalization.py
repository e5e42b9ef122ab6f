"""Recovering the eigenpairs of an operator built from known eigenfunctions.

``A = sum_m lambda_m u_m (x) u_m`` where the ``u_m`` are orthonormalised
periodic bumps.  Periodic analytic bumps make uniform-grid quadrature
spectrally exact, so the discrete operator on any fine uniform grid has
exactly the prescribed spectrum.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..cayley import TimeGrid, apply_q
from ..errors import ConfigError
from ..fields import GeneratorParams
from ..function_space import Domain, IndexPrior, QuadratureSet, fourier_values, uniform_grid
from ..objectives import KernelOperator, quadratic_terms
from ..training import Adam, Task, norm_drift, register, stream_rng
from .common import write_csv

SPECTRUM = (0.5, 0.4, 0.3, 0.2, 0.1)
REFERENCE_GRID = 1 << 14


class PeriodicBumps:
    """Orthonormalised von Mises bumps ``exp(kappa cos(2 pi (x - c_m)))``."""

    def __init__(self, count=5, kappa=8.0):
        self.centres = 0.1 + 0.8 * np.arange(count) / max(count - 1, 1)
        self.kappa = kappa
        x = (np.arange(REFERENCE_GRID) + 0.5) / REFERENCE_GRID
        raw = self.raw(x)
        # lower-triangular mixing that makes the bumps orthonormal (Gram-Schmidt order)
        G = raw @ raw.T / REFERENCE_GRID
        chol = np.linalg.cholesky(G)
        self.mixing = np.linalg.inv(chol)

    def raw(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return np.exp(self.kappa * (np.cos(2.0 * np.pi * (x[None, :] - self.centres[:, None])) - 1.0))

    def __call__(self, x):
        """Values ``(count, len(x))``."""
        if isinstance(x, QuadratureSet):
            x = x.points[:, 0]
        return self.mixing @ self.raw(x)


def spectral_operator(spectrum=SPECTRUM, functions=None):
    """``A`` acting on sampled functions through ``(1/D) sum`` projections."""
    lam = np.asarray(spectrum, dtype=np.float64)
    funcs = functions or PeriodicBumps(len(lam))

    def apply(values, points):
        values = ad.as_tensor(values)
        n, D, _ = values.shape
        u = funcs(points)  # (m, D)
        proj = ad.scale(ad.matmul(ad.reshape(values, (n, D)), ad.Tensor(u.T)), 1.0 / D)  # (n, m)
        out = ad.matmul(proj, ad.Tensor(lam[:, None] * u))
        return ad.reshape(out, (n, D, 1))

    def kernel(x, y):
        return (funcs(x).T * lam) @ funcs(y)

    return KernelOperator(kernel=kernel, apply=apply), funcs


def proof_bound(prior, spectrum):
    """``sum_i p(i) lambda_i`` with the spectrum sorted in decreasing order."""
    lam = np.sort(np.asarray(spectrum, dtype=np.float64))[::-1]
    return float(np.sum(prior.probability(prior.ordered(lam.size)) * lam))


DIAG_DEFAULTS = dict(
    rank=10,
    steps_L=20,
    D=128,
    tau=1e-3,
    n_tail=16,
    budget=3000,
    width=128,
    spectrum=list(SPECTRUM),
    kappa=8.0,
)


@register("diag")
class DiagonalizationTask(Task):
    eval_names = ("full-objective", "bound")

    def __init__(self, config):
        super().__init__(config)
        if config.dim != 1 or config.channels != 1:
            raise ConfigError("the diagonalisation oracle is defined on the unit interval")
        init = stream_rng(int(config["seed"]), "init", 0)
        self.params = GeneratorParams(1, 1, config["rank"], config["bandwidth"] or None, init, config["width"], config["depth"])
        self.modules = {"theta": self.params}
        self.optimizers = {"theta": Adam(self.params.named_parameters(), lr=config["lr"], clip=config["clip"])}
        self.prior = IndexPrior(1, 1, alpha=config["alpha"] or None)
        self.spectrum = np.asarray(config["spectrum"], dtype=np.float64)
        self.operator, self.functions = spectral_operator(self.spectrum, PeriodicBumps(len(self.spectrum), config["kappa"]))

    def step_loss(self, points, grid, index_rng, data_rng):
        cfg = self.config
        draw = self.prior.stratified_draw(cfg["tau"], cfg["n_tail"], index_rng)
        q = apply_q(self.params, draw.indices, points, grid)
        objective = ad.sum(quadratic_terms(q, self.operator, points) * draw.weights)
        drift = norm_drift(q, fourier_values(draw.indices, points, 1))
        return ad.neg(objective), {"objective": objective.item(), "norm-drift": drift}

    def evaluate(self, points, grid):
        return {"full-objective": full_objective(self, points, grid), "bound": proof_bound(self.prior, self.spectrum)}


def learned_functions(params, count, points, grid, chunk=256):
    idx = IndexPrior(params.dim, params.channels).ordered(count)
    return np.concatenate(
        [apply_q(params, idx[s : s + chunk], points, grid).data[:, :, 0] for s in range(0, count, chunk)]
    )


def full_objective(task, points, grid):
    """Deterministic ``sum_i p(i) <Q phi_i, A Q phi_i>`` over a complete discrete basis.

    On a uniform grid of ``G`` points the first ``G - 1`` indices are
    discretely orthonormal, so this sum obeys the same upper bound as the
    continuous objective.
    """
    G = points.size
    F = learned_functions(task.params, G - 1, points, grid)
    U = task.functions(points)
    proj = F @ U.T / G
    quad = proj**2 @ task.spectrum
    return float(np.sum(task.prior.probability(task.prior.ordered(G - 1)) * quad))


def tie_groups(prior, count, rtol=1e-12):
    p = prior.probability(prior.ordered(count))
    groups, start = [], 0
    for i in range(1, count + 1):
        if i == count or abs(p[i] - p[start]) > rtol * p[start]:
            groups.append(list(range(start, i)))
            start = i
    return groups


def ritz_rotate(F, A, groups):
    """Rotate learned functions within each group of equal prior weight.

    The objective cannot distinguish functions that share a weight, so within
    a group only the span is determined; the Rayleigh-Ritz rotation picks the
    eigenvectors of ``A`` restricted to that span, in decreasing order.
    """
    out = F.copy()
    for g in groups:
        sub = F[g]
        B = sub @ A @ sub.T
        vals, vecs = np.linalg.eigh(0.5 * (B + B.T))
        out[g] = (vecs[:, ::-1]).T @ sub
    return out


@dataclass
class DiagReport:
    rayleigh: np.ndarray
    alignment: np.ndarray
    spectrum: np.ndarray
    full_objective: float
    bound: float


def diag_report(task, points=None, grid=None):
    cfg = task.config
    points = points or uniform_grid(Domain(1), cfg["D"] * cfg["eval_multiplier"])
    grid = grid or TimeGrid.uniform(cfg["steps_L"])
    m = len(task.spectrum)
    order = np.argsort(task.spectrum)[::-1]
    lam = task.spectrum[order]
    U = task.functions(points)[order]
    G = points.size
    A = (U.T * lam) @ U / G  # discrete operator as a matrix acting on value vectors
    # the tie group containing the last wanted rank is completed before rotating
    groups = [g for g in tie_groups(task.prior, 4 * m) if g[0] < m]
    count = groups[-1][-1] + 1
    F = learned_functions(task.params, count, points, grid)
    R = ritz_rotate(F, A / G, groups)[:m]
    rayleigh = np.einsum("id,de,ie->i", R, A, R) / G
    alignment = np.abs(R @ U.T / G).diagonal()
    return DiagReport(rayleigh, alignment, lam, full_objective(task, points, grid), proof_bound(task.prior, lam))


def write_diag_report(report, out_dir):
    rows = [
        (i + 1, report.spectrum[i], report.rayleigh[i], report.alignment[i]) for i in range(report.spectrum.size)
    ]
    write_csv(os.path.join(out_dir, "eigenpairs.csv"), ["rank", "eigenvalue", "rayleigh-quotient", "alignment"], rows)
    write_csv(
        os.path.join(out_dir, "objective.csv"),
        ["full-objective", "bound"],
        [(report.full_objective, report.bound)],
    )
