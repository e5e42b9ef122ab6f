"""Cayley against forward and backward Euler under one fixed generator.

The generator factors and time grid are drawn once and shared by all three
methods, so the traces differ only by the integration rule.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..cayley import METHODS, TimeGrid, integrate_factors
from ..function_space import Domain, IndexPrior, as_rng, fourier_values, gram, uniform_grid
from .common import plot_lines, write_csv

ABLATION_DEFAULTS = dict(rank=10, D=256, steps_L=20, functions=8, scale=1.0, seed=0, snapshots=[0, 10, 20])


def random_factors(rank, n_points, steps, seed=None, scale=1.0):
    """Random ``U`` (``(L, r, N)``, scaled by ``sqrt(dt)``) and skew ``S`` for a uniform grid."""
    rng = as_rng(seed)
    dt = 1.0 / steps
    U = rng.standard_normal((steps, rank, n_points)) * np.sqrt(scale * dt)
    M = rng.standard_normal((steps, rank, rank)) / np.sqrt(rank)
    return U, M - np.swapaxes(M, 1, 2)


def rank2_factors(sigma, dt, points, steps=1, pair=((1, 0), (-1, 0))):
    """Constant rank-2 generator ``sigma (a b^T - b a^T)`` with orthonormal ``a, b``."""
    ab = fourier_values(np.asarray(pair), points, 1)[:, :, 0]
    U = np.sqrt(sigma * dt) * ab
    S = np.array([[0.0, 1.0], [-1.0, 0.0]])
    return np.broadcast_to(U, (steps,) + U.shape).copy(), np.broadcast_to(S, (steps, 2, 2)).copy()


@dataclass
class AblationReport:
    norms: dict  # method -> (L + 1, n) squared norms
    grams: dict  # method -> {step: (n, n)}

    def mean_norm(self, method):
        return self.norms[method].mean(axis=1)


def run_ablation(U, S, phi0, n_points, snapshots=(0,)):
    """Evolve ``phi0`` (``(n, N)``) with every method; record norms and Gram snapshots."""
    U, S = ad.Tensor(np.asarray(U)), ad.Tensor(np.asarray(S))
    norms, grams = {}, {}
    for method in METHODS:
        _, states = integrate_factors(U, S, ad.Tensor(phi0), n_points, method, record=True)
        vals = np.stack([s.data for s in states])  # (L + 1, n, N)
        norms[method] = np.sum(vals**2, axis=2) / n_points
        grams[method] = {k: gram(vals[k][:, :, None]) for k in snapshots if k < len(states)}
    return AblationReport(norms, grams)


def ablate_integrators(rank=10, D=256, steps_L=20, functions=8, scale=1.0, seed=0, snapshots=(0, 10, 20)):
    points = uniform_grid(Domain(1), D)
    phi0 = fourier_values(IndexPrior(1).ordered(functions), points, 1)[:, :, 0]
    U, S = random_factors(rank, D, steps_L, seed, scale)
    return run_ablation(U, S, phi0, D, snapshots)


def step_factors(sigma, dt, D=64):
    """Measured per-step norm factors of a unit function under each method."""
    points = uniform_grid(Domain(1), D)
    U, S = rank2_factors(sigma, dt, points)
    phi0 = fourier_values(np.array([[1, 0]]), points, 1)[:, :, 0]
    report = run_ablation(U, S, phi0, D)
    return {m: float(np.sqrt(report.norms[m][1, 0] / report.norms[m][0, 0])) for m in METHODS}


def write_ablation(report, out_dir, plots=True):
    methods = list(report.norms)
    L = report.norms[methods[0]].shape[0]
    rows = [[k] + [report.mean_norm(m)[k] for m in methods] for k in range(L)]
    write_csv(os.path.join(out_dir, "norms.csv"), ["step"] + [f"{m}-norm" for m in methods], rows)
    gram_rows = []
    for m in methods:
        for step, G in report.grams[m].items():
            for i in range(G.shape[0]):
                for j in range(G.shape[1]):
                    gram_rows.append((m, step, i, j, G[i, j]))
    write_csv(os.path.join(out_dir, "gram.csv"), ["method", "step", "row", "col", "value"], gram_rows)
    if plots:
        steps = np.arange(L)
        plot_lines(
            os.path.join(out_dir, "norms.svg"),
            {m: (steps, report.mean_norm(m)) for m in methods},
            xlabel="step",
            ylabel="mean squared norm",
            logy=True,
        )
