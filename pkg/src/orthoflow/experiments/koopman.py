"""Koopman operator of a Taylor-Green vortex on the torus.

The learned orthogonal flow is fitted so that ``Q phi_i`` matches
``phi_i o Psi`` where ``Psi`` advances the vortex by ``dt``.  Iterating ``Q``
then predicts ``f o Psi^k`` while keeping the ``L2`` energy fixed, unlike
composing with a Runge-Kutta approximation of ``Psi``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..cayley import TimeGrid, apply_q, generator_factors, integrate_factors
from ..errors import ConfigError
from ..fields import GeneratorParams
from ..function_space import Domain, IndexPrior, QuadratureSet, as_rng, fourier_values, uniform_grid
from ..objectives import koopman_targets, koopman_terms
from ..training import Adam, Task, norm_drift, register, stream_rng
from .common import plot_lines, write_csv

RK_TABLEAUX = {
    1: ([], [1.0]),
    2: ([[0.5]], [0.0, 1.0]),  # explicit midpoint
    4: ([[0.5], [0.0, 0.5], [0.0, 0.0, 1.0]], [1 / 6, 1 / 3, 1 / 3, 1 / 6]),
}


@dataclass
class TaylorGreenFlow:
    """``v = A (sin 2 pi x cos 2 pi y, -cos 2 pi x sin 2 pi y)``, advanced by explicit RK."""

    amplitude: float = 0.1
    dt: float = 0.5
    order: int = 4
    substeps: int = 8

    def velocity(self, pts):
        x, y = 2.0 * np.pi * pts[:, 0], 2.0 * np.pi * pts[:, 1]
        return self.amplitude * np.stack([np.sin(x) * np.cos(y), -np.cos(x) * np.sin(y)], axis=1)

    def advance(self, pts, dt):
        if self.order not in RK_TABLEAUX:
            raise ConfigError(f"Runge-Kutta order must be one of {sorted(RK_TABLEAUX)}, got {self.order}")
        a, b = RK_TABLEAUX[self.order]
        x = np.asarray(pts, dtype=np.float64)
        h = dt / self.substeps
        for _ in range(self.substeps):
            stages = [self.velocity(x)]
            for row in a:
                xs = x + h * sum(c * k for c, k in zip(row, stages))
                stages.append(self.velocity(xs))
            x = x + h * sum(w * k for w, k in zip(b, stages))
        return x

    def __call__(self, pts, steps=1):
        pts = pts.points if isinstance(pts, QuadratureSet) else pts
        x = np.asarray(pts, dtype=np.float64)
        for _ in range(steps):
            x = self.advance(x, self.dt)
        return np.mod(x, 1.0)


def taylor_green_flow(points, dt=0.5, order=4, substeps=8, amplitude=0.1):
    return TaylorGreenFlow(amplitude, dt, order, substeps)(points)


KOOPMAN_DEFAULTS = dict(
    rank=10,
    steps_L=10,
    D=256,
    tau=1e-3,
    n_tail=32,
    budget=2000,
    width=128,
    amplitude=0.1,
    flow_dt=0.5,
    flow_substeps=8,
)


@register("koopman")
class KoopmanTask(Task):
    eval_names = ("loss",)

    def __init__(self, config):
        super().__init__(config)
        if config.dim != 2 or config.channels != 1:
            raise ConfigError("the Taylor-Green task lives on the two-torus with one channel")
        init = stream_rng(int(config["seed"]), "init", 0)
        self.params = GeneratorParams(2, 1, config["rank"], config["bandwidth"] or None, init, config["width"], config["depth"])
        self.modules = {"theta": self.params}
        self.optimizers = {"theta": Adam(self.params.named_parameters(), lr=config["lr"], clip=config["clip"])}
        self.prior = IndexPrior(2, 1, alpha=config["alpha"] or None)
        self.flow = TaylorGreenFlow(config["amplitude"], config["flow_dt"], 4, config["flow_substeps"])

    def step_loss(self, points, grid, index_rng, data_rng):
        cfg = self.config
        draw = self.prior.stratified_draw(cfg["tau"], cfg["n_tail"], index_rng)
        q = apply_q(self.params, draw.indices, points, grid)
        loss = ad.sum(koopman_terms(q, koopman_targets(draw.indices, self.flow, points)) * draw.weights)
        drift = norm_drift(q, fourier_values(draw.indices, points, 1))
        return loss, {"objective": loss.item(), "norm-drift": drift}

    def evaluate(self, points, grid):
        return {"loss": stratum_loss(self, points, grid)}


def stratum_loss(task, points, grid):
    """Deterministic one-step loss over the exact stratum, renormalised by its mass."""
    idx = task.prior.stratum(task.config["tau"])
    w = task.prior.probability(idx)
    q = apply_q(task.params, idx, points, grid).data
    terms = koopman_terms(q, koopman_targets(idx, task.flow, points)).data
    return float(np.sum(w * terms) / np.sum(w))


# -- rollout --------------------------------------------------------------------------------


def initial_condition(prior, tau, seed=None):
    """Band-limited random function on the stratum: coefficients and indices."""
    rng = as_rng(seed)
    idx = prior.stratum(tau)
    idx = idx[np.any(idx[:, :-1] != 0, axis=1)]  # drop the constant, which every flow preserves
    coeff = rng.standard_normal(idx.shape[0]) * np.sqrt(prior.probability(idx))
    return idx, coeff / np.linalg.norm(coeff)


@dataclass
class RolloutReport:
    energies: dict  # name -> (n + 1,) energy trace
    snapshots: dict  # name -> (n + 1, D) values
    points: np.ndarray

    def relative_drift(self, name):
        e = self.energies[name]
        return float(np.abs(e - e[0]).max() / e[0])


def koopman_rollout(task, steps=20, points=None, grid=None, seed=None, orders=(1, 2, 4)):
    cfg = task.config
    points = points or uniform_grid(Domain(2), 64)
    grid = grid or TimeGrid.uniform(cfg["steps_L"])
    seed = int(cfg["seed"]) if seed is None else seed
    idx, coeff = initial_condition(task.prior, cfg["tau"], stream_rng(seed, "eval", 3))

    def f0(pts):
        return coeff @ fourier_values(idx, pts, 1)[:, :, 0]

    D = points.size
    values = f0(points)
    learned = [values]
    if steps > 0:
        # the discrete map is fixed, so its factors are evaluated once
        U_all, S_all = generator_factors(task.params, grid, points)
        U_all, S_all = ad.Tensor(U_all.data), ad.Tensor(S_all.data)
        state = ad.Tensor(values[None, :])
        for _ in range(steps):
            state = integrate_factors(U_all, S_all, state, D)
            learned.append(state.data[0].copy())
    snaps = {"learned": np.stack(learned)}
    for order in orders:
        flow = TaylorGreenFlow(task.flow.amplitude, task.flow.dt, order, task.flow.substeps)
        trace = [values]
        x = points.points
        for _ in range(steps):
            x = flow(x)
            trace.append(f0(x))
        snaps[f"rk{order}"] = np.stack(trace)
    energies = {k: np.sum(v**2, axis=1) / D for k, v in snaps.items()}
    return RolloutReport(energies, snaps, points.points)


def write_rollout(report, out_dir, plots=True):
    names = list(report.energies)
    n = report.energies[names[0]].size
    rows = [[k] + [report.energies[name][k] for name in names] for k in range(n)]
    write_csv(os.path.join(out_dir, "energy.csv"), ["step"] + [f"{name}-energy" for name in names], rows)
    drift = [(name, report.relative_drift(name)) for name in names]
    write_csv(os.path.join(out_dir, "drift.csv"), ["solver", "relative-drift"], drift)
    np.save(os.path.join(out_dir, "snapshots.npy"), np.stack([report.snapshots[name] for name in names]))
    if plots:
        steps = np.arange(n)
        plot_lines(
            os.path.join(out_dir, "energy.svg"),
            {name: (steps, report.energies[name]) for name in names},
            xlabel="step",
            ylabel="L2 energy",
        )
