"""Eigenfunctions of a two-moons classifier's tangent kernel.

The classifier is a ``2 -> 64 -> 64 -> 1`` tanh network trained with Adam on
a binary cross-entropy loss.  Its per-sample parameter gradients are
computed in closed form so both the learned objective and the grid
eigensolver see the same kernel.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh, subspace_angles
from sklearn.datasets import make_moons

from .. import autodiff as ad
from ..cayley import TimeGrid, apply_q
from ..errors import ConfigError, OrthoflowError
from ..fields import GeneratorParams
from ..function_space import Domain, IndexPrior, fourier_values, uniform_grid
from ..objectives import ntk_terms
from ..training import Adam, Task, norm_drift, register, stream_rng
from .common import write_csv
from .diagonalization import ritz_rotate, tie_groups

SNAPSHOT_STEPS = (1, 250, 500, 5000)
MAX_KERNEL_SIDE = 4096


def two_moons(count=200, noise=0.1, seed=0, margin=0.15):
    """Two-moons points affinely scaled into ``[margin, 1 - margin]^2``."""
    x, y = make_moons(n_samples=count, noise=noise, random_state=seed)
    lo, hi = x.min(axis=0), x.max(axis=0)
    x = margin + (1.0 - 2.0 * margin) * (x - lo) / (hi - lo)
    return x, y.astype(np.float64)


class TanhClassifier:
    """Scalar-output tanh MLP with analytic per-sample gradients."""

    names = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, hidden=64, seed=None, fan_in=2):
        rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
        h = hidden

        def glorot(a, b):
            bound = np.sqrt(6.0 / (a + b))
            return rng.uniform(-bound, bound, (a, b))

        self.params = {
            "w1": ad.Tensor(glorot(fan_in, h), requires_grad=True),
            "b1": ad.Tensor(np.zeros(h), requires_grad=True),
            "w2": ad.Tensor(glorot(h, h), requires_grad=True),
            "b2": ad.Tensor(np.zeros(h), requires_grad=True),
            "w3": ad.Tensor(glorot(h, 1), requires_grad=True),
            "b3": ad.Tensor(np.zeros(1), requires_grad=True),
        }

    @property
    def size(self):
        return sum(p.data.size for p in self.params.values())

    def _forward(self, x):
        p = {k: v.data for k, v in self.params.items()}
        h1 = np.tanh(x @ p["w1"] + p["b1"])
        h2 = np.tanh(h1 @ p["w2"] + p["b2"])
        return h1, h2, (h2 @ p["w3"] + p["b3"])[:, 0]

    def __call__(self, x):
        return self._forward(np.asarray(x, dtype=np.float64))[2]

    def per_sample_grads(self, x):
        """Gradient of the scalar output per input row, ``(D, P)`` in ``names`` order."""
        x = np.asarray(x, dtype=np.float64)
        p = {k: v.data for k, v in self.params.items()}
        h1, h2, _ = self._forward(x)
        n = x.shape[0]
        d2 = (1.0 - h2**2) * p["w3"][:, 0]
        d1 = (d2 @ p["w2"].T) * (1.0 - h1**2)
        parts = [
            (x[:, :, None] * d1[:, None, :]).reshape(n, -1),
            d1,
            (h1[:, :, None] * d2[:, None, :]).reshape(n, -1),
            d2,
            h2,
            np.ones((n, 1)),
        ]
        return np.concatenate(parts, axis=1)

    def loss_and_grads(self, x, y):
        """Mean binary cross-entropy on logits and its parameter gradients."""
        z = self(x)
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        residual = (1.0 / (1.0 + np.exp(-z)) - y) / x.shape[0]
        flat = residual @ self.per_sample_grads(x)
        grads, off = {}, 0
        for k in self.names:
            size = self.params[k].data.size
            grads[k] = flat[off : off + size].reshape(self.params[k].shape)
            off += size
        return loss, grads

    def arrays(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays):
        for k in self.names:
            self.params[k].data = np.array(arrays[k], dtype=np.float64)


def train_classifier(x, y, steps, seed=None, lr=1e-3, snapshots=SNAPSHOT_STEPS):
    """Full-batch Adam; returns the network and ``{step: parameter arrays}``."""
    net = TanhClassifier(seed=seed)
    opt = Adam(net.params, lr=lr, clip=None)
    saved = {0: net.arrays()} if 0 in snapshots else {}
    losses = []
    for step in range(1, steps + 1):
        loss, grads = net.loss_and_grads(x, y)
        losses.append(loss)
        for k, g in grads.items():
            net.params[k].grad = g
        opt.step()
        opt.zero_grad()
        if step in snapshots:
            saved[step] = net.arrays()
    return net, saved, np.asarray(losses)


def accuracy(net, x, y):
    return float(np.mean((net(x) > 0.0) == (y > 0.5)))


# -- grid baseline ---------------------------------------------------------------------------


@dataclass
class GridEigen:
    points: np.ndarray  # (G^2, 2)
    eigenvalues: np.ndarray  # (k,)
    functions: np.ndarray  # (k, G^2), unit norm for the (1/G^2) sum


def ntk_grid_baseline(network, side=32, k=3):
    count = side * side
    if count > MAX_KERNEL_SIDE:
        raise OrthoflowError(f"kernel matrix {count}x{count} exceeds the {MAX_KERNEL_SIDE}^2 memory guard")
    pts = uniform_grid(Domain(2), side).points
    g = network.per_sample_grads(pts)
    K = g @ g.T
    vals, vecs = eigh(K / count, subset_by_index=[count - k, count - 1])
    order = np.argsort(vals)[::-1]
    return GridEigen(pts, vals[order], vecs[:, order].T * np.sqrt(count))


def principal_cosines(A, B):
    """Cosines of the principal angles between the row spaces of ``A`` and ``B``."""
    return np.cos(subspace_angles(np.asarray(A).T, np.asarray(B).T))


# -- training task ----------------------------------------------------------------------------

NTK_DEFAULTS = dict(
    rank=10,
    steps_L=10,
    D=256,
    tau=7e-4,
    n_tail=32,
    budget=2000,
    width=128,
    snapshot=5000,
    moons=200,
    moons_noise=0.1,
    classifier_lr=1e-3,
)


@register("ntk")
class NTKTask(Task):
    eval_names = ("objective",)

    def __init__(self, config):
        super().__init__(config)
        if config.dim != 2 or config.channels != 1:
            raise ConfigError("the two-moons task lives on the unit square with one channel")
        seed = int(config["seed"])
        init = stream_rng(seed, "init", 0)
        self.params = GeneratorParams(2, 1, config["rank"], config["bandwidth"] or None, init, config["width"], config["depth"])
        self.modules = {"theta": self.params}
        self.optimizers = {"theta": Adam(self.params.named_parameters(), lr=config["lr"], clip=config["clip"])}
        self.prior = IndexPrior(2, 1, alpha=config["alpha"] or None)
        task_rng = stream_rng(seed, "task", 0)
        self.x, self.y = two_moons(config["moons"], config["moons_noise"], int(task_rng.integers(2**31)))
        snap = config["snapshot"]
        self.network, self.snapshots, self.losses = train_classifier(
            self.x, self.y, snap, seed=task_rng, lr=config["classifier_lr"], snapshots=(snap,)
        )

    def step_loss(self, points, grid, index_rng, data_rng):
        cfg = self.config
        draw = self.prior.stratified_draw(cfg["tau"], cfg["n_tail"], index_rng)
        q = apply_q(self.params, draw.indices, points, grid)
        objective = ad.sum(ntk_terms(q, self.network.per_sample_grads(points.points)) * draw.weights)
        drift = norm_drift(q, fourier_values(draw.indices, points, 1))
        return ad.neg(objective), {"objective": objective.item(), "norm-drift": drift}

    def evaluate(self, points, grid):
        idx = self.prior.stratum(self.config["tau"])
        q = apply_q(self.params, idx, points, grid).data
        terms = ntk_terms(q, self.network.per_sample_grads(points.points)).data
        return {"objective": float(np.sum(self.prior.probability(idx) * terms))}


@dataclass
class NTKReport:
    cosines: np.ndarray
    grid_eigenvalues: np.ndarray
    learned_rayleigh: np.ndarray
    accuracy: float


def learned_top(task, k, points, grid):
    """Top-``k`` learned eigenfunctions on ``points`` after rotating within tie groups."""
    groups = [g for g in tie_groups(task.prior, 8 * k) if g[0] < k]
    count = groups[-1][-1] + 1
    idx = task.prior.ordered(count)
    F = apply_q(task.params, idx, points, grid).data[:, :, 0]
    g = task.network.per_sample_grads(points.points)
    D = points.size
    # quadratic form of the kernel operator in the sampled representation
    A = g @ g.T / (D * D)
    return ritz_rotate(F, A, groups)[:k], F


def ntk_report(task, side=32, k=3, grid=None):
    grid = grid or TimeGrid.uniform(task.config["steps_L"])
    base = ntk_grid_baseline(task.network, side, k)
    points = uniform_grid(Domain(2), side)
    top, _ = learned_top(task, k, points, grid)
    g = task.network.per_sample_grads(points.points)
    proj = top @ g / points.size
    rayleigh = np.sum(proj**2, axis=1)
    return NTKReport(principal_cosines(top, base.functions), base.eigenvalues, rayleigh, accuracy(task.network, task.x, task.y))


def write_ntk_report(report, out_dir):
    rows = [
        (i + 1, report.grid_eigenvalues[i], report.learned_rayleigh[i], report.cosines[i])
        for i in range(report.cosines.size)
    ]
    write_csv(os.path.join(out_dir, "ntk_alignment.csv"), ["rank", "grid-eigenvalue", "learned-rayleigh", "principal-cosine"], rows)
