"""Fast invariant checks bundled for a single command."""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from .cayley import dense_cayley, integrate_factors, low_rank_step
from .experiments.ablation import random_factors, step_factors
from .experiments.common import write_csv
from .function_space import Domain, IndexPrior, fourier_values, gram, uniform_grid
from .training import Checkpoint
from .universality import bump, givens_factorize, random_special_orthogonal, verify_universality


def _structure(rng):
    D = 256
    pts = uniform_grid(Domain(1), D)
    phi = fourier_values(IndexPrior(1).ordered(12), pts, 1)[:, :, 0]
    U, S = random_factors(10, D, 20, rng)
    out = integrate_factors(ad.Tensor(U), ad.Tensor(S), ad.Tensor(phi), D).data
    return np.abs(gram(out[:, :, None]) - gram(phi[:, :, None])).max(), 1e-10


def _dense(rng):
    worst = 0.0
    for r in (2, 5, 10):
        D = 48
        U = rng.standard_normal((r, D)) * 0.3
        M = rng.standard_normal((r, r))
        S = M - M.T
        phi = rng.standard_normal((3, D))
        fast = low_rank_step(ad.Tensor(U), ad.Tensor(S), ad.Tensor(phi), D).data
        slow = (dense_cayley(U, S, D) @ phi.T).T
        worst = max(worst, np.linalg.norm(fast - slow))
    return worst, 1e-10


def _euler(rng):
    sigma, dt = 1.7, 0.05
    f = step_factors(sigma, dt)
    expected = np.sqrt(1.0 + (dt * sigma) ** 2)
    return max(abs(f["euler-fwd"] - expected), abs(f["euler-bwd"] - 1.0 / expected), abs(f["cayley"] - 1.0)), 1e-10


def _givens(rng):
    worst = 0.0
    for n in range(2, 9):
        Q = random_special_orthogonal(n, rng)
        worst = max(worst, np.linalg.norm(givens_factorize(Q).matrix() - Q))
    return worst, 1e-10


def _bump(rng):
    t = np.linspace(0.0, 1.0, 100001)
    from scipy.integrate import simpson

    return abs(simpson(bump(t) ** 2, x=t) - 1.0) + abs(bump(0.0)) + abs(bump(1.0)), 1e-8


def _universality(rng):
    Q = random_special_orthogonal(3, rng)
    return verify_universality(Q, 100, n_points=256).frobenius_error, 1e-3


def _gradient(rng):
    A0 = rng.standard_normal((4, 4)) + 4.0 * np.eye(4)
    b = rng.standard_normal((4, 2))
    A = ad.Tensor(A0.copy(), requires_grad=True)

    def f():
        x = ad.linear_solve(A, ad.Tensor(b))
        return ad.sum(ad.silu(x) * ad.sin(x))

    f().backward()
    worst = 0.0
    for idx in [(0, 0), (1, 2), (3, 1)]:
        fd = ad.central_difference(lambda: f().item(), A.data, idx)
        worst = max(worst, abs(fd - A.grad[idx]) / max(abs(fd), 1e-6))
    return worst, 1e-5


def _checkpoint(rng):
    arrays = {"w": rng.standard_normal((3, 4)), "count": np.array([7], dtype=np.int64)}
    blob = Checkpoint("[training]\nseed = 1\n", 5, arrays).to_bytes()
    again = Checkpoint.from_bytes(blob).to_bytes()
    return float(blob != again), 0.0


CHECKS = {
    "structure-preservation": _structure,
    "dense-equivalence": _dense,
    "euler-factors": _euler,
    "givens-reconstruction": _givens,
    "bump-normalisation": _bump,
    "universality-small": _universality,
    "solve-gradient": _gradient,
    "checkpoint-roundtrip": _checkpoint,
}


def run_selftest(seed=0, out=None, echo=True):
    """Run every check; returns the number of failures."""
    rows = []
    failures = 0
    for i, (name, check) in enumerate(CHECKS.items()):
        value, tol = check(np.random.default_rng([seed, i]))
        ok = value <= tol
        failures += not ok
        rows.append((name, "pass" if ok else "FAIL", value, tol))
        if echo:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e} (tolerance {tol:.0e})")
    if out is not None:
        write_csv(os.path.join(out, "selftest.csv"), ["check", "status", "value", "tolerance"], rows)
    return failures
