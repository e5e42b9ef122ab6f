"""Structure-preserving integration of ``d/dt phi = K(t) phi``.

A batch of ``n`` functions sampled at ``D`` points with ``C`` channels is
flattened to an ``(n, N)`` matrix, ``N = D * C``.  The generator at one
step is given by ``U`` (``r x N``, already scaled by ``sqrt(dt)``) and a
skew ``S`` (``r x r``); it acts as ``K phi = U^T S (U phi) / D``.

The Cayley step ``(I - K/2)^{-1} (I + K/2)`` is applied with the Woodbury
identity, so each step costs ``O(r^3 + r^2 N)`` and is exactly orthogonal
for the quadrature inner product up to solve precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import IntegrationError, SingularMatrixError
from .function_space import QuadratureSet, as_rng, fourier_values

METHODS = ("cayley", "euler-fwd", "euler-bwd")


@dataclass
class TimeGrid:
    knots: np.ndarray  # 0 = t_0 < ... < t_L = 1

    @classmethod
    def uniform(cls, steps, horizon=1.0):
        return cls(np.linspace(0.0, horizon, steps + 1))

    @classmethod
    def random(cls, steps, seed=None, horizon=1.0):
        """Interior knots i.i.d. uniform, sorted; endpoints fixed."""
        rng = as_rng(seed)
        inner = np.sort(rng.random(steps - 1)) * horizon
        return cls(np.concatenate([[0.0], inner, [horizon]]))

    @property
    def steps(self):
        return len(self.knots) - 1

    @property
    def dt(self):
        return np.diff(self.knots)

    @property
    def midpoints(self):
        return self.knots[:-1] + 0.5 * self.dt


def _woodbury_solve(A, rhs, step):
    try:
        return ad.linear_solve(A, rhs)
    except SingularMatrixError as exc:
        raise IntegrationError(step, exc.condition) from None


def low_rank_step(U, S, phi, n_points, method="cayley", step=0):
    """One step on flattened functions ``phi`` (``n x N``).

    ``U`` is ``r x N`` with the step size folded in, ``S`` is ``r x r`` skew.
    """
    r = U.shape[0]
    Ut = ad.swap_last(U)
    inv_d = 1.0 / n_points
    coeff = ad.scale(ad.matmul(phi, Ut), inv_d)  # (n, r)
    eye = np.eye(r)
    St = ad.swap_last(S)
    if method == "euler-fwd":
        return phi + ad.matmul(ad.matmul(coeff, St), U)
    gram = ad.scale(ad.matmul(U, Ut), inv_d)
    if method == "euler-bwd":
        z = _woodbury_solve(eye - ad.matmul(gram, S), ad.swap_last(coeff), step)
        return phi + ad.matmul(ad.swap_last(ad.matmul(S, z)), U)
    if method != "cayley":
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    y = phi + ad.scale(ad.matmul(ad.matmul(coeff, St), U), 0.5)
    c2 = ad.scale(ad.matmul(y, Ut), inv_d)
    z = _woodbury_solve(eye - ad.scale(ad.matmul(gram, S), 0.5), ad.swap_last(c2), step)
    return y + ad.scale(ad.matmul(ad.swap_last(ad.matmul(S, z)), U), 0.5)


def generator_factors(params, grid, points):
    """``U`` for every step, flattened and scaled by ``sqrt(dt)``: ``(L, r, N)``; and ``S``: ``(L, r, r)``."""
    mids = grid.midpoints
    u = params.eval_u(mids, points)  # (L, r, D, C)
    L, r = u.shape[0], u.shape[1]
    u = ad.reshape(u, (L, r, -1))
    u = u * np.sqrt(grid.dt)[:, None, None]
    return u, params.eval_skew(mids)


def _flatten(phi):
    phi = ad.as_tensor(phi)
    single = phi.ndim == 2
    if single:
        phi = ad.reshape(phi, (1,) + phi.shape)
    n, D, C = phi.shape
    return ad.reshape(phi, (n, D * C)), (n, D, C), single


def integrate_factors(U_all, S_all, phi0, n_points, method="cayley", record=False):
    """Run all steps given precomputed factors; ``phi0`` is ``(n, N)``."""
    phi = phi0
    states = [phi] if record else None
    for step in range(U_all.shape[0]):
        phi = low_rank_step(U_all[step], S_all[step], phi, n_points, method, step)
        if record:
            states.append(phi)
    return (phi, states) if record else phi


def integrate(params, grid, points, phi0, method="cayley", record=False):
    """Evolve ``phi0`` (``(D, C)`` or ``(n, D, C)``) over ``grid``.

    Returns the final values in the input's shape; with ``record=True`` also
    the list of per-step states as ``(n, N)`` tensors.
    """
    flat, shape, single = _flatten(phi0)
    U_all, S_all = generator_factors(params, grid, points)
    out = integrate_factors(U_all, S_all, flat, shape[1], method, record)
    phi, states = out if record else (out, None)
    phi = ad.reshape(phi, shape[1:] if single else shape)
    return (phi, states) if record else phi


def cayley_step(params, t_mid, dt, points, phi):
    """Single Cayley step at midpoint ``t_mid`` with size ``dt``."""
    flat, shape, single = _flatten(phi)
    u = params.eval_u(np.atleast_1d(t_mid), points)
    r = u.shape[1]
    U = ad.scale(ad.reshape(u, (r, -1)), np.sqrt(dt))
    S = params.eval_skew(np.atleast_1d(t_mid))[0]
    out = low_rank_step(U, S, flat, shape[1])
    return ad.reshape(out, shape[1:] if single else shape)


def apply_q(params, indices, points, grid, method="cayley"):
    """``Q phi_i`` for a batch of reference indices, shape ``(n, D, C)``."""
    pts = points if isinstance(points, QuadratureSet) else QuadratureSet(np.asarray(points))
    phi0 = fourier_values(indices, pts, params.channels)
    return integrate(params, grid, pts, ad.Tensor(phi0), method)


def dense_generator(U, S, n_points):
    """Explicit ``N x N`` matrix of ``K phi = U^T S U phi / D`` (oracle use)."""
    U, S = np.asarray(U), np.asarray(S)
    return U.T @ S @ U / n_points


def dense_cayley(U, S, n_points):
    K = dense_generator(U, S, n_points)
    eye = np.eye(K.shape[0])
    return np.linalg.solve(eye - 0.5 * K, eye + 0.5 * K)
