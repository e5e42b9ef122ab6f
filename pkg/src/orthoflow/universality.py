"""Constructive check that rank-2 skew flows reach any finite rotation.

A target ``Q`` in SO(n) is factored into coordinate-plane Givens
rotations.  Each rotation becomes one unit-time segment of a rank-2
generator ``K(t) = alpha(t) (x) beta(t) - beta(t) (x) alpha(t)`` whose
profile is a bump with unit squared integral, so the segment integrates to
exactly that rotation.  The segments are chained, rescaled onto ``[0, 1]``,
and integrated with the Cayley scheme on sampled frame functions.

Rotation convention: ``givens_matrix(n, p, q, theta)`` is
``exp(theta (e_p e_q^T - e_q e_p^T))``, so entry ``[p, q]`` is ``+sin``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import autodiff as ad
from .cayley import TimeGrid, integrate
from .errors import ConfigError, OrthoflowError
from .function_space import Domain, IndexPrior, QuadratureSet, fourier_values, uniform_grid

ANGLE_FLOOR = 1e-15


class NotSpecialOrthogonalError(OrthoflowError, ValueError):
    """Input is not orthogonal, or is a reflection."""


@dataclass
class GivensFactor:
    plane: tuple  # (p, q) coordinate indices
    angle: float
    n: int

    @property
    def directions(self):
        a = np.zeros(self.n)
        b = np.zeros(self.n)
        a[self.plane[0]] = 1.0
        b[self.plane[1]] = 1.0
        return a, b


@dataclass
class GivensFactorization:
    n: int
    factors: list = field(default_factory=list)  # in application order

    def __len__(self):
        return len(self.factors)

    def matrix(self):
        """Ordered product; the first factor acts first."""
        Q = np.eye(self.n)
        for f in self.factors:
            Q = givens_matrix(self.n, *f.plane, f.angle) @ Q
        return Q


def givens_matrix(n, p, q, theta):
    G = np.eye(n)
    c, s = np.cos(theta), np.sin(theta)
    G[p, p] = G[q, q] = c
    G[p, q] = s
    G[q, p] = -s
    return G


def _wrap_angle(theta):
    """Map to (-pi, pi]."""
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    return np.pi if wrapped == -np.pi else float(wrapped)


def givens_factorize(Q, tol=1e-8):
    """Upper-triangular Givens sweep.

    Left-multiplying by rotations zeroes the sub-diagonal of ``Q`` column by
    column.  A negative pivot with nothing below it yields an angle of pi,
    so for ``det = +1`` the sweep ends at the identity.  Inverting the recorded sequence yields the factors.
    """
    Q = np.array(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise NotSpecialOrthogonalError(f"expected a square matrix, got shape {Q.shape}")
    n = Q.shape[0]
    if np.abs(Q.T @ Q - np.eye(n)).max() > tol:
        raise NotSpecialOrthogonalError("matrix is not orthogonal")
    if abs(np.linalg.det(Q) - 1.0) > tol:
        raise NotSpecialOrthogonalError("determinant is -1: reflections are not reachable by a flow")
    R = Q.copy()
    applied = []
    for j in range(n - 1):
        for i in range(j + 1, n):
            # rotate in plane (j, i) so that R[i, j] -> 0 and R[j, j] >= 0
            theta = np.arctan2(R[i, j], R[j, j])
            if abs(theta) > ANGLE_FLOOR:
                R = givens_matrix(n, j, i, theta) @ R
                applied.append((j, i, theta))
    # R is now the identity up to round-off; Q = G_1^{-1} ... G_k^{-1}
    factors = [GivensFactor((p, q), _wrap_angle(-theta), n) for p, q, theta in reversed(applied)]
    factors = [f for f in factors if abs(f.angle) > ANGLE_FLOOR]
    return GivensFactorization(n, factors)


# -- bump controls -----------------------------------------------------------------


def bump(t, p=2.0, q=2.0):
    """Square root of the Beta(p, q) density: vanishes at both ends, unit ``L2`` norm."""
    if p <= 1.0 or q <= 1.0:
        raise ConfigError(f"bump needs p, q > 1 so the endpoints vanish (got {p}, {q})")
    t = np.asarray(t, dtype=np.float64)
    inside = (t > 0.0) & (t < 1.0)
    tc = np.where(inside, t, 0.5)
    log_density = (p - 1) * np.log(tc) + (q - 1) * np.log1p(-tc) - special.betaln(p, q)
    return np.where(inside, np.exp(0.5 * log_density), 0.0)


# -- rank-2 path ----------------------------------------------------------------------


class Rank2Path:
    """Chained rank-2 generator over ``[0, M]``, rescaled to ``[0, 1]``.

    ``frame`` holds the ``(n, D)`` values, at the quadrature points, of the
    orthonormal functions in which the Givens coefficients live.  Exposes
    ``eval_u`` and ``eval_skew`` so it drives the same integrator as a
    trained generator.
    """

    channels = 1

    def __init__(self, factorization, frame, bump_shape=(2.0, 2.0)):
        self.factorization = factorization
        self.frame = np.asarray(frame, dtype=np.float64)
        if self.frame.shape[0] != factorization.n:
            raise ConfigError(f"frame has {self.frame.shape[0]} elements, factorization needs {factorization.n}")
        self.bump_shape = bump_shape
        self.segments = len(factorization)
        self.coeffs = []
        for f in factorization.factors:
            a, b = f.directions
            if f.angle < 0.0:
                b = -b  # fold the sign so the square root is real
            root = np.sqrt(abs(f.angle))
            self.coeffs.append((root * a, root * b))

    def alpha_beta(self, times):
        """Frame coefficients of ``alpha`` and ``beta`` at rescaled times, each ``(L, n)``."""
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        n = self.factorization.n
        if self.segments == 0:
            return np.zeros((times.size, n)), np.zeros((times.size, n))
        s = times * self.segments
        seg = np.clip(np.floor(s).astype(int), 0, self.segments - 1)
        r = bump(s - seg, *self.bump_shape)
        a = np.stack([self.coeffs[k][0] for k in seg]) * r[:, None]
        b = np.stack([self.coeffs[k][1] for k in seg]) * r[:, None]
        return a, b

    def eval_u(self, times, points):
        a, b = self.alpha_beta(times)
        if isinstance(points, QuadratureSet) and points.size != self.frame.shape[1]:
            raise ConfigError("frame values do not match the quadrature set")
        # rescaling [0, M] onto [0, 1] multiplies the generator by M
        scale = np.sqrt(max(self.segments, 1))
        u = np.stack([a @ self.frame, b @ self.frame], axis=1) * scale  # (L, 2, D)
        return ad.Tensor(u[..., None])

    def eval_skew(self, times):
        S = np.array([[0.0, 1.0], [-1.0, 0.0]])
        return ad.Tensor(np.broadcast_to(S, (np.size(times), 2, 2)).copy())


def orthonormal_frame(n, points):
    """First ``n`` real Fourier functions, orthonormalised for the discrete inner
    product on ``points``; returns ``(n, D)`` values."""
    pts = points if isinstance(points, QuadratureSet) else QuadratureSet(np.asarray(points))
    raw = fourier_values(IndexPrior(pts.dim).ordered(n), pts, 1)[:, :, 0]
    D = pts.size
    Qm, R = np.linalg.qr(raw.T / np.sqrt(D))
    Qm = Qm * np.sign(np.diag(R))
    return Qm.T * np.sqrt(D)


def build_rank2_path(factorization, frame, bump_shape=(2.0, 2.0)):
    return Rank2Path(factorization, frame, bump_shape)


@dataclass
class UniversalityReport:
    n: int
    segments: int
    steps_per_segment: int
    frobenius_error: float
    norm_drift: float
    matrix: np.ndarray


def verify_universality(Q, steps_per_segment=200, points=None, n_points=2048, bump_shape=(2.0, 2.0)):
    """Integrate the rank-2 path on the frame and compare with ``Q``."""
    Q = np.asarray(Q, dtype=np.float64)
    n = Q.shape[0]
    if points is None:
        points = uniform_grid(Domain(1), n_points)
    pts = points if isinstance(points, QuadratureSet) else QuadratureSet(np.asarray(points))
    if n > pts.size:
        raise ConfigError(f"frame size {n} exceeds quadrature size {pts.size}")
    fact = givens_factorize(Q)
    E = orthonormal_frame(n, pts)
    path = build_rank2_path(fact, E, bump_shape)
    steps = max(len(fact), 1) * steps_per_segment
    grid = TimeGrid.uniform(steps)
    evolved = integrate(path, grid, pts, ad.Tensor(E[:, :, None])).data[:, :, 0]  # (n, D)
    # column j holds the frame coefficients of the evolved j-th element
    M = E @ evolved.T / pts.size
    norms = np.sum(evolved**2, axis=1) / pts.size
    return UniversalityReport(
        n=n,
        segments=len(fact),
        steps_per_segment=steps_per_segment,
        frobenius_error=float(np.linalg.norm(M - Q)),
        norm_drift=float(np.abs(norms - 1.0).max()),
        matrix=M,
    )


def random_special_orthogonal(n, seed=None):
    """QR of a Gaussian matrix with the sign fix, then a column flip if needed."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    A = rng.standard_normal((n, n))
    Qm, R = np.linalg.qr(A)
    Qm = Qm * np.sign(np.diag(R))
    if np.linalg.det(Qm) < 0:
        Qm[:, 0] = -Qm[:, 0]
    return Qm


def convergence_order(errors, steps):
    """Least-squares slope of ``-log(error)`` against ``log(steps)``."""
    e, s = np.log(np.asarray(errors)), np.log(np.asarray(steps, dtype=np.float64))
    return float(-np.polyfit(s, e, 1)[0])
