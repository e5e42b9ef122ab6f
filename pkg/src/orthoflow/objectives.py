"""Variational objectives built on the stratified index estimator.

Each loss evaluates ``Q phi_i`` for the indices of one stratified draw and
combines per-index terms with the draw's weights.  The lower-level
``*_terms`` functions take already-evolved functions so the training loop
and the tests can share one forward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import autodiff as ad
from .cayley import apply_q
from .errors import CheckpointError, OrthoflowError, ShapeError
from .function_space import QuadratureSet, as_rng, fourier_values, inner_product


class AsymmetricKernelError(OrthoflowError, ValueError):
    """Kernel matrix is not symmetric within tolerance."""


# -- data sources ------------------------------------------------------------------


@dataclass
class AnalyticDataset:
    """Random functions from a sampler ``rng -> (points (D, d) -> values (D, C))``."""

    sampler: Callable
    channels: int = 1

    def sample(self, seed=None):
        return self.sampler(as_rng(seed))


GRID_MAGIC = b"OFGD"
GRID_VERSION = 1


@dataclass
class GriddedDataset:
    """Samples stored on a regular grid, evaluated by multilinear interpolation.

    Grid nodes along each axis sit at ``i / (n - 1)``, so the grid spans the
    closed unit cube.
    """

    values: np.ndarray  # (samples, *grid, C)

    @property
    def channels(self):
        return self.values.shape[-1]

    @property
    def dim(self):
        return self.values.ndim - 2

    def __len__(self):
        return self.values.shape[0]

    def function(self, k):
        axes = [np.linspace(0.0, 1.0, n) for n in self.values.shape[1:-1]]
        interp = RegularGridInterpolator(axes, self.values[k], method="linear")

        def evaluate(points):
            pts = points.points if isinstance(points, QuadratureSet) else np.asarray(points)
            return interp(np.clip(pts, 0.0, 1.0))

        return evaluate

    def sample(self, seed=None):
        if len(self) == 0:
            raise OrthoflowError("dataset is empty")
        return self.function(int(as_rng(seed).integers(len(self))))

    def save(self, path):
        grid = self.values.shape[1:-1]
        header = struct.pack("<4sIII", GRID_MAGIC, GRID_VERSION, self.dim, self.channels)
        header += struct.pack(f"<{len(grid)}I", *grid) + struct.pack("<I", len(self))
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        try:
            magic, version, d, C = struct.unpack_from("<4sIII", blob, 0)
        except struct.error:
            raise CheckpointError(f"{path}: truncated gridded-data header") from None
        if magic != GRID_MAGIC:
            raise CheckpointError(f"{path}: not a gridded dataset")
        if version != GRID_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 16
        grid = struct.unpack_from(f"<{d}I", blob, off)
        off += 4 * d
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = (count,) + tuple(grid) + (C,)
        expected = int(np.prod(shape)) * 8
        if len(blob) - off != expected:
            raise CheckpointError(f"{path}: payload has {len(blob) - off} bytes, expected {expected}")
        return cls(np.frombuffer(blob, dtype="<f8", offset=off).reshape(shape).astype(np.float64))


# -- operators -----------------------------------------------------------------------


@dataclass
class KernelOperator:
    """Integral operator given by a kernel ``k(x, y) -> (Dx, Dy)`` matrix,
    or directly by its action ``apply(values (n, D, C), points) -> (n, D, C)``."""

    kernel: Callable | None = None
    apply: Callable | None = None
    symmetry_tol: float = 1e-8

    def matrix(self, points):
        pts = points.points if isinstance(points, QuadratureSet) else np.asarray(points)
        K = np.asarray(self.kernel(pts, pts), dtype=np.float64)
        scale = max(np.abs(K).max(), 1e-300)
        if np.abs(K - K.T).max() > self.symmetry_tol * scale:
            raise AsymmetricKernelError("kernel matrix is not symmetric")
        return K


def rank_one_kernel(u):
    return KernelOperator(kernel=lambda x, y: np.outer(u(x), u(y)))


def spectral_kernel(eigenvalues, eigenfunctions):
    """``A[x, y] = sum_m lambda_m u_m(x) u_m(y)``; ``eigenfunctions(x) -> (m, D)``."""
    lam = np.asarray(eigenvalues, dtype=np.float64)

    def kernel(x, y):
        ux, uy = eigenfunctions(x), eigenfunctions(y)
        return (ux * lam[:, None]).T @ uy

    return KernelOperator(kernel=kernel)


def quadratic_terms(q, operator, points):
    """``<f, A f>`` for each function in ``q`` (``(n, D, C)``), shape ``(n,)``."""
    q = ad.as_tensor(q)
    if operator.apply is not None:
        return inner_product(q, operator.apply(q, points))
    if q.shape[-1] != 1:
        raise ShapeError("quadratic_form", q.shape, detail="kernel form needs a single channel")
    D = q.shape[1]
    K = operator.matrix(points)
    f = ad.reshape(q, (q.shape[0], D))
    Kf = ad.matmul(f, ad.Tensor(K))  # K symmetric
    return ad.scale(ad.sum(Kf * f, axis=1), 1.0 / (D * D))


def quadratic_form(params, operator, indices, points, grid):
    """Double Monte-Carlo estimate of ``<Q phi_i, A Q phi_i>`` per index."""
    return quadratic_terms(apply_q(params, indices, points, grid), operator, points)


def diagonalization_objective(params, operator, prior, tau, n_tail, points, grid, seed=None):
    """Stratified estimate of ``E_i <Q phi_i, A Q phi_i>`` (to maximise)."""
    draw = prior.stratified_draw(tau, n_tail, seed)
    terms = quadratic_form(params, operator, draw.indices, points, grid)
    return ad.sum(terms * draw.weights)


# -- PCA -------------------------------------------------------------------------------


def pca_terms(q, data_values, mean_values):
    """Squared projections ``<X - nu, Q phi_i>^2`` and the mean-fit loss.

    ``mean_values`` enters the projections through a stop-gradient, so the
    first output never sends gradient to the mean field and the second never
    to the generator.
    """
    X = ad.Tensor(np.asarray(data_values, dtype=np.float64))
    q = ad.as_tensor(q)
    centred = X - ad.stop_gradient(mean_values)
    proj = inner_product(q, ad.broadcast_to(centred, q.shape))
    diff = ad.as_tensor(mean_values) - X
    mean_loss = ad.scale(ad.sum(diff * diff), 1.0 / X.shape[0])
    return ad.square(proj), mean_loss


def pca_loss(params, mean_field, dataset, prior, tau, n_tail, points, grid, seed=None, data_seed=None):
    """Returns ``(J_PCA, L_mean)``: maximise the first over the generator,
    minimise the second over the mean field."""
    draw = prior.stratified_draw(tau, n_tail, seed)
    X = dataset.sample(data_seed)(points)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != params.channels:
        raise ShapeError("pca_loss", X.shape, (points.size, params.channels), detail="channel mismatch")
    q = apply_q(params, draw.indices, points, grid)
    sq, mean_loss = pca_terms(q, X, mean_field(points))
    return ad.sum(sq * draw.weights), mean_loss


# -- NTK -------------------------------------------------------------------------------


def ntk_terms(q, per_sample_grads):
    """``|| (1/D) sum_j f(x_j) g(x_j) ||^2`` per function; ``g`` is ``(D, P)``."""
    q = ad.as_tensor(q)
    n, D = q.shape[0], q.shape[1]
    if q.shape[-1] != 1:
        raise ShapeError("ntk_loss", q.shape, detail="scalar-output network needs one channel")
    G = np.asarray(per_sample_grads, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != D:
        raise ShapeError("ntk_loss", q.shape, G.shape)
    v = ad.scale(ad.matmul(ad.reshape(q, (n, D)), ad.Tensor(G)), 1.0 / D)
    return ad.sum(v * v, axis=1)


def ntk_loss(params, network, prior, tau, n_tail, points, grid, seed=None):
    """Stratified NTK objective (to maximise); ``network.per_sample_grads(x)``
    supplies frozen parameter gradients, shape ``(D, P)``."""
    draw = prior.stratified_draw(tau, n_tail, seed)
    q = apply_q(params, draw.indices, points, grid)
    return ad.sum(ntk_terms(q, network.per_sample_grads(points.points)) * draw.weights)


def ntk_kernel(network):
    """The tangent kernel of a frozen network as a :class:`KernelOperator`."""

    def kernel(x, y):
        gx = network.per_sample_grads(x)
        gy = gx if x is y else network.per_sample_grads(y)
        return gx @ gy.T

    return KernelOperator(kernel=kernel)


# -- Koopman ------------------------------------------------------------------------------


@dataclass
class Translation:
    """Rigid shift on the torus, ``x -> x + offset (mod 1)``."""

    offset: np.ndarray

    def __call__(self, pts):
        return np.mod(np.asarray(pts) + np.asarray(self.offset), 1.0)


def koopman_targets(indices, flow, points, channels=1):
    moved = np.asarray(flow(points.points))
    if moved.shape != points.points.shape or np.any(moved < 0.0) or np.any(moved > 1.0):
        raise OrthoflowError("flow map left the unit cube after wrapping")
    return fourier_values(indices, moved, channels)


def koopman_terms(q, targets):
    diff = ad.as_tensor(q) - ad.Tensor(targets)
    return inner_product(diff, diff)


def koopman_loss(params, flow, prior, tau, n_tail, points, grid, seed=None):
    """Stratified estimate of ``E_i ||Q phi_i - phi_i o Psi||^2`` (to minimise)."""
    draw = prior.stratified_draw(tau, n_tail, seed)
    q = apply_q(params, draw.indices, points, grid)
    targets = koopman_targets(draw.indices, flow, points, params.channels)
    return ad.sum(koopman_terms(q, targets) * draw.weights)
