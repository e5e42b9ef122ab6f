"""Hilbert-space substrate on the unit cube.

Functions are represented by their values at a set of quadrature points;
an array of shape ``(..., D, C)`` holds ``C`` channels at ``D`` points.  The
inner product is the Monte-Carlo average over points summed over channels.

Reference basis: the real Fourier system indexed by signed multi-indices.
Per axis, ``i > 0`` selects ``sqrt(2) cos(2 pi i x)``, ``i < 0`` selects
``sqrt(2) sin(2 pi |i| x)`` and ``i = 0`` the constant.  A multichannel
element is supported on a single channel.

Index arrays throughout the package have shape ``(n, d + 1)``: ``d`` signed
spatial frequencies followed by a 0-based channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import autodiff as ad
from .errors import ConfigError, ShapeError

DEFAULT_ALPHA = {1: 1.5, 2: 2.0}
ENUMERATION_MASS = 1.0 - 1e-9
MAX_ENUMERATION = 1 << 21


def as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class Domain:
    """The unit cube ``[0, 1]^dim`` with uniform measure and ``channels`` outputs."""

    dim: int = 1
    channels: int = 1

    def __post_init__(self):
        if self.dim < 1 or self.channels < 1:
            raise ConfigError(f"invalid domain dim={self.dim} channels={self.channels}")


@dataclass
class QuadratureSet:
    points: np.ndarray  # (D, d)

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


def _grid_side(count, dim):
    m = max(1, int(round(count ** (1.0 / dim))))
    while m > 1 and m**dim > count:
        m -= 1
    while (m + 1) ** dim <= count:
        m += 1
    return m


def sample_quadrature(domain, count, seed=None):
    """Stratified uniform points: one per cell of an ``m^d`` grid, rest uniform.

    ``m = floor(count^(1/d))``; the ``count - m^d`` leftover points are drawn
    uniformly over the whole cube.
    """
    if count < 1:
        raise ConfigError("quadrature size must be >= 1")
    rng = as_rng(seed)
    d = domain.dim
    m = _grid_side(count, d)
    cells = np.stack(
        np.meshgrid(*([np.arange(m)] * d), indexing="ij"), axis=-1
    ).reshape(-1, d)
    pts = (cells + rng.random(cells.shape)) / m
    extra = count - cells.shape[0]
    if extra:
        pts = np.concatenate([pts, rng.random((extra, d))], axis=0)
    return QuadratureSet(pts)


def uniform_grid(domain, side):
    """Cell-centred tensor grid with ``side`` points per axis."""
    axis = (np.arange(side) + 0.5) / side
    pts = np.stack(np.meshgrid(*([axis] * domain.dim), indexing="ij"), axis=-1)
    return QuadratureSet(pts.reshape(-1, domain.dim))


# -- Fourier basis ---------------------------------------------------------------


@dataclass(frozen=True)
class FourierIndex:
    spatial: tuple
    channel: int = 0

    def as_array(self):
        return np.array(list(self.spatial) + [self.channel], dtype=np.int64)


def _index_array(indices):
    if isinstance(indices, FourierIndex):
        return indices.as_array()[None, :]
    arr = np.asarray(indices, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def fourier_values(indices, points, channels):
    """Reference basis values, shape ``(n, D, C)``, as a plain array."""
    idx = _index_array(indices)
    pts = points.points if isinstance(points, QuadratureSet) else np.asarray(points)
    d = pts.shape[1]
    if idx.shape[1] != d + 1:
        raise ShapeError("eval_fourier", idx.shape, pts.shape, detail="index/domain dimension")
    if np.any(idx[:, -1] < 0) or np.any(idx[:, -1] >= channels):
        raise ShapeError("eval_fourier", idx.shape, (channels,), detail="channel out of range")
    vals = np.ones((idx.shape[0], pts.shape[0]))
    two_pi = 2.0 * np.pi
    root2 = np.sqrt(2.0)
    for j in range(d):
        k = idx[:, j][:, None]
        arg = two_pi * np.abs(k) * pts[:, j][None, :]
        factor = np.where(k > 0, root2 * np.cos(arg), np.where(k < 0, root2 * np.sin(arg), 1.0))
        vals *= factor
    out = np.zeros((idx.shape[0], pts.shape[0], channels))
    out[np.arange(idx.shape[0]), :, idx[:, -1]] = vals
    return out


def eval_fourier(index, points, channels=1):
    """Single element as a ``(D, C)`` tensor."""
    return ad.Tensor(fourier_values(index, points, channels)[0])


def inner_product(f, g):
    """``(1/D) sum_{j,c} f g`` over the last two axes; leading axes batch."""
    f, g = ad.as_tensor(f), ad.as_tensor(g)
    if f.shape != g.shape or f.ndim < 2:
        raise ShapeError("inner_product", f.shape, g.shape)
    return ad.scale(ad.sum(f * g, axis=(-2, -1)), 1.0 / f.shape[-2])


def gram(fs, gs=None):
    """Discrete Gram matrix of two stacks ``(n, D, C)`` as a plain array."""
    fs = np.asarray(fs)
    gs = fs if gs is None else np.asarray(gs)
    D = fs.shape[1]
    return fs.reshape(fs.shape[0], -1) @ gs.reshape(gs.shape[0], -1).T / D


# -- index prior -------------------------------------------------------------------


def partition_constant(alpha, dim):
    """``Z = sum_{k in Z^d} (1 + |k|^2)^(-alpha)`` for d in {1, 2}.

    Exact lattice sum over a box plus the integral of the summand over the
    complement of the box (cell-midpoint correspondence); the neglected
    remainder is far below 1e-9.
    """
    if alpha <= dim / 2:
        raise ConfigError(f"alpha={alpha} must exceed d/2={dim / 2} for a finite prior")
    if dim == 1:
        n = 10**6
        k = np.arange(1, n + 1, dtype=np.float64)
        box = 1.0 + 2.0 * np.sum((1.0 + k * k) ** (-alpha))
        tail, _ = integrate.quad(lambda x: (1.0 + x * x) ** (-alpha), n + 0.5, np.inf)
        return box + 2.0 * tail
    if dim == 2:
        n = 1000
        k = np.arange(-n, n + 1, dtype=np.float64)
        k2 = k * k
        box = np.sum((1.0 + k2[:, None] + k2[None, :]) ** (-alpha))
        h = n + 0.5

        def radial(theta):
            rho0 = h / np.cos(theta)
            return (1.0 + rho0 * rho0) ** (1.0 - alpha) / (2.0 * (alpha - 1.0))

        wedge, _ = integrate.quad(radial, 0.0, np.pi / 4, epsabs=1e-14, epsrel=1e-12)
        return box + 8.0 * wedge
    raise ConfigError(f"index prior supports d in {{1, 2}}, got d={dim}")


def _tail_mass_radius(alpha, dim, Z, mass):
    # radius beyond which the continuous tail estimate drops below 1 - mass
    eps = 1.0 - mass
    if dim == 1:
        return (2.0 / ((2 * alpha - 1) * Z * eps)) ** (1.0 / (2 * alpha - 1))
    return (2.0 * np.pi / ((2 * alpha - 2) * Z * eps)) ** (1.0 / (2 * alpha - 2))


@dataclass
class StratifiedDraw:
    """Indices and weights realising one stratified-with-tail estimate."""

    indices: np.ndarray  # (n, d+1)
    weights: np.ndarray  # (n,)
    positions: np.ndarray  # (n,) rank in the prior ordering
    stratum_size: int
    tail_draws: int
    tail_rejected: int


@dataclass
class IndexPrior:
    """Power-law prior ``p(i) = (1 + |i|^2)^(-alpha) / (C Z)`` over Fourier indices.

    Indices are ranked by ``(|i|^2, spatial lexicographic, channel)``, which is
    a strict total order consistent with non-increasing ``p``.
    """

    dim: int
    channels: int = 1
    alpha: float | None = None
    max_enumeration: int = MAX_ENUMERATION
    Z: float = field(init=False)

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = DEFAULT_ALPHA.get(self.dim, self.dim / 2 + 1.0)
        self.alpha = float(self.alpha)
        self.Z = partition_constant(self.alpha, self.dim)
        self._enum = None
        self._enum_radius = 0
        self._cdf = None

    # probabilities
    def probability(self, indices):
        idx = _index_array(indices)
        n2 = np.sum(idx[:, :-1].astype(np.float64) ** 2, axis=1)
        p = (1.0 + n2) ** (-self.alpha) / (self.channels * self.Z)
        return p if not isinstance(indices, FourierIndex) else float(p[0])

    def _spatial_probability(self, n2):
        return (1.0 + n2) ** (-self.alpha) / (self.channels * self.Z)

    # enumeration
    def _build(self, radius):
        d, C = self.dim, self.channels
        radius = int(np.ceil(radius))
        k = np.arange(-radius, radius + 1)
        grid = np.stack(np.meshgrid(*([k] * d), indexing="ij"), axis=-1).reshape(-1, d)
        n2 = np.sum(grid * grid, axis=1)
        keep = n2 <= radius * radius
        grid, n2 = grid[keep], n2[keep]
        keys = [grid[:, j] for j in reversed(range(d))] + [n2]
        order = np.lexsort(keys)
        grid, n2 = grid[order], n2[order]
        idx = np.repeat(grid, C, axis=0)
        chan = np.tile(np.arange(C), grid.shape[0])
        self._enum = np.concatenate([idx, chan[:, None]], axis=1).astype(np.int64)
        self._enum_n2 = np.repeat(n2, C).astype(np.float64)
        self._enum_p = self._spatial_probability(self._enum_n2)
        self._cdf = np.cumsum(self._enum_p)
        self._enum_radius = radius

    def _ensure(self, count=0, radius=0):
        d, C = self.dim, self.channels
        need = radius
        if count:
            # radius whose ball holds at least ``count`` spatial*channel indices
            vol = {1: 2.0, 2: np.pi}.get(d, 2.0**d)
            need = max(need, (count / (vol * C)) ** (1.0 / d) + 2)
        if self._enum is None or need > self._enum_radius:
            self._build(max(need, 1))

    def ordered(self, count):
        """First ``count`` indices in rank order, shape ``(count, d+1)``."""
        self._ensure(count=count)
        while self._enum.shape[0] < count:
            self._build(self._enum_radius * 2)
        return self._enum[:count].copy()

    def stratum(self, tau):
        """All indices with ``p(i) >= tau`` (a prefix of the ranking)."""
        if tau <= 0:
            raise ConfigError("tau must be positive: the stratum would be infinite")
        pmax = 1.0 / (self.channels * self.Z)
        if tau > pmax:
            return np.zeros((0, self.dim + 1), dtype=np.int64)
        n2max = (tau * self.channels * self.Z) ** (-1.0 / self.alpha) - 1.0
        self._ensure(radius=np.sqrt(max(n2max, 0.0)) + 1)
        size = int(np.searchsorted(-self._enum_p, -tau, side="right"))
        return self._enum[:size].copy()

    def _ensure_sampling_table(self):
        target = _tail_mass_radius(self.alpha, self.dim, self.Z, ENUMERATION_MASS)
        vol = {1: 2.0, 2: np.pi}[self.dim]
        cap = (self.max_enumeration / (vol * self.channels)) ** (1.0 / self.dim)
        radius = min(target, cap)
        if self._enum is None or self._enum_radius < int(np.ceil(radius)):
            self._build(radius)

    @property
    def enumerated_mass(self):
        self._ensure_sampling_table()
        return float(self._cdf[-1])

    def sample_positions(self, n, seed=None):
        """Inverse-CDF draws of ranks from ``p`` (truncated enumeration)."""
        self._ensure_sampling_table()
        rng = as_rng(seed)
        u = rng.random(n) * self._cdf[-1]
        pos = np.searchsorted(self._cdf, u, side="right")
        return np.minimum(pos, self._cdf.size - 1)

    def sample(self, n, seed=None):
        positions = self.sample_positions(n, seed)
        return self._enum[positions].copy()

    def stratified_draw(self, tau, n_tail, seed=None):
        """Exact stratum ``p >= tau`` plus ``n_tail`` i.i.d. tail draws.

        Tail draws landing inside the stratum get weight zero and are dropped;
        the remaining draws carry weight ``1/n_tail`` each (duplicates merged).
        """
        S = self.stratum(tau)
        s = S.shape[0]
        self._ensure_sampling_table()
        pos = self.sample_positions(n_tail, seed) if n_tail > 0 else np.zeros(0, dtype=np.int64)
        outside = pos[pos >= s]
        uniq, counts = np.unique(outside, return_counts=True)
        positions = np.concatenate([np.arange(s), uniq]).astype(np.int64)
        weights = np.concatenate(
            [self._enum_p[:s], counts / float(n_tail) if n_tail else np.zeros(0)]
        )
        return StratifiedDraw(
            indices=self._enum[positions].copy(),
            weights=weights,
            positions=positions,
            stratum_size=s,
            tail_draws=int(n_tail),
            tail_rejected=int(pos.size - outside.size),
        )


def stratified_expectation(prior, tau, n_tail, f, seed=None):
    """Stratified-with-tail estimate of ``E_{i ~ p}[f(i)]``.

    ``f`` maps an index array ``(n, d+1)`` to a tensor of shape ``(n,)``.
    """
    draw = prior.stratified_draw(tau, n_tail, seed)
    if draw.indices.shape[0] == 0:
        return ad.Tensor(0.0)
    vals = ad.as_tensor(f(draw.indices))
    return ad.sum(vals * draw.weights)
