"""Trainable neural fields defining the low-rank skew-adjoint generator.

``U(t, x)`` maps time and position to ``r x C`` values (the rows spanning
the generator's range), ``M(t)`` maps time to an unconstrained ``r x r``
matrix whose skew part mixes those rows, and ``MeanField`` is the separate
mean function used for non-centred PCA.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .function_space import QuadratureSet, as_rng, fourier_values

TIME_FREQUENCIES = 256
HEAD_SCALE = 1e-2
DEFAULT_BANDWIDTH = {1: 9, 2: 5}


class Module:
    """Minimal parameter container: tensors in ``params``, submodules in ``children``."""

    def __init__(self):
        self.params = {}
        self.children = {}

    def named_parameters(self, prefix=""):
        out = {}
        for name, p in self.params.items():
            out[prefix + name] = p
        for name, child in self.children.items():
            out.update(child.named_parameters(prefix + name + "."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def load_arrays(self, arrays):
        for name, p in self.named_parameters().items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()

    def arrays(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, init_scale=1.0):
        super().__init__()
        bound = init_scale / np.sqrt(fan_in)
        self.params["weight"] = ad.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
        self.params["bias"] = ad.Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.params["weight"]) + self.params["bias"]


class RMSNorm(Module):
    def __init__(self, width):
        super().__init__()
        self.params["gain"] = ad.Tensor(np.ones(width), requires_grad=True)

    def __call__(self, x):
        return ad.rms_norm(x) * self.params["gain"]


class MLP(Module):
    """Linear -> RMSNorm -> SiLU blocks followed by a linear head."""

    def __init__(self, fan_in, hidden, fan_out, rng, head_scale=1.0, norm=True):
        super().__init__()
        self.depth = len(hidden)
        self.norm = norm
        widths = [fan_in] + list(hidden)
        for i in range(self.depth):
            self.children[f"linear{i}"] = Linear(widths[i], widths[i + 1], rng)
            if norm:
                self.children[f"norm{i}"] = RMSNorm(widths[i + 1])
        self.children["head"] = Linear(widths[-1], fan_out, rng, init_scale=head_scale)

    def __call__(self, x):
        for i in range(self.depth):
            x = self.children[f"linear{i}"](x)
            if self.norm:
                x = self.children[f"norm{i}"](x)
            x = ad.silu(x)
        return self.children["head"](x)


# -- fixed encodings ---------------------------------------------------------------


def time_frequencies(count=TIME_FREQUENCIES):
    f = np.arange(count)
    return 2.0 ** (3.0 * f / (count - 1))


def time_embedding(t, count=TIME_FREQUENCIES):
    """Interleaved ``[sin(2 pi w_f t), cos(2 pi w_f t)]`` for each frequency.

    ``t`` may be a scalar (returns ``(2F,)``) or an array of shape ``(L,)``
    (returns ``(L, 2F)``).
    """
    t = np.asarray(t, dtype=np.float64)
    arg = 2.0 * np.pi * t[..., None] * time_frequencies(count)
    out = np.empty(arg.shape[:-1] + (2 * count,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


class SpatialFeatures:
    """Multi-scale random Fourier features, fixed at construction.

    8 levels with frequencies log-spaced over [1, 64]; level ``l`` contributes
    ``max(1, 64 / 2^l)`` Gaussian projection directions.
    """

    levels = 8

    def __init__(self, dim, rng):
        freqs = np.logspace(0.0, np.log10(64.0), self.levels)
        counts = [max(1, 64 // 2**lvl) for lvl in range(self.levels)]
        blocks = [rng.standard_normal((dim, n)) * f for f, n in zip(freqs, counts)]
        self.projection = np.concatenate(blocks, axis=1)

    @property
    def size(self):
        return 2 * self.projection.shape[1]

    def __call__(self, x):
        arg = 2.0 * np.pi * np.asarray(x) @ self.projection
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def residual_indices(dim, bandwidth):
    """Spatial multi-indices with ``max_j |k_j| <= bandwidth - 1``."""
    k = np.arange(-(bandwidth - 1), bandwidth)
    return np.stack(np.meshgrid(*([k] * dim), indexing="ij"), axis=-1).reshape(-1, dim)


# -- generator fields --------------------------------------------------------------


class ProjectionField(Module):
    """``U(t, x) = base(t, x) + sum_k w_k(t) phi_k(x) / (1 + |k|^2)``, values ``r x C``.

    The base network's first layer is split into a time part and a space
    part so each is evaluated once per time knot / per point and the two are
    broadcast-added.
    """

    def __init__(self, dim, channels, rank, bandwidth, rng, width=256, depth=4, residual_width=64):
        super().__init__()
        self.dim, self.channels, self.rank = dim, channels, rank
        self.features = SpatialFeatures(dim, rng)
        emb = 2 * TIME_FREQUENCIES
        space_in = dim + self.features.size
        bound = 1.0 / np.sqrt(emb + space_in)
        self.params["in_time"] = ad.Tensor(rng.uniform(-bound, bound, (emb, width)), requires_grad=True)
        self.params["in_space"] = ad.Tensor(rng.uniform(-bound, bound, (space_in, width)), requires_grad=True)
        self.params["in_bias"] = ad.Tensor(np.zeros(width), requires_grad=True)
        self.children["norm_in"] = RMSNorm(width)
        self.depth = depth
        for i in range(1, depth):
            self.children[f"linear{i}"] = Linear(width, width, rng)
            self.children[f"norm{i}"] = RMSNorm(width)
        self.children["head"] = Linear(width, rank * channels, rng, init_scale=HEAD_SCALE)
        self.res_index = residual_indices(dim, bandwidth)
        self.res_lowpass = 1.0 / (1.0 + np.sum(self.res_index**2, axis=1))
        nk = self.res_index.shape[0]
        self.children["residual"] = MLP(
            emb, [residual_width, residual_width], nk * rank * channels, rng, head_scale=HEAD_SCALE
        )

    def _residual_basis(self, pts):
        idx = np.concatenate([self.res_index, np.zeros((len(self.res_index), 1), dtype=np.int64)], axis=1)
        phi = fourier_values(idx, pts, 1)[:, :, 0]  # (nk, D)
        return (phi * self.res_lowpass[:, None]).T  # (D, nk)

    def base(self, gamma, pts):
        L, D = gamma.shape[0], pts.shape[0]
        space = np.concatenate([pts, self.features(pts)], axis=1)
        ht = ad.matmul(ad.Tensor(gamma), self.params["in_time"])
        hx = ad.matmul(ad.Tensor(space), self.params["in_space"]) + self.params["in_bias"]
        h = ad.reshape(ht, (L, 1, -1)) + ad.reshape(hx, (1, D, -1))
        h = ad.reshape(h, (L * D, -1))
        h = ad.silu(self.children["norm_in"](h))
        for i in range(1, self.depth):
            h = ad.silu(self.children[f"norm{i}"](self.children[f"linear{i}"](h)))
        out = self.children["head"](h)
        return ad.reshape(out, (L, D, self.rank * self.channels))

    def residual(self, gamma, pts):
        L, D = gamma.shape[0], pts.shape[0]
        coeff = self.children["residual"](ad.Tensor(gamma))
        coeff = ad.reshape(coeff, (L, len(self.res_index), self.rank * self.channels))
        basis = ad.Tensor(self._residual_basis(pts))
        return ad.matmul(basis, coeff)  # (L, D, rC)

    def __call__(self, times, points):
        """Values at every (time, point) pair, shape ``(L, r, D, C)``."""
        pts = points.points if isinstance(points, QuadratureSet) else np.asarray(points)
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        gamma = time_embedding(times)
        L, D = times.size, pts.shape[0]
        u = self.base(gamma, pts) + self.residual(gamma, pts)
        u = ad.reshape(u, (L, D, self.rank, self.channels))
        return ad.transpose(u, (0, 2, 1, 3))


class MixingNetwork(Module):
    """``M(t)``: time embedding to an unconstrained ``r x r`` matrix."""

    def __init__(self, rank, rng, width=64):
        super().__init__()
        self.rank = rank
        self.children["mlp"] = MLP(2 * TIME_FREQUENCIES, [width, width], rank * rank, rng, head_scale=HEAD_SCALE)

    def __call__(self, times):
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        out = self.children["mlp"](ad.Tensor(time_embedding(times)))
        return ad.reshape(out, (times.size, self.rank, self.rank))

    def skew(self, times):
        m = self(times)
        return m - ad.swap_last(m)


class GeneratorParams(Module):
    """The pair ``(U, M)`` defining ``K(t) = U(t)^* (M(t) - M(t)^T) U(t)``."""

    def __init__(self, dim=1, channels=1, rank=10, bandwidth=None, seed=0, width=256, depth=4):
        super().__init__()
        rng = as_rng(seed)
        self.dim, self.channels, self.rank = dim, channels, rank
        self.bandwidth = DEFAULT_BANDWIDTH.get(dim, 3) if bandwidth is None else bandwidth
        self.width, self.depth = width, depth
        self.children["U"] = ProjectionField(dim, channels, rank, self.bandwidth, rng, width=width, depth=depth)
        self.children["M"] = MixingNetwork(rank, rng)

    def eval_u(self, times, points):
        return self.children["U"](times, points)

    def eval_skew(self, times):
        return self.children["M"].skew(times)


def eval_m_skew(params, t):
    """Skew part ``M(t) - M(t)^T`` at a single time, shape ``(r, r)``."""
    return params.eval_skew(np.atleast_1d(t))[0]


def eval_u(params, t, points):
    """``U(t, .)`` at a single time, shape ``(r, D, C)``."""
    return params.eval_u(np.atleast_1d(t), points)[0]


class MeanField(Module):
    """Random-Fourier-feature network ``x -> R^C`` for the data mean."""

    def __init__(self, dim=1, channels=1, seed=0, n_features=64, sigma=8.0, hidden=128):
        super().__init__()
        rng = as_rng(seed)
        self.channels = channels
        self.projection = rng.standard_normal((dim, n_features // 2)) * sigma
        self.children["mlp"] = MLP(n_features, [hidden, hidden], channels, rng, norm=False)

    def features(self, pts):
        arg = 2.0 * np.pi * pts @ self.projection
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)

    def __call__(self, points):
        pts = points.points if isinstance(points, QuadratureSet) else np.asarray(points)
        return self.children["mlp"](ad.Tensor(self.features(pts)))  # (D, C)
