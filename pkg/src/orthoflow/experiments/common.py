"""Helpers shared by the experiment drivers: nested projections, CSV, plots."""

from __future__ import annotations

import csv
import os

import numpy as np

from ..errors import OrthoflowError


def nested_captured_energy(basis, data, mean=None):
    """Captured energy of ``data`` by every prefix of ``basis``.

    ``basis`` is ``(n, D)`` and ``data`` ``(m, D)``, both sampled on the same
    uniform quadrature.  The prefix spans are orthonormalised with a QR
    sweep, so the result is the least-squares projection even when the
    basis is only approximately orthonormal.  Returns ``(captured, total)``:
    ``captured[c - 1]`` is the mean over samples of the energy in the span
    of the first ``c`` functions; ``total`` is the mean energy.  Energies use
    the ``(1/D) sum`` inner product.
    """
    B = np.asarray(basis, dtype=np.float64)
    X = np.asarray(data, dtype=np.float64)
    if mean is not None:
        X = X - np.asarray(mean, dtype=np.float64)
    D = X.shape[1]
    if B.shape[0] > D:
        raise OrthoflowError(f"{B.shape[0]} basis functions exceed {D} quadrature points")
    Qm, _ = np.linalg.qr(B.T)  # (D, n), columns orthonormal in the Euclidean sense
    coeff = X @ Qm  # (m, n)
    captured = np.cumsum(np.mean(coeff**2, axis=0)) / D
    total = float(np.mean(np.sum(X**2, axis=1)) / D)
    return captured, total


def reconstruction_curve(basis, data, mean=None):
    """Mean squared reconstruction error for every cutoff ``1..n``."""
    captured, total = nested_captured_energy(basis, data, mean)
    return np.maximum(total - captured, 0.0)


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def plot_lines(path, series, xlabel="", ylabel="", logy=False, title=""):
    """Render ``{label: (x, y)}`` to an SVG file; silently skipped without matplotlib."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    matplotlib.rcParams["svg.hashsalt"] = "orthoflow"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (x, y) in series.items():
        ax.plot(x, y, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # fixed metadata keeps the file byte-stable across runs
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return True
