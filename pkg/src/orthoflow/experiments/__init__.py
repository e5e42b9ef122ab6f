"""Desk-scale experiment drivers; importing this package registers their tasks."""

from ..errors import ConfigError
from ..training import TRAIN_DEFAULTS, TrainConfig
from . import diagonalization, koopman, ntk, pca1d

PRESETS = {
    "pca": (1, 1, pca1d.PCA_DEFAULTS),
    "diag": (1, 1, diagonalization.DIAG_DEFAULTS),
    "koopman": (2, 1, koopman.KOOPMAN_DEFAULTS),
    "ntk": (2, 1, ntk.NTK_DEFAULTS),
}


def default_config(objective, **overrides):
    """Training defaults for ``objective`` with keyword overrides applied."""
    if objective not in PRESETS:
        raise ConfigError(f"unknown objective {objective!r}")
    dim, channels, extra = PRESETS[objective]
    values = dict(TRAIN_DEFAULTS)
    values.update(extra)
    dim = overrides.pop("dim", dim)
    channels = overrides.pop("channels", channels)
    for key, value in overrides.items():
        if key not in values:
            raise ConfigError(f"unknown configuration key {key!r}")
        values[key] = value
    return TrainConfig(objective, dim, channels, values)
