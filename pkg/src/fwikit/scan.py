"""Misfit versus time shift for a Ricker wavelet (convexity scan)."""
from __future__ import annotations

import numpy as np

from . import objectives as obj


def ricker_at(f0: float, t):
    a = (np.pi * f0 * np.asarray(t)) ** 2
    return (1 - 2 * a) * np.exp(-a)


DEFAULT_CONFIGS = {
    "L2": obj.ObjectiveConfig("L2"),
    "L1": obj.ObjectiveConfig("L1"),
    "StudentT": obj.ObjectiveConfig("StudentT"),
    "Envelope": obj.ObjectiveConfig("Envelope"),
    "GC": obj.ObjectiveConfig("GC"),
    "SoftDTW": obj.ObjectiveConfig("SoftDTW", softdtw_gamma=0.0),
    "Sinkhorn": obj.ObjectiveConfig("Sinkhorn"),
}


def convexity_scan(f0: float = 6.0, max_shift: float = 0.5, step: float = 0.01,
                   dt: float = 0.002, duration: float = 2.0, configs=None):
    """Raw misfits of a centred Ricker against shifted copies.

    Returns (shifts, {kind: values}).  The observed trace peaks in the middle
    of a `duration`-long record.
    """
    configs = DEFAULT_CONFIGS if configs is None else configs
    n = int(round(max_shift / step))
    shifts = np.round(np.arange(-n, n + 1) * step, 10)
    t = np.arange(int(round(duration / dt)) + 1) * dt
    t0 = duration / 2
    obs = ricker_at(f0, t - t0)[:, None]
    curves = {}
    for kind, cfg in configs.items():
        vals = []
        for s in shifts:
            cal = ricker_at(f0, t - t0 - s)[:, None]
            vals.append(float(obj.evaluate(cfg, obs, cal, dt).data))
        curves[kind] = np.array(vals)
    return shifts, curves


def normalise(values):
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    return np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)


def interior_minima(values) -> list:
    v = np.asarray(values)
    return [i for i in range(1, len(v) - 1) if v[i] < v[i - 1] and v[i] < v[i + 1]]
