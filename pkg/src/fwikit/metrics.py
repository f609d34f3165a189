"""Model-quality metrics and trace-noise synthesis."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SNR_CAP_DB = 200.0


def _mask(shape, mask):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape):
        raise ValueError("mask shape mismatch")
    return m


def mape(v_true, v_hat, mask=None) -> float:
    """Mean absolute percentage error over unmasked (True) cells."""
    v_true = np.asarray(v_true, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if v_true.shape != v_hat.shape:
        raise ValueError("shape mismatch")
    m = _mask(v_true.shape, mask)
    t = v_true[m]
    if (t == 0).any():
        raise ValueError("true model has zeros on unmasked cells")
    return float(np.mean(np.abs((t - v_hat[m]) / t)) * 100.0)


def ssim(v_true, v_hat, mask=None, win: int = 7) -> float:
    """Mean SSIM over all win x win windows lying fully inside the unmasked region."""
    a = np.asarray(v_true, dtype=np.float64)
    b = np.asarray(v_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    m = _mask(a.shape, mask)
    L = float(a[m].max() - a[m].min()) if m.any() else 0.0
    if L == 0:
        L = 1.0  # flat reference: fall back to a unit dynamic range
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    if a.shape[0] < win or a.shape[1] < win:
        raise ValueError("field smaller than one SSIM window")
    full = sliding_window_view(m, (win, win)).all(axis=(-1, -2))
    if not full.any():
        raise ValueError("mask leaves no full SSIM window")
    wa = sliding_window_view(a, (win, win))[full]
    wb = sliding_window_view(b, (win, win))[full]
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    da = wa - mu_a[:, None, None]
    db = wb - mu_b[:, None, None]
    va = (da * da).mean(axis=(-1, -2))
    vb = (db * db).mean(axis=(-1, -2))
    cov = (da * db).mean(axis=(-1, -2))
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return float(s.mean())


def add_trace_noise(traces, factor: float, seed: int = 0):
    """Gaussian noise per trace with the trace's mean and factor x its std.

    `traces` is (..., nt, nrec); returns (noisy, mean SNR in dB over traces).
    """
    if factor <= 0:
        raise ValueError("factor must be positive")
    d = np.asarray(traces, dtype=np.float64)
    rng = np.random.default_rng(seed)
    mu = d.mean(axis=-2, keepdims=True)
    sd = d.std(axis=-2, keepdims=True)
    noise = mu + factor * sd * rng.standard_normal(d.shape)
    ps = (d * d).sum(axis=-2)
    pn = (noise * noise).sum(axis=-2)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = 10 * np.log10(ps / pn)
    snr = np.where(pn == 0, SNR_CAP_DB, np.minimum(snr, SNR_CAP_DB))
    snr = np.where(ps == 0, -SNR_CAP_DB, snr)
    return d + noise, float(np.mean(snr))
