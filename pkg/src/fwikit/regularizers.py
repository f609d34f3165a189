"""Tikhonov and total-variation penalties evaluated on the tape."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("none", "tikhonov1", "tikhonov2", "tv1", "tv2")


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = "none"
    alpha: float = 0.0
    tv_eps: float | None = None  # None -> 1e-6 * rms(m)^2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.tv_eps is not None and self.tv_eps <= 0:
            raise ValueError("tv_eps must be > 0")


def _pad_zero(d: Tensor, axis: int, before: int, after: int) -> Tensor:
    parts = []
    shape = list(d.shape)
    if before:
        shape[axis] = before
        parts.append(Tensor(np.zeros(shape)))
    parts.append(d)
    if after:
        shape[axis] = after
        parts.append(Tensor(np.zeros(shape)))
    return ad.concat(parts, axis=axis)


def first_diff(m: Tensor, axis: int, h: float) -> Tensor:
    """Forward difference, zero on the last row/column."""
    if axis == 1:
        d = m[:, 1:] - m[:, :-1]
    else:
        d = m[1:, :] - m[:-1, :]
    return ad.scale(_pad_zero(d, axis, 0, 1), 1.0 / h)


def second_diff(m: Tensor, axis: int, h: float) -> Tensor:
    """Three-point second difference, zero on the first and last row/column."""
    if axis == 1:
        d = m[:, 2:] - ad.scale(m[:, 1:-1], 2.0) + m[:, :-2]
    else:
        d = m[2:, :] - ad.scale(m[1:-1, :], 2.0) + m[:-2, :]
    return ad.scale(_pad_zero(d, axis, 1, 1), 1.0 / (h * h))


def default_tv_eps(m) -> float:
    a = m.data if isinstance(m, Tensor) else np.asarray(m)
    return max(1e-6 * float(np.mean(a * a)), 1e-300)


def penalty(config: RegularizerConfig, m, dx: float, dz: float) -> Tensor:
    """Unweighted penalty R(m); multiply by config.alpha when adding to the misfit."""
    m = ad.as_tensor(m)
    if config.kind == "none":
        return Tensor(np.array(0.0))
    order = 2 if config.kind.endswith("2") else 1
    need = order + 1
    if m.ndim != 2 or min(m.shape) < need:
        raise ValueError(f"{config.kind} needs a 2D field at least {need}x{need}, got {m.shape}")
    diff = first_diff if order == 1 else second_diff
    gx = diff(m, 1, dx)
    gz = diff(m, 0, dz)
    sq = gx * gx + gz * gz
    area = dx * dz
    if config.kind.startswith("tikhonov"):
        return ad.scale(ad.tsum(sq), area)
    if config.tv_eps is not None:
        eps = Tensor(np.array(config.tv_eps))
    else:
        # recorded on the tape so the default smoothing is part of the differentiated function
        eps = ad.add(ad.scale(ad.mean(m * m), 1e-6), 1e-300)
    ones = Tensor(np.ones(m.shape))
    tv = ad.tsum(ad.sqrt(sq + ad.mul(ones, eps)))
    # subtract the flat-field baseline so constants score exactly zero
    return ad.scale(tv - ad.scale(ad.sqrt(eps), float(m.size)), area)


def weighted_penalty(config: RegularizerConfig, m, dx: float, dz: float) -> Tensor:
    if config.kind == "none" or config.alpha == 0:
        return Tensor(np.array(0.0))
    return ad.scale(penalty(config, m, dx, dz), config.alpha)
