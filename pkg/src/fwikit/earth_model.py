"""Earth models, parameter conversions, acquisition geometry and source wavelets."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Grid2D:
    nx: int
    nz: int
    dx: float
    dz: float
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 8 or self.nz < 8:
            raise ModelError(f"grid must be at least 8x8, got nz={self.nz}, nx={self.nx}")
        if self.dx <= 0 or self.dz <= 0:
            raise ModelError("grid spacing must be positive")

    @property
    def shape(self):
        return (self.nz, self.nx)


def _field(grid, a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        a = np.full(grid.shape, float(a))
    if a.shape != grid.shape:
        raise ModelError(f"{name} has shape {a.shape}, grid is {grid.shape}")
    if not np.isfinite(a).all():
        raise ModelError(f"{name} contains non-finite values")
    return a


@dataclass(frozen=True)
class AcousticModel:
    grid: Grid2D
    vp: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vp", _field(self.grid, self.vp, "vp"))
        object.__setattr__(self, "rho", _field(self.grid, self.rho, "rho"))
        if (self.vp <= 0).any() or (self.rho <= 0).any():
            raise ModelError("vp and rho must be positive")


@dataclass(frozen=True)
class ElasticModel:
    grid: Grid2D
    vp: np.ndarray
    vs: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        for name in ("vp", "vs", "rho"):
            object.__setattr__(self, name, _field(self.grid, getattr(self, name), name))
        if (self.rho <= 0).any() or (self.vs < 0).any():
            raise ModelError("rho must be positive and vs non-negative")
        if not (self.vp > np.sqrt(2.0) * self.vs).all():
            raise ModelError("vp > sqrt(2) vs required (positive lambda)")


@dataclass(frozen=True)
class TIModel:
    grid: Grid2D
    alpha0: np.ndarray
    beta0: np.ndarray
    rho: np.ndarray
    epsilon: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    orientation: str = "VTI"

    def __post_init__(self):
        for name in ("alpha0", "beta0", "rho", "epsilon", "delta", "gamma"):
            object.__setattr__(self, name, _field(self.grid, getattr(self, name), name))
        if self.orientation not in ("VTI", "HTI"):
            raise ModelError(f"unknown orientation {self.orientation!r}")
        if not (self.alpha0 > self.beta0).all() or (self.beta0 <= 0).any():
            raise ModelError("alpha0 > beta0 > 0 required")
        if (1 + 2 * self.epsilon <= 0).any() or (1 + 2 * self.delta <= 0).any():
            raise ModelError("1 + 2 epsilon > 0 and 1 + 2 delta > 0 required")


@dataclass(frozen=True)
class StiffnessField:
    C11: np.ndarray
    C13: np.ndarray
    C33: np.ndarray
    C44: np.ndarray
    C66: np.ndarray


@dataclass(frozen=True)
class AcquisitionGeometry:
    sources: list
    receivers: list
    record_component: str = "pressure"

    def validate(self, grid: Grid2D, pml_cells: int = 0, free_surface: bool = False):
        """Indices are in model (non-PML) coordinates and must lie inside the grid."""
        if self.record_component not in ("pressure", "vx", "vz"):
            raise ModelError(f"unknown record component {self.record_component!r}")
        for kind, pts in (("source", self.sources), ("receiver", self.receivers)):
            if len(pts) == 0:
                raise ModelError(f"no {kind}s")
            for ix, iz in pts:
                if not (0 <= ix < grid.nx and 0 <= iz < grid.nz):
                    raise ModelError(f"{kind} ({ix}, {iz}) outside the model interior")


@dataclass(frozen=True)
class SourceWavelet:
    samples: np.ndarray
    dt: float
    f0: float
    t0: float

    @property
    def nt(self):
        return len(self.samples)


def ricker(f0: float, dt: float, nt: int, t0: float | None = None) -> SourceWavelet:
    """Ricker wavelet with unit peak at t0 (default 1.2/f0)."""
    if f0 <= 0 or dt <= 0 or nt < 2:
        raise ModelError("ricker needs f0 > 0, dt > 0, nt >= 2")
    if t0 is None:
        t0 = 1.2 / f0
    if t0 < 0:
        raise ModelError("t0 must be non-negative")
    if f0 > 0.5 / (2 * dt):
        warnings.warn(f"Ricker f0={f0} Hz is aliased at dt={dt}", stacklevel=2)
    tau = np.arange(nt) * dt - t0
    a = (np.pi * f0 * tau) ** 2
    return SourceWavelet((1 - 2 * a) * np.exp(-a), dt, f0, t0)


def thomsen_to_stiffness(model: TIModel) -> StiffnessField:
    """Exact (non-linearised) Thomsen inversion to 2D TI stiffness."""
    rho = model.rho
    C33 = rho * model.alpha0 ** 2
    C44 = rho * model.beta0 ** 2
    disc = 2 * model.delta * C33 * (C33 - C44) + (C33 - C44) ** 2
    if (disc < 0).any():
        raise ModelError("negative C13 discriminant: delta is physically inadmissible")
    C11 = C33 * (1 + 2 * model.epsilon)
    C66 = C44 * (1 + 2 * model.gamma)
    C13 = np.sqrt(disc) - C44
    if model.orientation == "HTI":
        C11, C33 = C33, C11
    return StiffnessField(C11, C13, C33, C44, C66)


def stiffness_to_thomsen(c: StiffnessField, rho, orientation: str = "VTI") -> dict:
    """Analytic inverse of :func:`thomsen_to_stiffness`."""
    C11, C33 = (c.C33, c.C11) if orientation == "HTI" else (c.C11, c.C33)
    C13, C44, C66 = c.C13, c.C44, c.C66
    return {
        "alpha0": np.sqrt(C33 / rho),
        "beta0": np.sqrt(C44 / rho),
        "epsilon": (C11 - C33) / (2 * C33),
        "gamma": (C66 - C44) / (2 * C44),
        "delta": ((C13 + C44) ** 2 - (C33 - C44) ** 2) / (2 * C33 * (C33 - C44)),
    }


def isotropic_stiffness(model: ElasticModel) -> StiffnessField:
    lam, mu = lame_and_bulk(model)
    return StiffnessField(lam + 2 * mu, lam, lam + 2 * mu, mu, mu)


def lame_and_bulk(model):
    """(lambda, mu) for an elastic model, kappa for an acoustic one."""
    if isinstance(model, AcousticModel):
        return model.rho * model.vp ** 2
    mu = model.rho * model.vs ** 2
    lam = model.rho * (model.vp ** 2 - 2 * model.vs ** 2)
    if (lam <= 0).any():
        raise ModelError("lambda <= 0: vp > sqrt(2) vs violated")
    return lam, mu


def gardner_density(vp):
    """rho [kg/m^3] = 310 vp^0.25 with vp in m/s."""
    vp = np.asarray(vp, dtype=np.float64)
    if (vp <= 0).any():
        raise ModelError("gardner_density needs vp > 0")
    return 310.0 * vp ** 0.25


def gaussian_smooth(a, window_x_m: float, window_z_m: float, dx: float, dz: float):
    """Separable Gaussian blur, sigma = window / (2 * spacing) cells, reflective edges."""
    if window_x_m <= 0 or window_z_m <= 0:
        raise ModelError("smoothing windows must be positive")
    sx = window_x_m / (2 * dx)
    sz = window_z_m / (2 * dz)
    # windows below one cell leave that axis untouched
    sigma = (sz if window_z_m >= dz else 0.0, sx if window_x_m >= dx else 0.0)
    return ndimage.gaussian_filter(np.asarray(a, dtype=np.float64), sigma, mode="reflect")
