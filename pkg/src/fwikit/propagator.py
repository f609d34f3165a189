"""Staggered-grid finite-difference wave propagation built from autodiff primitives.

Both kernels share one layout on a PML-padded grid:

    p / txx / tzz  at (i, j)          vx  at (i, j+1/2)
    vz             at (i+1/2, j)      txz at (i+1/2, j+1/2)

and a leapfrog update (velocities first, then pressure/stresses).  Each time
step is a handful of tape primitives, so any misfit computed from the returned
traces can be differentiated back to the model fields.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .earth_model import (AcousticModel, AcquisitionGeometry, ElasticModel, Grid2D,
                          ModelError, SourceWavelet, TIModel,
                          isotropic_stiffness, thomsen_to_stiffness)

PML_R0 = 1e-3


class InstabilityError(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"wavefield became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class SimulationConfig:
    dt: float
    nt: int
    fd_order: int = 4
    pml_cells: int = 10
    free_surface: bool = False
    source_type: str = "force_z"  # elastic only: force_z | explosive

    def __post_init__(self):
        if self.dt <= 0 or self.nt < 1:
            raise ModelError("dt > 0 and nt >= 1 required")
        if self.fd_order not in (4, 6, 8):
            raise ModelError(f"fd_order must be 4, 6 or 8, got {self.fd_order}")
        if self.pml_cells < 8:
            raise ModelError("pml_cells must be >= 8")
        if self.source_type not in ("force_z", "explosive"):
            raise ModelError(f"unknown source_type {self.source_type!r}")


@dataclass(frozen=True)
class PMLProfile:
    damping_x: np.ndarray  # (2, NX): integer and half-node positions
    damping_z: np.ndarray  # (2, NZ)


@dataclass
class ShotRecord:
    traces: np.ndarray  # (nt, nrec)
    dt: float
    component: str
    source_index: int


def cfl_number(order: int) -> float:
    return 1.0 / float(np.sum(np.abs(ad.fd_coefficients(order))))


def stability_check(v_max: float, dx: float, dz: float, order: int = 4) -> float:
    """Largest stable time step for the staggered scheme of the given order."""
    return cfl_number(order) * min(dx, dz) / (v_max * math.sqrt(2.0))


def model_vmax(model) -> float:
    if isinstance(model, AcousticModel):
        return float(model.vp.max())
    if isinstance(model, ElasticModel):
        return float(model.vp.max())
    if isinstance(model, TIModel):
        c = thomsen_to_stiffness(model)
        return float(np.sqrt(np.maximum(c.C11, c.C33) / model.rho).max())
    raise TypeError(type(model))


def pml_profile(n: int, pml: int, h: float, v_max: float, low: bool = True, high: bool = True):
    """Quadratic CPML damping at integer (row 0) and half-node (row 1) positions."""
    L = pml * h
    d0 = 3.0 * v_max * math.log(1.0 / PML_R0) / (2.0 * L)
    out = np.zeros((2, n))
    for row, shift in ((0, 0.0), (1, 0.5)):
        x = np.arange(n) + shift
        dist = np.zeros(n)
        if low:
            dist = np.maximum(dist, pml - x)
        if high:
            dist = np.maximum(dist, x - (n - 1 - pml))
        out[row] = d0 * (np.clip(dist, 0, None) / pml) ** 2
    return out


class _Layout:
    """PML padding, coefficient arrays and source/receiver indices for one grid."""

    def __init__(self, grid: Grid2D, config: SimulationConfig, v_max: float):
        pml = config.pml_cells
        self.grid, self.config = grid, config
        self.top = 0 if config.free_surface else pml
        self.NZ = grid.nz + self.top + pml
        self.NX = grid.nx + 2 * pml
        self.pml = pml
        dpx = pml_profile(self.NX, pml, grid.dx, v_max)
        dpz = pml_profile(self.NZ, pml, grid.dz, v_max, low=not config.free_surface)
        self.profile = PMLProfile(dpx, dpz)
        dt = config.dt
        # a = exp(-d dt), b = a - 1, broadcast to 2D for the four staggered positions
        ax = np.exp(-dpx * dt)
        az = np.exp(-dpz * dt)
        self.ax = {k: np.broadcast_to(ax[k][None, :], (self.NZ, self.NX)).copy() for k in (0, 1)}
        self.az = {k: np.broadcast_to(az[k][:, None], (self.NZ, self.NX)).copy() for k in (0, 1)}
        self.bx = {k: self.ax[k] - 1.0 for k in (0, 1)}
        self.bz = {k: self.az[k] - 1.0 for k in (0, 1)}
        self.coeffs = ad.fd_coefficients(config.fd_order)
        rows = np.clip(np.arange(self.NZ) - self.top, 0, grid.nz - 1)
        cols = np.clip(np.arange(self.NX) - pml, 0, grid.nx - 1)
        self.pad_index = rows[:, None] * grid.nx + cols[None, :]
        flat = np.arange(self.NZ * self.NX).reshape(self.NZ, self.NX)
        self.right = flat[:, np.minimum(np.arange(self.NX) + 1, self.NX - 1)]
        self.down = flat[np.minimum(np.arange(self.NZ) + 1, self.NZ - 1), :]
        self.down_right = flat[np.minimum(np.arange(self.NZ) + 1, self.NZ - 1)][
            :, np.minimum(np.arange(self.NX) + 1, self.NX - 1)]
        self.top_mask = None
        if config.free_surface:
            m = np.ones((self.NZ, self.NX))
            m[0, :] = 0.0
            self.top_mask = m

    def flat(self, ix, iz):
        return (iz + self.top) * self.NX + (ix + self.pml)

    def pad(self, field) -> Tensor:
        return ad.gather(field, self.pad_index)

    def cpml(self, deriv: Tensor, psi: Tensor, axis: str, half: int):
        a = self.ax[half] if axis == "x" else self.az[half]
        b = self.bx[half] if axis == "x" else self.bz[half]
        psi = ad.mul(a, psi) + ad.mul(b, deriv)
        return deriv + psi, psi


def _dx(layout, f, forward):
    return ad.staggered_diff(f, 1, layout.coeffs, forward, 1.0 / layout.grid.dx)


def _dz(layout, f, forward):
    return ad.staggered_diff(f, 0, layout.coeffs, forward, 1.0 / layout.grid.dz)


def _half_average(layout, padded: Tensor, index) -> Tensor:
    return ad.scale(padded + ad.gather(padded, index), 0.5)


class AcousticKernel:
    """Pressure-velocity scheme; state = (p, vx, vz, psi_px, psi_pz, psi_vx, psi_vz)."""

    n_state = 7

    def __init__(self, grid: Grid2D, geometry: AcquisitionGeometry, wavelet,
                 config: SimulationConfig, v_max: float, shot: int = 0):
        geometry.validate(grid)
        w = wavelet.samples if isinstance(wavelet, SourceWavelet) else np.asarray(wavelet, float)
        if len(w) != config.nt:
            raise ModelError(f"wavelet length {len(w)} != nt {config.nt}")
        dt_max = stability_check(v_max, grid.dx, grid.dz, 4)
        if config.dt > dt_max:
            raise ModelError(f"dt={config.dt} exceeds the stable limit {dt_max:.3e}")
        self.grid, self.config, self.wavelet = grid, config, w
        self.layout = _Layout(grid, config, v_max)
        sx, sz = geometry.sources[shot]
        self.src = np.array([self.layout.flat(sx, sz)])
        comp = geometry.record_component
        self.component = comp
        self.rec = np.array([self.layout.flat(ix, iz) for ix, iz in geometry.receivers])

    def coefficients(self, vp, rho) -> dict:
        L = self.layout
        dt = self.config.dt
        vp_p, rho_p = L.pad(vp), L.pad(rho)
        kappa = rho_p * vp_p * vp_p
        c = {
            "dt_kappa": ad.scale(kappa, dt),
            "dt_bx": ad.div(dt, _half_average(L, rho_p, L.right)),
            "dt_bz": ad.div(dt, _half_average(L, rho_p, L.down)),
        }
        c["src"] = ad.scale(ad.gather(c["dt_kappa"], self.src), 1.0 / (self.grid.dx * self.grid.dz))
        return c

    def initial_state(self):
        z = np.zeros((self.layout.NZ, self.layout.NX))
        return tuple(Tensor(z.copy()) for _ in range(self.n_state))

    def step(self, state, c, n):
        L = self.layout
        p, vx, vz, ppx, ppz, pvx, pvz = state
        dpx, ppx = L.cpml(_dx(L, p, True), ppx, "x", 1)
        dpz, ppz = L.cpml(_dz(L, p, True), ppz, "z", 1)
        vx = vx + c["dt_bx"] * dpx
        vz = vz + c["dt_bz"] * dpz
        dvx, pvx = L.cpml(_dx(L, vx, False), pvx, "x", 0)
        dvz, pvz = L.cpml(_dz(L, vz, False), pvz, "z", 0)
        p = p + c["dt_kappa"] * (dvx + dvz)
        w = self.wavelet[n]
        if w != 0.0:
            p = ad.scatter_add(p, self.src, ad.scale(c["src"], w))
        if L.top_mask is not None:
            p = ad.mul(L.top_mask, p)
        if self.component == "pressure":
            sample = ad.gather(p, self.rec)
        elif self.component == "vx":
            sample = ad.gather(vx, self.rec)
        else:
            sample = ad.gather(vz, self.rec)
        return (p, vx, vz, ppx, ppz, pvx, pvz), sample


class ElasticKernel:
    """Velocity-stress P-SV scheme for C11, C13, C33, C44 and rho.

    state = (vx, vz, txx, tzz, txz) + 8 CPML memory fields.
    """

    n_state = 13

    def __init__(self, grid: Grid2D, geometry: AcquisitionGeometry, wavelet,
                 config: SimulationConfig, v_max: float, shot: int = 0):
        geometry.validate(grid)
        w = wavelet.samples if isinstance(wavelet, SourceWavelet) else np.asarray(wavelet, float)
        if len(w) != config.nt:
            raise ModelError(f"wavelet length {len(w)} != nt {config.nt}")
        dt_max = stability_check(v_max, grid.dx, grid.dz, config.fd_order)
        if config.dt > dt_max:
            raise ModelError(f"dt={config.dt} exceeds the stable limit {dt_max:.3e}")
        self.grid, self.config, self.wavelet = grid, config, w
        self.layout = _Layout(grid, config, v_max)
        sx, sz = geometry.sources[shot]
        self.src = np.array([self.layout.flat(sx, sz)])
        self.component = geometry.record_component
        self.rec = np.array([self.layout.flat(ix, iz) for ix, iz in geometry.receivers])

    def coefficients(self, C11, C13, C33, C44, rho) -> dict:
        L = self.layout
        dt = self.config.dt
        C11p, C13p, C33p, C44p, rho_p = (L.pad(f) for f in (C11, C13, C33, C44, rho))
        # C44 on (i+1/2, j+1/2): arithmetic mean of the four surrounding nodes
        c44h = ad.scale(C44p + ad.gather(C44p, L.right) + ad.gather(C44p, L.down)
                        + ad.gather(C44p, L.down_right), 0.25)
        c = {
            "dt_C11": ad.scale(C11p, dt), "dt_C13": ad.scale(C13p, dt),
            "dt_C33": ad.scale(C33p, dt), "dt_C44h": ad.scale(c44h, dt),
            "dt_bx": ad.div(dt, _half_average(L, rho_p, L.right)),
            "dt_bz": ad.div(dt, _half_average(L, rho_p, L.down)),
        }
        area = 1.0 / (self.grid.dx * self.grid.dz)
        if self.config.source_type == "force_z":
            c["src_vz"] = ad.scale(ad.gather(c["dt_bz"], self.src), area)
        else:
            c["src_txx"] = ad.scale(ad.gather(c["dt_C11"] + c["dt_C13"], self.src), 0.5 * area)
            c["src_tzz"] = ad.scale(ad.gather(c["dt_C13"] + c["dt_C33"], self.src), 0.5 * area)
        return c

    def initial_state(self):
        z = np.zeros((self.layout.NZ, self.layout.NX))
        return tuple(Tensor(z.copy()) for _ in range(self.n_state))

    def step(self, state, c, n):
        L = self.layout
        (vx, vz, txx, tzz, txz,
         p_txx_x, p_txz_z, p_txz_x, p_tzz_z, p_vx_x, p_vz_z, p_vx_z, p_vz_x) = state
        w = self.wavelet[n]
        # velocities
        d1, p_txx_x = L.cpml(_dx(L, txx, True), p_txx_x, "x", 1)
        d2, p_txz_z = L.cpml(_dz(L, txz, False), p_txz_z, "z", 0)
        vx = vx + c["dt_bx"] * (d1 + d2)
        d3, p_txz_x = L.cpml(_dx(L, txz, False), p_txz_x, "x", 0)
        d4, p_tzz_z = L.cpml(_dz(L, tzz, True), p_tzz_z, "z", 1)
        vz = vz + c["dt_bz"] * (d3 + d4)
        if w != 0.0 and "src_vz" in c:
            vz = ad.scatter_add(vz, self.src, ad.scale(c["src_vz"], w))
        # stresses
        exx, p_vx_x = L.cpml(_dx(L, vx, False), p_vx_x, "x", 0)
        ezz, p_vz_z = L.cpml(_dz(L, vz, False), p_vz_z, "z", 0)
        txx = txx + (c["dt_C11"] * exx + c["dt_C13"] * ezz)
        tzz = tzz + (c["dt_C13"] * exx + c["dt_C33"] * ezz)
        exz1, p_vx_z = L.cpml(_dz(L, vx, True), p_vx_z, "z", 1)
        exz2, p_vz_x = L.cpml(_dx(L, vz, True), p_vz_x, "x", 1)
        txz = txz + c["dt_C44h"] * (exz1 + exz2)
        if w != 0.0 and "src_txx" in c:
            txx = ad.scatter_add(txx, self.src, ad.scale(c["src_txx"], w))
            tzz = ad.scatter_add(tzz, self.src, ad.scale(c["src_tzz"], w))
        if L.top_mask is not None:
            tzz = ad.mul(L.top_mask, tzz)
            txz = ad.mul(L.top_mask, txz)
        if self.component == "pressure":
            sample = ad.scale(ad.gather(txx, self.rec) + ad.gather(tzz, self.rec), 0.5)
        elif self.component == "vx":
            sample = ad.gather(vx, self.rec)
        else:
            sample = ad.gather(vz, self.rec)
        return ((vx, vz, txx, tzz, txz, p_txx_x, p_txz_z, p_txz_x, p_tzz_z,
                 p_vx_x, p_vz_z, p_vx_z, p_vz_x), sample)


def run_steps(kernel, state, coeffs, n0: int, n1: int):
    """Advance steps n0..n1-1; returns (state, list of per-step receiver samples)."""
    samples = []
    with ad.finite_checks(False):
        for n in range(n0, n1):
            state, s = kernel.step(state, coeffs, n)
            if not np.isfinite(state[0].data.sum() + state[2].data.sum()):
                raise InstabilityError(n)
            samples.append(s)
    return state, samples


def forward_traces(kernel, coeffs) -> Tensor:
    """Full simulation on the active tape; returns an (nt, nrec) traces tensor."""
    _, samples = run_steps(kernel, kernel.initial_state(), coeffs, 0, kernel.config.nt)
    return ad.stack(samples, axis=0)


def acoustic_kernel(model: AcousticModel, geometry, wavelet, config, shot=0) -> AcousticKernel:
    return AcousticKernel(model.grid, geometry, wavelet, config, model_vmax(model), shot)


def simulate_acoustic(model: AcousticModel, geometry: AcquisitionGeometry, wavelet,
                      config: SimulationConfig, shot: int = 0) -> ShotRecord:
    k = acoustic_kernel(model, geometry, wavelet, config, shot)
    traces = forward_traces(k, k.coefficients(Tensor(model.vp), Tensor(model.rho)))
    return ShotRecord(traces.data, config.dt, geometry.record_component, shot)


def elastic_stiffness(model):
    if isinstance(model, ElasticModel):
        return isotropic_stiffness(model), model.rho
    if isinstance(model, TIModel):
        return thomsen_to_stiffness(model), model.rho
    if isinstance(model, tuple):
        return model
    raise TypeError(f"cannot derive stiffness from {type(model)}")


def simulate_elastic(model, geometry: AcquisitionGeometry, wavelet, config: SimulationConfig,
                     shot: int = 0, grid: Grid2D | None = None) -> ShotRecord:
    """`model` is an ElasticModel, a TIModel or a (StiffnessField, rho) pair (then pass grid)."""
    stiff, rho = elastic_stiffness(model)
    grid = grid if grid is not None else model.grid
    v_max = float(np.sqrt(np.maximum(stiff.C11, stiff.C33) / rho).max())
    k = ElasticKernel(grid, geometry, wavelet, config, v_max, shot)
    c = k.coefficients(*(Tensor(f) for f in (stiff.C11, stiff.C13, stiff.C33, stiff.C44, rho)))
    traces = forward_traces(k, c)
    return ShotRecord(traces.data, config.dt, geometry.record_component, shot)
