"""Energies, dipole, conservation-law diagnostics, and dipole spectra.

The two violation diagnostics quantify how the averaged correction
potential departs from the orbital-resolved one along a trajectory:

* ``energy_rate_diagnostic`` predicts the instantaneous drift dE/dt of the
  averaged-potential schemes.  It evaluates
  ``- sum_a Im int {u[rho_a] - V_S} psi_a lap(psi_a)*``, equivalently
  ``+ sum_a int {u[rho_a] - V_S} Im(psi_a* lap psi_a)``; the sign is fixed
  by the chain rule over the energy functional with the symmetry condition
  enforced (the unitary's own time dependence is stationary there).
* ``zft_residual`` is the anomalous internal force vector
  ``F_k = sum_a int {u[rho_a] - V_S} d_k rho_a``, the amount by which
  d/dt of the total momentum misses the external force.  Central-difference
  stencils make the underlying integration-by-parts identities exact, so
  this vector form is the discrete force residual itself.

Both vanish identically for a single orbital and are zero by construction
for the plain mean-field scheme (no orbital correction exists there).
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import Scheme
from .localize import (
    DENSITY_FLOOR,
    localization_quality,
    orbital_potentials,
    symmetry_matrix,
    symmetry_residual,
    weighted_average_potential,
)


@dataclass(frozen=True)
class EnergyBreakdown:
    """Energy components; ``total`` is their sum in a fixed order."""

    kinetic: float
    external: float
    alda: float
    sic_subtraction: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "total", self.kinetic + self.external + self.alda - self.sic_subtraction
        )


def kinetic_energy(state, order=2):
    """sum_i <phi_i| -1/2 lap |phi_i>."""
    grid = state.grid
    lap = grid.laplacian(state.phi, order=order)
    val = -0.5 * grid.dvol * np.sum(np.real(np.conj(state.phi) * lap))
    return float(val)


def total_energy(state, system, scheme, order=2, orbs=None):
    """Energy breakdown of one state under one scheme.

    The subtraction term sums the one-orbital mean-field energies of the
    scheme's own orbital set: the localized set for two-set schemes, the
    diagonal set for the one-set scheme, absent for the plain mean field.
    ``orbs`` overrides the subtraction set when the caller already holds it.
    """
    scheme = Scheme(scheme)
    grid = state.grid
    rho = state.density()
    kin = kinetic_energy(state, order=order)
    ext = float(np.real(grid.integrate(rho * system.v_ext)))
    alda = system.mf.e_alda(rho)
    if scheme.has_sic:
        if orbs is None:
            orbs = state.psi() if scheme.two_set else state.phi
        dens = np.real(orbs.conj() * orbs)
        sub = float(sum(system.mf.e_alda(d) for d in dens))
    else:
        sub = 0.0
    return EnergyBreakdown(kin, ext, alda, sub)


def dipole(rho, grid):
    """int r rho(r) dr, one component per axis."""
    grid.check(rho)
    return np.array([float(grid.integrate(rho * mesh)) for mesh in grid.meshes()])


def total_momentum(state, order=2):
    """sum_i <phi_i| -i d_k |phi_i> per axis."""
    grid = state.grid
    grads = grid.gradient(state.phi, order=order)
    return np.array(
        [float(grid.dvol * np.sum(np.imag(np.conj(state.phi) * g))) for g in grads]
    )


def external_force(rho, v_ext, grid, order=2):
    """- int rho grad(v_ext), reported separately from the ZFT residual."""
    grid.check(rho)
    grads = grid.gradient(v_ext, order=order)
    return np.array([-float(grid.integrate(rho * g)) for g in grads])


def _mismatch_fields(orbs, mf, dens=None, upot=None, floor=DENSITY_FLOOR):
    if dens is None or upot is None:
        dens, upot = orbital_potentials(orbs, mf)
    avg = weighted_average_potential(dens, upot, floor=floor)
    return dens, upot, upot - avg[None]


def energy_rate_diagnostic(orbs, mf, dens=None, upot=None, order=2, floor=DENSITY_FLOOR):
    """Predicted instantaneous dE/dt of averaged-correction propagation."""
    grid = mf.grid
    dens, upot, diff = _mismatch_fields(orbs, mf, dens, upot, floor)
    lap = grid.laplacian(orbs, order=order)
    rate = 0.0
    for a in range(orbs.shape[0]):
        rate += float(grid.integrate(diff[a] * np.imag(np.conj(orbs[a]) * lap[a])))
    return rate


def zft_residual(orbs, mf, dens=None, upot=None, order=2, floor=DENSITY_FLOOR):
    """Anomalous internal force sum_a int {u[rho_a] - V_S} grad(rho_a)."""
    grid = mf.grid
    dens, upot, diff = _mismatch_fields(orbs, mf, dens, upot, floor)
    out = np.zeros(grid.dim)
    for a in range(orbs.shape[0]):
        for kax, g in enumerate(grid.gradient(dens[a], order=order)):
            out[kax] += float(grid.integrate(diff[a] * g))
    return out


@dataclass
class ObservableRecord:
    """One row of the observable series; CSV columns follow field order."""

    t: float
    e_total: float
    e_kinetic: float
    e_external: float
    e_alda: float
    e_sic_subtraction: float
    dipole: tuple
    zft: tuple
    energy_rate: float
    symmetry_residual: float
    orthonormality_defect: float
    localization_quality: float

    @staticmethod
    def header(dim):
        axes = "xy"[:dim]
        cols = ["t", "E_total", "E_kinetic", "E_external", "E_ALDA", "E_SIC_subtraction"]
        cols += [f"dipole_{a}" for a in axes]
        cols += [f"zft_{a}" for a in axes]
        cols += ["energy_rate", "symmetry_residual", "orthonormality_defect", "localization_quality"]
        return cols

    def row(self):
        vals = [
            self.t,
            self.e_total,
            self.e_kinetic,
            self.e_external,
            self.e_alda,
            self.e_sic_subtraction,
            *self.dipole,
            *self.zft,
            self.energy_rate,
            self.symmetry_residual,
            self.orthonormality_defect,
            self.localization_quality,
        ]
        return [f"{v:.17g}" for v in vals]


def measure(state, pots, system, scheme, sym_residual=0.0, ortho_defect=0.0, stencil_order=2):
    """Assemble the full per-step record from a state and its potential set."""
    scheme = Scheme(scheme)
    grid = state.grid
    rho = state.density()
    dip = dipole(rho, grid)
    if scheme.has_sic:
        orbs = pots.orbs
        dens = np.real(orbs.conj() * orbs)
        energy = total_energy(state, system, scheme, order=stencil_order, orbs=orbs)
        rate = energy_rate_diagnostic(orbs, system.mf, dens, pots.u_orb, order=stencil_order)
        zft = zft_residual(orbs, system.mf, dens, pots.u_orb, order=stencil_order)
        loc = localization_quality(orbs, system.mf, dens=dens, upot=pots.u_orb)
        if scheme.two_set:
            sym = symmetry_residual(symmetry_matrix(orbs, system.mf, pots.u_orb))
        else:
            sym = 0.0
    else:
        energy = total_energy(state, system, scheme, order=stencil_order)
        rate = 0.0
        zft = np.zeros(grid.dim)
        loc = 0.0
        sym = 0.0
    return ObservableRecord(
        t=state.t,
        e_total=energy.total,
        e_kinetic=energy.kinetic,
        e_external=energy.external,
        e_alda=energy.alda,
        e_sic_subtraction=energy.sic_subtraction,
        dipole=tuple(dip),
        zft=tuple(zft),
        energy_rate=rate,
        symmetry_residual=sym,
        orthonormality_defect=ortho_defect,
        localization_quality=loc,
    )


def write_records(path, records, dim):
    """Write a full record series as CSV (header plus one row per record)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ObservableRecord.header(dim))
        for rec in records:
            w.writerow(rec.row())


class RecordWriter:
    """Incremental CSV emitter: one flushed row per record, header first.

    Used as the run loop's writer callback so partially completed runs leave
    a valid, readable series behind.
    """

    def __init__(self, path, dim, write_header=True, mode="w"):
        # mode="a" continues an interrupted run's file on checkpoint resume
        self._fh = open(path, mode, newline="")
        self._csv = csv.writer(self._fh)
        if write_header:
            self._csv.writerow(ObservableRecord.header(dim))
            self._fh.flush()

    def __call__(self, rec):
        self._csv.writerow(rec.row())
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_series(path):
    """Read an observable CSV back as a dict of column name -> float array."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"empty observable file: {path}")
    names = rows[0]
    data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float)
    if data.size == 0:
        raise ValueError(f"observable file has no data rows: {path}")
    return {name: data[:, i] for i, name in enumerate(names)}


@dataclass
class SpectrumResult:
    """Damped discrete Fourier transform of a dipole series."""

    freq: np.ndarray
    intensity: np.ndarray
    peaks: list  # (omega, intensity), strongest first


def spectrum(times, signal, damping=None):
    """Spectral analysis of a uniformly sampled dipole series.

    The series (mean removed) is windowed by exp(-damping * (t - t0)) and
    Fourier transformed; the default damping makes the window decay to 1e-3
    at the series end.  Peaks are local maxima refined by quadratic
    interpolation, sorted by intensity.
    """
    times = np.asarray(times, dtype=float)
    signal = np.asarray(signal, dtype=float)
    if times.ndim != 1 or times.shape != signal.shape:
        raise ValueError("times and signal must be matching 1D arrays")
    if times.size < 64:
        raise ValueError(f"series too short for spectral analysis: {times.size} < 64")
    dts = np.diff(times)
    dt = float(dts[0])
    if not np.allclose(dts, dt, rtol=1e-10, atol=1e-12):
        raise ValueError("series is not uniformly sampled")
    span = float(times[-1] - times[0])
    if damping is None:
        damping = math.log(1e3) / span
    windowed = (signal - signal.mean()) * np.exp(-damping * (times - times[0]))
    amp = np.fft.rfft(windowed) * dt
    freq = 2.0 * np.pi * np.fft.rfftfreq(times.size, d=dt)
    intensity = np.abs(amp) ** 2
    peaks = []
    for i in range(1, len(intensity) - 1):
        if intensity[i] > intensity[i - 1] and intensity[i] >= intensity[i + 1]:
            y0, y1, y2 = intensity[i - 1 : i + 2]
            denom = y0 - 2.0 * y1 + y2
            shift = 0.5 * (y0 - y2) / denom if denom != 0.0 else 0.0
            shift = float(np.clip(shift, -0.5, 0.5))
            omega = freq[i] + shift * (freq[1] - freq[0])
            height = y1 - 0.25 * (y0 - y2) * shift
            peaks.append((float(omega), float(height)))
    peaks.sort(key=lambda p: p[1], reverse=True)
    return SpectrumResult(freq=freq, intensity=intensity, peaks=peaks)
