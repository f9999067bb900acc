"""Orbital state: propagated orbitals, localizing unitary, densities.

The propagated ("diagonal") orbitals ``phi_i`` are stored as one complex
stack of shape ``(norb,) + grid.shape`` together with the square unitary
``u`` that defines the localized set ``psi_a = sum_i phi_i u[i, a]``.  The
unitary is the stored object; ``psi`` is always recomputed on demand so it
can never go stale.  The total density is the same for both sets; per-set
orbital densities differ and both are exposed.

Checkpoint format (version ``GSIC0001``, little-endian, documented in the
README): an 8-byte magic, an int64/float64 header (dim, bc flag, points per
axis, spacing, orbital count, time), then the raw complex128 bytes of the
orbital stack and of the unitary.  Raw complex128 is float64 re/im
interleaved, so round-trips are bitwise.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .grid import Grid

_MAGIC = b"GSIC0001"


class UnitarityError(ValueError):
    """A matrix expected to be unitary is not, beyond tolerance."""


def apply_unitary(phi, u, tol=1e-8):
    """Mix an orbital stack by a unitary: psi_a = sum_i phi_i u[i, a]."""
    phi = np.asarray(phi)
    u = np.asarray(u)
    n = phi.shape[0]
    if u.shape != (n, n):
        raise ValueError(f"unitary shape {u.shape} does not match {n} orbitals")
    defect = np.abs(u.conj().T @ u - np.eye(n)).max()
    if defect > tol:
        raise UnitarityError(f"matrix deviates from unitarity by {defect:.3e}")
    return np.tensordot(u.T, phi, axes=1)


@dataclass
class OrbitalState:
    """Diagonal orbitals, localizing unitary, and simulation time."""

    grid: Grid
    phi: np.ndarray  # (norb,) + grid.shape, complex128
    u: np.ndarray  # (norb, norb), complex128
    t: float = 0.0

    def __post_init__(self):
        self.phi = np.ascontiguousarray(self.phi, dtype=np.complex128)
        self.grid.check(self.phi)
        if self.phi.ndim != self.grid.dim + 1:
            raise ValueError("phi must be a stack of fields, one axis per orbital")
        n = self.phi.shape[0]
        self.u = np.ascontiguousarray(self.u, dtype=np.complex128)
        if self.u.shape != (n, n):
            raise ValueError("unitary shape does not match orbital count")
        self.t = float(self.t)

    @property
    def norb(self):
        return self.phi.shape[0]

    def copy(self):
        return OrbitalState(self.grid, self.phi.copy(), self.u.copy(), self.t)

    def psi(self):
        """Localized orbitals psi_a = sum_i phi_i u[i, a], recomputed fresh."""
        n = self.norb
        return (self.u.T @ self.phi.reshape(n, -1)).reshape(self.phi.shape)

    def density(self):
        """Total density, identical for the two orbital sets."""
        return np.real(self.phi.conj() * self.phi).sum(axis=0)

    def orbital_densities(self, localized=True):
        """Per-orbital densities of the localized (default) or diagonal set."""
        orbs = self.psi() if localized else self.phi
        return np.real(orbs.conj() * orbs)

    def currents(self, order=2):
        """Per-orbital probability currents Im[phi* grad phi], shape (norb, dim) + grid."""
        grads = self.grid.gradient(self.phi, order=order)
        return np.stack([np.imag(self.phi.conj() * g) for g in grads], axis=1)

    def gram(self):
        n = self.norb
        flat = self.phi.reshape(n, -1)
        return (flat.conj() @ flat.T) * self.grid.dvol

    def orthonormality_defect(self):
        """max |<phi_i|phi_j> - delta_ij| over the diagonal set."""
        n = self.norb
        return float(np.abs(self.gram() - np.eye(n)).max())


def lowdin(phi, grid):
    """Symmetric (closest-unitary) re-orthonormalization of a stack."""
    n = phi.shape[0]
    flat = phi.reshape(n, -1)
    s = (flat.conj() @ flat.T) * grid.dvol
    w, v = np.linalg.eigh(s)
    if w.min() <= 0.0:
        raise np.linalg.LinAlgError("orbital overlap matrix is singular")
    s_isqrt = (v * (1.0 / np.sqrt(w))) @ v.conj().T
    return (s_isqrt.T @ flat).reshape(phi.shape)


def gram_schmidt(phi, grid):
    """Sequential orthonormalization, preserving the leading orbitals."""
    out = np.array(phi, dtype=np.complex128, copy=True)
    n = out.shape[0]
    flat = out.reshape(n, -1)
    for i in range(n):
        for j in range(i):
            ov = (flat[j].conj() @ flat[i]) * grid.dvol
            flat[i] -= ov * flat[j]
        nrm = np.sqrt(np.real(flat[i].conj() @ flat[i]) * grid.dvol)
        if nrm < 1e-14:
            raise np.linalg.LinAlgError("linearly dependent orbitals")
        flat[i] /= nrm
    return out


def save_checkpoint(path, state):
    """Write a bitwise-restorable snapshot of the state."""
    g = state.grid
    header = struct.pack(
        "<qq" + "q" * g.dim + "dqd",
        g.dim,
        1 if g.periodic else 0,
        *g.npts,
        g.h,
        state.norb,
        state.t,
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(header)
        fh.write(state.phi.tobytes())
        fh.write(state.u.tobytes())


def load_checkpoint(path, grid=None):
    """Read a snapshot; verifies grid metadata when a grid is supplied."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a gridsic checkpoint (bad magic)")
    off = 8
    dim, per = struct.unpack_from("<qq", raw, off)
    off += 16
    npts = struct.unpack_from("<" + "q" * dim, raw, off)
    off += 8 * dim
    h, norb, t = struct.unpack_from("<dqd", raw, off)
    off += 24
    file_grid = Grid(npts, h, "periodic" if per else "box")
    if grid is not None and grid != file_grid:
        raise ValueError(f"{path}: checkpoint grid {file_grid} does not match {grid}")
    npoints = file_grid.npoints
    phi = np.frombuffer(raw, dtype=np.complex128, count=norb * npoints, offset=off)
    off += phi.nbytes
    u = np.frombuffer(raw, dtype=np.complex128, count=norb * norb, offset=off)
    phi = phi.reshape((norb,) + file_grid.shape).copy()
    u = u.reshape(norb, norb).copy()
    return OrbitalState(file_grid, phi, u, t)
