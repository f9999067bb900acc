"""Mean-field operators for every propagation scheme.

Scheme family:

* ``alda``   - plain mean field, no orbital correction;
* ``slater`` - one-set local scheme: the correction potential is the
  density-weighted average of the per-orbital potentials built from the
  *diagonal* orbitals;
* ``gslat``  - two-set local scheme: the same average built from the
  *localized* orbitals;
* ``gkli``   - two-set local scheme refining the average by the
  orbital-shift terms, solved as a damped fixed point (diagnostic grade);
* ``tdsic``  - two-set nonlocal scheme: per-orbital potentials enter
  through a sum of projectors onto the localized orbitals.

For every local scheme the effective single-particle operator is
``-1/2 lap + v_ext + u[rho] - correction``; with one orbital every
correction reduces to ``u[rho]`` and the operator becomes the bare well.
The nonlocal operator is ``h g = -1/2 lap g + (v_ext + u[rho]) g -
sum_a u[rho_a] psi_a <psi_a|g>``; the per-orbital potential multiplies the
localized orbital inside the projector and is never symmetrized.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .localize import (
    DENSITY_FLOOR,
    orbital_potentials,
    symmetry_matrix,
    weighted_average_potential,
)

log = logging.getLogger("gridsic")


class Scheme(str, Enum):
    ALDA = "alda"
    SLATER = "slater"
    TDSIC = "tdsic"
    GSLAT = "gslat"
    GKLI = "gkli"

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown scheme '{name}' (expected one of: {valid})") from None

    @property
    def two_set(self):
        return self in (Scheme.TDSIC, Scheme.GSLAT, Scheme.GKLI)

    @property
    def local(self):
        return self is not Scheme.TDSIC

    @property
    def has_sic(self):
        return self is not Scheme.ALDA


@dataclass
class PotentialSet:
    """Potential fields of one scheme evaluated on one state.

    ``v0`` is the assembled local potential beyond the external one
    (``u[rho]`` minus the scheme's correction; plain ``u[rho]`` for alda,
    absent for the nonlocal scheme).  ``orbs`` snapshots the orbital set the
    correction was built from (localized set for two-set schemes, diagonal
    set for slater), with ``u_orb`` the matching per-orbital potentials.
    """

    scheme: Scheme
    v_ext: np.ndarray
    hartree: np.ndarray
    xc: np.ndarray
    v0: np.ndarray | None = None
    correction: np.ndarray | None = None
    orbs: np.ndarray | None = None
    u_orb: np.ndarray | None = None
    gkli_iterations: int = 0
    gkli_converged: bool = True

    @property
    def u_mean(self):
        return self.hartree + self.xc

    def local_potential(self):
        """Full local propagation potential v_ext + v0 (local schemes)."""
        if self.v0 is None:
            raise ValueError("the nonlocal scheme has no assembled local potential")
        return self.v_ext + self.v0


def gkli_correction(
    phi,
    u,
    psi,
    rho,
    orb_dens,
    upot,
    mf,
    mixing=0.5,
    tol=1e-10,
    max_iter=2000,
    floor=DENSITY_FLOOR,
):
    """Orbital-shift refinement of the averaged correction potential.

    Solves ``V0 = V_S + Re{V_K[V0]}`` by damped fixed point, where the
    kernel term averages the brackets ``<psi_b|V0 - u[rho_a]|psi_a>`` with
    the cross-set weights ``sum_i |phi_i|^2 conj(u[i,a]) u[i,b]``.  The
    fixed-point operator maps constants to themselves, so the constant is
    anchored each sweep by making the last orbital's mean correction vanish.
    Returns (correction, iterations, converged); a non-converged solve falls
    back to the plain average with a logged warning.
    """
    grid = mf.grid
    n = psi.shape[0]
    dvol = grid.dvol
    v_s = weighted_average_potential(orb_dens, upot, rho, floor)
    if n == 1:
        return v_s.copy(), 0, True
    mask = rho >= floor
    inv_rho = np.where(mask, 1.0 / np.maximum(rho, floor), 0.0)
    fdens = np.real(phi.conj() * phi)
    # w[a, b](r) = sum_i |phi_i(r)|^2 conj(u[i, a]) u[i, b]
    weights = np.einsum("ia,ib,i...->ab...", u.conj(), u, fdens)
    k = symmetry_matrix(psi, mf, upot)  # K[b, a] = <psi_b|u[rho_a]|psi_a>
    psi_flat = psi.reshape(n, -1)
    v0 = v_s.copy()
    converged = False
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        bra = (psi_flat.conj() @ (psi_flat * v0.reshape(-1)).T) * dvol  # [b, a] = <psi_b|v0|psi_a>
        brackets = bra - k
        vk = np.real(np.einsum("ab...,ba->...", weights, brackets)) * inv_rho
        v_new = v_s + vk
        last_dens = np.abs(psi_flat[n - 1]) ** 2
        shift = float(dvol * (last_dens @ v_new.reshape(-1)) - np.real(k[n - 1, n - 1]))
        v_new = np.where(mask, v_new - shift, v_s)
        delta = float(np.abs(v_new - v0).max())
        v0 = (1.0 - mixing) * v0 + mixing * v_new
        if delta < tol:
            converged = True
            break
    if not converged:
        log.warning(
            "orbital-shift fixed point not converged after %d sweeps (last delta %.3e); "
            "falling back to the plain averaged correction",
            iterations,
            delta,
        )
        return v_s, iterations, False
    # final exact gauge shift on the masked region
    c = float(np.real((dvol * (np.abs(psi_flat[n - 1]) ** 2) @ v0.reshape(-1)) - k[n - 1, n - 1]))
    v0 = np.where(mask, v0 - c, v0)
    return v0, iterations, converged


def build_potentials(state, v_ext, mf, scheme, gkli_opts=None, loc_fields=None):
    """Evaluate every potential field the scheme needs on this state.

    ``loc_fields``: optional dict with keys psi/dens/upot as produced by the
    symmetry-condition solvers' ``fields_out`` on this exact state; passing
    it skips recomputing the per-orbital convolutions.  The caller owns the
    consistency guarantee (same phi, same u).
    """
    scheme = Scheme(scheme)
    rho = state.density()
    hartree = mf.hartree(rho)
    xc = mf.xc_potential(rho)
    if scheme is Scheme.ALDA:
        return PotentialSet(scheme, v_ext, hartree, xc, v0=hartree + xc)
    if loc_fields and scheme.two_set:
        orbs = loc_fields["psi"]
        orb_dens = loc_fields["dens"]
        upot = loc_fields["upot"]
    else:
        orbs = state.psi() if scheme.two_set else state.phi
        orb_dens, upot = orbital_potentials(orbs, mf)
    if scheme is Scheme.TDSIC:
        return PotentialSet(scheme, v_ext, hartree, xc, orbs=orbs, u_orb=upot)
    if scheme is Scheme.GKLI:
        opts = gkli_opts or {}
        corr, iters, ok = gkli_correction(
            state.phi, state.u, orbs, rho, orb_dens, upot, mf, **opts
        )
        return PotentialSet(
            scheme,
            v_ext,
            hartree,
            xc,
            v0=hartree + xc - corr,
            correction=corr,
            orbs=orbs,
            u_orb=upot,
            gkli_iterations=iters,
            gkli_converged=ok,
        )
    corr = weighted_average_potential(orb_dens, upot, rho)
    return PotentialSet(
        scheme,
        v_ext,
        hartree,
        xc,
        v0=hartree + xc - corr,
        correction=corr,
        orbs=orbs,
        u_orb=upot,
    )


def apply_local(f, vtot, grid, order=2):
    """(-1/2 lap + vtot) f for a field or stack."""
    f = grid.check(f)
    return -0.5 * grid.laplacian(f, order=order) + vtot * f


def h_alda_apply(f, rho, v_ext, mf, order=2):
    """Plain mean-field operator application (builds u[rho] on the fly)."""
    return apply_local(f, v_ext + mf.u_alda(rho), mf.grid, order=order)


def h_sic_apply(f, pots, grid, order=2):
    """Nonlocal two-set operator application.

    ``h f = -1/2 lap f + (v_ext + u[rho]) f - sum_a u[rho_a] psi_a <psi_a|f>``
    for a field or stack f.  The projector sum runs over the localized set
    stored in the potential set.
    """
    if pots.orbs is None or pots.u_orb is None:
        raise ValueError("potential set lacks the localized fields of the nonlocal scheme")
    f = grid.check(f)
    single = f.ndim == grid.dim
    stack = f[None] if single else f
    nloc = pots.orbs.shape[0]
    nf = stack.shape[0]
    vloc = pots.v_ext + pots.u_mean
    out = -0.5 * grid.laplacian(stack, order=order) + vloc * stack
    psi_flat = pots.orbs.reshape(nloc, -1)
    w_flat = (pots.u_orb * pots.orbs).reshape(nloc, -1)
    coef = grid.dvol * (psi_flat.conj() @ stack.reshape(nf, -1).T)  # (nloc, nf)
    out -= (coef.T @ w_flat).reshape(stack.shape)
    return out[0] if single else out
