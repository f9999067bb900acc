"""Ground-state preparation, boost excitation, and real-time propagation.

Propagation uses an exponential midpoint step: a predictor full step under
the potentials of the step start, then a configurable number of corrector
passes that rebuild the potentials from the (orthonormalized) midpoint
average and re-apply the full step.  The operator exponential is a fixed-
order Taylor polynomial evaluated by the fused kernels of ``_kernels``;
orthonormality is repaired by Lowdin symmetric orthonormalization after
every step and the pre-repair defect is monitored.  Two-set schemes re-solve
the localizing-unitary symmetry condition at the midpoint of every corrector
pass and after the step, on a configurable step stride.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from . import _kernels
from .grid import Grid
from .hamiltonian import Scheme, apply_local, build_potentials, h_sic_apply
from .localize import (
    pair_energy_sum,
    solve_best_branch,
    solve_symmetry_condition,
    track_symmetry_condition,
)
from .potentials import MeanField
from .state import OrbitalState, gram_schmidt, lowdin, save_checkpoint

log = logging.getLogger("gridsic")

GROUND_SYMMETRY_TOL = 1e-8
PROP_SYMMETRY_TOL = 1e-6


class NumericalError(RuntimeError):
    """Propagation produced a non-finite state or an unsolvable condition."""


class GroundStateError(RuntimeError):
    """Ground-state iteration failed; carries the last energy variance."""

    def __init__(self, message, variance=float("nan")):
        super().__init__(message)
        self.variance = variance


@dataclass
class System:
    """Grid, external potential, interaction model, and orbital count."""

    grid: Grid
    v_ext: np.ndarray
    mf: MeanField
    norb: int

    def __post_init__(self):
        self.v_ext = np.ascontiguousarray(self.grid.check(self.v_ext), dtype=np.float64)
        if self.mf.grid is not self.grid and self.mf.grid != self.grid:
            raise ValueError("mean field and system grids differ")
        if self.norb < 1:
            raise ValueError("norb must be at least 1")


def taylor_stability_bound(grid):
    """Largest stable dt for the explicit Taylor exponential: h^2 / pi."""
    return grid.h**2 / math.pi


@dataclass
class GroundStateConfig:
    """Damped-gradient ground-state solver settings.

    ``tol`` bounds the summed per-orbital energy variance
    sum_i(<h^2>_i - <h>_i^2); ``loc_stride`` is the iteration stride between
    symmetry-condition re-solves for two-set schemes.
    """

    step_size: float = 0.4
    tol: float = 1e-9
    max_iter: int = 20000
    # re-solving every iteration is affordable with the tracking solver and
    # avoids the stride sawtooth that floors the reachable variance
    loc_stride: int = 1
    precondition: bool = True
    precond_shift: float = 1.0
    subspace_stride: int = 10
    sym_tol: float = GROUND_SYMMETRY_TOL
    stencil_order: int = 2
    branch_probes: int = 4
    branch_rounds: int = 3
    probe_seed: int = 20260816
    # blend weight of freshly built potentials against the previous
    # iteration's; below 1 damps the self-consistency limit cycles that
    # orbital-dependent corrections can enter on degenerate shells
    pot_mix: float = 0.5
    gkli_opts: dict | None = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.loc_stride < 1 or self.subspace_stride < 1:
            raise ValueError("strides must be at least 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0.0 < self.pot_mix <= 1.0:
            raise ValueError("pot_mix must lie in (0, 1]")


@dataclass
class PropagatorConfig:
    """Real-time step settings; ``validate(grid)`` enforces the dt bound."""

    dt: float
    steps: int
    scheme: Scheme
    taylor_order: int = 4
    sym_stride: int = 1
    sc_iters: int = 2
    sym_tol: float = PROP_SYMMETRY_TOL
    stencil_order: int = 2
    output_stride: int = 1
    checkpoint_stride: int = 0
    gkli_opts: dict | None = None

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.taylor_order < 2:
            raise ValueError("taylor_order must be at least 2")
        if self.sym_stride < 1 or self.output_stride < 1:
            raise ValueError("strides must be at least 1")
        if self.sc_iters < 0:
            raise ValueError("sc_iters must be non-negative")

    def validate(self, grid):
        bound = taylor_stability_bound(grid)
        if self.dt >= bound:
            raise ValueError(
                f"dt = {self.dt:g} violates the Taylor stability bound "
                f"dt < h^2/pi = {bound:g} at h = {grid.h:g}"
            )


class _KineticPreconditioner:
    """Approximate inverse of (kinetic + shift) in the stencil eigenbasis.

    Uses the order-2 stencil eigenvalues; on box grids the type-I discrete
    sine transform diagonalizes the zero-outside stencil exactly, on
    periodic grids the plain Fourier transform does.
    """

    def __init__(self, grid, shift):
        self.grid = grid
        self.axes = tuple(range(-grid.dim, 0))
        eigs = []
        for n in grid.npts:
            if grid.periodic:
                m = np.arange(n)
                lam = (2.0 - 2.0 * np.cos(2.0 * np.pi * m / n)) / grid.h**2
            else:
                k = np.arange(1, n + 1)
                lam = (2.0 - 2.0 * np.cos(np.pi * k / (n + 1))) / grid.h**2
            eigs.append(lam)
        kin = eigs[0]
        if grid.dim == 2:
            kin = eigs[0][:, None] + eigs[1][None, :]
        self.denom = 0.5 * kin + shift

    def apply(self, r):
        if self.grid.periodic:
            rt = scipy.fft.fftn(r, axes=self.axes)
            return scipy.fft.ifftn(rt / self.denom, axes=self.axes)
        re = scipy.fft.dstn(r.real, type=1, axes=self.axes, norm="ortho")
        im = scipy.fft.dstn(r.imag, type=1, axes=self.axes, norm="ortho")
        rt = (re + 1j * im) / self.denom
        re = scipy.fft.dstn(rt.real, type=1, axes=self.axes, norm="ortho")
        im = scipy.fft.dstn(rt.imag, type=1, axes=self.axes, norm="ortho")
        return re + 1j * im


def default_orbital_init(system):
    """Deterministic starting orbitals: lowest kinetic modes of the grid.

    Box grids use the sine modes that vanish just outside the boundary,
    periodic grids use plane waves; 2D modes are products ordered by their
    kinetic eigenvalue, ties broken lexicographically.
    """
    grid = system.grid
    norb = system.norb

    def axis_modes(n, count):
        j = np.arange(n)
        out = []
        for k in range(1, count + 1):
            if grid.periodic:
                m = (k // 2) * (1 if k % 2 else -1)  # 0, -1, +1, -2, ...
                mode = np.exp(2j * np.pi * m * j / n)
                key = float(m * m)
            else:
                mode = np.sin(np.pi * k * (j + 1) / (n + 1)).astype(complex)
                key = float(k * k)
            out.append((key, mode))
        return out

    if grid.dim == 1:
        modes = axis_modes(grid.npts[0], norb)
        phi = np.stack([m for _, m in modes[:norb]])
    else:
        per_axis = norb + 2
        mx = axis_modes(grid.npts[0], per_axis)
        my = axis_modes(grid.npts[1], per_axis)
        ranked = sorted(
            ((kx + ky, ix, iy) for ix, (kx, _) in enumerate(mx) for iy, (ky, _) in enumerate(my)),
            key=lambda t: (t[0], t[1], t[2]),
        )
        phi = np.stack([np.outer(mx[ix][1], my[iy][1]) for _, ix, iy in ranked[:norb]])
    return gram_schmidt(np.ascontiguousarray(phi, dtype=np.complex128), grid)


def _apply_h(phi, pots, grid, order):
    if pots.v0 is not None:
        return apply_local(phi, pots.local_potential(), grid, order=order)
    return h_sic_apply(phi, pots, grid, order=order)


def _continuity_align(rot, w):
    """Steady the subspace-diagonalization basis across iterations.

    Within a (near-)degenerate eigenvalue cluster eigh's basis is arbitrary,
    and an orbital-dependent potential feeds that arbitrariness back as a
    moving target, locking the minimization into a limit cycle.  Rotating
    each cluster by the unitary polar factor of its overlap with the
    previous orbitals keeps the returned basis continuous without leaving
    the eigenspace; isolated eigenvalues only get their phase pinned.
    """
    n = w.size
    gap = 1e-5 * max(1.0, float(np.abs(w).max()))
    out = np.array(rot)
    i = 0
    while i < n:
        j = i + 1
        while j < n and w[j] - w[j - 1] < gap:
            j += 1
        block = out[i:j, i:j].conj().T  # overlap of the rotated cluster with the old basis
        uu, _, vv = np.linalg.svd(block)
        out[:, i:j] = out[:, i:j] @ (uu @ vv)
        i = j
    return out


def ground_state(system, scheme, cfg=None, phi0=None):
    """Damped-gradient minimization with interleaved localization solves.

    Returns an orthonormal state whose summed per-orbital energy variance is
    below ``cfg.tol`` and whose symmetry residual (two-set schemes) is below
    ``cfg.sym_tol``.  Raises GroundStateError on non-convergence or on a
    variance rising over 100 consecutive iterations.

    Two-set schemes finish with a branch check: the converged unitary is
    tested against ``cfg.branch_probes`` random-restart solves, and if a
    localized branch with a larger pair-energy sum exists the minimization
    resumes on it (up to ``cfg.branch_rounds`` rounds).  Without this, a
    symmetric starting guess can pin the unitary on a saddle of the energy
    sum that the symmetry residual alone cannot distinguish from the
    maximizer, and the first perturbation of a subsequent time propagation
    would hop branches, showing up as a spurious jump in the total energy.
    """
    scheme = Scheme(scheme)
    cfg = cfg or GroundStateConfig()
    grid = system.grid
    phi = np.array(phi0, dtype=np.complex128) if phi0 is not None else default_orbital_init(system)
    phi = gram_schmidt(grid.check(phi), grid)
    u = np.eye(system.norb, dtype=np.complex128)
    precond = _KineticPreconditioner(grid, cfg.precond_shift) if cfg.precondition else None
    state = OrbitalState(grid, phi, u)
    variance = float("inf")
    step_scale = 1.0
    prev_fields = None
    jac_cache = {}
    for round_ in range(max(1, cfg.branch_rounds)):
        variance = float("inf")
        rising = 0
        for it in range(cfg.max_iter):
            loc_fields = None
            if scheme.two_set and it % cfg.loc_stride == 0:
                if it == 0:
                    u, _, _ = solve_best_branch(
                        phi, u, system.mf, tol=cfg.sym_tol,
                        probes=cfg.branch_probes, seed=cfg.probe_seed,
                    )
                else:
                    # refinement re-solves track the chosen branch; the
                    # ascent would stop anywhere inside its tolerance ball
                    # and that jitter floors the reachable variance
                    loc_fields = {}
                    u, rep = track_symmetry_condition(
                        phi, u, system.mf, tol=cfg.sym_tol, jac_cache=jac_cache,
                        fields_out=loc_fields,
                    )
                    if not rep.converged:
                        u, _ = solve_symmetry_condition(
                            phi, u, system.mf, tol=cfg.sym_tol, fields_out=loc_fields
                        )
            state.phi, state.u = phi, u
            pots = build_potentials(
                state, system.v_ext, system.mf, scheme, cfg.gkli_opts,
                loc_fields=loc_fields,
            )
            if cfg.pot_mix < 1.0 and prev_fields is not None:
                beta = cfg.pot_mix
                for name in ("v0", "hartree", "xc", "u_orb"):
                    cur, old = getattr(pots, name, None), prev_fields.get(name)
                    if cur is not None and old is not None and cur.shape == old.shape:
                        setattr(pots, name, beta * cur + (1.0 - beta) * old)
            prev_fields = {
                name: getattr(pots, name, None) for name in ("v0", "hartree", "xc", "u_orb")
            }
            hphi = _apply_h(phi, pots, grid, cfg.stencil_order)
            if it % cfg.subspace_stride == 0 and system.norb > 1:
                hm = grid.dvol * (
                    phi.reshape(system.norb, -1).conj() @ hphi.reshape(system.norb, -1).T
                )
                hm = 0.5 * (hm + hm.conj().T)
                w, rot = np.linalg.eigh(hm)
                rot = _continuity_align(rot, w)
                phi = np.tensordot(rot.T, phi, axes=1)
                hphi = np.tensordot(rot.T, hphi, axes=1)
                u = rot.conj().T @ u
            # subspace residual: subtract the full occupied-space coupling
            # matrix, not just its diagonal, so intra-occupied couplings of
            # the nonlocal correction do not floor the variance
            lam = grid.dvol * (
                hphi.reshape(system.norb, -1) @ phi.reshape(system.norb, -1).conj().T
            )
            resid = hphi - np.tensordot(lam, phi, axes=1)
            new_var = float(grid.dvol * np.sum(np.abs(resid) ** 2))
            if new_var < cfg.tol:
                variance = new_var
                break
            if new_var > variance:
                rising += 1
                # the kinetic preconditioner ignores the local potential, so a
                # deep confining box (2D trap corners) can push the stability
                # bound below the nominal step; back off until the rise stops
                step_scale = max(step_scale * 0.5, 1.0 / 4096.0)
            else:
                rising = 0
                step_scale = min(step_scale * 1.02, 1.0)
            variance = new_var
            if rising >= 100:
                raise GroundStateError(
                    f"ground-state iteration diverging: variance {variance:.3e} "
                    f"rose 100 consecutive iterations",
                    variance,
                )
            step = precond.apply(resid) if precond is not None else resid
            phi = gram_schmidt(phi - cfg.step_size * step_scale * step, grid)
        else:
            raise GroundStateError(
                f"ground state not converged after {cfg.max_iter} iterations; "
                f"last variance {variance:.3e} (tol {cfg.tol:.1e})",
                variance,
            )
        phi = lowdin(phi, grid)
        if not scheme.two_set:
            break
        u, rep = solve_symmetry_condition(phi, u, system.mf, tol=cfg.sym_tol)
        if not rep.converged:
            raise GroundStateError(
                f"symmetry condition not converged on the ground state: "
                f"residual {rep.residual:.3e} (tol {cfg.sym_tol:.1e})",
                variance,
            )
        e_warm = pair_energy_sum(np.tensordot(u.T, phi, axes=1), system.mf)
        u_best, rep_best, e_best = solve_best_branch(
            phi, u, system.mf, tol=cfg.sym_tol,
            probes=cfg.branch_probes, seed=cfg.probe_seed,
        )
        if e_best <= e_warm + 1e-9 * max(1.0, abs(e_warm)):
            break
        log.info(
            "localized branch improved by %.3e on probe, re-minimizing (round %d)",
            e_best - e_warm,
            round_ + 1,
        )
        u = u_best
    else:
        raise GroundStateError(
            f"localized branch failed to settle in {cfg.branch_rounds} rounds",
            variance,
        )
    return OrbitalState(grid, phi, u)


def boost(state, k):
    """Multiply every diagonal orbital by exp(i k.r); densities unchanged."""
    grid = state.grid
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if k.shape != (grid.dim,):
        raise ValueError(f"boost vector must have {grid.dim} component(s)")
    phase = np.zeros(grid.shape)
    for d, mesh in enumerate(grid.meshes()):
        phase = phase + k[d] * mesh
    out = state.copy()
    out.phi = np.ascontiguousarray(out.phi * np.exp(1j * phase))
    return out


def apply_exponential(phi, pots, grid, dt, taylor_order=4, stencil_order=2):
    """One Taylor-expanded application of exp(-i dt h) under fixed potentials."""
    inv_h2 = 1.0 / grid.h**2
    periodic = grid.periodic
    phi = np.ascontiguousarray(phi, dtype=np.complex128)
    if pots.v0 is not None:
        vloc = np.ascontiguousarray(pots.local_potential(), dtype=np.float64)
        fn = _kernels.taylor_local_1d if grid.dim == 1 else _kernels.taylor_local_2d
        return fn(phi, vloc, dt, taylor_order, inv_h2, stencil_order, periodic)
    vloc = np.ascontiguousarray(pots.v_ext + pots.u_mean, dtype=np.float64)
    w = np.ascontiguousarray(pots.u_orb * pots.orbs, dtype=np.complex128)
    psi = np.ascontiguousarray(pots.orbs, dtype=np.complex128)
    fn = _kernels.taylor_sic_1d if grid.dim == 1 else _kernels.taylor_sic_2d
    return fn(phi, vloc, w, psi, grid.dvol, dt, taylor_order, inv_h2, stencil_order, periodic)


class Propagator:
    """Exponential-midpoint stepping of one state under one scheme.

    Holds the end-of-step potential set, which doubles as the next step's
    predictor input and as the field source for observable measurement.
    """

    def __init__(self, system, cfg, state):
        cfg.validate(system.grid)
        self.system = system
        self.cfg = cfg
        self.state = state.copy()
        self._jac_cache = {}
        loc_fields = None
        if cfg.scheme.two_set:
            loc_fields = {}
            u, rep = track_symmetry_condition(
                self.state.phi, self.state.u, system.mf, tol=cfg.sym_tol,
                jac_cache=self._jac_cache, fields_out=loc_fields,
            )
            if not rep.converged:
                raise NumericalError(
                    f"initial symmetry condition not converged: residual {rep.residual:.3e}"
                )
            self.state.u = u
            self.last_sym_residual = rep.residual
        else:
            self.last_sym_residual = 0.0
        self.pots = build_potentials(
            self.state, system.v_ext, system.mf, cfg.scheme, cfg.gkli_opts,
            loc_fields=loc_fields,
        )
        self.last_defect = self.state.orthonormality_defect()
        self.repair_warnings = 0

    def _solve_u(self, phi, u, where):
        # tracking, not ascent: dynamics must stay on the continuous branch
        # even after it stops being the pair-energy maximizer
        fields = {}
        u_new, rep = track_symmetry_condition(
            phi, u, self.system.mf, tol=self.cfg.sym_tol,
            jac_cache=self._jac_cache, fields_out=fields,
        )
        if not rep.converged:
            # Nearly degenerate landscapes (far-separated lumps) can pin the
            # damped Newton at a nonzero local minimum of the residual norm.
            # There the pair energies are insensitive to motion along the
            # valley, so the ascent walks out safely; the energy guard
            # rejects the walk if it was not actually neutral.
            mf = self.system.mf
            e_before = pair_energy_sum(np.tensordot(u_new.T, phi, axes=1), mf)
            u_asc, rep_asc = solve_symmetry_condition(
                phi, u_new, mf, tol=self.cfg.sym_tol, fields_out=fields
            )
            e_after = pair_energy_sum(np.tensordot(u_asc.T, phi, axes=1), mf)
            neutral = abs(e_after - e_before) <= 1e-9 * max(1.0, abs(e_before))
            if rep_asc.converged and neutral:
                self._jac_cache["jac"] = None
                return u_asc, rep_asc, fields
            if rep_asc.converged:
                raise NumericalError(
                    f"symmetry condition lost its branch {where} at "
                    f"t = {self.state.t:.6g}: the only converged point found "
                    f"shifts the subtraction energy by {e_after - e_before:.3e}"
                )
            rep = rep_asc if rep_asc.residual < rep.residual else rep
            raise NumericalError(
                f"symmetry condition not converged {where} at t = {self.state.t:.6g}: "
                f"residual {rep.residual:.3e} (tol {self.cfg.sym_tol:.1e}, "
                f"{rep.iterations} iteration(s), {rep.work} evaluation(s), "
                f"step size {rep.step_size:.3e})"
            )
        return u_new, rep, fields

    def advance(self, step_index):
        """One exponential-midpoint step; step_index drives the sym stride."""
        cfg = self.cfg
        grid = self.system.grid
        st = self.state
        do_sym = cfg.scheme.two_set and (step_index % cfg.sym_stride == 0)
        phi_t = st.phi
        u_warm = st.u
        phi_new = apply_exponential(
            phi_t, self.pots, grid, cfg.dt, cfg.taylor_order, cfg.stencil_order
        )
        for _ in range(cfg.sc_iters):
            phi_mid = lowdin(0.5 * (phi_t + phi_new), grid)
            mid_fields = None
            if do_sym:
                u_warm, _, mid_fields = self._solve_u(phi_mid, u_warm, "at the midpoint")
            mid = OrbitalState(grid, phi_mid, u_warm.copy(), st.t + 0.5 * cfg.dt)
            pots_mid = build_potentials(
                mid, self.system.v_ext, self.system.mf, cfg.scheme, cfg.gkli_opts,
                loc_fields=mid_fields,
            )
            phi_new = apply_exponential(
                phi_t, pots_mid, grid, cfg.dt, cfg.taylor_order, cfg.stencil_order
            )
        # pre-repair orthonormality defect, then Lowdin repair
        nor = phi_new.shape[0]
        flat = phi_new.reshape(nor, -1)
        gram = grid.dvol * (flat.conj() @ flat.T)
        defect = float(np.abs(gram - np.eye(nor)).max())
        if defect > 1e-6:
            self.repair_warnings += 1
            log.warning(
                "orthonormality defect %.3e before repair at t = %.6g", defect, st.t + cfg.dt
            )
        st.phi = lowdin(phi_new, grid)
        st.t += cfg.dt
        st.u = u_warm
        end_fields = None
        if do_sym:
            st.u, rep, end_fields = self._solve_u(st.phi, u_warm, "after the step")
            self.last_sym_residual = rep.residual
        self.last_defect = defect
        if not np.all(np.isfinite(st.phi.view(np.float64))):
            raise NumericalError(f"non-finite orbitals at t = {st.t:.6g}")
        self.pots = build_potentials(
            st, self.system.v_ext, self.system.mf, cfg.scheme, cfg.gkli_opts,
            loc_fields=end_fields,
        )


def run(
    system,
    cfg,
    state,
    writer=None,
    callback=None,
    checkpoint_path=None,
    start_step=0,
    final_path=None,
):
    """Propagate and record.

    Emits one record at the starting time (fresh runs only), then one every
    ``output_stride`` steps.  ``writer(record)`` is called as each record is
    produced so partial output survives a failing run; ``callback(state,
    pots, record)`` additionally exposes the live state to callers.  With
    ``start_step > 0`` (checkpoint resume) the loop continues from that step
    index and reproduces the uninterrupted run's remaining records bitwise.
    ``final_path`` saves the end-of-run state on normal completion.
    """
    from .observables import measure

    prop = Propagator(system, cfg, state)
    records = []

    def emit():
        rec = measure(
            prop.state,
            prop.pots,
            system,
            cfg.scheme,
            sym_residual=prop.last_sym_residual,
            ortho_defect=prop.last_defect,
            stencil_order=cfg.stencil_order,
        )
        records.append(rec)
        if writer is not None:
            writer(rec)
        if callback is not None:
            callback(prop.state, prop.pots, rec)

    if start_step == 0:
        emit()
    for i in range(start_step + 1, cfg.steps + 1):
        prop.advance(i)
        if i % cfg.output_stride == 0:
            emit()
        if (
            checkpoint_path is not None
            and cfg.checkpoint_stride > 0
            and i % cfg.checkpoint_stride == 0
        ):
            save_checkpoint(checkpoint_path, prop.state)
    if final_path is not None:
        save_checkpoint(final_path, prop.state)
    return records
