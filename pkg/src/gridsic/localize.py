"""Symmetry condition on the localizing unitary.

The localized orbitals must satisfy, pairwise, ``<psi_b| u[rho_b] -
u[rho_a] |psi_a> = 0`` where ``u[.]`` is the mean-field potential of a
single orbital density.  Collecting ``K[b, a] = <psi_b| u[rho_a] |psi_a>``,
the condition is the Hermiticity of K.  It is the stationarity condition of
the summed one-orbital energies over the unitary group, whose maximizer is
the energy-optimal localized set, so the solver performs Riemannian ascent:
``u <- u expm(eta (K - K^H))`` with an Armijo line search on the energy sum.

A first-order expansion of the one-orbital energy sum under
``u -> u expm(eps G)`` gives ``dE = 2 Re tr(K^H G)``, which for the
anti-Hermitian choice ``G = eta (K - K^H)`` equals ``eta |K - K^H|_F^2``:
the update increases the energy sum until Hermiticity is reached.  The line
search accepts on sufficient energy increase, not on residual decrease; the
residual is not monotone along the ascent far from the optimum.
"""

from dataclasses import dataclass

import numpy as np

DENSITY_FLOOR = 1e-12


@dataclass
class SymmetryReport:
    """Outcome of one symmetry-condition solve."""

    iterations: int
    residual: float
    converged: bool
    step_size: float
    # solver-specific effort counter: line-search halvings for the ascent,
    # residual evaluations for the tracker
    work: int = 0


def orbital_potentials(orbs, mf):
    """Per-orbital densities and their mean-field potentials u[rho_a]."""
    dens = np.real(orbs.conj() * orbs)
    return dens, mf.u_alda(dens)


def symmetry_matrix(psi, mf, upot=None):
    """K[b, a] = <psi_b| u[rho_a] |psi_a> for a localized stack."""
    if upot is None:
        _, upot = orbital_potentials(psi, mf)
    n = psi.shape[0]
    flat = psi.reshape(n, -1)
    target = (upot * psi).reshape(n, -1)  # column a: u[rho_a] psi_a
    return (flat.conj() @ target.T) * mf.grid.dvol


def symmetry_residual(k):
    """max |K - K^H|, zero exactly at the symmetry condition."""
    return float(np.abs(k - k.conj().T).max())


def pair_energy_sum(psi, mf, dens=None, upot=None):
    """Sum of one-orbital mean-field energies, the quantity the unitary extremizes.

    ``dens``/``upot`` accept the fields of a previous ``orbital_potentials``
    call on the same stack; the interaction part is then recovered from
    ``upot`` instead of re-running the convolutions.
    """
    if dens is None:
        dens = np.real(psi.conj() * psi)
    if upot is None:
        hart = mf.hartree(dens)
    else:
        hart = upot - mf.xc.potential(dens)
    dvol = mf.grid.dvol
    eh = 0.5 * dvol * float(np.sum(dens * hart))
    exc = dvol * float(np.sum(mf.xc.energy_density(dens)))
    return eh + exc


def solve_symmetry_condition(
    phi,
    u0,
    mf,
    tol=1e-8,
    max_iter=500,
    eta=0.25,
    eta_max=1e6,
    max_halvings=60,
    armijo=1e-4,
    fields_out=None,
):
    """Iterate the unitary until K is Hermitian to within tol.

    Returns (u, SymmetryReport).  Warm-start with the previous step's
    unitary: along a trajectory the solve then typically needs one or two
    iterations.  Non-convergence is reported, not raised; the caller decides
    (ground-state drivers fail hard, propagation proceeds and logs).

    ``fields_out``: optional dict; on a converged return it receives the
    localized stack and its potentials (keys psi, dens, upot) evaluated at
    the returned unitary, sparing the caller the recomputation.
    """
    n = phi.shape[0]
    u = np.array(u0, dtype=np.complex128, copy=True)
    if n == 1:
        # a single orbital satisfies the condition identically
        if fields_out is not None:
            psi = np.tensordot(u.T, phi, axes=1)
            dens, upot = orbital_potentials(psi, mf)
            fields_out.update(psi=psi, dens=dens, upot=upot)
        return u, SymmetryReport(0, 0.0, True, eta)

    last = {}

    def evaluate(uu):
        psi = _as_localized(uu, phi)
        dens, upot = orbital_potentials(psi, mf)
        k = symmetry_matrix(psi, mf, upot)
        energy = pair_energy_sum(psi, mf, dens, upot)
        last.update(psi=psi, dens=dens, upot=upot)
        return k, energy

    def publish():
        # every converged return follows an evaluate() of the returned u
        if fields_out is not None:
            fields_out.update(last)

    k, energy = evaluate(u)
    res = symmetry_residual(k)
    halvings_total = 0
    for it in range(max_iter):
        if res < tol:
            publish()
            return u, SymmetryReport(it, res, True, eta, halvings_total)
        grad = k - k.conj().T
        slope = float(np.sum(np.abs(grad) ** 2))  # dE/deta along expm(eta grad)
        # one eigendecomposition serves every step length the search tries
        gw, gv = np.linalg.eigh(1j * grad)
        eps_energy = 1e-13 * max(1.0, abs(energy))
        halved = 0
        while True:
            u_try = u @ ((gv * np.exp(-1j * eta * gw)) @ gv.conj().T)
            k_try, energy_try = evaluate(u_try)
            res_try = symmetry_residual(k_try)
            # Armijo ascent test while the expected first-order gain
            # eta*slope is resolvable in float; below resolution, energy
            # comparisons are jitter that would let the residual random-
            # walk, so the endgame accepts on strict residual decrease
            # only.  The energy route must stay available whenever the
            # gain is measurable: the residual is not monotone along the
            # ascent, and pockets of negative curvature are crossed on
            # energy progress alone.
            if eta * slope > eps_energy:
                ok = energy_try >= energy + armijo * eta * slope or res_try < res
            else:
                ok = res_try < res
            if ok or halved >= max_halvings:
                break
            eta *= 0.5
            halved += 1
        halvings_total += halved
        if not ok:
            # stalled: no measurable ascent left along the gradient
            return u, SymmetryReport(it + 1, res, False, eta, halvings_total)
        u, k, energy, res = u_try, k_try, energy_try, res_try
        # nearly disjoint orbitals leave the landscape almost flat, and the
        # productive step there is 1/curvature, which can be huge; let the
        # line search claim it instead of capping at order one
        eta = min(eta * 1.5, eta_max)
    return u, SymmetryReport(max_iter, res, False, eta, halvings_total)


_TRIU_CACHE = {}


def _triu(n):
    iu = _TRIU_CACHE.get(n)
    if iu is None:
        iu = np.triu_indices(n, 1)
        _TRIU_CACHE[n] = iu
    return iu


def _pack_pairs(g):
    """Real vector of the independent entries of an anti-Hermitian, zero-
    diagonal matrix: (Re, Im) per upper-triangle pair."""
    vals = g[_triu(g.shape[0])]
    return np.concatenate([vals.real, vals.imag])


def _unpack_pairs(p, n):
    m = n * (n - 1) // 2
    th = np.zeros((n, n), dtype=np.complex128)
    th[_triu(n)] = p[:m] + 1j * p[m:]
    return th - th.conj().T


def _expm_anti(g, scale=1.0):
    """expm(scale * g) for an anti-Hermitian g, via the Hermitian eigenbasis.

    Far cheaper than the general-purpose Pade route at the matrix sizes the
    unitary solvers handle, and exactly unitary up to rounding.
    """
    w, v = np.linalg.eigh(1j * g)
    phase = np.exp(-1j * scale * w)
    return (v * phase) @ v.conj().T


def _as_localized(u, phi):
    """psi = u^T phi without tensordot's transpose bookkeeping."""
    n = phi.shape[0]
    return (u.T @ phi.reshape(n, -1)).reshape(phi.shape)


def track_symmetry_condition(
    phi,
    u0,
    mf,
    tol=1e-8,
    max_iter=40,
    fd_step=1e-6,
    trust=0.5,
    jac_cache=None,
    fields_out=None,
):
    """Track the nearest root of K - K^H from a warm start.

    Propagation must follow the localizing unitary's branch continuously:
    the stationarity condition keeps holding even where the branch stops
    being the energy maximizer, and an ascent solver would hop to a distant
    basin there, kicking the subtraction energy discontinuously.  This
    solver instead performs damped Newton on the residual in the
    off-diagonal tangent space (the diagonal of K - K^H vanishes
    identically), with a finite-difference Jacobian, so it converges to the
    stationary point nearest the warm start regardless of its stability
    character.  Returns (u, SymmetryReport).

    ``jac_cache`` (a dict) carries the Jacobian across calls: along a
    trajectory it changes slowly, and a stale copy refreshed by Broyden
    rank-1 updates usually converges in one or two steps, saving the
    N(N-1)-column rebuild.  A rejected step or a stall triggers one fresh
    rebuild before giving up.

    ``fields_out``: as in ``solve_symmetry_condition``, filled on converged
    returns with the localized fields of the returned unitary.
    """
    n = phi.shape[0]
    u = np.array(u0, dtype=np.complex128, copy=True)
    if n == 1:
        if fields_out is not None:
            psi = np.tensordot(u.T, phi, axes=1)
            dens, upot = orbital_potentials(psi, mf)
            fields_out.update(psi=psi, dens=dens, upot=upot)
        return u, SymmetryReport(0, 0.0, True, 0.0)

    last = {}

    def defect(uu):
        psi = _as_localized(uu, phi)
        dens, upot = orbital_potentials(psi, mf)
        k = symmetry_matrix(psi, mf, upot)
        last.update(psi=psi, dens=dens, upot=upot)
        return k - k.conj().T

    g0 = defect(u)
    res = float(np.abs(g0).max())
    dim = n * (n - 1)
    mu = 0.0
    evals = 1

    def build_jac(gv):
        nonlocal evals
        jac = np.empty((dim, dim))
        for m in range(dim):
            dp = np.zeros(dim)
            dp[m] = fd_step
            step = _expm_anti(_unpack_pairs(dp, n))
            jac[:, m] = (_pack_pairs(defect(u @ step)) - gv) / fd_step
            evals += 1
        return jac

    jac = None
    if jac_cache is not None:
        cached = jac_cache.get("jac")
        if cached is not None and cached.shape == (dim, dim):
            jac = cached
    fresh = False
    for it in range(max_iter):
        if res < tol:
            if jac_cache is not None and jac is not None:
                jac_cache["jac"] = jac
            # the last defect evaluation was of the returned u: either the
            # entry evaluation (it == 0) or the accepted candidate
            if fields_out is not None:
                fields_out.update(last)
            return u, SymmetryReport(it, res, True, mu, evals)
        gv = _pack_pairs(g0)
        if jac is None:
            jac = build_jac(gv)
            fresh = True
        jtj = jac.T @ jac
        jtg = jac.T @ gv
        scale = float(np.trace(jtj)) / dim or 1.0
        accepted = False
        for _ in range(12):
            try:
                p = np.linalg.solve(jtj + mu * scale * np.eye(dim), -jtg)
            except np.linalg.LinAlgError:
                p = np.linalg.lstsq(jtj, -jtg, rcond=None)[0]
            big = np.abs(p).max()
            if big > trust:
                p *= trust / big
            u_try = u @ _expm_anti(_unpack_pairs(p, n))
            g_try = defect(u_try)
            evals += 1
            res_try = float(np.abs(g_try).max())
            if res_try < res:
                gv_new = _pack_pairs(g_try)
                denom = float(p @ p)
                if denom > 0.0:
                    jac = jac + np.outer(gv_new - gv - jac @ p, p) / denom
                u, g0, res = u_try, g_try, res_try
                mu = max(mu * 0.25, 0.0) if mu > 1e-14 else 0.0
                accepted = True
                break
            if not fresh:
                # the cached Jacobian misled the step; rebuild before damping
                jac = build_jac(gv)
                fresh = True
                continue
            mu = mu * 10.0 if mu > 0.0 else 1e-8
        if not accepted:
            if jac_cache is not None:
                jac_cache["jac"] = None
            return u, SymmetryReport(it + 1, res, False, mu, evals)
    if jac_cache is not None:
        jac_cache["jac"] = None
    return u, SymmetryReport(max_iter, res, False, mu, evals)


def solve_best_branch(phi, u0, mf, tol=1e-8, max_iter=500, probes=4, seed=20260816):
    """Warm-start solve plus random restarts; keep the highest-energy branch.

    The symmetry condition is only stationarity, and the ascent cannot leave
    a stationary point: a warm start sitting on a saddle of the energy sum
    (typically the unmixed, delocalized set, which symmetry can pin there)
    reports convergence while a strictly better localized branch exists.
    Restarting from a few random unitaries escapes such traps.  The returned
    branch is the ascent's attractor, which is also the branch a
    time-dependent trajectory's warm re-solves follow, so ground states
    prepared through this routine hand the propagator a consistent unitary.

    The restart sequence is drawn from a fixed seed so results are
    reproducible run to run.  Returns (u, report, energy_sum).
    """
    u_best, rep_best = solve_symmetry_condition(phi, u0, mf, tol=tol, max_iter=max_iter)
    e_best = pair_energy_sum(np.tensordot(u_best.T, phi, axes=1), mf)
    n = phi.shape[0]
    if n == 1 or probes <= 0:
        return u_best, rep_best, e_best
    margin = 1e-10 * max(1.0, abs(e_best))
    rng = np.random.default_rng(seed)
    for _ in range(probes):
        raw = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        start = np.linalg.qr(raw)[0]
        u_try, rep_try = solve_symmetry_condition(phi, start, mf, tol=tol, max_iter=max_iter)
        if not rep_try.converged:
            continue
        e_try = pair_energy_sum(np.tensordot(u_try.T, phi, axes=1), mf)
        if e_try > e_best + margin or not rep_best.converged:
            u_best, rep_best, e_best = u_try, rep_try, e_try
    return u_best, rep_best, e_best


def weighted_average_potential(orb_dens, upot, rho=None, floor=DENSITY_FLOOR):
    """Density-weighted average sum_a (rho_a / rho) u[rho_a].

    Below the density floor the weights are ill-conditioned; the weight
    deficit 1 - rho / max(rho, floor) is carried by the plain orbital mean,
    which keeps the field continuous across the floor and makes the average
    equal u[rho] identically for a single orbital.
    """
    if rho is None:
        rho = orb_dens.sum(axis=0)
    denom = np.maximum(rho, floor)
    avg = (orb_dens * upot).sum(axis=0) / denom
    deficit = 1.0 - rho / denom  # zero wherever rho >= floor
    if np.any(deficit > 0.0):
        avg = avg + deficit * upot.mean(axis=0)
    return avg


def localization_quality(psi, mf, floor=DENSITY_FLOOR, dens=None, upot=None):
    """Worst-orbital mismatch between the averaged and own correction field.

    For each localized orbital, compares the density-weighted average
    potential acting on it against its own one-orbital potential:
    ``|sum_b (rho_b / rho) u[rho_b] psi_a - u[rho_a] psi_a|_2 /
    |u[rho_a] psi_a|_2``, maximized over orbitals.  Points with total
    density below the floor are masked.  Zero for perfectly localized
    (disjoint) orbitals; the value is small exactly when the averaged-
    potential schemes are good stand-ins for the orbital-resolved one.
    Precomputed per-orbital densities and potentials may be passed in.
    """
    grid = mf.grid
    if dens is None or upot is None:
        dens, upot = orbital_potentials(psi, mf)
    rho = dens.sum(axis=0)
    mask = rho >= floor
    avg = (dens / np.maximum(rho, floor) * upot).sum(axis=0)
    worst = 0.0
    for a in range(psi.shape[0]):
        own = upot[a] * psi[a]
        diff = (avg * psi[a] - own) * mask
        denom = grid.norm(own * mask)
        if denom == 0.0:
            continue
        worst = max(worst, grid.norm(diff) / denom)
    return float(worst)
