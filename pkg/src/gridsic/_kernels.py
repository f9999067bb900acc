"""Hot numerical kernels with two interchangeable backends.

The stencil Laplacian, the direct interaction convolution, and the
Taylor-polynomial propagator applications dominate the runtime of every
simulation.  Each of them exists twice in this module: a numba ``@njit``
version (``*_jit``) and a vectorized numpy version (``*_np``).  At import
time one backend is selected and bound to the public names (``lap_1d``,
``hartree_1d``, ...).  numba is used when it is importable, unless the
environment variable ``GRIDSIC_NUMBA`` is set to ``0``/``off``/``false``,
which forces the numpy path.  ``benchmarks/backend_compare.py`` times the
two paths against each other.

All kernels are deterministic: fixed loop order, no parallel reductions,
no fastmath.
"""

import os

import numpy as np

_env = os.environ.get("GRIDSIC_NUMBA", "").strip().lower()
if _env in ("0", "off", "false", "no"):
    HAS_NUMBA = False
else:
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:
        HAS_NUMBA = False

if not HAS_NUMBA:
    def njit(*args, **kwargs):
        # keep the decorated definitions importable without numba
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def backend():
    """Name of the active backend, 'numba' or 'numpy'."""
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# stencil Laplacians
#
# order=2: 3-point per axis, order=4: 5-point per axis.  periodic=True wraps,
# otherwise field values outside the box are taken as zero.

_C4_0 = -30.0 / 12.0
_C4_1 = 16.0 / 12.0
_C4_2 = -1.0 / 12.0


@njit(cache=True)
def _lap_1d_jit(f, inv_h2, order, periodic):
    n = f.shape[0]
    out = np.empty_like(f)
    if order == 2:
        for i in range(1, n - 1):
            out[i] = (f[i - 1] - 2.0 * f[i] + f[i + 1]) * inv_h2
        if periodic:
            out[0] = (f[n - 1] - 2.0 * f[0] + f[1]) * inv_h2
            out[n - 1] = (f[n - 2] - 2.0 * f[n - 1] + f[0]) * inv_h2
        else:
            out[0] = (-2.0 * f[0] + f[1]) * inv_h2
            out[n - 1] = (f[n - 2] - 2.0 * f[n - 1]) * inv_h2
    else:
        for i in range(n):
            acc = _C4_0 * f[i]
            for s in range(1, 3):
                c = _C4_1 if s == 1 else _C4_2
                il = i - s
                ir = i + s
                if periodic:
                    acc += c * (f[il % n] + f[ir % n])
                else:
                    if il >= 0:
                        acc += c * f[il]
                    if ir < n:
                        acc += c * f[ir]
            out[i] = acc * inv_h2
    return out


def _lap_1d_np(f, inv_h2, order, periodic):
    # accepts (..., n) stacks; differentiates the last axis
    if periodic:
        if order == 2:
            return (np.roll(f, 1, -1) - 2.0 * f + np.roll(f, -1, -1)) * inv_h2
        return (
            _C4_2 * (np.roll(f, 2, -1) + np.roll(f, -2, -1))
            + _C4_1 * (np.roll(f, 1, -1) + np.roll(f, -1, -1))
            + _C4_0 * f
        ) * inv_h2
    w = 1 if order == 2 else 2
    shape = f.shape[:-1] + (f.shape[-1] + 2 * w,)
    g = np.zeros(shape, dtype=f.dtype)
    g[..., w:-w] = f
    n = f.shape[-1]
    if order == 2:
        return (g[..., 0:n] - 2.0 * f + g[..., 2 : n + 2]) * inv_h2
    return (
        _C4_2 * (g[..., 0:n] + g[..., 4 : n + 4])
        + _C4_1 * (g[..., 1 : n + 1] + g[..., 3 : n + 3])
        + _C4_0 * f
    ) * inv_h2


@njit(cache=True)
def _lap_2d_jit(f, inv_h2, order, periodic):
    nx, ny = f.shape
    out = np.empty_like(f)
    if order == 2:
        for i in range(nx):
            for j in range(ny):
                acc = -4.0 * f[i, j]
                if i > 0:
                    acc += f[i - 1, j]
                elif periodic:
                    acc += f[nx - 1, j]
                if i < nx - 1:
                    acc += f[i + 1, j]
                elif periodic:
                    acc += f[0, j]
                if j > 0:
                    acc += f[i, j - 1]
                elif periodic:
                    acc += f[i, ny - 1]
                if j < ny - 1:
                    acc += f[i, j + 1]
                elif periodic:
                    acc += f[i, 0]
                out[i, j] = acc * inv_h2
    else:
        for i in range(nx):
            for j in range(ny):
                acc = 2.0 * _C4_0 * f[i, j]
                for s in range(1, 3):
                    c = _C4_1 if s == 1 else _C4_2
                    il = i - s
                    ir = i + s
                    jl = j - s
                    jr = j + s
                    if periodic:
                        acc += c * (f[il % nx, j] + f[ir % nx, j])
                        acc += c * (f[i, jl % ny] + f[i, jr % ny])
                    else:
                        if il >= 0:
                            acc += c * f[il, j]
                        if ir < nx:
                            acc += c * f[ir, j]
                        if jl >= 0:
                            acc += c * f[i, jl]
                        if jr < ny:
                            acc += c * f[i, jr]
                out[i, j] = acc * inv_h2
    return out


def _lap_2d_np(f, inv_h2, order, periodic):
    # accepts (..., nx, ny) stacks; differentiates the last two axes
    if periodic:
        if order == 2:
            return (
                np.roll(f, 1, -2)
                + np.roll(f, -1, -2)
                + np.roll(f, 1, -1)
                + np.roll(f, -1, -1)
                - 4.0 * f
            ) * inv_h2
        return (
            _C4_2 * (np.roll(f, 2, -2) + np.roll(f, -2, -2))
            + _C4_1 * (np.roll(f, 1, -2) + np.roll(f, -1, -2))
            + _C4_2 * (np.roll(f, 2, -1) + np.roll(f, -2, -1))
            + _C4_1 * (np.roll(f, 1, -1) + np.roll(f, -1, -1))
            + 2.0 * _C4_0 * f
        ) * inv_h2
    w = 1 if order == 2 else 2
    nx, ny = f.shape[-2], f.shape[-1]
    shape = f.shape[:-2] + (nx + 2 * w, ny + 2 * w)
    g = np.zeros(shape, dtype=f.dtype)
    g[..., w : nx + w, w : ny + w] = f
    c = g[..., w : nx + w, w : ny + w]
    if order == 2:
        return (
            g[..., 0:nx, w : ny + w]
            + g[..., 2 : nx + 2, w : ny + w]
            + g[..., w : nx + w, 0:ny]
            + g[..., w : nx + w, 2 : ny + 2]
            - 4.0 * c
        ) * inv_h2
    return (
        _C4_2 * (g[..., 0:nx, w : ny + w] + g[..., 4 : nx + 4, w : ny + w])
        + _C4_1 * (g[..., 1 : nx + 1, w : ny + w] + g[..., 3 : nx + 3, w : ny + w])
        + _C4_2 * (g[..., w : nx + w, 0:ny] + g[..., w : nx + w, 4 : ny + 4])
        + _C4_1 * (g[..., w : nx + w, 1 : ny + 1] + g[..., w : nx + w, 3 : ny + 3])
        + 2.0 * _C4_0 * c
    ) * inv_h2


# ---------------------------------------------------------------------------
# direct interaction convolution  v[i] = lam * dvol * sum_j rho[j] / sqrt(d_ij^2 + a^2)
#
# The jit path evaluates the kernel on the fly (no O(n^2) storage); the numpy
# fallback caches the kernel matrix per grid and reduces to a matvec.


@njit(cache=True)
def _hartree_1d_jit(rho, x, a2, lam, dvol):
    n = rho.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        xi = x[i]
        acc = 0.0
        for j in range(n):
            d = xi - x[j]
            acc += rho[j] / np.sqrt(d * d + a2)
        out[i] = acc * lam * dvol
    return out


@njit(cache=True)
def _hartree_2d_jit(rho, x, y, a2, lam, dvol):
    # rho flattened C-order over the (nx, ny) mesh; x, y flattened alike
    n = rho.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        xi = x[i]
        yi = y[i]
        acc = 0.0
        for j in range(n):
            dx = xi - x[j]
            dy = yi - y[j]
            acc += rho[j] / np.sqrt(dx * dx + dy * dy + a2)
        out[i] = acc * lam * dvol
    return out


_HMAT_CACHE = {}


def _hartree_matrix_1d(x, a2):
    key = ("1d", x.shape[0], float(x[0]), float(x[-1]), float(a2))
    mat = _HMAT_CACHE.get(key)
    if mat is None:
        d = x[:, None] - x[None, :]
        mat = 1.0 / np.sqrt(d * d + a2)
        _HMAT_CACHE[key] = mat
    return mat


def _hartree_matrix_2d(x, y, a2):
    key = ("2d", x.shape[0], float(x[0]), float(x[-1]), float(y[0]), float(y[-1]), float(a2))
    mat = _HMAT_CACHE.get(key)
    if mat is None:
        dx = x[:, None] - x[None, :]
        dy = y[:, None] - y[None, :]
        mat = 1.0 / np.sqrt(dx * dx + dy * dy + a2)
        _HMAT_CACHE[key] = mat
    return mat


def _hartree_1d_np(rho, x, a2, lam, dvol):
    return (lam * dvol) * (_hartree_matrix_1d(x, a2) @ rho)


def _hartree_2d_np(rho, x, y, a2, lam, dvol):
    return (lam * dvol) * (_hartree_matrix_2d(x, y, a2) @ rho)


# ---------------------------------------------------------------------------
# Taylor-polynomial application of exp(-i dt h)
#
# local variant:    h g = -1/2 lap g + vloc g
# nonlocal variant: h g = -1/2 lap g + vloc g - sum_a w_a <psi_a|g>
# with w_a the per-orbital correction field times its localized orbital.
# phi is the (norb, grid) stack; the polynomial runs to order m.


@njit(cache=True)
def _taylor_local_1d_jit(phi, vloc, dt, m, inv_h2, order, periodic):
    nor, n = phi.shape
    out = phi.copy()
    for io in range(nor):
        g = phi[io].copy()
        for k in range(1, m + 1):
            hg = _lap_1d_jit(g, inv_h2, order, periodic)
            scale = -1j * dt / k
            for r in range(n):
                g[r] = scale * (-0.5 * hg[r] + vloc[r] * g[r])
            for r in range(n):
                out[io, r] += g[r]
    return out


@njit(cache=True)
def _taylor_local_2d_jit(phi, vloc, dt, m, inv_h2, order, periodic):
    nor, nx, ny = phi.shape
    out = phi.copy()
    for io in range(nor):
        g = phi[io].copy()
        for k in range(1, m + 1):
            hg = _lap_2d_jit(g, inv_h2, order, periodic)
            scale = -1j * dt / k
            for r in range(nx):
                for s in range(ny):
                    g[r, s] = scale * (-0.5 * hg[r, s] + vloc[r, s] * g[r, s])
                    out[io, r, s] += g[r, s]
    return out


def _taylor_local_np(phi, vloc, dt, m, inv_h2, order, periodic, lap):
    out = phi.copy()
    g = phi.copy()
    for k in range(1, m + 1):
        hg = -0.5 * lap(g, inv_h2, order, periodic) + vloc * g
        g = (-1j * dt / k) * hg
        out += g
    return out


def _taylor_local_1d_np(phi, vloc, dt, m, inv_h2, order, periodic):
    return _taylor_local_np(phi, vloc, dt, m, inv_h2, order, periodic, _lap_1d_np)


def _taylor_local_2d_np(phi, vloc, dt, m, inv_h2, order, periodic):
    return _taylor_local_np(phi, vloc, dt, m, inv_h2, order, periodic, _lap_2d_np)


@njit(cache=True)
def _taylor_sic_1d_jit(phi, vloc, w, psi, dvol, dt, m, inv_h2, order, periodic):
    nor, n = phi.shape
    nloc = psi.shape[0]
    out = phi.copy()
    for io in range(nor):
        g = phi[io].copy()
        for k in range(1, m + 1):
            hg = _lap_1d_jit(g, inv_h2, order, periodic)
            scale = -1j * dt / k
            for r in range(n):
                hg[r] = -0.5 * hg[r] + vloc[r] * g[r]
            for a in range(nloc):
                c = 0.0j
                for r in range(n):
                    c += np.conj(psi[a, r]) * g[r]
                c *= dvol
                for r in range(n):
                    hg[r] -= w[a, r] * c
            for r in range(n):
                g[r] = scale * hg[r]
                out[io, r] += g[r]
    return out


@njit(cache=True)
def _taylor_sic_2d_jit(phi, vloc, w, psi, dvol, dt, m, inv_h2, order, periodic):
    nor, nx, ny = phi.shape
    nloc = psi.shape[0]
    out = phi.copy()
    for io in range(nor):
        g = phi[io].copy()
        for k in range(1, m + 1):
            hg = _lap_2d_jit(g, inv_h2, order, periodic)
            scale = -1j * dt / k
            for r in range(nx):
                for s in range(ny):
                    hg[r, s] = -0.5 * hg[r, s] + vloc[r, s] * g[r, s]
            for a in range(nloc):
                c = 0.0j
                for r in range(nx):
                    for s in range(ny):
                        c += np.conj(psi[a, r, s]) * g[r, s]
                c *= dvol
                for r in range(nx):
                    for s in range(ny):
                        hg[r, s] -= w[a, r, s] * c
            for r in range(nx):
                for s in range(ny):
                    g[r, s] = scale * hg[r, s]
                    out[io, r, s] += g[r, s]
    return out


def _taylor_sic_np(phi, vloc, w, psi, dvol, dt, m, inv_h2, order, periodic, lap):
    nor = phi.shape[0]
    nloc = psi.shape[0]
    psi_flat = psi.reshape(nloc, -1)
    w_flat = w.reshape(nloc, -1)
    out = phi.copy()
    g = phi.copy()
    for k in range(1, m + 1):
        hg = -0.5 * lap(g, inv_h2, order, periodic) + vloc * g
        coef = dvol * (psi_flat.conj() @ g.reshape(nor, -1).T)  # (nloc, nor)
        hg -= (coef.T @ w_flat).reshape(phi.shape)
        g = (-1j * dt / k) * hg
        out += g
    return out


def _taylor_sic_1d_np(phi, vloc, w, psi, dvol, dt, m, inv_h2, order, periodic):
    return _taylor_sic_np(phi, vloc, w, psi, dvol, dt, m, inv_h2, order, periodic, _lap_1d_np)


def _taylor_sic_2d_np(phi, vloc, w, psi, dvol, dt, m, inv_h2, order, periodic):
    return _taylor_sic_np(phi, vloc, w, psi, dvol, dt, m, inv_h2, order, periodic, _lap_2d_np)


# ---------------------------------------------------------------------------
# backend binding

if HAS_NUMBA:
    lap_1d = _lap_1d_jit
    lap_2d = _lap_2d_jit
    hartree_1d = _hartree_1d_jit
    hartree_2d = _hartree_2d_jit
    taylor_local_1d = _taylor_local_1d_jit
    taylor_local_2d = _taylor_local_2d_jit
    taylor_sic_1d = _taylor_sic_1d_jit
    taylor_sic_2d = _taylor_sic_2d_jit
else:
    lap_1d = _lap_1d_np
    lap_2d = _lap_2d_np
    hartree_1d = _hartree_1d_np
    hartree_2d = _hartree_2d_np
    taylor_local_1d = _taylor_local_1d_np
    taylor_local_2d = _taylor_local_2d_np
    taylor_sic_1d = _taylor_sic_1d_np
    taylor_sic_2d = _taylor_sic_2d_np
