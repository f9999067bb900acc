"""Uniform real-space grids and discrete field operations.

Fields are plain numpy arrays shaped like ``grid.shape`` (complex for
orbitals, float for densities and potentials); stacks of fields carry
leading axes.  Every operation that consumes a field validates the trailing
shape against the grid and raises :class:`GridMismatchError` on disagreement,
so fields from different grids cannot be combined silently.

Conventions:

* axes are centered on the origin, point ``i`` sits at ``(i - (n-1)/2) h``
  with one shared spacing ``h`` for all axes;
* ``bc="box"`` treats values outside the box as zero, ``bc="periodic"``
  wraps;
* integration is the plain Riemann sum (sum of point values times the cell
  volume) with a fixed lexicographic summation order.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels


class GridMismatchError(ValueError):
    """A field's shape does not match the grid it is used with."""


@dataclass(frozen=True)
class Grid:
    """Uniform grid over a centered box in one or two dimensions.

    Parameters
    ----------
    npts : tuple[int, ...]
        Points per axis, one or two entries, each at least 8.
    h : float
        Grid spacing, shared by all axes.
    bc : str
        ``"box"`` (zero outside) or ``"periodic"``.
    """

    npts: tuple
    h: float
    bc: str = "box"

    def __post_init__(self):
        npts = tuple(int(n) for n in self.npts)
        object.__setattr__(self, "npts", npts)
        if len(npts) not in (1, 2):
            raise ValueError("only 1D and 2D grids are supported")
        if any(n < 8 for n in npts):
            raise ValueError("need at least 8 points per axis")
        if not self.h > 0.0:
            raise ValueError("grid spacing must be positive")
        if self.bc not in ("box", "periodic"):
            raise ValueError("bc must be 'box' or 'periodic'")

    @property
    def dim(self):
        return len(self.npts)

    @property
    def shape(self):
        return self.npts

    @property
    def npoints(self):
        n = 1
        for k in self.npts:
            n *= k
        return n

    @property
    def dvol(self):
        return self.h ** self.dim

    @property
    def periodic(self):
        return self.bc == "periodic"

    def axis(self, k):
        """Coordinate values along axis k, centered on the origin."""
        n = self.npts[k]
        return (np.arange(n) - 0.5 * (n - 1)) * self.h

    def meshes(self):
        """Coordinate meshes, one array of grid shape per axis."""
        return np.meshgrid(*[self.axis(k) for k in range(self.dim)], indexing="ij")

    def check(self, f):
        """Validate that f is a field (or stack of fields) on this grid."""
        f = np.asarray(f)
        if f.shape[-self.dim :] != self.shape:
            raise GridMismatchError(
                f"field of shape {f.shape} does not live on grid {self.shape}"
            )
        return f

    # -- differential operators ------------------------------------------

    def laplacian(self, f, order=2):
        """Stencil Laplacian; order 2 (3-point per axis) or 4 (5-point)."""
        f = self.check(f)
        if order not in (2, 4):
            raise ValueError("stencil order must be 2 or 4")
        inv_h2 = 1.0 / (self.h * self.h)
        if not _kernels.HAS_NUMBA or f.ndim > self.dim:
            lap = _kernels._lap_1d_np if self.dim == 1 else _kernels._lap_2d_np
            return lap(f, inv_h2, order, self.periodic)
        lap = _kernels.lap_1d if self.dim == 1 else _kernels.lap_2d
        return lap(f, inv_h2, order, self.periodic)

    def gradient(self, f, order=2):
        """Central-difference gradient; returns a tuple of one field per axis."""
        f = self.check(f)
        if order not in (2, 4):
            raise ValueError("stencil order must be 2 or 4")
        out = []
        for k in range(self.dim):
            ax = f.ndim - self.dim + k
            out.append(_diff_axis(f, ax, self.h, order, self.periodic))
        return tuple(out)

    # -- reductions --------------------------------------------------------

    def integrate(self, f):
        """Riemann sum of a field (or of each field in a stack)."""
        f = self.check(f)
        axes = tuple(range(f.ndim - self.dim, f.ndim))
        return f.sum(axis=axes) * self.dvol

    def inner(self, f, g):
        """L2 inner product <f|g>, conjugating the first argument."""
        f = self.check(f)
        g = self.check(g)
        return self.integrate(np.conj(f) * g)

    def norm(self, f):
        return float(np.sqrt(np.real(self.inner(f, f))))


def _diff_axis(f, ax, h, order, periodic):
    if periodic:
        if order == 2:
            return (np.roll(f, -1, ax) - np.roll(f, 1, ax)) / (2.0 * h)
        return (
            8.0 * (np.roll(f, -1, ax) - np.roll(f, 1, ax))
            - (np.roll(f, -2, ax) - np.roll(f, 2, ax))
        ) / (12.0 * h)
    w = 1 if order == 2 else 2
    pad = [(0, 0)] * f.ndim
    pad[ax] = (w, w)
    g = np.pad(f, pad)
    n = f.shape[ax]

    def sl(lo):
        ix = [slice(None)] * f.ndim
        ix[ax] = slice(lo, lo + n)
        return g[tuple(ix)]

    if order == 2:
        return (sl(2) - sl(0)) / (2.0 * h)
    return (8.0 * (sl(3) - sl(1)) - (sl(4) - sl(0))) / (12.0 * h)
