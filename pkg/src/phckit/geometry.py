"""Hexagonal air-hole lattices with a W1 line defect and heterostructure
index profiles, plus rasterization to permittivity grids.

Coordinate convention: x runs along the waveguide (a Gamma-K direction of
the hexagonal lattice), z is the transverse in-plane axis, y is the slab
normal (3D only).  The origin sits at the cavity centre.  All lengths are
in units of the lattice period a; physical units enter only through
``a_nm`` at reporting time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

ROW_PITCH = np.sqrt(3.0) / 2.0  # row spacing of the hexagonal lattice, units of a

#: supersampling factor used for cells that straddle a hole boundary
_SUBSAMPLES = 8

#: minimum grid resolution (cells per period) accepted by rasterize()
MIN_RESOLUTION = 8


class GeometryError(ValueError):
    """Invalid lattice/profile parameters or rasterization request."""


class BelowCutoffError(GeometryError):
    """No guided slab mode exists at the requested frequency/thickness."""


@dataclass(frozen=True)
class LatticeSpec:
    """Parameters of the photonic-crystal slab.

    Attributes
    ----------
    a : lattice period (kept at 1.0 internally; ``a_nm`` carries the scale).
    R : hole radius, units of a.
    h : slab thickness, units of a (used for 3D grids and the effective
        index reduction).
    n_slab, n_hole : refractive indices of the slab material and holes.
    periods_x, periods_z : lattice extent in periods along/across the
        waveguide.
    w1_defect : remove one row of holes along x (W1 waveguide).
    a_nm : physical period in nanometres, for unit conversion in reports.
    """

    a: float = 1.0
    R: float = 0.29
    h: float = 0.9
    n_slab: float = 2.4
    n_hole: float = 1.0
    periods_x: int = 35
    periods_z: int = 25
    w1_defect: bool = True
    a_nm: float = 240.0

    def __post_init__(self):
        if not (0.0 < self.R < self.a / 2.0):
            raise GeometryError(f"hole radius must satisfy 0 < R < a/2, got R={self.R}")
        if self.h <= 0.0:
            raise GeometryError(f"slab thickness must be positive, got h={self.h}")
        if not (self.n_slab > self.n_hole >= 1.0):
            raise GeometryError(
                f"need n_slab > n_hole >= 1, got n_slab={self.n_slab}, n_hole={self.n_hole}"
            )
        if self.periods_x < 1 or self.periods_z < 1:
            raise GeometryError("periods_x and periods_z must be >= 1")


@dataclass(frozen=True)
class HeterostructureProfile:
    """Base for along-x background-index profiles, symmetric about x=0."""

    n_center: float | None = None

    def centre_index(self, spec: LatticeSpec) -> float:
        return self.n_center if self.n_center is not None else spec.n_slab


@dataclass(frozen=True)
class StepProfile(HeterostructureProfile):
    """Single-step profile: index n_center inside |x| < L/2 with
    L = m*a + delta_l, and n_center - delta_n outside.  delta_l (units of
    a) detunes the cavity length continuously; the rasterizer quantizes
    the interface to its own cell size."""

    delta_n: float = 0.02
    m: int = 4
    delta_l: float = 0.0

    def __post_init__(self):
        if self.delta_n < 0.0:
            raise GeometryError(f"delta_n must be >= 0, got {self.delta_n}")
        if self.m < 1 or self.m != int(self.m):
            raise GeometryError(f"m must be a positive integer, got {self.m}")
        if self.m * 1.0 + self.delta_l <= 0.0:
            raise GeometryError("cavity length m*a + delta_l must be positive")

    def cavity_length(self, spec: LatticeSpec) -> float:
        return self.m * spec.a + self.delta_l * spec.a


@dataclass(frozen=True)
class GradualProfile(HeterostructureProfile):
    """Staircase profile: central region of length l0 at n_center, then
    bands of length steps[j-1] at index n_center - j*delta_n_step counted
    outward, and n_center - len(steps)*delta_n_step beyond the last band.

    Total cavity extent L = l0 + 2*sum(steps).
    """

    l0: float = 4.0
    steps: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    delta_n_step: float = 0.004

    def __post_init__(self):
        if self.l0 <= 0.0 or any(s <= 0.0 for s in self.steps):
            raise GeometryError("l0 and all step lengths must be positive")
        if self.delta_n_step < 0.0:
            raise GeometryError(f"delta_n_step must be >= 0, got {self.delta_n_step}")

    def cavity_length(self, spec: LatticeSpec) -> float:
        return (self.l0 + 2.0 * sum(self.steps)) * spec.a


@dataclass
class DielectricGrid:
    """Rasterized relative-permittivity map.

    ``eps`` is indexed [ix, iz] in 2D and [ix, iy, iz] in 3D, with cell
    centres at origin + (index + 0.5)/resolution along each axis.
    """

    resolution: int
    dims: tuple[int, ...]
    eps: np.ndarray
    origin: tuple[float, ...]

    @property
    def dx(self) -> float:
        return 1.0 / self.resolution

    def cell_centers(self, axis: int) -> np.ndarray:
        n = self.dims[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.dx


def _validate_profile(spec: LatticeSpec, profile: HeterostructureProfile) -> None:
    nc = profile.centre_index(spec)
    if isinstance(profile, StepProfile):
        lowest = nc - profile.delta_n
    elif isinstance(profile, GradualProfile):
        lowest = nc - len(profile.steps) * profile.delta_n_step
    else:
        lowest = nc
    if lowest < 1.0:
        raise GeometryError(f"profile drives the background index below 1 ({lowest:.4f})")


def build_hole_centers(spec: LatticeSpec) -> np.ndarray:
    """Hole-centre coordinates (x, z) of the hexagonal lattice, shape (N, 2).

    Rows are spaced a*sqrt(3)/2 in z, alternate rows offset by a/2 in x, so
    every nearest-neighbour distance equals a.  With ``w1_defect`` the row
    nearest z=0 is omitted, leaving periods_x*(periods_z-1) holes.  The
    pattern is mirror-symmetric about both the x and z axes (for odd
    periods_z the central row lies exactly on z=0).
    """
    a = spec.a
    nx, nz = spec.periods_x, spec.periods_z
    jc = (nz - 1) // 2  # row index placed on (or closest to) z = 0
    rows = []
    for j in range(nz):
        if spec.w1_defect and j == jc:
            continue
        zoff = (j - jc) * ROW_PITCH * a
        xoff = (abs(j - jc) % 2) * a / 2.0
        xs = (np.arange(nx) - (nx - 1) / 2.0) * a + xoff
        rows.append(np.column_stack([xs, np.full(nx, zoff)]))
    return np.concatenate(rows, axis=0)


def index_at(spec: LatticeSpec, profile: HeterostructureProfile, x) -> np.ndarray | float:
    """Background refractive index at position(s) x along the waveguide,
    ignoring the holes.  Vectorized over x."""
    _validate_profile(spec, profile)
    nc = profile.centre_index(spec)
    xa = np.abs(np.asarray(x, dtype=float))
    if isinstance(profile, StepProfile):
        half_l = profile.cavity_length(spec) / 2.0
        out = np.where(xa < half_l, nc, nc - profile.delta_n)
    elif isinstance(profile, GradualProfile):
        edges = (profile.l0 / 2.0 + np.concatenate([[0.0], np.cumsum(profile.steps)])) * spec.a
        # count of band edges at or below |x|: 0 in the centre region,
        # len(steps) beyond the outermost band
        j = np.clip(np.searchsorted(edges, xa, side="right"), 0, len(profile.steps))
        out = nc - j * profile.delta_n_step
    else:
        out = np.full_like(xa, nc)
    return out if out.ndim else float(out)


def _hole_fraction_grid(xc: np.ndarray, zc: np.ndarray, centers: np.ndarray,
                        R: float, dx: float) -> np.ndarray:
    """Area fraction of each cell covered by holes (cells indexed [ix, iz]).

    Interior/exterior cells are classified by their centre distance to the
    nearest hole; cells straddling a boundary are supersampled with a
    _SUBSAMPLES x _SUBSAMPLES stencil.
    """
    X, Z = np.meshgrid(xc, zc, indexing="ij")
    pts = np.column_stack([X.ravel(), Z.ravel()])
    dist, _ = cKDTree(centers).query(pts, k=1)
    dist = dist.reshape(X.shape)
    half_diag = dx / np.sqrt(2.0)
    frac = np.zeros(X.shape)
    frac[dist <= R - half_diag] = 1.0
    boundary = np.abs(dist - R) <= half_diag
    if boundary.any():
        sub = (np.arange(_SUBSAMPLES) + 0.5) / _SUBSAMPLES - 0.5
        SX, SZ = np.meshgrid(sub * dx, sub * dx, indexing="ij")
        tree = cKDTree(centers)
        bi, bj = np.nonzero(boundary)
        for i, j in zip(bi, bj):
            px = X[i, j] + SX.ravel()
            pz = Z[i, j] + SZ.ravel()
            d, _ = tree.query(np.column_stack([px, pz]), k=1)
            frac[i, j] = np.mean(d <= R)
    return frac


def rasterize(spec: LatticeSpec, profile: HeterostructureProfile,
              resolution: int, dimensionality: str = "2d",
              pad: float = 1.0) -> DielectricGrid:
    """Rasterize the structure to a permittivity grid.

    Parameters
    ----------
    resolution : cells per lattice period (>= 8).
    dimensionality : "2d" for an in-plane map, "3d" to extrude the slab
        in y with air padding above and below.
    pad : in-plane margin of unpatterned background added on every side,
        in units of a.

    Cells straddling a hole boundary carry area-weighted (2D) or
    volume-weighted (3D) permittivity averages.  The background index
    follows ``index_at`` sampled at cell centres, so profile boundaries
    snap to the grid.
    """
    if resolution < MIN_RESOLUTION:
        raise GeometryError(
            f"resolution {resolution} is too coarse; minimum is {MIN_RESOLUTION} cells per period"
        )
    if dimensionality not in ("2d", "3d"):
        raise GeometryError(f"dimensionality must be '2d' or '3d', got {dimensionality!r}")
    _validate_profile(spec, profile)

    a = spec.a
    dx = a / resolution
    half_x = spec.periods_x * a / 2.0 + pad
    half_z = spec.periods_z * ROW_PITCH * a / 2.0 + pad
    # even cell counts keep the grid exactly mirror-symmetric about x=0, z=0
    nx = 2 * int(np.ceil(half_x / dx))
    nz = 2 * int(np.ceil(half_z / dx))
    origin_x = -nx * dx / 2.0
    origin_z = -nz * dx / 2.0
    xc = origin_x + (np.arange(nx) + 0.5) * dx
    zc = origin_z + (np.arange(nz) + 0.5) * dx

    centers = build_hole_centers(spec)
    frac = _hole_fraction_grid(xc, zc, centers, spec.R, dx)
    n_bg = np.asarray(index_at(spec, profile, xc), dtype=float)
    eps_bg = (n_bg ** 2)[:, None] * np.ones((1, nz))
    eps_hole = spec.n_hole ** 2
    eps2d = frac * eps_hole + (1.0 - frac) * eps_bg

    if dimensionality == "2d":
        return DielectricGrid(resolution=resolution, dims=(nx, nz), eps=eps2d,
                              origin=(origin_x, origin_z))

    # 3D: extrude in y with air padding; hole walls are vertical so the
    # volume-weighted average factorizes into (in-plane) x (slab fraction)
    pad_y = pad
    half_y = spec.h / 2.0 + pad_y
    ny = 2 * int(np.ceil(half_y / dx))
    origin_y = -ny * dx / 2.0
    yc = origin_y + (np.arange(ny) + 0.5) * dx
    lo, hi = yc - dx / 2.0, yc + dx / 2.0
    slab_frac = (np.minimum(hi, spec.h / 2.0) - np.maximum(lo, -spec.h / 2.0)).clip(0.0) / dx
    eps3d = slab_frac[None, :, None] * eps2d[:, None, :] + (1.0 - slab_frac[None, :, None]) * 1.0
    return DielectricGrid(resolution=resolution, dims=(nx, ny, nz), eps=eps3d,
                          origin=(origin_x, origin_y, origin_z))


def effective_slab_index(spec: LatticeSpec, target_freq: float) -> float:
    """Effective index of the fundamental TE-like guided mode of the
    unpatterned symmetric slab at normalized frequency a/lambda.

    Solves kappa*h/2 = atan(gamma/kappa) by bisection to 1e-9, where
    kappa/gamma are the transverse wavenumbers inside/outside the slab.
    Raises BelowCutoffError when the mode is degenerate with the cladding
    (no usefully guided solution).
    """
    if target_freq <= 0.0:
        raise GeometryError(f"target_freq must be positive, got {target_freq}")
    n_clad = spec.n_hole
    n_core = spec.n_slab
    k0 = 2.0 * np.pi * target_freq / spec.a

    def residual(n_eff: float) -> float:
        kappa = k0 * np.sqrt(max(n_core ** 2 - n_eff ** 2, 0.0))
        gamma = k0 * np.sqrt(max(n_eff ** 2 - n_clad ** 2, 0.0))
        return kappa * spec.h / 2.0 - np.arctan2(gamma, kappa)

    lo = n_clad + 1e-12
    hi = n_core - 1e-12
    if residual(lo) <= 0.0 or residual(hi) >= 0.0:
        raise BelowCutoffError(
            f"no guided slab mode bracketed at a/lambda={target_freq} (h={spec.h})"
        )
    while hi - lo > 1e-9:
        mid = 0.5 * (lo + hi)
        if residual(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    n_eff = 0.5 * (lo + hi)
    if n_eff - n_clad < 1e-6:
        raise BelowCutoffError(
            f"guided mode at a/lambda={target_freq} is degenerate with the cladding"
        )
    return n_eff


def damaged_region_mask(spec: LatticeSpec, profile: HeterostructureProfile,
                        grid: DielectricGrid) -> np.ndarray:
    """Boolean mask (same in-plane shape as grid.eps) of cells whose
    background index is reduced relative to the centre, i.e. the
    index-damaged heterostructure cladding."""
    xc = grid.cell_centers(0)
    nc = profile.centre_index(spec)
    damaged_x = np.asarray(index_at(spec, profile, xc)) < nc - 1e-12
    mask = np.broadcast_to(damaged_x.reshape((-1,) + (1,) * (len(grid.dims) - 1)),
                           grid.dims)
    return mask.copy()
