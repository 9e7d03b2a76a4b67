"""Plane-wave-expansion band solver for 2D hexagonal air-hole lattices,
supercell W1 waveguide dispersion, and heterostructure mode-gap widths.

The eigenproblem is the standard 2D scalar reduction on a plane-wave basis
with the inverse rule: the permittivity matrix eps(G-G') is assembled from
analytic Fourier coefficients of circular holes (J1 form factors) and
inverted once per structure.  TE means E in plane / H out of plane — the
slab-even-mode analogue used throughout; TM is the orthogonal scalar
problem.  Frequencies are normalized to a/lambda.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.special import j1

from .geometry import ROW_PITCH, GeometryError, LatticeSpec

__all__ = [
    "BandStructure",
    "ModeGap",
    "NoGuidedModeError",
    "EigensolverError",
    "epsilon_fourier_coefficient",
    "compute_bulk_bands",
    "compute_waveguide_bands",
    "mode_gap",
    "bulk_gap",
    "make_k_path",
    "HIGH_SYMMETRY",
]

# high-symmetry points of the hexagonal lattice, units of 2pi/a
HIGH_SYMMETRY = {
    "G": np.array([0.0, 0.0]),
    "K": np.array([2.0 / 3.0, 0.0]),
    "M": np.array([0.5, 0.5 / np.sqrt(3.0)]),
}

DEFAULT_BULK_NG = 225
DEFAULT_WAVEGUIDE_KX = np.linspace(0.3, 0.5, 25)
_MIN_BULK_NG = 81


class EigensolverError(RuntimeError):
    """Dense Hermitian eigensolver failed to converge."""


class NoGuidedModeError(RuntimeError):
    """No waveguide band found inside the bulk gap."""


@dataclass
class BandStructure:
    """Bands over a k-path.

    k_points are in units of 2pi/a; ``bands[i, b]`` is the b-th ascending
    normalized frequency at k_points[i].  ``parity`` (supercell runs only)
    holds the mirror eigenvalue of H about the waveguide axis, +1/-1.
    ``gap`` carries the bulk TE gap used for in-gap classification and
    ``design_band`` the per-k sorted-band index of the tracked fundamental
    guided band (-1 where absent).
    """

    k_points: np.ndarray
    bands: np.ndarray
    polarization: str
    n_planewaves: int
    parity: np.ndarray | None = None
    gap: tuple[float, float] | None = None
    design_band: np.ndarray | None = None

    def in_gap(self) -> np.ndarray:
        if self.gap is None:
            raise ValueError("no bulk gap attached to this band structure")
        lo, hi = self.gap
        return (self.bands > lo) & (self.bands < hi)


@dataclass(frozen=True)
class ModeGap:
    """Frequency interval between the design-band edge of the pristine
    waveguide (lower_edge) and of the index-lowered waveguide (upper_edge),
    measured at the band-edge wavevector k_edge (units 2pi/a)."""

    lower_edge: float
    upper_edge: float
    band_index: int
    k_edge: float

    @property
    def width(self) -> float:
        return self.upper_edge - self.lower_edge

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower_edge + self.upper_edge)


# ---------------------------------------------------------------------------
# basis and operator assembly


@dataclass
class _Cell:
    """Periodic computational cell: row-vectors A (2x2), hole centres, and
    the reciprocal basis B with rows B1, B2."""

    A: np.ndarray
    holes: np.ndarray

    @property
    def B(self) -> np.ndarray:
        return 2.0 * np.pi * np.linalg.inv(self.A).T

    @property
    def area(self) -> float:
        return abs(np.linalg.det(self.A))


def _bulk_cell(spec: LatticeSpec) -> _Cell:
    a = spec.a
    A = np.array([[a, 0.0], [a / 2.0, ROW_PITCH * a]])
    return _Cell(A=A, holes=np.zeros((1, 2)))


def _supercell(spec: LatticeSpec, rows: int) -> _Cell:
    """1 x rows oblique supercell of the W1 waveguide, mirror-symmetric
    about z=0 (the removed row)."""
    a = spec.a
    sx = (rows % 2) * a / 2.0
    A = np.array([[a, 0.0], [sx, rows * ROW_PITCH * a]])
    jc = rows // 2
    holes = []
    for j in range(rows):
        if spec.w1_defect and j == jc:
            continue
        holes.append(((abs(j - jc) % 2) * a / 2.0, (j - jc) * ROW_PITCH * a))
    return _Cell(A=A, holes=np.asarray(holes, dtype=float))


def _plane_wave_basis(cell: _Cell, n_G: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer indices and cartesian G vectors of the n_G smallest |G|,
    extended to complete |G| shells (so mirror images stay in the basis)."""
    B = cell.B
    detB = abs(np.linalg.det(B))
    rad = 1.3 * np.sqrt(n_G * detB / np.pi)
    m1max = int(np.ceil(rad * np.linalg.norm(B[1]) / detB)) + 2
    m2max = int(np.ceil(rad * np.linalg.norm(B[0]) / detB)) + 2
    M1, M2 = np.meshgrid(np.arange(-m1max, m1max + 1),
                         np.arange(-m2max, m2max + 1), indexing="ij")
    midx = np.stack([M1.ravel(), M2.ravel()], axis=-1)
    G = midx @ B
    r = np.linalg.norm(G, axis=1)
    order = np.argsort(r, kind="stable")
    rcut = r[order[min(n_G, len(r)) - 1]]
    keep = r <= rcut * (1.0 + 1e-12) + 1e-12
    return midx[keep], G[keep]


def _hole_form_factor(x) -> np.ndarray:
    """2*J1(x)/x at x = |G|R, with the x->0 limit of 1."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x > 1e-12
    out[nz] = 2.0 * j1(x[nz]) / x[nz]
    return out


def _eps_matrix(cell: _Cell, midx: np.ndarray, G: np.ndarray, R: float,
                eps_bg: float, eps_hole: float) -> np.ndarray:
    """Dense eps(G-G') matrix via the analytic coefficients on the
    index-difference set."""
    n = len(G)
    Gd = G[:, None, :] - G[None, :, :]
    Gr = np.linalg.norm(Gd, axis=-1)
    fill = np.pi * R * R / cell.area
    shape = _hole_form_factor(Gr * R)
    phases = np.exp(-1j * np.tensordot(Gd, cell.holes.T, axes=([2], [0]))).sum(axis=-1)
    eps = (eps_hole - eps_bg) * fill * shape * phases
    eps[np.arange(n), np.arange(n)] += eps_bg
    return eps


def epsilon_fourier_coefficient(spec: LatticeSpec, background_index: float,
                                G, cell: _Cell | None = None) -> float:
    """Fourier coefficient of eps(r) at reciprocal vector G (rad / length).

    For the bulk primitive cell (default): G=0 gives the spatial average
    f*eps_hole + (1-f)*eps_bg with hexagonal fill f = (2pi/sqrt(3))(R/a)^2;
    G!=0 gives (eps_hole-eps_bg)*2f*J1(|G|R)/(|G|R) summed over the cell's
    holes with phase factors.  Real by centrosymmetry.
    """
    if cell is None:
        cell = _bulk_cell(spec)
    eps_bg = background_index ** 2
    eps_hole = spec.n_hole ** 2
    G = np.asarray(G, dtype=float)
    fill = np.pi * spec.R ** 2 / cell.area
    Gr = np.linalg.norm(G)
    phase = np.exp(-1j * cell.holes @ G).sum()
    if Gr < 1e-12:
        # phase sum = number of holes; average includes every hole's fill
        return float(fill * np.real(phase) * (eps_hole - eps_bg) + eps_bg)
    coeff = (eps_hole - eps_bg) * fill * float(_hole_form_factor(Gr * spec.R)) * phase
    return float(np.real(coeff))


def _solve_k(k_2pi_a: np.ndarray, G: np.ndarray, eta: np.ndarray,
             polarization: str, n_bands: int, a: float,
             want_vectors: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """Eigen-solve one k-point (k in units 2pi/a); returns normalized
    frequencies (a/lambda) and optionally the plane-wave eigenvectors."""
    k = np.asarray(k_2pi_a, dtype=float) * 2.0 * np.pi / a
    kG = k[None, :] + G
    if polarization == "TE":
        M = (kG @ kG.T) * eta
    elif polarization == "TM":
        mag = np.linalg.norm(kG, axis=1)
        M = np.outer(mag, mag) * eta
    else:
        raise ValueError(f"polarization must be 'TE' or 'TM', got {polarization!r}")
    M = 0.5 * (M + M.conj().T)
    try:
        if want_vectors:
            w, v = eigh(M)
        else:
            w = eigh(M, eigvals_only=True)
            v = None
    except np.linalg.LinAlgError as exc:  # pragma: no cover - rare
        raise EigensolverError(
            f"eigensolver failed at k={k_2pi_a} (basis size {len(G)}): {exc}"
        ) from exc
    if w[0] < -1e-10 * max(1.0, abs(w[-1])):
        raise EigensolverError(
            f"spurious negative eigenvalue {w[0]:.3e} at k={k_2pi_a} (basis {len(G)})"
        )
    freqs = np.sqrt(np.clip(w[:n_bands], 0.0, None)) / (2.0 * np.pi) * a
    if v is not None:
        v = v[:, :n_bands]
    return freqs, v


def _solve_path(cell: _Cell, spec: LatticeSpec, background_index: float,
                polarization: str, k_points: np.ndarray, n_G: int,
                n_bands: int, workers: int = 1, want_vectors: bool = False):
    midx, G = _plane_wave_basis(cell, n_G)
    eps = _eps_matrix(cell, midx, G, spec.R, background_index ** 2, spec.n_hole ** 2)
    eta = np.linalg.inv(eps)
    k_points = np.atleast_2d(np.asarray(k_points, dtype=float))

    def solve(k):
        return _solve_k(k, G, eta, polarization, n_bands, spec.a, want_vectors)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve, k_points))
    else:
        results = [solve(k) for k in k_points]
    freqs = np.array([r[0] for r in results])
    vecs = [r[1] for r in results] if want_vectors else None
    return freqs, vecs, midx, G


def make_k_path(corners: list[str] | None = None, points_per_segment: int = 30) -> np.ndarray:
    """Piecewise-linear k-path through hexagonal high-symmetry points
    (default Gamma-K-M-Gamma), units of 2pi/a, endpoint included."""
    if corners is None:
        corners = ["G", "K", "M", "G"]
    pts = [HIGH_SYMMETRY[c] for c in corners]
    path = []
    for p, q in zip(pts[:-1], pts[1:]):
        for t in np.linspace(0.0, 1.0, points_per_segment, endpoint=False):
            path.append(p + (q - p) * t)
    path.append(pts[-1])
    return np.asarray(path)


def compute_bulk_bands(spec: LatticeSpec, background_index: float,
                       polarization: str = "TE",
                       k_path: np.ndarray | None = None,
                       n_G: int = DEFAULT_BULK_NG,
                       n_bands: int = 8,
                       workers: int = 1) -> BandStructure:
    """Bulk bands of the hexagonal lattice over a k-path (units 2pi/a)."""
    if n_G < _MIN_BULK_NG:
        raise GeometryError(f"n_G={n_G} below the minimum basis size {_MIN_BULK_NG}")
    if k_path is None:
        k_path = make_k_path()
    freqs, _, _, G = _solve_path(_bulk_cell(spec), spec, background_index,
                                 polarization, k_path, n_G, n_bands, workers)
    return BandStructure(k_points=np.atleast_2d(k_path), bands=freqs,
                         polarization=polarization, n_planewaves=len(G))


def bulk_gap(spec: LatticeSpec, background_index: float,
             polarization: str = "TE", n_G: int = DEFAULT_BULK_NG,
             points_per_segment: int = 12) -> tuple[float, float]:
    """(lower, upper) edges of the gap between bands 1 and 2 along the
    Gamma-K-M-Gamma path.  Raises if the bands overlap (no gap)."""
    bs = compute_bulk_bands(spec, background_index, polarization,
                            make_k_path(points_per_segment=points_per_segment),
                            n_G=n_G, n_bands=2)
    lo = float(bs.bands[:, 0].max())
    hi = float(bs.bands[:, 1].min())
    if hi <= lo:
        raise NoGuidedModeError(
            f"no {polarization} gap for background index {background_index}"
        )
    return lo, hi


def _parity_permutation(midx: np.ndarray, rows: int) -> np.ndarray:
    """Index permutation of the G basis under the z -> -z mirror about the
    waveguide axis: (m1, m2) -> (m1, m1*(rows mod 2) - m2)."""
    key = {(int(m1), int(m2)): i for i, (m1, m2) in enumerate(midx)}
    c = rows % 2
    try:
        return np.array([key[(int(m1), int(m1) * c - int(m2))] for m1, m2 in midx])
    except KeyError as exc:  # pragma: no cover - guarded by shell completion
        raise EigensolverError(f"mirror image of G index {exc} missing from basis")


def _waveguide_ng(rows: int) -> int:
    # keeps the in-plane cutoff radius roughly constant as the cell grows
    return max(350, 83 * rows)


def compute_waveguide_bands(spec: LatticeSpec, background_index: float,
                            supercell_rows: int = 9,
                            k_points: np.ndarray | None = None,
                            n_G: int | None = None,
                            n_bands: int | None = None,
                            workers: int = 1,
                            _want_vectors: bool = False):
    """W1 guided bands from a 1 x supercell_rows supercell.

    k_points are (kx, 0) in units 2pi/a (scalars accepted, default 25
    points over [0.3, 0.5]).  Returns a BandStructure whose ``gap`` is the
    bulk TE gap at the same background index, ``parity`` the mirror
    eigenvalue about the waveguide axis, and ``design_band`` the per-k
    sorted index of the fundamental (lowest in-gap) guided band.
    """
    if supercell_rows < 7 or supercell_rows % 2 == 0:
        raise GeometryError(
            f"supercell_rows must be odd and >= 7, got {supercell_rows}"
        )
    if not spec.w1_defect:
        raise GeometryError("waveguide bands need a spec with w1_defect set")
    if k_points is None:
        k_points = DEFAULT_WAVEGUIDE_KX
    k_points = np.asarray(k_points, dtype=float)
    if k_points.ndim == 1:
        k_points = np.column_stack([k_points, np.zeros_like(k_points)])
    if n_G is None:
        n_G = _waveguide_ng(supercell_rows)
    if n_bands is None:
        # all folded bands below the gap plus a few inside it
        n_bands = supercell_rows + 7

    cell = _supercell(spec, supercell_rows)
    freqs, vecs, midx, G = _solve_path(cell, spec, background_index, "TE",
                                       k_points, n_G, n_bands, workers,
                                       want_vectors=True)
    perm = _parity_permutation(midx, supercell_rows)
    parity = np.empty_like(freqs)
    for i, v in enumerate(vecs):
        overlap = np.real(np.sum(v.conj() * v[perm, :], axis=0))
        parity[i] = np.sign(overlap)

    gap = bulk_gap(spec, background_index)
    in_gap = (freqs > gap[0]) & (freqs < gap[1])
    if not in_gap.any():
        raise NoGuidedModeError(
            f"no guided mode inside the bulk gap {gap} for background index "
            f"{background_index} (rows={supercell_rows}, n_G={len(G)})"
        )
    design = np.full(len(k_points), -1, dtype=int)
    for i in range(len(k_points)):
        idx = np.nonzero(in_gap[i])[0]
        if len(idx):
            design[i] = idx[0]

    bs = BandStructure(k_points=k_points, bands=freqs, polarization="TE",
                       n_planewaves=len(G), parity=parity, gap=gap,
                       design_band=design)
    if _want_vectors:
        return bs, vecs
    return bs


def _design_edge(bs: BandStructure) -> tuple[int, int, float]:
    """(k_index, band_index, freq) of the design-band minimum."""
    ks = np.nonzero(bs.design_band >= 0)[0]
    fs = np.array([bs.bands[i, bs.design_band[i]] for i in ks])
    j = int(np.argmin(fs))
    return int(ks[j]), int(bs.design_band[ks[j]]), float(fs[j])


def mode_gap(spec: LatticeSpec, delta_n: float, supercell_rows: int = 9,
             n_G: int | None = None, k_points: np.ndarray | None = None,
             n_center: float | None = None) -> ModeGap:
    """Mode-gap of the heterostructure: the design band's edge-frequency
    shift when the background index drops from n_center to n_center-delta_n.

    n_center defaults to spec.n_slab (callers doing 2D effective-index
    modelling pass the effective index).  delta_n is applied directly to
    the 2D background index.
    """
    if delta_n < 0.0:
        raise GeometryError(f"delta_n must be >= 0, got {delta_n}")
    nc = spec.n_slab if n_center is None else n_center
    base, base_vecs = compute_waveguide_bands(
        spec, nc, supercell_rows, k_points, n_G, workers=1, _want_vectors=True)
    ki, bi, f_lower = _design_edge(base)
    if delta_n == 0.0:
        return ModeGap(lower_edge=f_lower, upper_edge=f_lower,
                       band_index=bi, k_edge=float(base.k_points[ki, 0]))

    shifted, shifted_vecs = compute_waveguide_bands(
        spec, nc - delta_n, supercell_rows, k_points, n_G, workers=1,
        _want_vectors=True)
    # match the design band at k_edge by parity and eigenvector overlap,
    # not by sorted index (robust to band reordering)
    v_ref = base_vecs[ki][:, bi]
    p_ref = base.parity[ki, bi]
    cand = np.nonzero(shifted.in_gap()[ki] & (shifted.parity[ki] == p_ref))[0]
    if len(cand) == 0:
        cand = np.nonzero(shifted.in_gap()[ki])[0]
    if len(cand) == 0:
        raise NoGuidedModeError(
            f"design band lost after index shift delta_n={delta_n}")
    overlaps = np.abs(v_ref.conj() @ shifted_vecs[ki][:, cand])
    bj = int(cand[np.argmax(overlaps)])
    f_upper = float(shifted.bands[ki, bj])
    return ModeGap(lower_edge=f_lower, upper_edge=f_upper, band_index=bi,
                   k_edge=float(base.k_points[ki, 0]))
