"""Lattice construction, index profiles, rasterization, effective index."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import cKDTree

from phckit.geometry import (
    BelowCutoffError,
    DielectricGrid,
    GeometryError,
    GradualProfile,
    LatticeSpec,
    StepProfile,
    build_hole_centers,
    damaged_region_mask,
    effective_slab_index,
    index_at,
    rasterize,
)

# value frozen from an independent bisection scan of the slab dispersion
# relation (h=0.9a, n=2.4, cladding 1.0) at a/lambda = 240/637
N_EFF_REF = 2.173136


def test_single_cell_single_hole():
    spec = LatticeSpec(periods_x=1, periods_z=1, w1_defect=False)
    c = build_hole_centers(spec)
    assert c.shape == (1, 2)
    np.testing.assert_allclose(c[0], [0.0, 0.0], atol=1e-15)


def test_w1_removes_one_row():
    spec = LatticeSpec(periods_x=3, periods_z=3, w1_defect=True)
    assert len(build_hole_centers(spec)) == 6
    spec = LatticeSpec(periods_x=7, periods_z=5, w1_defect=True)
    assert len(build_hole_centers(spec)) == 7 * 5 - 7
    spec = LatticeSpec(periods_x=7, periods_z=5, w1_defect=False)
    assert len(build_hole_centers(spec)) == 35


def test_nearest_neighbour_distance_is_a():
    spec = LatticeSpec(periods_x=6, periods_z=6, w1_defect=False)
    c = build_hole_centers(spec)
    d, _ = cKDTree(c).query(c, k=2)
    np.testing.assert_allclose(d[:, 1], spec.a, atol=1e-12)


def test_row_spacing():
    spec = LatticeSpec(periods_x=2, periods_z=4, w1_defect=False)
    c = build_hole_centers(spec)
    zs = np.unique(np.round(c[:, 1], 12))
    assert len(zs) == 4
    np.testing.assert_allclose(np.diff(zs), np.sqrt(3) / 2, atol=1e-12)


def test_mirror_symmetry_about_waveguide_axis():
    for defect in (True, False):
        spec = LatticeSpec(periods_x=5, periods_z=7, w1_defect=defect)
        c = build_hole_centers(spec)
        mirrored = np.column_stack([c[:, 0], -c[:, 1]])
        a = {tuple(np.round(p, 9)) for p in c}
        b = {tuple(np.round(p, 9)) for p in mirrored}
        assert a == b


def test_invalid_specs_rejected():
    with pytest.raises(GeometryError):
        LatticeSpec(R=0.6)
    with pytest.raises(GeometryError):
        LatticeSpec(h=-1.0)
    with pytest.raises(GeometryError):
        LatticeSpec(n_slab=1.0, n_hole=1.0)
    with pytest.raises(GeometryError):
        LatticeSpec(periods_x=0)
    with pytest.raises(GeometryError):
        StepProfile(delta_n=-0.01)
    with pytest.raises(GeometryError):
        GradualProfile(l0=-1.0)


class TestIndexAt:
    spec = LatticeSpec()

    def test_step_centre_and_outside(self):
        prof = StepProfile(delta_n=0.02, m=4)
        assert index_at(self.spec, prof, 0.0) == pytest.approx(2.4)
        assert index_at(self.spec, prof, prof.m * 1.0) == pytest.approx(2.38)
        # boundary belongs to the reduced region: |x| >= L/2
        assert index_at(self.spec, prof, 2.0) == pytest.approx(2.38)
        assert index_at(self.spec, prof, 1.999) == pytest.approx(2.4)

    def test_gradual_bands(self):
        prof = GradualProfile(l0=4.0, steps=(1.0, 1.0, 1.0, 1.0), delta_n_step=0.004)
        # centre, then bands [2,3), [3,4), [4,5), [5,6), then beyond
        assert index_at(self.spec, prof, 0.0) == pytest.approx(2.4)
        assert index_at(self.spec, prof, 2.5) == pytest.approx(2.396)
        assert index_at(self.spec, prof, 4.5) == pytest.approx(2.4 - 3 * 0.004)
        assert index_at(self.spec, prof, 5.5) == pytest.approx(2.4 - 4 * 0.004)
        assert index_at(self.spec, prof, 50.0) == pytest.approx(2.4 - 4 * 0.004)

    def test_gradual_total_length(self):
        prof = GradualProfile(l0=4.0, steps=(2.0, 2.0, 2.0, 2.0), delta_n_step=0.004)
        assert prof.cavity_length(self.spec) == pytest.approx(4 + 2 * 8)

    def test_profile_cannot_go_below_unity(self):
        prof = StepProfile(delta_n=1.5, m=4)
        with pytest.raises(GeometryError):
            index_at(self.spec, prof, 3.0)

    @given(x=st.floats(-60, 60), dn=st.floats(0, 0.1), m=st.integers(1, 8))
    @settings(max_examples=60, deadline=None)
    def test_even_in_x_step(self, x, dn, m):
        prof = StepProfile(delta_n=dn, m=m)
        assert index_at(self.spec, prof, x) == index_at(self.spec, prof, -x)

    @given(x=st.floats(0, 60), frac=st.floats(0.1, 1.0), dns=st.floats(0, 0.02))
    @settings(max_examples=60, deadline=None)
    def test_gradual_nonincreasing_in_abs_x(self, x, frac, dns):
        prof = GradualProfile(l0=4.0, steps=(1.0, 2.0, 1.5, 1.0), delta_n_step=dns)
        x2 = x * frac
        assert index_at(self.spec, prof, x2) >= index_at(self.spec, prof, x)


class TestRasterize:
    def test_resolution_floor(self):
        spec = LatticeSpec(periods_x=2, periods_z=2)
        with pytest.raises(GeometryError, match="minimum is 8"):
            rasterize(spec, StepProfile(), resolution=7)

    def test_hole_centre_is_air(self):
        spec = LatticeSpec(periods_x=3, periods_z=3, w1_defect=False)
        grid = rasterize(spec, StepProfile(delta_n=0.0), resolution=16)
        # cell containing the origin (a hole centre)
        ix = int((0.0 - grid.origin[0]) / grid.dx)
        iz = int((0.0 - grid.origin[1]) / grid.dx)
        assert grid.eps[ix, iz] == pytest.approx(1.0)

    def test_eps_bounds(self):
        spec = LatticeSpec(periods_x=4, periods_z=4)
        grid = rasterize(spec, StepProfile(delta_n=0.02), resolution=12)
        assert grid.eps.min() >= 1.0 - 1e-12
        assert grid.eps.max() <= 2.4 ** 2 + 1e-12

    def test_unit_cell_mean_converges_to_analytic(self):
        # oracle: spatial average over one period-cell of the bulk lattice,
        # f*eps_hole + (1-f)*eps_bg with hexagonal fill f = (2pi/sqrt3)(R/a)^2
        spec = LatticeSpec(periods_x=5, periods_z=5, w1_defect=False)
        prof = StepProfile(delta_n=0.0)
        f = (2 * np.pi / np.sqrt(3)) * spec.R ** 2
        target = f * 1.0 + (1 - f) * spec.n_slab ** 2
        errs = []
        for res in (16, 32, 64):
            grid = rasterize(spec, prof, resolution=res)
            errs.append(abs(_window_mean(grid) - target))
        assert errs[0] > errs[1] > errs[2]

    def test_3d_has_air_padding(self):
        spec = LatticeSpec(periods_x=2, periods_z=2)
        grid = rasterize(spec, StepProfile(delta_n=0.0), resolution=8)
        g3 = rasterize(spec, StepProfile(delta_n=0.0), resolution=8, dimensionality="3d")
        assert g3.eps.ndim == 3
        assert g3.eps[:, 0, :].max() == pytest.approx(1.0)   # bottom = air
        assert g3.eps[:, -1, :].max() == pytest.approx(1.0)  # top = air
        iy = g3.dims[1] // 2
        np.testing.assert_allclose(g3.eps[:, iy, :], grid.eps, atol=1e-12)

    def test_grid_mirror_symmetric_in_z(self):
        spec = LatticeSpec(periods_x=5, periods_z=5)
        grid = rasterize(spec, StepProfile(delta_n=0.02, m=2), resolution=10)
        np.testing.assert_array_equal(grid.eps, grid.eps[:, ::-1])

    def test_damaged_mask(self):
        spec = LatticeSpec(periods_x=9, periods_z=5)
        prof = StepProfile(delta_n=0.02, m=3)
        grid = rasterize(spec, prof, resolution=8)
        mask = damaged_region_mask(spec, prof, grid)
        assert mask.shape == grid.eps.shape
        xc = grid.cell_centers(0)
        inner = np.abs(xc) < 1.49
        assert not mask[inner, :].any()
        outer = np.abs(xc) > 1.51
        assert mask[outer, :].all()


def _window_mean(grid: DielectricGrid) -> float:
    """Mean eps over the central a x sqrt(3)a window (one period in x, two
    rows in z), with partial-cell weights at the non-aligned z edges."""
    xc, zc = grid.cell_centers(0), grid.cell_centers(1)
    half_x, half_z = 0.5, np.sqrt(3) / 2
    d = grid.dx
    wx = (np.minimum(xc + d / 2, half_x) - np.maximum(xc - d / 2, -half_x)).clip(0) / d
    wz = (np.minimum(zc + d / 2, half_z) - np.maximum(zc - d / 2, -half_z)).clip(0) / d
    w = wx[:, None] * wz[None, :]
    return float((grid.eps * w).sum() / w.sum())


class TestEffectiveIndex:
    def test_reference_value(self):
        # frozen from the pre-build root-bracketing scan
        n = effective_slab_index(LatticeSpec(), 240.0 / 637.0)
        assert n == pytest.approx(N_EFF_REF, abs=2e-6)

    def test_thick_slab_limit(self):
        n = effective_slab_index(LatticeSpec(h=100.0), 240.0 / 637.0)
        assert abs(n - 2.4) < 1e-3

    def test_thin_slab_limit(self):
        n = effective_slab_index(LatticeSpec(h=0.01), 240.0 / 637.0)
        assert abs(n - 1.0) < 1e-2

    def test_bounds(self):
        n = effective_slab_index(LatticeSpec(), 0.3768)
        assert 1.0 < n < 2.4

    def test_nonpositive_frequency_rejected(self):
        with pytest.raises(GeometryError):
            effective_slab_index(LatticeSpec(), 0.0)

    def test_below_cutoff(self):
        with pytest.raises(BelowCutoffError):
            effective_slab_index(LatticeSpec(h=1e-7), 1e-7)

    @given(h=st.floats(0.3, 3.0), f=st.floats(0.2, 0.8))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_thickness(self, h, f):
        n1 = effective_slab_index(LatticeSpec(h=h), f)
        n2 = effective_slab_index(LatticeSpec(h=h * 1.3), f)
        assert n2 > n1
