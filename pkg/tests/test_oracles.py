"""Analytic layer-stack oracles and their FDTD cross-checks."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phckit.oracles import (
    AnalyticResonance,
    FabryPerotSpec,
    LayerStack,
    OracleError,
    bragg_reflectance_peak,
    fabry_perot_q,
    fdtd_fabry_perot_ringdown,
    fdtd_interface_reflectance,
    format_selftest,
    fresnel_reflectance,
    quarter_wave_mirror,
    selftest,
    transfer_matrix,
)


# ---------------------------------------------------------------------------
# closed forms

class TestFresnel:
    def test_known_value(self):
        assert fresnel_reflectance(1.0, 2.0) == pytest.approx(1.0 / 9.0)

    def test_symmetric(self):
        assert fresnel_reflectance(1.5, 3.2) == pytest.approx(
            fresnel_reflectance(3.2, 1.5))

    def test_matched_media(self):
        assert fresnel_reflectance(2.4, 2.4) == 0.0


class TestLayerStack:
    def test_total_thickness(self):
        s = LayerStack(layers=((2.0, 0.25), (1.5, 0.4)))
        assert s.total_thickness == pytest.approx(0.65)

    def test_reversed_swaps_media_and_layers(self):
        s = LayerStack(n_in=1.0, n_out=3.0,
                       layers=((2.0, 0.25), (1.5, 0.4)))
        r = s.reversed()
        assert (r.n_in, r.n_out) == (3.0, 1.0)
        assert r.layers == ((1.5, 0.4), (2.0, 0.25))
        assert r.reversed() == s

    @pytest.mark.parametrize("kw", [
        dict(n_in=0.5), dict(n_out=0.0),
        dict(layers=((0.9, 0.2),)), dict(layers=((2.0, 0.0),)),
        dict(layers=((2.0, -1.0),)),
    ])
    def test_validation(self, kw):
        with pytest.raises(OracleError):
            LayerStack(**kw)


class TestTransferMatrix:
    def test_empty_stack_transmits_everything(self):
        R, T = transfer_matrix(LayerStack(), 0.3)
        assert R == pytest.approx(0.0, abs=1e-14)
        assert T == pytest.approx(1.0, rel=1e-14)

    def test_bare_interface_is_fresnel(self):
        R, T = transfer_matrix(LayerStack(n_in=1.0, n_out=2.0), 0.37)
        assert R == pytest.approx(1.0 / 9.0, rel=1e-12)
        assert R + T == pytest.approx(1.0, rel=1e-12)

    def test_half_wave_layer_is_absentee(self):
        # a half-wave layer leaves the bare-interface reflectance intact
        n_layer, f = 2.0, 0.4
        d = 1.0 / (2.0 * n_layer * f)
        stack = LayerStack(n_in=1.0, n_out=1.5, layers=((n_layer, d),))
        R, _ = transfer_matrix(stack, f)
        assert R == pytest.approx(fresnel_reflectance(1.0, 1.5), rel=1e-10)

    def test_quarter_wave_antireflection_coating(self):
        n_out, f = 2.25, 0.3
        n_ar = np.sqrt(n_out)
        d = 1.0 / (4.0 * n_ar * f)
        stack = LayerStack(n_in=1.0, n_out=n_out, layers=((n_ar, d),))
        R, T = transfer_matrix(stack, f)
        assert R == pytest.approx(0.0, abs=1e-12)
        assert T == pytest.approx(1.0, rel=1e-12)

    def test_array_frequency_input(self):
        stack = LayerStack(n_in=1.0, n_out=2.0, layers=((1.8, 0.3),))
        f = np.linspace(0.1, 0.6, 25)
        R, T = transfer_matrix(stack, f)
        assert R.shape == T.shape == (25,)
        np.testing.assert_allclose(R + T, 1.0, rtol=1e-12)

    def test_nonpositive_frequency_rejected(self):
        with pytest.raises(OracleError):
            transfer_matrix(LayerStack(), 0.0)

    @settings(max_examples=40, deadline=None)
    @given(
        n_in=st.floats(min_value=1.0, max_value=3.5),
        n_out=st.floats(min_value=1.0, max_value=3.5),
        layers=st.lists(
            st.tuples(st.floats(min_value=1.0, max_value=4.0),
                      st.floats(min_value=0.05, max_value=2.0)),
            min_size=0, max_size=6),
        freq=st.floats(min_value=0.05, max_value=0.9),
    )
    def test_lossless_energy_conservation(self, n_in, n_out, layers, freq):
        stack = LayerStack(n_in=n_in, n_out=n_out, layers=tuple(layers))
        R, T = transfer_matrix(stack, freq)
        assert 0.0 <= R <= 1.0 + 1e-12
        assert R + T == pytest.approx(1.0, rel=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(
        n_out=st.floats(min_value=1.0, max_value=3.5),
        layers=st.lists(
            st.tuples(st.floats(min_value=1.0, max_value=4.0),
                      st.floats(min_value=0.05, max_value=2.0)),
            min_size=1, max_size=6),
        freq=st.floats(min_value=0.05, max_value=0.9),
    )
    def test_transmittance_reciprocity(self, n_out, layers, freq):
        stack = LayerStack(n_in=1.0, n_out=n_out, layers=tuple(layers))
        _, t_fwd = transfer_matrix(stack, freq)
        _, t_bwd = transfer_matrix(stack.reversed(), freq)
        assert t_fwd == pytest.approx(t_bwd, rel=1e-10)


class TestQuarterWaveMirror:
    def test_layer_geometry(self):
        layers = quarter_wave_mirror(2.5, 1.25, pairs=3, f0=0.25)
        assert len(layers) == 6
        assert layers[0] == (2.5, pytest.approx(1.0 / (4 * 2.5 * 0.25)))
        assert layers[1] == (1.25, pytest.approx(1.0 / (4 * 1.25 * 0.25)))
        assert layers[0][0] == layers[2][0] == layers[4][0]

    def test_peak_reflectance_closed_form_matches_matrix(self):
        # two independent routes to the same number
        n_in, n_hi, n_lo, n_out, pairs, f0 = 1.0, 2.5, 1.25, 1.0, 4, 0.25
        stack = LayerStack(n_in=n_in, n_out=n_out,
                           layers=quarter_wave_mirror(n_hi, n_lo, pairs, f0))
        R_matrix, _ = transfer_matrix(stack, f0)
        R_closed = bragg_reflectance_peak(n_in, n_hi, n_lo, n_out, pairs)
        assert R_matrix == pytest.approx(R_closed, rel=1e-12)

    def test_more_pairs_reflect_more(self):
        vals = [bragg_reflectance_peak(1.0, 2.5, 1.25, 1.0, p)
                for p in (2, 4, 6)]
        assert vals[0] < vals[1] < vals[2] < 1.0


# ---------------------------------------------------------------------------
# Fabry-Perot resonance

class TestFabryPerot:
    def test_stack_is_palindromic_with_half_wave_spacer(self):
        spec = FabryPerotSpec()
        stack = spec.stack()
        assert len(stack.layers) == 2 * (2 * spec.pairs) + 1
        mid = stack.layers[len(stack.layers) // 2]
        assert mid[0] == spec.n_spacer
        assert mid[1] == pytest.approx(1.0 / (2 * spec.n_spacer * spec.f0))
        assert stack.reversed() == stack

    def test_resonance_at_design_frequency(self):
        spec = FabryPerotSpec()
        res = fabry_perot_q(spec.stack(), np.linspace(0.2, 0.3, 2001))
        assert isinstance(res, AnalyticResonance)
        assert res.freq == pytest.approx(spec.f0, rel=1e-6)
        assert res.peak_transmittance == pytest.approx(1.0, rel=1e-6)
        assert res.q == pytest.approx(res.freq / res.fwhm, rel=1e-12)
        assert res.q > 100.0

    def test_more_mirror_pairs_raise_q(self):
        qs = []
        for pairs in (2, 3, 4):
            spec = FabryPerotSpec(pairs=pairs)
            qs.append(fabry_perot_q(spec.stack(),
                                    np.linspace(0.2, 0.3, 2001)).q)
        assert qs[0] < qs[1] < qs[2]

    def test_peak_outside_scan_rejected(self):
        spec = FabryPerotSpec()
        with pytest.raises(OracleError):
            fabry_perot_q(spec.stack(), np.linspace(0.4, 0.6, 64))

    def test_too_few_scan_points_rejected(self):
        with pytest.raises(OracleError):
            fabry_perot_q(FabryPerotSpec().stack(), np.linspace(0.2, 0.3, 8))


# ---------------------------------------------------------------------------
# FDTD cross-checks (the other half of the dual route)

class TestFdtdCrossChecks:
    def test_interface_reflectance_within_1_percent(self):
        R = fdtd_interface_reflectance(1.0, 2.0)
        assert abs(R - 1.0 / 9.0) / (1.0 / 9.0) < 0.01

    def test_interface_reflectance_converges_with_resolution(self):
        target = fresnel_reflectance(1.0, 2.0)
        err40 = abs(fdtd_interface_reflectance(1.0, 2.0, cells_per_wavelength=40)
                    - target)
        err80 = abs(fdtd_interface_reflectance(1.0, 2.0, cells_per_wavelength=80)
                    - target)
        assert err80 < err40

    def test_fabry_perot_ringdown_matches_analytic(self):
        mode, analytic = fdtd_fabry_perot_ringdown()
        assert abs(mode.freq - analytic.freq) / analytic.freq < 5e-3
        assert abs(mode.q - analytic.q) / analytic.q < 0.05


# ---------------------------------------------------------------------------
# selftest battery

class TestSelftest:
    def test_analytic_battery_all_green(self):
        results = selftest(include_fdtd=False)
        assert len(results) >= 8
        failed = [r.name for r in results if not r.passed]
        assert failed == []

    def test_full_battery_all_green(self):
        results = selftest(include_fdtd=True)
        assert all(r.passed for r in results), format_selftest(results)
        names = {r.name.lower() for r in results}
        assert any("fdtd" in n for n in names)

    def test_format_marks_each_line(self):
        results = selftest(include_fdtd=False)
        text = format_selftest(results)
        lines = [ln for ln in text.splitlines() if ln.strip()]
        assert sum(("PASS" in ln) or ("FAIL" in ln) for ln in lines) >= len(results)
