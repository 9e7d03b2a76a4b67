"""Analytic reference models for validating the numerical engines.

Normal-incidence 1D multilayer optics via 2x2 characteristic matrices
(Abeles formulation).  Everything here has a closed form or a cheap
dense-scan evaluation, so these routines serve as ground truth for the
FDTD kernel and the resonance extractors.

Units follow the rest of the package: c = 1, frequencies normalized
(f = 1/lambda_vacuum), thicknesses in the same length unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OracleError(ValueError):
    """Raised when an analytic reference cannot be evaluated."""


@dataclass(frozen=True)
class LayerStack:
    """Planar multilayer: semi-infinite entry/exit media around finite layers.

    layers: ordered (refractive index, thickness) pairs, entry side first.
    """

    n_in: float = 1.0
    n_out: float = 1.0
    layers: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.n_in < 1.0 or self.n_out < 1.0:
            raise OracleError("semi-infinite indices must be >= 1")
        for j, (n, d) in enumerate(self.layers):
            if n < 1.0:
                raise OracleError(f"layer {j}: index must be >= 1, got {n}")
            if d <= 0.0:
                raise OracleError(f"layer {j}: thickness must be > 0, got {d}")

    def reversed(self) -> "LayerStack":
        return LayerStack(self.n_out, self.n_in, tuple(self.layers[::-1]))

    @property
    def total_thickness(self) -> float:
        return sum(d for _, d in self.layers)


def _amplitudes(stack: LayerStack, freq):
    """Complex (r, t) amplitude coefficients at normal incidence."""
    f = np.asarray(freq, dtype=float)
    m00 = np.ones_like(f, dtype=complex)
    m01 = np.zeros_like(m00)
    m10 = np.zeros_like(m00)
    m11 = np.ones_like(m00)
    for n, d in stack.layers:
        delta = 2.0 * np.pi * f * n * d
        c, s = np.cos(delta), np.sin(delta)
        a00, a01 = c, 1j * s / n
        a10, a11 = 1j * n * s, c
        m00, m01, m10, m11 = (
            m00 * a00 + m01 * a10,
            m00 * a01 + m01 * a11,
            m10 * a00 + m11 * a10,
            m10 * a01 + m11 * a11,
        )
    p_in, p_out = stack.n_in, stack.n_out
    top = m00 + m01 * p_out
    bot = m10 + m11 * p_out
    r = (p_in * top - bot) / (p_in * top + bot)
    t = 2.0 * p_in / (p_in * top + bot)
    return r, t


def transfer_matrix(stack: LayerStack, freq):
    """Reflectance and transmittance of a lossless stack.

    Accepts scalar or array frequency; R + T = 1 holds to rounding for
    real indices.
    """
    f = np.asarray(freq, dtype=float)
    if np.any(f <= 0.0):
        raise OracleError("frequency must be > 0")
    r, t = _amplitudes(stack, f)
    R = np.abs(r) ** 2
    T = (stack.n_out / stack.n_in) * np.abs(t) ** 2
    if np.isscalar(freq) or np.ndim(freq) == 0:
        return float(R), float(T)
    return R, T


def fresnel_reflectance(n1: float, n2: float) -> float:
    """Normal-incidence power reflectance of a bare interface."""
    return ((n1 - n2) / (n1 + n2)) ** 2


def quarter_wave_mirror(n_hi: float, n_lo: float, pairs: int, f0: float,
                        hi_first: bool = True) -> tuple[tuple[float, float], ...]:
    """Layer list for a quarter-wave Bragg mirror tuned to f0."""
    d_hi = 1.0 / (4.0 * n_hi * f0)
    d_lo = 1.0 / (4.0 * n_lo * f0)
    pair = ((n_hi, d_hi), (n_lo, d_lo)) if hi_first else ((n_lo, d_lo), (n_hi, d_hi))
    return pair * pairs


def bragg_reflectance_peak(n_in: float, n_hi: float, n_lo: float,
                           n_out: float, pairs: int) -> float:
    """Closed-form reflectance of an (HL)^N quarter-wave mirror at its
    design frequency: each HL pair transforms the exit admittance by
    (n_hi/n_lo)^2."""
    y = n_out * (n_hi / n_lo) ** (2 * pairs)
    return ((n_in - y) / (n_in + y)) ** 2


@dataclass(frozen=True)
class FabryPerotSpec:
    """Symmetric Bragg-mirror cavity: (HL)^N | half-wave spacer | (LH)^N.

    Default thicknesses (0.4 / 0.8) are integer multiples of the grid
    step at 40 cells per material wavelength (dx = 0.04 at f0 = 0.25,
    n_hi = 2.5), so the discrete stack matches the analytic one exactly.
    """

    pairs: int = 4
    n_hi: float = 2.5
    n_lo: float = 1.25
    n_spacer: float = 2.5
    f0: float = 0.25
    n_in: float = 1.0
    n_out: float = 1.0

    def stack(self) -> LayerStack:
        mirror = quarter_wave_mirror(self.n_hi, self.n_lo, self.pairs, self.f0)
        spacer = ((self.n_spacer, 1.0 / (2.0 * self.n_spacer * self.f0)),)
        return LayerStack(self.n_in, self.n_out,
                          mirror + spacer + mirror[::-1])

    def mirror_stack(self) -> LayerStack:
        """One mirror alone, spacer medium on the exit side."""
        return LayerStack(self.n_in, self.n_spacer,
                          quarter_wave_mirror(self.n_hi, self.n_lo,
                                              self.pairs, self.f0))


@dataclass(frozen=True)
class AnalyticResonance:
    freq: float
    q: float
    fwhm: float
    peak_transmittance: float


def _transmittance_fn(stack: LayerStack):
    def T(f):
        return transfer_matrix(stack, f)[1]
    return T


def _half_crossing(T, f_peak, t_half, f_far, tol=1e-14):
    """Bisect for T(f) = t_half between f_peak and f_far."""
    a, b = f_peak, f_far
    fa = T(a) - t_half
    fb = T(b) - t_half
    if fa * fb > 0.0:
        raise OracleError("transmission half-maximum not bracketed by scan")
    while abs(b - a) > tol * f_peak:
        m = 0.5 * (a + b)
        fm = T(m) - t_half
        if fa * fm <= 0.0:
            b, fb = m, fm
        else:
            a, fa = m, fm
    return 0.5 * (a + b)


def fabry_perot_q(stack: LayerStack, freqs) -> AnalyticResonance:
    """Resonance frequency and quality factor from the analytic
    transmission spectrum: locate the tallest interior peak of T(f) on
    the scan grid, polish it, and take Q = f_peak / FWHM."""
    f = np.sort(np.asarray(freqs, dtype=float))
    if f.size < 16:
        raise OracleError("frequency scan needs at least 16 points")
    _, T_scan = transfer_matrix(stack, f)
    i = int(np.argmax(T_scan))
    if i == 0 or i == f.size - 1:
        raise OracleError("no transmission peak inside the frequency scan")
    T = _transmittance_fn(stack)

    # golden-section polish of the peak position between the neighbours
    lo, hi = f[i - 1], f[i + 1]
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    tc, td = T(c), T(d)
    while hi - lo > 1e-15 * f[i]:
        if tc > td:
            hi, d, td = d, c, tc
            c = hi - invphi * (hi - lo)
            tc = T(c)
        else:
            lo, c, tc = c, d, td
            d = lo + invphi * (hi - lo)
            td = T(d)
    f_peak = 0.5 * (lo + hi)
    t_peak = T(f_peak)
    t_half = 0.5 * t_peak

    f_left = _half_crossing(T, f_peak, t_half, f[0])
    f_right = _half_crossing(T, f_peak, t_half, f[-1])
    fwhm = f_right - f_left
    if fwhm <= 0.0:
        raise OracleError("degenerate transmission peak (zero width)")
    return AnalyticResonance(freq=float(f_peak), q=float(f_peak / fwhm),
                             fwhm=float(fwhm), peak_transmittance=float(t_peak))


# ---------------------------------------------------------------------------
# 1D FDTD cross-checks.  These drive the real kernel against the analytic
# models above; they are the "two independent routes" used by selftest and
# the acceptance suite.
# ---------------------------------------------------------------------------

def _layer_eps_1d(stack: LayerStack, dx: float, lead_in: float,
                  lead_out: float) -> np.ndarray:
    """Permittivity on Ex nodes (cell edges) for a 1D layered medium.

    Sharp per-node assignment: a node on a layer boundary belongs to the
    layer starting there.  Smoothing the boundary node towards the mean
    acts as a thin matching layer and biases reflectances low, so it is
    deliberately not done."""
    n_cells = int(round((lead_in + stack.total_thickness + lead_out) / dx))
    x_edge = np.arange(n_cells + 1) * dx
    n_prof = np.full(n_cells + 1, stack.n_in, dtype=float)
    pos = lead_in
    for n, d in stack.layers:
        sel = (x_edge >= pos - 1e-9 * dx) & (x_edge < pos + d - 1e-9 * dx)
        n_prof[sel] = n
        pos += d
    n_prof[x_edge >= pos - 1e-9 * dx] = stack.n_out
    return n_prof ** 2


def fdtd_interface_reflectance(n1: float, n2: float, f0: float = 0.25,
                               cells_per_wavelength: int = 40,
                               bandwidth: float | None = None) -> float:
    """Measure the power reflectance of a single dielectric interface
    with the 1D FDTD kernel (two-run protocol: reference run without the
    interface, then subtraction of the incident waveform)."""
    from .fdtd import Fdtd1D, SourceSpec

    lam_min = 1.0 / (f0 * max(n1, n2))
    dx = lam_min / cells_per_wavelength
    bw = bandwidth if bandwidth is not None else 0.3 * f0
    lead = 14.0 / f0 * 0.25  # a few pulse widths of travel room
    n_cells = int(round(2.0 * lead / dx))
    src_node = int(round(0.25 * lead / dx))
    probe_node = int(round(0.55 * lead / dx))
    iface_node = n_cells // 2

    eps_ref = np.full(n_cells + 1, n1 ** 2)
    eps_str = eps_ref.copy()
    eps_str[iface_node + 1:] = n2 ** 2

    src = SourceSpec(position=(src_node * dx,), component="Ex",
                     center_freq=f0, bandwidth=bw)
    courant = 0.9 / max(1.0, 1.0 / min(n1, n2))  # c_max = 1/n_min
    # travel time: source->far wall and back plus pulse tail
    t_total = src.t_off + 3.0 * n_cells * dx * max(n1, n2)
    records = []
    for eps in (eps_ref, eps_str):
        sim = Fdtd1D(eps, dx, courant=courant, pml_cells=12)
        n_steps = int(np.ceil(t_total / sim.dt))
        rec = np.empty(n_steps)
        for n in range(n_steps):
            sim.step()
            t = (n + 1) * sim.dt
            if t < src.t_off:
                sim.add_source(src_node, src.waveform(t))
            rec[n] = sim.Ex[probe_node]
        records.append((rec, sim.dt))
    (inc, dt), (tot, _) = records
    refl = tot - inc
    freqs = np.fft.rfftfreq(inc.size, dt)
    spec_i = np.fft.rfft(inc)
    spec_r = np.fft.rfft(refl)
    k = int(np.argmin(np.abs(freqs - f0)))
    return float(np.abs(spec_r[k]) ** 2 / np.abs(spec_i[k]) ** 2)


def fdtd_fabry_perot_ringdown(spec: FabryPerotSpec | None = None,
                              cells_per_wavelength: int = 40,
                              n_record: int = 2 ** 14):
    """Ring down the Bragg-mirror cavity in 1D FDTD and extract (f, Q)
    by harmonic inversion of the spacer field.  Returns the measured
    resonance alongside the analytic one for comparison."""
    from .fdtd import Fdtd1D, SourceSpec
    from .resonance import harmonic_inversion, ResonanceError

    spec = spec or FabryPerotSpec()
    stack = spec.stack()
    f_scan = np.linspace(0.9 * spec.f0, 1.1 * spec.f0, 4001)
    analytic = fabry_perot_q(stack, f_scan)

    n_max = max(spec.n_hi, spec.n_lo, spec.n_spacer, spec.n_in, spec.n_out)
    dx = 1.0 / (spec.f0 * n_max * cells_per_wavelength)
    lead = 40 * dx
    eps = _layer_eps_1d(stack, dx, lead, lead)
    # drive slightly off the spacer centre to avoid odd-mode nodes
    x_spacer = lead + sum(d for _, d in stack.layers[:2 * spec.pairs])
    d_spacer = stack.layers[2 * spec.pairs][1]
    src_node = int(round((x_spacer + 0.37 * d_spacer) / dx))
    probe_node = int(round((x_spacer + 0.61 * d_spacer) / dx))

    src = SourceSpec(position=(src_node * dx,), component="Ex",
                     center_freq=analytic.freq, bandwidth=0.05 * spec.f0)
    sim = Fdtd1D(eps, dx, courant=0.9, pml_cells=12)
    n_src = int(np.ceil(src.t_off / sim.dt))
    rec = np.empty(n_record)
    for n in range(n_src + n_record):
        sim.step()
        t = (n + 1) * sim.dt
        if t < src.t_off:
            sim.add_source(src_node, src.waveform(t))
        if n >= n_src:
            rec[n - n_src] = sim.Ex[probe_node]
    window = (0.8 * analytic.freq, 1.2 * analytic.freq)
    modes = harmonic_inversion(rec, sim.dt, window)
    if not modes:
        raise ResonanceError("no resonance found in Fabry-Perot ringdown")
    return modes[0], analytic


# ---------------------------------------------------------------------------
# selftest battery
# ---------------------------------------------------------------------------

@dataclass
class SelftestResult:
    name: str
    passed: bool
    detail: str = ""


def selftest(include_fdtd: bool = True) -> list[SelftestResult]:
    """Run the oracle battery; each entry cross-checks two independent
    routes to the same quantity."""
    out: list[SelftestResult] = []

    def check(name, passed, detail=""):
        out.append(SelftestResult(name, bool(passed), detail))

    # empty stack
    R, T = transfer_matrix(LayerStack(1.0, 1.0), 0.25)
    check("empty stack: R=0, T=1", abs(R) < 1e-14 and abs(T - 1) < 1e-14,
          f"R={R:.2e} T={T:.12f}")

    # Fresnel
    R, T = transfer_matrix(LayerStack(1.0, 2.4), 0.31)
    R_th = fresnel_reflectance(1.0, 2.4)
    check("single interface matches Fresnel",
          abs(R - R_th) < 1e-12, f"R={R:.12f} vs {R_th:.12f}")

    # energy conservation across a random-ish lossless stack and band
    rng = np.random.default_rng(11)
    layers = tuple((float(n), float(d)) for n, d in
                   zip(1.0 + 2.0 * rng.random(7), 0.2 + rng.random(7)))
    stack = LayerStack(1.0, 1.5, layers)
    f_band = np.linspace(0.05, 0.8, 301)
    R_arr, T_arr = transfer_matrix(stack, f_band)
    err = np.max(np.abs(R_arr + T_arr - 1.0))
    check("R+T=1 over band (lossless)", err < 1e-12, f"max|R+T-1|={err:.2e}")

    # reciprocity
    _, T_rev = transfer_matrix(stack.reversed(), f_band)
    err = np.max(np.abs(T_arr - T_rev))
    check("reciprocity: reversed stack, same T", err < 1e-12,
          f"max|dT|={err:.2e}")

    # quarter-wave closed form
    for pairs in (2, 4, 6):
        mirror = LayerStack(1.0, 1.5,
                            quarter_wave_mirror(2.5, 1.25, pairs, 0.25))
        R, _ = transfer_matrix(mirror, 0.25)
        R_cf = bragg_reflectance_peak(1.0, 2.5, 1.25, 1.5, pairs)
        check(f"quarter-wave mirror closed form (N={pairs})",
              abs(R - R_cf) < 1e-10, f"R={R:.12f} vs {R_cf:.12f}")

    # Fabry-Perot: Q grows monotonically with mirror pairs
    qs = []
    for pairs in (2, 3, 4):
        fp = FabryPerotSpec(pairs=pairs)
        scan = np.linspace(0.9 * fp.f0, 1.1 * fp.f0, 4001)
        qs.append(fabry_perot_q(fp.stack(), scan).q)
    check("cavity Q monotone in mirror pairs",
          qs[0] < qs[1] < qs[2],
          "Q=" + "/".join(f"{q:.3g}" for q in qs))

    # low-finesse limit: weaker index contrast, lower Q
    qs_c = []
    for n_hi in (1.6, 2.0, 2.5):
        fp = FabryPerotSpec(pairs=3, n_hi=n_hi, n_spacer=n_hi)
        scan = np.linspace(0.85 * fp.f0, 1.15 * fp.f0, 4001)
        qs_c.append(fabry_perot_q(fp.stack(), scan).q)
    check("cavity Q monotone in mirror contrast",
          qs_c[0] < qs_c[1] < qs_c[2],
          "Q=" + "/".join(f"{q:.3g}" for q in qs_c))

    if include_fdtd:
        R = fdtd_interface_reflectance(1.0, 2.0)
        R_th = fresnel_reflectance(1.0, 2.0)
        rel = abs(R - R_th) / R_th
        check("1D FDTD interface reflectance vs Fresnel (1%)",
              rel < 0.01, f"R={R:.6f} vs {R_th:.6f} rel={rel:.2e}")

        mode, analytic = fdtd_fabry_perot_ringdown()
        df = abs(mode.freq - analytic.freq) / analytic.freq
        dq = abs(mode.q - analytic.q) / analytic.q
        check("1D FDTD Fabry-Perot f vs analytic (0.5%)", df < 0.005,
              f"f={mode.freq:.6f} vs {analytic.freq:.6f} rel={df:.2e}")
        check("1D FDTD Fabry-Perot Q vs analytic (5%)", dq < 0.05,
              f"Q={mode.q:.1f} vs {analytic.q:.1f} rel={dq:.2e}")

    return out


def format_selftest(results: list[SelftestResult]) -> str:
    lines = []
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<{width}}  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} oracle checks passed")
    return "\n".join(lines)
