"""Resonance analysis: extract mode frequencies and Q from ringdown
signals, plus mode-volume and energy-localization diagnostics.

Two independent routes to Q are provided on purpose: harmonic inversion
of a field probe (matrix-pencil method) and a log-linear fit to the
stored-energy decay.  Cross-checking them catches under-resolved or
multi-mode ringdowns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import DielectricGrid

__all__ = [
    "ResonantMode",
    "ResonanceResult",
    "DecayFit",
    "ModeVolumeResult",
    "ResonanceError",
    "BeatingError",
    "harmonic_inversion",
    "q_from_decay",
    "mode_volume",
    "energy_fraction_in_region",
    "electric_energy_density",
]

log = logging.getLogger(__name__)

MIN_SIGNAL_LEN = 1024
_SVD_RTOL = 1e-8


class ResonanceError(RuntimeError):
    pass


class BeatingError(ResonanceError):
    """Energy decay is not a single exponential (multi-mode beating)."""


@dataclass
class ResonantMode:
    freq: float        # a / lambda
    q: float           # pi f / gamma (np.inf for undamped poles)
    gamma: float       # field amplitude decay rate (1 / time)
    amplitude: float
    phase: float
    residual: float    # relative model misfit of the full fit
    warning: str | None = None  # set when the fit looks ill-conditioned


class DecayFit(NamedTuple):
    q: float
    residual: float


@dataclass
class ResonanceResult:
    """One analyzed cavity mode, as written to the analysis CSV."""

    freq_norm: float
    q: float
    v_norm: float
    damaged_energy_fraction: float
    method: str               # "harmonic-inversion" | "decay-fit"
    amplitude: float
    dim: int = 2
    residual: float = 0.0

    def __post_init__(self):
        if self.freq_norm <= 0.0 or self.q <= 0.0 or self.v_norm <= 0.0:
            raise ValueError("freq_norm, Q and V_norm must all be positive")
        if not (0.0 <= self.damaged_energy_fraction <= 1.0):
            raise ValueError("damaged_energy_fraction must lie in [0, 1]")
        if self.method not in ("harmonic-inversion", "decay-fit"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class ModeVolumeResult:
    v_norm: float      # in (lambda / n)^d at the field maximum
    v_cells: float     # in units of a^d
    n_peak: float
    peak_index: tuple[int, ...]
    dim: int


def _decimate_factor(n: int, dt: float, f_high: float | None,
                     max_len: int) -> int:
    """Largest stride that keeps the band of interest well below Nyquist
    while shortening the record to roughly max_len samples.  Without a
    stated band the record is decimated unconditionally (the analysis
    band shrinks with it)."""
    want = max(1, int(np.ceil(n / max_len)))
    if f_high is None or f_high <= 0.0:
        return want
    cap = max(1, int(np.floor(0.4 / (f_high * dt))))
    return max(1, min(want, cap))


def harmonic_inversion(series, dt=None,
                       freq_window: tuple[float, float] | None = None,
                       max_len: int = 4096,
                       svd_rtol: float = _SVD_RTOL) -> list[ResonantMode]:
    """Fit the signal as a sum of damped complex exponentials and return
    the resonant modes, sorted by amplitude (strongest first).

    Accepts either a ProbeRecord (which carries its own dt; the second
    positional argument is then the frequency window) or a plain sample
    array with an explicit dt.

    Matrix-pencil method: Hankel matrix of the (possibly decimated)
    record, rank truncation at svd_rtol of the leading singular value,
    poles from the shifted pencil, amplitudes from a Vandermonde
    least-squares solve.  Modes outside freq_window are dropped.
    """
    if hasattr(series, "samples") and hasattr(series, "dt"):
        if freq_window is None and dt is not None:
            freq_window = tuple(dt)
        dt = series.dt
        series = series.samples
    x = np.asarray(series)
    if x.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    if dt is None:
        raise ValueError("dt is required when passing a bare sample array")
    if len(x) < MIN_SIGNAL_LEN:
        raise ValueError(
            f"signal too short for harmonic inversion: {len(x)} samples "
            f"(minimum {MIN_SIGNAL_LEN})")
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    scale = np.max(np.abs(x))
    if scale == 0.0:
        log.debug("harmonic_inversion: zero signal, no modes")
        return []
    if freq_window is not None:
        lo, hi = freq_window
        stride = _decimate_factor(len(x), dt, hi, max_len)
    else:
        stride = _decimate_factor(len(x), dt, None, max_len)
        lo, hi = 0.0, 0.4 / (dt * stride)
    xd = x[::stride]
    dtd = dt * stride
    n = len(xd)
    L = n // 3
    rows = n - L
    Y = np.lib.stride_tricks.sliding_window_view(xd, L + 1)  # (rows, L+1)
    Y1 = Y[:, :-1]
    U, s, Wh = np.linalg.svd(Y1, full_matrices=False)
    r = int(np.sum(s > svd_rtol * s[0]))
    if r == 0:
        log.debug("harmonic_inversion: rank collapse, no modes")
        return []
    # poles of the rank-r pencil (Y1, Y2)
    Z = (U[:, :r].conj().T @ Y[:, 1:] @ Wh[:r].conj().T) / s[:r, None]
    poles = np.linalg.eigvals(Z)

    # amplitudes from the full decimated record
    steps = np.arange(n)
    with np.errstate(over="ignore", invalid="ignore"):
        V = np.power(poles[None, :], steps[:, None])
    V[~np.isfinite(V)] = 0.0
    amps, *_ = np.linalg.lstsq(V, xd, rcond=None)
    model = V @ amps
    residual = float(np.linalg.norm(xd - model) / np.linalg.norm(xd))

    warning = None
    if residual > 1e-2:
        warning = f"ill-conditioned fit: relative residual {residual:.2e}"

    modes = []
    for z, a in zip(poles, amps):
        if np.abs(z) < 1e-12:
            continue
        f = float(np.angle(z) / (2.0 * np.pi * dtd))
        gamma = float(-np.log(np.abs(z)) / dtd)
        if not (lo <= f <= hi):
            continue
        q = np.pi * f / gamma if gamma > 0.0 else np.inf
        modes.append(ResonantMode(freq=f, q=q, gamma=gamma,
                                  amplitude=float(np.abs(a)),
                                  phase=float(np.angle(a)),
                                  residual=residual, warning=warning))
    modes.sort(key=lambda m: m.amplitude, reverse=True)
    if not modes:
        log.debug("harmonic_inversion: no modes inside window (%.4g, %.4g)",
                  lo, hi)
    return modes


def q_from_decay(times: np.ndarray, energies: np.ndarray, freq: float,
                 fit_tol: float = 0.05) -> DecayFit:
    """Q from the stored-energy ringdown: U(t) = U0 exp(-t / tau) gives
    Q = 2 pi f tau.  Returns (Q, fit residual); a constant (non-decaying)
    record returns Q = inf.

    Raises BeatingError when log(U) is visibly non-linear, which happens
    when several modes beat; re-run with a narrower-band source.
    """
    t = np.asarray(times, dtype=float)
    u = np.asarray(energies, dtype=float)
    if t.shape != u.shape or t.ndim != 1:
        raise ValueError("times and energies must be 1D arrays of equal length")
    if len(t) < 4:
        raise ValueError("need at least 4 samples of the energy decay")
    if freq <= 0.0:
        raise ValueError(f"freq must be positive, got {freq}")
    if np.any(u < 0.0):
        raise ValueError("energies must be non-negative")
    good = u > 0.0
    if good.sum() < 4:
        raise ValueError("energy record is (almost) all zero")
    t, u = t[good], u[good]
    logu = np.log(u)
    span = logu.max() - logu.min()
    if span < 1e-12:
        return DecayFit(q=np.inf, residual=0.0)
    slope, intercept = np.polyfit(t, logu, 1)
    fit = slope * t + intercept
    misfit = float(np.max(np.abs(logu - fit)) / max(span, 1e-300))
    if misfit > fit_tol:
        raise BeatingError(
            "energy decay is not a single exponential (mode beating); "
            "excite with a narrower source bandwidth or isolate the mode")
    if slope >= 0.0:
        return DecayFit(q=np.inf, residual=misfit)
    tau = -1.0 / slope
    return DecayFit(q=float(2.0 * np.pi * freq * tau), residual=misfit)


def _pml_border_mask(shape: tuple[int, ...], pml_cells: int) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for ax, nax in enumerate(shape):
        sl: list = [slice(None)] * len(shape)
        sl[ax] = slice(0, pml_cells)
        mask[tuple(sl)] = True
        sl[ax] = slice(nax - pml_cells, nax)
        mask[tuple(sl)] = True
    return mask


def electric_energy_density(eps: np.ndarray,
                            fields: dict[str, np.ndarray]) -> np.ndarray:
    """eps |E|^2 on cell centres from cell-centred field components."""
    e2 = np.zeros(eps.shape)
    for comp in fields.values():
        e2 += np.abs(comp) ** 2
    return eps * e2


def mode_volume(grid: DielectricGrid, density: np.ndarray,
                freq: float, n_ref: float | None = None,
                pml_cells: int = 10) -> ModeVolumeResult:
    """Purcell mode volume V = integral(eps|E|^2) / max(eps|E|^2),
    normalized by (lambda/n_ref)^d.  n_ref defaults to the refractive
    index at the field maximum; pass the cavity centre index for
    like-for-like comparisons across profiles.

    density is the cell-centred eps|E|^2 map (see
    electric_energy_density), phase-scanned or period-averaged so the
    standing-wave phase drops out (both give the same ratio).

    Raises ResonanceError when the maximum sits inside the absorbing
    border, which means the map holds radiation, not a confined mode.
    """
    if freq <= 0.0:
        raise ValueError(f"freq must be positive, got {freq}")
    u = np.asarray(density)
    if u.shape != grid.eps.shape:
        raise ValueError("density must be cell-centred on the grid")
    if np.any(u < 0.0):
        raise ValueError("density must be non-negative")
    total = float(u.sum())
    if total <= 0.0:
        raise ResonanceError("field map is identically zero")
    flat_peak = int(np.argmax(u))
    peak = np.unravel_index(flat_peak, u.shape)
    if _pml_border_mask(u.shape, pml_cells)[peak]:
        raise ResonanceError(
            "field maximum lies in the absorbing boundary region; "
            "the map does not hold a confined mode")
    d = u.ndim
    dV = grid.dx ** d
    v_cells = total * dV / float(u[peak])
    n_peak = float(np.sqrt(grid.eps[peak]))
    n_use = n_peak if n_ref is None else float(n_ref)
    lam = 1.0 / freq  # wavelength in units of a
    v_norm = v_cells / (lam / n_use) ** d
    return ModeVolumeResult(v_norm=v_norm, v_cells=v_cells, n_peak=n_peak,
                            peak_index=tuple(int(i) for i in peak), dim=d)


def energy_fraction_in_region(density: np.ndarray,
                              mask: np.ndarray) -> float:
    """Fraction of the (non-negative) energy density inside mask."""
    u = np.asarray(density)
    m = np.asarray(mask, dtype=bool)
    if u.shape != m.shape:
        raise ValueError("density and mask shapes differ")
    total = float(u.sum())
    if total <= 0.0:
        raise ResonanceError("total energy is zero; nothing to localize")
    return float(u[m].sum() / total)
