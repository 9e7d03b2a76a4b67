"""Command-line interface.

Subcommands
-----------
bands           W1 supercell band structure for the configured lattice
simulate        single cavity ringdown; writes probe/region/snapshot artifacts
analyze         harmonic inversion + mode volume from a simulate directory
sweep           one-axis parameter sweep from a config file
replicate       canonical desk-scale suite + markdown report
selftest        analytic/numeric oracle battery
geometry dump   rasterized permittivity, hole table, index profile

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import (
    DielectricGrid,
    GeometryError,
    GradualProfile,
    build_hole_centers,
    damaged_region_mask,
    index_at,
    rasterize,
)
from .experiment import (
    PROBE_POS,
    SOURCE_POS,
    ConfigError,
    SingleRunConfig,
    characterize_cavity,
    gap_edges,
    load_config,
    load_single_run,
    outer_delta_n,
    run_replicate,
    run_sweep,
)

_CONFIG_ERRORS = (ConfigError, GeometryError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as configuration errors so
    the process exits with code 1, not argparse's default 2."""

    def error(self, message):
        raise ConfigError(message)


def _numerical_errors():
    from .bands import EigensolverError, NoGuidedModeError
    from .fdtd import FdtdInstabilityError
    from .oracles import OracleError
    from .resonance import BeatingError, ResonanceError
    return (EigensolverError, NoGuidedModeError, FdtdInstabilityError,
            OracleError, BeatingError, ResonanceError,
            np.linalg.LinAlgError, FloatingPointError)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phckit",
                description="heterostructure photonic-crystal cavity toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add_common(sp, config=True, out=True, resolution=True, workers=True,
                   dim=False):
        if config:
            sp.add_argument("--config", type=Path, required=True,
                            help="TOML or JSON experiment file")
        if out:
            sp.add_argument("--out", type=Path, default=None,
                            help="output directory (overrides config)")
        if resolution:
            sp.add_argument("--resolution", type=int, default=None,
                            help="cells per lattice period (overrides config)")
        if workers:
            sp.add_argument("--workers", type=int, default=None,
                            help="worker cap (overrides config)")
        if dim:
            sp.add_argument("--dim", type=int, choices=(2, 3), default=2,
                            help="grid dimensionality")

    sp = sub.add_parser("bands", help="W1 waveguide band structure")
    add_common(sp, dim=False)
    sp.set_defaults(func=cmd_bands)

    sp = sub.add_parser("simulate", help="single cavity ringdown run")
    add_common(sp, dim=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("analyze", help="extract (f, Q, V) from a run directory")
    sp.add_argument("--out", type=Path, required=True,
                    help="directory written by simulate")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("sweep", help="one-axis parameter sweep")
    add_common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("replicate", help="canonical desk-scale suite + report")
    add_common(sp, config=False)
    sp.add_argument("--mode", choices=("full", "quick"), default="full",
                    help="full canonical suite or a truncated smoke version")
    sp.set_defaults(func=cmd_replicate)

    sp = sub.add_parser("selftest", help="run the oracle battery")
    sp.add_argument("--skip-fdtd", action="store_true",
                    help="analytic checks only")
    sp.set_defaults(func=cmd_selftest)

    sp = sub.add_parser("geometry", help="geometry inspection")
    gsub = sp.add_subparsers(dest="geometry_command", metavar="action")
    gsub.required = True
    gp = gsub.add_parser("dump", help="write permittivity, holes, and profile")
    add_common(gp, workers=False, dim=True)
    gp.set_defaults(func=cmd_geometry_dump)

    return p


def _apply_overrides(cfg, args):
    if getattr(args, "out", None) is not None:
        cfg.out_dir = Path(args.out)
    if getattr(args, "resolution", None) is not None:
        if args.resolution < 4:
            raise ConfigError(f"resolution must be >= 4, got {args.resolution}")
        cfg.resolution = args.resolution
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {args.workers}")
        cfg.workers = args.workers
    return cfg


def _write_raw(arr: np.ndarray, directory: Path, name: str,
               meta: dict) -> None:
    np.ascontiguousarray(arr, dtype="<f8").tofile(directory / f"{name}.f64")
    meta = dict(meta, dims=list(arr.shape), dtype="<f8")
    with open(directory / f"{name}.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands

def cmd_bands(args) -> int:
    from .bands import compute_waveguide_bands

    cfg = _apply_overrides(load_single_run(args.config), args)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    n_center = cfg.profile.centre_index(cfg.lattice)
    dn = outer_delta_n(cfg.profile)
    k = np.linspace(0.3, 0.5, 21)

    curves = {}
    for tag, n_bg in (("center", n_center), ("cladding", n_center - dn)):
        bs = compute_waveguide_bands(cfg.lattice, n_bg, k_points=k,
                                     workers=cfg.workers)
        curves[tag] = bs
        path = out / f"bands_{tag}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"band_{i}" for i in range(bs.bands.shape[1])])
            for ki, row in zip(k, bs.bands):
                w.writerow([repr(float(ki))] + [repr(float(f)) for f in row])
        print(f"wrote {path}")

    lo, hi = gap_edges(cfg.lattice, n_center, dn)
    with open(out / "mode_gap.json", "w", encoding="utf-8") as fh:
        json.dump({"delta_n": dn, "n_center": n_center,
                   "gap_lower": lo, "gap_upper": hi,
                   "version": __version__}, fh, indent=1, sort_keys=True)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "phckit"
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    for tag, style in (("center", "-"), ("cladding", "--")):
        bs = curves[tag]
        for b in range(bs.bands.shape[1]):
            ax.plot(k, bs.bands[:, b], style, color="C0" if tag == "center"
                    else "C3", lw=1,
                    label=tag if b == 0 else None)
    ax.axhspan(lo, hi, color="0.85", zorder=0)
    ax.set_xlabel("k (2$\\pi$/a)")
    ax.set_ylabel("frequency (a/$\\lambda$)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "bands.svg", format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {out / 'bands.svg'}  gap=[{lo:.5f}, {hi:.5f}]")
    return 0


def cmd_simulate(args) -> int:
    from .fdtd import (ProbeSpec, SimulationDomain, SourceSpec, run,
                       save_probe_csv, save_region_csv, save_snapshot)

    cfg = _apply_overrides(load_single_run(args.config), args)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    dim = getattr(args, "dim", 2)

    n_center = cfg.profile.centre_index(cfg.lattice)
    dn = outer_delta_n(cfg.profile)
    f_lo, f_hi = gap_edges(cfg.lattice, n_center, dn)
    f0 = 0.5 * (f_lo + f_hi)
    bw = max(0.008, 3.0 * (f_hi - f_lo))

    if dim == 3:
        # low-resolution smoke run: short, no region monitors
        grid = rasterize(cfg.lattice, cfg.profile,
                         resolution=min(cfg.resolution, 10),
                         dimensionality="3d")
        total = min(cfg.record_steps, 2048)
        domain = SimulationDomain(grid=grid, courant=min(cfg.courant, 0.5),
                                  pml_cells=cfg.pml_cells, total_steps=total)
        src = SourceSpec(position=(SOURCE_POS[0], 0.0, SOURCE_POS[1]),
                         component="Hy", center_freq=f0, bandwidth=bw)
        probes = [ProbeSpec(position=(p[0], 0.0, p[1]), component="Hy")
                  for p in PROBE_POS]
        result = run(domain, [src], probes, workers=cfg.workers)
        masks = None
    else:
        grid = rasterize(cfg.lattice, cfg.profile,
                         resolution=cfg.resolution, dimensionality="2d")
        src = SourceSpec(position=SOURCE_POS, component="Hy",
                         center_freq=f0, bandwidth=bw)
        dt = cfg.courant * grid.dx / np.sqrt(2.0)
        total = int(np.ceil(src.t_off / dt)) + cfg.record_steps
        pml = cfg.pml_cells
        interior = np.zeros(grid.eps.shape, dtype=bool)
        interior[pml + 2:-pml - 2, pml + 2:-pml - 2] = True
        dmask = damaged_region_mask(cfg.lattice, cfg.profile, grid)
        xc = grid.cell_centers(0)
        cavity = interior & (np.abs(xc)[:, None]
                             < 0.5 * cfg.profile.cavity_length(cfg.lattice))
        masks = {"interior": interior, "damaged": dmask & interior,
                 "cavity": cavity}
        period_steps = max(1, int(round(1.0 / (f0 * dt))))
        window = (total - int(np.ceil(1.2 * period_steps)), total)
        domain = SimulationDomain(grid=grid, courant=cfg.courant,
                                  pml_cells=pml, total_steps=total,
                                  snapshot_every=4)
        probes = [ProbeSpec(position=p, component="Hy") for p in PROBE_POS]
        result = run(domain, [src], probes, region_masks=masks,
                     energy_every=8, snapshot_window=window,
                     workers=cfg.workers)

    for i, rec in enumerate(result.probes):
        path = out / f"probe_{i}_{rec.component}.csv"
        save_probe_csv(rec, path)
    if result.region_energy:
        save_region_csv(result, out / "regions.csv")
    snap_dir = out / "snapshots"
    for snap in result.snapshots:
        save_snapshot(snap, snap_dir)

    _write_raw(grid.eps, out, "eps",
               {"component": "eps", "origin": list(grid.origin),
                "resolution": grid.resolution})
    if masks is not None:
        _write_raw(masks["damaged"].astype(float), out, "damaged_mask",
                   {"component": "damaged_mask", "origin": list(grid.origin),
                    "resolution": grid.resolution})

    meta = {
        "version": __version__,
        "dim": dim,
        "dt": result.dt,
        "total_steps": result.total_steps,
        "source_off_step": result.source_off_step,
        "record_steps": cfg.record_steps,
        "resolution": grid.resolution,
        "courant": cfg.courant,
        "pml_cells": cfg.pml_cells,
        "gap_lower": f_lo,
        "gap_upper": f_hi,
        "center_freq": f0,
        "bandwidth": bw,
        "n_center": n_center,
        "outer_delta_n": dn,
        "a_nm": cfg.lattice.a_nm,
        "origin": list(grid.origin),
        "probes": [list(p) for p in PROBE_POS],
        "n_snapshots": len(result.snapshots),
    }
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    print(f"wrote run artifacts to {out} ({result.total_steps} steps, "
          f"dt={result.dt:.5f})")
    return 0


def _load_raw(out: Path, name: str) -> np.ndarray:
    with open(out / f"{name}.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    return np.fromfile(out / f"{name}.f64", dtype="<f8").reshape(meta["dims"])


def cmd_analyze(args) -> int:
    from .fdtd import load_snapshot_component
    from .resonance import ResonanceError, harmonic_inversion, mode_volume

    out = Path(args.out)
    meta_path = out / "run.json"
    if not meta_path.exists():
        raise ConfigError(f"no run.json in {out}; run simulate first")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)

    dt = meta["dt"]
    n_off = meta["source_off_step"]
    w = meta["gap_upper"] - meta["gap_lower"]
    window = (meta["gap_lower"] - 2.0 * w, meta["gap_upper"] + w)

    mode = None
    method = "harmonic-inversion"
    for path in sorted(out.glob("probe_*.csv")):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        series = np.array([float(r["value"]) for r in rows])
        tail = series[n_off:]
        if tail.size < 1024:
            continue
        modes = harmonic_inversion(tail, dt, window)
        if modes:
            mode = modes[0]
            break
    if mode is None:
        raise ResonanceError("no resonance found in any probe series")

    freq, q, residual = mode.freq, mode.q, mode.residual

    v_norm = float("nan")
    damaged_fraction = float("nan")
    if meta["dim"] == 2 and meta.get("n_snapshots"):
        eps = _load_raw(out, "eps")
        grid = DielectricGrid(resolution=meta["resolution"],
                              dims=tuple(eps.shape), eps=eps,
                              origin=tuple(meta["origin"]))
        snaps = sorted((out / "snapshots").glob("*_Ex.f64"))
        u = np.zeros_like(eps)
        for pex in snaps:
            ex, _ = load_snapshot_component(pex)
            ez, _ = load_snapshot_component(
                Path(str(pex).replace("_Ex.f64", "_Ez.f64")))
            u += eps * (ex ** 2 + ez ** 2)
        if snaps:
            u /= len(snaps)
            pml = meta["pml_cells"]
            mv = mode_volume(grid, u, freq, n_ref=meta["n_center"],
                             pml_cells=pml)
            v_norm = mv.v_norm
            dmask_path = out / "damaged_mask.f64"
            if dmask_path.exists():
                from .resonance import energy_fraction_in_region
                dmask = _load_raw(out, "damaged_mask") > 0.5
                interior = np.zeros(eps.shape, dtype=bool)
                interior[pml + 2:-pml - 2, pml + 2:-pml - 2] = True
                ui = np.where(interior, u, 0.0)
                damaged_fraction = energy_fraction_in_region(ui, dmask)

    path = out / "analysis.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wtr = csv.writer(fh)
        wtr.writerow(["run_id", "freq_norm", "Q", "V_norm", "dim",
                      "damaged_fraction", "method", "residual"])
        wtr.writerow([out.name, repr(float(freq)), repr(float(q)),
                      repr(float(v_norm)), meta["dim"],
                      repr(float(damaged_fraction)), method,
                      repr(float(residual))])
    print(f"wrote {path}: f={freq:.6f} Q={q:.4g} V={v_norm:.3g}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    outcome = run_sweep(cfg)
    n_err = sum(bool(r.error) for r in outcome.rows)
    print(f"wrote {outcome.csv_path} ({len(outcome.rows)} rows, "
          f"{n_err} failed), {outcome.svg_path}")
    return 0


def cmd_replicate(args) -> int:
    out = args.out if args.out is not None else Path("replicate_out")
    resolution = args.resolution if args.resolution is not None else 16
    workers = args.workers if args.workers is not None else 1
    report = run_replicate(out, resolution=resolution, workers=workers,
                           report_mode=args.mode)
    print(f"wrote {report}")
    return 0


def cmd_selftest(args) -> int:
    from .oracles import format_selftest, selftest

    results = selftest(include_fdtd=not args.skip_fdtd)
    print(format_selftest(results))
    return 0 if all(r.passed for r in results) else 2


def cmd_geometry_dump(args) -> int:
    cfg = load_single_run(args.config)
    if getattr(args, "out", None) is not None:
        cfg.out_dir = Path(args.out)
    if getattr(args, "resolution", None) is not None:
        cfg.resolution = args.resolution
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    dim = getattr(args, "dim", 2)

    grid = rasterize(cfg.lattice, cfg.profile, resolution=cfg.resolution,
                     dimensionality="3d" if dim == 3 else "2d")
    _write_raw(grid.eps, out, "eps",
               {"component": "eps", "origin": list(grid.origin),
                "resolution": grid.resolution})

    holes = build_hole_centers(cfg.lattice)
    with open(out / "holes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "z", "radius"])
        for x, z in holes:
            w.writerow([repr(float(x)), repr(float(z)),
                        repr(float(cfg.lattice.R))])

    xs = np.linspace(-0.5 * cfg.lattice.periods_x,
                     0.5 * cfg.lattice.periods_x, 512)
    ns = index_at(cfg.lattice, cfg.profile, xs)
    with open(out / "index_profile.csv", "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "n_background"])
        for x, n in zip(xs, ns):
            w.writerow([repr(float(x)), repr(float(n))])

    kind = "gradual" if isinstance(cfg.profile, GradualProfile) else "step"
    with open(out / "geometry.json", "w", encoding="utf-8") as fh:
        json.dump({"version": __version__, "dim": dim,
                   "resolution": cfg.resolution, "profile_kind": kind,
                   "eps_dims": list(grid.eps.shape),
                   "n_holes": int(holes.shape[0])}, fh, indent=1,
                  sort_keys=True)
    print(f"wrote geometry artifacts to {out} (eps {grid.eps.shape}, "
          f"{holes.shape[0]} holes)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except _numerical_errors() as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
