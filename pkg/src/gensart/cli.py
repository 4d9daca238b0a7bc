"""Command line interface: ``gensart simulate | reconstruct | compare | oracle``.

Exit codes: 0 success, 2 configuration or input error, 3 solver failure.
``GENSART_THREADS`` caps the number of numba threads.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import fidelity as fid
from .baselines import fbp_reconstruct, tikhonov_huber_pd, tikhonov_l2
from .config import ExperimentConfig, load_config
from .errors import ConfigurationError, GensartError, IterationError
from .geometry import VolumeGrid, divergent_geometries, parallel_geometries, unit_projections
from .io import central_slice, read_raw, write_pgm, write_raw
from .kaczmarz import IterationPlan, run, write_metrics_csv
from .phantom import (NoiseSpec, PhantomSpec, make_phantom, masked_correlation, psnr,
                      relative_error, simulate_data)
from .schemes import PenaltySpec, ProjectionView

log = logging.getLogger("gensart")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


# --------------------------------------------------------------------------
# Building objects from a config
# --------------------------------------------------------------------------

def build_grid(cfg: ExperimentConfig) -> VolumeGrid:
    g = cfg["geometry"]
    omega = g["omega"]
    if omega == "cylinder" and len(g["shape"]) == 2:
        omega = "ball"
    return VolumeGrid(tuple(g["shape"]), g["voxel_size"], omega)


def build_geometries(cfg: ExperimentConfig, grid: VolumeGrid):
    g = cfg["geometry"]
    angles = cfg.angles()
    if g["mode"] == "parallel":
        return parallel_geometries(grid, angles, g["n_det"], g["pitch"])
    return divergent_geometries(grid, angles, g["source_distance"], g["n_det"], g["pitch"])


def build_xpct_model(cfg, geoms):
    from .xpct import FresnelModel
    m = cfg["model"]
    return FresnelModel(m["fresnel_number"], geoms[0].det_shape, pad=m["pad"])


def build_poly_model(cfg):
    from .polyct import MaterialDecomposition, PolyModel, SpectrumModel
    m = cfg["model"]
    if m["spectrum"] == "flat":
        sp = SpectrumModel.flat(m["e_min_kev"], m["e_max_kev"], m["n_energies"], m["e0_kev"])
    else:
        sp = SpectrumModel.from_csv(m["spectrum"], e0=m["e0_kev"])
    mats = MaterialDecomposition() if m["materials"] == "default" else \
        MaterialDecomposition.from_csv(m["materials"])
    return PolyModel(sp, mats)


def _geometry_record(cfg):
    # JSON round trip so records read back from a sidecar compare equal
    return json.loads(json.dumps(cfg["geometry"]))


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out: Path) -> int:
    grid = build_grid(cfg)
    geoms = build_geometries(cfg, grid)
    ph = cfg["phantom"]
    spec = PhantomSpec(ph["kind"], ph["count"], ph["seed"], (ph["value_min"], ph["value_max"]))
    f = make_phantom(spec, grid)
    nz = cfg["noise"]
    noise = NoiseSpec(nz["gaussian_rel"], nz["dead_pixel_frac"], nz["dead_value"],
                      nz["poisson_exposure"], nz["seed"])
    m = cfg["model"]
    kw = {}
    if m["formation"] == "xpct":
        kw["xpct_model"] = build_xpct_model(cfg, geoms)
    elif m["formation"] == "polyct":
        kw["polyct_model"] = build_poly_model(cfg)
    sim = simulate_data(f, grid, geoms, m["formation"], noise, intensity=m["intensity"], **kw)
    sino = sim.stacked()
    geo = _geometry_record(cfg)
    write_raw(out / "phantom.raw", f, kind="phantom", voxel_size=grid.voxel_size,
              omega=grid.omega, geometry=geo)
    write_raw(out / "sino.raw", sino, kind="sinogram", voxel_size=grid.voxel_size,
              geometry=geo, formation=m["formation"], det_shape=list(geoms[0].det_shape),
              angles=[float(g.angle) for g in geoms], dead_pixels=sim.dead_pixels.tolist())
    meta = {
        "phantom_seed": ph["seed"], "noise_seed": nz["seed"],
        "phantom_norm": float(np.linalg.norm(f)), "data_norm": float(np.linalg.norm(sino)),
        "clean_norm": float(np.sqrt(sum(np.sum(c * c) for c in sim.clean))),
        "supersample": sim.supersample, "n_dead": int(sim.dead_pixels.size),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if cfg["output"]["images"]:
        write_pgm(out / "phantom.pgm", central_slice(f))
    if cfg["output"]["figures"]:
        from .report import plot_slice
        plot_slice(f, out / "phantom.png", "phantom")
    print(f"simulate: phantom seed={ph['seed']} noise seed={nz['seed']} "
          f"|f|={meta['phantom_norm']:.6g} |g|={meta['data_norm']:.6g} "
          f"views={len(geoms)} dead={meta['n_dead']} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# reconstruct
# --------------------------------------------------------------------------

def _check_sinogram(cfg, head, sino, geoms):
    want = (len(geoms),) + tuple(geoms[0].det_shape)
    if tuple(sino.shape) != want:
        raise ConfigurationError(f"sinogram shape {tuple(sino.shape)} does not match the "
                                 f"configured geometry {want}")
    rec = head.get("geometry")
    if rec is not None:
        mine = _geometry_record(cfg)
        diff = sorted(k for k in set(rec) | set(mine) if rec.get(k) != mine.get(k))
        if diff:
            raise ConfigurationError("sinogram geometry differs from config in "
                                     + ", ".join(f"geometry.{k}" for k in diff))
    form = head.get("formation")
    if form is not None and form != cfg["model"]["formation"]:
        raise ConfigurationError(f"sinogram was simulated with model.formation={form}")


def _prepare_data(cfg, sino):
    """Turn measured intensities into the quantity the fidelity expects."""
    m, fd = cfg["model"], cfg["fidelity"]
    mode = fd["preprocess"]
    if mode == "auto":
        mode = "log" if (m["formation"] == "beer_lambert"
                         and fd["kind"] != "poisson_bright") else "none"
    if mode == "none":
        return sino
    expo = cfg["noise"]["poisson_exposure"] or 1.0
    ref = m["intensity"] * expo
    return -np.log(np.maximum(sino, 1e-12 * ref) / ref)


def _fidelity(cfg, data, nu):
    fd = cfg["fidelity"]
    kw = dict(sigma=fd["sigma"], nu=nu, exposure=fd["exposure"], omega=fd["omega"])
    if fd["kind"].startswith("poisson"):
        kw["intensity"] = cfg["model"]["intensity"]
        if cfg["noise"]["poisson_exposure"] is not None:
            kw["exposure"] = cfg["noise"]["poisson_exposure"]
    return fid.FidelitySpec(fd["kind"], data, **kw)


def _plan(cfg, n_views, penalty):
    pl = cfg["plan"]
    box = None
    if pl["box_min"] is not None or pl["box_max"] is not None:
        box = (pl["box_min"], pl["box_max"])
    return IterationPlan(n_views, penalty, pl["cycle"], pl["ordering"], pl["n_cycles"],
                         box=box, k_stop=pl["k_stop"])


def _newton_rows(cfg, n_views):
    """Step sequence for the Newton-Kaczmarz pipelines (same rules as ``IterationPlan``)."""
    pen = PenaltySpec("l2", cfg["penalty"]["alpha"])
    return _plan(cfg, n_views, pen).sequence()


def _run_gensart(cfg, grid, geoms, sino, f0):
    data = _prepare_data(cfg, sino)
    nu = cfg["fidelity"]["nu"]
    if cfg["fidelity"]["kind"] in ("huber", "student_t") and nu is None:
        nu = fid.default_nu(data)
    views = [ProjectionView(grid, g, _fidelity(cfg, d, nu)) for g, d in zip(geoms, data)]
    pn = cfg["penalty"]
    penalty = PenaltySpec(pn["family"], pn["alpha"], gamma=pn["gamma"], q=pn["q"])
    res = run(_plan(cfg, len(views), penalty), views, f0)
    return res.f, res.metrics


def _run_xpct(cfg, grid, geoms, sino, f0):
    from .xpct import newton_kaczmarz_step
    model = build_xpct_model(cfg, geoms)
    units = [unit_projections(grid, g) for g in geoms]
    pn, pl = cfg["penalty"], cfg["plan"]
    gamma = pn["gamma"] if pn["family"] == "w12" else 0.0
    f = np.array(f0, dtype=float)
    rows = []
    for k, j in enumerate(_newton_rows(cfg, len(geoms))):
        try:
            st = newton_kaczmarz_step(f, grid, geoms[j], units[j], sino[j], model, pn["alpha"],
                                      gamma, nonneg=pl["nonneg"])
        except IterationError as exc:
            exc.iteration = k
            raise
        upd = float(np.linalg.norm(st.f_new - f)) * grid.cell_volume ** 0.5
        rows.append({"iter": k, "view": j, "residual": st.residual_norm,
                     "objective": st.residual_norm ** 2, "update_norm": upd})
        f = st.f_new
    return f, rows


def _run_polyct(cfg, grid, geoms, sino, f0):
    from .polyct import polyct_newton_step
    model = build_poly_model(cfg)
    alpha = cfg["penalty"]["alpha"]
    f = np.maximum(np.array(f0, dtype=float), 0.0)
    rows = []
    for k, j in enumerate(_newton_rows(cfg, len(geoms))):
        try:
            st = polyct_newton_step(f, grid, geoms[j], sino[j], model.spectrum,
                                    model.materials, alpha)
        except IterationError as exc:
            exc.iteration = k
            raise
        f_new = np.maximum(st.f_new, 0.0)
        res = float(np.linalg.norm(st.residual))
        rows.append({"iter": k, "view": j, "residual": res, "objective": res ** 2,
                     "update_norm": float(np.linalg.norm(f_new - f)) * grid.cell_volume ** 0.5})
        f = f_new
    return f, rows


def _run_tikhonov(cfg, grid, geoms, sino, f0):
    pl = cfg["plan"]
    data = _prepare_data(cfg, sino)
    if pl["tikhonov_fidelity"] == "l2":
        return tikhonov_l2(data, grid, geoms, pl["alpha_tik"], maxiter=pl["maxiter"]), []
    nu = cfg["fidelity"]["nu"] or fid.default_nu(data)
    res = tikhonov_huber_pd(data, grid, geoms, pl["alpha_tik"], nu, gap_tol=pl["gap_tol"],
                            maxiter=pl["maxiter"])
    rows = [{"iter": k, "view": -1, "residual": float("nan"), "objective": gap,
             "update_norm": float("nan")} for k, gap in enumerate(res.history)]
    return res.f, rows


def cmd_reconstruct(cfg: ExperimentConfig, sino_path, out: Path) -> int:
    grid = build_grid(cfg)
    geoms = build_geometries(cfg, grid)
    sino, head = read_raw(sino_path)
    sino = sino.astype(float)
    _check_sinogram(cfg, head, sino, geoms)
    pl = cfg["plan"]
    f0 = grid.zeros()
    if pl["initial"]:
        f0, _ = read_raw(pl["initial"])
        if f0.shape != grid.shape:
            raise ConfigurationError(f"plan.initial has shape {f0.shape}, grid is {grid.shape}")
        f0 = f0.astype(float)
    pipe = pl["pipeline"]
    if pipe == "fbp":
        f, rows = fbp_reconstruct(_prepare_data(cfg, sino), grid, geoms, pl["filter"]), []
    else:
        runner = {"gensart": _run_gensart, "xpct": _run_xpct, "polyct": _run_polyct,
                  "tikhonov": _run_tikhonov}[pipe]
        f, rows = runner(cfg, grid, geoms, sino, f0)
    meta = {"pipeline": pipe, "geometry": _geometry_record(cfg), "omega": grid.omega}
    if cfg["output"]["images"]:
        window = write_pgm(out / "recon.pgm", central_slice(f))
        meta["window_min"], meta["window_max"] = window
    write_raw(out / "recon.raw", f, kind="volume", voxel_size=grid.voxel_size, **meta)
    write_metrics_csv(rows, out / "metrics.csv")
    if cfg["output"]["figures"]:
        from .report import plot_metrics, plot_slice
        plot_slice(f, out / "recon.png", f"{pipe} reconstruction")
        plot_metrics(rows, out / "metrics.png", f"{pipe}: per-step metrics")
    print(f"reconstruct: pipeline={pipe} steps={len(rows)} |f|={np.linalg.norm(f):.6g} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------

def _mask_from_header(head, shape):
    omega = head.get("omega")
    if omega is None:
        return np.ones(shape, dtype=bool)
    return VolumeGrid(shape, head.get("voxel_size", 1.0), omega).mask


def compare_metrics(f, truth, mask):
    return {"psnr": psnr(f, truth, mask), "rel_l2": relative_error(f, truth, mask),
            "correlation": masked_correlation(f, truth, mask)}


def _fmt(v):
    return "inf" if math.isinf(v) else f"{v:.6g}"


def cmd_compare(paths, truth_path, out_csv: Path, figures=True) -> int:
    truth, th = read_raw(truth_path)
    truth = truth.astype(float)
    mask = _mask_from_header(th, truth.shape)
    vols, table = {}, {}
    stems = [Path(p).stem for p in paths]
    names = stems if len(set(stems)) == len(stems) else [str(p) for p in paths]
    for p, name in zip(paths, names):
        v, _ = read_raw(p)
        if v.shape != truth.shape:
            raise ConfigurationError(f"{p} has shape {v.shape}, truth has {truth.shape}")
        vols[name] = v.astype(float)
        table[name] = compare_metrics(vols[name], truth, mask)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["volume", "psnr", "rel_l2", "correlation"])
        for name, m in table.items():
            w.writerow([name, _fmt(m["psnr"]), _fmt(m["rel_l2"]), _fmt(m["correlation"])])
    print(f"{'volume':<24} {'psnr':>10} {'rel_l2':>10} {'corr':>10}")
    for name, m in table.items():
        print(f"{name:<24} {_fmt(m['psnr']):>10} {_fmt(m['rel_l2']):>10} {_fmt(m['correlation']):>10}")
    if figures:
        from .report import plot_comparison
        plot_comparison(vols, truth, table, out_csv.with_suffix(".png"))
    return EXIT_OK


# --------------------------------------------------------------------------
# oracle
# --------------------------------------------------------------------------

def cmd_oracle(n_cases, n_systems, seed) -> int:
    from .oracles import cycle_suite, prox_suite
    ok = True
    for kind, (fails, dx, df) in prox_suite(n_cases, seed).items():
        ok &= fails == 0
        print(f"prox {kind:<15} cases={n_cases} fails={fails} max|dx|={dx:.2e} max df={df:.2e}")
    gaps = cycle_suite(n_systems, seed)
    ok &= bool(np.all(gaps <= 1e-8))
    print(f"symmetric cycle systems={n_systems} max gap={gaps.max():.2e}")
    print("oracle: PASS" if ok else "oracle: FAIL")
    return EXIT_OK if ok else EXIT_SOLVER


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _apply_threads():
    val = os.environ.get("GENSART_THREADS")
    if not val:
        return
    try:
        n = int(val)
    except ValueError:
        raise ConfigurationError(f"GENSART_THREADS must be an integer, got {val!r}") from None
    if n < 1:
        raise ConfigurationError("GENSART_THREADS must be positive")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    p = argparse.ArgumentParser(prog="gensart", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="generate a phantom and its data")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (overrides output.dir)")
    r = sub.add_parser("reconstruct", parents=[common], help="reconstruct a sinogram")
    r.add_argument("config")
    r.add_argument("sinogram")
    r.add_argument("--out", help="output directory (overrides output.dir)")
    c = sub.add_parser("compare", parents=[common], help="image metrics against a ground truth")
    c.add_argument("volumes", nargs="+", help="volumes followed by the ground truth")
    c.add_argument("--out", default="compare.csv", help="CSV path; a PNG is written beside it")
    c.add_argument("--no-figures", action="store_true")
    o = sub.add_parser("oracle", parents=[common], help="run the prox and symmetric-cycle oracle suites")
    o.add_argument("--cases", type=int, default=200)
    o.add_argument("--systems", type=int, default=50)
    o.add_argument("--seed", type=int, default=0)
    return p


def _load(path):
    cfg = load_config(path)
    log.info("resolved configuration:\n%s", cfg.dump())
    return cfg


def _outdir(cfg, override):
    out = Path(override or cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.ini").write_text(cfg.dump())
    return out


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads()
        if args.command == "simulate":
            cfg = _load(args.config)
            return cmd_simulate(cfg, _outdir(cfg, args.out))
        if args.command == "reconstruct":
            cfg = _load(args.config)
            return cmd_reconstruct(cfg, args.sinogram, _outdir(cfg, args.out))
        if args.command == "compare":
            if len(args.volumes) < 2:
                raise ConfigurationError("compare needs at least one volume and a ground truth")
            return cmd_compare(args.volumes[:-1], args.volumes[-1], Path(args.out),
                               not args.no_figures)
        return cmd_oracle(args.cases, args.systems, args.seed)
    except ConfigurationError as exc:
        print(f"gensart: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GensartError as exc:
        print(f"gensart: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
