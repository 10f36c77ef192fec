"""Command-line entry point: phantom, segment, enhance, metrics, masscons, sweep.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .fourier import save_checkpoint, scale_sigma
from .metrics import FlowPlane, evaluate, mass_conservation_bias, mean_plane_flow
from .phantom import CorruptionSpec, PhantomSpec, analytic_flow_rate, corrupt, make_phantom, peak_speed, steady_field
from .runner import default_workers, train_all
from .segmentation import EmptyMaskError, build_geometry, compute_pcmra, dilate_mask, read_f4m, threshold_mask, write_f4m
from .trainer import NumericalError, TrainConfig, reconstruct, write_history
from .volume import FlowDataset, FormatError, read_f4d, write_f4d

log = logging.getLogger("divflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _triple(text: str, cast=float, name="value"):
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 3
    try:
        vals = tuple(cast(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{name} must be 1 or 3 comma-separated numbers, got {text!r}")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"{name} must be 1 or 3 comma-separated numbers, got {text!r}")
    return vals


def _dims(text):
    vals = _triple(text, int, "--dims")
    if min(vals) < 1:
        raise argparse.ArgumentTypeError(f"--dims must be positive, got {text!r}")
    return vals


def _spacing(text):
    vals = _triple(text, float, "--spacing")
    if min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"--spacing must be positive, got {text!r}")
    return vals


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_mask(path, dataset: FlowDataset, flag="--mask"):
    mask, _ = read_f4m(path)
    if mask.shape != dataset.dims:
        raise DataError(f"{flag} dims {mask.shape} do not match dataset dims {dataset.dims}")
    return mask


# ---------------------------------------------------------------- phantom


def cmd_phantom(args) -> int:
    spec = PhantomSpec(
        kind=args.kind,
        dims=args.dims,
        spacing=args.spacing,
        radius=args.radius,
        v_max=args.vmax,
        omega=args.omega,
        nt=args.nt,
        waveform=args.waveform,
        background=args.background,
    )
    try:
        spec = spec.resolved()
    except ValueError as exc:
        raise UsageError(str(exc))
    clean = make_phantom(spec)
    peak = peak_speed(spec)
    if args.venc_cms is not None:
        venc = args.venc_cms / 100.0
    else:
        venc = args.venc if args.venc is not None else 2.0 * peak
    if venc <= 0 or args.noise < 0:
        raise UsageError("--venc must be > 0 and --noise >= 0")
    data = corrupt(clean, CorruptionSpec(venc, args.noise, args.seed))
    out = Path(args.out)
    write_f4d(data, out)
    _, lumen = steady_field(spec)
    sidecar = {
        "spec": spec.to_dict(),
        "corruption": {
            "venc_ms": venc,
            "noise_pct": args.noise,
            "seed": args.seed,
            "noise_convention": "independent real/imaginary Gaussian, std = noise_pct/100 * max(magnitude)",
        },
        "peak_velocity_ms": peak,
        "flow_rate_lmin": [float(q) for q in analytic_flow_rate(spec)],
        "lumen_voxels": int(lumen.sum()),
        "tool_version": __version__,
    }
    _write_json(sidecar, out.with_suffix(".json"))
    if args.lumen_mask:
        write_f4m(lumen, spec.spacing, args.lumen_mask)
    print(f"wrote {out} ({spec.kind}, dims {spec.dims}, venc {venc:.4g} m/s, noise {args.noise}%)")
    return EXIT_OK


# ---------------------------------------------------------------- segment


def cmd_segment(args) -> int:
    data = read_f4d(args.input)
    pcmra = compute_pcmra(data)
    mask = threshold_mask(pcmra, args.frac, args.keep)
    base = int(mask.sum())
    if args.dilate != "none":
        mask = dilate_mask(mask, int(args.dilate))
    write_f4m(mask, data.spacing, args.out)
    print(f"wrote {args.out}: {base} lumen voxels, {int(mask.sum())} after dilation={args.dilate}")
    return EXIT_OK


# ---------------------------------------------------------------- enhance


def _config_from(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    return cfg.replace(
        epochs=args.epochs,
        sigma=args.sigma,
        m=args.m,
        width=args.width,
        depth=args.depth,
        seed=args.seed,
        precision=args.precision,
        lr0=args.lr0,
        batch_cap=args.batch_cap,
    )


def _add_config_flags(p):
    p.add_argument("--config", help="training config JSON (flags override)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--m", type=int, help="Fourier embedding rows")
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--lr0", type=float)
    p.add_argument("--batch-cap", type=int)


def cmd_enhance(args) -> int:
    stage = {}
    t0 = time.perf_counter()
    data = read_f4d(args.input)
    mask = _load_mask(args.mask, data)
    eval_mask = _load_mask(args.eval_mask, data, "--eval-mask") if args.eval_mask else mask
    try:
        config = _config_from(args)
    except ValueError as exc:
        raise UsageError(str(exc))
    geometry = build_geometry(mask, data.spacing)
    stage["load_s"] = time.perf_counter() - t0

    sigma_info = None
    if args.sigma_from:
        sim = json.loads(Path(args.sigma_from).read_text())
        try:
            sigma = scale_sigma(sim["spacing_m"], data.spacing, sim["extent_m"], geometry.extent, sim["sigma"])
        except KeyError as exc:
            raise DataError(f"--sigma-from file lacks field {exc}")
        sigma_info = {"source": str(args.sigma_from), "sigma_sim": sim["sigma"], "tau": sigma / sim["sigma"], "sigma": sigma}
        config = config.replace(sigma=sigma)

    run_dir = Path(args.run_dir) if args.run_dir else Path(args.out).with_suffix(".run")
    run_dir.mkdir(parents=True, exist_ok=True)
    t1 = time.perf_counter()
    results = train_all(data, geometry, config, workers=args.workers or default_workers())
    stage["train_s"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    nets = [r[0] for r in results]
    checkpoints, histories = [], []
    for t, (net, history, _) in enumerate(results):
        ck = run_dir / f"tf{t:03d}.f4n"
        save_checkpoint(net, ck)
        hp = run_dir / f"loss_tf{t:03d}.csv"
        write_history(history, hp)
        checkpoints.append(str(ck))
        histories.append(str(hp))
    enhanced = reconstruct(nets, geometry, eval_mask, data)
    write_f4d(enhanced, args.out)
    stage["reconstruct_s"] = time.perf_counter() - t2

    figures = []
    if not args.no_figures:
        figures.append(str(plotting.loss_curves({t: r[1] for t, r in enumerate(results)}, run_dir / "loss.png")))
        fields = {"input": data.velocity, "enhanced": enhanced.velocity}
        if data.reference_velocity is not None:
            fields = {"reference": data.reference_velocity, **fields}
        figures.append(str(plotting.speed_slices(fields, eval_mask, run_dir / "slices.png")))

    config_path = run_dir / "config.json"
    _write_json(config.to_dict(), config_path)
    manifest = {
        "tool_version": __version__,
        "inputs": {"data": str(args.input), "mask": str(args.mask), "eval_mask": str(args.eval_mask or args.mask)},
        "input_sha256": {"data": _sha256(args.input), "mask": _sha256(args.mask)},
        "config": str(config_path),
        "config_digest": config.digest(),
        "seed": config.seed,
        "sigma_scaling": sigma_info,
        "output": str(args.out),
        "checkpoints": checkpoints,
        "loss_histories": histories,
        "figures": figures,
        "timing_s": {**stage, "per_timeframe": [r[2] for r in results]},
        "workers": args.workers or default_workers(),
    }
    missing = [p for p in [args.out, *checkpoints, *histories, *figures, config_path] if not Path(p).exists()]
    if missing:
        raise DataError(f"artifacts missing at manifest time: {missing}")
    _write_json(manifest, run_dir / "manifest.json")
    print(f"wrote {args.out}; checkpoints and manifest in {run_dir}")
    for t, r in enumerate(results):
        print(f"  t={t}: final loss {r[1][-1]['total']:.4g}  ({r[2]:.1f} s)")
    return EXIT_OK


# ---------------------------------------------------------------- metrics


REPORT_KEYS = ("vel_nrmse", "de", "div_rms", "pvnr_db", "wrapped_pct")


def _reference_field(ds: FlowDataset, which: str = "auto") -> np.ndarray:
    if which == "velocity":
        return ds.velocity
    if which == "reference" and ds.reference_velocity is None:
        raise DataError("reference file has no reference section")
    return ds.reference_velocity if ds.reference_velocity is not None else ds.velocity


def _fmt(v, spec=".4g"):
    return "absent" if v is None else format(v, spec)


def cmd_metrics(args) -> int:
    ref_ds = read_f4d(args.ref)
    pred_ds = read_f4d(args.pred)
    if ref_ds.dims != pred_ds.dims or ref_ds.nt != pred_ds.nt:
        raise DataError("reference and prediction shapes differ")
    mask = _load_mask(args.mask, pred_ds)
    venc = args.venc if args.venc is not None else pred_ds.venc
    report = evaluate(_reference_field(ref_ds, args.ref_field), pred_ds.velocity, mask, pred_ds.spacing, venc, args.eps)
    payload = report.to_dict()
    payload["venc_ms"] = venc
    print(f"{'metric':<14}{'value':>12}")
    for key, unit in zip(REPORT_KEYS, ("", "", "1/s", "dB", "%")):
        print(f"{key:<14}{_fmt(payload[key]):>12} {unit}")
    print(f"{'voxels':<14}{report.counts['mask_voxels']:>12}")
    if args.json:
        _write_json(payload, args.json)
    if args.csv:
        row = report.flat_row()
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    if args.figure:
        plotting.metrics_bars(payload, args.figure)
    return EXIT_OK


# ---------------------------------------------------------------- masscons


def cmd_masscons(args) -> int:
    if not args.pair:
        raise UsageError("at least one --pair PLANE1 PLANE2 is required")
    try:
        pairs = [(FlowPlane.parse(a), FlowPlane.parse(b)) for a, b in args.pair]
    except ValueError as exc:
        raise UsageError(str(exc))
    data = read_f4d(args.input)
    if args.use_reference:
        if data.reference_velocity is None:
            raise DataError("--use-reference given but the file has no reference section")
        data = data.replace(velocity=data.reference_velocity)
    mask = _load_mask(args.mask, data)
    table = []
    for p1, p2 in pairs:
        q1 = mean_plane_flow(data, p1, mask)
        q2 = mean_plane_flow(data, p2, mask)
        ab, rel = mass_conservation_bias(q1, q2)
        table.append(
            {"plane1": f"{p1.axis}:{p1.index}", "plane2": f"{p2.axis}:{p2.index}", "q1_lmin": q1, "q2_lmin": q2,
             "abs_bias_lmin": ab, "rel_bias_pct": rel}
        )
    print(f"{'planes':<14}{'Q1 L/min':>10}{'Q2 L/min':>10}{'abs L/min':>11}{'rel %':>8}")
    for r in table:
        print(f"{r['plane1'] + '/' + r['plane2']:<14}{r['q1_lmin']:>10.3f}{r['q2_lmin']:>10.3f}"
              f"{r['abs_bias_lmin']:>11.3f}{r['rel_bias_pct']:>8.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]))
            w.writeheader()
            w.writerows(table)
    if args.json:
        _write_json(table, args.json)
    if args.figure:
        plotting.plane_flow_bars(table, args.figure)
    return EXIT_OK


class _PairAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        if len(values) != 2:
            parser.error(f"{option_string} needs exactly two planes, got {len(values)}")
        items = getattr(namespace, self.dest) or []
        items.append(tuple(values))
        setattr(namespace, self.dest, items)


# ---------------------------------------------------------------- sweep

SWEEP_KEYS = ("depth", "width", "m", "sigma", "epochs", "lr0", "seed")


def run_sweep(spec: dict, base_dir: Path = Path("."), workers: int = 1) -> list[dict]:
    grid = spec.get("grid") or {}
    grid = {k: v for k, v in grid.items() if v}
    if not grid:
        raise UsageError("sweep grid is empty")
    bad = [k for k in grid if k not in SWEEP_KEYS]
    if bad:
        raise UsageError(f"unsupported grid keys {bad}; allowed {SWEEP_KEYS}")
    data = read_f4d(base_dir / spec["data"])
    mask = _load_mask(base_dir / spec["mask"], data)
    ref = _reference_field(read_f4d(base_dir / spec["reference"])) if spec.get("reference") else data.reference_velocity
    if ref is None:
        raise DataError("sweep needs reference velocities (a 'reference' file or a reference section)")
    base = TrainConfig.from_dict(spec.get("base", {}))
    geometry = build_geometry(mask, data.spacing)
    keys = list(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        cfg = base.replace(**dict(zip(keys, combo)))
        start = time.perf_counter()
        results = train_all(data, geometry, cfg, workers=workers)
        pred = reconstruct([r[0] for r in results], geometry, mask, data)
        runtime = time.perf_counter() - start
        rep = evaluate(ref, pred.velocity, mask, data.spacing, data.venc)
        row = {k: getattr(cfg, k) for k in ("depth", "width", "m", "sigma", "epochs")}
        row.update(vel_nrmse=rep.vel_nrmse, de=rep.de, div_rms=rep.div_rms, runtime_s=runtime)
        rows.append(row)
        log.info("sweep %s -> VelNRMSE %.4g", dict(zip(keys, combo)), rep.vel_nrmse)
    return rows


def cmd_sweep(args) -> int:
    path = Path(args.grid)
    spec = json.loads(path.read_text())
    rows = run_sweep(spec, path.parent, workers=args.workers or 1)
    out = Path(args.out or spec.get("out") or path.with_suffix(".csv"))
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    varied = [k for k in spec["grid"] if spec["grid"][k]]
    if len(varied) == 1 and not args.no_figures:
        plotting.sweep_plot(rows, varied[0], out.with_suffix(".png"))
    for r in rows:
        print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="divflow", description="Divergence-free neural enhancement of 4D flow MRI volumes.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a synthetic flow dataset")
    s.add_argument("--kind", choices=("pipe", "vortex", "helix"), default="pipe")
    s.add_argument("--dims", type=_dims, default=(48, 16, 16))
    s.add_argument("--spacing", type=_spacing, default=(2e-3, 2e-3, 2e-3), help="m/voxel, 1 or 3 values")
    s.add_argument("--radius", type=float, help="m")
    s.add_argument("--vmax", type=float, default=1.0, help="peak axial velocity, m/s")
    s.add_argument("--omega", type=float, help="rotation rate, rad/s")
    s.add_argument("--nt", type=int, default=1)
    s.add_argument("--waveform", choices=("constant", "half-sine"), default="constant")
    s.add_argument("--background", type=float, default=0.05)
    venc = s.add_mutually_exclusive_group()
    venc.add_argument("--venc", type=float, help="m/s (default: twice the peak speed)")
    venc.add_argument("--venc-cms", type=float, help="cm/s")
    s.add_argument("--noise", type=float, default=0.0, help="percent of max magnitude")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lumen-mask", help="also write the analytic lumen as .f4m")
    s.add_argument("--out", "-o", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("segment", help="PC-MRA threshold segmentation")
    s.add_argument("input")
    s.add_argument("--frac", type=float, default=0.15)
    s.add_argument("--keep", type=int, default=1, help="largest components kept")
    s.add_argument("--dilate", choices=("none", "6", "18", "26"), default="none")
    s.add_argument("--out", "-o", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("enhance", help="fit divergence-free networks per timeframe")
    s.add_argument("input")
    s.add_argument("--mask", required=True)
    s.add_argument("--eval-mask")
    s.add_argument("--out", "-o", required=True)
    s.add_argument("--run-dir", help="checkpoints, loss CSVs, figures and manifest (default: OUT.run)")
    s.add_argument("--workers", type=int, help="parallel timeframe jobs (default: $DIVFLOW_WORKERS or cores)")
    s.add_argument("--sigma-from", help="JSON with sigma, spacing_m, extent_m of the source domain")
    s.add_argument("--no-figures", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("metrics", help="compare a prediction against a reference")
    s.add_argument("--ref", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--ref-field", choices=("auto", "reference", "velocity"), default="auto",
                   help="which field of --ref is the truth; auto prefers a stored reference section")
    s.add_argument("--mask", required=True)
    s.add_argument("--venc", type=float, help="m/s for the wrap criterion (default: prediction file)")
    s.add_argument("--eps", type=float, default=1e-6, help="direction-error speed cutoff, m/s")
    s.add_argument("--json")
    s.add_argument("--csv")
    s.add_argument("--figure")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("masscons", help="inter-plane flow bias")
    s.add_argument("input")
    s.add_argument("--mask", required=True)
    s.add_argument("--pair", nargs="+", action=_PairAction, metavar="PLANE", help="two planes like z:3 z:12")
    s.add_argument("--use-reference", action="store_true")
    s.add_argument("--csv")
    s.add_argument("--json")
    s.add_argument("--figure")
    s.set_defaults(func=cmd_masscons)

    s = sub.add_parser("sweep", help="hyperparameter grid sweep")
    s.add_argument("grid", help="JSON with data, mask, base config and grid")
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"divflow {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"divflow {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, EmptyMaskError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"divflow {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
