"""Command-line entry point: train, eval, gradcheck, ablate, visualize.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .decoder import extract_attention_hotspots, render_head_heatmap, write_pgm
from .diagnostics import SMALL_LAYER, format_table, run_gradcheck_suite
from .errors import ConfigurationError, DimensionError, NumericError, TrainingError
from .metrics import evaluate
from .tensor import Tensor
from .training import (
    build_run,
    load_model,
    make_sample,
    save_checkpoint,
    train,
    write_loss_csv,
)

log = logging.getLogger("deformable_hmr")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

ABLATION_SUITES = {
    "table2": [
        ("Reg-S", {"deformable": False, "multi_query": False}),
        ("Reg-M", {"deformable": False, "multi_query": True}),
        ("Def-S", {"deformable": True, "multi_query": False}),
        ("Def-M", {"deformable": True, "multi_query": True}),
    ],
    "table3": [
        ("H16-G8-L1", {"num_heads": 16, "num_groups": 8, "offset_range": 1.0}),
        ("H16-G8-L2", {"num_heads": 16, "num_groups": 8, "offset_range": 2.0}),
        ("H8-G4-L1", {"num_heads": 8, "num_groups": 4, "offset_range": 1.0}),
        ("H8-G4-L2", {"num_heads": 8, "num_groups": 4, "offset_range": 2.0}),
    ],
    "table4": [
        ("none", {"pe_type": "none"}),
        ("absolute", {"pe_type": "absolute"}),
        ("relative", {"pe_type": "relative"}),
    ],
}


class UsageError(Exception):
    pass


def _config(path):
    if path is None:
        return RunConfig()
    try:
        return load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except (ConfigurationError, ValueError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc


def write_manifest(out_dir, command, config, seed, inputs, outputs, name="manifest.json"):
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "seed": seed,
        "inputs": {k: (None if v is None else str(v)) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": __version__,
    }
    path = Path(out_dir) / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_feature_file(path, config, template):
    """External feature maps (.npz with ``context``, ``pose``, ``shape``, ``camera``) as samples."""
    from .training import SyntheticEncoder

    try:
        data = np.load(path)
        context, pose, shape, camera = (np.asarray(data[k], dtype=np.float64) for k in ("context", "pose", "shape", "camera"))
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read feature file {path}: {exc}") from exc
    if context.shape[1:] != config.decoder.context_shape:
        raise UsageError(f"feature maps have shape {context.shape[1:]}, config expects {config.decoder.context_shape}")
    samples = []
    encoder = SyntheticEncoder(config.decoder.context_shape, noise=0.0)
    for i in range(len(context)):
        s = make_sample(pose[i], shape[i], camera[i], template, encoder)
        s.context = context[i]
        samples.append(s)
    return samples


# -- commands -----------------------------------------------------------------


def cmd_train(args):
    config = _config(args.config)
    if args.steps is not None:
        config = config.replace(steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    template, _, dataset = build_run(config, seed=args.seed)
    if args.features:
        dataset = load_feature_file(args.features, config, template)
    result = train(config, dataset, template, seed=args.seed, log=_progress(config.steps))
    ckpt, curve = out / "checkpoint.bin", out / "loss.csv"
    save_checkpoint(ckpt, result.model, config, extra={"seed": args.seed})
    write_loss_csv(curve, result.history)
    write_manifest(out, "train", config, args.seed, {"config": args.config, "features": args.features}, {"checkpoint": ckpt, "loss_csv": curve})
    first, last = result.history[0]["total"], result.history[-1]["total"]
    print(f"initial loss {first:.6g}  final loss {last:.6g}  ratio {last / first:.4g}")
    return EXIT_OK


def _progress(total_steps):
    def report(row):
        if row["step"] % 50 == 0 or row["step"] == total_steps:
            log.info("step %d total %.6g", row["step"], row["total"])

    return report


def _load(path):
    try:
        return load_model(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_eval(args):
    model, config, extra = _load(args.checkpoint)
    seed = extra.get("seed", 0) if args.seed is None else args.seed
    template, _, dataset = build_run(config, seed=seed)
    if args.features:
        dataset = load_feature_file(args.features, config, template)
    try:
        report = evaluate(model, dataset, template)
    except (ConfigurationError, DimensionError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    if args.csv:
        report.write_csv(args.csv)
    write_manifest(out.parent, "eval", config, seed, {"checkpoint": args.checkpoint}, {"report": out}, name=out.stem + ".manifest.json")
    print(f"MPJPE {report.mpjpe_mm:.3f} mm  PA-MPJPE {report.pa_mpjpe_mm:.3f} mm  PVE {report.pve_mm:.3f} mm")
    return EXIT_OK


def cmd_gradcheck(args):
    seed = 0 if args.seed is None else args.seed
    corrupt = (lambda g: g * 1.5 + 1e-3) if args.corrupt else None
    layer = SMALL_LAYER if args.config is None else _config(args.config).decoder.replace(num_layers=1)
    rows = run_gradcheck_suite(seed, corrupt=corrupt, layer_config=layer)
    print(format_table(rows))
    failed = [r for r in rows if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.error)
        print(f"FAILED: {len(failed)} check(s); worst {worst.name} rel_error={worst.error:.3e}")
        return EXIT_FAIL
    print(f"all {len(rows)} checks passed")
    return EXIT_OK


ABLATION_COLUMNS = (
    "variant", "num_heads", "num_groups", "offset_range", "pe_type", "deformable", "multi_query",
    "status", "initial_loss", "final_loss", "mpjpe_mm", "pa_mpjpe_mm", "pve_mm",
)


def run_ablation(suite, config, seed, steps=None):
    if suite not in ABLATION_SUITES:
        raise UsageError(f"unknown suite {suite!r}; choose from {sorted(ABLATION_SUITES)}")
    rows = []
    for name, overrides in ABLATION_SUITES[suite]:
        cfg = config.replace(**overrides)
        if steps is not None:
            cfg = cfg.replace(steps=steps)
        dec = cfg.decoder
        row = {
            "variant": name, "num_heads": dec.num_heads, "num_groups": dec.num_groups,
            "offset_range": dec.offset_range, "pe_type": dec.pe_type,
            "deformable": dec.deformable, "multi_query": dec.multi_query,
        }
        template, _, dataset = build_run(cfg, seed=seed)
        try:
            result = train(cfg, dataset, template, seed=seed)
            report = evaluate(result.model, dataset, template)
        except (TrainingError, NumericError) as exc:
            log.warning("variant %s failed: %s", name, exc)
            row.update(status="failed", initial_loss="", final_loss="", mpjpe_mm="", pa_mpjpe_mm="", pve_mm="")
        else:
            row.update(
                status="ok",
                initial_loss=result.history[0]["total"], final_loss=result.history[-1]["total"],
                mpjpe_mm=report.mpjpe_mm, pa_mpjpe_mm=report.pa_mpjpe_mm, pve_mm=report.pve_mm,
            )
        rows.append(row)
    return rows


def cmd_ablate(args):
    config = _config(args.config)
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(args.suite, config, seed, args.steps)
    path = out / f"ablation_{args.suite}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    write_manifest(out, f"ablate:{args.suite}", config, seed, {"config": args.config}, {"csv": path}, name=f"ablation_{args.suite}.manifest.json")
    for row in rows:
        print(f"{row['variant']:<12} {row['status']:<7} final_loss={row['final_loss']}")
    if any(r["status"] != "ok" for r in rows):
        print("warning: some variants failed", file=sys.stderr)
    return EXIT_OK


def cmd_visualize(args):
    if args.threshold < 0:
        raise UsageError("threshold must be >= 0")
    model, config, extra = _load(args.checkpoint)
    seed = extra.get("seed", 0) if args.seed is None else args.seed
    _, _, dataset = build_run(config, seed=seed)
    if not 0 <= args.sample < len(dataset):
        raise UsageError(f"sample index {args.sample} out of range [0, {len(dataset)})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    context = Tensor(dataset[args.sample].context[None])
    _, trace = model.decoder.forward_with_trace(context, sample=0)
    hotspots = extract_attention_hotspots(trace, args.threshold)
    dec = config.decoder
    layers = []
    for li in range(len(trace.layers)):
        heads = []
        for head in range(dec.num_heads):
            spots = [
                {"y": hs.position[0], "x": hs.position[1], "index": hs.index, "weight": hs.weight}
                for hs in hotspots
                if hs.layer == li and hs.head == head
            ]
            heads.append({"head": head, "hotspots": spots})
            write_pgm(out / f"attention_l{li}_h{head}.pgm", render_head_heatmap(trace, li, head))
        layers.append({"layer": li, "heads": heads})
    payload = {
        "sample": args.sample,
        "threshold": args.threshold,
        "offset_range": dec.offset_range,
        "grid": [dec.context_height, dec.context_width],
        "layers": layers,
    }
    (out / "hotspots.json").write_text(json.dumps(payload, indent=2) + "\n")
    (out / "trace.json").write_text(json.dumps(trace.to_records()) + "\n")
    write_manifest(out, "visualize", config, seed, {"checkpoint": args.checkpoint}, {"hotspots": out / "hotspots.json"})
    print(f"{len(hotspots)} hotspot(s) above {args.threshold} across {len(layers)} layer(s)")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="deformable-hmr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--features", help="optional .npz of external feature maps and targets")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="optional per-sample CSV path")
    p.add_argument("--features")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=sorted(ABLATION_SUITES))
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="dump attention hotspots and heat images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.25)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NumericError) as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
