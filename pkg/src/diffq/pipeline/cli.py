"""Command-line interface.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import CalibrationSetError, ConfigError, DiffQError, NumericError
from .config import ExperimentConfig, expand_sweep, parse_seeds, resolve

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="toy",
                        help="TOML config path or packaged preset name (default: toy)")
    common.add_argument("--seed", type=int, default=None, help="u64 run seed")
    common.add_argument("--out", default=None, help="output root directory")
    common.add_argument("--meta-iters", type=int, default=None, help="override weighting.meta_iters")
    common.add_argument("--no-resume", action="store_true", help="recompute every stage")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="diffq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-fp", parents=[common], help="train the full-precision denoiser")
    g = sub.add_parser("gen-calib", parents=[common], help="generate the calibration corpus")
    g.add_argument("--calib-path", default=None, help="also write the corpus here")
    c = sub.add_parser("calibrate", parents=[common], help="quantize with block calibration")
    mode = c.add_mutually_exclusive_group()
    mode.add_argument("--uniform", action="store_true", help="uniform sample weights")
    mode.add_argument("--weighted", action="store_true", help="meta-learned sample weights")
    c.add_argument("--weights-out", default=None, help="write the final weight snapshot here")
    sub.add_parser("diagnose", parents=[common], help="full run plus the diagnostics report")
    sub.add_parser("verify-lemmas", parents=[common], help="numerical checks of both lemmas")
    cmp_ = sub.add_parser("compare", parents=[common], help="uniform vs weighted over seeds")
    cmp_.add_argument("--seeds", default="1..20", help="seed list, e.g. 1..20 or 1,2,5")
    cmp_.add_argument("--no-diagnostics", action="store_true", help="skip per-run reports")
    s = sub.add_parser("sample", parents=[common], help="draw DDIM samples")
    s.add_argument("--n", type=int, default=256)
    s.add_argument("--quantized", action="store_true", help="sample from the calibrated model")
    s.add_argument("--dest", default=None, help="CSV destination")
    return p


def load(args) -> tuple[ExperimentConfig, dict]:
    cfg, raw = resolve(args.config)
    over = {}
    if args.seed is not None:
        over["run.seed"] = args.seed
    if args.out is not None:
        over["run.out"] = args.out
    if args.meta_iters is not None:
        over["weighting.meta_iters"] = args.meta_iters
    return (cfg.replace(**over) if over else cfg), raw


def _print(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_train_fp(args, cfg, raw):
    from .runner import run_full
    res = run_full(cfg, resume=not args.no_resume, stop_after="fp")
    _print({"run_id": res.manifest.run_id, "fp": res.manifest.stages["fp"]})


def cmd_gen_calib(args, cfg, raw):
    from .runner import run_full
    res = run_full(cfg, resume=not args.no_resume, stop_after="calib")
    if args.calib_path:
        res.calib.save(args.calib_path)
    _print({"run_id": res.manifest.run_id, "samples": len(res.calib),
            "validation": int(res.calib.is_val.sum()), "groups": res.calib.G})


def cmd_calibrate(args, cfg, raw):
    from .runner import run_full
    if args.uniform or args.weighted:
        cfg = cfg.replace(**{"run.mode": "uniform" if args.uniform else "weighted"})
    res = run_full(cfg, resume=not args.no_resume, diagnostics=False)
    if args.weights_out:
        res.weights.save(args.weights_out)
    _print({"run_id": res.manifest.run_id, "mode": cfg.run.mode,
            "val_mse": res.val_losses.overall, "group_mse": res.val_losses.values})


def cmd_diagnose(args, cfg, raw):
    from .runner import run_full
    res = run_full(cfg, resume=not args.no_resume, diagnostics=True)
    _print({"run_id": res.manifest.run_id, "val_mse": res.val_losses.overall,
            "flags": res.report.flags if res.report else []})


def cmd_verify_lemmas(args, cfg, raw):
    from .runner import Run, run_full, run_lemmas, stage_calib, stage_fp, stage_quant_init
    run = Run(cfg, resume=not args.no_resume)
    fp = stage_fp(run)
    cs = stage_calib(run, fp)
    state0 = stage_quant_init(run, fp, cs)
    run.save()
    report = run_lemmas(cfg, fp, cs, state0, cfg.run.seed)
    path = run.reports / "lemmas.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True))
    _print({"path": str(path), **report})


def cmd_compare(args, cfg, raw):
    from .runner import compare
    seeds = parse_seeds(args.seeds)
    results = []
    for c in expand_sweep(cfg, raw):
        summary = compare(c, seeds, diagnostics=not args.no_diagnostics)
        summary.pop("rows")
        results.append(summary)
    _print(results if len(results) > 1 else results[0])


def cmd_sample(args, cfg, raw):
    from ..diffusion import DenoiserModel, ddim_sample
    from .runner import Run, run_full, schedule_for
    res = run_full(cfg, resume=not args.no_resume, diagnostics=False,
                   stop_after=None if args.quantized else "fp")
    run = Run(cfg, resume=True)
    fp = DenoiserModel.load(run.ckpt / "fp.qcw1")
    model = res.state.forward if args.quantized else fp
    rng = np.random.default_rng([cfg.run.seed, 400])
    x = ddim_sample(model, schedule_for(cfg), rng.standard_normal((args.n, fp.data_dim)))
    name = "samples_q.csv" if args.quantized else "samples_fp.csv"
    dest = Path(args.dest) if args.dest else run.csv / name
    np.savetxt(dest, x, delimiter=",", header="x,y", comments="")
    _print({"path": str(dest), "n": args.n})


COMMANDS = {
    "train-fp": cmd_train_fp, "gen-calib": cmd_gen_calib, "calibrate": cmd_calibrate,
    "diagnose": cmd_diagnose, "verify-lemmas": cmd_verify_lemmas, "compare": cmd_compare,
    "sample": cmd_sample,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, raw = load(args)
        COMMANDS[args.command](args, cfg, raw)
    except (ConfigError, CalibrationSetError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        stage = getattr(e, "stage", None)
        where = f" in stage {stage}" if stage else ""
        print(f"numeric failure{where}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DiffQError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
