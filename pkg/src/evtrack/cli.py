"""Command-line entry point wiring the whole pipeline.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure. Every
subcommand takes ``--config`` for an INI-style config file; explicit flags
override it. Output directories are never clobbered without ``--overwrite``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluate, synth
from .backbone import build_fast_tracker, build_slow_tracker, count_parameters
from .config import (ModelConfig, TrainConfig, apply_section, config_sections,
                     load_config_file, model_config, save_config_file,
                     stage1_config, stage2_config)
from .errors import ConfigError, DataError, NumericError
from .events import load_sequence
from .train import load_any, load_tracker, train_stage1, train_stage2

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI config file; flags override it")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--scale", choices=("desk", "full"), default="desk")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evtrack",
        description="Slow/fast event-camera object tracking pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic sequences")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-sequences", type=int, default=20)
    p.add_argument("--windows", type=int, default=None, help="windows per sequence")
    p.add_argument("--sensor", type=int, default=None, help="square sensor side")
    p.add_argument("--edge-rate", type=float, default=None)
    p.add_argument("--bg-rate", type=float, default=None)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("train", help="stage-1 training of one tracker")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--which", choices=("slow", "fast"), default="slow")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--batches-per-epoch", type=int, default=None)
    p.add_argument("--lr-backbone", type=float, default=None)
    p.add_argument("--lr-gcn", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--save-every", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("finetune", help="stage-2 unified fine-tuning")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slow", required=True, help="stage-1 slow checkpoint")
    p.add_argument("--fast", required=True, help="stage-1 fast checkpoint")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--batches-per-epoch", type=int, default=None)
    p.add_argument("--lr-backbone", type=float, default=None)
    p.add_argument("--lr-gcn", type=float, default=None)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("track", help="run a tracker over one sequence")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--mode", choices=("slow", "fast"), default="slow")
    p.add_argument("--k", type=int, default=3, help="outputs per window (fast mode)")
    p.add_argument("--out", required=True, help="results file")
    p.add_argument("--dump-attention", default=None,
                   help="write per-block attention arrays to this .npz file")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("eval", help="score a results file against ground truth")
    _add_common(p)
    p.add_argument("--results", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--k", type=int, default=1, help="outputs per window in the file")
    p.add_argument("--out", default=None, help="report JSON (curves written alongside)")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("bench", help="latency and FLOP benchmark")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--mode", choices=("slow", "fast"), default="fast")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out", default=None)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("params", help="per-module parameter counts")
    _add_common(p)
    p.add_argument("--json", action="store_true")
    return parser


def _refuse_clobber(path: Path, overwrite: bool, kind: str = "output") -> None:
    if path.exists() and not overwrite:
        raise DataError(f"{kind} {path} already exists; pass --overwrite to replace it")


def _load_records(data_dir: Path):
    seq_dirs = sorted(d for d in Path(data_dir).iterdir()
                      if d.is_dir() and (d / "events.csv").exists())
    if not seq_dirs:
        raise DataError(f"no sequence directories under {data_dir}")
    return [load_sequence(d) for d in seq_dirs]


def _configs_from_args(args) -> tuple[ModelConfig, dict[str, dict[str, str]]]:
    sections = load_config_file(args.config) if args.config else {}
    cfg = model_config(args.scale)
    if "model" in sections:
        apply_section(cfg, sections["model"])
    cfg.validate()
    return cfg, sections


def _train_config_from_args(args, sections, stage: str) -> TrainConfig:
    desk = args.scale == "desk"
    if stage == "finetune":
        cfg = stage2_config(desk_scale=desk, seed=args.seed)
    else:
        cfg = stage1_config(stage, desk_scale=desk, seed=args.seed)
    if "train" in sections:
        apply_section(cfg, sections["train"])
        cfg.seed = args.seed if args.seed is not None else cfg.seed
    for flag, field in (("epochs", "epochs"), ("batch_size", "batch_size"),
                        ("batches_per_epoch", "batches_per_epoch"),
                        ("lr_backbone", "lr_backbone"), ("lr_gcn", "lr_gcn"),
                        ("weight_decay", "weight_decay"), ("save_every", "save_every")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, field, value)
    cfg.validate()
    return cfg


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    _refuse_clobber(out, args.overwrite)
    base = synth.SynthConfig()
    sections = load_config_file(args.config) if args.config else {}
    if "synth" in sections:
        apply_section(base, sections["synth"])
    if args.sensor is not None:
        base.sensor_size = (args.sensor, args.sensor)
    if args.windows is not None:
        base.duration = args.windows * base.delta_t
    if args.edge_rate is not None:
        base.edge_rate = args.edge_rate
    if args.bg_rate is not None:
        base.bg_rate = args.bg_rate
    if out.exists():
        import shutil
        shutil.rmtree(out)
    paths = synth.generate_dataset(out, args.num_sequences, args.seed, base)
    save_config_file(out / "run.cfg", config_sections(synth=base))
    print(f"wrote {len(paths)} sequences to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    model_cfg, sections = _configs_from_args(args)
    train_cfg = _train_config_from_args(args, sections, args.which)
    out = Path(args.out)
    _refuse_clobber(out / f"{args.which}.ckpt", args.overwrite, "checkpoint")
    records = _load_records(Path(args.data))
    result = train_stage1(model_cfg, train_cfg, records, which=args.which,
                          out_dir=out, resume_from=args.resume)
    save_config_file(out / "run.cfg",
                     config_sections(model=model_cfg, train=train_cfg))
    final = result.history[-1] if result.history else None
    if final is not None:
        print(f"trained {args.which} for {train_cfg.epochs} epochs; "
              f"final loss {final.total:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _cmd_finetune(args) -> int:
    model_cfg, sections = _configs_from_args(args)
    train_cfg = _train_config_from_args(args, sections, "finetune")
    out = Path(args.out)
    _refuse_clobber(out / "unified.ckpt", args.overwrite, "checkpoint")
    records = _load_records(Path(args.data))
    result = train_stage2(model_cfg, train_cfg, records, args.slow, args.fast,
                          out_dir=out)
    save_config_file(out / "run.cfg",
                     config_sections(model=model_cfg, train=train_cfg))
    print(f"KD probe MSE: {result.kd_probe[0]:.6f} -> {result.kd_probe[-1]:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _pick_model(ckpt_path: str, mode: str):
    models = load_any(ckpt_path)
    if mode not in models:
        raise DataError(
            f"checkpoint {ckpt_path} holds {sorted(models)} but mode={mode!r} requested")
    return models[mode]


def _cmd_track(args) -> int:
    out = Path(args.out)
    _refuse_clobber(out, args.overwrite, "results file")
    record = load_sequence(args.sequence)
    model = _pick_model(args.ckpt, args.mode)
    run = evaluate.track_sequence(model, record, mode=args.mode, k=args.k)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluate.save_results(run, out)
    if args.dump_attention:
        _dump_attention(model, record, Path(args.dump_attention), args.overwrite)
    print(f"wrote {len(run.boxes)} outputs ({run.n_windows} windows, k={run.k}) to {out}")
    return EXIT_OK


def _dump_attention(model, record, path: Path, overwrite: bool) -> None:
    from .events import crop_region, stack_events, window_slice
    from .fusion import window_graph_features

    _refuse_clobber(path, overwrite, "attention dump")
    frames = stack_events(record.stream, record.delta_t)
    cfg = model.cfg
    template, _ = crop_region(frames.data[0], record.ground_truth[0],
                              cfg.template_context, cfg.template_size)
    idx = min(1, record.n_windows - 1)
    search, _ = crop_region(frames.data[idx], record.ground_truth[idx],
                            cfg.search_context, cfg.search_size)
    window = window_slice(record.stream, idx, record.delta_t)
    feats = None
    if not model.plan.empty and len(window):
        feats, _ = window_graph_features(model, window)
        feats = evaluate._batched(feats)
    with torch.no_grad():
        _, _, attention = model.backbone_tokens(
            torch.from_numpy(template)[None], torch.from_numpy(search)[None],
            feats, collect_attention=True)
    np.savez(path, **{f"block_{i:02d}": a.numpy() for i, a in enumerate(attention)})


def _cmd_eval(args) -> int:
    record = load_sequence(args.sequence)
    boxes, times = evaluate.load_results(args.results)
    k = max(args.k, 1)
    if len(boxes) != record.n_windows * k:
        raise DataError(
            f"results hold {len(boxes)} outputs but the sequence has "
            f"{record.n_windows} windows at k={k}")
    run = evaluate.TrackRun(boxes, times, np.full(len(boxes), 1e-9), "file", k,
                            record.n_windows, np.zeros((len(boxes), 3), dtype=np.int64))
    report = evaluate.compute_metrics(run, record)
    print(f"SR {report.sr:.2f}  PR {report.pr:.2f}  NPR {report.npr:.2f} "
          f"({report.n_windows} windows)")
    if args.out:
        out = Path(args.out)
        _refuse_clobber(out, args.overwrite, "report")
        out.parent.mkdir(parents=True, exist_ok=True)
        evaluate.save_report(report, out)
        evaluate.save_curves(report, out.parent, prefix=out.stem + "_")
    return EXIT_OK


def _cmd_bench(args) -> int:
    record = load_sequence(args.sequence)
    model = _pick_model(args.ckpt, args.mode)
    report = evaluate.bench_latency(model, record, mode=args.mode, k=args.k,
                                    warmup=args.warmup)
    payload = report.to_dict()
    print(json.dumps(payload, indent=2))
    if args.out:
        out = Path(args.out)
        _refuse_clobber(out, args.overwrite, "bench report")
        out.write_text(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradient_suite

    results = run_gradient_suite(tolerance=args.tolerance, seed=args.seed)
    failed = False
    for name, result in results.items():
        status = "PASS" if result.passed else "FAIL"
        worst_name, worst = result.worst()
        print(f"{status} {name}: max rel err {worst:.3e} ({worst_name})")
        failed |= not result.passed
    return EXIT_NUMERIC if failed else EXIT_OK


def _cmd_params(args) -> int:
    cfg = model_config(args.scale)
    torch.manual_seed(args.seed)
    rows = {}
    for kind, builder in (("slow", build_slow_tracker), ("fast", build_fast_tracker)):
        model = builder(cfg, seed=args.seed)
        rows[kind] = count_parameters(model)
        del model
    if args.json:
        print(json.dumps(rows))
    else:
        for kind, counts in rows.items():
            print(f"{kind} tracker ({args.scale} scale):")
            for name, count in sorted(counts.items(), key=lambda kv: -kv[1]):
                if name != "total":
                    print(f"  {name:<14} {count / 1e6:10.3f} M")
            print(f"  {'total':<14} {counts['total'] / 1e6:10.3f} M")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "track": _cmd_track,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
    "params": _cmd_params,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DataError, FileNotFoundError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
