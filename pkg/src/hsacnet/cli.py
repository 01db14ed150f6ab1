"""Command-line entry point: make-synthetic, train, eval, profile.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from .config import RESOLVED_NAME, RunConfig, freeze_config, load_config
from .core import PartitionSpec, read_manifest, validate_manifest
from .data import SyntheticSpec, generate_synthetic, partition
from .metrics import evaluate
from .network import build_network, load_checkpoint
from .profiler import estimate_flops
from .trainer import TrainingDivergedError, fit, load_arrays

log = logging.getLogger("hsacnet")


class UsageError(ValueError):
    pass


class _SyntheticFile(BaseModel):
    # wrapping the dataclass makes unknown keys an error, as in run configs
    model_config = ConfigDict(extra="forbid")
    spec: SyntheticSpec


def _print_json(obj):
    print(json.dumps(obj, indent=1, default=str))


def _format_validation(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "invalid configuration:\n" + "\n".join(lines)


# -- make-synthetic --------------------------------------------------------------


def cmd_make_synthetic(args) -> int:
    raw = {}
    if args.spec:
        raw = yaml.safe_load(Path(args.spec).read_text()) or {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.num_pairs is not None:
        raw["num_pairs"] = args.num_pairs
    spec = _SyntheticFile.model_validate({"spec": raw}).spec
    manifests = generate_synthetic(spec, args.out)
    problems = [v for m in manifests.values() for v in validate_manifest(m, args.out)]
    if problems:
        raise RuntimeError(f"generated dataset failed validation: {problems[:3]}")
    print(f"wrote {sum(len(m.records) for m in manifests.values())} pairs to {args.out} "
          f"({', '.join(f'{k}={len(m.records)}' for k, m in manifests.items())})")
    return 0


# -- train -------------------------------------------------------------------------


def _train_overrides(args) -> dict:
    o = {}
    if args.labeled_ratio is not None:
        o["data.labeled_ratio"] = args.labeled_ratio
    if args.tau is not None:
        o["train.tau"] = args.tau
    if args.sup_only:
        o["train.lambda1"] = 1.0
        o["train.lambda2"] = 0.0
    if args.seed is not None:
        o["train.seed"] = args.seed
        o["encoder.seed"] = args.seed
        o["data.partition_seed"] = args.seed
    if args.out is not None:
        o["out_dir"] = args.out
    if args.data is not None:
        o["data.root"] = args.data
    if args.epochs is not None:
        o["train.epochs"] = args.epochs
    if args.max_steps is not None:
        o["train.max_steps"] = args.max_steps
    if args.low_conf_mode is not None:
        o["train.low_conf_mode"] = args.low_conf_mode
    return o


def _checked_manifest(root, split):
    m = read_manifest(root, split)
    problems = validate_manifest(m, root)
    if problems:
        listing = "\n".join(f"  {v.kind} {v.pair_id}: {v.detail}" for v in problems[:20])
        raise UsageError(f"split '{split}' has {len(problems)} manifest violations:\n{listing}")
    return m


def cmd_train(args) -> int:
    cfg = load_config(args.config, _train_overrides(args))
    torch.set_num_threads(cfg.threads)
    root = cfg.data.root
    train_m = _checked_manifest(root, cfg.data.train_split)
    val_m = _checked_manifest(root, cfg.data.val_split) if cfg.data.val_split else None
    out = Path(cfg.out_dir)
    freeze_config(cfg, out)
    lab_m, unl_m = partition(train_m, PartitionSpec(cfg.data.labeled_ratio, cfg.data.partition_seed))
    (out / "partition.json").write_text(json.dumps(
        {"labeled": [r.id for r in lab_m.labeled], "unlabeled": [r.id for r in unl_m.unlabeled]}, indent=1
    ))
    labeled = load_arrays(lab_m, root)
    unlabeled = load_arrays(unl_m, root, labeled=False)
    val = load_arrays(val_m, root) if val_m is not None else None
    net, report = build_network(cfg.network_config(), cfg.encoder.pretrained_path)
    if report is not None:
        log.info("pretrained import: %d matched, %d missing", len(report.matched), len(report.missing))

    def on_epoch(rec):
        msg = f"epoch {rec['epoch']}: l_s={rec['l_s']:.4f} l_u={rec['l_u']:.4f} lr={rec['lr']:.2e}"
        if "val_iou_c" in rec:
            msg += f" val IoU^c={rec['val_iou_c']:.4f} OA={rec['val_oa']:.4f}"
        print(msg, flush=True)

    result = fit(net, labeled, unlabeled, cfg.train, cfg.augment, val=val, out_dir=out, on_epoch=on_epoch)
    print(f"done: {result.steps} steps, best val IoU^c {result.best_val_iou:.4f} (epoch {result.best_epoch}); "
          f"outputs in {out}")
    return 0


# -- eval ----------------------------------------------------------------------------


def _config_for_checkpoint(args) -> RunConfig:
    if args.config:
        return load_config(args.config)
    resolved = Path(args.checkpoint).parent / RESOLVED_NAME
    if not resolved.exists():
        raise UsageError(f"no --config given and no {RESOLVED_NAME} next to the checkpoint")
    return load_config(resolved)


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    cfg = _config_for_checkpoint(args)
    torch.set_num_threads(cfg.threads)
    root = args.data or cfg.data.root
    manifest = _checked_manifest(root, args.split)
    net, _ = build_network(cfg.network_config())
    load_checkpoint(net, args.checkpoint)
    report = evaluate(net, manifest, root, export_dir=args.export_maps)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    print(f"{args.split}: IoU^c={report['iou_c']:.6f} OA={report['oa']:.6f} over {report['num_tiles']} tiles")
    return 0


# -- profile --------------------------------------------------------------------------


def cmd_profile(args) -> int:
    overrides = {"encoder.variant": args.preset} if args.preset else {}
    cfg = load_config(args.config, overrides)
    torch.set_num_threads(cfg.threads)
    net, _ = build_network(cfg.network_config())
    report = estimate_flops(net, args.input_size)
    d = report.to_dict()
    d["flops_at_256"] = report.flops_at_256 if args.input_size == 256 else None
    if args.out:
        Path(args.out).write_text(json.dumps(d, indent=1))
    _print_json(d)
    return 0


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hsacnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", help="generate a synthetic bi-temporal dataset")
    s.add_argument("--spec", help="YAML/JSON file with SyntheticSpec fields")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--num-pairs", type=int)
    s.set_defaults(func=cmd_make_synthetic)

    t = sub.add_parser("train", help="semi-supervised training")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset root (overrides data.root)")
    t.add_argument("--labeled-ratio", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--sup-only", action="store_true", help="lambda1=1, lambda2=0")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--low-conf-mode", choices=["label-zero", "ignore"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--data")
    e.add_argument("--split", default="test")
    e.add_argument("--export-maps", help="directory for TP/TN/FP/FN colour maps")
    e.add_argument("--out", help="write the metrics report as JSON")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("profile", help="parameter and FLOP counts")
    f.add_argument("--config")
    f.add_argument("--preset", choices=["paper", "tiny", "conv-baseline"])
    f.add_argument("--input-size", type=int, default=256)
    f.add_argument("--out")
    f.set_defaults(func=cmd_profile)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as e:
        print(_format_validation(e), file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, yaml.YAMLError) as e:  # includes manifest/pair/usage errors
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
