"""Command-line surface: gen, train, eval, infer, inspect.

Exit codes: 0 success, 1 usage/config error, 2 runtime or data error. All
commands are deterministic given (config, seed); only the wall_time field of
the metrics log varies between identical runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import resolve_config
from .data import (
    DatasetError,
    GenerationError,
    VERB_NAMES,
    category_counts,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .evaluation import RARE_THRESHOLD, evaluate_predictions
from .model import ConfigError, HoiModel, ModelConfig
from .pairs import FeatureMode
from .training import TrainConfig, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="incom",
        description=(
            "Instance-centric context mining on a synthetic HOI world. "
            "Option precedence: CLI flag > INCOM_SEED env var > config file > default."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene dataset")
    p.add_argument("--config", help="experiment config file (JSON or TOML)")
    p.add_argument("--out", required=True, help="output dataset path (JSON lines)")
    p.add_argument("--num-scenes", type=int, default=2000)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", help="experiment config file (JSON or TOML)")
    p.add_argument("--data", required=True, help="training dataset path")
    p.add_argument("--out-ckpt", required=True, help="checkpoint manifest path")
    p.add_argument("--log", default=None, help="metrics log path (default: <out-ckpt>.log.jsonl)")
    p.add_argument("--no-mft", action="store_true", help="train on the full feature mode only")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out-ckpt")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="full", choices=[m.value for m in FeatureMode])
    p.add_argument("--report", required=True, help="output report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write raw predictions for a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="full", choices=[m.value for m in FeatureMode])
    p.add_argument("--out", required=True, help="output predictions path (JSON lines)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("inspect", help="dump masks and attention maps for one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene-id", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def cmd_gen(args) -> int:
    cfg = resolve_config(args.config, seed_override=args.seed)
    if args.num_scenes < 0:
        raise UsageError("--num-scenes must be non-negative")
    scenes = generate_dataset(cfg.seed, args.num_scenes, cfg.data)
    save_dataset(scenes, args.out)
    counts = category_counts(scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    print("category frequencies (verb, object class): count [split]")
    for (verb, obj_class), n in sorted(counts.items()):
        split = "rare" if n < RARE_THRESHOLD else "non-rare"
        name = VERB_NAMES[verb] if verb < len(VERB_NAMES) else str(verb)
        print(f"  {name}({verb}), class {obj_class}: {n} [{split}]")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, seed_override=args.seed)
    train_cfg = cfg.train
    if args.no_mft:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "mft": False})
    if args.epochs is not None:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "epochs": args.epochs})
    scenes = _load_scenes(args.data)
    model = HoiModel(cfg.model)
    log_path = args.log if args.log is not None else str(args.out_ckpt) + ".log.jsonl"
    result = train(
        model,
        scenes,
        train_cfg,
        ckpt_path=args.out_ckpt,
        log_path=log_path,
        resume=args.resume,
    )
    print(
        f"trained {result.epochs_run} epochs, final loss {result.final_loss:.6f}, "
        f"checkpoint at {args.out_ckpt}"
    )
    return 0


def _load_scenes(path):
    try:
        return load_dataset(path)
    except OSError as e:
        raise DatasetError(f"cannot read dataset {path}: {e}") from e


def _load_model(ckpt_path) -> tuple[HoiModel, dict]:
    try:
        with open(ckpt_path, encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {ckpt_path}: {e}") from e
    model = HoiModel(ModelConfig.from_dict(manifest["model_config"]))
    load_checkpoint(ckpt_path, model)
    model.eval()
    return model, manifest


def _train_counts_from_manifest(manifest: dict) -> dict:
    counts = {}
    for key, n in manifest.get("extra", {}).get("train_counts", {}).items():
        verb, cls = key.split(":")
        counts[(int(verb), int(cls))] = int(n)
    return counts


def cmd_eval(args) -> int:
    model, manifest = _load_model(args.ckpt)
    scenes = _load_scenes(args.data)
    mode = FeatureMode.from_string(args.mode)
    preds = model.predict_dataset(scenes, mode)
    report = evaluate_predictions(
        preds, scenes, _train_counts_from_manifest(manifest), mode=mode.value
    )
    with open(args.report, "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    rare = "n/a" if report.map_rare is None else f"{report.map_rare:.4f}"
    non_rare = "n/a" if report.map_non_rare is None else f"{report.map_non_rare:.4f}"
    print(
        f"mode={mode.value} map_full={report.map_full:.4f} "
        f"map_rare={rare} map_non_rare={non_rare}"
    )
    return 0


def cmd_infer(args) -> int:
    model, _ = _load_model(args.ckpt)
    scenes = _load_scenes(args.data)
    mode = FeatureMode.from_string(args.mode)
    with open(args.out, "w", encoding="utf-8") as f:
        for pred in model.predict_dataset(scenes, mode):
            f.write(
                json.dumps(
                    {
                        "scene_id": pred.scene_id,
                        "h_box": pred.human_box.as_list(),
                        "o_box": pred.object_box.as_list(),
                        "o_class": pred.object_class,
                        "verb": pred.verb,
                        "score": pred.score,
                    },
                    separators=(",", ":"),
                )
            )
            f.write("\n")
    print(f"wrote predictions to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    model, _ = _load_model(args.ckpt)
    scenes = _load_scenes(args.data)
    matches = [s for s in scenes if s.scene_id == args.scene_id]
    if not matches:
        raise DatasetError(f"scene id {args.scene_id} not found in {args.data}")
    scene = matches[0]
    features = model.encode(scene)
    details: dict = {}
    with torch.no_grad():
        model.head_logits(features, model.mine(features), FeatureMode.FULL, details=details)
    os.makedirs(args.out_dir, exist_ok=True)
    masks = features.masks
    _dump_json(
        os.path.join(args.out_dir, "masks.json"),
        {
            "scene_id": scene.scene_id,
            "grid": {"rows": masks.grid.rows, "cols": masks.grid.cols},
            "instance": masks.instance.astype(int).tolist(),
            "surrounding": masks.surrounding.astype(int).tolist(),
            "global": masks.global_mask.astype(int).tolist(),
        },
    )
    _dump_json(
        os.path.join(args.out_dir, "contexts.json"),
        {
            "scene_id": scene.scene_id,
            "global_token_indices": list(range(masks.grid.num_tokens)),
            "instances": [
                {
                    "intra_token_indices": np.flatnonzero(masks.instance[i]).tolist(),
                    "inter_token_indices": np.flatnonzero(masks.surrounding[i]).tolist(),
                }
                for i in range(masks.num_instances)
            ],
        },
    )
    _dump_json(
        os.path.join(args.out_dir, "attention.json"),
        {
            "scene_id": scene.scene_id,
            "pairs": [[p.h, p.o] for p in features.pairs],
            "decoder_layers": [
                {name: w.detach().cpu().numpy().tolist() for name, w in layer.items()}
                for layer in details.get("cross_attn", [])
            ],
        },
    )
    print(f"wrote inspection dumps to {args.out_dir}")
    return 0


def _dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def main(argv=None) -> int:
    torch.set_num_threads(1)  # faster than threading at these tensor sizes
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DatasetError, GenerationError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
