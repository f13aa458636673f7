"""Compare context configurations (global only, +intra, +inter) on one dataset.

Usage: python scripts/run_context_ablation.py [--train-scenes 600] [--epochs 8]
"""

import argparse
import json

import torch

from incom.data import category_counts, generate_dataset, GenConfig
from incom.evaluation import evaluate_predictions
from incom.model import HoiModel, ModelConfig
from incom.pairs import FeatureMode
from incom.training import TrainConfig, train


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--train-scenes", type=int, default=600)
    parser.add_argument("--eval-scenes", type=int, default=200)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="optional JSON output path")
    args = parser.parse_args()

    torch.set_num_threads(1)
    gen = GenConfig()
    train_scenes = generate_dataset(303, args.train_scenes, gen)
    eval_scenes = generate_dataset(707, args.eval_scenes, gen)
    counts = category_counts(train_scenes)

    results = {}
    for contexts in ("g", "gr", "grc"):
        model = HoiModel(ModelConfig(seed=args.seed, contexts=contexts))
        tc = TrainConfig(
            epochs=args.epochs, learning_rate=1e-3, lr_decay_every=max(args.epochs - 2, 1),
            batch_size=16, mft=True, seed=args.seed,
        )
        train(model, train_scenes, tc)
        report = evaluate_predictions(
            model.predict_dataset(eval_scenes, FeatureMode.FULL), eval_scenes, counts
        )
        results[contexts] = {
            "map_full": report.map_full,
            "map_rare": report.map_rare,
            "map_non_rare": report.map_non_rare,
        }
        print(f"contexts={contexts:>3}: full {report.map_full:.4f}  "
              f"rare {report.map_rare if report.map_rare is not None else float('nan'):.4f}  "
              f"non-rare {report.map_non_rare:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(results, f, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
