"""Sweep the number of context-mining layers (token/query stack depth).

Usage: python scripts/run_depth_ablation.py [--depths 1 2 3 4]
"""

import argparse

import torch

from incom.backbones import BackboneConfig
from incom.data import category_counts, generate_dataset, GenConfig
from incom.evaluation import evaluate_predictions
from incom.model import HoiModel, ModelConfig
from incom.pairs import FeatureMode
from incom.training import TrainConfig, train


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--depths", type=int, nargs="+", default=[1, 2, 3])
    parser.add_argument("--train-scenes", type=int, default=600)
    parser.add_argument("--eval-scenes", type=int, default=200)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    torch.set_num_threads(1)
    gen = GenConfig()
    train_scenes = generate_dataset(303, args.train_scenes, gen)
    eval_scenes = generate_dataset(707, args.eval_scenes, gen)
    counts = category_counts(train_scenes)

    for depth in args.depths:
        model = HoiModel(
            ModelConfig(backbone=BackboneConfig(num_layers=depth, seed=args.seed),
                        seed=args.seed)
        )
        tc = TrainConfig(
            epochs=args.epochs, learning_rate=1e-3, lr_decay_every=max(args.epochs - 2, 1),
            batch_size=16, mft=True, seed=args.seed,
        )
        train(model, train_scenes, tc)
        report = evaluate_predictions(
            model.predict_dataset(eval_scenes, FeatureMode.FULL), eval_scenes, counts
        )
        print(f"layers={depth}: full mAP {report.map_full:.4f}")


if __name__ == "__main__":
    main()
