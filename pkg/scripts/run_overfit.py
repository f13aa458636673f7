"""Overfit a model on 64 synthetic scenes and report train-set mAP.

Usage: python scripts/run_overfit.py [--epochs 300] [--seed 0]
"""

import argparse

import torch

from incom.data import category_counts, generate_dataset, GenConfig
from incom.evaluation import evaluate_predictions
from incom.model import HoiModel, ModelConfig
from incom.pairs import FeatureMode
from incom.training import TrainConfig, train


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--epochs", type=int, default=300)
    parser.add_argument("--scenes", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--lr", type=float, default=1e-3)
    args = parser.parse_args()

    torch.set_num_threads(1)
    scenes = generate_dataset(7, args.scenes, GenConfig())
    model = HoiModel(ModelConfig(seed=args.seed))
    tc = TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, lr_decay_every=10**6,
        batch_size=8, mft=True, seed=args.seed, eval_every=10, target_map=0.95,
    )
    result = train(model, scenes, tc, eval_scenes=scenes)
    for rec in result.history:
        if "map_full" in rec:
            print(f"epoch {rec['epoch']:3d}  loss {rec['loss']:.5f}  train mAP {rec['map_full']:.4f}")
    report = evaluate_predictions(
        model.predict_dataset(scenes, FeatureMode.FULL), scenes, category_counts(scenes)
    )
    print(f"final train mAP: {report.map_full:.4f} after {result.epochs_run} epochs")


if __name__ == "__main__":
    main()
