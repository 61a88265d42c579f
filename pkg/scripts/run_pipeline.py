#!/usr/bin/env python3
"""End-to-end demo: synthesize data, train, evaluate, export attention maps.

Everything goes through the CLI entry points, so this doubles as a smoke
test of the command surface. Outputs land in ./pipeline_out by default.
"""

import argparse
import json
import os
import sys

from spotattn.cli import main as cli


def run(args):
    out = args.out
    os.makedirs(out, exist_ok=True)
    synth_cfg = os.path.join(out, "synth_config.json")
    with open(synth_cfg, "w") as fh:
        json.dump({
            "n_train": 4, "n_test": 2, "grid_rows": 12, "grid_cols": 12,
            "dropout_rate": 0.2, "d": 32, "n_genes": 8,
            "inhibition_strength": 0.5, "seed": args.seed,
        }, fh, indent=2)
    model_cfg = os.path.join(out, "model_config.json")
    with open(model_cfg, "w") as fh:
        json.dump({
            "d": 32, "n_heads": 4, "n_layers": 2, "knn_k": 8, "n_genes": 8,
            "mlp_hidden": 64, "seed": args.seed,
        }, fh, indent=2)
    train_cfg = os.path.join(out, "train_config.json")
    with open(train_cfg, "w") as fh:
        json.dump({"epochs": args.epochs, "learning_rate": 3e-3,
                   "weight_decay": 0.03}, fh, indent=2)

    data_dir = os.path.join(out, "data")
    manifest = os.path.join(data_dir, "manifest.json")
    ckpt = os.path.join(out, "model.ckpt")
    steps = [
        ["synth", "--config", synth_cfg, "--out", data_dir],
        ["train", "--manifest", manifest, "--model-config", model_cfg,
         "--train-config", train_cfg, "--out", ckpt,
         "--history", os.path.join(out, "history.csv")],
        ["eval", "--ckpt", ckpt, "--manifest", manifest,
         "--metrics", os.path.join(out, "metrics.json"),
         "--pred-out", os.path.join(out, "predictions")],
    ]
    for step in steps:
        print("$ spotattn " + " ".join(step))
        code = cli(step)
        if code != 0:
            return code
    with open(manifest) as fh:
        test_slide = json.load(fh)["test"][0]
    code = cli(["attn", "--ckpt", ckpt, "--slide", test_slide,
                "--target-spot", "0", "--out", os.path.join(out, "attention_maps")])
    if code != 0:
        return code
    with open(os.path.join(out, "metrics.json")) as fh:
        print("final metrics:", json.dumps(json.load(fh), indent=2)[:400])
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="pipeline_out")
    parser.add_argument("--epochs", type=int, default=150)
    parser.add_argument("--seed", type=int, default=3927)
    sys.exit(run(parser.parse_args()))
