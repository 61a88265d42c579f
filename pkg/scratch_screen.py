"""Screening harness for the learning-criterion regime search (scratch, not shipped)."""

import itertools
import json
import sys
import time

import numpy as np

from spotattn import data as dt
from spotattn.model import ModelConfig
from spotattn.training import TrainConfig, train, evaluate


def triple(noise, nk, lr, wd, epochs, seed, domains):
    if domains == "checker":
        dt._cluster_domains_backup = dt._cluster_domains
        dt._cluster_domains = lambda grid, rng: (grid.sum(axis=1) % 2).astype(np.int64)
    cfg = dt.SynthConfig(
        n_train=4, n_test=2, grid_rows=12, grid_cols=12, dropout_rate=0.2,
        d=32, n_genes=8, inhibition_strength=0.5, noise_std=noise, neighbor_k=nk, seed=3927,
    )
    try:
        train_slides, test_slides, _ = dt.synth_dataset(cfg)
        bare_train = [dt.strip_pseudo(s) for s in train_slides]
        bare_test = [dt.strip_pseudo(s) for s in test_slides]
        out = {}
        for name, beta, pseudo in [("full", 1.5, True), ("b0", 0.0, True), ("nop", 1.5, False)]:
            mcfg = ModelConfig.desk_profile(seed=seed, beta=beta)
            tcfg = TrainConfig(epochs=epochs, learning_rate=lr, weight_decay=wd)
            params, hist = train(train_slides if pseudo else bare_train, tcfg, mcfg)
            out[name] = evaluate(params, test_slides if pseudo else bare_test, mcfg).pcc
            if name == "full":
                first10 = [h.mean_loss for h in hist[:10]]
                out["mono"] = all(a > b for a, b in zip(first10, first10[1:]))
        return out
    finally:
        if domains == "checker":
            dt._cluster_domains = dt._cluster_domains_backup


def main():
    grid = []
    for domains in ("checker", "blob"):
        for noise in (0.15, 0.2, 0.3):
            for nk in (2, 4):
                for lr, wd, epochs in ((5e-3, 1e-5, 150), (5e-3, 0.03, 200), (2e-3, 1e-5, 200)):
                    grid.append(dict(domains=domains, noise=noise, nk=nk, lr=lr, wd=wd, epochs=epochs))
    results = []
    t0 = time.time()
    for i, g in enumerate(grid):
        r = triple(g["noise"], g["nk"], g["lr"], g["wd"], g["epochs"], seed=1, domains=g["domains"])
        rec = {**g, **r, "gap_b0": r["full"] - r["b0"], "gap_nop": r["full"] - r["nop"]}
        results.append(rec)
        print(
            f"[{i+1}/{len(grid)} {time.time()-t0:.0f}s] {g['domains']} noise={g['noise']} nk={g['nk']} "
            f"lr={g['lr']} wd={g['wd']} ep={g['epochs']}: full={r['full']:.3f} b0={r['b0']:.3f} "
            f"nop={r['nop']:.3f} mono={r['mono']}",
            flush=True,
        )
        with open("/tmp/screen_results.json", "w") as fh:
            json.dump(results, fh, indent=1)


if __name__ == "__main__":
    main()
