"""Command-line pipeline: synth, pseudo, train, eval, attn, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
failure (non-finite values or a failed gradient check). All outputs are
deterministic given flags and seeds; CSV floats carry 17 significant digits
so they round-trip losslessly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import data as dt
from . import model as md
from . import training as tr
from .errors import ConfigError, DataError, NumericError, SpotAttnError
from .geometry import SpotCoords, avg_nn_distance, fit_affine, filter_pseudo, gen_pseudo_candidates
from .numerics import Tape, finite_diff_check, mse_loss

USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; this pipeline reserves 2 for data
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _load_config(cls, path: str | None):
    """Build a dataclass config from a JSON file of field overrides."""
    values = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            values = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    cfg = cls(**values)
    cfg.validate()
    return cfg


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args) -> int:
    cfg = _load_config(dt.SynthConfig, args.config)
    os.makedirs(args.out, exist_ok=True)
    train_slides, test_slides, _ = dt.synth_dataset(cfg)
    train_paths, test_paths = [], []
    for slide in train_slides + test_slides:
        path = os.path.join(args.out, f"{slide.slide_id}.fst")
        dt.write_slide(slide, path)
        (train_paths if slide in train_slides else test_paths).append(path)
    dt.write_manifest(os.path.join(args.out, "manifest.json"), train_paths, test_paths,
                      cfg.d, cfg.n_genes)
    print(f"wrote {len(train_paths)} train + {len(test_paths)} test slides to {args.out}")
    return 0


def cmd_pseudo(args) -> int:
    slide = dt.read_slide(args.in_path)
    originals = SpotCoords(
        grid=slide.coords.grid[: slide.n_orig],
        phys=slide.coords.phys[: slide.n_orig],
        is_pseudo=np.zeros(slide.n_orig, dtype=bool),
    )
    transform, residual = fit_affine(originals.grid, originals.phys)
    candidates = gen_pseudo_candidates(originals)
    threshold = avg_nn_distance(originals)
    pseudo = filter_pseudo(candidates, originals, threshold, transform)
    if args.feature_strategy == "idw":
        feats = dt.idw_features(pseudo.grid, originals.grid, slide.features[: slide.n_orig])
    else:
        feats = np.zeros((pseudo.n, slide.d))
    out = dt.SlideRecord(
        slide_id=slide.slide_id,
        coords=SpotCoords(
            grid=np.concatenate([originals.grid, pseudo.grid]),
            phys=np.concatenate([originals.phys, pseudo.phys]),
            is_pseudo=np.concatenate([originals.is_pseudo, pseudo.is_pseudo]),
        ),
        features=np.concatenate([slide.features[: slide.n_orig], feats]),
        targets=slide.targets,
        gene_names=slide.gene_names,
    )
    dt.write_slide(out, args.out)
    print(
        f"{slide.slide_id}: {pseudo.n} pseudo-spots (threshold {_fmt(threshold)},"
        f" affine residual {_fmt(residual)} px) -> {args.out}"
    )
    return 0


def _model_params_from_ckpt(path):
    config_dict, arrays = dt.read_checkpoint(path)
    mcfg = md.ModelConfig(**config_dict)
    mcfg.validate()
    params = md.init_params(mcfg)
    params.load_arrays(arrays)
    return mcfg, params


def cmd_train(args) -> int:
    mcfg = _load_config(md.ModelConfig, args.model_config)
    tcfg = _load_config(tr.TrainConfig, args.train_config)
    manifest = dt.read_manifest(args.manifest)
    slides = [dt.read_slide(p) for p in manifest["train"]]
    params, history = tr.train(slides, tcfg, mcfg)
    dt.write_checkpoint(args.out, dataclasses.asdict(mcfg), params.named_arrays())
    if args.history:
        with open(args.history, "w", encoding="utf-8") as fh:
            fh.write("epoch,lr,mean_loss\n")
            for rec in history:
                fh.write(f"{rec.epoch},{_fmt(rec.lr)},{_fmt(rec.mean_loss)}\n")
    final = history[-1].mean_loss if history else float("nan")
    print(f"trained {len(slides)} slides for {tcfg.epochs} epochs, final loss {_fmt(final)}")
    return 0


def cmd_eval(args) -> int:
    mcfg, params = _model_params_from_ckpt(args.ckpt)
    manifest = dt.read_manifest(args.manifest)
    slides = [dt.read_slide(p) for p in manifest["test"]]
    report = tr.evaluate(params, slides, mcfg)
    _write_json(args.metrics, report.to_dict())
    if args.pred_out:
        os.makedirs(args.pred_out, exist_ok=True)
        for slide in slides:
            preds, _ = md.forward(slide, params, mcfg)
            path = os.path.join(args.pred_out, f"{slide.slide_id}.csv")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("spot_id,x,y," + ",".join(slide.gene_names) + "\n")
                for i in range(slide.n_orig):
                    x, y = slide.coords.phys[i]
                    row = ",".join(_fmt(v) for v in preds.data[i])
                    fh.write(f"{i},{_fmt(x)},{_fmt(y)},{row}\n")
    print(f"mse={_fmt(report.mse)} mae={_fmt(report.mae)} pcc={_fmt(report.pcc)}")
    return 0


def cmd_attn(args) -> int:
    mcfg, params = _model_params_from_ckpt(args.ckpt)
    slide = dt.read_slide(args.slide)
    spot = args.target_spot
    if not (0 <= spot < slide.n_total):
        raise ConfigError(f"target spot {spot} outside [0, {slide.n_total})")
    _, cache = md.forward(slide, params, mcfg, want_maps=True)
    os.makedirs(args.out, exist_ok=True)
    grid, phys = slide.coords.grid, slide.coords.phys
    written = 0
    for li, layer in enumerate(cache.layers):
        stages = [("local", layer.local)]
        if spot < slide.n_orig:  # pseudo-spots are never global-stage queries
            stages.append(("global", layer.global_))
        for stage_name, maps in stages:
            for h, m in enumerate(maps):
                if m.key_indices is not None:
                    keys = m.key_indices[spot]
                    pos, neg, fin = m.a_pos[spot], m.a_neg[spot], m.a_final[spot]
                else:
                    keys = np.arange(m.a_final.shape[1])
                    pos, neg, fin = m.a_pos[spot], m.a_neg[spot], m.a_final[spot]
                path = os.path.join(args.out, f"layer{li}_{stage_name}_head{h}.csv")
                with open(path, "w", encoding="utf-8") as fh:
                    fh.write("key_index,grid_row,grid_col,x,y,a_pos,a_neg,a_final\n")
                    for j, key in enumerate(keys):
                        fh.write(
                            f"{int(key)},{_fmt(grid[key, 0])},{_fmt(grid[key, 1])},"
                            f"{_fmt(phys[key, 0])},{_fmt(phys[key, 1])},"
                            f"{_fmt(pos[j])},{_fmt(neg[j])},{_fmt(fin[j])}\n"
                        )
                written += 1
    print(f"wrote {written} attention map files for spot {spot} to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.model_config:
        mcfg = _load_config(md.ModelConfig, args.model_config)
    else:
        mcfg = md.ModelConfig(
            d=16, n_heads=2, n_layers=1, knn_k=4, n_genes=3, mlp_hidden=8, seed=args.seed
        )
    slide = dt.toy_slide(mcfg.d, mcfg.n_genes, args.seed)
    params = md.init_params(mcfg)
    geometry = md.prepare_geometry(slide, mcfg)

    def objective(tape: Tape | None):
        preds, _ = md.forward(slide, params, mcfg, geometry=geometry, tape=tape)
        return mse_loss(preds, slide.targets, tape)

    report = finite_diff_check(objective, params.named(), eps=1e-5)
    print(report.summary())
    if report.max_rel > GRADCHECK_TOLERANCE:
        print(
            f"FAIL: max relative error {report.max_rel:.3e} exceeds {GRADCHECK_TOLERANCE:.0e}",
            file=sys.stderr,
        )
        return NUMERIC_EXIT
    print(f"OK: max relative error {report.max_rel:.3e} within {GRADCHECK_TOLERANCE:.0e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spotattn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset + manifest")
    p.add_argument("--config", help="JSON file of SynthConfig overrides")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pseudo", help="append off-grid pseudo-spots to a slide")
    p.add_argument("--in", dest="in_path", required=True, help="input slide (.fst)")
    p.add_argument("--out", required=True, help="output slide (.fst)")
    p.add_argument(
        "--feature-strategy",
        choices=["idw", "zeros"],
        default="idw",
        help="pseudo-spot features: inverse-distance blend of nearby originals, or zeros",
    )
    p.set_defaults(fn=cmd_pseudo)

    p = sub.add_parser("train", help="train on the manifest's train slides")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-config", help="JSON ModelConfig overrides")
    p.add_argument("--train-config", help="JSON TrainConfig overrides")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="per-epoch loss CSV path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the manifest's test slides")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--metrics", required=True, help="metrics JSON path")
    p.add_argument("--pred-out", help="directory for per-slide prediction CSVs")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("attn", help="export attention map rows for one spot")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--target-spot", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_attn)

    p = sub.add_parser("gradcheck", help="finite-difference check on a toy model")
    p.add_argument("--model-config", help="JSON ModelConfig overrides (default: toy)")
    p.add_argument("--seed", type=int, default=3927)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except SpotAttnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
