"""Command-line entry point.

Subcommands: synth, train, eval, predict, attend, verify.  Options resolve in
three layers: built-in defaults, then a flat-key JSON config file (--config),
then explicit flags.  Exit codes: 0 ok, 2 config error, 3 data error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as dataio
from .errors import BiamError, ConfigError, DataError, DatasetError
from .head import (
    AttributeMatrix,
    ModelConfig,
    biam_forward,
    classify_regions,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .heatmap import heatmap_u8, write_pgm
from .metrics import evaluate
from .train import AdamState, TrainConfig, train_epoch, warmup_lr, resolve_warmup
from .verify import run_all

DEFAULTS: dict = {
    # paths
    "manifest": None,
    "checkpoint": None,
    # model geometry; None means "take it from the data"
    "h": None,
    "w": None,
    "d_r": None,
    "d_g": None,
    "d_a": None,
    "heads": 8,
    "topk": 10,
    "topk_aggregate": "mean",
    "seed": None,
    # training
    "batch_size": 32,
    "epochs": 40,
    "warmup_steps": None,
    "base_lr": 1e-3,
    "loss_mode": "mean-pairs",
    # evaluation
    "mode": "zsl",
    "ks": "3,5",
    "average": "micro",
    "threads": 1,
    "deterministic_log": False,
}


def _merge_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in cfg and value is not None:
            cfg[key] = value
    if cfg["seed"] is None:
        cfg["seed"] = int(os.environ.get("BIAM_SEED", "0"))
    return cfg


def _parse_ks(value) -> list[int]:
    if isinstance(value, list):
        return [int(v) for v in value]
    try:
        ks = [int(v) for v in str(value).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse report Ks from {value!r}")
    if not ks:
        raise ConfigError("at least one report K is required")
    return ks


def _model_config(cfg: dict, header: tuple, d_a: int) -> ModelConfig:
    """Build the model config, inferring geometry from the store header."""
    _, h, w, d_r, d_g = header
    resolved = {
        "h": cfg["h"] if cfg["h"] is not None else h,
        "w": cfg["w"] if cfg["w"] is not None else w,
        "d_r": cfg["d_r"] if cfg["d_r"] is not None else d_r,
        "d_g": cfg["d_g"] if cfg["d_g"] is not None else d_g,
        "d_a": cfg["d_a"] if cfg["d_a"] is not None else d_a,
    }
    mismatches = {
        name: (resolved[name], actual)
        for name, actual in zip(("h", "w", "d_r", "d_g", "d_a"), (h, w, d_r, d_g, d_a))
        if resolved[name] != actual
    }
    if mismatches:
        raise DatasetError(
            f"config geometry disagrees with the data: {mismatches}"
        )
    return ModelConfig(
        h=resolved["h"],
        w=resolved["w"],
        d_r=resolved["d_r"],
        d_g=resolved["d_g"],
        d_a=resolved["d_a"],
        heads=int(cfg["heads"]),
        topk=int(cfg["topk"]),
        seed=int(cfg["seed"]),
        topk_aggregate=cfg["topk_aggregate"],
    )


def _load_eval_inputs(cfg: dict, mode: str):
    manifest_path = cfg["manifest"]
    manifest, records = dataio.load_dataset(manifest_path)
    emb_path = dataio.resolve_embeddings_path(manifest_path, manifest)
    if mode in ("seen", "standard"):
        attrs = dataio.load_embeddings(emb_path, manifest.seen_classes)
    elif mode == "zsl":
        if not manifest.unseen_classes:
            raise ConfigError("zsl mode requires unseen classes in the manifest")
        attrs = dataio.load_embeddings(emb_path, manifest.unseen_classes)
    elif mode == "gzsl":
        if not manifest.unseen_classes:
            raise ConfigError("gzsl mode requires unseen classes in the manifest")
        seen = dataio.load_embeddings(emb_path, manifest.seen_classes)
        unseen = dataio.load_embeddings(emb_path, manifest.unseen_classes)
        attrs = AttributeMatrix.concat(seen, unseen)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return manifest, records, attrs


def _score_matrix(records, params, attrs, model_cfg: ModelConfig, threads: int):
    def score_one(rec):
        e_f = biam_forward(rec.x_r, rec.x_g, params, "eval")
        maps = classify_regions(
            e_f, params.w_a, attrs, model_cfg.topk, model_cfg.topk_aggregate
        )
        return maps.scores

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(score_one, records))
    else:
        rows = [score_one(rec) for rec in records]
    return np.stack(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _merge_config(args)
    spec = dataio.SyntheticSpec(
        images=args.images if args.images is not None else 512,
        seen=args.seen if args.seen is not None else 20,
        unseen=args.unseen if args.unseen is not None else 5,
        h=cfg["h"] if cfg["h"] is not None else 7,
        w=cfg["w"] if cfg["w"] is not None else 7,
        d_r=cfg["d_r"] if cfg["d_r"] is not None else 32,
        d_g=cfg["d_g"] if cfg["d_g"] is not None else 64,
        d_a=cfg["d_a"] if cfg["d_a"] is not None else 16,
        strength=args.strength if args.strength is not None else 1.0,
        label_rate=args.label_rate if args.label_rate is not None else 0.15,
        seed=cfg["seed"],
    )
    manifest_path = dataio.save_synthetic(spec, args.out)
    print(f"wrote synthetic dataset under {args.out} (manifest: {manifest_path})")
    return 0


def cmd_train(args) -> int:
    cfg = _merge_config(args)
    if not cfg.get("manifest"):
        raise ConfigError("train requires --manifest")
    manifest, records = dataio.load_dataset(cfg["manifest"])
    emb_path = dataio.resolve_embeddings_path(cfg["manifest"], manifest)
    attrs = dataio.load_embeddings(emb_path, manifest.seen_classes)
    header = dataio.store_header(
        dataio.resolve_features_path(cfg["manifest"], manifest)
    )
    model_cfg = _model_config(cfg, header, attrs.d_a)

    dataset = [
        (rec, manifest.label_set(rec.image_id, "seen")) for rec in records
    ]
    train_cfg = resolve_warmup(
        TrainConfig(
            batch_size=int(cfg["batch_size"]),
            epochs=int(cfg["epochs"]),
            warmup_steps=cfg["warmup_steps"],
            base_lr=float(cfg["base_lr"]),
            seed=int(cfg["seed"]),
            loss_mode=cfg["loss_mode"],
        ),
        len(dataset),
    )

    rng = np.random.default_rng(model_cfg.seed)
    params = init_params(model_cfg, rng)
    opt = AdamState.create(params, base_lr=train_cfg.base_lr)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(train_cfg.epochs):
            t0 = time.monotonic()
            last_lr = warmup_lr(opt.t, train_cfg)
            params, opt, mean_loss = train_epoch(
                dataset, params, attrs, opt, train_cfg, model_cfg
            )
            entry = {"epoch": epoch, "mean_loss": mean_loss, "lr": last_lr}
            if not cfg["deterministic_log"]:
                entry["wall_ms"] = round(1000 * (time.monotonic() - t0), 3)
            line = json.dumps(entry)
            print(line)
            log.write(line + "\n")
    checkpoint = out / "checkpoint.biam"
    save_checkpoint(checkpoint, model_cfg, params)
    print(f"checkpoint written to {checkpoint}")
    return 0


def _checkpoint_and_data(cfg: dict, mode: str):
    if not cfg.get("checkpoint"):
        raise ConfigError("this command requires --checkpoint")
    if not cfg.get("manifest"):
        raise ConfigError("this command requires --manifest")
    model_cfg, params = load_checkpoint(cfg["checkpoint"])
    manifest, records, attrs = _load_eval_inputs(cfg, mode)
    if attrs.d_a != model_cfg.d_a:
        raise DatasetError(
            f"attribute width {attrs.d_a} != checkpoint d_a {model_cfg.d_a}"
        )
    sample = records[0]
    if sample.x_r.shape != (model_cfg.h, model_cfg.w, model_cfg.d_r):
        raise DatasetError(
            f"store features {tuple(sample.x_r.shape)} do not match checkpoint "
            f"({model_cfg.h}, {model_cfg.w}, {model_cfg.d_r})"
        )
    return model_cfg, params, manifest, records, attrs


def cmd_eval(args) -> int:
    cfg = _merge_config(args)
    mode = cfg["mode"]
    model_cfg, params, manifest, records, attrs = _checkpoint_and_data(cfg, mode)
    scores = _score_matrix(records, params, attrs, model_cfg, int(cfg["threads"]))
    labels = [manifest.label_set(rec.image_id, mode) for rec in records]
    ks = [k for k in _parse_ks(cfg["ks"]) if k <= attrs.count]
    if not ks:
        raise ConfigError("all requested Ks exceed the class count")
    report = evaluate(scores, labels, attrs.class_names, ks, cfg["average"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"report_{mode}.json"
    report_path.write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"mAP ({mode}): {report.map:.4f}")
    print("K   precision  recall     F1")
    for k, vals in sorted(report.f1.items()):
        print(f"{k:<3} {vals['p']:.4f}     {vals['r']:.4f}     {vals['f1']:.4f}")
    print(f"report written to {report_path}")
    return 0


def cmd_predict(args) -> int:
    cfg = _merge_config(args)
    mode = cfg["mode"]
    model_cfg, params, manifest, records, attrs = _checkpoint_and_data(cfg, mode)
    scores = _score_matrix(records, params, attrs, model_cfg, int(cfg["threads"]))
    top = args.top if args.top is not None else 5
    if not 1 <= top <= attrs.count:
        raise ConfigError(f"--top must be in [1, {attrs.count}]")
    predictions = {}
    for i, rec in enumerate(records):
        order = np.argsort(-scores[i], kind="stable")[:top]
        predictions[rec.image_id] = [
            {"class": attrs.class_names[c], "score": float(scores[i, c])}
            for c in order
        ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_path = out / "predictions.json"
    with open(pred_path, "w", encoding="utf-8") as f:
        json.dump(predictions, f, indent=2)
        f.write("\n")
    print(f"predictions written to {pred_path}")
    return 0


def cmd_attend(args) -> int:
    cfg = _merge_config(args)
    if not cfg.get("checkpoint") or not cfg.get("manifest"):
        raise ConfigError("attend requires --checkpoint and --manifest")
    model_cfg, params = load_checkpoint(cfg["checkpoint"])
    manifest, records = dataio.load_dataset(cfg["manifest"])
    emb_path = dataio.resolve_embeddings_path(cfg["manifest"], manifest)
    all_attrs = dataio.load_embeddings(emb_path, manifest.all_classes)

    image_ids = [v for v in args.images.split(",") if v]
    class_names = [v for v in args.classes.split(",") if v]
    by_id = {rec.image_id: rec for rec in records}
    missing_ids = [i for i in image_ids if i not in by_id]
    if missing_ids:
        raise DatasetError(f"image ids not in store: {missing_ids}")
    name_to_row = {name: i for i, name in enumerate(all_attrs.class_names)}
    missing_cls = [c for c in class_names if c not in name_to_row]
    if missing_cls:
        raise DatasetError(f"classes not in embedding table: {missing_cls}")

    rows = all_attrs.rows[[name_to_row[c] for c in class_names]]
    attrs = AttributeMatrix(class_names, rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for image_id in image_ids:
        rec = by_id[image_id]
        e_f = biam_forward(rec.x_r, rec.x_g, params, "eval")
        maps = classify_regions(
            e_f, params.w_a, attrs, model_cfg.topk, model_cfg.topk_aggregate
        )
        for ci, cname in enumerate(class_names):
            path = out / f"{image_id}__{cname.replace(' ', '_')}.pgm"
            write_pgm(path, heatmap_u8(maps.maps[:, :, ci]))
            written.append(path)
    print(f"wrote {len(written)} heatmaps under {out}")
    return 0


def cmd_verify(args) -> int:
    results = run_all(fast=bool(args.fast))
    failed = 0
    for res in results:
        print(res.line())
        if not res.passed:
            failed += 1
    if failed:
        print(f"{failed} verification check(s) FAILED", file=sys.stderr)
        return 4
    print(f"all {len(results)} verification checks passed")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat-key JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--h", type=int)
    p.add_argument("--w", type=int)
    p.add_argument("--d-r", type=int)
    p.add_argument("--d-g", type=int)
    p.add_argument("--d-a", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--topk-aggregate", choices=["mean", "sum"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biam",
        description="Region-level multi-label zero-shot classification engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int)
    p.add_argument("--seen", type=int)
    p.add_argument("--unseen", type=int)
    p.add_argument("--strength", type=float)
    p.add_argument("--label-rate", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the seen classes")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--loss-mode", choices=["mean-pairs", "sum"])
    p.add_argument("--deterministic-log", action="store_const", const=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["zsl", "gzsl", "standard"])
    p.add_argument("--ks")
    p.add_argument("--average", choices=["micro", "macro"])
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="top-K labels per image")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["zsl", "gzsl", "standard"])
    p.add_argument("--top", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attend", help="export class response heatmaps as PGM")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--images", required=True, help="comma-separated image ids")
    p.add_argument("--classes", required=True, help="comma-separated class names")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("verify", help="run the self-verification suite")
    p.add_argument("--fast", action="store_const", const=True)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BiamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
