"""Command-line entry point: ``multialign <command> ...``.

Commands: gen-data, train, eval, gradcheck, encode. Every command exits 0
only on full success.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alignment import MODES, NonFiniteLoss, sample_triplets, total_loss
from .config import PRESETS, RunConfig, load_config
from .data import DatasetError, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .encoders import encode_images, encode_texts, init_params, make_text
from .estimator import CrossMediaRetriever
from .retrieval import format_table, write_report, write_similarity_csv

logger = logging.getLogger("multialign")


class CommandError(RuntimeError):
    """A user-facing failure; reported on stderr with exit status 1."""


def _out(path) -> Path:
    """Output path with its parent directory created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# -- gen-data ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    split = tuple(float(v) for v in args.split.split(","))
    spec = SyntheticSpec(
        num_pairs=args.pairs,
        feature_dim=args.dim,
        num_regions=args.regions,
        noise_sigma=args.noise,
        seed=args.seed,
        split=split,
    )
    ds = generate_synthetic(spec)
    save_dataset(ds, _out(args.out), sidecar=args.sidecar)
    counts = {s: len(ds.indices(s)) for s in ("train", "val", "test")}
    print(f"wrote {args.out}: {len(ds)} pairs, dim {ds.feature_dim}, {args.regions} regions, seed {args.seed}, splits {counts}")
    return 0


# -- train ------------------------------------------------------------------------


def _config_from_args(args) -> RunConfig:
    overrides = {
        "mode": getattr(args, "mode", None),
        "epochs": getattr(args, "epochs", None),
        "seed": getattr(args, "seed", None),
        "dataset": getattr(args, "data", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "report": getattr(args, "report", None),
        "log": getattr(args, "log", None),
        "workers": getattr(args, "workers", None),
        "gradcheck_tolerance": getattr(args, "tolerance", None),
    }
    return load_config(args.config, args.preset, overrides)


def _split_arrays(ds, split: str):
    idx = ds.indices(split)
    if not idx:
        raise CommandError(f"split {split!r} of the dataset is empty")
    return [ds.records[i].image for i in idx], [ds.records[i].caption for i in idx], ds.image_matches(idx)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.dataset or not cfg.checkpoint:
        raise CommandError("train needs a dataset and a checkpoint path (config keys or --data/--checkpoint)")
    ds = load_dataset(cfg.dataset)
    images, captions, matches = _split_arrays(ds, cfg.train_split)
    eval_set = _split_arrays(ds, cfg.val_split) if ds.indices(cfg.val_split) else None
    est = CrossMediaRetriever(**cfg.estimator_params())
    provenance = {"run": cfg.to_dict()}
    ckpt = _out(cfg.checkpoint)
    best_path = ckpt.with_name(ckpt.stem + ".best" + ckpt.suffix)
    log_path = _out(cfg.log) if cfg.log else ckpt.with_suffix(".log.jsonl")

    log_fh = open(log_path, "w")
    log_fh.write(json.dumps({"config": provenance["run"]}, sort_keys=True) + "\n")

    def on_step(rec):
        log_fh.write(json.dumps(rec, sort_keys=True) + "\n")

    t0 = time.perf_counter()
    try:
        est.fit(images, captions, matches, eval_set=eval_set, callback=on_step)
    except NonFiniteLoss as exc:
        # parameters still hold the last finite update
        est.save(ckpt, extra=provenance)
        raise CommandError(f"training aborted: {exc}; last good parameters kept in {ckpt}") from None
    finally:
        log_fh.close()
    est.save(ckpt, extra=provenance)
    best = est.best_params_ if est.best_params_ is not None else est.params_
    est.save(best_path, params=best, extra={**provenance, "best_score": est.best_score_})
    last = est.history_[-1]["total"] if est.history_ else float("nan")
    print(
        f"trained {cfg.epochs} epochs ({est.n_steps_} steps, {time.perf_counter() - t0:.1f}s), "
        f"final loss {last:.4f}; checkpoint {ckpt}, best {best_path}, log {log_path}"
    )
    return 0


# -- eval -------------------------------------------------------------------------


def _load_estimator(path, workers: int | None = None) -> CrossMediaRetriever:
    try:
        est = CrossMediaRetriever.load(path)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot load checkpoint: {exc}") from None
    if workers is not None:
        est.set_params(workers=workers)
    return est


def cmd_eval(args) -> int:
    est = _load_estimator(args.checkpoint, args.workers)
    ds = load_dataset(args.data)
    if ds.feature_dim != est.feature_dim_:
        raise CommandError(f"dimension mismatch: checkpoint expects {est.feature_dim_}-d features, dataset has {ds.feature_dim}-d")
    images, captions, matches = _split_arrays(ds, args.split)
    mode = args.mode or est.mode
    i2t, t2i = est.evaluate(images, captions, matches, mode=mode)
    print(format_table(i2t, t2i))
    config = {"checkpoint": str(args.checkpoint), "dataset": str(args.data), "split": args.split, "mode": mode,
              "estimator": est.get_params()}
    report = args.report or f"report_{mode}.json"
    write_report(_out(report), [i2t, t2i], json.loads(json.dumps(config, default=list)))
    if args.sim_csv:
        write_similarity_csv(_out(args.sim_csv), est.similarity(images, captions, mode))
    print(f"report written to {report}")
    return 0


# -- gradcheck ----------------------------------------------------------------------


def gradcheck(cfg: RunConfig, feature_dim: int = 32, num_regions: int = 5) -> ad.GradCheckReport:
    """Finite-difference check of ``total_loss`` on a seeded 2-pair batch."""
    ds = generate_synthetic(SyntheticSpec(num_pairs=2, feature_dim=feature_dim, num_regions=num_regions, seed=cfg.seed, split=(1, 0, 0)))
    enc = cfg.encoder(feature_dim)
    params = init_params(enc, cfg.seed)
    est = CrossMediaRetriever(**cfg.estimator_params())
    loss_cfg = est._loss_config()
    texts = [make_text(r.caption, enc) for r in ds.records]
    images = [r.image for r in ds.records]
    triplets = sample_triplets([(0, 0), (1, 1)], np.random.default_rng(cfg.seed))
    channels = loss_cfg.channels

    def loss():
        img_b = encode_images(images, params, enc, channels)
        txt_b = encode_texts(texts, params, enc, channels)
        return total_loss(triplets, img_b, txt_b, loss_cfg)[0]

    entries = cfg.gradcheck_entries or None
    return ad.finite_difference_check(loss, params, tol=cfg.gradcheck_tolerance, max_entries=entries, seed=cfg.seed)


def cmd_gradcheck(args) -> int:
    cfg = _config_from_args(args)
    t0 = time.perf_counter()
    report = gradcheck(cfg)
    groups: dict[str, list[ad.ParamCheck]] = {}
    for p in report.params:
        groups.setdefault(_group(p.name), []).append(p)
    print(f"{'parameter group':32} {'checked':>8} {'max rel err':>12}  status")
    for name, checks in groups.items():
        worst = max(c.max_rel_error for c in checks)
        ok = all(c.passed for c in checks)
        print(f"{name:32} {sum(c.checked for c in checks):>8} {worst:>12.3e}  {'ok' if ok else 'FAIL'}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: max relative error {report.max_rel_error:.3e} (tolerance {report.tolerance:g}), {time.perf_counter() - t0:.1f}s")
    return 0 if report.passed else 1


def _group(name: str) -> str:
    """``text.global.lstm.W_i`` -> ``text.global.lstm``; ``head.text_local.bias`` -> ``head.text_local``."""
    return name.rsplit(".", 1)[0]


# -- encode ---------------------------------------------------------------------------


def cmd_encode(args) -> int:
    est = _load_estimator(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.feature_dim != est.feature_dim_:
        raise CommandError(f"dimension mismatch: checkpoint expects {est.feature_dim_}-d features, dataset has {ds.feature_dim}-d")
    idx = ds.indices(args.split)
    records = [ds.records[i] for i in idx]
    img_b = est.encode_images([r.image for r in records], "full")
    txt_b = est.encode_texts([r.caption for r in records], "full")
    with open(_out(args.out), "w") as fh:
        for r, ib, tb in zip(records, img_b, txt_b):
            fh.write(json.dumps({"id": r.id, "kind": "image", **ib.to_json()}) + "\n")
            fh.write(json.dumps({"id": r.id, "kind": "text", **tb.to_json()}) + "\n")
    print(f"wrote {2 * len(records)} embedding bundles to {args.out}")
    return 0


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multialign", description="Multi-level image/text alignment and retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic planted-concept dataset")
    g.add_argument("--pairs", type=int, required=True)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--regions", type=int, default=5)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--split", default="0.8,0,0.2", help="train,val,test fractions")
    g.add_argument("--out", default="data.jsonl")
    g.add_argument("--sidecar", action="store_true", help="store features as float32 in <out>.bin")
    g.set_defaults(func=cmd_gen_data)

    def run_flags(p):
        p.add_argument("--config", help="JSON run config; flags override it")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train and write final + best checkpoints and a JSONL log")
    run_flags(t)
    t.add_argument("--data")
    t.add_argument("--checkpoint")
    t.add_argument("--log")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Recall@K table and JSON report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--mode", choices=MODES)
    e.add_argument("--report")
    e.add_argument("--sim-csv", dest="sim_csv", help="also dump the similarity matrix")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the training loss")
    run_flags(c)
    c.add_argument("--mode", choices=MODES)
    c.add_argument("--tolerance", type=float)
    c.set_defaults(func=cmd_gradcheck)

    n = sub.add_parser("encode", help="dump embedding bundles as JSONL")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--split", default="all")
    n.add_argument("--out", default="embeddings.jsonl")
    n.set_defaults(func=cmd_encode)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, DatasetError, ValueError, OSError) as exc:
        print(f"multialign {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
