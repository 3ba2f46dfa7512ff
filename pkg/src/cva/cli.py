"""``cva`` command line: gen-data, stats, augment, train, eval, diagnose, boundary-iou, check-config.

Exit codes: 0 success, 1 validation error (bad flags, config, manifest, files), 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional


log = logging.getLogger("cva")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# JSON schemas for the --json reports
_NUM = {"type": "number"}
SCHEMAS = {
    "stats": {
        "type": "object",
        "required": ["mu_gt", "sigma_gt", "mu_non", "sigma_non", "theta_min", "theta_max", "alpha", "beta",
                     "n_gt", "n_non"],
        "properties": {k: _NUM for k in ("mu_gt", "sigma_gt", "mu_non", "sigma_non", "theta_min", "theta_max",
                                         "alpha", "beta")} | {"n_gt": {"type": "integer"},
                                                              "n_non": {"type": "integer"}},
    },
    "boundary-iou": {
        "type": "object",
        "required": ["start", "end", "combined", "w"],
        "properties": {"start": _NUM, "end": _NUM, "combined": _NUM, "w": _NUM},
    },
    "eval": {
        "type": "object",
        "required": ["r1", "map_at_05", "map_at_075", "map_avg", "miou", "hd_map", "hit_at_1", "boundary_iou",
                     "boundary_iou_all", "n_queries"],
        "properties": {
            "r1": {"type": "object", "additionalProperties": _NUM},
            "map_at_05": _NUM, "map_at_075": _NUM, "map_avg": _NUM, "miou": _NUM, "hd_map": _NUM,
            "hit_at_1": _NUM, "n_queries": {"type": "integer"},
            "boundary_iou": {"type": "object", "required": ["start", "end", "combined", "n"]},
            "boundary_iou_all": {"type": "object", "required": ["start", "end", "combined", "n"]},
        },
    },
    "diagnose": {
        "type": "object",
        "required": ["mode", "seed", "unmasked", "spurious", "delta"],
        "properties": {
            "mode": {"enum": ["zero", "random"]},
            "seed": {"type": "integer"},
            "unmasked": {"type": "object", "additionalProperties": _NUM},
            "spurious": {"type": "object", "additionalProperties": _NUM},
            "delta": {"type": "object", "additionalProperties": _NUM},
        },
    },
    "gen-data": {
        "type": "object",
        "required": ["manifest", "n_videos", "seed"],
        "properties": {"manifest": {"type": "string"}, "n_videos": {"type": "integer"}, "seed": {"type": "integer"}},
    },
    "augment": {
        "type": "object",
        "required": ["records", "fallbacks", "theta_min", "theta_max"],
        "properties": {"records": {"type": "array"}, "fallbacks": {"type": "integer"},
                       "theta_min": _NUM, "theta_max": _NUM},
    },
    "train": {
        "type": "object",
        "required": ["out", "steps", "final_loss"],
        "properties": {"out": {"type": "string"}, "steps": {"type": "integer"}, "final_loss": _NUM,
                       "eval": {"type": ["object", "null"]}},
    },
}


def default_seed() -> int:
    return int(os.environ.get("CVA_SEED", "0"))


def _span(text: str):
    try:
        s, e = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise UsageError(f"expected 'start,end', got {text!r}") from exc
    if e < s:
        raise UsageError(f"span end < start in {text!r}")
    return s, e


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cva", description=__doc__.splitlines()[0])
    p.add_argument("--json", action="store_true", help="emit JSON instead of tables")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--n-train", type=int, default=100)
    g.add_argument("--n-eval", type=int, default=25)
    g.add_argument("--clip-count", type=int, default=32)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--concepts", type=int, default=4)
    g.add_argument("--moment-min", type=int, default=4)
    g.add_argument("--moment-max", type=int, default=12)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--clip-seconds", type=float, default=2.0)
    g.add_argument("--orthogonal", action="store_true")
    g.add_argument("--confusable", type=float, default=None, help="cosine between concepts 0 and 1")

    s = sub.add_parser("stats", help="dataset similarity statistics and the sampling band")
    s.add_argument("--manifest", required=True)
    s.add_argument("--alpha", type=float, default=10.0)
    s.add_argument("--beta", type=float, default=60.0)
    s.add_argument("--split", default="train", help="train|eval|all")

    a = sub.add_parser("augment", help="write QCD-mixed views of every training record")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--alpha", type=float, default=10.0)
    a.add_argument("--beta", type=float, default=60.0)
    a.add_argument("--ratio", type=float, default=0.3)
    a.add_argument("--context", type=int, default=1)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", default=None, help="JSON TrainConfig; omitted keys take defaults")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--w", type=float, default=2.0, help="boundary width in seconds")
    e.add_argument("--per-query", action="store_true")

    d = sub.add_parser("diagnose", help="target-masked spurious-correlation diagnostic")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--manifest", required=True)
    d.add_argument("--mode", choices=["zero", "random"], required=True)
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--split", default="eval")

    b = sub.add_parser("boundary-iou", help="Boundary-IoU of two spans in seconds")
    b.add_argument("--gt", required=True, type=_span)
    b.add_argument("--pred", required=True, type=_span)
    b.add_argument("--w", type=float, default=2.0)

    c = sub.add_parser("check-config", help="validate a TrainConfig JSON file and print it resolved")
    c.add_argument("--config", required=True)

    sub.add_parser("schema", help="print the JSON schemas of --json reports")
    return p


def _emit(args, payload: dict, table: str):
    if args.json:
        print(json.dumps(payload, indent=1, sort_keys=True))
    else:
        print(table)


def _load_config(path: Optional[str], seed: Optional[int]):
    from .trainer import TrainConfig

    cfg = TrainConfig()
    if path:
        try:
            cfg = TrainConfig.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"bad config {path}: {exc}") from exc
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def _records(ds, split):
    return ds.records(None if split == "all" else split)


def cmd_gen_data(args):
    from .data import SyntheticConfig, generate_synthetic, save_dataset

    seed = default_seed() if args.seed is None else args.seed
    cfg = SyntheticConfig(
        n_train=args.n_train, n_eval=args.n_eval, clip_count=args.clip_count, dim=args.dim,
        n_concepts=args.concepts, moment_len=(args.moment_min, args.moment_max), noise=args.noise,
        clip_seconds=args.clip_seconds, orthogonal=args.orthogonal, confusable_similarity=args.confusable,
    )
    log.info("gen-data config=%s seed=%d", cfg, seed)
    ds = generate_synthetic(cfg, seed)
    path = save_dataset(ds, args.out)
    _emit(args, {"manifest": str(path), "n_videos": len(ds.videos), "seed": seed},
          f"wrote {len(ds.videos)} videos to {path}")


def cmd_stats(args):
    from .data import load_dataset
    from .qcd import compute_similarity_stats

    ds = load_dataset(args.manifest)
    if args.split != "all":
        ds = ds.subset(args.split)
    st = compute_similarity_stats(ds, args.alpha, args.beta)
    rep = st.report()
    table = "\n".join(f"{k:>10}: {v:.6f}" if isinstance(v, float) else f"{k:>10}: {v}" for k, v in rep.items())
    _emit(args, rep, table)


def cmd_augment(args):
    from .data import load_dataset, record_rng, write_tensor_file
    from .qcd import augment_pair, compute_similarity_stats

    seed = default_seed() if args.seed is None else args.seed
    ds = load_dataset(args.manifest).subset("train")
    st = compute_similarity_stats(ds, args.alpha, args.beta)
    out = Path(args.out)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    entries, fallbacks = [], 0
    for rec in ds.records():
        a, b = augment_pair(ds, rec, st, args.context, args.ratio, record_rng(seed, rec.query_id, 0, 0))
        for tag, view in (("a", a), ("b", b)):
            write_tensor_file(out / "tensors" / f"{rec.query_id}.{tag}.cvaf", view.video.features)
        fallbacks += a.fallbacks + b.fallbacks
        entries.append({
            "query_id": rec.query_id, "source_video": a.source_video,
            "views": [{"path": f"tensors/{rec.query_id}.{t}.cvaf",
                       "replaced": {str(k): v for k, v in sorted(view.sources.items())},
                       "fallbacks": view.fallbacks} for t, view in (("a", a), ("b", b))],
        })
    payload = {"records": entries, "fallbacks": fallbacks, "theta_min": st.theta_min, "theta_max": st.theta_max,
               "seed": seed}
    (out / "augment_log.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    summary = dict(payload, records=[{"query_id": e["query_id"]} for e in entries])
    _emit(args, summary, f"augmented {len(entries)} records, {fallbacks} empty-pool fallbacks -> {out}")


def cmd_train(args):
    from .data import load_dataset
    from .trainer import fit

    cfg = _load_config(args.config, default_seed() if args.seed is None and args.config is None else args.seed)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    log.info("seed=%d", cfg.seed)
    ds = load_dataset(args.manifest)
    if cfg.model.d_v != ds.d_v or cfg.model.d_t != ds.d_t:
        cfg.model.d_v, cfg.model.d_t = ds.d_v, ds.d_t
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")

    def progress(epoch, last, dt):
        log.info("epoch %d loss %.4f (%.0fs)", epoch, last.get("loss", float("nan")), dt)

    res = fit(ds, cfg, out_dir=args.out, resume=args.resume, progress=progress)
    train_logs = [h for h in res.history if h["type"] == "train"]
    rep = res.report.to_dict(per_query=False) if res.report else None
    payload = {"out": args.out, "steps": res.state.step,
               "final_loss": train_logs[-1]["loss"] if train_logs else 0.0, "eval": rep}
    _emit(args, payload, (res.report.table() if res.report else "no eval split") + f"\ncheckpoint: {args.out}/ckpt")


def _load(args):
    from .data import load_dataset
    from .trainer import CheckpointError, load_model

    try:
        model, header = load_model(args.ckpt)
    except (CheckpointError, KeyError, FileNotFoundError) as exc:
        raise UsageError(f"cannot load checkpoint {args.ckpt}: {exc}") from exc
    ds = load_dataset(args.manifest)
    if (model.cfg.d_v, model.cfg.d_t) != (ds.d_v, ds.d_t):
        raise UsageError(f"checkpoint dims ({model.cfg.d_v}, {model.cfg.d_t}) incompatible with dataset "
                         f"({ds.d_v}, {ds.d_t})")
    return model, header, ds


def cmd_eval(args):
    from .metrics import evaluate_model

    model, _, ds = _load(args)
    rep = evaluate_model(model, ds, _records(ds, args.split), w=args.w)
    _emit(args, rep.to_dict(per_query=args.per_query), rep.table())


def cmd_diagnose(args):
    from .metrics import SPURIOUS_KEYS, spurious_diagnostic

    seed = default_seed() if args.seed is None else args.seed
    model, _, ds = _load(args)
    rep = spurious_diagnostic(model, ds, args.mode, seed, _records(ds, args.split))
    lines = [f"{'metric':>10} | {'unmasked':>9} | {'masked':>9} | {'delta':>9}"]
    for k in SPURIOUS_KEYS:
        lines.append(f"{k:>10} | {100 * rep['unmasked'][k]:9.2f} | {100 * rep['spurious'][k]:9.2f} | "
                     f"{100 * rep['delta'][k]:+9.2f}")
    _emit(args, rep, "\n".join(lines))


def cmd_boundary_iou(args):
    from .metrics import boundary_iou

    s, e, c = boundary_iou(args.gt, args.pred, args.w)
    _emit(args, {"start": s, "end": e, "combined": c, "w": args.w},
          f"start {s:.4f}  end {e:.4f}  boundary-iou {c:.4f}")


def cmd_check_config(args):
    cfg = _load_config(args.config, None)
    print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


def cmd_schema(args):
    print(json.dumps(SCHEMAS, indent=1, sort_keys=True))


COMMANDS = {
    "gen-data": cmd_gen_data, "stats": cmd_stats, "augment": cmd_augment, "train": cmd_train,
    "eval": cmd_eval, "diagnose": cmd_diagnose, "boundary-iou": cmd_boundary_iou,
    "check-config": cmd_check_config, "schema": cmd_schema,
}


def run(argv: Optional[List[str]] = None) -> int:
    from .data import DatasetError, FormatError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"cva: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, DatasetError, FormatError, ValueError) as exc:
        print(f"cva: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"cva: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
