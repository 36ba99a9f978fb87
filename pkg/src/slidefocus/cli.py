"""Command line harness: dataset synthesis, training, inference, exports.

Heavy imports happen inside the subcommand handlers so --threads can pin
the BLAS thread pools before numpy loads; --threads 1 is the reference
mode for bit-exactness comparisons. Failures print one machine-readable
JSON object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class CliError(Exception):
    """User-facing failure with a short kind tag for the error JSON."""

    def __init__(self, kind: str, message: str, **extra):
        super().__init__(message)
        self.kind = kind
        self.extra = extra


class _Parser(argparse.ArgumentParser):
    # argparse normally prints usage and exits; route through the JSON path
    def error(self, message):
        raise CliError("usage", message)


def _emit_error(kind: str, message: str, **extra) -> None:
    payload = {"error": kind, "message": message}
    payload.update(extra)
    json.dump(payload, sys.stderr)
    sys.stderr.write("\n")


def _print(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _resolve_config(args):
    """--config file wins; otherwise preset defaults; --seed overrides."""
    from .config import PipelineConfig, replace

    if getattr(args, "config", None):
        try:
            cfg = PipelineConfig.load(args.config)
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise CliError("config", f"cannot load config: {exc}")
    elif getattr(args, "preset", None):
        cfg = PipelineConfig(preset=args.preset)
    else:
        cfg = PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _load_model(args):
    from . import training

    if not getattr(args, "checkpoint", None):
        raise CliError("usage", "--checkpoint is required")
    try:
        return training.load_model(args.checkpoint)
    except FileNotFoundError:
        raise CliError("checkpoint", f"no checkpoint at {args.checkpoint!r}")


def _split_ids(data, split: str):
    if split == "train":
        return data.train_ids
    if split == "test":
        return data.test_ids
    if split == "all":
        return data.train_ids + data.test_ids
    raise CliError("usage", f"unknown split {split!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .slides import SynthConfig, make_dataset

    overrides = {}
    if args.config:
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError("config", f"cannot load slide config: {exc}")
    base_fields = dict(width=args.width, height=args.height,
                       class_count=args.classes)
    if args.marker_textures:
        base_fields.update(marker_texture=True, unfavorable_probability=0.5)
    base_fields.update(overrides)
    base = SynthConfig.from_json(base_fields)
    themes = [{"lesion_count_range": (0, 0)}]
    for cls in range(1, args.classes):
        themes.append({"lesion_count_range": (1, 2),
                       "lesion_class_range": (cls, cls)})
    index = make_dataset(args.out, base, themes, args.train_per_class,
                         args.test_per_class, args.seed)
    _print({"out": args.out, "classes": args.classes,
            "train": len(index["train"]), "test": len(index["test"]),
            "seed": args.seed})
    return 0


def cmd_train(args) -> int:
    from . import training
    from .slides import SlideSet

    cfg = None if args.resume else _resolve_config(args)
    data = SlideSet(args.data)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    log = (lambda msg: print(msg, file=sys.stderr)) if not args.quiet \
        else None
    if args.resume:
        if not os.path.exists(ckpt):
            raise CliError("checkpoint", f"nothing to resume at {ckpt!r}")
        trainer = training.Trainer.resume(ckpt, data, log=log)
    else:
        trainer = training.Trainer(cfg, data, log=log)
    try:
        result = trainer.train(epoch_budget=args.epoch_budget)
    except training.DivergenceError as exc:
        trainer.save(os.path.join(args.out, "diverged.ckpt"))
        _write_json(os.path.join(args.out, "diverged.json"), exc.dump)
        raise
    trainer.save(ckpt)
    trainer.cfg.save(os.path.join(args.out, "config.json"))
    _write_json(os.path.join(args.out, "history.json"), result.to_json())
    with open(os.path.join(args.out, "history.csv"), "w") as fh:
        fh.write(training.history_csv(result.history))
    _print({"checkpoint": ckpt, "phase": trainer.state.phase,
            "epochs": len(result.history),
            "best_val_accuracy": result.best_val_accuracy,
            "best_epoch": result.best_epoch,
            "train_slides": len(result.train_ids),
            "val_slides": len(result.val_ids)})
    return 0


def _gather_records(args):
    from .slides import SlideSet, load_slide

    records = []
    for path in args.slide or []:
        records.append(load_slide(path))
    if args.data:
        data = SlideSet(args.data)
        for sid in _split_ids(data, args.split):
            records.append(data.get(sid))
    if not records:
        raise CliError("usage", "give --slide and/or --data")
    return records


def cmd_infer(args) -> int:
    from .inference import infer_slide

    ps, cfg, _ = _load_model(args)
    results = [infer_slide(ps, cfg, rec, mode=args.mode).to_json()
               for rec in _gather_records(args)]
    payload = {"mode": args.mode, "count": len(results), "results": results}
    if args.out:
        _write_json(args.out, payload)
    _print(payload)
    return 0


def cmd_focus_map(args) -> int:
    from .inference import focus_map_export
    from .slides import load_slide

    ps, cfg, _ = _load_model(args)
    summary = focus_map_export(ps, cfg, load_slide(args.slide), args.out)
    _print(summary)
    return 0


def cmd_prototypes(args) -> int:
    from . import pipeline, prototypes as pr
    from .slides import load_slide

    ps, cfg, _ = _load_model(args)
    record = load_slide(args.slide)
    graph = pipeline.thumbnail_graph(record, cfg, with_mask=False)
    out = pipeline.run_slide(ps, cfg, record, graph=graph, crop_mask=False)
    os.makedirs(args.out, exist_ok=True)
    summary = {"slide_id": record.slide_id, "prototypes": 0, "rasters": []}
    if out.vocab is not None:
        rasters = pr.prototype_rasters(out.runs, out.vocab)
        summary["prototypes"] = out.vocab.count
        summary["truncated"] = out.vocab.truncated
        summary["inertia"] = round(out.vocab.inertia[-1], 6)
        for i, (rect, ids) in enumerate(rasters):
            name = f"prototypes_{i:02d}.png"
            pr.save_prototype_png(os.path.join(args.out, name), ids,
                                  out.vocab.count)
            summary["rasters"].append({"rect": list(rect), "file": name})
    _write_json(os.path.join(args.out, "prototypes.json"), summary)
    _print(summary)
    return 0


def cmd_mine_markers(args) -> int:
    from . import markers, pipeline
    from .slides import SlideSet

    ps, cfg, _ = _load_model(args)
    data = SlideSet(args.data)
    ids = _split_ids(data, args.split)
    entries = []
    spatial = {}
    for sid in ids:
        record = data.get(sid)
        out = pipeline.run_slide(ps, cfg, record)
        entries.append((sid, data.tag(sid), out.runs))
        stats = markers.spatial_stats(record.mask, cfg.class_count)
        spatial[sid] = {k: round(v, 6) if isinstance(v, float) else v
                        for k, v in stats.items()}
    corpus = markers.collect_focus_features(entries)
    k = args.clusters if args.clusters is not None else cfg.marker_clusters
    clusters = markers.mine_clusters(corpus, k, seed=cfg.seed,
                                     min_size=args.min_size,
                                     min_purity=args.min_purity)
    report = markers.cluster_report(clusters, corpus)
    os.makedirs(args.out, exist_ok=True)
    coords, _, explained = markers.project_2d(corpus.features)
    png = os.path.join(args.out, "markers_projection.png")
    markers.save_projection_png(png, coords, corpus.tags)
    payload = {"corpus_size": corpus.size, "requested_clusters": k,
               "clusters": report,
               "explained_variance": [round(float(e), 6) for e in explained],
               "spatial": spatial,
               "projection_png": os.path.basename(png)}
    _write_json(os.path.join(args.out, "markers.json"), payload)
    _print({"corpus_size": corpus.size, "clusters": len(report),
            "out": args.out})
    return 0


def cmd_eval(args) -> int:
    from . import training
    from .slides import SlideSet

    ps, cfg, _ = _load_model(args)
    data = SlideSet(args.data)
    ids = _split_ids(data, args.split)
    report = training.evaluate(ps, cfg, data, ids,
                               with_losses=args.with_losses)
    if cfg.class_count == 2:
        rows = report["predictions"]
        report["auc"] = round(training.rank_auc(
            [rows[s]["probabilities"][1] for s in ids],
            [rows[s]["label"] for s in ids]), 6)
    if args.out:
        _write_json(args.out, report)
    summary = {k: v for k, v in report.items() if k != "predictions"}
    _print(summary)
    return 0


def cmd_grad_check(args) -> int:
    from .pipeline import AUDIT_TERMS, gradient_audit

    terms = {}
    worst, total_sec = 0.0, 0.0
    for term in AUDIT_TERMS:
        err, names, seconds = gradient_audit(seed=args.seed or 0, term=term)
        terms[term] = {"max_rel_err": float(err), "tensors": len(names)}
        worst = max(worst, err)
        total_sec += seconds
    ok = worst <= 1e-4
    _print({"terms": terms, "max_rel_err": float(worst),
            "seconds": round(total_sec, 2), "pass": bool(ok)})
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    p = _Parser(prog="slidefocus",
                description="Two-stage whole-slide classification.")
    p.add_argument("--threads", type=int, metavar="N",
                   help="pin BLAS thread pools (1 = reference mode)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, *names):
        if "config" in names:
            sp.add_argument("--config", metavar="PATH",
                            help="config JSON file")
        if "seed" in names:
            sp.add_argument("--seed", type=int, metavar="INT")
        if "checkpoint" in names:
            sp.add_argument("--checkpoint", metavar="PATH")
        if "preset" in names:
            sp.add_argument("--preset", choices=("desk", "main", "supp"))

    sp = sub.add_parser("synth", help="generate a synthetic slide dataset")
    sp.add_argument("--out", required=True, metavar="DIR")
    common(sp, "config", "seed")
    sp.set_defaults(seed=0)
    sp.add_argument("--classes", type=int, default=2)
    sp.add_argument("--width", type=int, default=512)
    sp.add_argument("--height", type=int, default=512)
    sp.add_argument("--train-per-class", type=int, default=8)
    sp.add_argument("--test-per-class", type=int, default=2)
    sp.add_argument("--marker-textures", action="store_true",
                    help="stamp prognosis-tagged texture variants")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="two-phase training run")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--out", required=True, metavar="DIR")
    common(sp, "config", "seed", "preset")
    sp.add_argument("--resume", action="store_true",
                    help="continue from DIR/model.ckpt (ignores --config)")
    sp.add_argument("--epoch-budget", type=int, metavar="N",
                    help="run at most N epochs, then park resumably")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="classify slides from a checkpoint")
    common(sp, "checkpoint")
    sp.add_argument("--slide", action="append", metavar="DIR",
                    help="slide directory (repeatable)")
    sp.add_argument("--data", metavar="DIR", help="dataset directory")
    sp.add_argument("--split", default="test",
                    choices=("train", "test", "all"))
    sp.add_argument("--mode", default="focused",
                    choices=("focused", "exhaustive"))
    sp.add_argument("--out", metavar="PATH", help="also write results JSON")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("focus-map",
                        help="export focus/saliency overlays for one slide")
    common(sp, "checkpoint")
    sp.add_argument("--slide", required=True, metavar="DIR")
    sp.add_argument("--out", required=True, metavar="DIR")
    sp.set_defaults(func=cmd_focus_map)

    sp = sub.add_parser("prototypes",
                        help="export per-slide prototype rasters")
    common(sp, "checkpoint")
    sp.add_argument("--slide", required=True, metavar="DIR")
    sp.add_argument("--out", required=True, metavar="DIR")
    sp.set_defaults(func=cmd_prototypes)

    sp = sub.add_parser("mine-markers",
                        help="cluster focus features across slides")
    common(sp, "checkpoint")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--split", default="all",
                    choices=("train", "test", "all"))
    sp.add_argument("--clusters", type=int, metavar="K")
    sp.add_argument("--min-size", type=int, default=5)
    sp.add_argument("--min-purity", type=float, default=0.95)
    sp.add_argument("--out", required=True, metavar="DIR")
    sp.set_defaults(func=cmd_mine_markers)

    sp = sub.add_parser("eval", help="accuracy/AUC over a dataset split")
    common(sp, "checkpoint")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--split", default="test",
                    choices=("train", "test", "all"))
    sp.add_argument("--with-losses", action="store_true")
    sp.add_argument("--out", metavar="PATH",
                    help="write the full per-slide report JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grad-check",
                        help="finite-difference audit of the full objective")
    common(sp, "seed")
    sp.set_defaults(func=cmd_grad_check)

    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        _emit_error(exc.kind, str(exc))
        return 2
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except CliError as exc:
        _emit_error(exc.kind, str(exc), **exc.extra)
        return 1
    except Exception as exc:  # noqa: BLE001 - process boundary
        extra = {"dump": exc.dump} if hasattr(exc, "dump") else {}
        _emit_error(type(exc).__name__, str(exc), **extra)
        return 1


if __name__ == "__main__":
    sys.exit(main())
