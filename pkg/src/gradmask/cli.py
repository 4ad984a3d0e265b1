"""Command-line entry point: ``gradmask <subcommand> ...``.

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .curation import (
    FilterCriteria,
    TemplateRecord,
    curate_templates,
    read_jsonl,
    run_filter,
    write_bank,
    write_jsonl,
)
from .errors import ConfigError, GradmaskError, NumericAbort
from .synth import Corpus, build_corpus

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("gradmask")


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _train_config(args):
    from .trainer import TrainConfig

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = TrainConfig.from_dict(base)
    d = cfg.to_dict()
    for key in ("epochs", "warmup_epochs", "batch_size", "seed", "lr", "beta", "score_every"):
        value = getattr(args, key)
        if value is not None:
            d[key] = value
    if args.alpha_n is not None:
        d["mask"]["alpha_n"] = args.alpha_n
    if args.alpha_i is not None:
        d["mask"]["alpha_i"] = args.alpha_i
    if args.eval_every_epoch:
        d["eval_every_epoch"] = True
    return TrainConfig.from_dict(d)


def cmd_gen_corpus(args):
    manifest = build_corpus(args.out, n=args.n, noise_rate=args.noise_rate, seed=args.seed,
                            n_test=args.n_test, test_noise_rate=args.test_noise_rate)
    _emit({k: manifest[k] for k in ("counts", "realized_noise_rate", "seed")})


def cmd_train(args):
    from .trainer import fit

    cfg = _train_config(args)
    corpus = Corpus.load(args.corpus)
    result = fit(corpus, cfg, args.out, resume=args.resume, stop_after_epoch=args.stop_after_epoch,
                 mask_audit=args.mask_audit, progress=True)
    means = result.epoch_means()
    _emit({"checkpoint": str(result.checkpoint), "epochs_run": len(means),
           "first_epoch_mean_total": means[0] if means else None,
           "last_epoch_mean_total": means[-1] if means else None})


def cmd_evaluate(args):
    from .trainer import evaluate_checkpoint

    _emit(evaluate_checkpoint(args.checkpoint, Corpus.load(args.corpus), args.split), args.out)


def cmd_dump_scores(args):
    from .trainer import dump_scores

    n = dump_scores(args.checkpoint, Corpus.load(args.corpus), args.out, args.split, args.limit)
    _emit({"captions": n, "out": args.out})


def cmd_filter(args):
    overrides = {f.name: getattr(args, f.name) for f in fields(FilterCriteria) if getattr(args, f.name) is not None}
    crit = FilterCriteria(**overrides)
    detections = read_jsonl(args.detections)
    poses = {str(r["image_id"]): r for r in read_jsonl(args.poses)} if args.poses else None
    accepted, audit = run_filter(detections, poses, crit)
    write_jsonl(args.accepted, accepted)
    write_jsonl(args.audit, audit)
    _emit({"records": len(detections), "accepted": len(accepted), "rejected": len(detections) - len(accepted)})


def cmd_curate_templates(args):
    records = [TemplateRecord.from_dict(r) for r in read_jsonl(args.templates)]
    bank = curate_templates(records, args.k, args.seed, args.per_cluster_random)
    write_bank(args.out, bank)
    _emit({"templates": len(records), "clusters": len(bank["clusters"]), "selected": len(bank["selected"])})


def cmd_report(args):
    epochs = [r for r in read_jsonl(args.metrics) if r.get("kind") == "epoch"]
    if not epochs:
        raise ConfigError(f"no epoch records in {args.metrics}")
    means = [r["mean_total"] for r in epochs]
    summary = {
        "epochs": len(epochs),
        "first_epoch_mean_total": means[0],
        "last_epoch_mean_total": means[-1],
        "ratio_last_to_first": means[-1] / means[0],
        "min_epoch_mean_total": float(np.min(means)),
    }
    if "test" in epochs[-1]:
        summary["last_test"] = epochs[-1]["test"]
    _emit(summary)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradmask", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic image/caption corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--noise-rate", type=float, default=0.2)
    g.add_argument("--test-noise-rate", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train on a corpus, checkpointing every epoch")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file mirroring TrainConfig")
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--alpha-n", type=float)
    t.add_argument("--alpha-i", type=float)
    t.add_argument("--score-every", type=int)
    t.add_argument("--eval-every-epoch", action="store_true")
    t.add_argument("--mask-audit", help="append every sampled mask plan to this JSON-lines file")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--stop-after-epoch", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="retrieval metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("dump-scores", help="per-token scores for captions")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--split", default="train")
    d.add_argument("--limit", type=int)
    d.set_defaults(func=cmd_dump_scores)

    f = sub.add_parser("filter", help="apply person-crop and pose rules to detection records")
    f.add_argument("--detections", required=True)
    f.add_argument("--poses", help="pose records keyed by image_id")
    f.add_argument("--accepted", required=True)
    f.add_argument("--audit", required=True)
    for fld in fields(FilterCriteria):
        f.add_argument("--" + fld.name.replace("_", "-"), type=type(fld.default), dest=fld.name)
    f.set_defaults(func=cmd_filter)

    c = sub.add_parser("curate-templates", help="cluster template embeddings and pick a bank")
    c.add_argument("--templates", required=True)
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--per-cluster-random", type=int, default=5)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_curate_templates)

    r = sub.add_parser("report", help="summarize a metrics log")
    r.add_argument("metrics")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except NumericAbort as e:
        log.error("numeric abort: %s", e)
        return EXIT_NUMERIC
    except ConfigError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except (GradmaskError, ValueError, OSError, KeyError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
