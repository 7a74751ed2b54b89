"""Command-line workflow: gen / train / eval / trace.

All commands are deterministic given their inputs; CAG_SEED in the
environment overrides the config seed for training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from collections import Counter

import numpy as np

from . import tensor as T
from .checkpoint import (Checkpoint, CheckpointError, build_model,
                         load_checkpoint, save_checkpoint)
from .config import RunConfig
from .decoder import rank_of
from .model import encode_instance, step_node_attention, top_attended
from .synthdial import (SPLIT_ORDER, CorpusManifest, generate_corpus,
                        load_manifest, load_split, save_corpus)
from .training import evaluate, train

log = logging.getLogger("cag")

SIMPLEX_TOL = 1e-9


class CliError(RuntimeError):
    """User-facing command failure (bad arguments or incompatible inputs)."""


def cmd_gen(args) -> int:
    manifest = CorpusManifest.from_file(args.manifest)
    corpus = generate_corpus(manifest)
    save_corpus(corpus, manifest, args.out, force=args.force)
    kinds = Counter(inst.current.form.kind
                    for split in corpus.values() for inst in split)
    total = sum(len(v) for v in corpus.values())
    print(f"wrote {total} dialogs to {args.out}")
    for split in SPLIT_ORDER:
        print(f"  {split}: {len(corpus.get(split, []))}")
    print("  final-question mix: "
          + ", ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
    return 0


def _resolve_seed(cfg: RunConfig) -> RunConfig:
    env = os.environ.get("CAG_SEED")
    if env is not None:
        cfg = dataclasses.replace(cfg, seed=int(env))
        log.info("CAG_SEED=%s overrides config seed", env)
    return cfg


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    cfg = _resolve_seed(cfg)
    # the corpus location is part of the run's identity (eval finds splits
    # through it); the output directory is not

    cfg = dataclasses.replace(cfg, corpus_dir=str(args.corpus))

    train_set = load_split(args.corpus, "train")
    try:
        val_set = load_split(args.corpus, "val")
    except FileNotFoundError:
        val_set = []

    model, optim, result, vocab = train(train_set, val_set, cfg)

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "metrics.jsonl")
    with open(log_path, "w") as fh:
        for row in result.log_rows:
            fh.write(json.dumps(row) + "\n")
    ckpt_path = os.path.join(args.out, "best.ckpt")
    save_checkpoint(ckpt_path, result.best_params, result.best_optim, vocab, cfg)
    print(f"wrote {log_path} ({len(result.log_rows)} rows) and {ckpt_path}")
    if result.best_epoch is not None and result.log_rows:
        print(f"best val MRR {result.best_mrr:.4f} at epoch {result.best_epoch}")
    return 0


def _load_for_eval(ckpt_path, corpus_arg, ablate):
    ckpt = load_checkpoint(ckpt_path)
    model = build_model(ckpt, extra_ablations=ablate)
    corpus_dir = corpus_arg or ckpt.config.corpus_dir
    if not corpus_dir:
        raise CliError("no corpus directory: pass --corpus or train with one recorded")
    return ckpt, model, corpus_dir


def _check_corpus_dims(ckpt: Checkpoint, instances) -> None:
    d_v = instances[0].scene.features().shape[0]
    if d_v != ckpt.config.d_v:
        raise CliError(
            f"corpus feature dimension {d_v} does not match checkpoint d_v="
            f"{ckpt.config.d_v}")


def cmd_eval(args) -> int:
    ablate = args.ablate.split(",") if args.ablate else []
    ckpt, model, corpus_dir = _load_for_eval(args.ckpt, args.corpus, ablate)
    instances = load_split(corpus_dir, args.split)
    if not instances:
        raise CliError(f"split {args.split!r} is empty")
    _check_corpus_dims(ckpt, instances)
    encoded = [encode_instance(i, ckpt.vocab) for i in instances]
    report, _ = evaluate(model, encoded)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _simplex(name: str, values: np.ndarray) -> list[float]:
    total = float(np.sum(values))
    if abs(total - 1.0) > SIMPLEX_TOL or np.min(values) < 0:
        raise ValueError(f"trace field {name} is not a probability simplex "
                         f"(sum={total!r})")
    return [float(v) for v in values]


def build_trace_doc(model, enc, result) -> dict:
    """Assemble and validate the per-step trace export for one dialog."""
    cfg = model.cfg
    n = enc.features.shape[1]
    k = min(cfg.k_neighbors, n)
    logits = result.logits.data.reshape(-1)
    steps = []
    for rec in result.trace.steps:
        if rec.adjacency.shape != (n, n):
            raise ValueError(f"trace step {rec.step}: adjacency shape "
                             f"{rec.adjacency.shape} does not match n={n}")
        if rec.neighbors.shape != (n, k):
            raise ValueError(f"trace step {rec.step}: neighbor lists shaped "
                             f"{rec.neighbors.shape}, expected ({n}, {k})")
        node_att = step_node_attention(rec.nodes_after, result.q_sentence,
                                       model.params.graph)
        steps.append({
            "t": rec.step,
            "alpha_q": _simplex(f"alpha_q[{rec.step}]", rec.alpha_q),
            "A": [[float(v) for v in row] for row in rec.adjacency],
            "S": [[int(v) for v in row] for row in rec.neighbors],
            "B": [_simplex(f"B[{rec.step}][{i}]", row)
                  for i, row in enumerate(rec.weights)],
            "M": [[float(v) for v in row] for row in rec.messages],
            "node_attention": _simplex(f"node_attention[{rec.step}]", node_att),
            "top2": top_attended(node_att, 2),
        })
    doc = {
        "dialog_id": enc.dialog_id,
        "steps": steps,
        "alpha_h": _simplex("alpha_h", result.trace.alpha_h),
        "alpha_g": _simplex("alpha_g", result.trace.alpha_g),
        "logits": [float(v) for v in logits],
        "predicted_rank": rank_of(logits, enc.gt),
        "gt": enc.gt,
    }
    if len(doc["steps"]) != model.flags.effective_steps:
        raise ValueError(f"trace has {len(doc['steps'])} step records, expected "
                         f"{model.flags.effective_steps}")
    return doc


def cmd_trace(args) -> int:
    ablate = args.ablate.split(",") if args.ablate else []
    ckpt, model, corpus_dir = _load_for_eval(args.ckpt, args.corpus, ablate)
    inst = None
    for split in SPLIT_ORDER:
        try:
            for cand in load_split(corpus_dir, split):
                if cand.dialog_id == args.dialog:
                    inst = cand
                    break
        except FileNotFoundError:
            continue
        if inst is not None:
            break
    if inst is None:
        raise CliError(f"dialog id {args.dialog} not found in {corpus_dir}")
    _check_corpus_dims(ckpt, [inst])
    enc = encode_instance(inst, ckpt.vocab)
    with T.no_grad():
        result = model.forward(enc, want_trace=True)
    doc = build_trace_doc(model, enc, result)
    with open(args.out, "w") as fh:
        fh.write(json.dumps(doc, sort_keys=True) + "\n")
    print(f"wrote trace for dialog {args.dialog} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cag",
        description="graph-inference visual dialog: corpus generation, "
                    "training, evaluation, and attention traces")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a corpus from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="overwrite existing corpus files")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train and checkpoint the best-MRR epoch")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="rank-metric report for a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", required=True, choices=SPLIT_ORDER)
    p.add_argument("--ablate", default="",
                   help="comma-separated ablations to apply at eval time")
    p.add_argument("--corpus", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("trace", help="export per-step attention data for one dialog")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dialog", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", default="")
    p.add_argument("--corpus", default=None)
    p.set_defaults(fn=cmd_trace)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FileExistsError, FileNotFoundError, ValueError, CheckpointError,
            CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
