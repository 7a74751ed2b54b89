"""Training recipe: per-instance softmax cross-entropy over the candidate
list, Adam with the halving schedule, per-epoch held-out metrics, and a
best-MRR snapshot. Everything is a deterministic function of the config
seed."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .decoder import (OptimState, RankReport, adam_step, metrics_from_ranks,
                      npair_loss, rank_of)
from .graph import ModeFlags
from .model import (EncodedInstance, Model, ModelParams, build_vocab,
                    encode_instance)
from .synthdial import DialogInstance

log = logging.getLogger(__name__)


def validate_corpus(instances: Sequence[DialogInstance], cfg: RunConfig) -> None:
    """Reject corpus/config mismatches before any training happens."""
    if not instances:
        raise ValueError("corpus is empty")
    for inst in instances:
        d_v = inst.scene.features().shape[0]
        if d_v != cfg.d_v:
            raise ValueError(
                f"dialog {inst.dialog_id}: feature dimension {d_v} does not match "
                f"config d_v={cfg.d_v}")
        if len(inst.candidates) < 2:
            raise ValueError(f"dialog {inst.dialog_id}: needs at least 2 candidates")
        if not (0 <= inst.gt < len(inst.candidates)):
            raise ValueError(
                f"dialog {inst.dialog_id}: gt index {inst.gt} outside candidate list")


@dataclass
class TrainResult:
    log_rows: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_mrr: float = float("-inf")
    best_params: dict[str, np.ndarray] | None = None
    best_optim: OptimState | None = None


def evaluate(model: Model, instances: Sequence[EncodedInstance],
             collect_logits: bool = False) -> tuple[RankReport, list[np.ndarray]]:
    """Deterministic eval: dropout off, tape off, candidate encodings
    memoized within the pass (parameters are frozen for its duration)."""
    ranks, rows = [], []
    cache: dict = {}
    with T.no_grad():
        for enc in instances:
            logits = model.forward(enc, training=False,
                                   candidate_cache=cache).logits.data.reshape(-1)
            ranks.append(rank_of(logits, enc.gt))
            if collect_logits:
                rows.append(logits.copy())
    return metrics_from_ranks(ranks), rows


def train(train_set: Sequence[DialogInstance], val_set: Sequence[DialogInstance],
          cfg: RunConfig) -> tuple[Model, OptimState, TrainResult, "Vocab"]:
    """Full run: build vocab from the train split, fit, track best val MRR.

    Zero epochs returns the initialized model as the best snapshot with no
    log rows.
    """
    from .encoders import Vocab  # local to keep the signature annotation light

    validate_corpus(train_set, cfg)
    if val_set:
        validate_corpus(val_set, cfg)

    vocab = build_vocab(train_set, min_count=cfg.vocab_min_count)
    rng_params = np.random.default_rng([cfg.seed, 0])
    rng_dropout = np.random.default_rng([cfg.seed, 1])
    rng_shuffle = np.random.default_rng([cfg.seed, 2])

    params = ModelParams.init(cfg, len(vocab), rng_params)
    model = Model(params, cfg)
    named = params.named()
    optim = OptimState(base_lr=cfg.lr)

    enc_train = [encode_instance(i, vocab) for i in train_set]
    enc_val = [encode_instance(i, vocab) for i in val_set]

    result = TrainResult()
    if cfg.epochs == 0:
        result.best_params = params.state_dict()
        result.best_optim = copy.deepcopy(optim)
        return model, optim, result, vocab

    accum = max(1, cfg.accum_rounds)
    for epoch in range(cfg.epochs):
        optim.epoch = epoch
        order = rng_shuffle.permutation(len(enc_train))
        losses = []
        T.zero_grad(params.tensors())
        pending = 0
        for pos, idx in enumerate(order):
            enc = enc_train[int(idx)]
            res = model.forward(enc, training=True, drop_rng=rng_dropout)
            loss = npair_loss(res.logits, enc.gt)
            losses.append(loss.item())
            T.backward(T.scale(loss, 1.0 / accum))
            pending += 1
            if pending == accum or pos == len(order) - 1:
                adam_step(optim, named)
                T.zero_grad(params.tensors())
                pending = 0

        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if enc_val:
            report, _ = evaluate(model, enc_val)
            row.update({"MRR": report.mrr, "R@1": report.r_at_1,
                        "R@5": report.r_at_5, "R@10": report.r_at_10,
                        "Mean": report.mean_rank})
            if report.mrr > result.best_mrr:
                result.best_mrr = report.mrr
                result.best_epoch = epoch
                result.best_params = params.state_dict()
                result.best_optim = copy.deepcopy(optim)
        row["lr"] = optim.effective_lr()
        result.log_rows.append(row)
        log.info("epoch %d: loss %.4f%s", epoch, row["loss"],
                 f" val MRR {row['MRR']:.4f}" if "MRR" in row else "")

    if result.best_params is None:  # no validation split: final weights win
        result.best_params = params.state_dict()
        result.best_optim = copy.deepcopy(optim)
        result.best_epoch = cfg.epochs - 1
    return model, optim, result, vocab


def ablation_flags(cfg: RunConfig, extra: Sequence[str]) -> ModeFlags:
    return ModeFlags.from_config(cfg.with_ablations(list(extra)))
