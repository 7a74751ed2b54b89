#!/usr/bin/env python3
"""Finite-difference verification of the full model's analytic gradients on
the tiny preset; prints the per-parameter report."""

import time

import numpy as np

from cag.config import RunConfig
from cag.decoder import npair_loss
from cag.gradcheck import finite_diff_check
from cag.model import Model, ModelParams, build_vocab, encode_instance
from cag.synthdial import generate_dialog, generate_scene


def main() -> int:
    rng = np.random.default_rng([555, 2])
    scene = generate_scene(rng, 5)
    inst = generate_dialog(scene, rng, rounds=3, n_candidates=4)

    cfg = RunConfig(d=8, d_w=6, d_v=16, k_neighbors=2, steps=2, dropout=0.0, seed=1)
    vocab = build_vocab([inst])
    params = ModelParams.init(cfg, len(vocab), np.random.default_rng(42))
    model = Model(params, cfg)
    enc = encode_instance(inst, vocab)

    start = time.monotonic()
    report = finite_diff_check(
        lambda: npair_loss(model.forward(enc).logits, enc.gt),
        params.named(), step=1e-5, tol=1e-4)
    print(report.summary())
    print(f"elapsed: {time.monotonic() - start:.1f}s")
    return 0 if report.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
