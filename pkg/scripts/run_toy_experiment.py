#!/usr/bin/env python3
"""End-to-end toy experiment: generate a corpus, train, evaluate, and dump
an attention trace, all through the CLI entry points.

Usage: python scripts/run_toy_experiment.py [workdir]
"""

import json
import pathlib
import sys

from cag.cli import main
from cag.config import RunConfig
from cag.synthdial import CorpusManifest


def run(workdir: pathlib.Path) -> None:
    workdir.mkdir(parents=True, exist_ok=True)
    manifest = CorpusManifest(
        seed=101,
        splits={"train": 500, "val": 100, "test": 100},
        n_objects=6, rounds=4, candidates=10,
    )
    manifest_path = workdir / "manifest.json"
    manifest_path.write_text(manifest.to_json())

    config = RunConfig(d=64, d_w=32, d_v=16, k_neighbors=4, steps=3,
                       lr=4e-4, dropout=0.3, epochs=10, seed=13)
    config_path = workdir / "config.json"
    config_path.write_text(config.to_json())

    corpus = workdir / "corpus"
    out = workdir / "run"
    steps = [
        ["gen", "--manifest", str(manifest_path), "--out", str(corpus), "--force"],
        ["train", "--config", str(config_path), "--corpus", str(corpus),
         "--out", str(out)],
        ["eval", "--ckpt", str(out / "best.ckpt"), "--split", "val"],
        ["trace", "--ckpt", str(out / "best.ckpt"), "--dialog", "500",
         "--out", str(workdir / "trace_500.json")],
    ]
    for argv in steps:
        print(f"\n$ cag {' '.join(argv)}")
        rc = main(argv)
        if rc != 0:
            sys.exit(rc)

    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    best = max(rows, key=lambda r: r["MRR"])
    print(f"\nbest epoch {best['epoch']}: MRR={best['MRR']:.4f} R@1={best['R@1']:.3f}")


if __name__ == "__main__":
    run(pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "toy_run"))
