import hashlib
import json

import numpy as np
import pytest

from cag.checkpoint import (CheckpointError, build_model, load_checkpoint,
                            save_checkpoint)
from cag.cli import main
from cag.model import encode_instance
from cag.synthdial import CorpusManifest
from cag.training import evaluate, train
from conftest import tiny_run_config, write_config, write_manifest


def file_hash(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus_dir, tiny_corpus):
    """One real `cag train` run shared by the CLI tests."""
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_run_config(epochs=2, seed=8)
    cfg_path = write_config(out / "config.json", cfg)
    rc = main(["train", "--config", cfg_path, "--corpus", str(corpus_dir),
               "--out", str(out)])
    assert rc == 0
    return out, cfg


class TestGen:
    def test_writes_splits_and_prints_summary(self, tmp_path, capsys):
        manifest = CorpusManifest(seed=31, splits={"train": 5, "val": 2, "test": 1},
                                  n_objects=4, rounds=3, candidates=6)
        mpath = write_manifest(tmp_path / "manifest.json", manifest)
        rc = main(["gen", "--manifest", mpath, "--out", str(tmp_path / "corpus")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "wrote 8 dialogs" in out and "final-question mix" in out
        lines = (tmp_path / "corpus" / "train.jsonl").read_text().splitlines()
        assert len(lines) == 5

    def test_refuses_overwrite_without_force(self, tmp_path, capsys):
        manifest = CorpusManifest(seed=32, splits={"train": 2, "val": 0, "test": 0},
                                  n_objects=4, rounds=2, candidates=4)
        mpath = write_manifest(tmp_path / "m.json", manifest)
        out = str(tmp_path / "c")
        assert main(["gen", "--manifest", mpath, "--out", out]) == 0
        assert main(["gen", "--manifest", mpath, "--out", out]) == 2
        assert "refusing" in capsys.readouterr().err
        assert main(["gen", "--manifest", mpath, "--out", out, "--force"]) == 0

    def test_rerun_is_byte_identical(self, tmp_path):
        manifest = CorpusManifest(seed=33, splits={"train": 6, "val": 2, "test": 2},
                                  n_objects=4, rounds=3, candidates=6)
        mpath = write_manifest(tmp_path / "m.json", manifest)
        hashes = []
        for name in ("one", "two"):
            out = tmp_path / name
            assert main(["gen", "--manifest", mpath, "--out", str(out)]) == 0
            hashes.append(tuple(file_hash(out / f"{s}.jsonl")
                                for s in ("train", "val", "test")))
        assert hashes[0] == hashes[1]

    def test_split_ids_disjoint(self, tmp_path):
        manifest = CorpusManifest(seed=34, splits={"train": 4, "val": 3, "test": 2},
                                  n_objects=4, rounds=2, candidates=4)
        mpath = write_manifest(tmp_path / "m.json", manifest)
        out = tmp_path / "c"
        main(["gen", "--manifest", mpath, "--out", str(out)])
        ids = {}
        for split in ("train", "val", "test"):
            ids[split] = {json.loads(l)["id"]
                          for l in (out / f"{split}.jsonl").read_text().splitlines()}
        assert not (ids["train"] & ids["val"]) and not (ids["val"] & ids["test"])


class TestTrainCommand:
    def test_outputs_exist_with_expected_rows(self, trained):
        out, cfg = trained
        rows = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        assert len(rows) == cfg.epochs
        assert list(rows[0]) == ["epoch", "loss", "MRR", "R@1", "R@5", "R@10", "Mean", "lr"]
        assert (out / "best.ckpt").exists()

    def test_identical_config_gives_identical_bytes(self, tmp_path, corpus_dir):
        cfg = tiny_run_config(epochs=1, seed=12)
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg_path = write_config(tmp_path / f"{name}.json", cfg)
            assert main(["train", "--config", cfg_path, "--corpus", str(corpus_dir),
                         "--out", str(out)]) == 0
            digests.append((file_hash(out / "metrics.jsonl"), file_hash(out / "best.ckpt")))
        assert digests[0] == digests[1]

    def test_zero_epochs_emits_checkpoint_and_empty_log(self, tmp_path, corpus_dir):
        cfg_path = write_config(tmp_path / "c.json", tiny_run_config(epochs=0))
        out = tmp_path / "run"
        assert main(["train", "--config", cfg_path, "--corpus", str(corpus_dir),
                     "--out", str(out)]) == 0
        assert (out / "metrics.jsonl").read_text() == ""
        load_checkpoint(out / "best.ckpt")

    def test_lr_halves_at_epoch_ten(self, tmp_path, corpus_dir, tiny_corpus):
        # 11 epochs on a 2-instance corpus keeps this quick
        cfg = tiny_run_config(epochs=11, seed=1, lr=4e-4)
        _, _, result, _ = train(tiny_corpus["train"][:2], [], cfg)
        assert result.log_rows[9]["lr"] == pytest.approx(4e-4)
        assert result.log_rows[10]["lr"] == pytest.approx(2e-4)

    def test_cag_seed_env_overrides_config(self, tmp_path, corpus_dir, monkeypatch):
        base = tiny_run_config(epochs=1, seed=1)
        cfg_path = write_config(tmp_path / "c.json", base)

        monkeypatch.setenv("CAG_SEED", "77")
        out_env = tmp_path / "env"
        assert main(["train", "--config", cfg_path, "--corpus", str(corpus_dir),
                     "--out", str(out_env)]) == 0
        monkeypatch.delenv("CAG_SEED")

        cfg77 = write_config(tmp_path / "c77.json", tiny_run_config(epochs=1, seed=77))
        out_direct = tmp_path / "direct"
        assert main(["train", "--config", cfg77, "--corpus", str(corpus_dir),
                     "--out", str(out_direct)]) == 0
        assert file_hash(out_env / "metrics.jsonl") == file_hash(out_direct / "metrics.jsonl")

    def test_dim_mismatch_rejected(self, tmp_path, corpus_dir, capsys):
        cfg_path = write_config(tmp_path / "c.json", tiny_run_config(d_v=9))
        rc = main(["train", "--config", cfg_path, "--corpus", str(corpus_dir),
                   "--out", str(tmp_path / "run")])
        assert rc == 2
        assert "d_v" in capsys.readouterr().err


class TestEvalCommand:
    def test_report_fields_and_determinism(self, trained, capsys):
        out, _ = trained
        reports = []
        for _ in range(2):
            assert main(["eval", "--ckpt", str(out / "best.ckpt"), "--split", "val"]) == 0
            reports.append(capsys.readouterr().out)
        assert reports[0] == reports[1]
        doc = json.loads(reports[0])
        assert set(doc) == {"Mean", "MRR", "R@1", "R@5", "R@10", "instances"}
        assert doc["R@10"] == 1.0  # C=6 candidates, every rank is within 10

    def test_ablate_flag_is_applied(self, trained, tmp_path, tiny_corpus):
        # ranks can coincide on a tiny split, so compare raw logits via trace
        out, _ = trained
        dialog_id = tiny_corpus["val"][0].dialog_id
        base, ablated = tmp_path / "base.json", tmp_path / "ablated.json"
        assert main(["trace", "--ckpt", str(out / "best.ckpt"),
                     "--dialog", str(dialog_id), "--out", str(base)]) == 0
        assert main(["trace", "--ckpt", str(out / "best.ckpt"),
                     "--dialog", str(dialog_id), "--out", str(ablated),
                     "--ablate", "no_g_att,no_u"]) == 0
        a = json.loads(base.read_text())
        b = json.loads(ablated.read_text())
        assert a["logits"] != b["logits"]
        n = len(tiny_corpus["val"][0].scene.objects)
        assert b["alpha_g"] == [1.0 / n] * n

    def test_eval_after_roundtrip_matches_in_memory(self, trained, corpus_dir, tiny_corpus):
        out, _ = trained
        ckpt = load_checkpoint(out / "best.ckpt")
        model = build_model(ckpt)
        encoded = [encode_instance(i, ckpt.vocab) for i in tiny_corpus["val"]]
        first, logits_a = evaluate(model, encoded, collect_logits=True)

        model2 = build_model(load_checkpoint(out / "best.ckpt"))
        second, logits_b = evaluate(model2, encoded, collect_logits=True)
        assert first == second
        assert all(np.array_equal(a, b) for a, b in zip(logits_a, logits_b))


class TestCheckpointFile:
    def test_truncated_file_rejected(self, trained, tmp_path):
        out, _ = trained
        blob = (out / "best.ckpt").read_bytes()
        bad = tmp_path / "truncated.ckpt"
        bad.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="corrupt or truncated"):
            load_checkpoint(bad)

    def test_version_checked(self, trained, tmp_path):
        out, _ = trained
        ckpt = load_checkpoint(out / "best.ckpt")
        # rebuild the container with a bumped version field
        import cag.checkpoint as C
        orig = C.FORMAT_VERSION
        C.FORMAT_VERSION = 99
        try:
            bad = tmp_path / "v99.ckpt"
            save_checkpoint(bad, ckpt.params_state, ckpt.optim, ckpt.vocab, ckpt.config)
        finally:
            C.FORMAT_VERSION = orig
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(bad)

    def test_tampered_config_hash_rejected(self, trained, tmp_path, monkeypatch):
        # write a container whose stored hash lies about the stored config
        out, _ = trained
        ckpt = load_checkpoint(out / "best.ckpt")
        from cag.config import RunConfig
        monkeypatch.setattr(RunConfig, "config_hash", lambda self: "0" * 64)
        bad = tmp_path / "tampered.ckpt"
        save_checkpoint(bad, ckpt.params_state, ckpt.optim, ckpt.vocab, ckpt.config)
        monkeypatch.undo()
        with pytest.raises(CheckpointError, match="hash mismatch"):
            load_checkpoint(bad)

    def test_flipped_payload_byte_rejected(self, trained, tmp_path):
        out, _ = trained
        blob = bytearray((out / "best.ckpt").read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        bad = tmp_path / "bitflip.ckpt"
        bad.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="digest mismatch"):
            load_checkpoint(bad)

    def test_mismatched_dimension_named_on_load(self, trained, tmp_path):
        out, _ = trained
        ckpt = load_checkpoint(out / "best.ckpt")
        import dataclasses
        wrong = dataclasses.replace(ckpt.config, d=ckpt.config.d * 2)
        bad = tmp_path / "wrong_d.ckpt"
        save_checkpoint(bad, ckpt.params_state, ckpt.optim, ckpt.vocab, wrong)
        with pytest.raises(CheckpointError, match=r"d=24"):
            build_model(load_checkpoint(bad))

    def test_optimizer_state_round_trips(self, trained):
        out, _ = trained
        ckpt = load_checkpoint(out / "best.ckpt")
        assert ckpt.optim is not None
        assert ckpt.optim.step_count > 0
        assert set(ckpt.optim.m) == set(ckpt.params_state)


class TestTraceCommand:
    def test_trace_contents(self, trained, corpus_dir, tmp_path, tiny_corpus):
        out, cfg = trained
        dialog_id = tiny_corpus["val"][0].dialog_id
        trace_path = tmp_path / "trace.json"
        assert main(["trace", "--ckpt", str(out / "best.ckpt"),
                     "--dialog", str(dialog_id), "--out", str(trace_path)]) == 0
        doc = json.loads(trace_path.read_text())
        assert doc["dialog_id"] == dialog_id
        assert len(doc["steps"]) == cfg.steps
        n = len(tiny_corpus["val"][0].scene.objects)
        for step in doc["steps"]:
            assert sum(step["alpha_q"]) == pytest.approx(1.0, abs=1e-9)
            assert len(step["S"]) == n
            assert all(len(row) == min(cfg.k_neighbors, n) for row in step["S"])
            for row in step["B"]:
                assert sum(row) == pytest.approx(1.0, abs=1e-9)
            assert len(step["top2"]) == 2
        assert sum(doc["alpha_g"]) == pytest.approx(1.0, abs=1e-9)
        assert sum(doc["alpha_h"]) == pytest.approx(1.0, abs=1e-9)
        assert doc["predicted_rank"] >= 1
        assert len(doc["logits"]) == 6

    def test_unknown_dialog_rejected(self, trained, capsys):
        out, _ = trained
        rc = main(["trace", "--ckpt", str(out / "best.ckpt"),
                   "--dialog", "99999", "--out", "/tmp/nope.json"])
        assert rc != 0

    def test_rerun_is_byte_identical(self, trained, tmp_path, tiny_corpus):
        out, _ = trained
        dialog_id = tiny_corpus["train"][0].dialog_id
        paths = [tmp_path / "a.json", tmp_path / "b.json"]
        for p in paths:
            assert main(["trace", "--ckpt", str(out / "best.ckpt"),
                         "--dialog", str(dialog_id), "--out", str(p)]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()
