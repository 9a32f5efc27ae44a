"""Config round-trips, checkpoints, WER, training mechanics, CLI contract."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fnt.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from fnt.cli import cli
from fnt.config import ConfigError, ExperimentConfig, apply_overrides
from fnt.corpus import GeneratorConfig, generate_dataset
from fnt.harness import (
    Metrics,
    align_tokens,
    build_model,
    evaluate,
    levenshtein,
    load_model,
    stream_evaluate,
    train,
    wer,
)
from fnt.decoder import DecodeConfig
from fnt.model import FntModel
from fnt.rng import Rng
from fnt.tensor import ShapeError, set_default_dtype


def tiny_overrides(**extra):
    out = [
        "model.n_layers=1", "model.d_model=16", "model.n_heads=2", "model.d_ffn=24",
        "model.d_blank=8", "model.d_joint=8", "model.predv_layers=1", "model.predv_d=8",
        "model.ctx_layers=1", "model.ctx_d=8",
        "train.steps=6", "train.batch_size=1", "train.seed=11",
        "gen.n_sessions=6", "gen.n_utterances=4", "gen.vocab_size=30", "gen.n_pairs=3",
        "gen.d_feat=8", "gen.utt_len_min=3", "gen.utt_len_max=5",
    ]
    out += [f"{k}={v}" for k, v in extra.items()]
    return out


def tiny_config(**extra):
    return apply_overrides(ExperimentConfig(), tiny_overrides(**extra))


@pytest.fixture(autouse=True)
def _restore_dtype():
    yield
    set_default_dtype(np.float64)


class TestWer:
    def test_identical(self):
        assert wer([1, 2, 3], [1, 2, 3]) == 0.0

    def test_one_substitution_in_four(self):
        assert wer([1, 2, 3, 4], [1, 9, 3, 4]) == 0.25

    def test_empty_hypothesis_all_deletions(self):
        assert wer([1, 2, 3], []) == 1.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            wer([], [1])

    def test_alignment_marks_substitutions_and_deletions(self):
        ref = [1, 2, 3, 4]
        hyp = [1, 9, 4]
        aligned = align_tokens(ref, hyp)
        assert aligned[0] == 1 and aligned[3] == 4
        assert levenshtein(ref, hyp) == 2


class TestConfig:
    def test_round_trip_equality(self):
        cfg = tiny_config(**{"model.token_level": "true", "loss.lambda_lm": "0.25"})
        again = ExperimentConfig.from_ini(cfg.to_ini())
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_ini("[model]\nwarp_drive = 9\n")

    def test_override_type_checking(self):
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), ["train.steps=soon"])
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), ["nosection.x=1"])

    def test_model_config_derivation(self):
        cfg = tiny_config(**{"model.mode": "streaming", "model.slongfnt_text": "true",
                             "model.context_source": "predv", "model.left_chunks": "-1"})
        mc = cfg.model_config()
        assert mc.streaming and mc.encoder.left_chunks is None
        assert mc.d_ctx == cfg.model.predv_d


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        arrays = {"a.w": Rng(1).normal(size=(3, 4)).astype(np.float32),
                  "b": Rng(2).normal(size=(5,)).astype(np.float64)}
        path = tmp_path / "ck.bin"
        save_checkpoint(path, arrays, {"step": 7})
        meta, loaded = load_checkpoint(path)
        assert meta == {"step": 7}
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])
            assert loaded[k].dtype == arrays[k].dtype

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_checkpoint(path, {"w": np.zeros((4, 4), dtype=np.float32)}, {})
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "ck.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_shape_mismatch_on_load_state(self, tmp_path):
        cfg = tiny_config()
        model = build_model(cfg)
        arrays = model.state_dict()
        name = next(iter(arrays))
        arrays = dict(arrays)
        arrays[name] = np.zeros((1, 1), dtype=arrays[name].dtype)
        wider = build_model(cfg)
        with pytest.raises(ShapeError, match=name.split(".")[0]):
            wider.load_state(arrays)


class TestTraining:
    def test_loss_decreases(self, tmp_path):
        cfg = tiny_config(**{"train.steps": "120", "train.lr": "0.2", "train.batch_size": "2"})
        ds = generate_dataset(cfg.gen, cfg.train.seed)
        train(cfg, tmp_path / "run", dataset=ds)
        rows = [json.loads(l) for l in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
        rows = [r for r in rows if r["phase"] == "train"]
        head = np.mean([r["total"] for r in rows[:12]])
        tail = np.mean([r["total"] for r in rows[-12:]])
        assert tail < head

    def test_deterministic_checkpoints(self, tmp_path):
        cfg = tiny_config()
        ds = generate_dataset(cfg.gen, cfg.train.seed)
        train(cfg, tmp_path / "a", dataset=ds)
        train(cfg, tmp_path / "b", dataset=ds)
        assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()
        assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()

    def test_resume_replays_next_step_bit_exactly(self, tmp_path):
        cfg = tiny_config(**{"train.steps": "6"})
        ds = generate_dataset(cfg.gen, cfg.train.seed)
        train(cfg, tmp_path / "full", dataset=ds)
        short = apply_overrides(ExperimentConfig.from_ini(cfg.to_ini()), ["train.steps=3"])
        train(short, tmp_path / "part", dataset=ds)
        resumed_cfg = apply_overrides(ExperimentConfig.from_ini(cfg.to_ini()), ["train.steps=6"])
        train(resumed_cfg, tmp_path / "resumed", dataset=ds,
              resume_from=tmp_path / "part" / "checkpoint.bin")
        full_rows = [json.loads(l) for l in (tmp_path / "full" / "train_log.jsonl").read_text().splitlines()]
        res_rows = [json.loads(l) for l in (tmp_path / "resumed" / "train_log.jsonl").read_text().splitlines()]
        full_by_step = {r["step"]: r for r in full_rows if r["phase"] == "train"}
        for r in res_rows:
            if r["phase"] != "train":
                continue
            assert r == full_by_step[r["step"]]
        assert (tmp_path / "full" / "checkpoint.bin").read_bytes() == (
            tmp_path / "resumed" / "checkpoint.bin"
        ).read_bytes()

    def test_zero_weights_reduce_to_pure_transducer_gradients(self, tmp_path):
        cfg = tiny_config()
        ds = generate_dataset(cfg.gen, cfg.train.seed)
        utt = ds.split_sessions("train")[0].utterances[0]
        from fnt.encoder import FeatureSeq
        from fnt.tensor import Tensor

        model = build_model(cfg)
        out = model.forward_losses(FeatureSeq(Tensor(utt.features)), utt.tokens,
                                   lambda_lm=0.0, lambda_ctc=0.0)
        out["total"].backward()
        grads_combined = {n: p.grad.copy() if p.grad is not None else None
                          for n, p in model.named_parameters()}
        model2 = build_model(cfg)
        out2 = model2.forward_losses(FeatureSeq(Tensor(utt.features)), utt.tokens)
        out2["trans"].backward()
        for name, p in model2.named_parameters():
            a, b = grads_combined[name], p.grad
            if a is None and b is None:
                continue
            if a is None or b is None:
                assert (a if a is not None else b).max() == 0.0
            else:
                np.testing.assert_allclose(a, b, atol=1e-12)

    def test_nan_aborts_with_step_number(self, tmp_path):
        # layer norms make organic blow-ups saturate instead of NaN, so poison
        # a checkpointed weight and resume: the abort must name the step
        cfg = tiny_config(**{"train.steps": "2"})
        ds = generate_dataset(cfg.gen, cfg.train.seed)
        ckpt = train(cfg, tmp_path / "ok", dataset=ds)
        meta, arrays = load_checkpoint(ckpt)
        name = next(n for n in arrays if arrays[n].ndim == 2)
        arrays[name] = arrays[name].copy()
        arrays[name][0, 0] = np.nan
        save_checkpoint(ckpt, arrays, meta)
        from fnt.harness import TrainingDivergedError

        longer = apply_overrides(ExperimentConfig.from_ini(cfg.to_ini()), ["train.steps=4"])
        with pytest.raises(TrainingDivergedError, match=r"step \d+"):
            train(longer, tmp_path / "resumed", dataset=ds, resume_from=ckpt)


class TestEvaluate:
    def build(self, tmp_path, extra=None):
        cfg = tiny_config(**(extra or {}))
        ds = generate_dataset(cfg.gen, cfg.train.seed)
        ckpt = train(cfg, tmp_path / "run", dataset=ds)
        model, _, _ = load_model(ckpt)
        return model, ds

    def test_metrics_deterministic(self, tmp_path):
        model, ds = self.build(tmp_path)
        a, _ = evaluate(model, ds, "hypothesis", 2, beam_width=2)
        b, _ = evaluate(model, ds, "hypothesis", 2, beam_width=2)
        assert a.to_dict() == b.to_dict()

    def test_none_mode_equals_nhis_zero(self, tmp_path):
        model, ds = self.build(tmp_path, {"model.token_level": "true"})
        a, _ = evaluate(model, ds, "none", 2, beam_width=2)
        b, _ = evaluate(model, ds, "oracle", 0, beam_width=2)
        assert a.wer == b.wer
        assert a.confusable_keyword_error_rate == b.confusable_keyword_error_rate

    def test_latency_accounting_mean_matches_list(self, tmp_path):
        cfg = tiny_config(**{
            "model.mode": "streaming", "model.context_source": "predv",
            "model.slongfnt_text": "true", "model.history_speech": "true",
        })
        ds = generate_dataset(cfg.gen, cfg.train.seed)
        ckpt = train(cfg, tmp_path / "srun", dataset=ds)
        model, _, _ = load_model(ckpt)
        metrics, records = stream_evaluate(model, ds, DecodeConfig(beam_width=1, n_his=1), split="test")
        assert metrics.end_latencies == [r["end_latency"] for r in records]
        assert metrics.mean_end_latency == pytest.approx(np.mean(metrics.end_latencies))
        assert all(l >= 0 for l in metrics.end_latencies)


class TestLatencyArithmetic:
    def test_end_latency_is_finish_minus_duration(self):
        # 2.0 s of audio whose final token lands at wall 2.4 s -> 0.4 s
        from fnt.decoder import UtteranceDecode

        rec = UtteranceDecode(1, (0,), 0.0, chunk_timestamps=[2.1, 2.4], audio_duration=2.0)
        rec.end_latency = rec.chunk_timestamps[-1] - rec.audio_duration
        assert rec.end_latency == pytest.approx(0.4)


class TestCli:
    def run(self, *argv):
        return cli(list(argv))

    def test_usage_errors_exit_one(self, capsys, tmp_path):
        assert self.run("eval", "--out-dir", str(tmp_path)) == 1
        assert self.run("definitely-not-a-command") == 1
        assert self.run("train") == 1  # --out-dir missing

    def test_runtime_failure_exits_two(self, tmp_path):
        assert self.run("--out-dir", str(tmp_path / "o"), "eval",
                        "--checkpoint", str(tmp_path / "missing.bin")) == 2

    def test_gen_train_eval_pipeline(self, tmp_path):
        cfg_path = tmp_path / "c.ini"
        cfg = tiny_config()
        cfg.save(cfg_path)
        data_dir = tmp_path / "data"
        assert self.run("--config", str(cfg_path), "--out-dir", str(data_dir), "gen-data") == 0
        run_dir = tmp_path / "run"
        assert self.run("--config", str(cfg_path), "--out-dir", str(run_dir),
                        "train", "--data", str(data_dir)) == 0
        ev_dir = tmp_path / "ev"
        assert self.run("--out-dir", str(ev_dir), "eval",
                        "--checkpoint", str(run_dir / "checkpoint.bin"),
                        "--data", str(data_dir), "--history-mode", "none", "--beam", "2") == 0
        metrics = json.loads((ev_dir / "metrics.json").read_text())
        assert "none" in metrics and "wer" in metrics["none"]
        echoed = ExperimentConfig.load(ev_dir / "config.ini")
        assert echoed.gen == cfg.gen

    def test_gen_data_byte_identical(self, tmp_path):
        cfg_path = tmp_path / "c.ini"
        tiny_config().save(cfg_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert self.run("--config", str(cfg_path), "--out-dir", str(a), "gen-data") == 0
        assert self.run("--config", str(cfg_path), "--out-dir", str(b), "gen-data") == 0
        assert (a / "data.jsonl").read_bytes() == (b / "data.jsonl").read_bytes()
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()

    def test_seed_flag_changes_dataset(self, tmp_path):
        cfg_path = tmp_path / "c.ini"
        tiny_config().save(cfg_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert self.run("--config", str(cfg_path), "--seed", "1", "--out-dir", str(a), "gen-data") == 0
        assert self.run("--config", str(cfg_path), "--seed", "2", "--out-dir", str(b), "gen-data") == 0
        assert (a / "data.jsonl").read_bytes() != (b / "data.jsonl").read_bytes()

    def test_config_echo_reparses_equal(self, tmp_path):
        cfg_path = tmp_path / "c.ini"
        cfg = tiny_config(**{"model.token_level": "true"})
        cfg.save(cfg_path)
        out = tmp_path / "d"
        assert self.run("--config", str(cfg_path), "--out-dir", str(out), "gen-data") == 0
        assert ExperimentConfig.load(out / "config.ini") == cfg
