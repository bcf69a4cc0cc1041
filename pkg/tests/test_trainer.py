"""Optimizer, schedule, checkpoints, and training-loop behavior."""

import math

import numpy as np
import pytest

from duosent.corpus import tokenize_pairs
from duosent.errors import InputError
from duosent.losses import LossConfig
from duosent.model import EncoderConfig, encode, init_params
from duosent.tensor import Tensor
from duosent.tokenizer import train_bpe
from duosent.trainer import (
    OptimizerState,
    TrainConfig,
    adam_step,
    load_checkpoint,
    load_optimizer,
    lr_at,
    optimizer_path,
    save_checkpoint,
    save_optimizer,
    train,
    zero_grads,
)

TINY_MODEL = EncoderConfig(n_layers=1, d_model=8, d_ff=16, n_heads=2, vocab_size=80, max_len=16, dropout_p=0.0)


@pytest.fixture(scope="module")
def tiny_world():
    """A 40-pair copyable corpus (tgt == reversed src words) plus vocab."""
    words = ["ka", "lo", "mi", "nu", "pe", "ra", "si", "tu"]
    rng = np.random.default_rng(0)
    sentences = []
    for _ in range(40):
        n = int(rng.integers(2, 5))
        s = " ".join(words[i] for i in rng.integers(0, len(words), size=n))
        sentences.append((s, " ".join(reversed(s.split()))))
    vocab = train_bpe([a for a, _ in sentences] + [b for _, b in sentences], target_size=60)
    pairs = tokenize_pairs(sentences, vocab)
    return pairs, vocab


class TestLrSchedule:
    CFG = TrainConfig(epochs=10, warmup_epochs=3, lr=0.001, batch_size=4)

    def test_ramp_start_is_zero(self):
        assert lr_at(0, self.CFG, steps_per_epoch=10) == 0.0

    def test_ramp_end_hits_configured_lr(self):
        assert lr_at(30, self.CFG, steps_per_epoch=10) == 0.001

    def test_linear_midpoint(self):
        assert lr_at(15, self.CFG, steps_per_epoch=10) == pytest.approx(0.0005)

    def test_constant_after_warmup(self):
        assert lr_at(31, self.CFG, steps_per_epoch=10) == 0.001
        assert lr_at(10_000, self.CFG, steps_per_epoch=10) == 0.001

    def test_invalid_warmup_rejected(self):
        with pytest.raises(InputError):
            TrainConfig(epochs=3, warmup_epochs=3)


class TestAdam:
    def _params(self, value=1.0):
        return {"w": Tensor(np.full(4, value, dtype=np.float32), requires_grad=True)}

    def test_zero_gradient_leaves_params_unchanged(self):
        params = self._params()
        state = OptimizerState()
        cfg = TrainConfig()
        before = params["w"].data.copy()
        for _ in range(5):
            params["w"].grad = np.zeros(4, dtype=np.float32)
            assert adam_step(params, state, 0.001, cfg)
        np.testing.assert_array_equal(params["w"].data, before)

    def test_constant_gradient_step_size_approaches_lr(self):
        # closed-form Adam fixed point: with constant g, m_hat -> g and
        # v_hat -> g*g, so |update| -> lr.
        params = self._params()
        state = OptimizerState()
        cfg = TrainConfig()
        lr = 0.001
        last = params["w"].data.copy()
        for _ in range(1000):
            params["w"].grad = np.full(4, 0.37, dtype=np.float32)
            adam_step(params, state, lr, cfg)
            delta = last - params["w"].data
            last = params["w"].data.copy()
        np.testing.assert_allclose(np.abs(delta), lr, rtol=1e-3)

    def test_nonfinite_gradient_skips_update(self):
        params = self._params()
        state = OptimizerState()
        before = params["w"].data.copy()
        params["w"].grad = np.array([1.0, np.nan, 1.0, 1.0], dtype=np.float32)
        assert not adam_step(params, state, 0.001, TrainConfig())
        np.testing.assert_array_equal(params["w"].data, before)
        assert state.skipped == 1 and state.step == 0

    def test_determinism_across_runs(self):
        results = []
        for _ in range(2):
            rng = np.random.default_rng(99)
            params = {"w": Tensor(rng.normal(size=6).astype(np.float32), requires_grad=True)}
            state = OptimizerState()
            for _ in range(50):
                params["w"].grad = rng.normal(size=6).astype(np.float32)
                adam_step(params, state, 0.01, TrainConfig())
            results.append(params["w"].data.tobytes())
        assert results[0] == results[1]

    def test_global_norm_clip(self):
        params = {"w": Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)}
        cfg = TrainConfig(grad_clip=1.0)
        params["w"].grad = np.array([30.0, 40.0], dtype=np.float32)  # norm 50
        state = OptimizerState()
        adam_step(params, state, 0.001, cfg)
        # clipped direction is preserved: both components move
        assert params["w"].data[0] != 0 and params["w"].data[1] != 0


class TestCheckpointFormat:
    def test_roundtrip_is_bitwise(self, tmp_path):
        cfg = TINY_MODEL
        params = init_params(cfg, np.random.default_rng(1))
        path = tmp_path / "model.duos"
        save_checkpoint(path, params, cfg)
        loaded, loaded_cfg = load_checkpoint(path)
        assert loaded_cfg == cfg
        assert set(loaded) == set(params)
        for name in params:
            assert params[name].data.tobytes() == loaded[name].data.tobytes()

    def test_encoding_from_reloaded_checkpoint_is_identical(self, tmp_path):
        cfg = TINY_MODEL
        params = init_params(cfg, np.random.default_rng(2))
        ids = np.array([[7, 8, 9]])
        mask = np.ones((1, 3), dtype=np.float32)
        _, reps = encode(params, cfg, ids, mask)
        path = tmp_path / "model.duos"
        save_checkpoint(path, params, cfg)
        loaded, _ = load_checkpoint(path)
        _, reps2 = encode(loaded, cfg, ids, mask)
        assert reps.data.tobytes() == reps2.data.tobytes()

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "model.duos"
        save_checkpoint(path, init_params(TINY_MODEL, np.random.default_rng(0)), TINY_MODEL)
        assert path.read_bytes()[:4] == b"DUOS"

    def test_optimizer_sidecar_roundtrip(self, tmp_path):
        state = OptimizerState(step=17, global_step=19, skipped=2)
        state.m["w"] = np.arange(4, dtype=np.float32)
        state.v["w"] = np.arange(4, dtype=np.float32) ** 2
        rng = np.random.default_rng(5)
        rng.random(13)  # advance to a nontrivial state
        path = tmp_path / "model.opt.duos"
        save_optimizer(path, state, rng)
        loaded_state, loaded_rng = load_optimizer(path)
        assert loaded_state.step == 17 and loaded_state.global_step == 19
        assert loaded_state.skipped == 2
        np.testing.assert_array_equal(loaded_state.m["w"], state.m["w"])
        assert loaded_rng.bit_generator.state == rng.bit_generator.state
        assert loaded_rng.random() == np.random.Generator(rng.bit_generator).random()

    def test_optimizer_path_naming(self):
        assert optimizer_path("out/final.duos") == "out/final.opt.duos"


class TestTrainLoop:
    def _run(self, tiny_world, out, loss_config=None, epochs=8, seed=0, resume_from=None,
             checkpoint_every=0):
        pairs, vocab = tiny_world
        return train(
            pairs,
            vocab,
            TINY_MODEL,
            loss_config or LossConfig(generative_mode="ugt"),
            TrainConfig(
                epochs=epochs, warmup_epochs=1, batch_size=8, seed=seed,
                checkpoint_every_steps=checkpoint_every,
            ),
            out,
            resume_from=resume_from,
        )

    def test_loss_descends_on_learnable_data(self, tiny_world, tmp_path):
        result = self._run(tiny_world, tmp_path / "run")
        assert result.mean_epoch_totals[-1] < result.mean_epoch_totals[0]

    def test_align_only_copy_task_reaches_low_loss(self, tmp_path):
        # l2 == l1: every pair is trivially alignable, so the per-sentence
        # alignment loss must drop below 0.05. Sentences are deduplicated
        # (two identical sentences in a batch cannot be discriminated).
        words = ["ka", "lo", "mi", "nu", "pe", "ra", "si", "tu"]
        rng = np.random.default_rng(3)
        seen = set()
        while len(seen) < 32:
            n = int(rng.integers(3, 7))
            seen.add(" ".join(words[i] for i in rng.integers(0, len(words), size=n)))
        sentences = [(s, s) for s in sorted(seen)]
        vocab = train_bpe([a for a, _ in sentences], target_size=60)
        pairs = tokenize_pairs(sentences, vocab)
        cfg = LossConfig(generative_mode="ugt", weights=(0.0, 1.0, 0.0), use_sim=False)
        model = EncoderConfig(
            n_layers=1, d_model=16, d_ff=32, n_heads=2, vocab_size=80, max_len=16,
            dropout_p=0.0,
        )
        result = train(
            pairs, vocab, model, cfg,
            TrainConfig(epochs=120, warmup_epochs=2, batch_size=16, seed=1, lr=0.02),
            tmp_path / "copy",
        )
        last_lines = open(result.metrics_path).read().strip().split("\n")[-4:]
        align_vals = [float(line.split("\t")[3]) for line in last_lines]
        assert min(align_vals) < 0.05

    def test_metrics_format(self, tiny_world, tmp_path):
        result = self._run(tiny_world, tmp_path / "fmt", epochs=2)
        lines = open(result.metrics_path).read().strip().split("\n")
        assert len(lines) == result.steps
        first = lines[0].split("\t")
        assert len(first) == 6  # step, lr, gen, align, sim, total
        assert first[0] == "0" and float(first[1]) == 0.0

    def test_identical_seeds_give_identical_runs(self, tiny_world, tmp_path):
        r1 = self._run(tiny_world, tmp_path / "a", epochs=3, seed=7)
        r2 = self._run(tiny_world, tmp_path / "b", epochs=3, seed=7)
        assert open(r1.metrics_path, "rb").read() == open(r2.metrics_path, "rb").read()
        assert (
            open(r1.final_checkpoint, "rb").read() == open(r2.final_checkpoint, "rb").read()
        )

    def test_resume_reproduces_trajectory(self, tiny_world, tmp_path):
        full = self._run(tiny_world, tmp_path / "full", epochs=4, seed=5)
        # interrupted run: checkpoint mid-way (5 steps/epoch -> step 10 is
        # mid-epoch 2), then resume to completion
        half = self._run(
            tiny_world, tmp_path / "half", epochs=2, seed=5
        )
        resumed = self._run(
            tiny_world, tmp_path / "resumed", epochs=4, seed=5,
            resume_from=half.final_checkpoint,
        )
        full_lines = open(full.metrics_path).read().strip().split("\n")
        resumed_lines = open(resumed.metrics_path).read().strip().split("\n")
        assert resumed_lines == full_lines[half.steps :]
        assert (
            open(full.final_checkpoint, "rb").read()
            == open(resumed.final_checkpoint, "rb").read()
        )

    def test_mid_epoch_resume(self, tiny_world, tmp_path):
        # 40 pairs / batch 8 = 5 steps per epoch; checkpoint every 7 steps
        # lands mid-epoch
        full = self._run(tiny_world, tmp_path / "f2", epochs=3, seed=9)
        ck = self._run(tiny_world, tmp_path / "c2", epochs=3, seed=9, checkpoint_every=7)
        mid = str(tmp_path / "c2" / "ckpt_000007.duos")
        resumed = self._run(tiny_world, tmp_path / "r2", epochs=3, seed=9, resume_from=mid)
        full_lines = open(full.metrics_path).read().strip().split("\n")
        resumed_lines = open(resumed.metrics_path).read().strip().split("\n")
        assert resumed_lines == full_lines[7:]

    def test_zero_gated_weights_freeze_params(self, tiny_world, tmp_path):
        cfg = LossConfig(generative_mode="ugt", weights=(0.0, 0.0, 0.0))
        result = self._run(tiny_world, tmp_path / "frozen", loss_config=cfg, epochs=2)
        params, model_cfg = load_checkpoint(result.final_checkpoint)
        fresh = init_params(model_cfg, np.random.default_rng(0), dtype=np.float32)
        for name in fresh:
            assert params[name].data.tobytes() == fresh[name].data.tobytes()

    def test_corpus_smaller_than_batch_rejected(self, tiny_world, tmp_path):
        pairs, vocab = tiny_world
        with pytest.raises(InputError):
            train(
                pairs[:4], vocab, TINY_MODEL, LossConfig(),
                TrainConfig(epochs=2, warmup_epochs=1, batch_size=8), tmp_path / "small",
            )

    @pytest.mark.parametrize("mode", ["mlm", "smlm", "xtr", "mlm_xtr", "ugt"])
    def test_every_generative_mode_trains(self, tiny_world, tmp_path, mode):
        cfg = LossConfig(generative_mode=mode)
        result = self._run(tiny_world, tmp_path / f"mode_{mode}", loss_config=cfg, epochs=2)
        for value in np.loadtxt(result.metrics_path, usecols=(2, 3, 4, 5)).ravel():
            assert math.isfinite(value)

    def test_masked_state_source_trains(self, tiny_world, tmp_path):
        pairs, vocab = tiny_world
        model_cfg = EncoderConfig(
            n_layers=1, d_model=8, d_ff=16, n_heads=2, vocab_size=80, max_len=16,
            dropout_p=0.0, generative_source="masked_state",
        )
        result = train(
            pairs, vocab, model_cfg, LossConfig(generative_mode="ugt"),
            TrainConfig(epochs=2, warmup_epochs=1, batch_size=8, seed=0),
            tmp_path / "mstate",
        )
        assert result.steps == 10
