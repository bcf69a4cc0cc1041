"""Optimization loop: Adam with linear warmup, checkpointing, metrics log.

Determinism contract: (seed, config, corpus) fully determine every logged
number. All step-level stochastic draws (mask sampling, dropout, MLM
corruption) come from one run generator whose PCG64 state is serialized
into the optimizer sidecar, so resuming from a checkpoint replays the
exact trajectory of an uninterrupted run. Epoch shuffles are derived from
(seed, epoch) instead of the run stream so a mid-epoch resume can rebuild
the current epoch's order without replaying it.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from duosent import fileio
from duosent import tensor as T
from duosent.corpus import BatchConfig, PairBatch, TokenizedPair, make_batch
from duosent.errors import DivergenceError, InputError
from duosent.losses import (
    LossConfig,
    LossReport,
    align_loss,
    generative_loss,
    mlm_loss,
    sim_loss,
    total_loss,
)
from duosent.model import (
    EncoderConfig,
    encode,
    gather_states,
    generative_input,
    generative_logits,
    init_params,
)
from duosent.tensor import Tensor
from duosent.tokenizer import Vocab

logger = logging.getLogger(__name__)

_SHUFFLE_TAG = 0x5F1E  # namespaces the per-epoch shuffle seeds
MAX_CONSECUTIVE_NONFINITE = 3


@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 0.001
    warmup_epochs: int = 3
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every_steps: int = 0  # 0: final checkpoint only
    grad_clip: float = 0.0  # 0: off

    def __post_init__(self):
        if self.lr <= 0:
            raise InputError("train.lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise InputError("train.warmup_epochs must satisfy 0 <= warmup < epochs")
        if self.batch_size <= 0:
            raise InputError("train.batch_size must be positive")


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear ramp from 0 to lr over the warmup steps, then constant."""
    if step < 0:
        raise InputError("step must be non-negative")
    warmup_steps = config.warmup_epochs * steps_per_epoch
    if warmup_steps <= 0:
        return config.lr
    return config.lr * min(1.0, step / warmup_steps)


@dataclass
class OptimizerState:
    """Adam moments plus the counters needed for exact resume.

    `step` counts applied Adam updates (drives bias correction);
    `global_step` counts loop iterations including skipped ones.
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    global_step: int = 0
    skipped: int = 0


def adam_step(params: dict[str, Tensor], state: OptimizerState, lr: float, config: TrainConfig) -> bool:
    """One bias-corrected Adam update from the accumulated gradients.

    A non-finite gradient anywhere aborts the whole step (state untouched,
    skip counter incremented). Returns whether the update was applied.
    """
    grads = {}
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            logger.warning("non-finite gradient in %s; skipping update", name)
            return False
        grads[name] = g

    if config.grad_clip > 0:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > config.grad_clip:
            factor = config.grad_clip / total
            grads = {k: g * factor for k, g in grads.items()}

    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    correct1 = 1.0 - b1**t
    correct2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name].astype(p.data.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correct1
        v_hat = v / correct2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return True


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# -- checkpoint layer ----------------------------------------------------------

_HEAD_ACT = {"tanh": 0.0, "linear": 1.0}
_GEN_SRC = {"pooled": 0.0, "masked_state": 1.0}


def save_checkpoint(path, params: dict[str, Tensor], config: EncoderConfig) -> None:
    arch = np.array(
        [
            config.n_layers, config.d_model, config.d_ff, config.n_heads,
            config.vocab_size, config.max_len, float(config.pre_norm),
            _HEAD_ACT[config.head_activation], _GEN_SRC[config.generative_source],
            config.dropout_p,
        ],
        dtype=np.float32,
    )
    tensors = {"meta.arch": arch}
    tensors.update({name: p.data for name, p in params.items()})
    fileio.save_tensors(path, tensors)


def load_checkpoint(path) -> tuple[dict[str, Tensor], EncoderConfig]:
    tensors = fileio.load_tensors(path)
    arch = tensors.pop("meta.arch", None)
    if arch is None:
        raise InputError(f"{path}: checkpoint lacks the architecture record")
    rev_act = {v: k for k, v in _HEAD_ACT.items()}
    rev_src = {v: k for k, v in _GEN_SRC.items()}
    config = EncoderConfig(
        n_layers=int(arch[0]), d_model=int(arch[1]), d_ff=int(arch[2]),
        n_heads=int(arch[3]), vocab_size=int(arch[4]), max_len=int(arch[5]),
        pre_norm=bool(arch[6]), head_activation=rev_act[float(arch[7])],
        generative_source=rev_src[float(arch[8])], dropout_p=float(arch[9]),
    )
    params = {name: Tensor(arr, requires_grad=True) for name, arr in tensors.items()}
    return params, config


def _pack_rng(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise InputError("only PCG64 generators can be checkpointed")
    raw = (
        st["state"]["state"].to_bytes(16, "little")
        + st["state"]["inc"].to_bytes(16, "little")
        + int(st["has_uint32"]).to_bytes(4, "little")
        + int(st["uinteger"]).to_bytes(4, "little")
    )
    return fileio.pack_bits(raw)


def _unpack_rng(arr: np.ndarray) -> np.random.Generator:
    raw = fileio.unpack_bits(arr)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {
            "state": int.from_bytes(raw[0:16], "little"),
            "inc": int.from_bytes(raw[16:32], "little"),
        },
        "has_uint32": int.from_bytes(raw[32:36], "little"),
        "uinteger": int.from_bytes(raw[36:40], "little"),
    }
    return rng


def save_optimizer(path, state: OptimizerState, rng: np.random.Generator) -> None:
    tensors: dict[str, np.ndarray] = {
        "opt.step": np.array([state.step], dtype=np.float32),
        "opt.global_step": np.array([state.global_step], dtype=np.float32),
        "opt.skipped": np.array([state.skipped], dtype=np.float32),
        "opt.rng": _pack_rng(rng),
    }
    for name, m in state.m.items():
        tensors[f"m.{name}"] = m
    for name, v in state.v.items():
        tensors[f"v.{name}"] = v
    fileio.save_tensors(path, tensors)


def load_optimizer(path) -> tuple[OptimizerState, np.random.Generator]:
    tensors = fileio.load_tensors(path)
    state = OptimizerState(
        step=int(tensors.pop("opt.step")[0]),
        global_step=int(tensors.pop("opt.global_step")[0]),
        skipped=int(tensors.pop("opt.skipped")[0]),
    )
    rng = _unpack_rng(tensors.pop("opt.rng"))
    for name, arr in tensors.items():
        if name.startswith("m."):
            state.m[name[2:]] = arr
        elif name.startswith("v."):
            state.v[name[2:]] = arr
        else:
            raise InputError(f"{path}: unexpected entry {name!r} in optimizer state")
    return state, rng


def optimizer_path(checkpoint_path) -> str:
    base = os.fspath(checkpoint_path)
    stem, ext = os.path.splitext(base)
    return f"{stem}.opt{ext}"


# -- the training loop ---------------------------------------------------------


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, _SHUFFLE_TAG, epoch]).permutation(n)


def _forward_step(
    params,
    model_config: EncoderConfig,
    loss_config: LossConfig,
    batch: PairBatch,
    rng: np.random.Generator,
    train: bool = True,
) -> tuple[Tensor, LossReport]:
    states_src, reps_src = encode(params, model_config, batch.src_ids, batch.src_mask, train, rng)
    states_tgt, reps_tgt = encode(params, model_config, batch.tgt_ids, batch.tgt_mask, train, rng)

    w0, w1, w2 = loss_config.weights
    gen = None
    if w0 > 0:
        mode = loss_config.generative_mode
        if mode in ("smlm", "xtr", "ugt"):
            none = np.full(len(batch), -1, dtype=np.int64)
            pos_src = batch.mask_positions if batch.direction == 0 else none
            pos_tgt = batch.mask_positions if batch.direction == 1 else none
            logits_src = generative_logits(
                params, model_config, generative_input(params, model_config, states_src, reps_src, pos_src)
            )
            logits_tgt = generative_logits(
                params, model_config, generative_input(params, model_config, states_tgt, reps_tgt, pos_tgt)
            )
            gen = generative_loss(logits_src, logits_tgt, batch.q_src, batch.q_tgt)
        else:  # mlm / mlm_xtr: per-position prediction on the masked side
            states = states_src if batch.direction == 0 else states_tgt
            picked = gather_states(states, batch.mlm_rows, batch.mlm_cols)
            position_logits = generative_logits(params, model_config, picked)
            gen = mlm_loss(position_logits, batch.mlm_targets)
            if mode == "mlm_xtr":
                logits_src = generative_logits(params, model_config, reps_src)
                logits_tgt = generative_logits(params, model_config, reps_tgt)
                gen = gen + generative_loss(logits_src, logits_tgt, batch.q_src, batch.q_tgt)

    ali = align_loss(reps_src, reps_tgt) if (loss_config.use_align and w1 > 0) else None
    sm = sim_loss(reps_src, reps_tgt) if (loss_config.use_sim and w2 > 0) else None
    return total_loss(gen, ali, sm, loss_config, len(batch))


@dataclass
class TrainResult:
    final_checkpoint: str
    metrics_path: str
    steps: int
    mean_epoch_totals: list[float]


def train(
    pairs: list[TokenizedPair],
    vocab: Vocab,
    model_config: EncoderConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    out_dir,
    resume_from=None,
    batch_config: BatchConfig | None = None,
) -> TrainResult:
    """Run the full optimization loop and write checkpoints + metrics.

    Each step masks one direction (alternating), runs both sides through
    the shared encoder, and updates with Adam under the warmup schedule.
    """
    n = len(pairs)
    if n < train_config.batch_size:
        raise InputError(
            f"corpus has {n} pairs, smaller than one batch ({train_config.batch_size})"
        )
    os.makedirs(out_dir, exist_ok=True)
    steps_per_epoch = math.ceil(n / train_config.batch_size)
    if batch_config is None:
        batch_config = BatchConfig(
            batch_size=train_config.batch_size,
            generative_mode=loss_config.generative_mode,
        )
    elif batch_config.generative_mode != loss_config.generative_mode:
        raise InputError("batch and loss configs disagree on the generative mode")

    if resume_from is not None:
        params, model_config = load_checkpoint(resume_from)
        opt_state, rng = load_optimizer(optimizer_path(resume_from))
        start_step = opt_state.global_step
    else:
        rng = np.random.default_rng(train_config.seed)
        params = init_params(model_config, rng, dtype=np.float32)
        opt_state = OptimizerState()
        start_step = 0

    w0, w1, w2 = loss_config.weights
    any_active = (w0 > 0) or (loss_config.use_align and w1 > 0) or (loss_config.use_sim and w2 > 0)

    metrics_lines: list[str] = []
    epoch_totals: list[float] = []
    nonfinite_streak = 0
    step = start_step
    metrics_path = os.path.join(out_dir, "metrics.tsv")

    def flush_metrics():
        fileio.atomic_write_text(metrics_path, "".join(metrics_lines))

    for epoch in range(start_step // steps_per_epoch, train_config.epochs):
        order = _epoch_order(train_config.seed, epoch, n)
        epoch_sum, epoch_count = 0.0, 0
        start_batch = step % steps_per_epoch if epoch == start_step // steps_per_epoch else 0
        for batch_idx in range(start_batch, steps_per_epoch):
            lo = batch_idx * train_config.batch_size
            chosen = [pairs[i] for i in order[lo : lo + train_config.batch_size]]
            direction = step % 2
            batch = make_batch(chosen, vocab, batch_config, rng, direction)
            lr = lr_at(step, train_config, steps_per_epoch)

            loss, report = _forward_step(params, model_config, loss_config, batch, rng)
            if not math.isfinite(report.total):
                nonfinite_streak += 1
                logger.warning("non-finite loss at step %d (%d consecutive)", step, nonfinite_streak)
                if nonfinite_streak >= MAX_CONSECUTIVE_NONFINITE:
                    flush_metrics()
                    raise DivergenceError(
                        f"{MAX_CONSECUTIVE_NONFINITE} consecutive non-finite losses; aborting"
                    )
            else:
                nonfinite_streak = 0
                if any_active:
                    loss.backward()
                    adam_step(params, opt_state, lr, train_config)
                    zero_grads(params)
            opt_state.global_step = step + 1

            metrics_lines.append(f"{step}\t{lr:.6f}\t{report.as_row()}\n")
            epoch_sum += report.total
            epoch_count += 1
            step += 1

            if train_config.checkpoint_every_steps > 0 and step % train_config.checkpoint_every_steps == 0:
                ckpt = os.path.join(out_dir, f"ckpt_{step:06d}.duos")
                save_checkpoint(ckpt, params, model_config)
                save_optimizer(optimizer_path(ckpt), opt_state, rng)
        if epoch_count:
            epoch_totals.append(epoch_sum / epoch_count)

    final = os.path.join(out_dir, "final.duos")
    save_checkpoint(final, params, model_config)
    save_optimizer(optimizer_path(final), opt_state, rng)
    flush_metrics()
    return TrainResult(
        final_checkpoint=final,
        metrics_path=metrics_path,
        steps=step,
        mean_epoch_totals=epoch_totals,
    )
