"""Training objectives.

Generative losses compare the model's vocabulary distribution against a
soft label via KL divergence (point-mass labels recover cross-entropy).
The two in-batch contrastive losses work on the pooled sentence
representations: `align_loss` is a symmetric InfoNCE over raw inner
products (every other sentence in the batch is a negative), `sim_loss` is
a regression loss matching the two languages' softmax-normalized
intra-language similarity geometries through -log cos of the difference.

`align_loss` and `sim_loss` return the raw batch sums; `total_loss`
applies the configured reduction (per-sentence means by default, raw sums
under ``paper_sum``) before weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from duosent import tensor as T
from duosent.corpus import GENERATIVE_MODES, densify_labels
from duosent.errors import InputError
from duosent.tensor import Tensor

COS_FLOOR = 1e-7  # keeps -log cos finite when a softmax saturates


@dataclass
class LossConfig:
    generative_mode: str = "ugt"
    use_align: bool = True
    use_sim: bool = True
    weights: tuple[float, float, float] = (1.0, 2.0, 2.0)
    reduction: str = "mean"  # or "paper_sum"

    def __post_init__(self):
        if self.generative_mode not in GENERATIVE_MODES:
            raise InputError(
                f"unknown generative mode {self.generative_mode!r}; choose from {GENERATIVE_MODES}"
            )
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise InputError("loss.weights must be three non-negative numbers")
        if self.reduction not in ("mean", "paper_sum"):
            raise InputError("loss.reduction must be 'mean' or 'paper_sum'")


@dataclass
class LossReport:
    generative: float
    align: float
    sim: float
    total: float

    def as_row(self) -> str:
        return f"{self.generative:.6f}\t{self.align:.6f}\t{self.sim:.6f}\t{self.total:.6f}"


def _check_normalized(q: np.ndarray) -> None:
    sums = q.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > 1e-6:
        raise InputError("label distribution does not sum to 1 (beyond 1e-6)")


def kl_divergence(q: np.ndarray, logits: Tensor) -> Tensor:
    """Batch-mean KL(q || softmax(logits)) with a stable log-softmax.

    `q` is a dense constant [b, vocab]; only its support contributes.
    """
    q = np.asarray(q, dtype=logits.dtype)
    if q.shape != logits.shape:
        raise InputError(f"label shape {q.shape} does not match logits {logits.shape}")
    _check_normalized(q)
    log_p = T.log_softmax(logits, axis=-1)
    cross = -(log_p * Tensor(q)).sum(axis=-1)  # [b]
    with np.errstate(divide="ignore", invalid="ignore"):
        qlogq = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    return cross.mean() + float(qlogq.sum(axis=-1).mean())


def generative_loss(
    logits_src: Tensor,
    logits_tgt: Tensor,
    q_src: list[dict[int, float]],
    q_tgt: list[dict[int, float]],
) -> Tensor:
    """Sum of the two sides' label-reconstruction KL terms, batch-averaged."""
    vocab_size = logits_src.shape[-1]
    dense_src = densify_labels(q_src, vocab_size, dtype=np.float64)
    dense_tgt = densify_labels(q_tgt, vocab_size, dtype=np.float64)
    return kl_divergence(dense_src, logits_src) + kl_divergence(dense_tgt, logits_tgt)


def smlm_loss(masked_logits: Tensor, crosslingual_logits: Tensor, w_t: np.ndarray) -> Tensor:
    """Negative log-likelihood of the masked token from both sides.

    Equivalent to `generative_loss` with point-mass labels but computed by
    direct index pick.
    """
    w_t = np.asarray(w_t)
    if w_t.min() < 0 or w_t.max() >= masked_logits.shape[-1]:
        raise InputError("masked token id out of vocabulary range")
    lp_masked = T.pick(T.log_softmax(masked_logits, axis=-1), w_t)
    lp_cross = T.pick(T.log_softmax(crosslingual_logits, axis=-1), w_t)
    return -(lp_masked.mean()) - lp_cross.mean()


def mlm_loss(position_logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked positions (zero when none exist)."""
    targets = np.asarray(targets)
    if targets.size == 0:
        return Tensor(np.zeros(()))
    return -T.pick(T.log_softmax(position_logits, axis=-1), targets).mean()


def align_loss(u: Tensor, v: Tensor) -> Tensor:
    """In-batch translation-pair discrimination over raw inner products.

    For each pair j the true translation is the positive and the other
    (b - 1) sentences of either language are negatives; row- and
    column-softmax terms cover both retrieval directions. Returns the raw
    batch sum.
    """
    if u.shape[0] == 0:
        raise InputError("alignment loss needs a non-empty batch")
    scores = T.matmul(u, T.transpose(v))
    diag = np.arange(scores.shape[0])
    row_terms = T.pick(T.log_softmax(scores, axis=1), diag)  # u_j against all v
    col_terms = T.pick(T.log_softmax(scores, axis=0), diag)  # v_j against all u
    return -(row_terms.sum()) - col_terms.sum()


def sim_loss(u: Tensor, v: Tensor) -> Tensor:
    """Match the two languages' in-batch similarity geometries.

    Each language's [b, b] inner-product matrix is row-softmaxed; every
    ordered pair (including the diagonal) contributes
    -log cos(pi/2 * (a - b')) where a and b' are the matching softmax
    entries. cos is clamped above COS_FLOOR so saturated softmax rows stay
    finite. Returns the raw sum over ordered pairs.
    """
    a = T.softmax(T.matmul(u, T.transpose(u)), axis=1)
    b = T.softmax(T.matmul(v, T.transpose(v)), axis=1)
    gap = T.scale(a - b, math.pi / 2.0)
    return -(T.log(T.clamp_min(T.cos(gap), COS_FLOOR)).sum())


def total_loss(
    generative: Tensor | None,
    align: Tensor | None,
    sim: Tensor | None,
    config: LossConfig,
    batch_size: int,
) -> tuple[Tensor, LossReport]:
    """Weighted sum of the enabled components.

    Contrastive sums are divided by the batch size under mean reduction so
    the weights act on per-sentence scales; disabled components contribute
    zero and are reported as zero.
    """
    if batch_size <= 0:
        raise InputError("batch size must be positive")
    w0, w1, w2 = config.weights
    norm = 1.0 / batch_size if config.reduction == "mean" else 1.0

    zero = Tensor(np.zeros(()))
    gen = generative if generative is not None else zero
    ali = T.scale(align, norm) if (config.use_align and align is not None) else zero
    sm = T.scale(sim, norm) if (config.use_sim and sim is not None) else zero

    total = T.scale(gen, w0) + T.scale(ali, w1) + T.scale(sm, w2)
    report = LossReport(
        generative=gen.item(),
        align=ali.item(),
        sim=sm.item(),
        total=w0 * gen.item() + w1 * ali.item() + w2 * sm.item(),
    )
    return total, report
