"""Downstream evaluation: sentence retrieval and zero-shot classification.

Retrieval is exhaustive exact search over fixed-dimensional
representations. Besides plain cosine, the margin scorer divides (or
shifts) each candidate's cosine by the average similarity to the k
nearest neighbors of both endpoints, which suppresses hub vectors. The
probe is a multinomial logistic regression trained by full-batch gradient
descent on frozen representations; transfer applies a probe trained on
one language to another unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from duosent import fileio
from duosent.errors import InputError

MARGIN_VARIANTS = ("ratio", "distance", "absolute")


class EvalIndex:
    """Immutable store of sentence vectors with ids, normalized for cosine."""

    def __init__(self, vectors: np.ndarray, ids: list[str]):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise InputError("EvalIndex needs a 2-d [n, d] matrix")
        if vectors.shape[0] != len(ids):
            raise InputError("vector count does not match id count")
        if vectors.shape[0] == 0:
            raise InputError("EvalIndex cannot be empty")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms <= 0):
            bad = int(np.argmin(norms))
            raise InputError(f"zero vector rejected at insertion (id {ids[bad]!r})")
        self.vectors = vectors
        self.ids = list(ids)
        self.norms = norms
        self.unit = vectors / norms[:, None]

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_file(cls, path) -> "EvalIndex":
        vectors, ids = fileio.load_embeddings(path)
        return cls(vectors, ids)

    def save(self, path) -> None:
        fileio.save_embeddings(path, self.vectors.astype(np.float32), self.ids)


def _topk_mean(sims: np.ndarray, k: int) -> np.ndarray:
    """Row-wise mean of the k largest entries."""
    part = np.partition(sims, -k, axis=1)[:, -k:]
    return part.mean(axis=1)


def margin_scores(cosines: np.ndarray, k: int, variant: str = "ratio") -> np.ndarray:
    """Penalize each candidate by the average cosine to the k nearest
    targets of the query and the k nearest queries of the target: ratio
    divides by it, distance subtracts it, absolute ignores it."""
    if variant not in MARGIN_VARIANTS:
        raise InputError(f"unknown margin variant {variant!r}; choose from {MARGIN_VARIANTS}")
    if variant == "absolute":
        return cosines.copy()
    if k >= cosines.shape[1]:
        raise InputError(f"margin neighborhood k={k} must be below the target count")
    if k > cosines.shape[0]:
        raise InputError(f"margin neighborhood k={k} needs at least k queries")
    fwd = _topk_mean(cosines, k)  # per query: avg cosine to its k nearest targets
    bwd = _topk_mean(cosines.T, k)  # per target: avg cosine to its k nearest queries
    penalty = (fwd[:, None] + bwd[None, :]) / 2.0
    if variant == "ratio":
        return cosines / penalty
    return cosines - penalty


@dataclass
class RetrievalRow:
    query_id: str
    gold_id: str
    top1_id: str
    score: float
    correct: bool

    def as_tsv(self) -> str:
        return f"{self.query_id}\t{self.gold_id}\t{self.top1_id}\t{self.score:.6f}\t{int(self.correct)}"


def retrieve_p_at_1(
    queries: EvalIndex,
    targets: EvalIndex,
    mode: str = "margin",
    k: int = 4,
    variant: str = "ratio",
) -> tuple[float, list[RetrievalRow]]:
    """Fraction of queries whose top-scored target carries the gold id.

    Gold alignment is by identical id string. Ties break toward the lowest
    target row index (ids are stored in insertion order, so line-number ids
    tie-break toward the smaller line).
    """
    gold_rows = {tid: i for i, tid in reversed(list(enumerate(targets.ids)))}
    for qid in queries.ids:
        if qid not in gold_rows:
            raise InputError(f"query id {qid!r} has no gold target in the index")
    cosines = queries.unit @ targets.unit.T
    if mode == "cosine":
        scores = cosines
    elif mode == "margin":
        scores = margin_scores(cosines, k, variant)
    else:
        raise InputError(f"unknown retrieval mode {mode!r}; use 'cosine' or 'margin'")

    top1 = np.argmax(scores, axis=1)  # argmax takes the first (lowest) index on ties
    rows = []
    hits = 0
    for qi, ti in enumerate(top1):
        qid = queries.ids[qi]
        correct = targets.ids[ti] == qid
        hits += correct
        rows.append(
            RetrievalRow(
                query_id=qid,
                gold_id=qid,
                top1_id=targets.ids[ti],
                score=float(scores[qi, ti]),
                correct=bool(correct),
            )
        )
    return hits / len(queries), rows


def retrieval_report(rows: list[RetrievalRow]) -> str:
    header = "query_id\tgold_id\ttop1_id\tscore\tcorrect"
    return "\n".join([header] + [r.as_tsv() for r in rows]) + "\n"


# -- linear probe ---------------------------------------------------------------


@dataclass
class ProbeConfig:
    lr: float = 0.1
    iterations: int = 500
    l2: float = 1e-4


@dataclass
class ProbeModel:
    weights: np.ndarray  # [d, n_classes]
    bias: np.ndarray  # [n_classes]
    classes: np.ndarray  # sorted original labels

    def logits(self, reps: np.ndarray) -> np.ndarray:
        return np.asarray(reps, dtype=np.float64) @ self.weights + self.bias

    def predict(self, reps: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(reps), axis=1)]

    def accuracy(self, reps: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(reps) == np.asarray(labels)))


def probe_loss_and_grad(
    weights: np.ndarray,
    bias: np.ndarray,
    reps: np.ndarray,
    class_idx: np.ndarray,
    l2: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy + (l2/2)||W||^2 and its analytic gradients."""
    logits = reps @ weights + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    n = reps.shape[0]
    loss = -log_probs[np.arange(n), class_idx].mean() + 0.5 * l2 * float((weights**2).sum())
    probs = np.exp(log_probs)
    probs[np.arange(n), class_idx] -= 1.0
    probs /= n
    grad_w = reps.T @ probs + l2 * weights
    grad_b = probs.sum(axis=0)
    return float(loss), grad_w, grad_b


def train_probe(
    reps_train: np.ndarray,
    labels_train: np.ndarray,
    reps_val: np.ndarray,
    labels_val: np.ndarray,
    config: ProbeConfig | None = None,
) -> ProbeModel:
    """Full-batch gradient descent; returns the weights at best validation
    accuracy (earliest iteration wins ties). Never touches the encoder."""
    config = config or ProbeConfig()
    reps_train = np.asarray(reps_train, dtype=np.float64)
    reps_val = np.asarray(reps_val, dtype=np.float64)
    labels_train = np.asarray(labels_train)
    labels_val = np.asarray(labels_val)

    classes = np.unique(labels_train)
    if classes.size < 2:
        raise InputError("probe training needs at least two classes")
    if not np.array_equal(classes, np.unique(labels_val)):
        raise InputError("train and validation label sets differ")
    class_of = {c: i for i, c in enumerate(classes.tolist())}
    idx_train = np.array([class_of[c] for c in labels_train.tolist()])

    d, n_classes = reps_train.shape[1], classes.size
    weights = np.zeros((d, n_classes))
    bias = np.zeros(n_classes)

    best = ProbeModel(weights.copy(), bias.copy(), classes)
    best_acc = best.accuracy(reps_val, labels_val)
    for _ in range(config.iterations):
        _, grad_w, grad_b = probe_loss_and_grad(weights, bias, reps_train, idx_train, config.l2)
        weights -= config.lr * grad_w
        bias -= config.lr * grad_b
        candidate = ProbeModel(weights, bias, classes)
        acc = candidate.accuracy(reps_val, labels_val)
        if acc > best_acc:
            best_acc = acc
            best = ProbeModel(weights.copy(), bias.copy(), classes)
    return best


def zero_shot_transfer(
    params,
    model_config,
    vocab,
    probe: ProbeModel,
    texts: list[str],
    labels: np.ndarray,
    batch_size: int = 64,
) -> float:
    """Accuracy of a frozen probe on another language's documents."""
    from duosent.model import encode_texts

    reps = encode_texts(params, model_config, vocab, texts, batch_size=batch_size)
    return probe.accuracy(reps, np.asarray(labels))
