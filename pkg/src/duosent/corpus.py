"""Parallel-corpus ingestion: filtering, masking, and batch construction.

Filtering drops empty, over-long, and out-of-script pairs and reports the
counts. Batch construction applies the selected masking scheme and builds
the per-side soft label distributions that the generative losses train
against:

* ``smlm``: one token of the masked side is replaced by <mask>; both sides
  carry a point-mass label on that token.
* ``xtr``: no masking; each side's label is uniform over the distinct token
  types of the *opposite* sentence.
* ``ugt``: one token masked as in smlm; each side's label is the even
  mixture of the two above (half mass on the masked token, half spread
  uniformly over the opposite sentence's types; masses add on overlap).
* ``mlm`` / ``mlm_xtr``: BERT-style corruption of 15% of the masked side's
  positions with the 80/10/10 replacement rule; per-position targets
  instead of (mlm) or alongside (mlm_xtr) the soft labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from duosent.errors import InputError
from duosent.tokenizer import Vocab, normalize

logger = logging.getLogger(__name__)

GENERATIVE_MODES = ("mlm", "smlm", "xtr", "mlm_xtr", "ugt")

# Codepoint ranges for the script whitelist. "latin" is deliberately broad:
# ASCII plus Latin-1/Extended letters, general punctuation and digits.
SCRIPT_RANGES = {
    "latin": (
        (0x0020, 0x007E),
        (0x00A0, 0x024F),
        (0x2000, 0x206F),
    ),
    "any": ((0x0000, 0x10FFFF),),
}


def _in_ranges(text: str, ranges) -> bool:
    return all(any(lo <= ord(ch) <= hi for lo, hi in ranges) for ch in text)


def parse_script_ranges(spec: str):
    """Resolve a script spec: a preset name or comma-separated hex ranges
    like ``0x41-0x5A,0x61-0x7A``."""
    if spec in SCRIPT_RANGES:
        return SCRIPT_RANGES[spec]
    ranges = []
    for part in spec.split(","):
        lo, sep, hi = part.partition("-")
        if not sep:
            raise InputError(
                f"bad script range {part!r}; use a preset ({', '.join(SCRIPT_RANGES)}) "
                "or hex ranges like 0x41-0x5A"
            )
        try:
            ranges.append((int(lo, 16), int(hi, 16)))
        except ValueError as exc:
            raise InputError(f"bad script range {part!r}: {exc}") from exc
    return tuple(ranges)


@dataclass
class FilterRules:
    max_len: int = 64
    length_unit: str = "subword"  # "subword" needs a vocab; "word" splits on spaces
    src_scripts: str = "latin"
    tgt_scripts: str = "latin"


@dataclass
class FilterReport:
    read: int = 0
    kept: int = 0
    dropped_empty: int = 0
    dropped_length: int = 0
    dropped_charset: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_empty + self.dropped_length + self.dropped_charset

    def to_text(self) -> str:
        return (
            f"read={self.read}\nkept={self.kept}\ndropped={self.dropped}\n"
            f"dropped_empty={self.dropped_empty}\n"
            f"dropped_length={self.dropped_length}\n"
            f"dropped_charset={self.dropped_charset}\n"
        )


def read_parallel(src_path, tgt_path=None) -> list[tuple[str, str]]:
    """Load aligned sentences from two text files or one two-column TSV."""
    if tgt_path is None:
        pairs = []
        with open(src_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                cols = line.rstrip("\n").split("\t")
                if len(cols) != 2:
                    raise InputError(f"{src_path}:{lineno}: expected 2 tab-separated columns")
                pairs.append((cols[0], cols[1]))
        return pairs
    with open(src_path, encoding="utf-8") as fh:
        src = fh.read().split("\n")
    with open(tgt_path, encoding="utf-8") as fh:
        tgt = fh.read().split("\n")
    if src and src[-1] == "":
        src.pop()
    if tgt and tgt[-1] == "":
        tgt.pop()
    if len(src) != len(tgt):
        raise InputError(
            f"misaligned corpus files: {src_path} has {len(src)} lines, "
            f"{tgt_path} has {len(tgt)}"
        )
    return list(zip(src, tgt))


def filter_pairs(
    pairs: list[tuple[str, str]],
    rules: FilterRules,
    vocab: Vocab | None = None,
) -> tuple[list[tuple[str, str]], FilterReport]:
    """Apply the cleaning rules; returns kept (normalized) pairs + counts."""
    if rules.length_unit == "subword" and vocab is None:
        raise InputError("subword length filtering requires a trained vocabulary")
    if rules.length_unit not in ("subword", "word"):
        raise InputError(f"unknown length unit {rules.length_unit!r}")
    src_ranges = parse_script_ranges(rules.src_scripts)
    tgt_ranges = parse_script_ranges(rules.tgt_scripts)

    def length(text: str) -> int:
        if rules.length_unit == "subword":
            return len(vocab.encode(text))
        return len(text.split())

    report = FilterReport()
    kept: list[tuple[str, str]] = []
    for raw_src, raw_tgt in pairs:
        report.read += 1
        s, t = normalize(raw_src), normalize(raw_tgt)
        if not s or not t:
            report.dropped_empty += 1
            continue
        if not (_in_ranges(s, src_ranges) and _in_ranges(t, tgt_ranges)):
            report.dropped_charset += 1
            continue
        if length(s) > rules.max_len or length(t) > rules.max_len:
            report.dropped_length += 1
            continue
        kept.append((s, t))
        report.kept += 1
    return kept, report


def filter_corpus(src_path, tgt_path, rules: FilterRules, vocab: Vocab | None = None):
    """File-level entry: line-aligned inputs -> filtered pairs + report."""
    return filter_pairs(read_parallel(src_path, tgt_path), rules, vocab)


# -- tokenized pairs and label distributions ----------------------------------


@dataclass
class TokenizedPair:
    src_ids: list[int]
    tgt_ids: list[int]


def tokenize_pairs(pairs: list[tuple[str, str]], vocab: Vocab) -> list[TokenizedPair]:
    out = []
    for s, t in pairs:
        ts, tt = vocab.encode(s), vocab.encode(t)
        if not ts or not tt:
            raise InputError("tokenized pair has an empty side; filter the corpus first")
        out.append(TokenizedPair(ts, tt))
    return out


def uniform_type_label(opposite_ids: list[int], frequency_weighted: bool = False) -> dict[int, float]:
    """Reconstruction label built from the opposite sentence.

    Default: uniform over its distinct token types (guaranteeing a proper
    distribution). The frequency-weighted variant divides raw counts by
    the sentence length instead.
    """
    if not opposite_ids:
        raise InputError("cannot build a label from an empty sentence")
    if frequency_weighted:
        n = len(opposite_ids)
        label: dict[int, float] = {}
        for i in opposite_ids:
            label[i] = label.get(i, 0.0) + 1.0 / n
        return label
    types = sorted(set(opposite_ids))
    p = 1.0 / len(types)
    return {i: p for i in types}


def point_label(token_id: int) -> dict[int, float]:
    return {token_id: 1.0}


def mix_labels(a: dict[int, float], b: dict[int, float]) -> dict[int, float]:
    """Even mixture of two distributions; overlapping masses add."""
    out = {k: 0.5 * v for k, v in a.items()}
    for k, v in b.items():
        out[k] = out.get(k, 0.0) + 0.5 * v
    return out


@dataclass
class BatchConfig:
    batch_size: int = 128
    generative_mode: str = "ugt"
    mlm_rate: float = 0.15
    frequency_weighted_labels: bool = False


@dataclass
class PairBatch:
    """One training step's worth of aligned pairs, padded and labeled.

    `direction` names the masked side for this step: 0 masks src, 1 masks
    tgt. `q_src` / `q_tgt` are sparse label distributions for the
    prediction made from the respective side's representation (None in
    pure mlm mode). The mlm_* arrays are flat (example, position, target)
    triples over the masked side, empty outside mlm modes.
    """

    src_ids: np.ndarray
    tgt_ids: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    direction: int
    mask_positions: np.ndarray
    masked_token_ids: np.ndarray
    q_src: list[dict[int, float]] | None
    q_tgt: list[dict[int, float]] | None
    mlm_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    mlm_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    mlm_targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.src_ids.shape[0]


def _pad(seqs: list[list[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.float32)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def _maskable_positions(ids: list[int], special_ids) -> list[int]:
    return [i for i, t in enumerate(ids) if t not in special_ids]


def _apply_mlm_corruption(
    ids: list[int], positions: list[int], vocab: Vocab, rng: np.random.Generator
) -> list[int]:
    """80% <mask>, 10% random token, 10% unchanged at each chosen position."""
    out = list(ids)
    n_specials = len(vocab.special_ids)
    for p in positions:
        roll = rng.random()
        if roll < 0.8:
            out[p] = vocab.mask_id
        elif roll < 0.9:
            out[p] = int(rng.integers(n_specials, len(vocab)))
    return out


def make_batch(
    pairs: list[TokenizedPair],
    vocab: Vocab,
    config: BatchConfig,
    rng: np.random.Generator,
    direction: int = 0,
) -> PairBatch:
    """Assemble one padded, masked, labeled batch from tokenized pairs.

    Pairs whose masked side has no maskable token are skipped with a
    warning. Direction 0 masks the src side, 1 the tgt side.
    """
    mode = config.generative_mode
    if mode not in GENERATIVE_MODES:
        raise InputError(f"unknown generative mode {mode!r}; choose from {GENERATIVE_MODES}")
    if direction not in (0, 1):
        raise InputError("direction must be 0 (mask src) or 1 (mask tgt)")
    if not pairs:
        raise InputError("cannot build a batch from zero pairs")

    special_ids = vocab.special_ids
    kept: list[TokenizedPair] = []
    for pair in pairs:
        masked_side = pair.src_ids if direction == 0 else pair.tgt_ids
        if mode in ("smlm", "ugt", "mlm", "mlm_xtr") and not _maskable_positions(masked_side, special_ids):
            logger.warning("skipping pair with no maskable token on the masked side")
            continue
        kept.append(pair)
    if not kept:
        raise InputError("all pairs in the batch were unmaskable")

    b = len(kept)
    src_seqs = [list(p.src_ids) for p in kept]
    tgt_seqs = [list(p.tgt_ids) for p in kept]
    mask_positions = np.full(b, -1, dtype=np.int64)
    masked_token_ids = np.full(b, -1, dtype=np.int64)
    q_src: list[dict[int, float]] | None = None
    q_tgt: list[dict[int, float]] | None = None
    mlm_rows: list[int] = []
    mlm_cols: list[int] = []
    mlm_targets: list[int] = []

    masked_seqs = src_seqs if direction == 0 else tgt_seqs

    if mode in ("smlm", "ugt"):
        q_src, q_tgt = [], []
        for i, pair in enumerate(kept):
            seq = masked_seqs[i]
            positions = _maskable_positions(seq, special_ids)
            pos = positions[int(rng.integers(len(positions)))]
            w_t = seq[pos]
            mask_positions[i] = pos
            masked_token_ids[i] = w_t
            seq[pos] = vocab.mask_id
            point = point_label(w_t)
            xtr_from_tgt = uniform_type_label(pair.tgt_ids, config.frequency_weighted_labels)
            xtr_from_src = uniform_type_label(pair.src_ids, config.frequency_weighted_labels)
            if mode == "smlm":
                q_src.append(point)
                q_tgt.append(point)
            else:
                q_src.append(mix_labels(point, xtr_from_tgt))
                q_tgt.append(mix_labels(point, xtr_from_src))
    elif mode == "xtr":
        q_src = [uniform_type_label(p.tgt_ids, config.frequency_weighted_labels) for p in kept]
        q_tgt = [uniform_type_label(p.src_ids, config.frequency_weighted_labels) for p in kept]
    else:  # mlm / mlm_xtr
        if mode == "mlm_xtr":
            q_src = [uniform_type_label(p.tgt_ids, config.frequency_weighted_labels) for p in kept]
            q_tgt = [uniform_type_label(p.src_ids, config.frequency_weighted_labels) for p in kept]
        for i in range(b):
            seq = masked_seqs[i]
            positions = _maskable_positions(seq, special_ids)
            n_pick = max(1, int(round(config.mlm_rate * len(positions))))
            chosen = sorted(rng.choice(len(positions), size=n_pick, replace=False).tolist())
            chosen = [positions[c] for c in chosen]
            originals = [seq[p] for p in chosen]
            masked_seqs[i] = _apply_mlm_corruption(seq, chosen, vocab, rng)
            mlm_rows.extend([i] * len(chosen))
            mlm_cols.extend(chosen)
            mlm_targets.extend(originals)
        if direction == 0:
            src_seqs = masked_seqs
        else:
            tgt_seqs = masked_seqs

    src_ids, src_mask = _pad(src_seqs, vocab.pad_id)
    tgt_ids, tgt_mask = _pad(tgt_seqs, vocab.pad_id)
    return PairBatch(
        src_ids=src_ids,
        tgt_ids=tgt_ids,
        src_mask=src_mask,
        tgt_mask=tgt_mask,
        direction=direction,
        mask_positions=mask_positions,
        masked_token_ids=masked_token_ids,
        q_src=q_src,
        q_tgt=q_tgt,
        mlm_rows=np.asarray(mlm_rows, dtype=np.int64),
        mlm_cols=np.asarray(mlm_cols, dtype=np.int64),
        mlm_targets=np.asarray(mlm_targets, dtype=np.int64),
    )


def densify_labels(labels: list[dict[int, float]], vocab_size: int, dtype=np.float32) -> np.ndarray:
    """Expand sparse per-pair labels to a dense [batch, vocab] matrix."""
    out = np.zeros((len(labels), vocab_size), dtype=dtype)
    for i, label in enumerate(labels):
        for token_id, p in label.items():
            out[i, token_id] = p
    return out
