"""Synthetic bilingual world for end-to-end experiments.

Language A sentences are drawn from class-conditional unigram
distributions with disjoint per-class word blocks, so a bag-of-words
oracle classifies them perfectly. Language B "translations" apply a fixed
bijective word mapping plus a deterministic local reordering (adjacent
pairs swapped), which makes cross-lingual alignment learnable by
construction without being pure position memorization. The two languages
use disjoint character alphabets so the script filter has real work to do.

Gold retrieval alignment is by line number; sentences are globally unique
so the gold is unambiguous.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from duosent import fileio
from duosent.errors import InputError

A_ALPHABET = "abcdefghijklm"
B_ALPHABET = "nopqrstuvwxyz"

SPLITS = ("train", "val", "test")


@dataclass
class SynthConfig:
    train_pairs: int = 2000
    val_pairs: int = 200
    test_pairs: int = 200
    vocab_per_lang: int = 200
    classes: int = 4
    min_words: int = 4
    max_words: int = 12

    def __post_init__(self):
        if self.classes < 2:
            raise InputError("synth.classes must be at least 2")
        if self.vocab_per_lang < self.classes:
            raise InputError("synth.vocab_per_lang must cover every class block")
        if not 1 <= self.min_words <= self.max_words:
            raise InputError("need 1 <= synth.min_words <= synth.max_words")


def _make_words(rng: np.random.Generator, n: int, alphabet: str) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        length = int(rng.integers(3, 6))
        word = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _swap_adjacent(words: list[str]) -> list[str]:
    out = list(words)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


@dataclass
class SynthCorpus:
    lexicon_a: list[str]
    lexicon_b: list[str]
    splits: dict[str, tuple[list[str], list[str], list[int]]]  # split -> (a, b, labels)


def generate(config: SynthConfig, seed: int) -> SynthCorpus:
    rng = np.random.default_rng([seed, 0x5717])
    lexicon_a = _make_words(rng, config.vocab_per_lang, A_ALPHABET)
    lexicon_b = _make_words(rng, config.vocab_per_lang, B_ALPHABET)

    # disjoint class blocks over word indices (remainder joins the last block)
    block = config.vocab_per_lang // config.classes
    class_words = [
        list(range(c * block, (c + 1) * block if c < config.classes - 1 else config.vocab_per_lang))
        for c in range(config.classes)
    ]

    counts = {"train": config.train_pairs, "val": config.val_pairs, "test": config.test_pairs}
    seen_sentences: set[str] = set()
    splits: dict[str, tuple[list[str], list[str], list[int]]] = {}
    for split in SPLITS:
        a_lines, b_lines, labels = [], [], []
        while len(a_lines) < counts[split]:
            label = int(rng.integers(config.classes))
            length = int(rng.integers(config.min_words, config.max_words + 1))
            pool = class_words[label]
            idx = [pool[i] for i in rng.integers(0, len(pool), size=length)]
            sentence_a = " ".join(lexicon_a[i] for i in idx)
            if sentence_a in seen_sentences:
                continue
            seen_sentences.add(sentence_a)
            sentence_b = " ".join(_swap_adjacent([lexicon_b[i] for i in idx]))
            a_lines.append(sentence_a)
            b_lines.append(sentence_b)
            labels.append(label)
        splits[split] = (a_lines, b_lines, labels)
    return SynthCorpus(lexicon_a, lexicon_b, splits)


def write_corpus(corpus: SynthCorpus, out_dir) -> dict[str, str]:
    """Write per-split sentence and label files; returns the path map."""
    os.makedirs(out_dir, exist_ok=True)
    paths: dict[str, str] = {}
    for split, (a_lines, b_lines, labels) in corpus.splits.items():
        for suffix, lines in (
            ("a.txt", a_lines),
            ("b.txt", b_lines),
            ("labels.txt", [str(x) for x in labels]),
        ):
            path = os.path.join(out_dir, f"{split}.{suffix}")
            fileio.atomic_write_text(path, "\n".join(lines) + "\n")
            paths[f"{split}.{suffix}"] = path
    return paths


def bag_of_words_oracle_accuracy(corpus: SynthCorpus) -> float:
    """Brute-force classifier: predict the class whose word block covers
    the sentence. Disjoint class supports make this exact."""
    config_words: dict[str, int] = {}
    train_a, _, train_labels = corpus.splits["train"]
    for sentence, label in zip(train_a, train_labels):
        for word in sentence.split():
            config_words[word] = label
    _, _, test_labels = corpus.splits["test"]
    test_a = corpus.splits["test"][0]
    hits = 0
    for sentence, label in zip(test_a, test_labels):
        votes = [config_words.get(w, -1) for w in sentence.split()]
        votes = [v for v in votes if v >= 0]
        prediction = max(set(votes), key=votes.count) if votes else -1
        hits += prediction == label
    return hits / len(test_labels)
