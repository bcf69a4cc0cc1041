"""Flat key=value configuration with presets and override precedence.

Sources are applied lowest to highest: built-in defaults, the optional
config file, the DUOSENT_SEED environment variable, then repeated
``--set key=value`` flags. ``model.preset`` expands to a block of model
values that explicitly-set model keys always override. Unknown keys are
rejected together with the list of valid keys.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from duosent.corpus import BatchConfig, FilterRules
from duosent.errors import InputError
from duosent.losses import LossConfig
from duosent.model import DESK_PRESET, PAPER_PRESET, EncoderConfig
from duosent.trainer import TrainConfig

SEED_ENV_VAR = "DUOSENT_SEED"


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_weights(raw: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated weights, got {raw!r}")
    return tuple(float(p) for p in parts)


def _choice(*options: str):
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {options}, got {raw!r}")
        return raw

    return parse


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "model.preset": (_choice("desk", "paper"), "desk"),
    "model.n_layers": (int, DESK_PRESET["n_layers"]),
    "model.d_model": (int, DESK_PRESET["d_model"]),
    "model.d_ff": (int, DESK_PRESET["d_ff"]),
    "model.n_heads": (int, DESK_PRESET["n_heads"]),
    "model.vocab_size": (int, DESK_PRESET["vocab_size"]),
    "model.max_len": (int, DESK_PRESET["max_len"]),
    "model.dropout": (float, 0.1),
    "model.pre_norm": (_parse_bool, False),
    "model.head_activation": (_choice("tanh", "linear"), "tanh"),
    "model.generative_source": (_choice("pooled", "masked_state"), "pooled"),
    "loss.generative_mode": (_choice("mlm", "smlm", "xtr", "mlm_xtr", "ugt"), "ugt"),
    "loss.use_align": (_parse_bool, True),
    "loss.use_sim": (_parse_bool, True),
    "loss.weights": (_parse_weights, (1.0, 2.0, 2.0)),
    "loss.reduction": (_choice("mean", "paper_sum"), "mean"),
    "train.epochs": (int, 12),
    "train.lr": (float, 0.001),
    "train.warmup_epochs": (int, 3),
    "train.batch_size": (int, 128),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.seed": (int, 0),
    "train.checkpoint_every_steps": (int, 0),
    "train.grad_clip": (float, 0.0),
    "corpus.max_len": (int, 64),
    "corpus.length_unit": (_choice("subword", "word"), "subword"),
    "corpus.src_scripts": (str, "latin"),
    "corpus.tgt_scripts": (str, "latin"),
    "corpus.mlm_rate": (float, 0.15),
    "corpus.frequency_weighted_labels": (_parse_bool, False),
    "vocab.size": (int, 1000),
    "vocab.lowercase": (_parse_bool, False),
    "eval.mode": (_choice("cosine", "margin"), "margin"),
    "eval.margin_k": (int, 4),
    "eval.margin_variant": (_choice("ratio", "distance", "absolute"), "ratio"),
    "synth.train_pairs": (int, 2000),
    "synth.val_pairs": (int, 200),
    "synth.test_pairs": (int, 200),
    "synth.vocab_per_lang": (int, 200),
    "synth.classes": (int, 4),
    "synth.min_words": (int, 4),
    "synth.max_words": (int, 12),
}

_PRESET_BLOCKS = {"desk": DESK_PRESET, "paper": PAPER_PRESET}
_PRESET_KEYS = {
    "model.n_layers": "n_layers",
    "model.d_model": "d_model",
    "model.d_ff": "d_ff",
    "model.n_heads": "n_heads",
    "model.vocab_size": "vocab_size",
    "model.max_len": "max_len",
}


def _reject_unknown(key: str) -> None:
    if key not in SCHEMA:
        valid = ", ".join(sorted(SCHEMA))
        raise InputError(f"unknown config key {key!r}; valid keys: {valid}")


def parse_config_file(path) -> dict[str, str]:
    """Read `key = value` lines; '#' starts a comment; blank lines ignored."""
    pairs: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            key, sep, value = stripped.partition("=")
            if not sep:
                raise InputError(f"{path}:{lineno}: expected key=value, got {line.rstrip()!r}")
            pairs[key.strip()] = value.strip()
    return pairs


def parse_set_overrides(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in pairs:
        key, sep, value = raw.partition("=")
        if not sep:
            raise InputError(f"--set expects key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def resolve(
    config_path=None,
    set_overrides: list[str] | None = None,
    env: dict | None = None,
) -> dict[str, object]:
    """Merge all sources into a fully-typed value map (every key present)."""
    env = os.environ if env is None else env
    file_pairs = parse_config_file(config_path) if config_path else {}
    cli_pairs = parse_set_overrides(set_overrides or [])
    for key in (*file_pairs, *cli_pairs):
        _reject_unknown(key)

    raw: dict[str, str] = dict(file_pairs)
    if SEED_ENV_VAR in env:
        raw["train.seed"] = env[SEED_ENV_VAR]
    raw.update(cli_pairs)

    values: dict[str, object] = {key: default for key, (_, default) in SCHEMA.items()}
    # the preset expands first so explicit model keys always win
    preset_name = raw.get("model.preset", values["model.preset"])
    parser, _ = SCHEMA["model.preset"]
    preset_name = _parse_value("model.preset", parser, preset_name)
    values["model.preset"] = preset_name
    for key, preset_field in _PRESET_KEYS.items():
        values[key] = _PRESET_BLOCKS[preset_name][preset_field]
    for key, raw_value in raw.items():
        if key == "model.preset":
            continue
        parser, _ = SCHEMA[key]
        values[key] = _parse_value(key, parser, raw_value)
    return values


def _parse_value(key: str, parser, raw_value):
    if not isinstance(raw_value, str):
        return raw_value
    try:
        return parser(raw_value)
    except ValueError as exc:
        raise InputError(f"bad value for {key}: {exc}") from exc


def echo(values: dict[str, object]) -> str:
    """Render the resolved config; feeding the text back reproduces it."""
    lines = []
    for key in sorted(values):
        if key == "model.preset":
            continue  # concrete model.* values carry the information
        value = values[key]
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, tuple):
            rendered = ",".join(repr(v) if v != int(v) else str(int(v)) for v in value)
        else:
            rendered = str(value)
        lines.append(f"{key}={rendered}")
    return "\n".join(lines) + "\n"


@dataclass
class AppConfig:
    """Typed view over the resolved value map."""

    values: dict[str, object]

    @classmethod
    def load(cls, config_path=None, set_overrides=None, env=None) -> "AppConfig":
        return cls(resolve(config_path, set_overrides, env))

    def __getitem__(self, key: str):
        _reject_unknown(key)
        return self.values[key]

    def model_config(self) -> EncoderConfig:
        v = self.values
        return EncoderConfig(
            n_layers=v["model.n_layers"],
            d_model=v["model.d_model"],
            d_ff=v["model.d_ff"],
            n_heads=v["model.n_heads"],
            vocab_size=v["model.vocab_size"],
            max_len=v["model.max_len"],
            dropout_p=v["model.dropout"],
            pre_norm=v["model.pre_norm"],
            head_activation=v["model.head_activation"],
            generative_source=v["model.generative_source"],
        )

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(
            generative_mode=v["loss.generative_mode"],
            use_align=v["loss.use_align"],
            use_sim=v["loss.use_sim"],
            weights=v["loss.weights"],
            reduction=v["loss.reduction"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"],
            lr=v["train.lr"],
            warmup_epochs=v["train.warmup_epochs"],
            batch_size=v["train.batch_size"],
            beta1=v["train.beta1"],
            beta2=v["train.beta2"],
            eps=v["train.eps"],
            seed=v["train.seed"],
            checkpoint_every_steps=v["train.checkpoint_every_steps"],
            grad_clip=v["train.grad_clip"],
        )

    def filter_rules(self) -> FilterRules:
        v = self.values
        return FilterRules(
            max_len=v["corpus.max_len"],
            length_unit=v["corpus.length_unit"],
            src_scripts=v["corpus.src_scripts"],
            tgt_scripts=v["corpus.tgt_scripts"],
        )

    def batch_config(self) -> BatchConfig:
        v = self.values
        return BatchConfig(
            batch_size=v["train.batch_size"],
            generative_mode=v["loss.generative_mode"],
            mlm_rate=v["corpus.mlm_rate"],
            frequency_weighted_labels=v["corpus.frequency_weighted_labels"],
        )
