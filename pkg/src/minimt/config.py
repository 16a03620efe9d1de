"""Experiment configuration: a flat JSON file mirrored by dataclasses.

Unknown keys are errors, so typos never silently fall back to defaults, and
a loaded config round-trips through ``to_dict``/``save`` losslessly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from minimt.data import SplitConfig, Vocabulary
from minimt.decoding import DecodeConfig
from minimt.model import ModelConfig
from minimt.training import OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _from_dict(cls, payload, path):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected an object, got {type(payload).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in payload:
            value = payload[f.name]
            nested = _SECTION_TYPES.get((cls, f.name))
            kwargs[f.name] = _from_dict(nested, value, f"{path}.{f.name}") if nested else value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None


@dataclass
class DataSection:
    src_lang: str = "aa"
    tgt_lang: str = "bb"
    parallel_src_file: str = ""
    parallel_tgt_file: str = ""
    mono_files: dict = field(default_factory=dict)  # language -> path
    parallel_split: list = field(default_factory=lambda: [80, 10, 10])
    mono_split: list = field(default_factory=lambda: [50, 0, 0])
    tokenize_mode: str = "word"
    min_count: int = 1


@dataclass
class ModelSection:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    d_ff: int = 256
    max_len: int = 64
    dropout_rate: float = 0.0
    tie_projections: bool = True


@dataclass
class TrainSection:
    steps: int | None = 300
    epochs: int | None = None
    batch_size: int = 16
    mtl_batch_size: int | None = None   # per-regime override (paper-faithful asymmetry)
    clm_batch_size: int | None = None
    log_interval: int = 50
    checkpoint_interval: int | None = None
    mixing: str = "joint"
    clm_loss_weight: float = 1.0
    clip_norm: float | None = None
    freeze: str = "first_half"  # or "none"


@dataclass
class OptimizerSection:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class DecodeSection:
    beam_size: int = 2
    length_penalty: float = 1.2
    max_decode_len: int = 32
    penalty_form: str = "pow"
    penalize_during_search: bool = False


@dataclass
class EvaluationSection:
    max_n: int = 4
    smoothing_k: float = 5.0
    aggregate: str = "corpus"  # or "macro"


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/experiment"
    directions: list = field(default_factory=list)  # e.g. ["aa->bb", "bb->aa"]
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def __post_init__(self):
        if not self.directions:
            self.directions = [f"{self.data.src_lang}->{self.data.tgt_lang}"]
        langs = {self.data.src_lang, self.data.tgt_lang}
        for d in self.directions:
            a, sep, b = d.partition("->")
            if not sep or a not in langs or b not in langs or a == b:
                raise ConfigError(f"direction {d!r} must be '<src>-><tgt>' over languages {sorted(langs)}")
        if self.train.freeze not in ("first_half", "none"):
            raise ConfigError(f"train.freeze must be 'first_half' or 'none', got {self.train.freeze!r}")
        if self.evaluation.aggregate not in ("corpus", "macro"):
            raise ConfigError(f"evaluation.aggregate must be 'corpus' or 'macro'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def validate_files(self) -> None:
        paths = [self.data.parallel_src_file, self.data.parallel_tgt_file,
                 *self.data.mono_files.values()]
        missing = [p for p in paths if p and not Path(p).exists()]
        if missing:
            raise ConfigError(f"referenced corpus files do not exist: {missing}")

    @property
    def languages(self):
        return sorted({self.data.src_lang, self.data.tgt_lang})


_SECTION_TYPES = {
    (ExperimentConfig, "data"): DataSection,
    (ExperimentConfig, "model"): ModelSection,
    (ExperimentConfig, "train"): TrainSection,
    (ExperimentConfig, "optimizer"): OptimizerSection,
    (ExperimentConfig, "decode"): DecodeSection,
    (ExperimentConfig, "evaluation"): EvaluationSection,
}


def config_from_dict(payload: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, payload, "config")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(payload)


# --- adapters to the runtime configs -------------------------------------------


def build_model_config(config: ExperimentConfig, vocab_size: int) -> ModelConfig:
    m = config.model
    return ModelConfig(vocab_size=vocab_size, d_model=m.d_model, n_heads=m.n_heads,
                       n_enc_layers=m.n_enc_layers, n_dec_layers=m.n_dec_layers,
                       d_ff=m.d_ff, max_len=m.max_len, dropout_rate=m.dropout_rate,
                       seed=config.seed, tie_projections=m.tie_projections)


def build_train_config(config: ExperimentConfig, regime: str) -> TrainConfig:
    t = config.train
    batch = t.batch_size
    if regime == "mtl" and t.mtl_batch_size is not None:
        batch = t.mtl_batch_size
    return TrainConfig(steps=t.steps, epochs=t.epochs, batch_size=batch,
                       clm_batch_size=t.clm_batch_size, max_len=config.model.max_len,
                       seed=config.seed, log_interval=t.log_interval,
                       checkpoint_interval=t.checkpoint_interval, mixing=t.mixing,
                       clm_loss_weight=t.clm_loss_weight, clip_norm=t.clip_norm)


def build_optimizer_config(config: ExperimentConfig) -> OptimizerConfig:
    o = config.optimizer
    return OptimizerConfig(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)


def build_decode_config(config: ExperimentConfig, vocabulary: Vocabulary,
                        target_language: str) -> DecodeConfig:
    d = config.decode
    return DecodeConfig(eos_id=vocabulary.eos_id, start_id=vocabulary.lang_id(target_language),
                        beam_size=d.beam_size, length_penalty=d.length_penalty,
                        max_decode_len=min(d.max_decode_len, config.model.max_len - 1),
                        penalty_form=d.penalty_form,
                        penalize_during_search=d.penalize_during_search)


def parallel_split_config(config: ExperimentConfig) -> SplitConfig:
    a, b, c = config.data.parallel_split
    return SplitConfig(a, b, c, seed=config.seed)


def mono_split_config(config: ExperimentConfig) -> SplitConfig:
    a, b, c = config.data.mono_split
    return SplitConfig(a, b, c, seed=config.seed)
