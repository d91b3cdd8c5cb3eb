"""Flat run configuration shared by the config file and the command line."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from neuron_alloc.allocation import AllocationConfig
from neuron_alloc.data import SyntheticTaskSpec
from neuron_alloc.errors import ConfigError
from neuron_alloc.model import ModelConfig
from neuron_alloc.pipeline import TrainSchedule


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # model
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ffn: int = 128
    max_seq_len: int = 32
    dropout_rate: float = 0.0
    tie_output: bool = False
    # pretraining
    steps: int = 2000
    warmup: int = 200
    lr: float = 2e-3
    batch_tokens: int = 600
    eval_every: int = 500
    patience: int = 0
    # fine-tuning
    finetune_steps: int = 1000
    finetune_warmup: int = 100
    finetune_lr: float = 2e-3
    finetune_patience: int = 0
    debug: bool = False
    # importance and allocation
    criterion: str = "te"
    cap: int = 10000
    rho: float = 0.9
    k: float = 0.7
    variant: str = "pair"
    # decoding and evaluation
    beam: int = 4
    alpha: float = 0.6
    eval_limit: int = 0  # 0: whole test split
    # synthetic data
    scenario: str = "one_to_many"
    base_vocab: int = 16
    min_len: int = 4
    max_len: int = 10
    languages: str = "src:identity_copy,cp:identity_copy,rv:reversal,sh:vocab_shift:3"
    source_language: str = "src"
    train_size: int = 5000
    dev_size: int = 200
    test_size: int = 500

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, values: dict) -> "RunConfig":
        """Copy with string or typed values applied; unknown keys are rejected."""
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, value in values.items():
            if value is None:
                continue
            if key not in types:
                raise ConfigError(key, "unknown configuration key")
            parsed[key] = _coerce(key, types[key], value)
        out = replace(self, **parsed)
        out.allocation()
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        return cls().updated(values)

    def model_config(self, vocab_size: int, pairs) -> ModelConfig:
        return ModelConfig(
            num_layers=self.num_layers, d_model=self.d_model, num_heads=self.num_heads, d_ffn=self.d_ffn,
            vocab_size=vocab_size, max_seq_len=self.max_seq_len, dropout_rate=self.dropout_rate,
            language_pairs=tuple(pairs), tie_output=self.tie_output,
        )

    def pretrain_schedule(self) -> TrainSchedule:
        return TrainSchedule("pretrain", self.steps, self.warmup, self.lr, self.batch_tokens, self.seed,
                             self.eval_every, self.patience)

    def finetune_schedule(self) -> TrainSchedule:
        return TrainSchedule("finetune", self.finetune_steps, self.finetune_warmup, self.finetune_lr,
                             self.batch_tokens, self.seed + 1, self.eval_every, self.finetune_patience)

    def allocation(self) -> AllocationConfig:
        return AllocationConfig(self.rho, self.k, self.variant)

    def synthetic_spec(self) -> SyntheticTaskSpec:
        langs = []
        for item in self.languages.split(","):
            name, sep, transform = item.strip().partition(":")
            if not sep:
                raise ConfigError("languages", f"expected name:transform, got '{item}'")
            langs.append((name, transform))
        spec = SyntheticTaskSpec(
            scenario=self.scenario, base_vocab=self.base_vocab, min_len=self.min_len, max_len=self.max_len,
            languages=tuple(langs), source_language=self.source_language,
            sizes=(("train", self.train_size), ("dev", self.dev_size), ("test", self.test_size)),
            seed=self.seed,
        )
        spec.validate()
        return spec


def _coerce(key: str, kind: str, value):
    if not isinstance(value, str):
        if kind == "bool" and not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    text = value.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(key, f"expected {kind}, got '{value}'") from None
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(key, f"expected a boolean, got '{value}'")
    return text
