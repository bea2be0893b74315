"""Run configuration and its flat ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment; list values are
comma-separated. Keys are the ``RunConfig`` field names. Example::

    seed = 7
    fas = attention, input_x_grad, random
    ratios = 0.01, 0.05, 0.1, 0.2, 0.5
    samples = 16
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attribution import FA_NAMES
from .corpus import SyntheticSpec
from .errors import ParameterError
from .metrics import DEFAULT_RATIOS
from .model import TrainConfig

WORKERS_ENV = "SOFTERASE_WORKERS"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    dataset: str = "synthetic"
    # corpus: JSONL paths, or the synthetic generator when test_corpus is unset
    train_corpus: str | None = None
    test_corpus: str | None = None
    params_path: str | None = None
    vocab_size: int = 60
    num_classes: int = 2
    keywords_per_class: int = 3
    injection_prob: float = 1.0
    min_len: int = 6
    max_len: int = 16
    n_train: int = 600
    n_dev: int = 100
    n_test: int = 200
    # model
    dim: int = 16
    epochs: int = 30
    learning_rate: float = 1.0
    batch_size: int = 16
    # evaluation
    fas: tuple[str, ...] = FA_NAMES
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    samples: int = 16
    epsilon: float = 0.0
    ig_steps: int = 50
    soft_average: str = "probs"
    token_reduce: str = "sum_abs"
    output_dir: str = "run"
    adapter_command: str | None = None
    adapter_timeout_ms: int = 10_000
    attributions_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "fas", tuple(self.fas))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not self.fas:
            raise ParameterError("at least one feature attribution is required")
        if len(set(self.fas)) != len(self.fas):
            raise ParameterError("feature attribution list has duplicates")
        if not self.ratios:
            raise ParameterError("ratio grid is empty")
        if any(not 0.0 < r <= 1.0 for r in self.ratios):
            raise ParameterError("ratios must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.ratios, self.ratios[1:])):
            raise ParameterError("ratio grid must be strictly increasing")
        if self.samples < 1:
            raise ParameterError("samples must be at least 1")
        if self.epsilon < 0:
            raise ParameterError("epsilon must be non-negative")
        if self.ig_steps < 1:
            raise ParameterError("ig_steps must be at least 1")
        if self.soft_average not in ("probs", "metric"):
            raise ParameterError("soft_average must be 'probs' or 'metric'")
        if self.token_reduce not in ("sum_abs", "l2"):
            raise ParameterError("token_reduce must be 'sum_abs' or 'l2'")
        if self.adapter_timeout_ms <= 0:
            raise ParameterError("adapter_timeout_ms must be positive")
        known = set(FA_NAMES)
        if self.attributions_path is None and not set(self.fas) <= known:
            raise ParameterError(
                f"unknown attributions {sorted(set(self.fas) - known)}; "
                "external attributions need attributions_path"
            )
        self.synthetic_spec()
        self.train_config()

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            vocab_size=self.vocab_size,
            num_classes=self.num_classes,
            keywords_per_class=self.keywords_per_class,
            injection_prob=self.injection_prob,
            min_len=self.min_len,
            max_len=self.max_len,
            n_train=self.n_train,
            n_dev=self.n_dev,
            n_test=self.n_test,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, batch_size=self.batch_size
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in fields(self)}


def _plain(value):
    return list(value) if isinstance(value, tuple) else value


def _convert(name: str, text: str):
    kind = {f.name: f.type for f in fields(RunConfig)}.get(name)
    if kind is None:
        raise ParameterError(f"unknown configuration key {name!r}")
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple[str, ...]":
            return tuple(p.strip() for p in text.split(",") if p.strip())
        if kind == "tuple[float, ...]":
            return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ParameterError(f"bad value for {name}: {text!r}") from exc
    if kind == "str | None" and text.lower() in ("", "none"):
        return None
    return text


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _convert(key, value)
    return values


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Defaults, then the config file, then explicit overrides (``None`` means unset)."""
    values = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise ParameterError(f"cannot read config file {path}: {exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def coerce_overrides(pairs: dict[str, str | None]) -> dict:
    return {k: _convert(k, v) for k, v in pairs.items() if v is not None}


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ParameterError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ParameterError(f"{WORKERS_ENV} must be at least 1")
    return n
