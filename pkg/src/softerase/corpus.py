"""JSONL corpus ingestion and the planted-keyword synthetic corpus."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import DataError, ParameterError
from .model import TokenSequence
from .numerics import RngStream

SPLITS = ("train", "dev", "test")


def load_corpus(
    path: str | Path,
    *,
    vocab_size: int | None = None,
    num_classes: int | None = None,
    max_len: int | None = None,
) -> list[TokenSequence]:
    """Read ``{"id", "tokens", "label"}`` records, one per line, in file order.

    Blank lines are skipped. Bounds are checked only for the limits given.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    records: list[TokenSequence] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rid = obj["id"]
            tokens = obj["tokens"]
            label = obj["label"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: cannot parse record: {exc}") from exc
        if not isinstance(rid, str):
            raise DataError(f"{path}:{lineno}: id must be a string")
        if (
            not isinstance(tokens, list)
            or not tokens
            or not all(isinstance(t, int) and not isinstance(t, bool) for t in tokens)
        ):
            raise DataError(f"record {rid!r}: tokens must be a non-empty list of integers")
        if not isinstance(label, int) or isinstance(label, bool) or label < 0:
            raise DataError(f"record {rid!r}: label must be a non-negative integer")
        if rid in seen:
            raise DataError(f"record {rid!r}: duplicate id")
        seen.add(rid)
        seq = TokenSequence(rid, tuple(tokens), label)
        if min(seq.tokens) < 0:
            raise DataError(f"record {rid!r}: negative token index")
        seq.validate(
            vocab_size if vocab_size is not None else max(seq.tokens) + 1,
            num_classes if num_classes is not None else label + 1,
            max_len if max_len is not None else len(seq.tokens),
        )
        records.append(seq)
    if not records:
        raise DataError(f"corpus {path} is empty")
    return records


def write_corpus(records: Iterable[TokenSequence], path: str | Path) -> None:
    with open(path, "w") as fh:
        for seq in records:
            fh.write(
                json.dumps({"id": seq.id, "tokens": list(seq.tokens), "label": seq.label})
                + "\n"
            )


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-keyword classification corpus.

    Class ``c`` owns keyword tokens ``[c*k, (c+1)*k)``; every other token is
    filler. With probability ``injection_prob`` an instance receives one
    keyword of its label at a random position; otherwise it is pure filler
    (and its label is unpredictable).
    """

    vocab_size: int = 60
    num_classes: int = 2
    keywords_per_class: int = 3
    injection_prob: float = 1.0
    min_len: int = 6
    max_len: int = 16
    n_train: int = 600
    n_dev: int = 100
    n_test: int = 200

    def __post_init__(self):
        if self.num_classes < 2:
            raise ParameterError("need at least two classes")
        if self.keywords_per_class < 1:
            raise ParameterError("need at least one keyword per class")
        if self.vocab_size <= self.num_classes * self.keywords_per_class:
            raise ParameterError("vocabulary leaves no room for filler tokens")
        if not 0.0 <= self.injection_prob <= 1.0:
            raise ParameterError("injection probability must lie in [0, 1]")
        if not 2 <= self.min_len <= self.max_len:
            raise ParameterError("sequence lengths must satisfy 2 <= min_len <= max_len")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ParameterError("corpus sizes must be non-negative")

    @property
    def n_keywords(self) -> int:
        return self.num_classes * self.keywords_per_class

    def keywords(self, cls: int) -> range:
        k = self.keywords_per_class
        return range(cls * k, (cls + 1) * k)


def _synth_instance(spec: SyntheticSpec, rng: RngStream, rid: str) -> TokenSequence:
    u = rng.uniform(5)
    label = min(int(u[0] * spec.num_classes), spec.num_classes - 1)
    span = spec.max_len - spec.min_len + 1
    length = spec.min_len + min(int(u[1] * span), span - 1)
    n_filler = spec.vocab_size - spec.n_keywords
    filler = rng.split(1).uniform(length)
    tokens = [spec.n_keywords + min(int(f * n_filler), n_filler - 1) for f in filler]
    if u[2] < spec.injection_prob:
        pos = min(int(u[3] * length), length - 1)
        k = spec.keywords_per_class
        tokens[pos] = label * k + min(int(u[4] * k), k - 1)
    return TokenSequence(rid, tuple(tokens), label)


def generate_synthetic(spec: SyntheticSpec, rng: RngStream) -> dict[str, list[TokenSequence]]:
    sizes = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
    out: dict[str, list[TokenSequence]] = {}
    for split_id, split in enumerate(SPLITS):
        stream = rng.split(split_id)
        out[split] = [
            _synth_instance(spec, stream.split(j), f"{split}-{j:06d}")
            for j in range(sizes[split])
        ]
    return out
