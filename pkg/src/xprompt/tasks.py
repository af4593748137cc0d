"""Synthetic sequence-classification tasks with deterministic generators.

Three families share one interface: classify a token sequence into C classes.
Symbols 0 and 1 are reserved (0 is the mask token used by backbone
pretraining), so generated sequences only use ids >= 2.

PatternDetect   label 1 iff the marker bigram (2, 3) occurs adjacently.
MajorityClass   label = index of the symbol group with the most tokens.
ParityOfMarkers label = parity of the count of marker symbol 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .util import stable_seed

RESERVED_SYMBOLS = 2
PATTERN_BIGRAM = (2, 3)
PARITY_MARKER = 2

KINDS = ("pattern_detect", "majority_class", "parity_of_markers")


@dataclass(frozen=True)
class Example:
    """One labeled sequence. Immutable so datasets are value-semantic."""

    tokens: tuple[int, ...]
    label: int


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    vocab_size: int
    num_classes: int
    seq_len_min: int
    seq_len_max: int
    train_size: int
    dev_size: int
    seed: int

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.vocab_size < 8:
            raise ConfigError(f"vocab_size must be >= 8, got {self.vocab_size}")
        if self.num_classes not in (2, 3):
            raise ConfigError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if not (1 <= self.seq_len_min <= self.seq_len_max):
            raise ConfigError(
                f"bad seq_len range [{self.seq_len_min}, {self.seq_len_max}]")
        if self.train_size < 1 or self.dev_size < 1:
            raise ConfigError("train_size and dev_size must be positive")
        if self.kind == "pattern_detect" and self.seq_len_min < 2:
            raise ConfigError("pattern_detect needs seq_len_min >= 2 to fit the bigram")
        if self.kind == "parity_of_markers" and self.num_classes != 2:
            raise ConfigError("parity_of_markers is a binary task")
        if self.kind == "majority_class":
            groups = self.vocab_size - RESERVED_SYMBOLS
            if groups < 2 * self.num_classes:
                raise ConfigError(
                    f"vocab_size {self.vocab_size} too small for {self.num_classes} symbol groups")


def majority_groups(spec: TaskSpec) -> list[range]:
    """Contiguous, equal-width symbol groups; leftover symbols act as filler."""
    width = (spec.vocab_size - RESERVED_SYMBOLS) // (spec.num_classes + 1)
    return [range(RESERVED_SYMBOLS + c * width, RESERVED_SYMBOLS + (c + 1) * width)
            for c in range(spec.num_classes)]


def label_of(spec: TaskSpec, tokens: tuple[int, ...]) -> int | None:
    """Ground-truth label, or None where the rule is undecided (ties)."""
    if spec.kind == "pattern_detect":
        a, b = PATTERN_BIGRAM
        hit = any(x == a and y == b for x, y in zip(tokens, tokens[1:]))
        return 1 if hit else 0
    if spec.kind == "majority_class":
        groups = majority_groups(spec)
        counts = [sum(1 for t in tokens if t in g) for g in groups]
        top = max(counts)
        if counts.count(top) != 1:
            return None
        return counts.index(top)
    if spec.kind == "parity_of_markers":
        return sum(1 for t in tokens if t == PARITY_MARKER) % 2
    raise ConfigError(f"unknown task kind {spec.kind!r}")


def _draw_example(spec: TaskSpec, rng: np.random.Generator, target: int) -> Example:
    """Rejection-sample one sequence whose ground truth equals target."""
    lo, hi = spec.seq_len_min, spec.seq_len_max
    for _ in range(10_000):
        n = int(rng.integers(lo, hi + 1))
        toks = rng.integers(RESERVED_SYMBOLS, spec.vocab_size, size=n)
        if spec.kind == "pattern_detect" and target == 1:
            pos = int(rng.integers(0, n - 1))
            toks[pos], toks[pos + 1] = PATTERN_BIGRAM
        if spec.kind == "parity_of_markers":
            # place an exact marker count of the right parity, then shuffle
            top = max(n // 3, 1)
            count = int(rng.integers(0, top + 1))
            count -= (count % 2 != target)
            if count < 0:
                count += 2
            if count > n:
                continue
            rest = rng.integers(RESERVED_SYMBOLS + 1, spec.vocab_size, size=n - count)
            toks = np.concatenate([np.full(count, PARITY_MARKER), rest])
            rng.shuffle(toks)
        seq = tuple(int(t) for t in toks)
        if label_of(spec, seq) == target:
            return Example(seq, target)
    raise ConfigError(f"could not realize label {target} under spec {spec.name!r}")


def generate(spec: TaskSpec) -> dict[str, tuple[Example, ...]]:
    """Deterministic {train, dev} splits, exactly class-balanced, disjoint.

    Train and dev draw from independent seed streams; dev additionally
    rejects any sequence that already appears in train.
    """
    spec.validate()
    splits: dict[str, tuple[Example, ...]] = {}
    train_seqs: set[tuple[int, ...]] = set()
    for split, size in (("train", spec.train_size), ("dev", spec.dev_size)):
        rng = np.random.default_rng(stable_seed(spec.seed, spec.name, split))
        out = []
        for i in range(size):
            target = i % spec.num_classes
            ex = _draw_example(spec, rng, target)
            while split == "dev" and ex.tokens in train_seqs:
                ex = _draw_example(spec, rng, target)
            out.append(ex)
        splits[split] = tuple(out)
        if split == "train":
            train_seqs = {ex.tokens for ex in out}
    return splits


# --- serialization ------------------------------------------------------------


def save_jsonl(path: str, dataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset:
            fh.write(json.dumps({"tokens": list(ex.tokens), "label": ex.label}) + "\n")


def load_jsonl(path: str, vocab_size: int | None = None,
               num_classes: int | None = None) -> tuple[Example, ...]:
    """Read one example per line; errors carry the offending line number."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"line {lineno}: not valid JSON ({err.msg})") from err
            if not isinstance(rec, dict) or "tokens" not in rec or "label" not in rec:
                raise DataError(f"line {lineno}: record needs 'tokens' and 'label'")
            toks = rec["tokens"]
            label = rec["label"]
            if (not isinstance(toks, list) or not toks
                    or not all(isinstance(t, int) for t in toks)):
                raise DataError(f"line {lineno}: 'tokens' must be a non-empty list of ints")
            if not isinstance(label, int):
                raise DataError(f"line {lineno}: 'label' must be an int")
            if any(t < 0 for t in toks):
                raise DataError(f"line {lineno}: negative token id")
            if vocab_size is not None and any(t >= vocab_size for t in toks):
                bad = next(t for t in toks if t >= vocab_size)
                raise DataError(f"line {lineno}: token id {bad} >= vocab_size {vocab_size}")
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DataError(f"line {lineno}: label {label} out of range")
            out.append(Example(tuple(toks), label))
    return tuple(out)


# --- sampling and metrics -----------------------------------------------------


def fewshot_subsample(dataset, shots: int, seed: int):
    """Seeded uniform sample without replacement; order is deterministic."""
    n = len(dataset)
    if shots < 1 or shots > n:
        raise DataError(f"shots must be in [1, {n}], got {shots}")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(n)[:shots]
    return tuple(dataset[int(i)] for i in idx)


def accuracy(predictions, labels) -> float:
    preds = list(predictions)
    labs = list(labels)
    if len(preds) != len(labs):
        raise DataError(f"{len(preds)} predictions vs {len(labs)} labels")
    if not labs:
        raise DataError("accuracy of an empty set is undefined")
    return sum(1 for p, l in zip(preds, labs) if p == l) / len(labs)


def majority_baseline(dataset) -> float:
    """Accuracy of always predicting the most common label."""
    counts: dict[int, int] = {}
    for ex in dataset:
        counts[ex.label] = counts.get(ex.label, 0) + 1
    return max(counts.values()) / len(dataset)


def pretrain_corpus(dataset) -> list[tuple[int, ...]]:
    """Unlabeled corpus for masked-token pretraining: the task sequences,
    sorted. Sorting keeps the symbol statistics but makes a masked position
    predictable from its neighbors, which uniform random order is not."""
    return [tuple(sorted(ex.tokens)) for ex in dataset]
