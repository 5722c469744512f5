"""Tasks, tokenisation, TSV loading, synthetic task generators and batching.

Synthetic generators
--------------------
Each generator builds sentences from filler words plus *keywords*; the label
is a function of the keywords alone, so the following decision rules label
their own output with 100% accuracy (see :func:`synthetic_rule`):

``separable_pair``
    ``text_a`` holds exactly one keyword from ``PAIR_KEYWORDS``. For label 1
    ("paraphrase") ``text_b`` repeats that keyword; for label 0 it holds no
    keyword. Rule: label 1 iff the two texts share a keyword.
``three_class_nli``
    ``text_a`` holds one keyword ``k`` from ``NLI_KEYWORDS`` (the words come
    in antonym pairs). ``text_b`` holds one keyword: ``k`` itself gives
    entailment (0), an unrelated keyword gives neutral (1), the antonym of
    ``k`` gives contradiction (2).
``similarity_regression``
    ``text_a`` holds four distinct keywords from ``SIM_KEYWORDS``; ``text_b``
    holds four distinct keywords of which ``m`` are shared with ``text_a``.
    Label = 5 * m / 4 (an STS-B style score in [0, 5]).
"""

from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import TokenBatch

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
DEFAULT_MAX_LEN = 128

METRICS = ("accuracy", "acc_f1_avg", "matthews", "pearson_spearman")
_ARITY = {"binary": 2, "three_class": 3, "regression": 1}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str          # single_sentence | sentence_pair
    output: str        # binary | three_class | regression
    metric: str

    def __post_init__(self):
        if self.kind not in ("single_sentence", "sentence_pair"):
            raise DataError(f"unknown task kind {self.kind!r}")
        if self.output not in _ARITY:
            raise DataError(f"unknown output type {self.output!r}")
        if self.metric not in METRICS:
            raise DataError(f"unknown metric {self.metric!r}")
        if (self.output == "regression") != (self.metric == "pearson_spearman"):
            raise DataError("regression tasks and only regression tasks use pearson_spearman")

    @property
    def num_outputs(self) -> int:
        return _ARITY[self.output]

    @property
    def task_kind(self) -> str:
        return "regression" if self.output == "regression" else "classification"

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "output": self.output, "metric": self.metric}


TASKS: dict[str, TaskSpec] = {
    "cola": TaskSpec("cola", "single_sentence", "binary", "matthews"),
    "sst2": TaskSpec("sst2", "single_sentence", "binary", "accuracy"),
    "mrpc": TaskSpec("mrpc", "sentence_pair", "binary", "acc_f1_avg"),
    "qqp": TaskSpec("qqp", "sentence_pair", "binary", "acc_f1_avg"),
    "qnli": TaskSpec("qnli", "sentence_pair", "binary", "accuracy"),
    "rte": TaskSpec("rte", "sentence_pair", "binary", "accuracy"),
    "mnli": TaskSpec("mnli", "sentence_pair", "three_class", "accuracy"),
    "stsb": TaskSpec("stsb", "sentence_pair", "regression", "pearson_spearman"),
    "separable_pair": TaskSpec("separable_pair", "sentence_pair", "binary", "accuracy"),
    "three_class_nli": TaskSpec("three_class_nli", "sentence_pair", "three_class", "accuracy"),
    "similarity_regression": TaskSpec("similarity_regression", "sentence_pair",
                                      "regression", "pearson_spearman"),
}
SYNTHETIC_KINDS = ("separable_pair", "three_class_nli", "similarity_regression")


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name.lower()]
    except KeyError:
        raise DataError(f"unknown task {name!r}; known: {', '.join(TASKS)}") from None


@dataclass(frozen=True)
class Example:
    id: str
    text_a: str
    text_b: str | None
    label: float | int


@dataclass
class Dataset:
    examples: list[Example]
    split: str = "train"
    task: TaskSpec | None = None

    def __post_init__(self):
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise DataError("example ids must be unique within a split")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples])


# ---------------------------------------------------------------------------
# tokenisation
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str | None) -> list[str]:
    return _TOKEN_RE.findall(text.lower()) if text else []


@dataclass
class Vocab:
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for i, tok in enumerate(SPECIALS):
            if self.token_to_id.setdefault(tok, i) != i:
                raise DataError(f"special token {tok} must have id {i}")
        if sorted(self.token_to_id.values()) != list(range(len(self.token_to_id))):
            raise DataError("vocab ids must be dense")

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def to_dict(self) -> dict:
        return {"tokens": [t for t, _ in sorted(self.token_to_id.items(), key=lambda kv: kv[1])]}

    @classmethod
    def from_dict(cls, d: dict) -> Vocab:
        return cls({t: i for i, t in enumerate(d["tokens"])})


def build_vocab(corpus: Dataset, min_freq: int = 1) -> Vocab:
    """Frequency-descending, then lexicographic, ids after the four specials."""
    if min_freq < 1:
        raise DataError("min_freq must be >= 1")
    if not len(corpus):
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for ex in corpus:
        counts.update(tokenize(ex.text_a))
        counts.update(tokenize(ex.text_b))
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    mapping = {tok: i for i, tok in enumerate(SPECIALS)}
    for tok in kept:
        mapping[tok] = len(mapping)
    return Vocab(mapping)


def encode(vocab: Vocab, example: Example, max_len: int = DEFAULT_MAX_LEN) -> tuple[list[int], list[int]]:
    """``[CLS] a ([SEP] b)`` padded to ``max_len``; pairs truncate longest-first."""
    if max_len < 3:
        raise DataError("max_len must be >= 3")
    a = [vocab.lookup(t) for t in tokenize(example.text_a)]
    if example.text_b is None:
        ids = [CLS] + a[: max_len - 1]
    else:
        b = [vocab.lookup(t) for t in tokenize(example.text_b)]
        budget = max_len - 2
        while len(a) + len(b) > budget:
            if len(a) >= len(b):
                a.pop()
            else:
                b.pop()
        ids = [CLS] + a + [SEP] + b
    mask = [1] * len(ids) + [0] * (max_len - len(ids))
    return ids + [PAD] * (max_len - len(ids)), mask


def encode_batch(vocab: Vocab, examples: list[Example], max_len: int = DEFAULT_MAX_LEN,
                 trim: bool = True) -> TokenBatch:
    """Stack encoded rows; ``trim`` drops trailing all-padding columns."""
    rows = [encode(vocab, ex, max_len) for ex in examples]
    ids = np.array([r[0] for r in rows], dtype=np.int64).reshape(len(rows), max_len)
    mask = np.array([r[1] for r in rows], dtype=np.int8).reshape(len(rows), max_len)
    if trim and len(rows):
        width = max(int(mask.sum(axis=1).max()), 1)
        ids, mask = ids[:, :width], mask[:, :width]
    labels = np.array([ex.label for ex in examples])
    return TokenBatch(ids, mask, labels, [ex.id for ex in examples])


def batch_iter(ds: Dataset, batch_size: int, shuffle_seed: int | None = None, *,
               vocab: Vocab | None = None, max_len: int = DEFAULT_MAX_LEN,
               trim: bool = True) -> Iterator:
    """One epoch of batches; yields TokenBatch when ``vocab`` is given, else lists of examples."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = np.arange(len(ds))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        chunk = [ds.examples[i] for i in order[start:start + batch_size]]
        yield chunk if vocab is None else encode_batch(vocab, chunk, max_len, trim)


# ---------------------------------------------------------------------------
# TSV loading
# ---------------------------------------------------------------------------

def _parse_label(raw: str, spec: TaskSpec, line: int, path) -> float | int:
    try:
        if spec.output == "regression":
            value = float(raw)
            if not np.isfinite(value):
                raise ValueError
            return value
        value = int(raw)
    except ValueError:
        raise DataError(f"{path}:{line}: unparsable label {raw!r}") from None
    if not 0 <= value < spec.num_outputs:
        raise DataError(f"{path}:{line}: label {value} outside [0, {spec.num_outputs})")
    return value


def load_tsv(path, spec: TaskSpec, split: str = "dev") -> Dataset:
    """GLUE-shaped TSV with a header naming ``sentence1`` [``sentence2``] ``label``.

    An ``id`` or ``idx`` column is used for example ids when present,
    otherwise the 1-based line number.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        cols = {name.strip(): i for i, name in enumerate(header)}
        need = ["sentence1", "label"] + (["sentence2"] if spec.kind == "sentence_pair" else [])
        missing = [c for c in need if c not in cols]
        if missing:
            raise DataError(f"{path}:1: missing column(s) {', '.join(missing)}")
        id_col = cols.get("id", cols.get("idx"))
        examples = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            ex_id = row[id_col] if id_col is not None else str(line)
            text_b = row[cols["sentence2"]] if spec.kind == "sentence_pair" else None
            label = _parse_label(row[cols["label"]].strip(), spec, line, path)
            examples.append(Example(ex_id, row[cols["sentence1"]], text_b, label))
    return Dataset(examples, split, spec)


def write_tsv(ds: Dataset, path) -> None:
    pair = any(e.text_b is not None for e in ds)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", quoting=csv.QUOTE_NONE, escapechar="\\", lineterminator="\n")
        w.writerow(["id", "sentence1"] + (["sentence2"] if pair else []) + ["label"])
        for e in ds:
            w.writerow([e.id, e.text_a] + ([e.text_b or ""] if pair else []) + [e.label])


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

FILLER = tuple(
    "the a this that some one my your our their big small red blue old new "
    "man woman dog cat car house city tree river book song game day night "
    "saw has likes finds took made sees wants".split()
)
PAIR_KEYWORDS = ("apple", "bridge", "castle", "dragon", "engine", "forest", "guitar", "harbor")
NLI_KEYWORDS = (("hot", "cold"), ("up", "down"), ("open", "closed"), ("early", "late"),
                ("happy", "sad"), ("full", "empty"))
SIM_KEYWORDS = ("amber", "basil", "cedar", "delta", "ember", "fjord", "gamma", "hazel",
                "indigo", "jasper", "koala", "lotus")


def _sentence(rng: np.random.Generator, keywords: list[str], n_filler: tuple[int, int] = (3, 7)) -> str:
    words = [FILLER[i] for i in rng.integers(0, len(FILLER), rng.integers(*n_filler))]
    for kw in keywords:
        words.insert(int(rng.integers(0, len(words) + 1)), kw)
    return " ".join(words)


def _balanced_labels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def gen_synthetic(kind: str, n: int, seed: int, split: str = "train") -> Dataset:
    """Deterministic desk-scale task; see the module docstring for the rules."""
    if n < 10:
        raise DataError("synthetic datasets need n >= 10")
    if kind not in SYNTHETIC_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; known: {', '.join(SYNTHETIC_KINDS)}")
    rng = np.random.default_rng([seed, SYNTHETIC_KINDS.index(kind)])
    examples = []
    if kind == "separable_pair":
        for i, label in enumerate(_balanced_labels(rng, n, 2)):
            kw = PAIR_KEYWORDS[int(rng.integers(len(PAIR_KEYWORDS)))]
            examples.append(Example(f"{split}-{i}", _sentence(rng, [kw]),
                                    _sentence(rng, [kw] if label else []), int(label)))
    elif kind == "three_class_nli":
        n_pairs = len(NLI_KEYWORDS)
        flat = [w for pair in NLI_KEYWORDS for w in pair]
        for i, label in enumerate(_balanced_labels(rng, n, 3)):
            p, side = int(rng.integers(n_pairs)), int(rng.integers(2))
            premise = NLI_KEYWORDS[p][side]
            if label == 0:
                hyp = premise
            elif label == 2:
                hyp = NLI_KEYWORDS[p][1 - side]
            else:
                others = [w for w in flat if w not in NLI_KEYWORDS[p]]
                hyp = others[int(rng.integers(len(others)))]
            examples.append(Example(f"{split}-{i}", _sentence(rng, [premise]),
                                    _sentence(rng, [hyp]), int(label)))
    else:
        for i, m in enumerate(_balanced_labels(rng, n, 5)):
            picks = rng.permutation(len(SIM_KEYWORDS))
            a_kw = [SIM_KEYWORDS[j] for j in picks[:4]]
            b_kw = a_kw[:m] + [SIM_KEYWORDS[j] for j in picks[4:8 - m]]
            b_kw = [b_kw[j] for j in rng.permutation(4)]
            examples.append(Example(f"{split}-{i}", _sentence(rng, a_kw, (2, 5)),
                                    _sentence(rng, b_kw, (2, 5)), 5.0 * int(m) / 4.0))
    return Dataset(examples, split, TASKS[kind])


def synthetic_rule(kind: str, example: Example) -> float | int:
    """The documented decision rule for ``kind``, applied to surface tokens."""
    a, b = set(tokenize(example.text_a)), set(tokenize(example.text_b))
    if kind == "separable_pair":
        return int(bool(a & b & set(PAIR_KEYWORDS)))
    if kind == "three_class_nli":
        flat = {w for pair in NLI_KEYWORDS for w in pair}
        (ka,), (kb,) = a & flat, b & flat
        if ka == kb:
            return 0
        antonym = next(p[1 - p.index(ka)] for p in NLI_KEYWORDS if ka in p)
        return 2 if kb == antonym else 1
    if kind == "similarity_regression":
        kw = set(SIM_KEYWORDS)
        return 5.0 * len((a & kw) & (b & kw)) / 4.0
    raise DataError(f"unknown synthetic kind {kind!r}")
