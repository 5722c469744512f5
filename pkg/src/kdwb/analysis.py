"""Metrics and the report tables built from scores, speeds and prediction logs."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

BASELINE = "baseline"
OK, BAD, UNCERTAIN = "OK", "BAD", "UNCERTAIN"
GLYPHS = {OK: "✓", BAD: "✗", UNCERTAIN: "?"}
FACTORS = ("Layer", "AttHead", "HiddenDim", "Speed")
DEFAULT_FACTOR_GROUPS = {
    "Layer": ("9L", "6L", "3L"),
    "AttHead": ("8AH", "4AH"),
    "HiddenDim": ("516D", "384D", "6L_384D"),
}


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _confusion(preds, labels) -> tuple[int, int, int, int]:
    p, y = np.asarray(preds).astype(int), np.asarray(labels).astype(int)
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, tn, fp, fn


def accuracy(preds, labels) -> float:
    return float(np.mean(np.asarray(preds) == np.asarray(labels)))


def f1_binary(preds, labels) -> float:
    tp, _, fp, fn = _confusion(preds, labels)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def matthews(preds, labels) -> float:
    tp, tn, fp, fn = _confusion(preds, labels)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return (tp * tn - fp * fn) / math.sqrt(denom) if denom else 0.0


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        warnings.warn("correlation of a constant vector is undefined; using 0", RuntimeWarning)
        return 0.0
    return float(xc @ yc) / denom


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


# Hand-computed (kind, preds, labels, value) cases; the tests check compute_metric against them.
METRIC_EXAMPLES = (
    ("matthews", [1, 1, 0, 0], [1, 0, 1, 0], 0.0),
    ("matthews", [1, 0, 1, 0], [1, 0, 1, 0], 1.0),
    # acc 3/4; tp=2 fp=1 fn=0 so f1 = 4/5
    ("acc_f1_avg", [1, 0, 1, 1], [1, 0, 0, 1], 0.775),
    # acc 1/2; no positive predictions so f1 = 0
    ("acc_f1_avg", [0, 0, 0, 0], [1, 0, 1, 0], 0.25),
    ("pearson_spearman", [1.0, 2.0, 3.0], [2.0, 4.0, 6.0], 1.0),
    # centred (-1,0,1) and (-1,1,0): both coefficients are 1/2
    ("pearson_spearman", [1.0, 2.0, 3.0], [1.0, 3.0, 2.0], 0.5),
    # tied labels: pearson 2/sqrt(5); average ranks (1.5,1.5,3.5,3.5) give the same
    ("pearson_spearman", [1.0, 2.0, 3.0, 4.0], [1.0, 1.0, 2.0, 2.0], 2 / math.sqrt(5)),
)


def compute_metric(kind: str, preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise AnalysisError(f"{len(preds)} predictions vs {len(labels)} labels")
    if preds.ndim != 1 or preds.size < 2:
        raise AnalysisError("metrics need at least two aligned scalar predictions")
    if kind == "accuracy":
        return accuracy(preds, labels)
    if kind == "acc_f1_avg":
        return (accuracy(preds, labels) + f1_binary(preds, labels)) / 2.0
    if kind == "matthews":
        return matthews(preds, labels)
    if kind == "pearson_spearman":
        return (pearson(preds, labels) + spearman(preds, labels)) / 2.0
    raise AnalysisError(f"unknown metric {kind!r}")


# ---------------------------------------------------------------------------
# prediction logs
# ---------------------------------------------------------------------------

@dataclass
class PredictionLog:
    """Per-example predictions in dataset order."""

    records: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def preds(self) -> dict:
        return {r["id"]: r["pred"] for r in self.records}

    def labels(self) -> dict:
        return {r["id"]: r["label"] for r in self.records}

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> PredictionLog:
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def _pred_map(log) -> dict:
    if isinstance(log, PredictionLog):
        return log.preds()
    return dict(log)


def disagreement_rate(log_t, log_s, regression: bool = False, tau: float = 0.5) -> float:
    """Fraction of ids whose hard predictions differ (|delta| > tau for regression)."""
    pt, ps = _pred_map(log_t), _pred_map(log_s)
    if set(pt) != set(ps):
        raise AnalysisError("prediction logs cover different ids")
    if not pt:
        raise AnalysisError("empty prediction logs")
    if regression:
        differ = sum(abs(float(pt[k]) - float(ps[k])) > tau for k in pt)
    else:
        differ = sum(pt[k] != ps[k] for k in pt)
    return differ / len(pt)


def categorize_instances(labels, teacher_log, student_logs: Sequence) -> dict:
    """Assign each id to one of four categories.

    ``i``: teacher and every student match the label; ``ii``: teacher and a
    nonempty proper subset of students match; ``iii``: only the teacher
    matches; ``iv``: the teacher misses (students ignored).
    """
    if not student_logs:
        raise AnalysisError("at least one student log is required")
    gold = labels.labels() if isinstance(labels, PredictionLog) else dict(labels)
    teacher = _pred_map(teacher_log)
    students = [_pred_map(s) for s in student_logs]
    ids = set(gold)
    if set(teacher) != ids or any(set(s) != ids for s in students):
        raise AnalysisError("label and prediction ids are not aligned")
    out = {}
    for k in gold:
        if teacher[k] != gold[k]:
            out[k] = "iv"
            continue
        hits = sum(s[k] == gold[k] for s in students)
        out[k] = "i" if hits == len(students) else ("iii" if hits == 0 else "ii")
    return out


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

@dataclass
class ScoreTable:
    """Model x task grid; ``None`` marks an explicitly missing cell."""

    models: list[str]
    tasks: list[str]
    cells: dict[tuple[str, str], float | None]

    def get(self, model: str, task: str) -> float | None:
        return self.cells.get((model, task))

    def students(self) -> list[str]:
        return [m for m in self.models if m != BASELINE]

    def to_csv(self, path, comments: Iterable[str] = ()) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model"] + self.tasks)
            for m in self.models:
                w.writerow([m] + [_fmt(self.get(m, t)) for t in self.tasks])

    @classmethod
    def from_csv(cls, path) -> ScoreTable:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
        if not rows:
            raise AnalysisError(f"{path}: empty table")
        tasks = rows[0][1:]
        models, cells = [], {}
        for r in rows[1:]:
            models.append(r[0])
            for t, v in zip(tasks, r[1:]):
                cells[(r[0], t)] = float(v) if v.strip() else None
        return cls(models, tasks, cells)

    @classmethod
    def from_rows(cls, rows: Mapping[str, Mapping[str, float]]) -> ScoreTable:
        models = list(rows)
        tasks = list(dict.fromkeys(t for r in rows.values() for t in r))
        cells = {(m, t): rows[m].get(t) for m in models for t in tasks}
        return cls(models, tasks, cells)


SpeedTable = ScoreTable


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if not isinstance(v, (int, np.integer)) else str(v)


def percent_drop(baseline: float, student: float) -> int:
    """round(100 * (baseline - student) / baseline), halves rounded away from zero.

    Inputs go through their shortest decimal repr so table values such as
    0.62 are treated as exact decimals.
    """
    b, s = Decimal(repr(float(baseline))), Decimal(repr(float(student)))
    return int((Decimal(100) * (b - s) / b).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass
class DisagreementMatrix:
    students: list[str]
    tasks: list[str]
    cells: dict[tuple[str, str], int | None]
    clamped: set[tuple[str, str]] = field(default_factory=set)

    def get(self, student: str, task: str) -> int | None:
        return self.cells.get((student, task))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model"] + self.tasks)
            for s in self.students:
                w.writerow([s] + [self._cell(s, t) for t in self.tasks])
            if self.clamped:
                fh.write("# * student scored above baseline; degradation clamped to 0\n")

    def _cell(self, s, t) -> str:
        v = self.get(s, t)
        return "" if v is None else f"{v}{'*' if (s, t) in self.clamped else ''}"

    def plot_data(self) -> dict:
        return {
            "rows": self.students,
            "cols": self.tasks,
            "values": [[self.get(s, t) for t in self.tasks] for s in self.students],
            "clamped": sorted([list(c) for c in self.clamped]),
        }

    def write_plot_data(self, path) -> None:
        Path(path).write_text(json.dumps(self.plot_data(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def degradation_heatmap(scores: ScoreTable) -> DisagreementMatrix:
    """Relative score drop of each student versus the baseline row, in whole percent."""
    if BASELINE not in scores.models:
        raise AnalysisError("score table has no baseline row")
    cells, clamped = {}, set()
    for t in scores.tasks:
        base = scores.get(BASELINE, t)
        for s in scores.students():
            v = scores.get(s, t)
            if base is None or v is None:
                cells[(s, t)] = None
                continue
            if base <= 0:
                raise AnalysisError(f"baseline score for {t} is {base}; relative drop undefined")
            drop = percent_drop(base, v)
            if drop < 0:
                drop = 0
                clamped.add((s, t))
            cells[(s, t)] = drop
    return DisagreementMatrix(scores.students(), list(scores.tasks), cells, clamped)


@dataclass
class RecipeGrid:
    tasks: list[str]
    marks: dict[tuple[str, str], str]
    factors: list[str] = field(default_factory=lambda: list(FACTORS))

    def to_markdown(self) -> str:
        lines = ["| | " + " | ".join(self.tasks) + " |",
                 "|---|" + "---|" * len(self.tasks)]
        for f in self.factors:
            row = [GLYPHS[self.marks[(f, t)]] if (f, t) in self.marks else "" for t in self.tasks]
            lines.append(f"| {f} | " + " | ".join(row) + " |")
        return "\n".join(lines) + "\n"


def classify_degradations(drops: Sequence[float], t_ok: float = 0.10, t_bad: float = 0.20) -> str:
    if not drops:
        raise AnalysisError("empty factor group")
    mean = float(np.mean(drops))
    if mean <= t_ok and max(drops) - min(drops) <= t_ok:
        return OK
    if mean >= t_bad:
        return BAD
    return UNCERTAIN


def recipe_table(scores: ScoreTable, speed: ScoreTable | None = None,
                 factor_groups: Mapping[str, Sequence[str]] | None = None,
                 t_ok: float = 0.10, t_bad: float = 0.20) -> RecipeGrid:
    """Per (factor, task) mark from relative degradations and throughput ratios."""
    if not t_ok < t_bad:
        raise AnalysisError("t_ok must be below t_bad")
    groups = dict(DEFAULT_FACTOR_GROUPS if factor_groups is None else factor_groups)
    marks = {}
    for factor, members in groups.items():
        present = [m for m in members if m in scores.models]
        if not present:
            raise AnalysisError(f"factor group {factor} has no students in the score table")
        for t in scores.tasks:
            base = scores.get(BASELINE, t)
            vals = [scores.get(m, t) for m in present]
            if base is None or base <= 0 or any(v is None for v in vals):
                continue
            marks[(factor, t)] = classify_degradations([(base - v) / base for v in vals], t_ok, t_bad)
    factors = list(groups)
    if speed is not None:
        members = [m for ms in groups.values() for m in ms if m in speed.models]
        if not members:
            raise AnalysisError("speed table shares no students with the factor groups")
        for t in scores.tasks:
            base = speed.get(BASELINE, t)
            vals = [speed.get(m, t) for m in members]
            if base is None or any(v is None for v in vals):
                continue
            if all(v > base for v in vals):
                marks[("Speed", t)] = OK
            elif all(v < base for v in vals):
                marks[("Speed", t)] = BAD
            else:
                marks[("Speed", t)] = UNCERTAIN
        factors.append("Speed")
    return RecipeGrid(list(scores.tasks), marks, factors)

