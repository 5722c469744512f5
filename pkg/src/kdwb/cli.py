"""``kdwb`` command line: train, distill, evaluate, benchmark, analyze, run-grid.

Defaults follow the distillation setup this workbench reproduces:
temperature 2, loss weights 0.33/0.33/0.33, batch size 12, Adam at lr 5e-5,
10 epochs. The output directory is ``--out`` unless ``KDWB_OUT`` is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import shutil
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

from . import __version__
from .analysis import (BASELINE, DEFAULT_FACTOR_GROUPS, AnalysisError, PredictionLog, ScoreTable,
                       categorize_instances, degradation_heatmap, recipe_table)
from .benchmark import BenchConfig, measure_throughput, write_speed_table
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SYNTHETIC_KINDS, DataError, Vocab, build_vocab, gen_synthetic, get_task,
                   load_tsv)
from .distill import LAYER_MAP_PRESETS, DistillConfig, resolve_layer_map
from .model import ConfigError, ModelConfig, student_grid
from .training import RunConfig, distill, evaluate, finetune, train_teacher

log = logging.getLogger("kdwb")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad invocation or missing input; exits with status 2."""


# ---------------------------------------------------------------------------
# small I/O helpers
# ---------------------------------------------------------------------------

def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_structured(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        import yaml
        return yaml.safe_load(text)
    return json.loads(text)


def out_dir(args) -> Path:
    out = Path(os.environ.get("KDWB_OUT") or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def save_vocab(vocab: Vocab, path: Path) -> None:
    write_json(path, vocab.to_dict())


def load_vocab(path: Path) -> Vocab:
    return Vocab.from_dict(json.loads(require_file(path, "vocabulary").read_text(encoding="utf-8")))


def vocab_beside(model_path: Path, explicit: str | None) -> Vocab:
    return load_vocab(Path(explicit) if explicit else model_path.with_name("vocab.json"))


def parse_weights(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("weights are hard,intermediate,kd")
    return tuple(parts)


def parse_map(text: str):
    if text in LAYER_MAP_PRESETS:
        return text
    try:
        return tuple(tuple(int(v) for v in pair.split(":")) for pair in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"layer map must be one of {', '.join(LAYER_MAP_PRESETS)} or pairs like 1:1,2:5,3:12"
        ) from None


# ---------------------------------------------------------------------------
# shared argument groups
# ---------------------------------------------------------------------------

def add_data_args(p: argparse.ArgumentParser, train: bool = True) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--task", required=True, help="task name (GLUE-shaped or synthetic)")
    if train:
        g.add_argument("--train", help="training TSV (synthetic tasks generate one when omitted)")
        g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--dev", help="dev TSV (synthetic tasks generate one when omitted)")
    g.add_argument("--n-dev", type=int, default=400)
    g.add_argument("--data-seed", type=int, default=0)


def add_run_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("optimisation")
    g.add_argument("--epochs", type=int, default=10)
    g.add_argument("--batch-size", type=int, default=12)
    g.add_argument("--lr", type=float, default=5e-5)
    g.add_argument("--beta1", type=float, default=0.9)
    g.add_argument("--beta2", type=float, default=0.999)
    g.add_argument("--clip-norm", type=float, default=1.0, help="0 disables clipping")
    g.add_argument("--max-len", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)


def add_geometry_args(p: argparse.ArgumentParser, defaults: bool) -> None:
    g = p.add_argument_group("geometry")
    g.add_argument("--layers", type=int, default=4 if defaults else None)
    g.add_argument("--heads", type=int, default=4 if defaults else None)
    g.add_argument("--hidden", type=int, default=64 if defaults else None)
    g.add_argument("--ffn", type=int, default=None)
    g.add_argument("--dropout", type=float, default=0.0 if defaults else None)


def load_task_data(args, train: bool = True):
    spec = get_task(args.task)
    synthetic = spec.name in SYNTHETIC_KINDS

    def obtain(path, n, seed, split):
        if path:
            return load_tsv(require_file(path, f"{split} data"), spec, split)
        if not synthetic:
            raise UsageError(f"task {spec.name} needs --{split} (only synthetic tasks are generated)")
        return gen_synthetic(spec.name, n, seed, split)

    train_ds = obtain(args.train, args.n_train, args.data_seed, "train") if train else None
    dev_ds = obtain(args.dev, args.n_dev, args.data_seed + 1000, "dev")
    return spec, train_ds, dev_ds


def run_config(args, distill_cfg: DistillConfig | None = None, layer_map="auto",
               init_from_teacher: bool = False) -> RunConfig:
    return RunConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, lr=args.lr,
                     beta1=args.beta1, beta2=args.beta2, clip_norm=args.clip_norm or None,
                     max_len=args.max_len, distill=distill_cfg or DistillConfig(),
                     layer_map=layer_map, init_from_teacher=init_from_teacher)


def data_snapshot(args, train: bool = True) -> dict:
    keys = ["task", "dev", "n_dev", "data_seed"] + (["train", "n_train"] if train else [])
    return {k: getattr(args, k) for k in keys}


def finish_model_run(out: Path, model, trainlog, vocab, spec, dev, run: RunConfig,
                     resolved: dict, model_id: str) -> None:
    save_checkpoint(model, out / "model.kdwb")
    save_vocab(vocab, out / "vocab.json")
    trainlog.to_csv(out / "train_log.csv")
    report, preds = evaluate(model, dev, spec, vocab=vocab, model_id=model_id, max_len=run.max_len)
    preds.write(out / "predictions.jsonl")
    write_json(out / "metrics.json", {**report.to_dict(), "best_epoch": trainlog.best_epoch})
    write_json(out / "resolved_config.json", resolved)
    print(f"{model_id}: {spec.metric} = {report.value:.4f} on {len(dev)} dev examples -> {out}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_teacher(args) -> int:
    spec, train, dev = load_task_data(args)
    out = out_dir(args)
    vocab = build_vocab(train)
    cfg = ModelConfig(args.layers, args.heads, args.hidden, args.ffn, vocab_size=len(vocab),
                      max_positions=args.max_len, num_outputs=spec.num_outputs,
                      task_kind=spec.task_kind, dropout=args.dropout)
    run = run_config(args)
    model, trainlog = train_teacher(cfg, train, run, vocab=vocab, dev=dev, spec=spec)
    resolved = {"command": "train-teacher", "model": cfg.to_dict(), "run": run.to_dict(),
                "data": data_snapshot(args), "task": spec.to_dict()}
    finish_model_run(out, model, trainlog, vocab, spec, dev, run, resolved, args.model_id or "teacher")
    return EXIT_OK


def resolve_student(teacher_cfg: ModelConfig, name: str | None, layers=None, heads=None,
                    hidden=None, ffn=None, dropout=None) -> ModelConfig:
    grid = student_grid(teacher_cfg)
    if name and name in grid:
        base = grid[name]
    elif name in (None, BASELINE, "teacher"):
        base = teacher_cfg
    elif layers is None and heads is None and hidden is None:
        raise UsageError(f"unknown student variant {name!r}; known: {', '.join(grid)}")
    else:
        base = teacher_cfg
    changes = {k: v for k, v in (("num_layers", layers), ("num_heads", heads),
                                 ("hidden_dim", hidden), ("ffn_dim", ffn),
                                 ("dropout", dropout)) if v is not None}
    return base.derive(**changes)


def cmd_distill(args) -> int:
    teacher_path = require_file(args.teacher, "teacher checkpoint")
    spec, train, dev = load_task_data(args)
    teacher = load_checkpoint(teacher_path)
    vocab = vocab_beside(teacher_path, args.vocab)
    student_cfg = resolve_student(teacher.config, args.student, args.layers, args.heads,
                                  args.hidden, args.ffn, args.dropout)
    dcfg = DistillConfig(args.temperature, *args.weights, scale_kd_by_T2=args.scale_kd_t2)
    resolve_layer_map(args.map, student_cfg.num_layers, teacher.config.num_layers)
    run = run_config(args, dcfg, args.map, args.init_from_teacher)
    out = out_dir(args)
    result = distill(teacher, student_cfg, train, run, vocab=vocab, dev=dev, spec=spec)
    resolved = {"command": "distill", "teacher": str(teacher_path), "student": student_cfg.to_dict(),
                "layer_map": [list(p) for p in result.layer_map], "run": run.to_dict(),
                "data": data_snapshot(args), "task": spec.to_dict()}
    finish_model_run(out, result.student, result.log, vocab, spec, dev, run, resolved,
                     args.model_id or args.student or "student")
    return EXIT_OK


def cmd_finetune(args) -> int:
    model_path = require_file(args.model, "model checkpoint")
    spec, train, dev = load_task_data(args)
    model = load_checkpoint(model_path)
    vocab = vocab_beside(model_path, args.vocab)
    run = run_config(args)
    out = out_dir(args)
    tuned, trainlog = finetune(model, train, run, vocab=vocab, dev=dev, spec=spec)
    resolved = {"command": "finetune", "model": str(model_path), "run": run.to_dict(),
                "data": data_snapshot(args), "task": spec.to_dict()}
    finish_model_run(out, tuned, trainlog, vocab, spec, dev, run, resolved, args.model_id or "finetuned")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model_path = require_file(args.model, "model checkpoint")
    spec, _, dev = load_task_data(args, train=False)
    model = load_checkpoint(model_path)
    vocab = vocab_beside(model_path, args.vocab)
    out = out_dir(args)
    report, preds = evaluate(model, dev, spec, vocab=vocab, model_id=args.model_id,
                             max_len=args.max_len)
    preds.write(out / "predictions.jsonl")
    write_json(out / "metrics.json", report.to_dict())
    write_json(out / "resolved_config.json", {"command": "evaluate", "model": str(model_path),
                                              "model_id": args.model_id, "max_len": args.max_len,
                                              "data": data_snapshot(args, train=False)})
    print(f"{args.model_id}: {report.metric} = {report.value:.4f} ({report.n} examples)")
    return EXIT_OK


def _pairs(items: list[str], what: str) -> list[tuple[str, str]]:
    out = []
    for item in items:
        if "=" not in item:
            raise UsageError(f"{what} must look like NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        out.append((name, path))
    return out


def cmd_benchmark(args) -> int:
    models = [(mid, require_file(p, "model checkpoint")) for mid, p in _pairs(args.model, "--model")]
    cfg = BenchConfig(args.batch_size, args.seq_len, args.warmup, args.measured, args.repetitions)
    data = dict(_pairs(args.data or [], "--data"))
    out = out_dir(args)
    loaded = [(mid, load_checkpoint(p), p) for mid, p in models]
    cells, tasks = {}, list(args.task)
    for task in tasks:
        spec = get_task(task)
        if task in data:
            ds = load_tsv(require_file(data[task], "benchmark data"), spec, "dev")
        elif spec.name in SYNTHETIC_KINDS:
            ds = gen_synthetic(spec.name, max(10, cfg.batch_size), args.data_seed, "bench")
        else:
            raise UsageError(f"task {task} needs --data {task}=PATH")
        for mid, model, path in loaded:
            vpath = path.with_name("vocab.json")
            vocab = load_vocab(vpath) if vpath.is_file() else None
            cells[(mid, task)] = measure_throughput(model, ds, cfg, vocab)
            print(f"{mid} on {task}: {cells[(mid, task)]:.1f} samples/s")
    write_speed_table(ScoreTable([m for m, _, _ in loaded], tasks, cells), cfg, out / "speed.csv")
    return EXIT_OK


def run_analysis(scores: ScoreTable, out: Path, speed: ScoreTable | None = None,
                 t_ok: float = 0.10, t_bad: float = 0.20,
                 categories: dict[str, dict] | None = None) -> list[str]:
    """Write heatmap, plot data, recipe and category files; returns the written names."""
    if BASELINE not in scores.models:
        raise UsageError("score table needs a 'baseline' row")
    if not scores.students():
        raise UsageError("score table has no student rows")
    written = []
    heat = degradation_heatmap(scores)
    heat.to_csv(out / "heatmap.csv")
    heat.write_plot_data(out / "heatmap_plot.json")
    written += ["heatmap.csv", "heatmap_plot.json"]
    groups = {f: [m for m in ms if m in scores.models] for f, ms in DEFAULT_FACTOR_GROUPS.items()}
    groups = {f: ms for f, ms in groups.items() if ms}
    if groups:
        grid = recipe_table(scores, speed, groups, t_ok, t_bad)
        (out / "recipe.md").write_text(grid.to_markdown(), encoding="utf-8")
        written.append("recipe.md")
    for task, cats in (categories or {}).items():
        path = out / f"categories_{task}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("id,category\n")
            for k, c in cats.items():
                fh.write(f"{k},{c}\n")
        written.append(path.name)
    return written


def cmd_analyze(args) -> int:
    scores = ScoreTable.from_csv(require_file(args.scores, "score table"))
    speed = ScoreTable.from_csv(require_file(args.speed, "speed table")) if args.speed else None
    categories = {}
    if args.teacher_log:
        if not args.student_log:
            raise UsageError("--teacher-log needs at least one --student-log NAME=PATH")
        tlog = PredictionLog.read(require_file(args.teacher_log, "teacher prediction log"))
        slogs = [PredictionLog.read(require_file(p, f"prediction log for {n}"))
                 for n, p in _pairs(args.student_log, "--student-log")]
        task = tlog.records[0]["task"] if tlog.records else "task"
        categories[task] = categorize_instances(tlog, tlog, slogs)
    out = out_dir(args)
    for name in run_analysis(scores, out, speed, args.t_ok, args.t_bad, categories):
        print(out / name)
    return EXIT_OK


# ---------------------------------------------------------------------------
# grid runner
# ---------------------------------------------------------------------------

def _manifest_tasks(manifest: dict, base: Path) -> list[dict]:
    tasks = []
    for t in manifest.get("tasks") or []:
        entry = {"name": t} if isinstance(t, str) else dict(t)
        get_task(entry["name"])
        for key in ("train", "dev"):
            if entry.get(key):
                entry[key] = str(require_file(base / entry[key], f"{entry['name']} {key} data"))
        tasks.append(entry)
    if not tasks:
        raise UsageError("manifest lists no tasks")
    return tasks


def validate_manifest(manifest: dict, base: Path) -> dict:
    """Check everything that can be checked before any compute starts."""
    students = manifest.get("students") or []
    if not students:
        raise UsageError("manifest lists no students")
    names = [s["name"] for s in students]
    if len(set(names)) != len(names) or BASELINE in names:
        raise UsageError("student names must be unique and must not be 'baseline'")
    for n in names:
        if not re.fullmatch(r"[A-Za-z0-9][A-Za-z0-9.-]*(_[A-Za-z0-9.-]+)*", str(n)):
            raise UsageError(f"student name {n!r} must be alphanumeric with single underscores")
    for s in students:
        m = s.get("map", "auto")
        if isinstance(m, str) and m not in LAYER_MAP_PRESETS:
            raise UsageError(f"student {s['name']}: unknown layer-map preset {m!r}")
    teacher = dict(manifest.get("teacher") or {})
    for task, path in (teacher.get("checkpoints") or {}).items():
        teacher["checkpoints"][task] = str(require_file(base / path, f"teacher checkpoint for {task}"))
    resolved = {
        "teacher": teacher,
        "students": students,
        "tasks": _manifest_tasks(manifest, base),
        "run": RunConfig.from_dict(manifest.get("run") or {}).to_dict(),
        "bench": BenchConfig(**(manifest.get("bench") or {})).to_dict(),
        "data": {"n_train": 2000, "n_dev": 400, "seed": 0, **(manifest.get("data") or {})},
    }
    DistillConfig(**resolved["run"]["distill"])
    return resolved


def _task_data(entry: dict, data: dict):
    spec = get_task(entry["name"])

    def obtain(key, n, seed):
        if entry.get(key):
            return load_tsv(entry[key], spec, key)
        if spec.name not in SYNTHETIC_KINDS:
            raise UsageError(f"task {spec.name} needs explicit {key} data in the manifest")
        return gen_synthetic(spec.name, n, seed, key)

    return spec, obtain("train", data["n_train"], data["seed"]), obtain("dev", data["n_dev"], data["seed"] + 1000)


def _teacher_cell(resolved: dict, entry: dict, out: Path) -> None:
    spec, train, dev = _task_data(entry, resolved["data"])
    cell = out / "teachers" / spec.name
    cell.mkdir(parents=True, exist_ok=True)
    run = RunConfig.from_dict(resolved["run"])
    ckpts = resolved["teacher"].get("checkpoints") or {}
    if spec.name in ckpts:
        src = Path(ckpts[spec.name])
        model = load_checkpoint(src)
        vocab = load_vocab(src.with_name("vocab.json"))
        shutil.copyfile(src, cell / "model.kdwb")
        save_vocab(vocab, cell / "vocab.json")
    else:
        geo = resolved["teacher"]
        vocab = build_vocab(train)
        cfg = ModelConfig(geo.get("layers", 4), geo.get("heads", 4), geo.get("hidden", 64),
                          geo.get("ffn"), vocab_size=len(vocab), max_positions=run.max_len,
                          num_outputs=spec.num_outputs, task_kind=spec.task_kind)
        model, trainlog = train_teacher(cfg, train, run, vocab=vocab, dev=dev, spec=spec)
        save_checkpoint(model, cell / "model.kdwb")
        save_vocab(vocab, cell / "vocab.json")
        trainlog.to_csv(cell / "train_log.csv")
    report, preds = evaluate(model, dev, spec, vocab=vocab, model_id=BASELINE, max_len=run.max_len)
    preds.write(cell / "predictions.jsonl")
    write_json(cell / "metrics.json", report.to_dict())


def _student_cell(resolved: dict, student: dict, entry: dict, out: Path) -> None:
    spec, train, dev = _task_data(entry, resolved["data"])
    tcell = out / "teachers" / spec.name
    teacher = load_checkpoint(tcell / "model.kdwb")
    vocab = load_vocab(tcell / "vocab.json")
    scfg = resolve_student(teacher.config, student["name"], student.get("layers"),
                           student.get("heads"), student.get("hidden"), student.get("ffn"))
    run = RunConfig.from_dict({**resolved["run"], "layer_map": student.get("map", "auto"),
                               "init_from_teacher": student.get("init_from_teacher", False)})
    result = distill(teacher, scfg, train, run, vocab=vocab, dev=dev, spec=spec)
    cell = out / "students" / student["name"] / spec.name
    cell.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.student, cell / "model.kdwb")
    save_vocab(vocab, cell / "vocab.json")
    result.log.to_csv(cell / "train_log.csv")
    report, preds = evaluate(result.student, dev, spec, vocab=vocab, model_id=student["name"],
                             max_len=run.max_len)
    preds.write(cell / "predictions.jsonl")
    write_json(cell / "metrics.json", {**report.to_dict(), "layer_map": [list(p) for p in result.layer_map]})


class ProgressLedger:
    """One JSON status file per grid cell under ``progress/``."""

    def __init__(self, out: Path):
        self.dir = out / "progress"
        self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, cell: str) -> Path:
        return self.dir / f"{cell}.json"

    def done(self, cell: str) -> bool:
        p = self._path(cell)
        return p.is_file() and json.loads(p.read_text(encoding="utf-8")).get("status") == "done"

    def get(self, cell: str) -> dict | None:
        p = self._path(cell)
        return json.loads(p.read_text(encoding="utf-8")) if p.is_file() else None

    def mark(self, cell: str, status: str, **extra) -> None:
        write_json(self._path(cell), {"cell": cell, "status": status, **extra})

    def clear(self, cell: str) -> None:
        self._path(cell).unlink(missing_ok=True)


def bench_cell(cell: str) -> str:
    """Benchmark ledger entry that depends on a teacher or student cell."""
    parts = cell.split("__")
    mid, task = (BASELINE, parts[1]) if parts[0] == "teacher" else (parts[1], parts[2])
    return f"bench__{mid}__{task}"


def _run_cell(kind: str, resolved: dict, out: str, *payload) -> tuple[str, str | None]:
    try:
        if kind == "teacher":
            _teacher_cell(resolved, payload[0], Path(out))
        else:
            _student_cell(resolved, payload[0], payload[1], Path(out))
        return "done", None
    except Exception as exc:  # noqa: BLE001 - cell failures are isolated and reported
        log.debug("cell failed", exc_info=True)
        return "failed", f"{type(exc).__name__}: {exc}"


def _execute(cells: list[tuple[str, tuple]], resolved: dict, out: Path, ledger: ProgressLedger,
             jobs: int) -> list[str]:
    failures = []

    def record(name, status, error):
        ledger.mark(name, status, **({"error": error} if error else {}))
        ledger.clear(bench_cell(name))
        if error:
            failures.append(f"{name}: {error}")
            print(f"FAILED {name}: {error}", file=sys.stderr)
        else:
            print(f"done {name}")

    todo = [(name, args) for name, args in cells if not ledger.done(name)]
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_run_cell, args[0], resolved, str(out), *args[1:]): name
                       for name, args in todo}
            for fut in as_completed(futures):
                record(futures[fut], *fut.result())
    else:
        for name, args in todo:
            record(name, *_run_cell(args[0], resolved, str(out), *args[1:]))
    return sorted(failures)


def cmd_run_grid(args) -> int:
    manifest_path = require_file(args.manifest, "manifest")
    manifest = read_structured(manifest_path)
    resolved = validate_manifest(manifest, manifest_path.parent)
    if not os.environ.get("KDWB_OUT") and args.out == "runs" and manifest.get("out"):
        args.out = str(manifest_path.parent / manifest["out"])
    out = out_dir(args)
    write_json(out / "resolved_config.json", {"command": "run-grid", **resolved})
    ledger = ProgressLedger(out)
    tasks = [e["name"] for e in resolved["tasks"]]
    students = [s["name"] for s in resolved["students"]]

    failures = _execute([(f"teacher__{e['name']}", ("teacher", e)) for e in resolved["tasks"]],
                        resolved, out, ledger, args.jobs)
    cells = [(f"student__{s['name']}__{e['name']}", ("student", s, e))
             for s in resolved["students"] for e in resolved["tasks"]
             if ledger.done(f"teacher__{e['name']}")]
    failures += _execute(cells, resolved, out, ledger, args.jobs)

    # Throughput cells run one at a time in this process.
    bench = BenchConfig(**resolved["bench"])
    speed = {}
    for e in resolved["tasks"]:
        task = e["name"]
        for mid in [BASELINE] + students:
            cell = f"bench__{mid}__{task}"
            mdir = out / ("teachers" if mid == BASELINE else f"students/{mid}") / task
            if not ledger.done(f"teacher__{task}" if mid == BASELINE else f"student__{mid}__{task}"):
                continue
            if not ledger.done(cell):
                try:
                    spec, _, dev = _task_data(e, resolved["data"])
                    value = measure_throughput(load_checkpoint(mdir / "model.kdwb"), dev, bench,
                                               load_vocab(mdir / "vocab.json"))
                    ledger.mark(cell, "done", samples_per_sec=value)
                except Exception as exc:  # noqa: BLE001
                    ledger.mark(cell, "failed", error=str(exc))
                    failures.append(f"{cell}: {exc}")
                    continue
            speed[(mid, task)] = ledger.get(cell)["samples_per_sec"]

    scores, logs = {}, {}
    for task in tasks:
        for mid in [BASELINE] + students:
            mdir = out / ("teachers" if mid == BASELINE else f"students/{mid}") / task
            if (mdir / "metrics.json").is_file():
                scores[(mid, task)] = json.loads((mdir / "metrics.json").read_text())["value"]
                logs[(mid, task)] = PredictionLog.read(mdir / "predictions.jsonl")
    models = [BASELINE] + students
    score_table = ScoreTable(models, tasks, {(m, t): scores.get((m, t)) for m in models for t in tasks})
    score_table.to_csv(out / "scores.csv")
    speed_table = ScoreTable(models, tasks, {(m, t): speed.get((m, t)) for m in models for t in tasks})
    write_speed_table(speed_table, bench, out / "speed.csv")

    # Relative degradation needs a positive baseline; other tasks are left out of the analysis.
    warnings, usable = [], []
    for task in tasks:
        base = score_table.get(BASELINE, task)
        if base is None or base <= 0:
            warnings.append(f"analysis skips {task}: baseline score {base}")
        else:
            usable.append(task)
    categories = {}
    for task in usable:
        if get_task(task).task_kind == "regression":
            continue
        slogs = [logs[(s, task)] for s in students if (s, task) in logs]
        if (BASELINE, task) in logs and slogs:
            tlog = logs[(BASELINE, task)]
            categories[task] = categorize_instances(tlog, tlog, slogs)
    if usable:
        sub = lambda t: ScoreTable(models, usable, {(m, k): t.get(m, k) for m in models for k in usable})
        try:
            run_analysis(sub(score_table), out, sub(speed_table), args.t_ok, args.t_bad, categories)
        except (AnalysisError, UsageError) as exc:
            failures.append(f"analysis: {exc}")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    write_json(out / "summary.json", {"failures": failures, "warnings": warnings, "cells": sorted(
        p.stem for p in ledger.dir.glob("*.json") if ledger.done(p.stem))})
    if failures:
        print(f"{len(failures)} cell(s) failed:", file=sys.stderr)
        for f in failures:
            print(f"  {f}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdwb", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"kdwb {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", default="runs", help="output directory (KDWB_OUT overrides)")
        p.set_defaults(func=func)
        return p

    p = command("train-teacher", cmd_train_teacher, "train a teacher on one task")
    add_data_args(p)
    add_run_args(p)
    add_geometry_args(p, defaults=True)
    p.add_argument("--model-id", default=None)

    p = command("distill", cmd_distill, "distill a teacher checkpoint into a student")
    p.add_argument("--teacher", required=True)
    p.add_argument("--vocab", help="vocab.json (default: next to the teacher)")
    p.add_argument("--student", help="named variant, e.g. 3L, 6L, 8AH, 384D, 6L_384D")
    add_data_args(p)
    add_run_args(p)
    add_geometry_args(p, defaults=False)
    p.add_argument("--map", type=parse_map, default="auto",
                   help="layer map preset or explicit pairs (1:1,2:5,3:12)")
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--weights", type=parse_weights, default=(0.33, 0.33, 0.33),
                   help="hard,intermediate,kd loss weights")
    p.add_argument("--scale-kd-t2", action="store_true", help="multiply the KD term by T^2")
    p.add_argument("--init-from-teacher", action="store_true")
    p.add_argument("--model-id", default=None)

    p = command("finetune", cmd_finetune, "continue task training from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab")
    add_data_args(p)
    add_run_args(p)
    p.add_argument("--model-id", default=None)

    p = command("evaluate", cmd_evaluate, "score a checkpoint and write its prediction log")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab")
    p.add_argument("--model-id", default="model")
    p.add_argument("--max-len", type=int, default=128)
    add_data_args(p, train=False)

    p = command("benchmark", cmd_benchmark, "measure samples/sec for models on tasks")
    p.add_argument("--model", action="append", required=True, metavar="ID=PATH")
    p.add_argument("--task", action="append", required=True)
    p.add_argument("--data", action="append", metavar="TASK=PATH")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=12)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--measured", type=int, default=10)
    p.add_argument("--repetitions", type=int, default=3)

    for name, func, text in (("analyze", cmd_analyze, "build heatmap, recipe and category reports"),
                             ("run-grid", cmd_run_grid, "run a full student x task grid")):
        p = command(name, func, text)
        if name == "analyze":
            p.add_argument("--scores", required=True)
            p.add_argument("--speed")
            p.add_argument("--teacher-log")
            p.add_argument("--student-log", action="append", metavar="NAME=PATH")
        else:
            p.add_argument("--manifest", required=True)
            p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--t-ok", type=float, default=0.10)
        p.add_argument("--t-bad", type=float, default=0.20)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kdwb {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, AnalysisError, ValueError, OSError) as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"kdwb {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
