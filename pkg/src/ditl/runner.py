"""Experiment orchestration: config, the row matrix, reports and explainability exports.

A run trains every selected row on every (fold, model seed) pair. Folds are
built once from the dataset labels and shared by all rows; within a
(fold, seed) unit the upstream models (the curriculum CT model, the
ablation CT models, the clinical model) are trained once and reused by every
row that needs them.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import __version__
from . import tensorcore as tc
from .evaluation import (METRICS, FoldSplit, MetricSet, aggregate, evaluate, report_csv,
                         report_table, stratified_folds)
from .models import ModelConfig, load_checkpoint, save_checkpoint
from .phantom import SCHEMA, DatasetSpec, feature_groups, generate, load_dataset, preprocess, \
    save_dataset
from .training import (TrainConfig, TrainedModel, TrainingError, make_fold_data, predict, run_ablation,
                       run_clinical, run_doctor_in_the_loop_ct, run_multimodal)
from .xai import clinical_value_fn, exact_shapley, gradcam

OUTPUT_ENV = "DITL_OUTPUT_ROOT"
VARIANTS = ("ditl", "xai-guide", "segmentation")
ROWS = ("unimodal-ct", "unimodal-clinical") + tuple(
    f"{v}-{f}" for v in VARIANTS for f in ("early", "intermediate", "late"))
DEFAULT_LAMBDA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 21))


class RunnerError(Exception):
    category = "internal"
    exit_code = 1


class ConfigError(RunnerError):
    category = "config"
    exit_code = 2


class DataError(RunnerError):
    category = "data"
    exit_code = 3


class OutputError(RunnerError):
    category = "io"
    exit_code = 5


def default_output_root():
    return os.environ.get(OUTPUT_ENV, os.path.join(os.getcwd(), "ditl-out"))


# ---------------------------------------------------------------------------
# experiment spec and config


@dataclass
class ExperimentSpec:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    dataset_path: str | None = None
    rows: tuple = ROWS
    seeds: tuple = (0, 1, 2)
    folds: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    output: str | None = None
    workers: int = 1
    checkpoints: bool = True

    def __post_init__(self):
        self.rows = tuple(self.rows)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.rows:
            raise ConfigError("select at least one experiment row")
        bad = [r for r in self.rows if r not in ROWS]
        if bad:
            raise ConfigError(f"unknown row(s) {bad}; valid rows: {list(ROWS)}")
        if len(set(self.rows)) != len(self.rows):
            raise ConfigError("experiment rows must be unique")
        if not self.seeds:
            raise ConfigError("need at least one model seed")
        if self.folds < 3:
            raise ConfigError("need at least 3 folds")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.output is None:
            self.output = default_output_root()

    def to_dict(self):
        return {
            "dataset": self.dataset.to_dict(),
            "dataset_path": self.dataset_path,
            "rows": list(self.rows),
            "seeds": list(self.seeds),
            "folds": self.folds,
            "train": self.train.to_dict(),
            "model": self.model.to_dict(),
            "workers": self.workers,
            "checkpoints": self.checkpoints,
        }

    def config_hash(self):
        """Hash of everything that determines the numbers (not output or worker count)."""
        d = self.to_dict()
        d.pop("workers")
        d.pop("checkpoints")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# The reference benchmark: default dataset, 5 folds, 3 model seeds, a narrower
# encoder and a shortened schedule so the whole matrix fits a single CPU core.
REFERENCE_TRAIN = {"warmup": 10, "max_epochs": 20, "patience": 10}
REFERENCE_MODEL = {"channels": (2, 8, 16)}


def reference_spec(rows=ROWS, output=None, workers=1, checkpoints=False):
    return ExperimentSpec(DatasetSpec(), None, tuple(rows), (0, 1, 2), 5,
                          TrainConfig(**REFERENCE_TRAIN), ModelConfig(**REFERENCE_MODEL),
                          output, workers, checkpoints)


SECTIONS = {"dataset": DatasetSpec, "train": TrainConfig, "model": ModelConfig}
TOP_LEVEL = ("dataset_path", "rows", "seeds", "folds", "output", "workers", "checkpoints")


def _coerce(value, current):
    """Parse a string override using the type of the current value."""
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    if isinstance(current, (list, tuple)) or (current is None and "," in value):
        parts = [p for p in value.split(",") if p.strip()]
        parsed = yaml.safe_load("[" + ",".join(parts) + "]")
        return tuple(parsed)
    try:
        return yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {value!r}: {exc}") from exc


def spec_from_dict(d):
    """Build an ExperimentSpec from a nested mapping (as read from YAML)."""
    d = dict(d or {})
    unknown = set(d) - set(SECTIONS) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
    kwargs = {}
    for name, cls in SECTIONS.items():
        sub = dict(d.get(name) or {})
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(sub) - names
        if bad:
            raise ConfigError(f"unknown {name} key(s) {sorted(bad)}")
        try:
            kwargs[name] = cls.from_dict(sub) if sub else cls()
        except (TypeError, ValueError, TrainingError) as exc:
            raise ConfigError(f"invalid {name} section: {exc}") from exc
    for key in TOP_LEVEL:
        if key in d and d[key] is not None:
            kwargs[key] = d[key]
    try:
        return ExperimentSpec(**kwargs)
    except RunnerError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return data


def apply_overrides(d, overrides):
    """Merge ``{"train.max_epochs": "20", "rows": "a,b"}`` style overrides into ``d``."""
    d = json.loads(json.dumps(d or {}))
    defaults = {"dataset": DatasetSpec().to_dict(), "train": TrainConfig().to_dict(),
                "model": ModelConfig().to_dict()}
    top_defaults = {"rows": list(ROWS), "seeds": [0], "folds": 5, "workers": 1,
                    "checkpoints": True, "output": "", "dataset_path": ""}
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS or name not in defaults[section]:
                raise ConfigError(f"unknown config key {key!r}")
            current = (d.get(section) or {}).get(name, defaults[section][name])
            d.setdefault(section, {})
            d[section][name] = _coerce(value, current)
        else:
            if key not in TOP_LEVEL:
                raise ConfigError(f"unknown config key {key!r}")
            d[key] = _coerce(value, d.get(key, top_defaults[key]))
    for key in ("rows", "seeds"):
        if key in d and isinstance(d[key], (str, int)):
            d[key] = _coerce(str(d[key]), [])
    return d


# ---------------------------------------------------------------------------
# dataset


def check_schema(samples):
    want = {f.name for f in SCHEMA}
    for s in samples:
        if set(s.clinical) != want:
            raise DataError(f"sample {s.sid}: clinical fields {sorted(s.clinical)} "
                            f"do not match the schema {sorted(want)}")


def load_samples(spec):
    if spec.dataset_path:
        try:
            dspec, samples, _ = load_dataset(spec.dataset_path)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot load dataset from {spec.dataset_path}: {exc}") from exc
        check_schema(samples)
        return dspec, samples
    return spec.dataset, generate(spec.dataset)


def build_folds(labels, k, seed):
    return stratified_folds(labels, k, seed)


# ---------------------------------------------------------------------------
# one (fold, seed) unit


def upstream_needs(rows):
    """Which upstream models the selected rows depend on."""
    need = set()
    for r in rows:
        if r == "unimodal-ct":
            need.add("ditl")
        elif r == "unimodal-clinical":
            need.add("clinical")
        else:
            variant = r.rsplit("-", 1)[0]
            need.update({variant, "clinical"})
    return need


def train_unit(spec, prepared, split, fold, seed, ckpt_dir=None, timings=None):
    """Train every selected row on one fold with one model seed.

    Wall-clock seconds per upstream model and per row go into ``timings``
    when a dict is given; they are kept out of the returned entries so that
    reports stay reproducible.
    """
    cfg = dataclasses.replace(spec.train, seed=seed)
    data = make_fold_data(prepared, split, fold)
    mc = spec.model
    need = upstream_needs(spec.rows)
    timings = {} if timings is None else timings
    up = {}

    def timed(key, fn, *args):
        t = time.perf_counter()
        out = fn(*args)
        timings[key] = time.perf_counter() - t
        return out

    if "clinical" in need:
        up["clinical"] = timed("clinical", run_clinical, data, cfg, mc)
    if "ditl" in need:
        up["ditl"] = timed("ditl", run_doctor_in_the_loop_ct, data, cfg, mc)
    for v in ("xai-guide", "segmentation"):
        if v in need:
            up[v] = timed(v, run_ablation, data, cfg, v, mc)
    results = []
    for row in spec.rows:
        if row == "unimodal-ct":
            trained = up["ditl"]
        elif row == "unimodal-clinical":
            trained = up["clinical"]
        else:
            variant, fusion = row.rsplit("-", 1)
            trained = timed(row, run_multimodal, data, cfg, fusion, up[variant], up["clinical"],
                            variant != "segmentation")
        probs = predict(trained, data.test)
        metrics = evaluate(probs, data.test.labels)
        phases = [p.log_line() for p in trained.phases]
        if row.endswith(("-intermediate", "-early")):
            variant = row.rsplit("-", 1)[0]
            phases = [p.log_line() for p in up[variant].phases] + phases
        entry = {"row": row, "fold": fold, "seed": seed,
                 "metrics": {m: float(metrics[m]) for m in METRICS},
                 "phases": phases}
        if row == "unimodal-ct":
            entry["val_xai_m2"] = {k: float(v) for k, v in trained.diagnostics["val_xai_m2"].items()}
        results.append(entry)
        if ckpt_dir is not None:
            save_checkpoint(trained.model, os.path.join(ckpt_dir, row, f"fold{fold}_seed{seed}"))
    return results


def _unit_job(args):
    spec_dict, fold, seed, split_dict, ckpt_dir = args
    spec = spec_from_dict(spec_dict)
    _, samples = load_samples(spec)
    prepared = preprocess(samples)
    timings = {}
    res = train_unit(spec, prepared, FoldSplit.from_dict(split_dict), fold, seed, ckpt_dir, timings)
    return res, timings


# ---------------------------------------------------------------------------
# report


@dataclass
class ExperimentReport:
    rows: dict  # row -> {"overall": MetricSet, "seeds": {seed: MetricSet}}
    details: list
    provenance: dict
    timings: list = field(default_factory=list)  # per unit; not part of the body

    def body(self):
        """Deterministic report content (no timestamps)."""
        return {
            "rows": {r: {"overall": v["overall"].summary(), "overall_per_fold": v["overall"].per_fold,
                         "seeds": {str(s): ms.summary() for s, ms in v["seeds"].items()}}
                     for r, v in self.rows.items()},
            "details": self.details,
            "provenance": self.provenance,
        }

    def body_json(self):
        return json.dumps(self.body(), indent=2, sort_keys=True) + "\n"

    def table(self):
        return report_table({r: v["overall"] for r, v in self.rows.items()})

    def csv(self):
        return report_csv({r: v["overall"] for r, v in self.rows.items()})

    def seed_metric(self, row, seed, metric="MCC"):
        return self.rows[row]["seeds"][seed].mean(metric)


def assemble(details, spec, provenance):
    rows = {}
    for row in spec.rows:
        entries = [d for d in details if d["row"] == row]
        seeds = {}
        for s in spec.seeds:
            per = sorted((d for d in entries if d["seed"] == s), key=lambda d: d["fold"])
            seeds[s] = aggregate([d["metrics"] for d in per])
        # fold-level values averaged over seeds; SE is across folds
        folds = sorted({d["fold"] for d in entries})
        overall = aggregate([{m: float(np.mean([d["metrics"][m] for d in entries if d["fold"] == f]))
                              for m in METRICS} for f in folds])
        rows[row] = {"overall": overall, "seeds": seeds}
    return ExperimentReport(rows, details, provenance)


def report_from_json(body):
    rows = {}
    # keys were sorted on write; restore the configured row order
    order = [r for r in body["provenance"]["config"]["rows"] if r in body["rows"]]
    for r in order:
        v = body["rows"][r]
        rows[r] = {"overall": MetricSet({m: list(v["overall_per_fold"][m]) for m in METRICS}),
                   "seeds": {}}
        for s in v["seeds"]:
            per = sorted((d for d in body["details"] if d["row"] == r and str(d["seed"]) == s),
                         key=lambda d: d["fold"])
            rows[r]["seeds"][int(s)] = aggregate([d["metrics"] for d in per])
    return ExperimentReport(rows, body["details"], body["provenance"])


def _writable(directory):
    try:
        os.makedirs(directory, exist_ok=True)
        probe = os.path.join(directory, ".write-test")
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        raise OutputError(f"output directory {directory} is not writable: {exc}") from exc


def write_report(report, directory):
    with open(os.path.join(directory, "report.json"), "w") as fh:
        fh.write(report.body_json())
    with open(os.path.join(directory, "report.csv"), "w") as fh:
        fh.write(report.csv())
    with open(os.path.join(directory, "report.txt"), "w") as fh:
        fh.write(report.table())


def run(spec, write=True):
    """Execute the experiment matrix; returns the ExperimentReport."""
    started = time.time()
    if write:
        _writable(spec.output)
    dspec, samples = load_samples(spec)
    prepared = preprocess(samples)
    folds = build_folds(prepared.labels, spec.folds, dspec.seed)
    ckpt = os.path.join(spec.output, "checkpoints") if (write and spec.checkpoints) else None
    units = [(f, s) for s in spec.seeds for f in range(spec.folds)]
    details, timings = [], []
    if spec.workers > 1:
        d = spec.to_dict()
        jobs = [(d, f, s, folds[f].to_dict(), ckpt) for f, s in units]
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            for (f, s), (res, t) in zip(units, pool.map(_unit_job, jobs)):
                details.extend(res)
                timings.append({"fold": f, "seed": s, "seconds": t})
    else:
        for f, s in units:
            t = {}
            details.extend(train_unit(spec, prepared, folds[f], f, s, ckpt, t))
            timings.append({"fold": f, "seed": s, "seconds": t})
    details.sort(key=lambda d: (spec.rows.index(d["row"]), d["seed"], d["fold"]))
    provenance = {
        "config": spec.to_dict(),
        "config_hash": spec.config_hash(),
        "dataset": dspec.to_dict(),
        "folds": [fs.to_dict() for fs in folds],
        "code_version": __version__,
        "kernel_backend": tc.BACKEND,
    }
    provenance["config"].pop("workers")
    report = assemble(details, spec, provenance)
    report.timings = timings
    if write:
        write_report(report, spec.output)
        with open(os.path.join(spec.output, "phase_log.txt"), "w") as fh:
            for d in details:
                for line in d["phases"]:
                    fh.write(f"row={d['row']} fold={d['fold']} seed={d['seed']} {line}\n")
        with open(os.path.join(spec.output, "run_meta.json"), "w") as fh:
            json.dump({"finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
                       "seconds": round(time.time() - started, 1),
                       "workers": spec.workers, "units": timings}, fh, indent=2)
    return report


def sweep_lambda(spec, grid=DEFAULT_LAMBDA_GRID, row="ditl-intermediate", write=True):
    """Re-run one intermediate-fusion row for each lambda; returns [(lambda, MetricSet)]."""
    if not row.endswith("-intermediate"):
        raise ConfigError("the lambda sweep re-runs an intermediate-fusion row")
    grid = [float(g) for g in grid]
    if not grid or any(g < 0 for g in grid):
        raise ConfigError("lambda grid must be non-empty and nonnegative")
    table = []
    base = spec.output
    for lam in grid:
        sub = dataclasses.replace(spec, rows=(row,), train=dataclasses.replace(spec.train, lam=lam),
                                  output=os.path.join(base, f"lambda_{lam:g}"))
        rep = run(sub, write=write)
        table.append((lam, rep.rows[row]["overall"]))
    if write:
        _writable(base)
        with open(os.path.join(base, "sweep.csv"), "w") as fh:
            fh.write(sweep_csv(table))
    return table


def sweep_csv(table):
    lines = ["lambda," + ",".join(f"{m}_mean,{m}_se" for m in METRICS)]
    for lam, ms in table:
        lines.append(f"{lam:g}," + ",".join(f"{ms.mean(m):.4f},{ms.se(m):.4f}" for m in METRICS))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# explainability exports


def _to_uint8(a):
    return np.clip(np.round(np.asarray(a) * 255.0), 0, 255).astype(np.uint8)


def _slice_index(m2):
    """Index along the last axis through the lesion centre (middle slice if empty)."""
    if m2.any():
        return int(round(np.argwhere(m2)[:, 2].mean()))
    return m2.shape[2] // 2


def write_png(path, rgb):
    from PIL import Image
    Image.fromarray(rgb).save(path)


def overlay_rgb(image, m1, m2):
    """Grey CT slice with the lung outline tinted blue and the lesion red."""
    g = _to_uint8(image)
    rgb = np.stack([g, g, g], axis=-1).astype(np.float64)
    lung = (m1 > 0) & ~(m2 > 0)
    rgb[lung] = 0.7 * rgb[lung] + 0.3 * np.array([0, 80, 255])
    rgb[m2 > 0] = 0.4 * rgb[m2 > 0] + 0.6 * np.array([255, 0, 0])
    return np.clip(rgb, 0, 255).astype(np.uint8)


def heat_rgb(heat):
    """Black -> red -> yellow -> white ramp for a map in [0, 1]."""
    h = np.clip(np.asarray(heat), 0.0, 1.0)
    r = np.clip(3 * h, 0, 1)
    g = np.clip(3 * h - 1, 0, 1)
    b = np.clip(3 * h - 2, 0, 1)
    return _to_uint8(np.stack([r, g, b], axis=-1))


def export_explainability(trained, data, sample_positions, out_dir, background=None):
    """Write heatmaps (for models with a convolutional branch) and Shapley tables.

    ``data`` is an unmasked Split; models trained on lesion-only input get the
    masked images. ``sample_positions`` index into ``data``. Returns the
    written paths.
    """
    _writable(out_dir)
    model = trained.model
    model.eval()
    split = data.lesion_only() if trained.lesion_input else data
    bg = split.clinical if background is None else background
    written = []
    names = [f.name for f in SCHEMA]
    groups = feature_groups()
    heat_capable = model.kind not in ("unimodal-clinical", "late")
    for pos in sample_positions:
        sid = int(split.index[pos])
        stem = os.path.join(out_dir, f"sample{sid:04d}")
        img = split.images[pos]
        clin = split.clinical[pos]
        if heat_capable:
            heat = gradcam(model, img[None], clin[None]).data[0]
            k = _slice_index(split.m2[pos])
            tc.save(stem + "_heatmap.tensor", heat)
            write_png(stem + "_ct.png", overlay_rgb(img[0][:, :, k], split.m1[pos][:, :, k], split.m2[pos][:, :, k]))
            write_png(stem + "_heatmap.png", heat_rgb(heat[:, :, k]))
            written += [stem + "_heatmap.tensor", stem + "_ct.png", stem + "_heatmap.png"]
        if model.has_clinical:
            fn = clinical_value_fn(model, img if model.has_imaging else None)
            rep = exact_shapley(fn, clin, bg, names=names, groups=groups)
            path = stem + "_shapley.csv"
            with open(path, "w") as fh:
                fh.write(shapley_table(rep))
            written.append(path)
    return written


def shapley_table(rep):
    lines = ["rank,feature,shapley_value"]
    for r, (name, v) in enumerate(rep.rows(), 1):
        lines.append(f"{r},{name},{v:.12e}")
    total = float(rep.values.sum())
    lines.append(f"# baseline={rep.baseline:.12e} prediction={rep.prediction:.12e}")
    lines.append(f"# efficiency: sum={total:.12e} prediction-baseline={rep.prediction - rep.baseline:.12e} "
                 f"gap={rep.efficiency_gap:.3e}")
    return "\n".join(lines) + "\n"


def explain(run_dir, row, fold=0, seed=0, samples=(0,), out_dir=None):
    """Re-load a run's checkpoint for (row, fold, seed) and export its explanations."""
    try:
        with open(os.path.join(run_dir, "report.json")) as fh:
            body = json.load(fh)
    except OSError as exc:
        raise DataError(f"no report in {run_dir}: {exc}") from exc
    cfg = dict(body["provenance"]["config"])
    spec = spec_from_dict(cfg)
    if row not in spec.rows:
        raise ConfigError(f"row {row!r} was not part of the run {list(spec.rows)}")
    ckpt = os.path.join(run_dir, "checkpoints", row, f"fold{fold}_seed{seed}")
    if not os.path.isdir(ckpt):
        raise DataError(f"missing checkpoint {ckpt}")
    model = load_checkpoint(ckpt)
    _, raw = load_samples(spec)
    prepared = preprocess(raw)
    split = FoldSplit.from_dict(body["provenance"]["folds"][fold])
    data = make_fold_data(prepared, split, fold)
    trained = TrainedModel(model, lesion_input=row.startswith("segmentation"))
    out_dir = out_dir or os.path.join(run_dir, "explain", f"{row}_fold{fold}_seed{seed}")
    n = len(data.test)
    bad = [s for s in samples if not 0 <= s < n]
    if bad:
        raise ConfigError(f"sample positions {bad} outside the test split (size {n})")
    return export_explainability(trained, data.test, list(samples), out_dir, background=data.train.clinical)


def generate_dataset(spec, directory):
    _writable(directory)
    samples = generate(spec.dataset)
    folds = build_folds([s.label for s in samples], spec.folds, spec.dataset.seed)
    save_dataset(samples, spec.dataset, directory, [f.to_dict() for f in folds])
    return directory


__all__ = ["ROWS", "ExperimentSpec", "reference_spec", "ExperimentReport", "run", "sweep_lambda", "explain",
           "export_explainability", "generate_dataset", "spec_from_dict", "load_config",
           "apply_overrides"]
