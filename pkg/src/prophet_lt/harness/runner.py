"""Experiment orchestration and on-disk run layout.

A run directory looks like::

    <out>/config.yaml
    <out>/seed_<s>/data/{train,test}/...       saved splits
    <out>/seed_<s>/<stage>/history.jsonl       one MetricsRecord per epoch
    <out>/seed_<s>/<stage>/final.json          test-set MetricsRecord
    <out>/seed_<s>/<stage>/model.npz           final checkpoint
    <out>/seed_<s>/error.json                  only if a stage failed
    <out>/summary.json, <out>/summary.txt

Summaries are always rebuilt from these files, never from in-memory results.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..errors import ValidationError
from ..longtail_data import (
    SynthMixtureSpec,
    load_split,
    make_synthetic_mixture,
    per_class_counts,
    save_split,
    subsample_longtail,
)
from ..model_core import build_model, normalize_insertion_points, save_checkpoint
from ..training import METHODS, MetricsRecord, evaluate, run_student, train_baseline, train_teacher
from .config import ExperimentConfig, config_from_dict

log = logging.getLogger(__name__)

OUT_ENV = "PROPHET_LT_OUT"

METHOD_LABELS = {
    "from_scratch": "Distilling from Scratch",
    "decouple": "Classical Decouple",
    "high_conf_kernels": "Distillation with High-confidence Kernels",
}


@dataclass
class RunSummary:
    name: str
    config_digest: str
    row_label: str
    column_label: str
    method: str
    seeds: list
    baseline: dict = field(default_factory=dict)  # seed -> final MetricsRecord dict
    ours: dict = field(default_factory=dict)
    baseline_mean: float | None = None
    baseline_std: float | None = None
    ours_mean: float | None = None
    ours_std: float | None = None
    delta: float | None = None
    per_seed_delta: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "RunSummary":
        return cls(**d)


def resolve_out_dir(config: ExperimentConfig, out_dir=None) -> Path:
    if out_dir is not None:
        return Path(out_dir)
    if config.output_dir is not None:
        return Path(config.output_dir)
    return Path(os.environ.get(OUT_ENV, "runs")) / config.name


def _prepare_out_dir(out: Path, overwrite: bool):
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} already holds results; pass overwrite=True or use a fresh directory")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def build_data(config: ExperimentConfig, seed: int):
    d = config.dataset
    data_seed = seed if d.seed is None else d.seed
    if d.kind == "synthetic":
        counts = per_class_counts(d.longtail)
        spec = SynthMixtureSpec(d.num_classes, d.input_dim, counts, d.class_separation,
                                d.within_class_std, d.test_per_class)
        return make_synthetic_mixture(spec, data_seed)
    source = load_split(d.source)
    test = load_split(d.test)
    return subsample_longtail(source, d.longtail, data_seed), test


class _StageLog:
    """Appends history records as they arrive and writes periodic checkpoints."""

    def __init__(self, stage_dir: Path, checkpoint_every: int):
        self.dir = stage_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = stage_dir / "history.jsonl"
        self.path.write_text("")
        self.checkpoint_every = checkpoint_every

    def __call__(self, record: MetricsRecord, model):
        with self.path.open("a") as fh:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        if self.checkpoint_every and (record.epoch + 1) % self.checkpoint_every == 0:
            save_checkpoint(model, self.dir / f"model_epoch{record.epoch + 1:04d}.npz")

    def finish(self, model, test, train_counts, thresholds):
        save_checkpoint(model, self.dir / "model.npz")
        final = evaluate(model, test, train_counts, thresholds, split_tag="test")
        final.stage = self.dir.name
        (self.dir / "final.json").write_text(json.dumps(final.to_dict(), sort_keys=True, indent=1))
        return final


def run_seed(config: ExperimentConfig, seed: int, seed_dir, methods=None, baseline: bool = True):
    """Baseline, teacher and the requested students for one seed, all persisted under ``seed_dir``."""
    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    methods = (config.stage2.method,) if methods is None else tuple(methods)
    thresholds = config.evaluation.thresholds
    stage = "data"
    try:
        train, test = build_data(config, seed)
        save_split(train, seed_dir / "data" / "train", seed=seed)
        save_split(test, seed_dir / "data" / "test", seed=seed)
        counts = train.per_class_counts
        loss = config.loss.spec(counts)
        spec = config.backbone.spec(config.dataset.input_dim)
        points = config.backbone.insertion_points
        init = build_model(spec, config.dataset.num_classes, points, seed=seed,
                           per_dim_params=config.backbone.per_dim_params,
                           spatial_noise=config.backbone.spatial_noise)
        if baseline:
            stage = "baseline"
            slog = _StageLog(seed_dir / "baseline", config.checkpoint_every)
            model, _ = train_baseline(train, init, loss, config.stage2.schedule(seed), eval_split=test,
                                      on_epoch=slog, thresholds=thresholds)
            slog.finish(model, test, counts, thresholds)
        if not points or not methods:
            return
        stage = "teacher"
        slog = _StageLog(seed_dir / "teacher", config.checkpoint_every)
        teacher, _ = train_teacher(train, init, loss, config.stage1.schedule(seed), eval_split=test,
                                   on_epoch=slog, thresholds=thresholds)
        slog.finish(teacher, test, counts, thresholds)
        for method in methods:
            stage = f"student_{method}"
            slog = _StageLog(seed_dir / stage, config.checkpoint_every)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                student, _ = run_student(method, teacher, train, loss, config.stage2.distill(seed, method),
                                         config.stage2.schedule(seed), student=init, eval_split=test,
                                         on_epoch=slog, thresholds=thresholds)
            for w in caught:
                log.warning("seed %s %s: %s", seed, stage, w.message)
            slog.finish(student, test, counts, thresholds)
    except Exception as exc:
        err = {"seed": seed, "stage": stage, "error": f"{type(exc).__name__}: {exc}",
               "traceback": traceback.format_exc()}
        (seed_dir / "error.json").write_text(json.dumps(err, indent=1))
        log.error("seed %s failed in stage %s: %s", seed, stage, exc)


def _run_seed_job(args):
    config_dict, seed, seed_dir, methods, baseline = args
    run_seed(config_from_dict(config_dict), seed, seed_dir, methods, baseline)


def _run_seeds(config: ExperimentConfig, out: Path, methods, baseline=True, jobs: int = 1):
    jobs_args = [(config.to_dict(), s, str(out / f"seed_{s}"), methods, baseline) for s in config.seeds]
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_seed_job, jobs_args))
    else:
        for a in jobs_args:
            _run_seed_job(a)


def read_final(stage_dir) -> MetricsRecord | None:
    path = Path(stage_dir) / "final.json"
    if not path.exists():
        return None
    return MetricsRecord.from_dict(json.loads(path.read_text()))


def read_history(stage_dir) -> list:
    path = Path(stage_dir) / "history.jsonl"
    return [MetricsRecord.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


def _mean_std(values):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def summarize_run(out) -> RunSummary:
    """Aggregate the persisted finals of one run directory and write ``summary.json`` / ``summary.txt``."""
    from .report import emit_comparison_table

    out = Path(out)
    config = config_from_dict(_load_yaml(out / "config.yaml"))
    method = config.stage2.method
    summary = RunSummary(config.name, config.digest(), config.loss.label, config.dataset.label,
                         method, list(config.seeds))
    for s in config.seeds:
        seed_dir = out / f"seed_{s}"
        err = seed_dir / "error.json"
        if err.exists():
            summary.failures.append(json.loads(err.read_text()))
        base = read_final(seed_dir / "baseline")
        ours = read_final(seed_dir / f"student_{method}")
        if base is not None:
            summary.baseline[str(s)] = base.to_dict()
        if ours is not None:
            summary.ours[str(s)] = ours.to_dict()
        if base is not None and ours is not None:
            summary.per_seed_delta[str(s)] = ours.accuracy - base.accuracy
    summary.baseline_mean, summary.baseline_std = _mean_std([r["accuracy"] for r in summary.baseline.values()])
    summary.ours_mean, summary.ours_std = _mean_std([r["accuracy"] for r in summary.ours.values()])
    if summary.baseline_mean is not None and summary.ours_mean is not None:
        summary.delta = summary.ours_mean - summary.baseline_mean
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), sort_keys=True, indent=1))
    text = emit_comparison_table([summary], "plain") if summary.delta is not None else "incomplete run\n"
    (out / "summary.txt").write_text(text)
    return summary


def _load_yaml(path: Path):
    return yaml.safe_load(path.read_text())


def _start(config: ExperimentConfig, out_dir, overwrite) -> Path:
    out = resolve_out_dir(config, out_dir)
    _prepare_out_dir(out, overwrite)
    (out / "config.yaml").write_text(config.to_yaml())
    return out


def run_experiment(config: ExperimentConfig, out_dir=None, overwrite: bool = False, jobs: int = 1) -> RunSummary:
    """Baseline, teacher and the configured student for every seed, then a summary from disk."""
    out = _start(config, out_dir, overwrite)
    _run_seeds(config, out, (config.stage2.method,), jobs=jobs)
    return summarize_run(out)


@dataclass
class MethodRow:
    label: str
    method: str | None
    accuracies: list
    mean: float | None
    std: float | None
    gain: float | None


def run_method_comparison(config: ExperimentConfig, out_dir=None, overwrite: bool = False,
                          methods=METHODS, jobs: int = 1) -> list:
    """Baseline plus every stage-2 method on shared teachers; returns one ``MethodRow`` per line."""
    dim = config.backbone.spec(config.dataset.input_dim).feature_dim
    if "high_conf_kernels" in methods and config.stage2.k > dim:
        raise ValidationError(f"stage2.k={config.stage2.k} exceeds the feature dim {dim}")
    out = _start(config, out_dir, overwrite)
    _run_seeds(config, out, tuple(methods), jobs=jobs)
    return method_rows(out, methods)


def method_rows(out, methods=METHODS) -> list:
    out = Path(out)
    config = config_from_dict(_load_yaml(out / "config.yaml"))
    rows = []
    stages = [("Baseline", None, "baseline")] + [(METHOD_LABELS[m], m, f"student_{m}") for m in methods]
    base_mean = None
    for label, method, stage in stages:
        accs = []
        for s in config.seeds:
            rec = read_final(out / f"seed_{s}" / stage)
            if rec is not None:
                accs.append(rec.accuracy)
        mean, std = _mean_std(accs)
        if method is None:
            base_mean = mean
        gain = None if method is None or mean is None or base_mean is None else mean - base_mean
        rows.append(MethodRow(label, method, accs, mean, std, gain))
    (out / "methods.json").write_text(json.dumps([asdict(r) for r in rows], indent=1))
    return rows


@dataclass
class PlacementRow:
    blocks: tuple  # 1-based block indices carrying a residual layer
    accuracies: list
    mean: float | None
    std: float | None


def _placement_key(points, num_blocks) -> tuple:
    names = normalize_insertion_points(points, num_blocks)
    return tuple(int(n.rsplit("_", 1)[1]) for n in names)


def ablation_gn_placement(config: ExperimentConfig, placements, out_dir=None, overwrite: bool = False,
                          jobs: int = 1) -> dict:
    """Run the full pipeline once per placement set (plus the baseline) and report accuracy per set.

    Placements are lists of insertion-point names or 1-based block numbers.
    An empty set is the baseline itself. Duplicates are dropped with a warning.
    """
    spec = config.backbone.spec(config.dataset.input_dim)
    if spec.num_blocks < 3:
        raise ValidationError(f"placement ablation needs >= 3 blocks, backbone has {spec.num_blocks}")
    keys = []
    for p in placements:
        names = [f"after_block_{x}" if isinstance(x, int) or str(x).isdigit() else x for x in p]
        key = _placement_key(names, spec.num_blocks)
        if key in keys:
            warnings.warn(f"duplicate placement {list(key)} ignored", stacklevel=2)
            continue
        keys.append(key)

    out = _start(config, out_dir, overwrite)
    base_cfg = config.with_insertion_points(())
    _run_seeds(base_cfg, out / "baseline", (), baseline=True, jobs=jobs)
    rows = []
    base_accs = [read_final(out / "baseline" / f"seed_{s}" / "baseline") for s in config.seeds]
    base_accs = [r.accuracy for r in base_accs if r is not None]
    for key in keys:
        if not key:
            rows.append(PlacementRow((), base_accs, *_mean_std(base_accs)))
            continue
        cfg = config.with_insertion_points([f"after_block_{k}" for k in key])
        sub = out / ("gn_" + "_".join(str(k) for k in key))
        sub.mkdir(parents=True, exist_ok=True)
        (sub / "config.yaml").write_text(cfg.to_yaml())
        _run_seeds(cfg, sub, ("from_scratch",), baseline=False, jobs=jobs)
        accs = [read_final(sub / f"seed_{s}" / "student_from_scratch") for s in config.seeds]
        accs = [r.accuracy for r in accs if r is not None]
        rows.append(PlacementRow(key, accs, *_mean_std(accs)))
    report = {"num_blocks": spec.num_blocks, "baseline": _mean_std(base_accs)[0],
              "rows": [asdict(r) for r in rows]}
    (out / "placement.json").write_text(json.dumps(report, indent=1))
    return report
