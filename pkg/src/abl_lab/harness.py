"""Seeded experiment orchestration behind the command-line front end.

Seeds: the dataset and the poison selection come from the master seed
alone, so every run of a sweep sees the same data. Each run's training
seed hashes the master seed together with that run's axis values.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import abl, attacks, baselines, data, metrics, nn
from .config import ExperimentConfig, check_rate_cap
from .errors import ConfigError, PathError, TrainingError
from .prng import derive_seed

log = logging.getLogger(__name__)

MODES = ("standard", "lga", "abl")


@dataclass(frozen=True)
class Seeds:
    data: int
    poison: int
    standard: int
    run: int

    @classmethod
    def for_run(cls, master: int, axes: dict | None = None) -> "Seeds":
        point = sorted((axes or {}).items())
        return cls(derive_seed(master, "data"), derive_seed(master, "poison"),
                   derive_seed(master, "standard"), derive_seed(master, "run", point))


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    report: dict | None
    duration: float
    artifacts: dict = field(default_factory=dict)
    axes: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


@dataclass
class Workbench:
    """Datasets and poison setup shared by every run of one config."""

    clean_train: data.Dataset
    test: data.Dataset
    train: data.Dataset
    poison_spec: attacks.PoisonSpec
    poison_report: attacks.PoisonReport


def write_atomic(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def write_ids(path, ids) -> Path:
    return write_atomic(path, "".join(f"{int(i)}\n" for i in ids))


def read_ids(path) -> list[int]:
    path = Path(path)
    if not path.exists():
        raise PathError(f"id file not found: {path}")
    return [int(line) for line in path.read_text().split()]


def load_datasets(cfg: ExperimentConfig, seeds: Seeds) -> tuple[data.Dataset, data.Dataset]:
    ds = cfg.dataset
    if ds.source == "synthetic":
        return data.gen_synthetic(ds.synthetic_spec(seeds.data))
    for p in ds.idx_paths():
        if not Path(p).exists():
            raise PathError(f"dataset file not found: {p}")
    train = data.load_idx(ds.train_images, ds.train_labels, ds.class_count)
    test = data.load_idx(ds.test_images, ds.test_labels, ds.class_count)
    return train, test


def prepare(cfg: ExperimentConfig, seeds: Seeds | None = None) -> Workbench:
    seeds = seeds or Seeds.for_run(cfg.seed)
    clean, test = load_datasets(cfg, seeds)
    spec = cfg.poison.spec(clean.image_shape, seeds.poison)
    attacks.validate_trigger(spec.trigger, clean.image_shape)
    train, report = attacks.poison_dataset(clean, spec)
    return Workbench(clean, test, train, spec, report)


def training_config(cfg: ExperimentConfig, seeds: Seeds) -> abl.AblConfig:
    return dataclasses.replace(cfg.training, seed=seeds.run)


def unlearn_options(cfg: ExperimentConfig, tc: abl.AblConfig) -> baselines.UnlearnOptions:
    return baselines.UnlearnOptions(
        epochs=tc.unlearn_epochs, lr=tc.unlearn_lr, batch_size=tc.batch_size, momentum=tc.momentum,
        weight_decay=tc.weight_decay, scratch_epochs=cfg.methods.scratch_epochs,
        scratch_lr=cfg.methods.scratch_lr, ascent_ceiling=tc.ascent_ceiling, seed=tc.seed,
    )


@dataclass
class Defense:
    net: nn.Network
    isolation: abl.IsolationResult
    trace: abl.LossTrace
    before_unlearning: nn.Network
    isolated: data.Dataset
    remaining: data.Dataset


def isolation_phase(train: data.Dataset, cfg: ExperimentConfig, tc: abl.AblConfig):
    method = cfg.methods.isolation_method(tc.gamma)
    return baselines.run_isolation(method, train, tc)


def defend(train: data.Dataset, cfg: ExperimentConfig, tc: abl.AblConfig) -> Defense:
    """Isolation, mid-stage training and the configured unlearning method.

    With LGA isolation and global ascent this is exactly the ABL pipeline.
    """
    if cfg.methods.isolation == "lga" and cfg.methods.unlearn == "abl_gga":
        net, st = abl.abl_stages(train, tc)
        trace = st.lga_trace.extend(st.mid_trace) if tc.include_isolated_in_mid else st.lga_trace
        return Defense(net, st.isolation, trace, st.before_unlearning,
                       train.select_ids(st.isolation.isolated_ids), train.select_ids(st.isolation.remaining_ids))
    net, iso, trace = isolation_phase(train, cfg, tc)
    isolated = train.select_ids(iso.isolated_ids)
    remaining = train.select_ids(iso.remaining_ids)
    mid_data = train if tc.include_isolated_in_mid else remaining
    net, mid_trace = abl.train_standard(net, mid_data, tc.mid_schedule(tc.seed + 2), epoch_offset=tc.turning_epoch)
    if tc.include_isolated_in_mid:
        trace = trace.extend(mid_trace)
    before = net
    net = baselines.unlearn(cfg.methods.unlearn_method(), net, remaining, isolated, unlearn_options(cfg, tc))
    return Defense(net, iso, trace, before, isolated, remaining)


def standard_run(train: data.Dataset, tc: abl.AblConfig, seed: int) -> tuple[nn.Network, abl.LossTrace]:
    """Plain training with the same epoch budget as the defended run."""
    net = nn.init_network(abl.network_dims(train, tc.hidden), seed)
    return abl.train_standard(net, train, tc.standard_schedule(seed + 5))


def _report_config(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    d.pop("out")
    d["training"].pop("seed")
    return d


@dataclass
class ExperimentResult:
    report: metrics.Report
    defense: Defense
    control: nn.Network
    baseline: nn.Network
    baseline_trace: abl.LossTrace
    bench: Workbench


def run_experiment(cfg: ExperimentConfig, axes: dict | None = None, *, cache: dict | None = None) -> ExperimentResult:
    """Clean control, poisoned baseline and defended run on shared data.

    ``cache`` lets a sweep reuse control and baseline networks across points
    that share the data and poisoning rate.
    """
    seeds = Seeds.for_run(cfg.seed, axes)
    tc = training_config(cfg, seeds)
    cache = {} if cache is None else cache
    key = (cfg.poison, cfg.dataset, tc.hidden, tc.standard_schedule(0))
    if key not in cache:
        bench = prepare(cfg, seeds)
        control, _ = standard_run(bench.clean_train, tc, seeds.standard)
        baseline, btrace = standard_run(bench.train, tc, seeds.standard)
        cache[key] = (bench, control, baseline, btrace)
    bench, control, baseline, btrace = cache[key]
    d = defend(bench.train, cfg, tc)
    backdoor_test = attacks.build_backdoor_testset(bench.test, bench.poison_spec)
    extra = {
        "control": {"clean_accuracy": metrics.clean_accuracy(control, bench.test)},
        "baseline": {"asr": metrics.attack_success_rate(baseline, backdoor_test),
                     "clean_accuracy": metrics.clean_accuracy(baseline, bench.test)},
        "poison": bench.poison_report.to_dict(),
        "isolated_count": len(d.isolation.isolated_ids),
        "axes": dict(sorted((axes or {}).items())),
        "seeds": dataclasses.asdict(seeds),
    }
    extra["poison"].pop("poisoned_ids")
    report = metrics.build_report(d.net, bench.train, bench.test, bench.poison_spec, isolation=d.isolation,
                                  trace=d.trace, config=_report_config(cfg), seed=cfg.seed, extra=extra)
    return ExperimentResult(report, d, control, baseline, btrace, bench)


# ---------------------------------------------------------------- commands

def _out(cfg: ExperimentConfig, out) -> Path:
    path = Path(out if out is not None else cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gen_data(cfg: ExperimentConfig, out=None) -> dict:
    out = _out(cfg, out)
    train, test = load_datasets(cfg, Seeds.for_run(cfg.seed))
    paths = {k: str(out / f"{k.replace('_', '-')}.idx") for k in ("train_images", "train_labels", "test_images", "test_labels")}
    data.write_idx(train, paths["train_images"], paths["train_labels"])
    data.write_idx(test, paths["test_images"], paths["test_labels"])
    return paths


def cmd_poison(cfg: ExperimentConfig, out=None) -> dict:
    out = _out(cfg, out)
    bench = prepare(cfg)
    paths = {"train_images": str(out / "poisoned-train-images.idx"),
             "train_labels": str(out / "poisoned-train-labels.idx")}
    data.write_idx(bench.train, paths["train_images"], paths["train_labels"])
    paths["poison_report"] = str(write_atomic(out / "poison_report.json",
                                              json.dumps(bench.poison_report.to_dict(), indent=2, sort_keys=True)))
    paths["poisoned_ids"] = str(write_ids(out / "poisoned_ids.txt", bench.poison_report.poisoned_ids))
    return paths


def _save_run(out: Path, net: nn.Network, report: metrics.Report, trace, train, full_trace: bool) -> dict:
    paths = {"model": str(out / "model.npz"), "report": str(out / "report.json")}
    nn.save_network(net, paths["model"])
    write_atomic(paths["report"], report.to_json())
    if trace is not None and len(trace):
        paths["curves"] = str(write_atomic(out / "curves.csv", metrics.curves_csv(trace, train)))
        if full_trace:
            paths["trace"] = str(write_atomic(out / "trace.csv", metrics.trace_csv(trace, train)))
    return paths


def cmd_train(cfg: ExperimentConfig, mode: str = "abl", out=None) -> dict:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    out = _out(cfg, out)
    seeds = Seeds.for_run(cfg.seed)
    tc = training_config(cfg, seeds)
    bench = prepare(cfg, seeds)
    isolation = None
    if mode == "standard":
        net, trace = standard_run(bench.train, tc, seeds.standard)
    elif mode == "lga":
        net, isolation, trace = isolation_phase(bench.train, cfg, tc)
    else:
        d = defend(bench.train, cfg, tc)
        net, isolation, trace = d.net, d.isolation, d.trace
    report = metrics.build_report(net, bench.train, bench.test, bench.poison_spec, isolation=isolation, trace=trace,
                                  config=_report_config(cfg), seed=cfg.seed, extra={"mode": mode})
    paths = _save_run(out, net, report, trace, bench.train, full_trace=True)
    if isolation is not None:
        paths["isolated_ids"] = str(write_ids(out / "isolated_ids.txt", isolation.isolated_ids))
    return paths


def cmd_isolate(cfg: ExperimentConfig, out=None) -> dict:
    out = _out(cfg, out)
    seeds = Seeds.for_run(cfg.seed)
    tc = training_config(cfg, seeds)
    bench = prepare(cfg, seeds)
    _, iso, trace = isolation_phase(bench.train, cfg, tc)
    summary = {"method": cfg.methods.isolation, "isolated_count": len(iso.isolated_ids),
               "remaining_count": len(iso.remaining_ids), "turning_epoch": tc.turning_epoch}
    if metrics.poisoned_ids(bench.train):
        summary["isolation_precision"] = metrics.isolation_precision(iso, bench.train)
    return {
        "isolated_ids": str(write_ids(out / "isolated_ids.txt", iso.isolated_ids)),
        "remaining_ids": str(write_ids(out / "remaining_ids.txt", iso.remaining_ids)),
        "isolation": str(write_atomic(out / "isolation.json", json.dumps(summary, indent=2, sort_keys=True))),
        "trace": str(write_atomic(out / "trace.csv", metrics.trace_csv(trace, bench.train))),
    }


def cmd_unlearn(cfg: ExperimentConfig, out=None) -> dict:
    """Isolation, mid stage, then the configured unlearning method."""
    out = _out(cfg, out)
    seeds = Seeds.for_run(cfg.seed)
    tc = training_config(cfg, seeds)
    bench = prepare(cfg, seeds)
    d = defend(bench.train, cfg, tc)
    report = metrics.build_report(d.net, bench.train, bench.test, bench.poison_spec, isolation=d.isolation,
                                  trace=d.trace, config=_report_config(cfg), seed=cfg.seed,
                                  extra={"unlearn": cfg.methods.unlearn})
    paths = _save_run(out, d.net, report, d.trace, bench.train, full_trace=False)
    paths["isolated_ids"] = str(write_ids(out / "isolated_ids.txt", d.isolation.isolated_ids))
    return paths


def _record(cfg, axes, result: ExperimentResult | None, started: float, run_dir: Path, error=None) -> RunRecord:
    artifacts = {}
    report = None
    if result is not None:
        report = result.report.to_dict()
        artifacts["report"] = str(write_atomic(run_dir / "report.json", result.report.to_json()))
        artifacts["model"] = str(run_dir / "model.npz")
        nn.save_network(result.defense.net, artifacts["model"])
        artifacts["curves"] = str(write_atomic(run_dir / "curves.csv",
                                               metrics.curves_csv(result.defense.trace, result.bench.train)))
        artifacts["isolated_ids"] = str(write_ids(run_dir / "isolated_ids.txt", result.defense.isolation.isolated_ids))
    rec = RunRecord(cfg.hash(), cfg.seed, report, round(time.perf_counter() - started, 3), artifacts,
                    dict(sorted((axes or {}).items())), "ok" if error is None else "failed",
                    None if error is None else str(error))
    write_atomic(run_dir / "record.json", rec.to_json())
    return rec


def cmd_experiment(cfg: ExperimentConfig, out=None) -> RunRecord:
    out = _out(cfg, out)
    started = time.perf_counter()
    result = run_experiment(cfg)
    return _record(cfg, {}, result, started, out)


def sweep_points(cfg: ExperimentConfig) -> list[tuple[dict, ExperimentConfig]]:
    axes = cfg.sweep.axes()
    names = list(axes)
    points = []
    for values in itertools.product(*(axes[n] for n in names)):
        point = dict(zip(names, values))
        training = cfg.training
        poison = cfg.poison
        for name, v in point.items():
            if name == "poisoning_rate":
                check_rate_cap(v, poison.allow_high_rate)
                poison = dataclasses.replace(poison, poisoning_rate=v)
            else:
                training = dataclasses.replace(training, **{name: v})
        sub = cfg.replace(training=training, poison=poison)
        sub.validate()
        points.append((point, sub))
    return points


SWEEP_COLUMNS = ("run", "status", "config_hash", "asr", "clean_accuracy", "isolation_precision",
                 "baseline_asr", "control_clean_accuracy", "duration")


def sweep_table(records: list[RunRecord], axis_names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*axis_names, *SWEEP_COLUMNS])
    for k, rec in enumerate(records):
        r = rec.report or {}
        extra = r.get("extra", {})
        w.writerow([*(rec.axes.get(a) for a in axis_names), k, rec.status, rec.config_hash, r.get("asr"),
                     r.get("clean_accuracy"), r.get("isolation_precision"),
                     extra.get("baseline", {}).get("asr"), extra.get("control", {}).get("clean_accuracy"),
                     rec.duration])
    return buf.getvalue()


def cmd_sweep(cfg: ExperimentConfig, out=None) -> list[RunRecord]:
    """One defended run per grid point, each record written before the next starts.

    A failing run is recorded with status ``failed`` and the sweep moves on;
    earlier records are never rewritten.
    """
    out = _out(cfg, out)
    points = sweep_points(cfg)
    names = list(cfg.sweep.axes())
    cache: dict = {}
    records = []
    (out / "records.jsonl").write_text("")
    for k, (point, sub) in enumerate(points):
        run_dir = out / f"run-{k:03d}-{sub.hash()}"
        started = time.perf_counter()
        try:
            rec = _record(sub, point, run_experiment(sub, point, cache=cache), started, run_dir)
        except (TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("sweep point %s failed: %s", point, exc)
            rec = _record(sub, point, None, started, run_dir, error=exc)
        records.append(rec)
        with open(out / "records.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        write_atomic(out / "sweep.csv", sweep_table(records, names))
    return records

