"""Config-driven ratio sweeps and report emission.

A config is an INI file::

    [model]
    name = lenet-small
    input_shape = 8, 8, 1
    num_classes = 10
    seed = 0

    [data]
    source = synthetic        ; or cifar10 / cifar100 with path = ...
    samples = 2
    seed = 1

    [sweep]
    metrics = Grad, ProdSig, Param
    ratios = 0, 0.3, 1
    distance_ratio = 0.3
    protection = mse >= 0.05
    lemma_panels = 0
    workers = 1

    [attack]
    matching = cosine
    alpha_tv = 1e-8
    iterations = 2000
    restarts = 5
    mode = exclude

    [output]
    dir = out
    formats = csv, json
    timings = true

Only the output directory may be overridden from the environment
(``SELECTENC_OUTPUT_DIR``).
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import encryption as enc
from .attack import AttackConfig, AttackInfeasible, invert
from .dataio import load_cifar, synth_images
from .evalmetrics import quality
from .lemma import verify_integral
from .models import build, get_spec, loss_and_grad, onehot
from .significance import FREE_METRICS, compute

log = logging.getLogger(__name__)

CSV_HEADER = ["sample", "metric", "ratio", "mse", "psnr", "ssim", "rec_loss", "compute_seconds", "status"]
OUTPUT_ENV = "SELECTENC_OUTPUT_DIR"
SMOKE_CONFIG = Path(__file__).parent / "configs" / "smoke.ini"
OK, INFEASIBLE = "ok", "AttackInfeasible"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str = "lenet-small"
    model_kwargs: dict = field(default_factory=dict)
    model_seed: int = 0
    source: str = "synthetic"
    data_path: str | None = None
    samples: int = 1
    data_seed: int = 1
    metrics: list = field(default_factory=lambda: ["Grad"])
    ratios: list = field(default_factory=lambda: [0.0])
    distance_ratio: float = 0.3
    protection: tuple = ("mse", ">=", 0.05)
    attack: AttackConfig = field(default_factory=AttackConfig)
    mode: str = enc.EXCLUDE
    xi: float = enc.DEFAULT_XI
    sens_step: float = 1e-4
    lemma_panels: int = 0
    workers: int = 1
    output_dir: str = "out"
    formats: list = field(default_factory=lambda: ["csv", "json"])
    timings: bool = True

    def __post_init__(self):
        self.ratios = [float(r) for r in self.ratios]
        if any(not 0 <= r <= 1 for r in self.ratios) or self.ratios != sorted(self.ratios):
            raise ConfigError(f"ratios must be sorted ascending within [0, 1]: {self.ratios}")
        name, direction, value = self.protection
        if name not in ("mse", "psnr", "ssim") or direction not in (">=", "<="):
            raise ConfigError(f"bad protection threshold {self.protection}")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")

    def to_dict(self) -> dict:
        """Plain JSON types only, so a dumped and re-loaded report compares equal."""
        return json.loads(json.dumps(asdict(self)))


def _list(text: str, cast=str) -> list:
    return [cast(t.strip()) for t in text.split(",") if t.strip()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_config(text: str, base_dir: str | Path = ".") -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
        kw: dict = {}
        m = cp["model"] if cp.has_section("model") else {}
        kw["model"] = m.get("name", "lenet-small")
        mk = {}
        if "input_shape" in m:
            mk["input_shape"] = tuple(_list(m["input_shape"], int))
        if "num_classes" in m:
            mk["num_classes"] = int(m["num_classes"])
        for key in ("channels",):
            if key in m:
                mk[key] = tuple(_list(m[key], int))
        for key in ("hidden",):
            if key in m:
                mk[key] = int(m[key])
        for key in ("activation", "pool"):
            if key in m:
                mk[key] = m[key].strip()
        kw["model_kwargs"] = mk
        kw["model_seed"] = int(m.get("seed", 0))
        d = cp["data"] if cp.has_section("data") else {}
        kw["source"] = d.get("source", "synthetic").strip()
        if "path" in d:
            p = Path(d["path"].strip())
            kw["data_path"] = str(p if p.is_absolute() else Path(base_dir) / p)
        kw["samples"] = int(d.get("samples", 1))
        kw["data_seed"] = int(d.get("seed", 1))
        s = cp["sweep"] if cp.has_section("sweep") else {}
        kw["metrics"] = _list(s.get("metrics", "Grad"))
        kw["ratios"] = _list(s.get("ratios", "0"), float)
        kw["distance_ratio"] = float(s.get("distance_ratio", 0.3))
        prot = s.get("protection", "mse >= 0.05").split()
        if len(prot) != 3:
            raise ConfigError(f"protection must read '<metric> <op> <value>', got {prot}")
        kw["protection"] = (prot[0], prot[1], float(prot[2]))
        kw["lemma_panels"] = int(s.get("lemma_panels", 0))
        kw["workers"] = int(s.get("workers", 1))
        kw["sens_step"] = float(s.get("sens_step", 1e-4))
        a = cp["attack"] if cp.has_section("attack") else {}
        akw = {}
        for f in fields(AttackConfig):
            if f.name in a:
                cast = {"bool": _bool, "int": int, "float": float, "str": str}[f.type]
                akw[f.name] = cast(a[f.name].strip())
        kw["attack"] = AttackConfig(**akw)
        kw["mode"] = a.get("mode", enc.EXCLUDE).strip()
        kw["xi"] = float(a.get("xi", enc.DEFAULT_XI))
        o = cp["output"] if cp.has_section("output") else {}
        out = Path(o.get("dir", "out").strip())
        kw["output_dir"] = str(out if out.is_absolute() else Path(base_dir) / out)
        kw["formats"] = _list(o.get("formats", "csv, json"))
        kw["timings"] = _bool(o.get("timings", "true"))
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (configparser.Error, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base_dir=None) -> ExperimentConfig:
    """Relative paths resolve against ``base_dir``, by default the config file's directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, path.parent if base_dir is None else base_dir)
    if os.environ.get(OUTPUT_ENV):
        cfg.output_dir = os.environ[OUTPUT_ENV]
    return cfg


@dataclass
class Cell:
    sample: int
    metric: str
    ratio: float
    status: str
    mse: float | None = None
    psnr: float | None = None
    ssim: float | None = None
    rec_loss: float | None = None
    compute_seconds: float = 0.0
    restart_index: int | None = None
    trace: list = field(default_factory=list)

    @property
    def key(self):
        return (self.sample, self.metric, self.ratio)


@dataclass
class ExperimentReport:
    config: dict
    cells: list
    aggregates: dict = field(default_factory=dict)
    minimal_ratio: dict = field(default_factory=dict)
    distance_table: dict = field(default_factory=dict)
    lemma: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "cells": [asdict(c) for c in self.cells],
            "aggregates": self.aggregates,
            "minimal_ratio": self.minimal_ratio,
            "distance_table": self.distance_table,
            "lemma": self.lemma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["config"], [Cell(**c) for c in d["cells"]], d["aggregates"],
                   d["minimal_ratio"], d["distance_table"], d["lemma"])

    @property
    def failed(self) -> list:
        return [c for c in self.cells if c.status not in (OK, INFEASIBLE)]


def load_samples(cfg: ExperimentConfig, num_classes: int) -> list:
    if cfg.source == "synthetic":
        shape = cfg.model_kwargs.get("input_shape", (32, 32, 3))
        return synth_images(cfg.samples, cfg.data_seed, num_classes, shape)
    if cfg.source in ("cifar10", "cifar100"):
        if not cfg.data_path:
            raise ConfigError(f"{cfg.source} needs data.path")
        images = load_cifar(cfg.data_path, cfg.source)
        rng = np.random.default_rng(cfg.data_seed)
        pick = rng.choice(len(images), size=min(cfg.samples, len(images)), replace=False)
        return [images[i] for i in sorted(pick)]
    raise ConfigError(f"unknown data source {cfg.source!r}")


def _attack_cell(args) -> Cell:
    params, y0, view, x0, attack_cfg, key, seconds = args
    sample, metric, ratio = key
    try:
        r = invert(params, y0, view, attack_cfg, sample_index=sample)
    except AttackInfeasible:
        return Cell(sample, metric, ratio, INFEASIBLE, compute_seconds=seconds)
    except Exception as exc:  # recorded per cell; the sweep goes on
        log.exception("cell %s failed", key)
        return Cell(sample, metric, ratio, f"error: {type(exc).__name__}: {exc}", compute_seconds=seconds)
    q = quality(r.x_star, x0)
    return Cell(sample, metric, ratio, OK, q.mse, q.psnr, q.ssim, r.final_rec_loss, seconds,
                r.restart_index, [float(v) for v in r.loss_trace])


def _crosses(value: float, direction: str, threshold: float) -> bool:
    return value >= threshold if direction == ">=" else value <= threshold


def summarize(cells: list, protection: tuple, distance_ratio: float) -> tuple[dict, dict, dict]:
    """Aggregates per (metric, ratio), minimal protective ratio and distance table."""
    name, direction, threshold = protection
    groups: dict = {}
    for c in cells:
        groups.setdefault(c.metric, {}).setdefault(c.ratio, []).append(c)
    aggregates, minimal, distance = {}, {}, {}
    for metric, by_ratio in groups.items():
        aggregates[metric] = {}
        minimal[metric] = None
        for ratio in sorted(by_ratio):
            cs = by_ratio[ratio]
            ok = [c for c in cs if c.status == OK]
            entry = {"n": len(ok), "infeasible": sum(c.status == INFEASIBLE for c in cs)}
            for q in ("mse", "psnr", "ssim", "rec_loss"):
                vals = np.array([getattr(c, q) for c in ok], dtype=float)
                entry[q] = {
                    "mean": float(vals.mean()) if vals.size else None,
                    "std": float(vals.std()) if vals.size else None,
                    "median": float(np.median(vals)) if vals.size else None,
                }
            aggregates[metric][repr(ratio)] = entry
            if ok:
                protected = _crosses(entry[name]["mean"], direction, threshold)
            else:
                protected = entry["infeasible"] > 0
            if protected and minimal[metric] is None:
                minimal[metric] = ratio
            if math.isclose(ratio, distance_ratio):
                distance[metric] = {"mean": entry["mse"]["mean"], "std": entry["mse"]["std"]}
    return aggregates, minimal, distance


def run_sweep(cfg: ExperimentConfig) -> ExperimentReport:
    """Every sample x metric x ratio: score, mask, view, invert, evaluate."""
    spec = get_spec(cfg.model, **cfg.model_kwargs)
    params = build(spec, cfg.model_seed)
    k = spec.num_classes
    samples = load_samples(cfg, k)
    jobs, pre_cells, lemma = [], [], []
    for s, img in enumerate(samples):
        x0, y0 = img.pixels, onehot(img.label % k, k)
        if x0.shape != spec.input_shape:
            raise ConfigError(f"sample shape {x0.shape} does not match model input {spec.input_shape}")
        _, g0 = loss_and_grad(params, x0, y0)
        if cfg.lemma_panels:
            lemma.append(verify_integral(params, x0, y0, cfg.lemma_panels).to_dict())
        for metric in cfg.metrics:
            try:
                scores = compute(metric, params, x0, y0, g0, step=cfg.sens_step)
            except Exception as exc:
                log.error("metric %s failed on sample %d: %s", metric, s, exc)
                for ratio in cfg.ratios:
                    pre_cells.append(Cell(s, metric, ratio, f"error: {type(exc).__name__}: {exc}"))
                continue
            seconds = 0.0 if metric in FREE_METRICS or not cfg.timings else scores.compute_seconds
            if scores.metric_id == "LayerSlice":
                mask = enc.selection_mask(scores)
                plan = [(round(float(mask.bits.mean()), 12), mask)]
            else:
                plan = [(ratio, enc.top_s_mask(scores, ratio)) for ratio in cfg.ratios]
            for ratio, mask in plan:
                view = enc.attacker_view(g0, mask, cfg.mode, cfg.xi, seed=s)
                jobs.append((params, y0, view, x0, cfg.attack, (s, metric, ratio), seconds))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            cells = list(pool.map(_attack_cell, jobs))
    else:
        cells = [_attack_cell(j) for j in jobs]
    order = {m: i for i, m in enumerate(cfg.metrics)}
    cells = sorted(cells + pre_cells, key=lambda c: (c.sample, order[c.metric], c.ratio))
    aggregates, minimal, distance = summarize(cells, cfg.protection, cfg.distance_ratio)
    return ExperimentReport(cfg.to_dict(), cells, aggregates, minimal, distance, lemma)


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for c in report.cells:
        w.writerow([c.sample, c.metric, repr(c.ratio), _num(c.mse), _num(c.psnr), _num(c.ssim),
                    _num(c.rec_loss), _num(c.compute_seconds), c.status])
    return buf.getvalue()


def emit(report: ExperimentReport, out_dir, formats=("csv", "json")) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        if "csv" in formats:
            p = out / "report.csv"
            p.write_text(report_csv(report))
            written.append(p)
        if "json" in formats:
            p = out / "report.json"
            p.write_text(json.dumps(report.to_dict(), indent=1))
            written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return written


def load_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))
