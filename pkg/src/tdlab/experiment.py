"""Config-driven experiment matrix: generate, pretrain, train, evaluate, analyze, report.

Every stage reads its inputs from and writes its outputs to the run directory,
so stages can run in separate processes (or CLI invocations).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
import traceback
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import tomli
import torch

from tdlab.analysis import MITable, attention_trace, ensemble_predict, modality_importance, write_traces
from tdlab.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from tdlab.distillation import DistillConfig
from tdlab.errors import ConfigError, ValidationError
from tdlab.eval_protocol import (
    EVAL_MODES,
    CooccurrenceStats,
    MetricsReport,
    SplitPlan,
    bias_statistics,
    evaluate,
    explicit_mitigation,
    make_splits,
    score_predictions,
    synonym_table,
)
from tdlab.regimes import REGIMES, DistillContext, RegimeSpec, train
from tdlab.student import PRESETS, StudentModel, preset
from tdlab.synth_world import Dataset, GeneratorConfig, Splits, dataset_digest, generate_dataset, load_dataset, save_dataset
from tdlab.teacher import TeacherConfig, TeacherModel, pretrain_contrastive

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RUN_DIRS = ("data", "checkpoints", "logs", "reports", "traces")
TEXT_ONLY = "text_only"
TEACHER_ROW = "teacher_zero_shot"


# ---------------------------------------------------------------------- schema


@dataclass(frozen=True)
class DatasetSection:
    seed: int = 0
    n_train: int = 5000
    n_val: int = 350
    n_test: int = 1000
    n_categories: int = 7
    n_shapes: int = 4
    n_colors: int = 4
    grid_size: int = 3
    min_objects: int = 3
    max_objects: int = 5
    shortcut_strength: float = 0.8
    test_shortcut_strength: float | None = None
    alias_rate: float = 0.1

    def generator(self) -> GeneratorConfig:
        d = asdict(self)
        d.pop("seed")
        return GeneratorConfig(**d)


@dataclass(frozen=True)
class TeacherSection:
    d_embed: int = 64
    d_ff: int = 128
    text_layers: int = 2
    vision_layers: int = 2
    heads: int = 4
    temperature_contrastive: float = 0.07
    max_text_len: int = 48
    seed: int = 0
    steps: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    extra_scenes: int = 20000
    hard_negatives: bool = True

    def model_config(self, vocab_size: int, gen: GeneratorConfig) -> TeacherConfig:
        return TeacherConfig(vocab_size=vocab_size, n_shapes=gen.n_shapes, n_colors=gen.n_colors,
                             grid_size=gen.grid_size, d_embed=self.d_embed, text_layers=self.text_layers,
                             vision_layers=self.vision_layers, heads=self.heads,
                             temperature_contrastive=self.temperature_contrastive,
                             max_text_len=self.max_text_len, d_ff=self.d_ff)


@dataclass(frozen=True)
class StudentSection:
    preset: str = "base"
    head: str = "cosine"
    d_model: int | None = None
    layers: int | None = None
    heads: int | None = None
    d_ff: int | None = None
    text_feature_layer: int = -1


@dataclass(frozen=True)
class SplitSection:
    regime: str = "low_shot_A"
    per_category_count: int | None = None
    seed: int = 0

    def plan(self) -> SplitPlan:
        return SplitPlan(self.regime, self.per_category_count, self.seed)


@dataclass(frozen=True)
class RegimeSection:
    kind: str = "baseline"
    split: str = "low_shot_A"
    unlabeled_split: str | None = None
    epochs: int = 40
    lr: float = 3e-4
    optimizer: str = "adam"
    warmup_steps: int = 20
    batch_size: int = 16
    unlabeled_batch_size: int = 16
    af_epochs: int = 4
    af_lr: float = 1e-3
    af_batch_size: int = 32
    mask_rate: float = 0.15
    patience: int = 5
    zero_regions: bool = False
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(w=0.0))

    def spec(self, seed: int) -> RegimeSpec:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("kind", "split")}
        return RegimeSpec(name=self.kind, seed=seed, **d)


@dataclass(frozen=True)
class AnalysisSection:
    mi: bool = True
    probe_size: int = 200
    traces: int = 2
    trace_regimes: tuple[str, ...] = ()
    ensemble_regimes: tuple[str, ...] = ()
    ensemble_size: int = 3
    im_gamma: float = 0.9
    # regime whose hyper-parameters train the text-only (regions zeroed) model for IM
    text_only_regime: str | None = None
    teacher_zero_shot: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seeds: tuple[int, ...]
    eval_modes: tuple[str, ...]
    out: str
    dataset: DatasetSection
    teacher: TeacherSection
    student: StudentSection
    splits: dict[str, SplitSection]
    regimes: dict[str, RegimeSection]
    analysis: AnalysisSection
    workers: int = 1
    source: str = ""

    def fingerprint(self, *parts: str) -> str:
        """Hash of the config sections a stage depends on."""
        payload = {p: _jsonable(getattr(self, p)) for p in parts}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def regime_fingerprint(self, regime: str) -> str:
        r = self.regimes[regime] if regime != TEXT_ONLY else self.text_only_section()
        payload = {"base": self.fingerprint("dataset", "teacher", "student"), "regime": _jsonable(r),
                   "split": _jsonable(self.splits[r.split])}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def text_only_section(self) -> RegimeSection:
        base = self.regimes[self.analysis.text_only_regime or next(iter(self.regimes))]
        return replace(base, kind="baseline", zero_regions=True, distill=DistillConfig(w=0.0), af_epochs=0)

    def needs_text_only(self) -> bool:
        return "im" in self.eval_modes

    def train_jobs(self) -> list[tuple[str, int]]:
        names = list(self.regimes) + ([TEXT_ONLY] if self.needs_text_only() else [])
        return [(r, s) for s in self.seeds for r in names]

    def section(self, regime: str) -> RegimeSection:
        return self.text_only_section() if regime == TEXT_ONLY else self.regimes[regime]


def _jsonable(x: Any) -> Any:
    if hasattr(x, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(x).items()}
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _line_of(text: str, table: Sequence[str], key: str | None = None) -> int | None:
    """1-based line of ``key`` inside ``[table]`` (or of the header itself)."""
    want = ".".join(table)
    current = ""
    header_line = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[\s*([^\[\]]+?)\s*\]$", line)
        if m:
            current = re.sub(r"\s*\.\s*", ".", m.group(1)).replace('"', "")
            if current == want:
                header_line = n
                if key is None:
                    return n
            continue
        if current == want and key is not None and re.match(rf"^\"?{re.escape(key)}\"?\s*=", line):
            return n
    return header_line


class _Schema:
    def __init__(self, text: str, path: str):
        self.text, self.path = text, path

    def fail(self, table: Sequence[str], key: str | None, msg: str) -> ConfigError:
        line = _line_of(self.text, table, key)
        where = ".".join([*table, key] if key else table) or "<top level>"
        loc = f"{self.path}:{line}" if line else self.path
        return ConfigError(f"{loc}: {where}: {msg}")

    def check(self, value: Any, tp: Any, table: Sequence[str], key: str) -> Any:
        origin = typing.get_origin(tp)
        args = typing.get_args(tp)
        if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
            if value is None:
                return None
            inner = [a for a in args if a is not type(None)][0]
            return self.check(value, inner, table, key)
        if origin is tuple:
            if not isinstance(value, list):
                raise self.fail(table, key, f"expected a list, got {type(value).__name__}")
            return tuple(self.check(v, args[0], table, key) for v in value)
        if tp is bool:
            ok = isinstance(value, bool)
        elif tp is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif tp is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif tp is str:
            ok = isinstance(value, str)
        else:
            ok = True
        if not ok:
            raise self.fail(table, key, f"expected {getattr(tp, '__name__', tp)}, got {type(value).__name__}")
        return value

    def build(self, cls, raw: Any, table: Sequence[str], skip: Sequence[str] = ()):
        if not isinstance(raw, dict):
            raise self.fail(table, None, "expected a table")
        hints = typing.get_type_hints(cls)
        names = {f.name for f in fields(cls)} - set(skip)
        for k in raw:
            if k not in names:
                raise self.fail(table, k, f"unknown field (allowed: {', '.join(sorted(names))})")
        kw = {}
        for f in fields(cls):
            if f.name in skip or f.name not in raw:
                if f.name not in skip and f.default is MISSING and f.default_factory is MISSING:
                    raise self.fail(table, None, f"missing required field {f.name!r}")
                continue
            kw[f.name] = self.check(raw[f.name], hints[f.name], table, f.name)
        try:
            return cls(**kw)
        except (ConfigError, ValueError, TypeError) as e:
            raise self.fail(table, None, str(e)) from e


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    """Parse and cross-check an experiment config; errors carry ``path:line``."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigError(f"{path}:{m.group(1) if m else '?'}: {e}") from e
    sc = _Schema(text, path)
    allowed = {"schema_version", "name", "seeds", "eval_modes", "out", "workers",
               "dataset", "teacher", "student", "splits", "regimes", "analysis"}
    for k in raw:
        if k not in allowed:
            raise sc.fail((), k, f"unknown top-level field (allowed: {', '.join(sorted(allowed))})")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise sc.fail((), "schema_version", f"expected schema_version = {SCHEMA_VERSION}, got {version!r}")
    name = sc.check(raw.get("name", Path(path).stem), str, (), "name")
    seeds = sc.check(raw.get("seeds", [0]), tuple[int, ...], (), "seeds")
    if not seeds or len(set(seeds)) != len(seeds):
        raise sc.fail((), "seeds", "seeds must be a non-empty list of distinct integers")
    modes = sc.check(raw.get("eval_modes", ["std"]), tuple[str, ...], (), "eval_modes")
    for m in modes:
        if m not in EVAL_MODES:
            raise sc.fail((), "eval_modes", f"unknown eval mode {m!r}; expected one of {EVAL_MODES}")
    out = sc.check(raw.get("out", f"runs/{name}"), str, (), "out")
    workers = sc.check(raw.get("workers", 1), int, (), "workers")
    if workers < 1:
        raise sc.fail((), "workers", "workers must be >= 1")

    dataset = sc.build(DatasetSection, raw.get("dataset", {}), ("dataset",))
    try:
        dataset.generator().validate()
    except ConfigError as e:
        raise sc.fail(("dataset",), None, str(e)) from e
    teacher = sc.build(TeacherSection, raw.get("teacher", {}), ("teacher",))
    student = sc.build(StudentSection, raw.get("student", {}), ("student",))
    if student.preset not in PRESETS:
        raise sc.fail(("student",), "preset", f"unknown preset {student.preset!r}; expected one of {tuple(PRESETS)}")

    splits = {}
    for sname, sraw in (raw.get("splits") or {}).items():
        splits[sname] = sc.build(SplitSection, sraw, ("splits", sname))
    if not splits:
        raise sc.fail((), None, "at least one [splits.<name>] table is required")

    regimes = {}
    for rname, rraw in (raw.get("regimes") or {}).items():
        table = ("regimes", rname)
        if rname in (TEXT_ONLY, TEACHER_ROW):
            raise sc.fail(table, None, f"regime name {rname!r} is reserved")
        if not isinstance(rraw, dict):
            raise sc.fail(table, None, "expected a table")
        draw = rraw.get("distill", {})
        if rraw.get("kind", "baseline") in ("baseline", "second_stage_pretrain") and isinstance(draw, dict):
            draw = {"w": 0.0, **draw}  # these kinds carry no distillation terms
        distill = sc.build(DistillConfig, draw, (*table, "distill"))
        sec = sc.build(RegimeSection, {k: v for k, v in rraw.items() if k != "distill"}, table, skip=("distill",))
        sec = replace(sec, distill=distill)
        if sec.kind not in REGIMES:
            raise sc.fail(table, "kind", f"unknown regime kind {sec.kind!r}; expected one of {REGIMES}")
        if sec.split not in splits:
            raise sc.fail(table, "split", f"undefined split {sec.split!r}; defined: {', '.join(splits)}")
        if sec.unlabeled_split not in (None, "unlabeled_pool"):
            raise sc.fail(table, "unlabeled_split", "only 'unlabeled_pool' is available as an unlabeled split")
        if sec.kind == "semi_supervised" and sec.unlabeled_split is None:
            sec = replace(sec, unlabeled_split="unlabeled_pool")
        try:
            sec.spec(0)
        except ConfigError as e:
            raise sc.fail(table, None, str(e)) from e
        regimes[rname] = sec
    if not regimes:
        raise sc.fail((), None, "at least one [regimes.<name>] table is required")

    analysis = sc.build(AnalysisSection, raw.get("analysis", {}), ("analysis",))
    for key in ("trace_regimes", "ensemble_regimes"):
        for r in getattr(analysis, key):
            if r not in regimes:
                raise sc.fail(("analysis",), key, f"undefined regime {r!r}")
    if analysis.text_only_regime is not None and analysis.text_only_regime not in regimes:
        raise sc.fail(("analysis",), "text_only_regime", f"undefined regime {analysis.text_only_regime!r}")
    if analysis.ensemble_regimes and analysis.ensemble_size > len(seeds):
        raise sc.fail(("analysis",), "ensemble_size", "ensemble_size exceeds the number of seeds")
    if not 0.0 < analysis.im_gamma < 1.0:
        raise sc.fail(("analysis",), "im_gamma", "im_gamma must lie in (0, 1)")
    for r in regimes.values():
        plan = splits[r.split]
        if plan.regime == "zero_shot" and r.epochs > 0:
            raise sc.fail(("splits", r.split), "regime", "zero_shot splits have no labeled data to train on")
    return ExperimentConfig(name, seeds, modes, out, dataset, teacher, student, splits, regimes, analysis,
                            workers, text)


def load_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e}") from e
    return parse_config(text, str(path))


def validate(path: Path | str, out: Path | str | None = None) -> list[str]:
    """Schema and cross-reference checks; returns a human-readable summary."""
    cfg = load_config(path)
    root = resolve_out(cfg, out)
    probe = root if root.exists() else next((p for p in root.parents if p.exists()), Path("."))
    if not os.access(probe, os.W_OK):
        raise ConfigError(f"{path}: out: output directory {root} is not writable")
    lines = [f"config {cfg.name}: schema v{SCHEMA_VERSION} ok",
             f"seeds: {list(cfg.seeds)}", f"eval modes: {list(cfg.eval_modes)}",
             f"splits: {', '.join(cfg.splits)}",
             f"regimes: {', '.join(f'{n} ({r.kind} on {r.split})' for n, r in cfg.regimes.items())}",
             f"output: {root}"]
    return lines


def resolve_out(cfg: ExperimentConfig, out: Path | str | None = None) -> Path:
    if out is not None:
        return Path(out)
    env = os.environ.get("TDLAB_OUT")
    return Path(env) if env else Path(cfg.out)


# ---------------------------------------------------------------------- run directory


@dataclass
class RunDir:
    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    def ensure(self) -> "RunDir":
        for d in RUN_DIRS:
            (self.root / d).mkdir(parents=True, exist_ok=True)
        return self

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def teacher(self) -> Path:
        return self.root / "checkpoints" / "teacher"

    def model(self, regime: str, seed: int) -> Path:
        return self.root / "checkpoints" / regime / f"seed{seed}"

    def train_log(self, regime: str, seed: int) -> Path:
        return self.root / "logs" / f"{regime}_seed{seed}.csv"

    def metrics(self, regime: str, seed: int) -> Path:
        return self.root / "reports" / "metrics" / regime / f"seed{seed}.json"

    def failure(self, regime: str, seed: int) -> Path:
        return self.root / "reports" / "metrics" / regime / f"seed{seed}.FAILED.json"

    def mi(self, regime: str, seed: int) -> Path:
        return self.root / "reports" / "mi" / f"{regime}_seed{seed}.csv"

    def traces(self, regime: str, seed: int) -> Path:
        return self.root / "traces" / f"{regime}_seed{seed}.jsonl"


class _Cache:
    """Per-process memo of artifacts loaded from the run directory."""

    def __init__(self) -> None:
        self.dataset: dict[str, Dataset] = {}
        self.teacher: dict[str, TeacherModel] = {}
        self.ctx: dict[tuple, DistillContext] = {}
        self.cooc: dict[str, CooccurrenceStats] = {}


_CACHE = _Cache()


def _setup_logging(rd: RunDir) -> None:
    path = str(rd.root / "logs" / "run.log")
    root = logging.getLogger("tdlab")
    if not any(getattr(h, "baseFilename", None) == os.path.abspath(path) for h in root.handlers):
        h = logging.FileHandler(path)
        h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(h)
        root.setLevel(logging.INFO)


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    tmp.replace(path)


def stage_generate(cfg: ExperimentConfig, rd: RunDir) -> Dataset:
    fp = cfg.fingerprint("dataset")
    marker = rd.data / "fingerprint.json"
    if marker.exists() and json.loads(marker.read_text()).get("fingerprint") == fp:
        return load_data(rd)
    ds = generate_dataset(cfg.dataset.generator(), cfg.dataset.seed)
    save_dataset(ds, rd.data)
    _write_json(marker, {"fingerprint": fp, "digest": dataset_digest(ds)})
    log.info("generated dataset %s", fp)
    _CACHE.dataset[str(rd.root)] = ds
    return ds


def load_data(rd: RunDir) -> Dataset:
    key = str(rd.root)
    if key not in _CACHE.dataset:
        if not (rd.data / "generator.json").exists():
            raise ValidationError(f"no dataset in {rd.data}; run `generate` first")
        _CACHE.dataset[key] = load_dataset(rd.data)
    return _CACHE.dataset[key]


def stage_pretrain_teacher(cfg: ExperimentConfig, rd: RunDir) -> TeacherModel:
    fp = cfg.fingerprint("dataset", "teacher")
    if (rd.teacher / "manifest.json").exists() and read_manifest(rd.teacher)["extra"].get("fingerprint") == fp:
        return load_teacher(rd)
    ds = load_data(rd)
    t = cfg.teacher
    torch.manual_seed(t.seed)
    start = time.perf_counter()
    model, plog = pretrain_contrastive(ds, t.model_config(len(ds.vocab), ds.config), t.seed, steps=t.steps,
                                       batch_size=t.batch_size, lr=t.lr, extra_scenes=t.extra_scenes,
                                       hard_negatives=t.hard_negatives)
    secs = time.perf_counter() - start
    save_checkpoint(model, rd.teacher, seed=t.seed, extra={"fingerprint": fp})
    _write_json(rd.root / "logs" / "teacher.json",
                {"losses": plog.losses, "heldout_retrieval": plog.heldout_retrieval, "seconds": secs})
    _CACHE.teacher[str(rd.root)] = model
    return model


def load_teacher(rd: RunDir) -> TeacherModel:
    key = str(rd.root)
    if key not in _CACHE.teacher:
        _CACHE.teacher[key] = load_checkpoint(rd.teacher)
    return _CACHE.teacher[key]


def _splits(cfg: ExperimentConfig, ds: Dataset, split: str) -> Splits:
    return make_splits(ds, cfg.splits[split].plan())


def _context(cfg: ExperimentConfig, rd: RunDir, split: str, m: int) -> DistillContext:
    key = (str(rd.root), split, m)
    if key not in _CACHE.ctx:
        ds = load_data(rd)
        sp = _splits(cfg, ds, split)
        pool = sp.train_subset + sp.unlabeled_pool
        g = ds.config
        _CACHE.ctx[key] = DistillContext.build(load_teacher(rd), pool, pool, ds.vocab, m, g.n_shapes, g.n_colors,
                                               cfg.dataset.seed, g.alias_rate)
    return _CACHE.ctx[key]


def init_student(cfg: ExperimentConfig, ds: Dataset, seed: int) -> StudentModel:
    s = cfg.student
    over = {k: v for k, v in (("d_model", s.d_model), ("layers", s.layers), ("heads", s.heads), ("d_ff", s.d_ff))
            if v is not None}
    d_model = over.get("d_model", PRESETS[s.preset].get("d_model", 32))
    teacher_dim = cfg.teacher.d_embed if cfg.teacher.d_embed != d_model else None
    torch.manual_seed(seed)
    return StudentModel(preset(s.preset, len(ds.vocab), ds.config.n_shapes, ds.config.n_colors, head=s.head,
                               text_feature_layer=s.text_feature_layer, teacher_dim=teacher_dim, **over))


def stage_train(cfg: ExperimentConfig, rd: RunDir, regime: str, seed: int) -> StudentModel:
    fp = cfg.regime_fingerprint(regime)
    path = rd.model(regime, seed)
    if (path / "manifest.json").exists() and read_manifest(path)["extra"].get("fingerprint") == fp:
        return load_checkpoint(path)
    sec = cfg.section(regime)
    spec = sec.spec(seed)
    ds = load_data(rd)
    sp = _splits(cfg, ds, sec.split)
    needs_teacher = spec.distill.base_weight > 0 or spec.uses_af_stage
    teacher = load_teacher(rd) if needs_teacher else None
    ctx = _context(cfg, rd, sec.split, spec.distill.m) if needs_teacher else None
    s0 = init_student(cfg, ds, seed)
    torch.manual_seed(seed)
    start = time.perf_counter()
    model, tlog = train(spec, teacher, s0, sp, ctx=ctx, vocab=ds.vocab)
    secs = time.perf_counter() - start
    if teacher is not None and tlog.teacher_digest_before != tlog.teacher_digest_after:
        raise ValidationError("teacher parameters changed during student training")
    tlog.to_csv(rd.train_log(regime, seed))
    save_checkpoint(model, path, seed=seed, extra={
        "fingerprint": fp, "regime": regime, "train_seconds": secs,
        "best_epoch": tlog.best_epoch, "best_val_accuracy": tlog.best_val_accuracy, "log_digest": tlog.digest()})
    log.info("trained %s seed %d in %.1fs (best epoch %s)", regime, seed, secs, tlog.best_epoch)
    return model


def _cooccurrence(rd: RunDir) -> CooccurrenceStats:
    key = str(rd.root)
    if key not in _CACHE.cooc:
        ds = load_data(rd)
        _CACHE.cooc[key] = CooccurrenceStats.build(ds.train, ds.vocab)
    return _CACHE.cooc[key]


def stage_evaluate(cfg: ExperimentConfig, rd: RunDir, regime: str, seed: int,
                   modes: Sequence[str] | None = None) -> dict[str, MetricsReport]:
    modes = tuple(modes or cfg.eval_modes)
    ds = load_data(rd)
    g = ds.config
    if regime == TEACHER_ROW:
        model = load_teacher(rd)
        meta: dict = {"split": None}
    else:
        path = rd.model(regime, seed)
        if not (path / "manifest.json").exists():
            raise ValidationError(f"no checkpoint for {regime} seed {seed}; run `train` first")
        model = load_checkpoint(path)
        extra = read_manifest(path)["extra"]
        meta = {"split": cfg.section(regime).split, "train_seconds": extra.get("train_seconds"),
                "best_epoch": extra.get("best_epoch"), "fingerprint": extra.get("fingerprint")}
    text_only = None
    if "im" in modes:
        tpath = rd.model(TEXT_ONLY, seed)
        if not (tpath / "manifest.json").exists():
            raise ValidationError(f"im evaluation needs the text-only model for seed {seed}")
        text_only = load_checkpoint(tpath)
    reports = {}
    for mode in modes:
        reports[mode] = evaluate(model, ds.test, mode, vocab=ds.vocab, n_shapes=g.n_shapes, n_colors=g.n_colors,
                                 cooccurrence=_cooccurrence(rd) if mode == "em" else None,
                                 text_only=text_only, gamma=cfg.analysis.im_gamma)
    out = rd.metrics(regime, seed)
    prev = json.loads(out.read_text()) if out.exists() else {"modes": {}}
    modes_json = dict(prev.get("modes", {}))
    modes_json.update({m: r.to_json() for m, r in reports.items()})
    _write_json(out, {"regime": regime, "seed": seed, **meta, "modes": modes_json})
    rd.failure(regime, seed).unlink(missing_ok=True)
    return reports


def stage_analyze(cfg: ExperimentConfig, rd: RunDir, regime: str, seed: int) -> MITable | None:
    ds = load_data(rd)
    g = ds.config
    model = load_checkpoint(rd.model(regime, seed))
    table = None
    if cfg.analysis.mi:
        probe = list(ds.test[: cfg.analysis.probe_size])
        table = modality_importance(model, probe, g.n_shapes, g.n_colors)
        table.to_csv(rd.mi(regime, seed))
        table.render(rd.mi(regime, seed).parent, f"{regime}_seed{seed}")
    if regime in cfg.analysis.trace_regimes and cfg.analysis.traces > 0:
        sec = cfg.regimes[regime]
        ctx = _context(cfg, rd, sec.split, sec.distill.m)
        before = init_student(cfg, ds, seed)
        records = [attention_trace(model, inst, load_teacher(rd), ctx.corpus, ds.vocab, m=sec.distill.m,
                                   before=before, n_shapes=g.n_shapes, n_colors=g.n_colors)
                   for inst in ds.test[: cfg.analysis.traces]]
        write_traces(rd.traces(regime, seed), records)
    return table


def stage_ensemble(cfg: ExperimentConfig, rd: RunDir) -> dict:
    ds = load_data(rd)
    g = ds.config
    out = {}
    for regime in cfg.analysis.ensemble_regimes:
        seeds = cfg.seeds[: cfg.analysis.ensemble_size]
        models = [load_checkpoint(rd.model(regime, s)) for s in seeds]
        pred, _ = ensemble_predict(models, list(ds.test), g.n_shapes, g.n_colors)
        gold = torch.tensor([i.gold_index for i in ds.test])
        singles = [evaluate(m, ds.test, "std", vocab=ds.vocab, n_shapes=g.n_shapes, n_colors=g.n_colors).accuracy
                   for m in models]
        out[regime] = {"seeds": list(seeds), "ensemble_accuracy": float((pred == gold).double().mean()),
                       "single_accuracies": singles}
    _write_json(rd.root / "reports" / "ensemble.json", out)
    return out


def stage_bias(cfg: ExperimentConfig, rd: RunDir) -> dict:
    """Overlap statistics of the test split before and after explicit mitigation."""
    ds = load_data(rd)
    before = bias_statistics(ds.test, ds.vocab)
    em, entries = explicit_mitigation(ds.test, _cooccurrence(rd), synonym_table(ds.vocab), ds.vocab)
    replaced = sorted({ds.vocab.tokens[e.old] for e in entries if e.new is not None})
    after = bias_statistics(em, ds.vocab, replaced)
    out = {"standard": before.to_json(), "explicit_mitigation": after.to_json()}
    _write_json(rd.root / "reports" / "bias.json", out)
    return out


# ---------------------------------------------------------------------- orchestration


def _job(args: tuple) -> tuple[str, int, str | None]:
    cfg_text, cfg_path, root, stage, regime, seed = args
    cfg = parse_config(cfg_text, cfg_path)
    rd = RunDir(Path(root))
    _setup_logging(rd)
    try:
        if stage == "train":
            stage_train(cfg, rd, regime, seed)
        elif stage == "evaluate":
            stage_evaluate(cfg, rd, regime, seed)
        elif stage == "analyze":
            stage_analyze(cfg, rd, regime, seed)
        return regime, seed, None
    except Exception:  # noqa: BLE001 - recorded as a failed run, other runs continue
        return regime, seed, traceback.format_exc()


def _fan_out(cfg: ExperimentConfig, cfg_path: str, rd: RunDir, stage: str, jobs: list[tuple[str, int]]) -> list:
    args = [(cfg.source, cfg_path, str(rd.root), stage, r, s) for r, s in jobs]
    if cfg.workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_job, args))
    return [_job(a) for a in args]


def run(path: Path | str, out: Path | str | None = None) -> int:
    """Execute the full matrix; returns a process exit code (0 = all runs succeeded)."""
    cfg = load_config(path)
    rd = RunDir(resolve_out(cfg, out)).ensure()
    _setup_logging(rd)
    (rd.root / "config.toml").write_text(cfg.source)
    timings: dict[str, float] = {}
    start = time.perf_counter()
    stage_generate(cfg, rd)
    timings["generate"] = time.perf_counter() - start
    needs_teacher = cfg.analysis.teacher_zero_shot or any(
        r.distill.base_weight > 0 or r.spec(0).uses_af_stage for r in cfg.regimes.values())
    if needs_teacher:
        t = time.perf_counter()
        stage_pretrain_teacher(cfg, rd)
        timings["pretrain_teacher"] = time.perf_counter() - t

    failed: dict[tuple[str, int], str] = {}
    for regime, seed, err in _fan_out(cfg, str(path), rd, "train", cfg.train_jobs()):
        if err:
            failed[(regime, seed)] = err
    eval_jobs = [(r, s) for s in cfg.seeds for r in cfg.regimes
                 if (r, s) not in failed and (TEXT_ONLY, s) not in failed]
    for regime, seed, err in _fan_out(cfg, str(path), rd, "evaluate", eval_jobs):
        if err:
            failed[(regime, seed)] = err
    if cfg.analysis.teacher_zero_shot:
        try:
            # the teacher is seed independent; it is stored under the first seed
            stage_evaluate(cfg, rd, TEACHER_ROW, cfg.seeds[0],
                           [m for m in cfg.eval_modes if m != "im" or cfg.needs_text_only()])
        except Exception:  # noqa: BLE001
            failed[(TEACHER_ROW, cfg.seeds[0])] = traceback.format_exc()
    ana_jobs = [(r, s) for r, s in eval_jobs if (r, s) not in failed]
    for regime, seed, err in _fan_out(cfg, str(path), rd, "analyze", ana_jobs):
        if err:
            failed[(regime, seed)] = err
    ok_ens = all(all((r, s) not in failed for s in cfg.seeds[: cfg.analysis.ensemble_size])
                 for r in cfg.analysis.ensemble_regimes)
    if cfg.analysis.ensemble_regimes and ok_ens:
        stage_ensemble(cfg, rd)
    stage_bias(cfg, rd)
    for (regime, seed), err in failed.items():
        log.error("run %s seed %d failed:\n%s", regime, seed, err)
        _write_json(rd.failure(regime, seed), {"regime": regime, "seed": seed, "error": err})
    timings["total"] = time.perf_counter() - start
    _write_json(rd.root / "logs" / "timings.json", timings)
    report(rd.root)
    return 1 if failed else 0


# ---------------------------------------------------------------------- report


@dataclass
class Summary:
    runs: list[dict]
    missing: list[str]
    failed: list[str]
    table: dict[str, dict[str, tuple[float, float, int]]]  # row -> column -> (mean, std, n)
    mi: dict[str, dict[str, float]]
    columns: list[str]


def _expected_runs(root: Path) -> list[tuple[str, int]]:
    cfg_path = root / "config.toml"
    if not cfg_path.exists():
        return []
    try:
        cfg = load_config(cfg_path)
    except ConfigError:
        return []
    return [(r, s) for s in cfg.seeds for r in cfg.regimes]


def collect(run_dir: Path | str) -> Summary:
    """Aggregate raw metric files across seeds (mean and population std)."""
    root = Path(run_dir)
    metrics_dir = root / "reports" / "metrics"
    runs = []
    failed = []
    if metrics_dir.exists():
        for f in sorted(metrics_dir.glob("*/seed*.json")):
            if f.name.endswith(".FAILED.json"):
                failed.append(f"{f.parent.name} {f.name.split('.')[0]}")
                continue
            runs.append(json.loads(f.read_text()))
    present = {(r["regime"], r["seed"]) for r in runs}
    missing = [f"{r} seed{s}" for r, s in _expected_runs(root) if (r, s) not in present]
    cells: dict[str, dict[str, list[float]]] = {}
    columns: list[str] = []
    for r in sorted(runs, key=lambda r: (r["regime"], r["seed"])):
        for mode, rep in r["modes"].items():
            col = f"{r['split'] or 'zero_shot'}/{mode}"
            if col not in columns:
                columns.append(col)
            cells.setdefault(r["regime"], {}).setdefault(col, []).append(float(rep["accuracy"]))
    order = {m: i for i, m in enumerate(EVAL_MODES)}
    columns.sort(key=lambda c: (c.split("/")[0], order.get(c.split("/")[1], 99)))
    table = {row: {c: (float(np.mean(v)), float(np.std(v)), len(v)) for c, v in cols.items()}
             for row, cols in cells.items()}
    mi: dict[str, dict[str, float]] = {}
    mi_dir = root / "reports" / "mi"
    if mi_dir.exists():
        gaps: dict[str, list[float]] = {}
        vis: dict[str, list[float]] = {}
        for f in sorted(mi_dir.glob("*_seed*.csv")):
            regime = f.stem.rsplit("_seed", 1)[0]
            t = MITable.from_csv(f)
            gaps.setdefault(regime, []).append(t.gap())
            vis.setdefault(regime, []).append(float(t.per_layer_mean_vision.mean()))
        mi = {r: {"gap_mean": float(np.mean(g)), "gap_std": float(np.std(g)), "vision_mean": float(np.mean(vis[r])),
                  "n": len(g)} for r, g in gaps.items()}
    return Summary(runs, missing, failed, table, mi, columns)


def _row_order(cfg_rows: Sequence[str], rows: Sequence[str]) -> list[str]:
    ordered = [r for r in cfg_rows if r in rows]
    return ordered + sorted(r for r in rows if r not in ordered)


def report(run_dir: Path | str) -> Summary:
    """Write reports/results.{csv,md} and return the aggregated summary."""
    root = Path(run_dir)
    s = collect(root)
    cfg_rows = list(dict.fromkeys([TEACHER_ROW] + [r for r, _ in _expected_runs(root)]))
    rows = _row_order(cfg_rows, list(s.table))
    (root / "reports").mkdir(parents=True, exist_ok=True)
    with (root / "reports" / "results.csv").open("w") as fh:
        fh.write("regime," + ",".join(f"{c} mean,{c} std,{c} n" for c in s.columns) + "\n")
        for r in rows:
            cells = []
            for c in s.columns:
                if c in s.table[r]:
                    m, sd, n = s.table[r][c]
                    cells += [f"{m:.6f}", f"{sd:.6f}", str(n)]
                else:
                    cells += ["", "", "0"]
            fh.write(r + "," + ",".join(cells) + "\n")
    md = ["# Results", "", f"{len(s.runs)} runs aggregated (accuracy, mean ± std over seeds).", ""]
    if s.columns:
        md.append("| regime | " + " | ".join(s.columns) + " |")
        md.append("|---" * (len(s.columns) + 1) + "|")
        for r in rows:
            cells = []
            for c in s.columns:
                if c in s.table[r]:
                    m, sd, n = s.table[r][c]
                    cells.append(f"{100 * m:.2f} ± {100 * sd:.2f} (n={n})")
                else:
                    cells.append("")
            md.append(f"| {r} | " + " | ".join(cells) + " |")
    if s.mi:
        md += ["", "## Modality importance", "", "| regime | mean abs(MI_v - MI_t) | mean MI_v | n |", "|---|---|---|---|"]
        for r in _row_order(cfg_rows, list(s.mi)):
            v = s.mi[r]
            md.append(f"| {r} | {v['gap_mean']:.4f} ± {v['gap_std']:.4f} | {v['vision_mean']:.4f} | {v['n']} |")
    if s.failed:
        md += ["", "## FAILED runs (partial results)", ""] + [f"- {f}" for f in s.failed]
    if s.missing:
        md += ["", "## Missing runs", ""] + [f"- {m}" for m in s.missing]
    (root / "reports" / "results.md").write_text("\n".join(md) + "\n")
    return s


def results_digest(run_dir: Path | str) -> str:
    return hashlib.sha256((Path(run_dir) / "reports" / "results.csv").read_bytes()).hexdigest()
