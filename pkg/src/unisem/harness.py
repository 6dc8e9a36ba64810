"""Experiment orchestration: the five-system comparison, evaluation and reports."""

from __future__ import annotations

import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

from .datagen.generate import Corpus, stable_seed
from .errors import CheckpointError, ConfigError, OrchestrationError, ReportError
from .evaluation import MatchRecord, decode_top, per_domain_accuracy, score
from .model import Parser, build_parser
from .training import TrainConfig, TrainLog, pretrain_then, teacher_traces, train_distill, train_reinforce, \
    train_supervised
from .vocab import Vocab

log = logging.getLogger(__name__)

SYSTEMS = ("weak-independent", "weak-combined", "distill-independent", "distill-combined", "supervised")
TEACHER_SYSTEMS = ("distill-independent", "distill-combined")
DESK_LR = 0.005
DESK_EPOCHS = 30


@dataclass
class RoleConfig:
    """Model size and training schedule for one role (teacher, student, skyline)."""

    num_layers: int = 1
    hidden_size: int = 100
    embed_size: int = 64
    train: TrainConfig = field(default_factory=TrainConfig)


def _default_teacher() -> RoleConfig:
    return RoleConfig(num_layers=1, hidden_size=300, embed_size=64)


def _default_student() -> RoleConfig:
    return RoleConfig(num_layers=2, hidden_size=300, embed_size=64)


@dataclass
class ExperimentConfig:
    corpus: str | None = None
    system: str = "distill-combined"
    domains: list[str] | None = None
    teacher: RoleConfig = field(default_factory=_default_teacher)
    student: RoleConfig = field(default_factory=_default_student)
    supervised: RoleConfig = field(default_factory=RoleConfig)
    beam_width: int = 5
    eval_beam_width: int | None = None  # defaults to beam_width (1 for the skyline)
    reward_mode: str = "denotation"
    parallel_fraction: float = 0.0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    grammar: bool = True
    teacher_dir: str | None = None  # checkpoints at {teacher_dir}/{domain}/seed{seed}/model.json
    out: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}; expected one of {SYSTEMS}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not 0.0 <= self.parallel_fraction <= 1.0:
            raise ConfigError("parallel_fraction must lie in [0, 1]")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be positive")
        for name in ("teacher", "student", "supervised"):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, role_from_dict(value))

    def eval_width(self) -> int:
        if self.eval_beam_width is not None:
            return self.eval_beam_width
        return 1 if self.system == "supervised" else self.beam_width

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: Mapping) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**dict(doc))


def desk_config(**overrides) -> ExperimentConfig:
    """Pinned small-model settings that run the full comparison on a single CPU core.

    Teachers and the skyline are 1x100, the student 2x64, so the student stays
    smaller than the three teachers together.
    """
    train = TrainConfig(lr=DESK_LR, max_epochs=DESK_EPOCHS)
    overrides.setdefault("teacher", RoleConfig(1, 100, 64, train))
    overrides.setdefault("student", RoleConfig(2, 64, 64, train))
    overrides.setdefault("supervised", RoleConfig(1, 100, 64, train))
    return ExperimentConfig(**overrides)


def role_from_dict(doc: Mapping) -> RoleConfig:
    doc = dict(doc)
    known = {f.name for f in fields(RoleConfig)}
    if set(doc) - known:
        raise ConfigError(f"unknown role config keys: {sorted(set(doc) - known)}")
    train = doc.pop("train", {})
    if isinstance(train, Mapping):
        tknown = {f.name for f in fields(TrainConfig)}
        if set(train) - tknown:
            raise ConfigError(f"unknown training config keys: {sorted(set(train) - tknown)}")
        train = TrainConfig(**train)
    return RoleConfig(train=train, **doc)


def apply_overrides(doc: dict, overrides: Mapping[str, object]) -> dict:
    """Set flat dotted keys (``teacher.train.lr``) inside a nested dict."""
    out = json.loads(json.dumps(doc))
    for key, value in overrides.items():
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {key!r} does not name a config section")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return out


# --------------------------------------------------------------------------
# Results


@dataclass
class RunResult:
    system: str
    seed: int
    per_domain: dict[str, float]
    average: float

    @classmethod
    def from_accuracies(cls, system: str, seed: int, per_domain: Mapping[str, float]) -> RunResult:
        per = {d: float(per_domain[d]) for d in sorted(per_domain)}
        return cls(system, seed, per, sum(per.values()) / len(per))

    def to_json(self) -> dict:
        return {"system": self.system, "seed": self.seed, "per_domain": self.per_domain, "average": self.average}

    @classmethod
    def from_json(cls, doc: Mapping) -> RunResult:
        return cls(doc["system"], int(doc["seed"]), dict(doc["per_domain"]), float(doc["average"]))


@dataclass
class ResultTable:
    """Per-seed test accuracies of one system, plus the median over seeds."""

    system: str
    runs: list[RunResult]
    parallel_fraction: float = 0.0
    label: str | None = None

    def __post_init__(self):
        for r in self.runs:
            for v in r.per_domain.values():
                if not 0.0 <= v <= 100.0:
                    raise ReportError(f"accuracy {v} outside [0, 100]")

    @property
    def name(self) -> str:
        return self.label or self.system

    @property
    def domains(self) -> list[str]:
        return sorted(self.runs[0].per_domain) if self.runs else []

    def median(self) -> dict[str, float]:
        return {d: statistics.median(r.per_domain[d] for r in self.runs) for d in self.domains}

    def average(self) -> float:
        med = self.median()
        return sum(med.values()) / len(med)

    def to_json(self) -> dict:
        return {"system": self.system, "label": self.label, "parallel_fraction": self.parallel_fraction,
                "runs": [r.to_json() for r in self.runs],
                "median": {"per_domain": self.median(), "average": self.average()}}

    @classmethod
    def from_json(cls, doc: Mapping) -> ResultTable:
        return cls(doc["system"], [RunResult.from_json(r) for r in doc["runs"]],
                   float(doc.get("parallel_fraction", 0.0)), doc.get("label"))


# --------------------------------------------------------------------------
# Evaluation


@dataclass
class Evaluation:
    records: list[MatchRecord]

    @property
    def per_domain(self) -> dict[str, float]:
        return per_domain_accuracy(self.records)

    @property
    def per_domain_soft(self) -> dict[str, float]:
        groups: dict[str, list[float]] = {}
        for r in self.records:
            groups.setdefault(r.domain, []).append(r.soft)
        return {d: sum(v) / len(v) for d, v in sorted(groups.items())}


def expected_target_vocab(corpus: Corpus, domains: Sequence[str]) -> Vocab:
    return Vocab.target(corpus.target_tokens(domains))


def check_vocab(parser: Parser, corpus: Corpus) -> None:
    """Raise CheckpointError if the checkpoint's program vocabulary disagrees with the corpus."""
    domains = parser.meta.get("domains") or corpus.domain_ids
    missing = [d for d in domains if d not in corpus.domains]
    if missing:
        raise CheckpointError(f"checkpoint domains {missing} are not in the corpus")
    want = expected_target_vocab(corpus, domains).digest()
    have = parser.tgt_vocab.digest()
    if want != have:
        raise CheckpointError(f"vocabulary mismatch: checkpoint {have}, corpus {want}")


def evaluate(parser: Parser, instances: Sequence, kbs: Mapping, beam_width: int = 1,
             corpus: Corpus | None = None) -> Evaluation:
    """Top-1 decode, execute against each instance's own KB, score hard and soft."""
    if corpus is not None:
        check_vocab(parser, corpus)
    return Evaluation(score(instances, decode_top(parser, instances, beam_width), kbs))


# --------------------------------------------------------------------------
# Training cells


def _train_cfg(role: RoleConfig, seed: int, cfg: ExperimentConfig, tag: str) -> TrainConfig:
    return replace(role.train, beam_width=cfg.beam_width, reward_mode=cfg.reward_mode,
                   seed=stable_seed(tag, seed, role.train.seed))


def _new_parser(corpus: Corpus, role: RoleConfig, src_domains: Sequence[str], tgt_domains: Sequence[str],
                seed: int, cfg: ExperimentConfig, tag: str) -> Parser:
    utts = [inst.utterance for d in src_domains for inst in corpus.split("train", [d])]
    kinds = corpus.property_kinds(tgt_domains) if cfg.grammar else None
    return build_parser(utts, corpus.target_tokens(tgt_domains), num_layers=role.num_layers,
                        hidden_size=role.hidden_size, embed_size=role.embed_size, property_kinds=kinds,
                        seed=stable_seed("init", tag, seed),
                        meta={"domains": list(tgt_domains), "role": tag, "system": cfg.system, "seed": seed})


def teacher_path(teacher_dir, domain: str, seed: int) -> Path:
    return Path(teacher_dir) / domain / f"seed{seed}" / "model.json"


def train_teacher(corpus: Corpus, domain: str, seed: int, cfg: ExperimentConfig,
                  log_: TrainLog | None = None) -> Parser:
    """REINFORCE expert for one domain (weak-independent)."""
    kbs = {domain: corpus.kb(domain)}
    parser = _new_parser(corpus, cfg.teacher, [domain], [domain], seed, cfg, f"teacher/{domain}")
    tc = _train_cfg(cfg.teacher, seed, cfg, f"teacher/{domain}")
    train, val = corpus.split("train", [domain]), corpus.split("val", [domain])
    if cfg.parallel_fraction > 0:
        sup = _train_cfg(cfg.supervised, seed, cfg, f"pretrain/{domain}")
        pretrain_then("weak", cfg.parallel_fraction, parser, train, val, kbs, tc, sup, log_=log_)
    else:
        train_reinforce(parser, train, val, kbs, tc, log_)
    return parser


def train_weak_combined(corpus: Corpus, domains: Sequence[str], seed: int, cfg: ExperimentConfig,
                        log_: TrainLog | None = None) -> Parser:
    """One REINFORCE model on the pooled data; rewards use each instance's own KB."""
    kbs = {d: corpus.kb(d) for d in domains}
    parser = _new_parser(corpus, cfg.student, domains, domains, seed, cfg, "weak-combined")
    tc = _train_cfg(cfg.student, seed, cfg, "weak-combined")
    train_reinforce(parser, corpus.split("train", domains), corpus.split("val", domains), kbs, tc, log_)
    return parser


def train_student(corpus: Corpus, teachers: Mapping[str, Parser], all_domains: Sequence[str], seed: int,
                  cfg: ExperimentConfig, role: RoleConfig, log_: TrainLog | None = None) -> Parser:
    """Distil the given teachers into one student over the combined vocabulary of ``all_domains``."""
    domains = list(teachers)
    tag = "student/" + "+".join(domains)
    parser = _new_parser(corpus, role, domains, all_domains, seed, cfg, tag)
    kbs = {d: corpus.kb(d) for d in domains}
    tc = _train_cfg(role, seed, cfg, tag)
    traces = []
    for d in domains:
        traces += teacher_traces(teachers[d], corpus.split("train", [d]), parser.tgt_vocab, tc.temperature)
    train_distill(parser, traces, corpus.split("val", domains), kbs, tc, log_)
    return parser


def run_distill(cfg: ExperimentConfig, corpus: Corpus, teachers: Mapping[str, Parser], seed: int,
                log_: TrainLog | None = None) -> tuple[Parser, Evaluation]:
    """Distil explicitly given teachers (keyed by domain) and score the student on their test splits.

    One teacher gives a distill-independent student with the teacher's size;
    several give the unified distill-combined student.
    """
    for d, t in teachers.items():
        check_vocab(t, corpus)
        if t.meta.get("domains") not in (None, [d]):
            raise ConfigError(f"teacher for {d} was trained on {t.meta.get('domains')}")
    domains = list(teachers)
    role = cfg.student if len(domains) > 1 else cfg.teacher
    cfg = replace(cfg, system="distill-combined" if len(domains) > 1 else "distill-independent")
    student = train_student(corpus, teachers, domains, seed, cfg, role, log_)
    kbs = {d: corpus.kb(d) for d in domains}
    return student, evaluate(student, corpus.split("test", domains), kbs, cfg.eval_width())


def train_supervised_model(corpus: Corpus, domain: str, seed: int, cfg: ExperimentConfig,
                           log_: TrainLog | None = None) -> Parser:
    parser = _new_parser(corpus, cfg.supervised, [domain], [domain], seed, cfg, f"supervised/{domain}")
    tc = _train_cfg(cfg.supervised, seed, cfg, f"supervised/{domain}")
    train_supervised(parser, corpus.split("train", [domain]), corpus.split("val", [domain]), tc, log_)
    return parser


def check_teachers(cfg: ExperimentConfig, domains: Sequence[str], seed: int) -> None:
    if cfg.teacher_dir is None:
        raise OrchestrationError(f"{cfg.system} needs teachers: train weak-independent teachers for "
                                 f"{', '.join(domains)} first and pass teacher_dir")
    missing = [d for d in domains if not teacher_path(cfg.teacher_dir, d, seed).exists()]
    if missing:
        raise OrchestrationError(f"missing teacher checkpoints for seed {seed}: train teachers for "
                                 f"{', '.join(missing)} first (expected under {cfg.teacher_dir})")


def load_teachers(cfg: ExperimentConfig, domains: Sequence[str], seed: int) -> dict[str, Parser]:
    check_teachers(cfg, domains, seed)
    return {d: Parser.load(teacher_path(cfg.teacher_dir, d, seed)) for d in domains}


# --------------------------------------------------------------------------
# Experiment matrix


def _cells(cfg: ExperimentConfig, domains: Sequence[str]) -> list[tuple[str, int]]:
    """(domain or "*", seed) units of work for the configured system."""
    per_domain = cfg.system in ("weak-independent", "distill-independent", "supervised")
    return [(d, s) for s in cfg.seeds for d in (domains if per_domain else ["*"])]


def _run_cell(cfg: ExperimentConfig, corpus: Corpus | None, domains: list[str], cell: tuple[str, int]):
    import threadpoolctl
    with threadpoolctl.threadpool_limits(1):
        return _run_cell_inner(cfg, corpus, domains, cell)


def _run_cell_inner(cfg: ExperimentConfig, corpus: Corpus | None, domains: list[str], cell: tuple[str, int]):
    if corpus is None:
        corpus = Corpus.load(cfg.corpus)
    domain, seed = cell
    tl = TrainLog()
    if cfg.system == "weak-independent":
        parser = train_teacher(corpus, domain, seed, cfg, tl)
    elif cfg.system == "supervised":
        parser = train_supervised_model(corpus, domain, seed, cfg, tl)
    elif cfg.system == "weak-combined":
        parser = train_weak_combined(corpus, domains, seed, cfg, tl)
    elif cfg.system == "distill-independent":
        teachers = load_teachers(cfg, [domain], seed)
        parser = train_student(corpus, teachers, domains, seed, cfg, cfg.teacher, tl)
        parser.meta["domains"] = list(domains)
    else:
        teachers = load_teachers(cfg, domains, seed)
        parser = train_student(corpus, teachers, domains, seed, cfg, cfg.student, tl)
    eval_domains = domains if domain == "*" else [domain]
    kbs = {d: corpus.kb(d) for d in eval_domains}
    ev = evaluate(parser, corpus.split("test", eval_domains), kbs, cfg.eval_width())
    if cfg.out:
        where = cell_dir(cfg.out, domain, seed)
        where.mkdir(parents=True, exist_ok=True)
        parser.save(where / "model.json")
        tl.write(where / "train_log.csv")
        result = RunResult.from_accuracies(cfg.system, seed, ev.per_domain).to_json()
        result["soft"] = ev.per_domain_soft
        (where / "result.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return cell, ev.per_domain, parser.model.num_params()


def cell_dir(out, domain: str, seed: int) -> Path:
    """Checkpoint directory of one cell; per-domain cells match :func:`teacher_path`."""
    return Path(out) / (domain if domain != "*" else "combined") / f"seed{seed}"


@dataclass
class ExperimentOutcome:
    table: ResultTable
    param_counts: dict[tuple[str, int], int]


def run_experiment(cfg: ExperimentConfig, corpus: Corpus | None = None) -> ExperimentOutcome:
    """Train and evaluate one system for every seed (and domain, for per-domain systems)."""
    if corpus is None:
        if cfg.corpus is None:
            raise ConfigError("no corpus given")
        corpus = Corpus.load(cfg.corpus)
    domains = list(cfg.domains or corpus.domain_ids)
    unknown = [d for d in domains if d not in corpus.domains]
    if unknown:
        raise ConfigError(f"domains {unknown} are not in the corpus")
    if cfg.system in TEACHER_SYSTEMS:
        for s in cfg.seeds:  # fail before any work is done
            check_teachers(cfg, domains, s)
    cells = _cells(cfg, domains)
    if cfg.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_cell, [cfg] * len(cells), [corpus] * len(cells),
                                    [domains] * len(cells), cells))
    else:
        results = [_run_cell(cfg, corpus, domains, c) for c in cells]
    per_seed: dict[int, dict[str, float]] = {s: {} for s in cfg.seeds}
    params = {}
    for (domain, seed), acc, n in results:
        per_seed[seed].update(acc)
        params[(domain, seed)] = n
    runs = [RunResult.from_accuracies(cfg.system, s, per_seed[s]) for s in cfg.seeds]
    label = cfg.system if cfg.parallel_fraction == 0 else f"{cfg.system}@{cfg.parallel_fraction:g}"
    table = ResultTable(cfg.system, runs, cfg.parallel_fraction, label)
    if cfg.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / f"{label}.json").write_text(json.dumps(table.to_json(), indent=1))
    return ExperimentOutcome(table, params)


def run_matrix(base: ExperimentConfig, systems: Sequence[str] = SYSTEMS,
               corpus: Corpus | None = None) -> dict[str, ExperimentOutcome]:
    """Run several systems, training weak-independent teachers first when distillation needs them."""
    if base.out is None and any(s in TEACHER_SYSTEMS for s in systems):
        raise ConfigError("distillation systems need an output directory for teacher checkpoints")
    order = sorted(systems, key=lambda s: (s != "weak-independent", SYSTEMS.index(s)))
    if any(s in TEACHER_SYSTEMS for s in order) and "weak-independent" not in order:
        order.insert(0, "weak-independent")
    out = {}
    teacher_dir = str(Path(base.out) / "weak-independent") if base.out else None
    for system in order:
        cfg = replace(base, system=system, teacher_dir=base.teacher_dir or teacher_dir,
                      out=str(Path(base.out) / system) if base.out else None)
        out[system] = run_experiment(cfg, corpus)
    return {s: out[s] for s in order if s in systems or s == "weak-independent"}


def compactness(outcomes: Mapping[str, ExperimentOutcome], seed: int) -> tuple[int, int]:
    """(student parameters, sum of teacher parameters) for one seed."""
    student = outcomes["distill-combined"].param_counts[("*", seed)]
    teachers = sum(n for (d, s), n in outcomes["weak-independent"].param_counts.items() if s == seed)
    return student, teachers


# --------------------------------------------------------------------------
# Reports


def report(tables: Sequence[ResultTable]) -> tuple[str, dict]:
    """Text grid (domains x systems), fraction series, and a JSON document."""
    if not tables:
        raise ReportError("no tables to report")
    domains = tables[0].domains
    for t in tables[1:]:
        if t.domains != domains:
            raise ReportError(f"table {t.name} covers {t.domains}, expected {domains}")
    names = [t.name for t in tables]
    width = max(10, *(len(n) for n in names))
    lines = ["domain".ljust(14) + "".join(n.rjust(width + 2) for n in names)]
    meds = [t.median() for t in tables]
    for d in domains:
        lines.append(d.ljust(14) + "".join(f"{m[d]:.1f}".rjust(width + 2) for m in meds))
    lines.append("average".ljust(14) + "".join(f"{t.average():.1f}".rjust(width + 2) for t in tables))
    series: dict[str, list[dict]] = {}
    for t in tables:
        series.setdefault(t.system, []).append(
            {"fraction": t.parallel_fraction, "per_domain": t.median(), "average": t.average()})
    series = {s: sorted(v, key=lambda p: p["fraction"]) for s, v in series.items() if len(v) > 1}
    if series:
        lines.append("")
        lines.append("accuracy by parallel fraction")
        for s, points in series.items():
            for p in points:
                cells = " ".join(f"{d}={p['per_domain'][d]:.1f}" for d in domains)
                lines.append(f"  {s} {p['fraction']:.2f}: average={p['average']:.1f} {cells}")
    doc = {
        "domains": domains,
        "tables": [t.to_json() for t in tables],
        "results": [r.to_json() for t in tables for r in t.runs],
        "series": series,
    }
    return "\n".join(lines) + "\n", doc


def read_report(doc: Mapping) -> list[ResultTable]:
    return [ResultTable.from_json(t) for t in doc["tables"]]


def resolve_workers(workers: int | None) -> int:
    return workers if workers and workers > 0 else (os.cpu_count() or 1)


def asdict_deep(obj):
    return asdict(obj) if is_dataclass(obj) else obj
