"""Command-line entry point.

    unisem gen-data --spec default --per-domain 300 --seed 17 --out corpus/
    unisem train-teacher --corpus corpus/ --out teachers/
    unisem distill --teachers teachers/recipes,teachers/housing --corpus corpus/ --out student/
    unisem eval --model student/ --corpus corpus/

Progress goes to stderr; everything machine-readable goes to files under --out.
Every run writes resolved_config.json next to its outputs, and feeding that
file back through --config repeats the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .datagen import Corpus, corpus_stats, format_stats, generate_corpus, load_bundle, normalize_external
from .errors import ConfigError, MissingInputError, UnisemError
from .harness import ExperimentConfig, ResultTable, RunResult, apply_overrides, check_vocab, evaluate, report, \
    resolve_workers, run_distill, run_experiment
from .model import Parser
from .training import REWARD_MODES, TrainLog

log = logging.getLogger("unisem")

COMMANDS = ("gen-data", "train-teacher", "train-combined", "distill", "eval", "normalize", "stats", "report")

# flag name -> ExperimentConfig key
EXPERIMENT_FLAGS = {
    "corpus": "corpus",
    "beam_width": "beam_width",
    "reward_mode": "reward_mode",
    "parallel_fraction": "parallel_fraction",
    "workers": "workers",
}
# flags that live outside ExperimentConfig, kept in the snapshot's "args" section
PLAIN_FLAGS = ("spec", "per_domain", "seed", "domain", "teachers", "model", "out", "inputs")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_arg_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="unisem", description="weakly supervised multi-domain semantic parsing")
    sub = top.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    sub.required = True

    def command(name, help_, *flags):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config (nested or flat dotted keys, or a resolved snapshot)")
        for f in flags:
            f(p)
        return p

    spec = lambda p: p.add_argument("--spec", help="bundle JSON, 'default', 'all' or a comma list of domains")
    per_domain = lambda p: p.add_argument("--per-domain", type=int, help="instances per domain")
    seed = lambda p: p.add_argument("--seed", type=int, help="random seed")
    out = lambda p: p.add_argument("--out", help="output directory")
    corpus = lambda p: p.add_argument("--corpus", help="corpus directory")
    domain = lambda p: p.add_argument("--domain", help="domain id (comma list allowed)")
    teachers = lambda p: p.add_argument("--teachers", help="comma list of teacher checkpoints")
    model = lambda p: p.add_argument("--model", help="checkpoint file or directory")
    beam = lambda p: p.add_argument("--beam-width", type=int)
    reward = lambda p: p.add_argument("--reward-mode", choices=REWARD_MODES)
    fraction = lambda p: p.add_argument("--parallel-fraction", type=float)
    workers = lambda p: p.add_argument("--workers", type=int, help="parallel workers (default: all processors)")

    command("gen-data", "generate a synthetic corpus", spec, per_domain, seed, out)
    command("train-teacher", "REINFORCE expert per domain", corpus, domain, seed, out, beam, reward, fraction,
            workers)
    command("train-combined", "one REINFORCE model on the pooled domains", corpus, domain, seed, out, beam,
            reward, workers)
    command("distill", "distil teachers into one student", teachers, corpus, seed, out, beam, workers)
    command("eval", "test accuracy of a checkpoint", model, corpus, domain, beam, out)
    p = command("normalize", "reduce original-form parses to normalized tokens", out)
    p.add_argument("inputs", nargs="*", help="files with one parse per line ('-' for stdin)")
    command("stats", "corpus statistics over the training splits", corpus, out)
    p = command("report", "combine result JSON files into a comparison grid", out)
    p.add_argument("inputs", nargs="*", help="result JSON files or directories to search")
    return top


# --------------------------------------------------------------------------
# Config resolution


def _read_config(path: str | None) -> tuple[dict, dict]:
    """(experiment section, plain-args section) from a config file."""
    if path is None:
        return {}, {}
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"config file {path} not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    if "experiment" in doc or "args" in doc:
        extra = set(doc) - {"command", "experiment", "args"}
        if extra:
            raise ConfigError(f"unknown snapshot keys {sorted(extra)}")
        return dict(doc.get("experiment", {})), dict(doc.get("args", {}))
    return doc, {}


def resolve(args: argparse.Namespace) -> tuple[ExperimentConfig, dict]:
    """Merge defaults, config file and flags (flags win)."""
    exp_doc, plain = _read_config(args.config)
    base = ExperimentConfig().to_json()
    nested = {k: v for k, v in exp_doc.items() if "." not in k}
    dotted = {k: v for k, v in exp_doc.items() if "." in k}
    unknown = set(nested) - set(base)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in nested.items():
        if isinstance(value, dict) and isinstance(base[key], dict):
            base[key] = apply_overrides(base[key], _flatten(value))
        else:
            base[key] = value
    base = apply_overrides(base, dotted)
    flags = {EXPERIMENT_FLAGS[k]: v for k, v in vars(args).items() if k in EXPERIMENT_FLAGS and v is not None}
    base.update(flags)
    unknown_plain = set(plain) - set(PLAIN_FLAGS)
    if unknown_plain:
        raise ConfigError(f"unknown snapshot args {sorted(unknown_plain)}")
    for k in PLAIN_FLAGS:
        v = getattr(args, k, None)
        if v is not None and v != []:
            plain[k] = v
    if plain.get("seed") is not None:
        base["seeds"] = [int(plain["seed"])]
    if "workers" not in exp_doc and "workers" not in flags or not base.get("workers"):
        base["workers"] = resolve_workers(None)
    return ExperimentConfig.from_json(base), plain


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def write_snapshot(out: Path, command: str, cfg: ExperimentConfig, plain: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "experiment": cfg.to_json(), "args": plain}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _require(plain: dict, cfg: ExperimentConfig, *names: str) -> None:
    for n in names:
        have = cfg.corpus if n == "corpus" else plain.get(n)
        if have in (None, ""):
            raise ConfigError(f"--{n.replace('_', '-')} is required")


def _load_corpus(cfg: ExperimentConfig) -> Corpus:
    return Corpus.load(cfg.corpus)


def _domains(plain: dict, corpus: Corpus) -> list[str]:
    if not plain.get("domain"):
        return corpus.domain_ids
    chosen = [d for d in str(plain["domain"]).split(",") if d]
    unknown = [d for d in chosen if d not in corpus.domains]
    if unknown:
        raise ConfigError(f"domains {unknown} are not in the corpus ({', '.join(corpus.domain_ids)})")
    return chosen


def checkpoint_file(path: str, seed: int | None = None) -> Path:
    """Accept a model.json file, a directory holding one, or a per-seed layout."""
    p = Path(path)
    candidates = [p, p / "model.json"]
    if seed is not None:
        candidates.append(p / f"seed{seed}" / "model.json")
    for c in candidates:
        if c.is_file():
            return c
    if p.is_dir():
        found = sorted(p.glob("seed*/model.json"))
        if len(found) == 1:
            return found[0]
    raise MissingInputError(f"no checkpoint at {path}")


# --------------------------------------------------------------------------
# Commands


def cmd_gen_data(args, cfg, plain):
    _require(plain, cfg, "out")
    specs = load_bundle(plain.get("spec", "default"))
    per_domain = int(plain.get("per_domain", 300))
    seed = int(plain.get("seed", 17))
    plain.update(spec=plain.get("spec", "default"), per_domain=per_domain, seed=seed)
    corpus = generate_corpus(specs, per_domain, seed)
    out = Path(plain["out"])
    corpus.save(out)
    stats = corpus_stats(corpus.split("train"))
    (out / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    write_snapshot(out, args.command, cfg, plain)
    log.info("wrote %d instances to %s\n%s", sum(len(corpus.split(s)) for s in ("train", "val", "dev", "test")),
             out, format_stats(stats))


def _train(args, cfg, plain, system):
    _require(plain, cfg, "corpus", "out")
    corpus = _load_corpus(cfg)
    domains = _domains(plain, corpus)
    if system == "weak-independent" and cfg.system == "supervised":
        system = "supervised"  # train-teacher also drives the gold-program skyline
    cfg = replace(cfg, system=system, domains=domains, out=plain["out"])
    write_snapshot(Path(plain["out"]), args.command, cfg, plain)
    outcome = run_experiment(cfg, corpus)
    log.info("%s median test accuracy: %s (average %.1f)", system,
             ", ".join(f"{d}={v:.1f}" for d, v in outcome.table.median().items()), outcome.table.average())


def cmd_distill(args, cfg, plain):
    _require(plain, cfg, "teachers", "corpus", "out")
    corpus = _load_corpus(cfg)
    seed = cfg.seeds[0]
    teachers = {}
    for path in str(plain["teachers"]).split(","):
        t = Parser.load(checkpoint_file(path, seed))
        domains = t.meta.get("domains") or []
        if len(domains) != 1:
            raise ConfigError(f"teacher {path} is not a single-domain model (domains {domains})")
        if domains[0] in teachers:
            raise ConfigError(f"two teachers given for domain {domains[0]}")
        teachers[domains[0]] = t
    out = Path(plain["out"])
    write_snapshot(out, args.command, cfg, plain)
    tl = TrainLog()
    student, ev = run_distill(cfg, corpus, teachers, seed, tl)
    student.save(out / "model.json")
    tl.write(out / "train_log.csv")
    _write_result(out / "result.json", student.meta.get("system", "distill"), seed, ev)
    log.info("student test accuracy: %s", ", ".join(f"{d}={v:.1f}" for d, v in ev.per_domain.items()))


def _write_result(path: Path, system: str, seed: int, ev) -> dict:
    doc = RunResult.from_accuracies(system, seed, ev.per_domain).to_json()
    doc["soft"] = ev.per_domain_soft
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def cmd_eval(args, cfg, plain):
    _require(plain, cfg, "model", "corpus")
    ckpt = checkpoint_file(plain["model"])
    parser = Parser.load(ckpt)
    corpus = _load_corpus(cfg)
    check_vocab(parser, corpus)
    model_domains = parser.meta.get("domains") or corpus.domain_ids
    domains = _domains(plain, corpus) if plain.get("domain") else model_domains
    width = args.beam_width or (1 if parser.meta.get("system") == "supervised" else cfg.beam_width)
    kbs = {d: corpus.kb(d) for d in domains}
    ev = evaluate(parser, corpus.split("test", domains), kbs, width)
    out = Path(plain.get("out") or ckpt.parent)
    plain["beam_width"] = width
    write_snapshot(out, args.command, cfg, plain)
    doc = _write_result(out / "eval.json", parser.meta.get("system", "model"), int(parser.meta.get("seed", 0)), ev)
    log.info("test accuracy: %s (average %.1f)",
             ", ".join(f"{d}={v:.1f}" for d, v in doc["per_domain"].items()), doc["average"])


def _read_lines(inputs):
    for name in inputs or ["-"]:
        if name == "-":
            yield from sys.stdin
        else:
            p = Path(name)
            if not p.exists():
                raise MissingInputError(f"input {name} not found")
            yield from p.read_text().splitlines()


def cmd_normalize(args, cfg, plain):
    _require(plain, cfg, "out")
    out = Path(plain["out"])
    rows = []
    for line in _read_lines(plain.get("inputs")):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        toks, emap = normalize_external(line)
        rows.append({"original": line, "tokens": toks, "entity_map": emap})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "normalized.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    write_snapshot(out, args.command, cfg, plain)
    log.info("normalized %d parses", len(rows))


def cmd_stats(args, cfg, plain):
    _require(plain, cfg, "corpus")
    corpus = _load_corpus(cfg)
    stats = corpus_stats(corpus.split("train"))
    out = Path(plain.get("out") or cfg.corpus)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    log.info("\n%s", format_stats(stats))


def collect_tables(inputs) -> list[ResultTable]:
    """Group result files into tables: table JSONs as-is, per-run results by system."""
    files: list[Path] = []
    for name in inputs:
        p = Path(name)
        if p.is_dir():
            files += sorted(f for f in p.rglob("*.json") if f.name != "resolved_config.json")
        elif p.is_file():
            files.append(p)
        else:
            raise MissingInputError(f"report input {name} not found")
    tables: list[ResultTable] = []
    loose: dict[str, dict[int, RunResult]] = {}
    for f in files:
        try:
            doc = json.loads(f.read_text())
        except json.JSONDecodeError:
            continue
        if not isinstance(doc, dict):
            continue
        if "runs" in doc:
            tables.append(ResultTable.from_json(doc))
        elif {"system", "seed", "per_domain"} <= set(doc):
            run = RunResult.from_json({**doc, "average": doc.get("average", 0.0)})
            merged = loose.setdefault(run.system, {}).setdefault(run.seed, RunResult(run.system, run.seed, {}, 0.0))
            merged.per_domain.update(run.per_domain)
    covered = {t.system for t in tables}  # whole-table files already aggregate their own cells
    for system, runs in sorted(loose.items()):
        if system in covered:
            continue
        tables.append(ResultTable(system, [RunResult.from_accuracies(system, s, r.per_domain)
                                           for s, r in sorted(runs.items())]))
    return tables


def cmd_report(args, cfg, plain):
    _require(plain, cfg, "out")
    tables = collect_tables(plain.get("inputs") or [])
    if not tables:
        raise MissingInputError("no result files found for the report")
    text, doc = report(tables)
    out = Path(plain["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    write_snapshot(out, args.command, cfg, plain)
    log.info("\n%s", text)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": lambda a, c, p: _train(a, c, p, "weak-independent"),
    "train-combined": lambda a, c, p: _train(a, c, p, "weak-combined"),
    "distill": cmd_distill,
    "eval": cmd_eval,
    "normalize": cmd_normalize,
    "stats": cmd_stats,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_arg_parser().parse_args(argv)
        cfg, plain = resolve(args)
        HANDLERS[args.command](args, cfg, plain)
    except UnisemError as exc:
        print(f"unisem: error[{exc.category}]: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"unisem: error[missing-input]: {_one_line(exc)}", file=sys.stderr)
        return MissingInputError.exit_code
    except Exception as exc:  # anything else is a broken invariant
        print(f"unisem: error[internal]: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return UnisemError.exit_code
    return 0


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
