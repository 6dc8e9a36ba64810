"""Synthetic multi-domain corpus: knowledge bases, instances and splits."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import ConfigError, GenerationError, MissingInputError, ProgramParseError
from ..lang import (STRUCTURAL_TOKENS, Denotation, KnowledgeBase, execute, parse_program,
                    serialize)
from .masking import mask_entities
from .spec import DomainSpec, Template, slots_of

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "dev", "test")
MAX_PLACEHOLDERS = 2


@dataclass
class Instance:
    id: str
    domain: str
    utterance: list[str]
    program: list[str]
    entity_map: dict[str, str]
    denotation: Denotation

    def to_json(self) -> dict:
        return {"id": self.id, "domain": self.domain, "utterance": self.utterance, "program": self.program,
                "entity_map": self.entity_map, "denotation": self.denotation.to_json()}

    @classmethod
    def from_json(cls, doc: dict) -> Instance:
        return cls(doc["id"], doc["domain"], list(doc["utterance"]), list(doc["program"]),
                   dict(doc["entity_map"]), Denotation.from_json(doc["denotation"]))


@dataclass
class DomainData:
    kb: KnowledgeBase
    splits: dict[str, list[Instance]]
    program_tokens: list[str] = field(default_factory=list)


@dataclass
class Corpus:
    domains: dict[str, DomainData]
    meta: dict = field(default_factory=dict)

    @property
    def domain_ids(self) -> list[str]:
        return list(self.domains)

    def split(self, name: str, domains: Iterable[str] | None = None) -> list[Instance]:
        chosen = self.domain_ids if domains is None else list(domains)
        return [inst for d in chosen for inst in self.domains[d].splits[name]]

    def kb(self, domain: str) -> KnowledgeBase:
        return self.domains[domain].kb

    def target_tokens(self, domains: Iterable[str] | None = None) -> list[str]:
        """Program vocabulary: shared structural tokens, placeholders, then domain tokens."""
        chosen = self.domain_ids if domains is None else list(domains)
        toks = list(STRUCTURAL_TOKENS) + [f"e{i}" for i in range(MAX_PLACEHOLDERS)]
        for d in chosen:
            toks += self.domains[d].program_tokens
        return list(dict.fromkeys(toks))

    def property_kinds(self, domains: Iterable[str] | None = None) -> dict[str, str]:
        chosen = self.domain_ids if domains is None else list(domains)
        return {p: k for d in chosen for p, k in self.domains[d].kb.properties.items()}

    def save(self, out) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for d, data in self.domains.items():
            ddir = out / d
            ddir.mkdir(exist_ok=True)
            data.kb.save(ddir / "kb.json")
            for name, insts in data.splits.items():
                with open(ddir / f"{name}.jsonl", "w") as fh:
                    for inst in insts:
                        fh.write(json.dumps(inst.to_json(), sort_keys=True) + "\n")
        manifest = dict(self.meta)
        manifest["domains"] = {d: {"program_tokens": data.program_tokens} for d, data in self.domains.items()}
        manifest["domain_order"] = list(self.domains)  # keys get sorted on disk
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> Corpus:
        path = Path(path)
        manifest_path = path / "manifest.json"
        if not manifest_path.exists():
            raise MissingInputError(f"no corpus manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        domains = {}
        for d in manifest.get("domain_order", list(manifest["domains"])):
            info = manifest["domains"][d]
            kb = KnowledgeBase.load(path / d / "kb.json")
            splits = {}
            for name in SPLITS:
                f = path / d / f"{name}.jsonl"
                splits[name] = [Instance.from_json(json.loads(line)) for line in f.read_text().splitlines() if line] \
                    if f.exists() else []
            domains[d] = DomainData(kb, splits, list(info["program_tokens"]))
        meta = {k: v for k, v in manifest.items() if k not in ("domains", "domain_order")}
        return cls(domains, meta)


def stable_seed(*parts) -> int:
    """Deterministic 32-bit seed from strings/ints (unlike ``hash``)."""
    return zlib.crc32("/".join(str(p) for p in parts).encode())


def build_kb(spec: DomainSpec, rng: np.random.Generator) -> KnowledgeBase:
    names = [spec.entity_names[i] for i in sorted(rng.choice(len(spec.entity_names), spec.num_entities, replace=False))]
    ids = [spec.entity_id(n) for n in names]
    table: dict[str, dict] = {eid: {} for eid in ids}
    for p in spec.properties:
        if p.kind == "number":
            grid = list(range(p.low, p.high + 1, p.step))
            vals = [int(v) for v in rng.choice(grid, len(ids))]
            # Unique extremes over the whole table keep plain superlatives informative.
            for extreme, bump in ((max, p.step), (min, -p.step)):
                top = extreme(vals)
                hits = [i for i, v in enumerate(vals) if v == top]
                for i in hits[1:]:
                    vals[i] = top - bump
            for eid, v in zip(ids, vals):
                table[eid][p.name] = v
        elif p.kind == "entity":
            for eid in ids:
                table[eid][p.name] = p.value_id(str(rng.choice(p.values)))
        else:
            for eid in ids:
                table[eid][p.name] = str(rng.choice(p.values))
    return KnowledgeBase(spec.domain_id, spec.entity_type, {p.name: p.kind for p in spec.properties}, table)


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def instantiate(spec: DomainSpec, template: Template, kb: KnowledgeBase, rng: np.random.Generator):
    """Fill a template's slots; returns raw (utterance words, program tokens)."""
    used = set(slots_of(template.utterance) + slots_of(template.program))
    surface: dict[str, str] = {"noun": spec.noun, "plural": spec.plural, "type": ""}
    prog: dict[str, str] = {"type": spec.entity_type}
    lex = spec.lexicon
    if "nprop" in used:
        p = _pick(rng, spec.props("number"))
        surface["nprop"], prog["nprop"] = _pick(rng, p.phrases), p.name
        if "num" in used:
            n = _pick(rng, p.thresholds)
            surface["num"] = prog["num"] = str(n)
    if "eprop" in used:
        p = _pick(rng, spec.props("entity"))
        surface["eprop"], prog["eprop"] = _pick(rng, p.phrases), p.name
        if "ent" in used:
            v = _pick(rng, p.values)
            surface["ent"], prog["ent"] = v, p.value_id(v)
    if "sprop" in used:
        p = _pick(rng, spec.props("string"))
        surface["sprop"], prog["sprop"] = _pick(rng, p.phrases), p.name
        if "str" in used:
            surface["str"] = prog["str"] = _pick(rng, p.values)
    if "self" in used:
        eid = _pick(rng, sorted(kb.entities))
        surface["self"], prog["self"] = eid.rsplit(".", 1)[-1].replace("_", " "), eid
    if "cmp" in used:
        c = _pick(rng, ["<", "<=", ">", ">="])
        surface["cmp"], prog["cmp"] = _pick(rng, lex[c]), c
    if "sup" in used:
        s = _pick(rng, ["argmax", "argmin"])
        surface["sup"], prog["sup"] = _pick(rng, lex[s]), s
    for slot, key in (("count", "count"), ("list", "list"), ("eq", "="), ("neq", "!=")):
        if slot in used:
            surface[slot] = _pick(rng, lex[key])
    utterance = template.utterance.format(**surface).split()
    program = template.program.format(**prog).split()
    return utterance, program


def check_template(spec: DomainSpec, template: Template, kb: KnowledgeBase) -> None:
    rng = np.random.default_rng(0)
    _, program = instantiate(spec, template, kb, rng)
    try:
        parse_program(program)
    except ProgramParseError as exc:
        raise GenerationError(f"template {template.name!r} of {spec.domain_id} does not parse: {exc}") from exc


def generate_domain(spec: DomainSpec, count: int, seed: int) -> DomainData:
    rng = np.random.default_rng(stable_seed("domain", spec.domain_id, seed))
    kb = build_kb(spec, rng)
    templates = [t for t in spec.templates if spec.supports(t)]
    if not templates:
        raise GenerationError(f"{spec.domain_id}: no template fits the schema")
    for t in templates:
        check_template(spec, t, kb)
    seen: set[tuple[str, ...]] = set()
    insts: list[Instance] = []
    attempts = 0
    while len(insts) < count:
        attempts += 1
        if attempts > 200 * count:
            raise GenerationError(f"{spec.domain_id}: could not produce {count} distinct non-empty instances")
        template = _pick(rng, templates)
        raw_utt, raw_prog = instantiate(spec, template, kb, rng)
        key = tuple(raw_utt)
        if key in seen:
            continue
        den = execute(parse_program(raw_prog), kb)
        if not den.items or (den.kind == "count" and 0 in den.items):
            continue
        seen.add(key)
        utt, prog, emap = mask_entities(raw_utt, raw_prog, kb)
        if serialize(parse_program(prog)) != prog:
            raise GenerationError(f"template {template.name!r} does not serialize canonically")
        insts.append(Instance(f"{spec.domain_id}-{len(insts):04d}", spec.domain_id, utt, prog, emap, den))
    order = rng.permutation(len(insts))
    insts = [insts[i] for i in order]
    n_test = n_dev = count // 10
    rest = count - n_test - n_dev
    n_val = rest // 5
    splits = {
        "train": insts[:rest - n_val],
        "val": insts[rest - n_val:rest],
        "dev": insts[rest:rest + n_dev],
        "test": insts[rest + n_dev:],
    }
    return DomainData(kb, splits, spec.program_tokens())


def generate_corpus(specs: list[DomainSpec], per_domain_count: int, seed: int) -> Corpus:
    """Generate every domain and split it train/val/dev/test.

    Each domain is split 80/10/10 into a training portion, ``dev`` and
    ``test``; the training portion is split again 80/20 into ``train`` and
    ``val``.
    """
    if per_domain_count < 10:
        raise ConfigError("per_domain_count must be at least 10")
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate domain ids in {ids}")
    domains = {s.domain_id: generate_domain(s, per_domain_count, seed) for s in specs}
    log.info("generated %d domains x %d instances", len(specs), per_domain_count)
    return Corpus(domains, {"seed": seed, "per_domain": per_domain_count, "format_version": 1})
