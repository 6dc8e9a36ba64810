"""The normalized program language, its executor and denotation metrics.

Programs are prefix token sequences::

    en.recipe
    filter en.recipe cuisine = e0
    filter en.recipe posting_date >= ( getProperty e0 posting_date )
    argmax filter en.recipe meal = dinner cooking_time
    getProperty argmin en.recipe cooking_time posting_date
    count filter en.recipe cooking_time < 30

Every operator has fixed arity, so parentheses appear only around the
``getProperty <placeholder> <property>`` value form.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import ExecutionError, ProgramParseError

EOS = "</s>"

COMPARATORS = ("=", "!=", "<", "<=", ">", ">=")
ORDERED = frozenset({"<", "<=", ">", ">="})
SUPERLATIVES = ("argmax", "argmin")
KEYWORDS = frozenset({"filter", "getProperty", "count", "(", ")", *SUPERLATIVES, *COMPARATORS})
STRUCTURAL_TOKENS = ("filter", "argmax", "argmin", "getProperty", "count", *COMPARATORS, "(", ")")

PROPERTY_KINDS = ("number", "string", "entity")

_PLACEHOLDER = re.compile(r"^e\d+$")
_NUMBER = re.compile(r"^-?\d+(\.\d+)?$")


def is_placeholder(tok: str) -> bool:
    return bool(_PLACEHOLDER.match(tok))


def is_type_token(tok: str) -> bool:
    return tok.startswith("en.") and tok.count(".") == 1


def is_entity_token(tok: str) -> bool:
    """A placeholder or a literal entity id such as ``en.recipe.rice_pudding``."""
    return is_placeholder(tok) or (tok.startswith("en.") and tok.count(".") >= 2)


def is_number_token(tok: str) -> bool:
    return bool(_NUMBER.match(tok))


def number_value(tok: str) -> int | float:
    return float(tok) if "." in tok else int(tok)


# --------------------------------------------------------------------------
# Knowledge bases


@dataclass(frozen=True)
class KnowledgeBase:
    domain_id: str
    entity_type: str
    properties: Mapping[str, str]
    entities: Mapping[str, Mapping[str, object]]

    def __post_init__(self):
        for name, kind in self.properties.items():
            if kind not in PROPERTY_KINDS:
                raise ValueError(f"property {name!r} has unknown kind {kind!r}")
        schema = set(self.properties)
        for eid, row in self.entities.items():
            if set(row) != schema:
                raise ValueError(f"entity {eid!r} does not define exactly the schema properties")

    def to_json(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "entity_type": self.entity_type,
            "properties": dict(self.properties),
            "entities": {k: dict(v) for k, v in self.entities.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> KnowledgeBase:
        return cls(doc["domain_id"], doc["entity_type"], dict(doc["properties"]),
                   {k: dict(v) for k, v in doc["entities"].items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> KnowledgeBase:
        return cls.from_json(json.loads(Path(path).read_text()))


def surface_name(entity_id: str) -> str:
    """``en.recipe.rice_pudding`` -> ``rice pudding``."""
    return entity_id.rsplit(".", 1)[-1].replace("_", " ")


# --------------------------------------------------------------------------
# Expressions


@dataclass(frozen=True)
class TypeSet:
    entity_type: str


@dataclass(frozen=True)
class Placeholder:
    """``e0``-style placeholder, or an unmasked entity id."""

    name: str


@dataclass(frozen=True)
class Literal:
    value: Union[int, float, str]


@dataclass(frozen=True)
class GetProperty:
    # An entity-set Expr, or a Placeholder when used as a comparison value.
    source: object
    prop: str


@dataclass(frozen=True)
class Filter:
    source: object
    prop: str
    comparator: str
    rhs: object


@dataclass(frozen=True)
class Superlative:
    source: object
    kind: str
    prop: str


@dataclass(frozen=True)
class Count:
    source: object


Expr = Union[TypeSet, Filter, Superlative, GetProperty, Count]
ENTITY_SET = (TypeSet, Filter, Superlative)


class _Parser:
    def __init__(self, tokens: Sequence[str]):
        self.toks = list(tokens)
        self.pos = 0

    def fail(self, msg: str):
        raise ProgramParseError(msg, self.pos)

    def next(self, what: str) -> str:
        if self.pos >= len(self.toks):
            self.fail(f"expected {what}, reached end of program")
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def name(self, what: str) -> str:
        tok = self.next(what)
        if tok in KEYWORDS or tok.startswith("en.") or is_placeholder(tok) or is_number_token(tok):
            self.pos -= 1
            self.fail(f"expected {what}, got {tok!r}")
        return tok

    def entity_set(self):
        start = self.pos
        expr = self.expr()
        if not isinstance(expr, ENTITY_SET):
            self.pos = start
            self.fail("expected an entity set")
        return expr

    def expr(self):
        tok = self.next("an expression")
        if is_type_token(tok):
            return TypeSet(tok)
        if tok == "filter":
            src = self.entity_set()
            prop = self.name("a property")
            cmp = self.next("a comparator")
            if cmp not in COMPARATORS:
                self.pos -= 1
                self.fail(f"expected a comparator, got {cmp!r}")
            return Filter(src, prop, cmp, self.value())
        if tok in SUPERLATIVES:
            src = self.entity_set()
            return Superlative(src, tok, self.name("a property"))
        if tok == "getProperty":
            src = self.entity_set()
            return GetProperty(src, self.name("a property"))
        if tok == "count":
            start = self.pos
            src = self.expr()
            if isinstance(src, Count):
                self.pos = start
                self.fail("cannot count a count")
            return Count(src)
        self.pos -= 1
        self.fail(f"unexpected token {tok!r}")

    def value(self):
        tok = self.next("a value")
        if tok == "(":
            if self.next("getProperty") != "getProperty":
                self.pos -= 1
                self.fail("expected getProperty after '('")
            ph = self.next("a placeholder")
            if not is_entity_token(ph):
                self.pos -= 1
                self.fail(f"expected a placeholder, got {ph!r}")
            prop = self.name("a property")
            if self.next("')'") != ")":
                self.pos -= 1
                self.fail("expected ')'")
            return GetProperty(Placeholder(ph), prop)
        if is_entity_token(tok):
            return Placeholder(tok)
        if is_number_token(tok):
            return Literal(number_value(tok))
        if tok in KEYWORDS or tok.startswith("en."):
            self.pos -= 1
            self.fail(f"expected a value, got {tok!r}")
        return Literal(tok)


def parse_program(tokens: Sequence[str]) -> Expr:
    """Parse a prefix token sequence (without end-of-sequence) to an Expr."""
    p = _Parser(tokens)
    expr = p.expr()
    if p.pos != len(p.toks):
        p.fail(f"trailing tokens starting with {p.toks[p.pos]!r}")
    return expr


def serialize(expr) -> list[str]:
    if isinstance(expr, TypeSet):
        return [expr.entity_type]
    if isinstance(expr, Filter):
        return ["filter", *serialize(expr.source), expr.prop, expr.comparator, *_serialize_value(expr.rhs)]
    if isinstance(expr, Superlative):
        return [expr.kind, *serialize(expr.source), expr.prop]
    if isinstance(expr, GetProperty):
        return ["getProperty", *serialize(expr.source), expr.prop]
    if isinstance(expr, Count):
        return ["count", *serialize(expr.source)]
    raise TypeError(f"not an expression: {expr!r}")


def _serialize_value(v) -> list[str]:
    if isinstance(v, Placeholder):
        return [v.name]
    if isinstance(v, Literal):
        return [str(v.value)]
    if isinstance(v, GetProperty) and isinstance(v.source, Placeholder):
        return ["(", "getProperty", v.source.name, v.prop, ")"]
    raise TypeError(f"not a value expression: {v!r}")


def placeholders(expr) -> list[str]:
    return [t for t in serialize(expr) if is_placeholder(t)]


# --------------------------------------------------------------------------
# Denotations and execution


def _sort_key(v):
    return (type(v).__name__ if not isinstance(v, (int, float)) else "number", v)


@dataclass(frozen=True)
class Denotation:
    """``kind`` is ``entities``, ``values`` or ``count`` (one integer item)."""

    kind: str
    items: frozenset

    @classmethod
    def entities(cls, ids) -> Denotation:
        return cls("entities", frozenset(ids))

    @classmethod
    def values(cls, vals) -> Denotation:
        return cls("values", frozenset(vals))

    @classmethod
    def count(cls, n: int) -> Denotation:
        if n < 0:
            raise ValueError("count must be non-negative")
        return cls("count", frozenset([int(n)]))

    def to_json(self) -> dict:
        return {"kind": self.kind, "values": sorted(self.items, key=_sort_key)}

    @classmethod
    def from_json(cls, doc: dict) -> Denotation:
        return cls(doc["kind"], frozenset(doc["values"]))

    def __len__(self) -> int:
        return len(self.items)


def _compare(lhs, cmp: str, rhs) -> bool:
    if cmp == "=":
        return lhs == rhs
    if cmp == "!=":
        return lhs != rhs
    if cmp == "<":
        return lhs < rhs
    if cmp == "<=":
        return lhs <= rhs
    if cmp == ">":
        return lhs > rhs
    return lhs >= rhs


def _check_prop(kb: KnowledgeBase, prop: str) -> str:
    if prop not in kb.properties:
        raise ExecutionError(f"unknown property {prop!r} in domain {kb.domain_id}")
    return kb.properties[prop]


def _resolve(name: str, entity_map: Mapping[str, str]) -> str:
    if not is_placeholder(name):
        return name
    if name not in entity_map:
        raise ExecutionError(f"unbound placeholder {name}")
    return entity_map[name]


def _value(v, kb: KnowledgeBase, entity_map):
    if isinstance(v, Literal):
        return v.value
    if isinstance(v, Placeholder):
        return _resolve(v.name, entity_map)
    # ( getProperty eN prop )
    _check_prop(kb, v.prop)
    eid = _resolve(v.source.name, entity_map)
    if eid not in kb.entities:
        raise ExecutionError(f"{eid} is not an entity of {kb.entity_type}")
    return kb.entities[eid][v.prop]


def _entity_set(expr, kb, entity_map) -> frozenset:
    if isinstance(expr, TypeSet):
        if expr.entity_type != kb.entity_type:
            raise ExecutionError(f"type {expr.entity_type} not in domain {kb.domain_id}")
        return frozenset(kb.entities)
    if isinstance(expr, Filter):
        src = _entity_set(expr.source, kb, entity_map)
        kind = _check_prop(kb, expr.prop)
        rhs = _value(expr.rhs, kb, entity_map)
        if expr.comparator in ORDERED:
            if kind != "number" or not isinstance(rhs, (int, float)):
                raise ExecutionError(f"ordered comparison on non-numeric property {expr.prop}")
        return frozenset(e for e in src if _compare(kb.entities[e][expr.prop], expr.comparator, rhs))
    if isinstance(expr, Superlative):
        src = _entity_set(expr.source, kb, entity_map)
        if _check_prop(kb, expr.prop) != "number":
            raise ExecutionError(f"superlative over non-numeric property {expr.prop}")
        if not src:
            return frozenset()
        vals = {e: kb.entities[e][expr.prop] for e in src}
        best = max(vals.values()) if expr.kind == "argmax" else min(vals.values())
        return frozenset(e for e, v in vals.items() if v == best)
    raise ExecutionError(f"{type(expr).__name__} does not denote an entity set")


def execute(expr, kb: KnowledgeBase, entity_map: Mapping[str, str] | None = None) -> Denotation:
    """Run ``expr`` against ``kb`` with placeholders bound by ``entity_map``."""
    entity_map = entity_map or {}
    if isinstance(expr, Count):
        inner = execute(expr.source, kb, entity_map)
        return Denotation.count(len(inner))
    if isinstance(expr, GetProperty):
        src = _entity_set(expr.source, kb, entity_map)
        _check_prop(kb, expr.prop)
        return Denotation.values(kb.entities[e][expr.prop] for e in src)
    return Denotation.entities(_entity_set(expr, kb, entity_map))


def run_tokens(tokens: Sequence[str], kb: KnowledgeBase, entity_map) -> Denotation | None:
    """Parse and execute a decoded program; ``None`` on any failure."""
    toks = list(tokens)
    if toks and toks[-1] == EOS:
        toks.pop()
    try:
        return execute(parse_program(toks), kb, entity_map)
    except (ProgramParseError, ExecutionError):
        return None


# --------------------------------------------------------------------------
# Metrics


def hard_match(predicted: Denotation | None, gold: Denotation) -> int:
    if predicted is None:
        return 0
    return int(predicted.kind == gold.kind and predicted.items == gold.items)


def soft_f1(predicted: Denotation | None, gold: Denotation | None) -> float:
    """F1 between answer sets. Both empty scores 1; one empty scores 0."""
    if predicted is None or gold is None:
        return 0.0
    if not predicted.items and not gold.items:
        return 1.0
    if predicted.kind != gold.kind or not predicted.items or not gold.items:
        return 0.0
    overlap = len(predicted.items & gold.items)
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted.items)
    recall = overlap / len(gold.items)
    return 2 * precision * recall / (precision + recall)


def _strip_eos(tokens: Sequence[str]) -> list[str]:
    toks = list(tokens)
    while toks and toks[-1] == EOS:
        toks.pop()
    return toks


def string_match_reward(predicted_tokens: Sequence[str], gold_tokens: Sequence[str]) -> int:
    return int(_strip_eos(predicted_tokens) == _strip_eos(gold_tokens))


def denotation_reward(predicted_tokens, gold: Denotation, kb: KnowledgeBase, entity_map) -> float:
    return soft_f1(run_tokens(predicted_tokens, kb, entity_map), gold)


class GrammarConstraint:
    """Typed prefix automaton for decoding only well-formed programs.

    ``property_kinds`` maps property tokens to their kind; it lets the
    automaton pair each property with comparators and values of the right
    type. Any other plain word in the vocabulary counts as a string value.
    Superlatives over superlatives (always a no-op) are excluded.

    A state is ``(stack, n)``: pending grammar symbols and the number of
    tokens emitted so far. An empty stack means a complete program, after
    which only end-of-sequence may follow. A token is allowed only if the
    program can still be completed within ``max_len`` tokens
    (end-of-sequence included), so constrained decoding always finishes.
    ``None`` is the dead state reached by an invalid token: everything is
    allowed from there, so teacher forcing on arbitrary sequences still
    yields finite losses.
    """

    # Minimum number of tokens each pending symbol expands to.
    _MIN = {"EXPR": 1, "NOCOUNT": 1, "SET": 1, "SUPSRC": 1, "FCOND": 3, "NPROP": 1, "SPROP": 1, "EPROP": 1,
            "PROP": 1, "NCMP": 1, "EQCMP": 1, "NVAL": 1, "SVAL": 1, "EVAL": 1, "ENT": 1, "getProperty": 1, ")": 1}

    def __init__(self, tokens: Sequence[str], eos_id: int, max_len: int = 35,
                 property_kinds: Mapping[str, str] | None = None):
        self.tokens = list(tokens)
        self.eos_id = eos_id
        self.max_len = max_len
        kinds = dict(property_kinds or {})

        def plain(t):
            return not (t in KEYWORDS or t.startswith("en.") or is_placeholder(t) or is_number_token(t)
                        or (t.startswith("<") and t.endswith(">")) or t == EOS or t in kinds)

        value_of = {"number": "NVAL", "string": "SVAL", "entity": "EVAL"}
        prop_sym = {"number": "NPROP", "string": "SPROP", "entity": "EPROP"}

        def set_rule(t, nested_superlative=True):
            if is_type_token(t):
                return ()
            if t == "filter":
                return ("FCOND", "SET")
            if t in SUPERLATIVES and nested_superlative:
                return ("NPROP", "SUPSRC")
            return None

        def rules(sym, t):
            """Symbols pushed (bottom first) when ``t`` is read under ``sym``; None if not allowed."""
            if t == EOS:
                return None
            if sym in ("EXPR", "NOCOUNT", "SET", "SUPSRC"):
                r = set_rule(t)
                if sym == "SUPSRC":
                    r = set_rule(t) if t not in SUPERLATIVES else None
                if r is None and sym in ("EXPR", "NOCOUNT") and t == "getProperty":
                    r = ("PROP", "SET")
                if r is None and sym == "EXPR" and t == "count":
                    r = ("NOCOUNT",)
                return r
            if sym == "FCOND":
                if t in kinds:
                    cmp = "NCMP" if kinds[t] == "number" else "EQCMP"
                    return (value_of[kinds[t]], cmp)
                return None
            if sym in ("NVAL", "SVAL", "EVAL"):
                if t == "(":
                    kind = {"NVAL": "number", "SVAL": "string", "EVAL": "entity"}[sym]
                    return (")", prop_sym[kind], "ENT", "getProperty")
                ok = {"NVAL": is_number_token, "SVAL": plain, "EVAL": is_entity_token}[sym](t)
                return () if ok else None
            ok = {
                "NPROP": lambda: kinds.get(t) == "number",
                "SPROP": lambda: kinds.get(t) == "string",
                "EPROP": lambda: kinds.get(t) == "entity",
                "PROP": lambda: t in kinds,
                "NCMP": lambda: t in COMPARATORS,
                "EQCMP": lambda: t in ("=", "!="),
                "ENT": lambda: is_entity_token(t),
                "getProperty": lambda: t == "getProperty",
                ")": lambda: t == ")",
            }[sym]()
            return () if ok else None

        V = len(self.tokens)
        self._push: dict[str, list] = {}
        self._mask: dict[str, np.ndarray] = {}
        self._cost: dict[str, np.ndarray] = {}
        for sym in self._MIN:
            pushes = [rules(sym, t) for t in self.tokens]
            self._push[sym] = pushes
            self._mask[sym] = np.array([r is not None for r in pushes])
            self._cost[sym] = np.array([sum(self._MIN[x] for x in r) if r is not None else 0 for r in pushes])
        self._done = np.zeros(V, dtype=bool)
        self._done[eos_id] = True
        self._all = np.ones(V, dtype=bool)
        self._cache: dict = {}

    def initial(self):
        return (("EXPR",), 0)

    def allowed(self, state) -> np.ndarray:
        if state is None:
            return self._all
        hit = self._cache.get(state)
        if hit is not None:
            return hit
        stack, n = state
        if not stack:
            out = self._done
        else:
            top = stack[-1]
            need = sum(self._MIN[x] for x in stack) - self._MIN[top]
            # This token, what it leaves pending, then end-of-sequence.
            out = self._mask[top] & (n + 1 + need + self._cost[top] + 1 <= self.max_len)
        self._cache[state] = out
        return out

    def advance(self, state, token_id: int):
        if state is None or not self.allowed(state)[token_id]:
            return None
        stack, n = state
        if not stack:
            return (), n + 1  # end-of-sequence after a complete program
        return stack[:-1] + self._push[stack[-1]][token_id], n + 1

    def penalties(self, states) -> np.ndarray:
        """(len(states), V) additive logit offsets: 0 where allowed, -1e30 elsewhere."""
        out = np.zeros((len(states), len(self.tokens)))
        for r, s in enumerate(states):
            out[r, ~self.allowed(s)] = -1e30
        return out
