"""Reversible template reduction for original-form lambda-DCS parses.

Rewrites applied::

    (call SW.listValue X)                                   ->  X  (root only)
    (call SW.getProperty (call SW.singleton T) (string ! type))  ->  T
    (string tok)                                            ->  tok
    (call FN a1 .. an)                                      ->  FN a1 .. an
    value argument of a 4-argument SW.filter                ->  ( ... )

Arity is implied by a fixed table, so the bracket-free form parses back
unambiguously. Any subtree that would not invert exactly (unknown
function, multi-word string, lambda, ...) is kept verbatim, brackets and
``call`` included, and a warning is logged. Entity ids may then be
masked to placeholders; ``denormalize`` takes the placeholder map.
"""

from __future__ import annotations

import logging
import re
from typing import Mapping, Sequence

from ..errors import ConfigError
from .masking import is_entity_id

log = logging.getLogger(__name__)

ARITY = {
    "SW.getProperty": 2,
    "SW.singleton": 1,
    "SW.ensureNumericProperty": 1,
    "SW.ensureNumericEntity": 1,
    "SW.superlative": 3,
    "SW.countSuperlative": 3,
    "SW.countComparative": 4,
    "SW.aggregate": 2,
    "SW.reverse": 1,
    "SW.domain": 1,
    "SW.concat": 2,
    ".size": 1,
}
COMPARATORS = frozenset({"=", "!=", "<", "<=", ">", ">="})
_RAW_HEADS = frozenset({"call", "lambda", "var", "string", "number", "date", "time"})
_PLACEHOLDER = re.compile(r"^e\d+$")


def tokenize(text: str) -> list[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def read_sexpr(text: str):
    """Nested lists of atoms."""
    toks = tokenize(text)
    pos = 0

    def read():
        nonlocal pos
        if pos >= len(toks):
            raise ConfigError("unexpected end of s-expression")
        tok = toks[pos]
        pos += 1
        if tok == "(":
            items = []
            while pos < len(toks) and toks[pos] != ")":
                items.append(read())
            if pos >= len(toks):
                raise ConfigError("unbalanced parentheses")
            pos += 1
            return items
        if tok == ")":
            raise ConfigError("unexpected ')'")
        return tok

    tree = read()
    if pos != len(toks):
        raise ConfigError("trailing tokens after s-expression")
    return tree


def write_sexpr(tree) -> str:
    if isinstance(tree, str):
        return tree
    return "(" + " ".join(write_sexpr(t) for t in tree) + ")"


def _flat(tree) -> list[str]:
    if isinstance(tree, str):
        return [tree]
    out = ["("]
    for t in tree:
        out += _flat(t)
    return out + [")"]


def _is_type_collapse(tree) -> bool:
    return (isinstance(tree, list) and len(tree) == 4 and tree[:2] == ["call", "SW.getProperty"]
            and isinstance(tree[2], list) and len(tree[2]) == 3 and tree[2][:2] == ["call", "SW.singleton"]
            and isinstance(tree[2][2], str) and tree[2][2].startswith("en.") and tree[2][2].count(".") == 1
            and tree[3] == ["string", "!", "type"])


def _is_atom_token(tok: str) -> bool:
    return tok not in ("(", ")") and tok not in _RAW_HEADS and not tok.startswith("SW.") and tok != ".size"


def _norm(tree) -> list[str]:
    if isinstance(tree, str):
        # Bare atoms survive only when they cannot be mistaken for a (string x).
        return [tree] if tree.startswith("en.") else _flat(tree)
    if _is_type_collapse(tree):
        return [tree[2][2]]
    if len(tree) == 2 and tree[0] == "string" and isinstance(tree[1], str):
        tok = tree[1]
        if _is_atom_token(tok) and not tok.startswith("en.") and not _PLACEHOLDER.match(tok):
            return [tok]
        return _flat(tree)
    if len(tree) >= 2 and tree[0] == "call" and isinstance(tree[1], str):
        fn, args = tree[1], tree[2:]
        if fn == "SW.filter" and len(args) in (2, 4):
            out = [fn] + _checked(args[0]) + _checked(args[1])
            if len(args) == 4:
                out += _checked(args[2])
                value = _checked(args[3])
                is_call = isinstance(args[3], list) and args[3][:1] == ["call"]
                out += ["(", *value, ")"] if is_call else value
            return out
        if ARITY.get(fn) == len(args):
            return [fn] + [t for a in args for t in _checked(a)]
    return _flat(tree)


def _checked(tree) -> list[str]:
    """Normalize ``tree``, falling back to verbatim tokens if it would not invert."""
    toks = _norm(tree)
    try:
        ok = _Denorm(toks).whole() == tree
    except (ConfigError, IndexError):
        ok = False
    if not ok:
        log.warning("normalization kept construct verbatim: %s", write_sexpr(tree)[:80])
        return _flat(tree)
    return toks


class _Denorm:
    def __init__(self, toks: Sequence[str]):
        self.toks = list(toks)
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self) -> str:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def whole(self):
        node = self.node()
        if self.pos != len(self.toks):
            raise ConfigError("trailing normalized tokens")
        return node

    def raw(self):
        # Verbatim bracketed subtree.
        depth, start = 0, self.pos
        while True:
            tok = self.take()
            depth += tok == "("
            depth -= tok == ")"
            if depth == 0:
                break
        return read_sexpr(" ".join(self.toks[start:self.pos]))

    def node(self):
        tok = self.peek()
        if tok is None:
            raise ConfigError("normalized program ended early")
        if tok == "(":
            nxt = self.toks[self.pos + 1] if self.pos + 1 < len(self.toks) else None
            if nxt in _RAW_HEADS:
                return self.raw()
            self.take()
            inner = self.node()
            if self.take() != ")":
                raise ConfigError("expected ')'")
            return inner
        self.take()
        if tok == "SW.filter":
            src, prop = self.node(), self.node()
            if self.peek() in COMPARATORS:
                cmp = self.node()
                return ["call", tok, src, prop, cmp, self.node()]
            return ["call", tok, src, prop]
        if tok in ARITY:
            return ["call", tok] + [self.node() for _ in range(ARITY[tok])]
        if tok.startswith("en.") and tok.count(".") == 1:
            return ["call", "SW.getProperty", ["call", "SW.singleton", tok], ["string", "!", "type"]]
        if tok.startswith("en."):
            return tok
        return ["string", tok]


def normalize_external(original: str, mask: bool = True):
    """Template-reduce an original-form parse.

    Returns ``(tokens, entity_map)``; with ``mask`` the entity ids become
    ``e0, e1, ...`` in order of appearance in the program.
    """
    tree = read_sexpr(original)
    if isinstance(tree, list) and len(tree) == 3 and tree[:2] == ["call", "SW.listValue"]:
        toks = _checked(tree[2])
    else:
        # A fragment; invert with denormalize(..., root=False).
        toks = _checked(tree)
    entity_map: dict[str, str] = {}
    if mask:
        ids = list(dict.fromkeys(t for t in toks if is_entity_id(t)))
        entity_map = {f"e{i}": eid for i, eid in enumerate(ids)}
        back = {v: k for k, v in entity_map.items()}
        toks = [back.get(t, t) for t in toks]
    return toks, entity_map


def denormalize(tokens: Sequence[str], entity_map: Mapping[str, str] | None = None, root: bool = True) -> str:
    """Invert :func:`normalize_external` back to original-form text.

    ``root=False`` inverts a fragment that had no ``SW.listValue`` wrapper.
    """
    entity_map = entity_map or {}
    toks = [entity_map.get(t, t) for t in tokens]
    tree = _Denorm(toks).whole()
    return write_sexpr(["call", "SW.listValue", tree] if root else tree)
