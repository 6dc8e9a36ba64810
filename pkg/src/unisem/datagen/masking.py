from __future__ import annotations

from typing import Mapping, Sequence

from ..errors import MaskingError
from ..lang import surface_name


def is_entity_id(tok: str) -> bool:
    return tok.startswith("en.") and tok.count(".") >= 2


def _find(words: Sequence[str], phrase: list[str], taken: set[int]) -> int:
    n = len(phrase)
    for i in range(len(words) - n + 1):
        if list(words[i:i + n]) == phrase and not taken.intersection(range(i, i + n)):
            return i
    return -1


def mask_entities(raw_utterance: Sequence[str], raw_program: Sequence[str], kb=None):
    """Replace entity mentions by ``e0, e1, ...`` in order of appearance in the utterance.

    Returns ``(utterance, program, entity_map)``. Each entity id in the
    program must have its surface name somewhere in the utterance. ``kb``
    is accepted for callers that want to name the domain; surface names
    derive from the entity ids themselves.
    """
    ids = list(dict.fromkeys(t for t in raw_program if is_entity_id(t)))
    spans = []
    taken: set[int] = set()
    # Longer names first so "lentil soup" is not shadowed by a shorter mention.
    for eid in sorted(ids, key=lambda e: -len(surface_name(e).split())):
        phrase = surface_name(eid).split()
        start = _find(raw_utterance, phrase, taken)
        if start < 0:
            where = f" in domain {kb.domain_id}" if kb is not None else ""
            raise MaskingError(f"entity {eid}{where} has no mention in {' '.join(raw_utterance)!r}")
        taken.update(range(start, start + len(phrase)))
        spans.append((start, len(phrase), eid))
    spans.sort()
    entity_map = {f"e{i}": eid for i, (_, _, eid) in enumerate(spans)}
    by_id = {eid: ph for ph, eid in entity_map.items()}
    words: list[str] = []
    i = 0
    starts = {s: (n, eid) for s, n, eid in spans}
    while i < len(raw_utterance):
        if i in starts:
            n, eid = starts[i]
            words.append(by_id[eid])
            i += n
        else:
            words.append(raw_utterance[i])
            i += 1
    program = [by_id.get(t, t) for t in raw_program]
    return words, program, entity_map


def unmask(utterance: Sequence[str], program: Sequence[str], entity_map: Mapping[str, str]):
    words: list[str] = []
    for w in utterance:
        if w in entity_map:
            words.extend(surface_name(entity_map[w]).split())
        else:
            words.append(w)
    return words, [entity_map.get(t, t) for t in program]
