from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .lang import EOS, KnowledgeBase, hard_match, run_tokens, soft_f1


@dataclass
class MatchRecord:
    instance_id: str
    domain: str
    predicted: list[str]
    hard: int
    soft: float


def decode_top(parser, instances: Sequence, beam_width: int, batch_size: int = 64) -> list[list[str]]:
    """Top-1 program (as tokens, end-of-sequence stripped) for each instance.

    Only the utterance reaches the model; the domain is never an input.
    """
    out: list[list[str]] = []
    model = parser.model
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        src = [parser.encode_utterance(inst.utterance) for inst in chunk]
        if beam_width == 1:
            hyps = model.greedy_batch(src)
        else:
            hyps = [beam.best for beam in model.beam_search_batch(src, beam_width)]
        for h in hyps:
            toks = parser.decode_program(h.tokens)
            out.append([t for t in toks if t != EOS])
    return out


def score(instances: Sequence, predictions: Sequence[Sequence[str]],
          kbs: Mapping[str, KnowledgeBase]) -> list[MatchRecord]:
    """Execute each prediction against its instance's own knowledge base."""
    records = []
    for inst, pred in zip(instances, predictions):
        den = run_tokens(pred, kbs[inst.domain], inst.entity_map)
        records.append(MatchRecord(inst.id, inst.domain, list(pred),
                                   hard_match(den, inst.denotation), soft_f1(den, inst.denotation)))
    return records


def accuracy(records: Sequence[MatchRecord]) -> float:
    """Hard denotation accuracy in percent."""
    return 100.0 * sum(r.hard for r in records) / len(records) if records else 0.0


def per_domain_accuracy(records: Sequence[MatchRecord]) -> dict[str, float]:
    groups: dict[str, list[MatchRecord]] = {}
    for r in records:
        groups.setdefault(r.domain, []).append(r)
    return {d: accuracy(rs) for d, rs in sorted(groups.items())}


def evaluate_parser(parser, instances, kbs, beam_width: int = 1) -> list[MatchRecord]:
    return score(instances, decode_top(parser, instances, beam_width), kbs)
