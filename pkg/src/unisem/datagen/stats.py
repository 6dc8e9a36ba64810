from __future__ import annotations

from typing import Iterable


def corpus_stats(instances: Iterable) -> dict[str, dict]:
    """Per-domain utterance vocab size, program vocab size and mean program length.

    Accepts any iterable of objects with ``domain``, ``utterance`` and
    ``program`` attributes; callers pass training splits only.
    """
    words: dict[str, set] = {}
    toks: dict[str, set] = {}
    lengths: dict[str, list[int]] = {}
    for inst in instances:
        words.setdefault(inst.domain, set()).update(inst.utterance)
        toks.setdefault(inst.domain, set()).update(inst.program)
        lengths.setdefault(inst.domain, []).append(len(inst.program))
    return {
        d: {
            "utterance_vocab": len(words[d]),
            "program_vocab": len(toks[d]),
            "avg_program_length": sum(lengths[d]) / len(lengths[d]),
            "instances": len(lengths[d]),
        }
        for d in sorted(lengths)
    }


def format_stats(stats: dict[str, dict]) -> str:
    lines = [f"{'domain':<14}{'utt vocab':>10}{'prog vocab':>11}{'avg len':>9}{'n':>6}"]
    for d, s in stats.items():
        lines.append(f"{d:<14}{s['utterance_vocab']:>10}{s['program_vocab']:>11}"
                     f"{s['avg_program_length']:>9.1f}{s['instances']:>6}")
    return "\n".join(lines)
