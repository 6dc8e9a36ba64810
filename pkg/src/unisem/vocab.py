from __future__ import annotations

import hashlib
import json
from typing import Iterable, Sequence

from .lang import EOS

PAD = "<pad>"
SOS = "<s>"
UNK = "<unk>"


class Vocab:
    """Bidirectional token <-> id map with fixed special tokens up front.

    Source vocabularies use ``[<pad>, <unk>]``; target vocabularies use
    ``[<pad>, <s>, </s>, <unk>]``.
    """

    def __init__(self, tokens: Sequence[str], specials: Sequence[str] = (PAD, UNK)):
        self.itos: list[str] = list(specials)
        for t in tokens:
            if t not in self.itos:
                self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.specials = tuple(specials)

    @classmethod
    def source(cls, sentences: Iterable[Sequence[str]]) -> Vocab:
        return cls(sorted({w for s in sentences for w in s}), (PAD, UNK))

    @classmethod
    def target(cls, tokens: Iterable[str]) -> Vocab:
        return cls(list(dict.fromkeys(tokens)), (PAD, SOS, EOS, UNK))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, self.stoi[UNK])

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def sos_id(self) -> int:
        return self.stoi.get(SOS, -1)

    @property
    def eos_id(self) -> int:
        return self.stoi.get(EOS, -1)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.itos).encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return {"tokens": self.itos[len(self.specials):], "specials": list(self.specials)}

    @classmethod
    def from_json(cls, doc: dict) -> Vocab:
        return cls(doc["tokens"], doc["specials"])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def __repr__(self) -> str:
        return f"Vocab({len(self)} tokens, {self.digest()})"
