"""Attention LSTM encoder-decoder with greedy and beam-search decoding.

All computation is batched over rows: the encoder runs on a padded batch
of utterances, the decoder on one row per (utterance, hypothesis). The
same code path serves training (a recording :class:`Graph`) and
decoding (``Graph(record=False)``).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import NEG_INF, Graph, ParamStore, Tensor, log_softmax_rows
from .errors import CheckpointError, ConfigError, ContractError
from .lang import GrammarConstraint
from .vocab import UNK, Vocab

FORMAT_VERSION = 1


class TruncationWarning(UserWarning):
    pass


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    num_layers: int = 1
    hidden_size: int = 100
    embed_size: int = 64
    max_src_len: int = 50
    max_tgt_len: int = 35
    sos_id: int = 1
    eos_id: int = 2
    # Target ids the decoder may never emit (padding, start symbol).
    blocked_ids: tuple[int, ...] = (0, 1)
    init_scale: float = 0.08
    # Restrict decoding to syntactically valid programs (needs the target vocabulary).
    grammar: bool = False

    def __post_init__(self):
        self.blocked_ids = tuple(int(i) for i in self.blocked_ids)
        for name in ("src_vocab_size", "tgt_vocab_size", "num_layers", "hidden_size",
                     "embed_size", "max_src_len", "max_tgt_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.eos_id in self.blocked_ids:
            raise ConfigError("end-of-sequence cannot be blocked")


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    finished: bool
    decoder_state: list[tuple[np.ndarray, np.ndarray]] | None = None


@dataclass
class Beam:
    width: int
    items: list[Hypothesis] = field(default_factory=list)

    @property
    def best(self) -> Hypothesis:
        return self.items[0]


@dataclass
class Encoded:
    states: Tensor  # (B, T, H) top-layer states
    mask: np.ndarray  # (B, T), 1 on real tokens
    final: list[tuple[Tensor, Tensor]]  # (h, c) per layer
    layer_states: list[list[Tensor]]  # per layer, per time step


class Seq2Seq:
    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0):
        self.config = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        c = config
        H, E, s = c.hidden_size, c.embed_size, c.init_scale
        self.params = p = ParamStore()

        def init(*shape):
            return rng.uniform(-s, s, size=shape)

        p.add("src_emb", init(c.src_vocab_size, E))
        p.add("tgt_emb", init(c.tgt_vocab_size, E))
        for side in ("enc", "dec"):
            for layer in range(c.num_layers):
                width = E if layer == 0 else H
                p.add(f"{side}.{layer}.W", init(width + H, 4 * H))
                p.add(f"{side}.{layer}.b", init(4 * H))
        p.add("att.W", init(2 * H, H))
        p.add("att.b", init(H))
        p.add("out.W", init(H, c.tgt_vocab_size))
        p.add("out.b", init(c.tgt_vocab_size))
        self.logit_mask = np.zeros(c.tgt_vocab_size)
        self.logit_mask[list(c.blocked_ids)] = NEG_INF
        self.allowed = np.setdiff1d(np.arange(c.tgt_vocab_size), c.blocked_ids)
        self.constraint: GrammarConstraint | None = None

    def num_params(self) -> int:
        return self.params.num_params()

    # -- building blocks ------------------------------------------------

    def _lstm(self, g: Graph, prefix: str, x: Tensor, h: Tensor, c: Tensor):
        H = self.config.hidden_size
        z = g.add(g.matmul(g.concat([x, h]), self.params[prefix + ".W"]), self.params[prefix + ".b"])
        i = g.sigmoid(g.columns(z, 0, H))
        f = g.sigmoid(g.columns(z, H, 2 * H))
        cand = g.tanh(g.columns(z, 2 * H, 3 * H))
        o = g.sigmoid(g.columns(z, 3 * H, 4 * H))
        c_new = g.add(g.mul(f, c), g.mul(i, cand))
        h_new = g.mul(o, g.tanh(c_new))
        return h_new, c_new

    def _pad_src(self, batch: Sequence[Sequence[int]]):
        limit = self.config.max_src_len
        rows = []
        for ids in batch:
            if len(ids) == 0:
                raise ContractError("cannot encode an empty utterance")
            if len(ids) > limit:
                warnings.warn(f"utterance of {len(ids)} tokens truncated to {limit}", TruncationWarning, stacklevel=3)
                ids = ids[:limit]
            if max(ids) >= self.config.src_vocab_size or min(ids) < 0:
                raise ContractError("source id outside the vocabulary")
            rows.append(list(ids))
        T = max(len(r) for r in rows)
        arr = np.zeros((len(rows), T), dtype=np.int64)
        mask = np.zeros((len(rows), T))
        for b, r in enumerate(rows):
            arr[b, :len(r)] = r
            mask[b, :len(r)] = 1.0
        return arr, mask

    def encode_batch(self, g: Graph, batch: Sequence[Sequence[int]]) -> Encoded:
        ids, mask = self._pad_src(batch)
        B, T = ids.shape
        H, L = self.config.hidden_size, self.config.num_layers
        zeros = np.zeros((B, H))
        state = [(Tensor(zeros), Tensor(zeros)) for _ in range(L)]
        layer_states: list[list[Tensor]] = [[] for _ in range(L)]
        emb = self.params["src_emb"]
        for t in range(T):
            x = g.rows(emb, ids[:, t])
            m = mask[:, t]
            partial = not m.all()
            for layer in range(L):
                h, c = state[layer]
                h2, c2 = self._lstm(g, f"enc.{layer}", x, h, c)
                if partial:
                    h2, c2 = g.blend(m, h2, h), g.blend(m, c2, c)
                state[layer] = (h2, c2)
                layer_states[layer].append(h2)
                x = h2
        states = g.stack(layer_states[-1])
        return Encoded(states, mask, state, layer_states)

    def _grammar_states(self, n: int) -> list:
        return [self.constraint.initial() if self.constraint else None for _ in range(n)]

    def _penalty(self, gstates) -> np.ndarray | None:
        return self.constraint.penalties(gstates) if self.constraint else None

    def _advance(self, gstate, token: int):
        return self.constraint.advance(gstate, token) if self.constraint else None

    def _step(self, g: Graph, prev: np.ndarray, state, enc_states: Tensor, enc_mask: np.ndarray,
              penalty: np.ndarray | None = None):
        x = g.rows(self.params["tgt_emb"], prev)
        new_state = []
        for layer in range(self.config.num_layers):
            h, c = state[layer]
            h, c = self._lstm(g, f"dec.{layer}", x, h, c)
            new_state.append((h, c))
            x = h
        weights = g.softmax(g.bdot(enc_states, x), enc_mask)
        context = g.bweight(weights, enc_states)
        att = g.tanh(g.add(g.matmul(g.concat([x, context]), self.params["att.W"]), self.params["att.b"]))
        offset = self.logit_mask if penalty is None else self.logit_mask + penalty
        logits = g.add(g.add(g.matmul(att, self.params["out.W"]), self.params["out.b"]), offset)
        return logits, new_state

    # -- public single-utterance API ------------------------------------

    def encode(self, utterance: Sequence[int], g: Graph | None = None) -> Encoded:
        return self.encode_batch(g or Graph(record=False), [utterance])

    def decode_step(self, prev_token: int, state, encoded: Encoded):
        """One decoder step for a single row; returns (probabilities, new state)."""
        g = Graph(record=False)
        logits, new_state = self._step(g, np.array([prev_token]), state, encoded.states, encoded.mask)
        return np.exp(log_softmax_rows(logits.value))[0], new_state

    def teacher_forced_logits(self, g: Graph, src: Sequence[Sequence[int]], tgt: Sequence[Sequence[int]]):
        """Logits for every target position, fed the gold previous token.

        Returns ``(logits, targets, mask)``: a list of (B, V) tensors, one
        per step, the (B, T) target ids and their validity mask.
        """
        limit = self.config.max_tgt_len
        for z in tgt:
            if len(z) > limit:
                raise ContractError(f"program of {len(z)} tokens exceeds max_tgt_len {limit}")
            if len(z) == 0:
                raise ContractError("empty target program")
        enc = self.encode_batch(g, src)
        B, T = len(tgt), max(len(z) for z in tgt)
        targets = np.zeros((B, T), dtype=np.int64)
        mask = np.zeros((B, T))
        for b, z in enumerate(tgt):
            targets[b, :len(z)] = z
            mask[b, :len(z)] = 1.0
        prev = np.full(B, self.config.sos_id, dtype=np.int64)
        state = enc.final
        gstates = self._grammar_states(B)
        out = []
        for t in range(T):
            logits, state = self._step(g, prev, state, enc.states, enc.mask, self._penalty(gstates))
            out.append(logits)
            prev = targets[:, t]
            if self.constraint:
                gstates = [self._advance(gs, int(tok)) for gs, tok in zip(gstates, prev)]
        return out, targets, mask

    def sequence_log_probs(self, src: Sequence[Sequence[int]], tgt: Sequence[Sequence[int]]) -> np.ndarray:
        logits, targets, mask = self.teacher_forced_logits(Graph(record=False), src, tgt)
        total = np.zeros(len(tgt))
        for t, lt in enumerate(logits):
            lp = log_softmax_rows(lt.value)
            total += mask[:, t] * lp[np.arange(len(tgt)), targets[:, t]]
        return total

    def sequence_log_prob(self, utterance: Sequence[int], program: Sequence[int], require_eos: bool = True) -> float:
        """log P(program | utterance) under teacher forcing."""
        if require_eos and (not program or program[-1] != self.config.eos_id):
            raise ContractError("program must end with end-of-sequence")
        return float(self.sequence_log_probs([utterance], [program])[0])

    # -- decoding -----------------------------------------------------

    def greedy_batch(self, utterances: Sequence[Sequence[int]]) -> list[Hypothesis]:
        g = Graph(record=False)
        enc = self.encode_batch(g, utterances)
        B = len(utterances)
        prev = np.full(B, self.config.sos_id, dtype=np.int64)
        state = enc.final
        tokens: list[list[int]] = [[] for _ in range(B)]
        logp = np.zeros(B)
        done = np.zeros(B, dtype=bool)
        gstates = self._grammar_states(B)
        for _ in range(self.config.max_tgt_len):
            logits, state = self._step(g, prev, state, enc.states, enc.mask, self._penalty(gstates))
            lp = log_softmax_rows(logits.value)
            choice = lp.argmax(axis=1)
            if self.constraint:
                gstates = [self._advance(gs, int(tok)) for gs, tok in zip(gstates, choice)]
            for b in range(B):
                if not done[b]:
                    tokens[b].append(int(choice[b]))
                    logp[b] += lp[b, choice[b]]
                    done[b] = choice[b] == self.config.eos_id
            if done.all():
                break
            prev = choice
        return [Hypothesis(tokens[b], float(logp[b]), bool(done[b])) for b in range(B)]

    def greedy(self, utterance: Sequence[int]) -> Hypothesis:
        return self.greedy_batch([utterance])[0]

    def beam_search_batch(self, utterances: Sequence[Sequence[int]], width: int) -> list[Beam]:
        """Length-synchronous beam search, batched over utterances.

        Finished hypotheses stay in the beam and compete on raw cumulative
        log-probability with open ones. Hypotheses still open at
        ``max_tgt_len`` are returned with ``finished=False``.
        """
        if width < 1:
            raise ConfigError(f"beam width must be >= 1, got {width}")
        cfg = self.config
        g = Graph(record=False)
        enc = self.encode_batch(g, utterances)
        B = len(utterances)
        allowed = self.allowed
        # Per utterance: list of (tokens, logp, finished, row, state-or-None).
        start = self._grammar_states(1)[0]
        beams = [[([], 0.0, False, b, None, start)] for b in range(B)]
        state_arrays = [(h.value, c.value) for h, c in enc.final]
        for step in range(cfg.max_tgt_len):
            open_rows = [(b, k) for b in range(B) for k, hyp in enumerate(beams[b]) if not hyp[2]]
            if not open_rows:
                break
            src_rows = np.array([beams[b][k][3] for b, k in open_rows])
            inst = np.array([b for b, _ in open_rows])
            prev = np.array([beams[b][k][0][-1] if beams[b][k][0] else cfg.sos_id for b, k in open_rows])
            state = [(Tensor(h[src_rows]), Tensor(c[src_rows])) for h, c in state_arrays]
            penalty = self._penalty([beams[b][k][5] for b, k in open_rows])
            logits, new_state = self._step(g, prev, state, Tensor(enc.states.value[inst]), enc.mask[inst], penalty)
            lp = log_softmax_rows(logits.value)[:, allowed]
            new_arrays = [(h.value, c.value) for h, c in new_state]
            row_of = {key: r for r, key in enumerate(open_rows)}
            last = step + 1 == cfg.max_tgt_len
            for b in range(B):
                finished = [hyp for hyp in beams[b] if hyp[2]]
                opens = [(k, row_of[(b, k)]) for k, hyp in enumerate(beams[b]) if not hyp[2]]
                scores = [np.array([hyp[1] for hyp in finished])]
                if opens:
                    base = np.array([beams[b][k][1] for k, _ in opens])
                    scores.append((base[:, None] + lp[[r for _, r in opens]]).ravel())
                flat = np.concatenate(scores)
                order = np.argsort(-flat, kind="stable")[:width]
                nf, V = len(finished), len(allowed)
                nxt = []
                for idx in order:
                    if idx < nf:
                        nxt.append(finished[idx])
                        continue
                    j, v = divmod(int(idx) - nf, V)
                    k, r = opens[j]
                    tok = int(allowed[v])
                    done = tok == cfg.eos_id
                    snap = None
                    if done or last:
                        snap = [(h[r].copy(), c[r].copy()) for h, c in new_arrays]
                    gs = self._advance(beams[b][k][5], tok)
                    nxt.append((beams[b][k][0] + [tok], float(flat[idx]), done, r, snap, gs))
                beams[b] = nxt
            state_arrays = new_arrays
        out = []
        for b in range(B):
            items = [Hypothesis(t, lp_, done, snap) for t, lp_, done, _, snap, _ in beams[b]]
            items.sort(key=lambda h: -h.log_prob)
            out.append(Beam(width, items))
        return out

    def beam_search(self, utterance: Sequence[int], width: int) -> Beam:
        return self.beam_search_batch([utterance], width)[0]

    # -- persistence ----------------------------------------------------

    def copy(self) -> Seq2Seq:
        other = Seq2Seq(self.config, 0)
        other.params.load_snapshot(self.params.snapshot())
        other.constraint = self.constraint
        return other

    def state_dict(self) -> dict:
        return {name: {"shape": list(t.shape), "values": t.values} for name, t in self.params.items()}

    def load_state_dict(self, doc: dict) -> None:
        values = {}
        for name, t in self.params.items():
            if name not in doc:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            entry = doc[name]
            values[name] = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        self.params.load_snapshot(values)


@dataclass
class Parser:
    """A model bundled with the vocabularies it was trained on."""

    model: Seq2Seq
    src_vocab: Vocab
    tgt_vocab: Vocab
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model.config.grammar:
            self.model.constraint = GrammarConstraint(self.tgt_vocab.itos, self.tgt_vocab.eos_id,
                                                      self.model.config.max_tgt_len,
                                                      self.meta.get("property_kinds"))

    def encode_utterance(self, words: Sequence[str]) -> list[int]:
        return self.src_vocab.encode(words)

    def encode_program(self, tokens: Sequence[str]) -> list[int]:
        return self.tgt_vocab.encode(list(tokens)) + [self.tgt_vocab.eos_id]

    def decode_program(self, ids: Sequence[int]) -> list[str]:
        toks = self.tgt_vocab.decode(ids)
        return toks

    def parse(self, words: Sequence[str], beam_width: int = 1) -> list[str]:
        ids = self.encode_utterance(words)
        if beam_width == 1:
            return self.decode_program(self.model.greedy(ids).tokens)
        return self.decode_program(self.model.beam_search(ids, beam_width).best.tokens)

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_config": asdict(self.model.config),
            "vocab_hashes": {"source": self.src_vocab.digest(), "target": self.tgt_vocab.digest()},
            "vocabularies": {"source": self.src_vocab.to_json(), "target": self.tgt_vocab.to_json()},
            "meta": self.meta,
            "parameters": self.model.state_dict(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> Parser:
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {doc.get('format_version')!r}")
        cfg = doc["model_config"]
        cfg["blocked_ids"] = tuple(cfg["blocked_ids"])
        model = Seq2Seq(ModelConfig(**cfg), 0)
        model.load_state_dict(doc["parameters"])
        src = Vocab.from_json(doc["vocabularies"]["source"])
        tgt = Vocab.from_json(doc["vocabularies"]["target"])
        hashes = doc["vocab_hashes"]
        if src.digest() != hashes["source"] or tgt.digest() != hashes["target"]:
            raise CheckpointError("vocabulary hash does not match stored vocabulary")
        return cls(model, src, tgt, doc.get("meta", {}))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> Parser:
        path = Path(path)
        if path.is_dir():
            path = path / "model.json"
        if not path.exists():
            from .errors import MissingInputError
            raise MissingInputError(f"no checkpoint at {path}")
        return cls.from_json(json.loads(path.read_text()))


def build_parser(utterances: Sequence[Sequence[str]], target_tokens: Sequence[str], *, num_layers: int = 1,
                 hidden_size: int = 100, embed_size: int = 64, max_src_len: int = 50, max_tgt_len: int = 35,
                 property_kinds: Mapping[str, str] | None = None, seed: int = 0,
                 meta: dict | None = None) -> Parser:
    """Fresh parser whose source vocabulary covers ``utterances``.

    Passing ``property_kinds`` turns on grammar-constrained decoding.
    """
    src = Vocab.source(utterances)
    tgt = Vocab.target(target_tokens)
    cfg = ModelConfig(len(src), len(tgt), num_layers, hidden_size, embed_size, max_src_len, max_tgt_len,
                      sos_id=tgt.sos_id, eos_id=tgt.eos_id, blocked_ids=(tgt.pad_id, tgt.sos_id, tgt.id(UNK)),
                      grammar=property_kinds is not None)
    meta = dict(meta or {})
    if property_kinds is not None:
        meta["property_kinds"] = dict(property_kinds)
    return Parser(Seq2Seq(cfg, seed), src, tgt, meta)
