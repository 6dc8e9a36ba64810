"""Supervised, REINFORCE and multi-teacher distillation training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Graph, RMSprop, softmax_rows
from .errors import ConfigError, ContractError
from .evaluation import accuracy, evaluate_parser
from .lang import EOS, KnowledgeBase, denotation_reward, string_match_reward
from .model import Parser

log = logging.getLogger(__name__)

REWARD_MODES = ("denotation", "string-match")


@dataclass
class TrainConfig:
    lr: float = 0.001
    decay: float = 0.9
    eps: float = 1e-8
    clip: float = 5.0
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 10
    eval_every: int = 0  # steps between validations; 0 means once per epoch
    beam_width: int = 5
    eval_beam_width: int | None = None  # defaults to beam_width
    reward_mode: str = "denotation"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"reward_mode must be one of {REWARD_MODES}")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size, patience must be positive and max_epochs non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def optimizer(self, parser: Parser) -> RMSprop:
        return RMSprop(parser.model.params, self.lr, self.decay, self.eps, self.clip)


class TrainLog:
    """Rows of (step, split, metric, value), written as CSV."""

    def __init__(self):
        self.rows: list[tuple[int, str, str, float]] = []

    def add(self, step: int, split: str, metric: str, value: float) -> None:
        self.rows.append((step, split, metric, float(value)))

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "split", "metric", "value"])
            w.writerows(self.rows)

    def series(self, split: str, metric: str) -> list[float]:
        return [v for _, s, m, v in self.rows if s == split and m == metric]


# --------------------------------------------------------------------------
# Losses


def _xent_over_steps(g: Graph, logits, targets, weights) -> object:
    """Sum over steps of weighted cross-entropies; ``targets[t]`` is (B, V)."""
    loss = None
    for t, lt in enumerate(logits):
        w = weights[:, t]
        if not np.any(w):
            continue
        term = g.softmax_xent(lt, targets[t], w)
        loss = term if loss is None else g.add(loss, term)
    return loss


def _one_hot(ids: np.ndarray, V: int) -> np.ndarray:
    out = np.zeros((len(ids), V))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def supervised_loss(g: Graph, parser: Parser, src, tgt):
    """Token cross-entropy against gold programs, averaged over real positions."""
    logits, targets, mask = parser.model.teacher_forced_logits(g, src, tgt)
    V = parser.model.config.tgt_vocab_size
    onehots = [_one_hot(targets[:, t], V) for t in range(targets.shape[1])]
    return _xent_over_steps(g, logits, onehots, mask / mask.sum())


def supervised_step(parser: Parser, opt: RMSprop, batch: Sequence) -> float:
    """One update on (utterance words, gold program tokens) pairs."""
    for utt, prog in batch:
        if prog is None:
            raise ContractError("supervised_step needs gold programs")
    src = [parser.encode_utterance(u) for u, _ in batch]
    tgt = [parser.encode_program(p) for _, p in batch]
    parser.model.params.zero_grad()
    g = Graph()
    loss = supervised_loss(g, parser, src, tgt)
    g.backward(loss)
    opt.step()
    return float(loss.value)


@dataclass
class RewardRecord:
    instance_id: str
    hypotheses: list[list[str]]
    rewards: list[float]
    baseline: float
    weights: list[float]  # beam-normalised probabilities
    centered: list[float]  # R - b, computed exactly


def centered_rewards(rewards: Sequence[float]) -> tuple[float, list[float]]:
    """Beam-mean baseline and ``R - b`` in exact rational arithmetic.

    Exactness makes the centred values sum to zero and makes them
    unchanged when every reward is shifted by a constant (as long as the
    shifted rewards are themselves exact floats).
    """
    exact = [Fraction(r) for r in rewards]
    b = sum(exact, Fraction(0)) / len(exact)
    return float(b), [float(r - b) for r in exact]


RewardFn = Callable[[list[str], object], float]


def make_reward_fn(mode: str, kbs: Mapping[str, KnowledgeBase]) -> RewardFn:
    if mode == "denotation":
        return lambda toks, inst: denotation_reward(toks, inst.denotation, kbs[inst.domain], inst.entity_map)
    if mode == "string-match":
        return lambda toks, inst: float(string_match_reward(toks, inst.program))
    raise ConfigError(f"unknown reward mode {mode!r}")


def reinforce_step(parser: Parser, opt: RMSprop | None, batch: Sequence, beam_width: int,
                   reward_fn: RewardFn) -> tuple[float, list[RewardRecord]]:
    """Beam-approximated policy gradient with the beam-mean baseline.

    For each instance x with beam B the gradient of the expected reward is
    estimated as sum_z w(z) (R(x,z) - b(x)) grad log P(z|x), where w(z) is
    P(z|x) renormalised within the beam and held constant. ``opt=None``
    leaves the gradients in place without updating.
    Returns the mean beam-approximated expected reward and per-instance records.
    """
    if beam_width < 2:
        raise ConfigError("REINFORCE needs beam_width >= 2 for its baseline")
    model = parser.model
    srcs = [parser.encode_utterance(inst.utterance) for inst in batch]
    beams = model.beam_search_batch(srcs, beam_width)
    rows_src, rows_tgt, coefs, records = [], [], [], []
    expected = 0.0
    for inst, src, beam in zip(batch, srcs, beams):
        logps = np.array([h.log_prob for h in beam.items])
        w = np.exp(logps - logps.max())
        w /= w.sum()
        hyps = [parser.decode_program(h.tokens) for h in beam.items]
        rewards = [float(reward_fn(toks, inst)) for toks in hyps]
        b, centered = centered_rewards(rewards)
        expected += float(np.dot(w, rewards))
        records.append(RewardRecord(inst.id, hyps, rewards, b, w.tolist(), centered))
        for h, wi, ci in zip(beam.items, w, centered):
            if ci != 0.0:
                rows_src.append(src)
                rows_tgt.append(h.tokens)
                coefs.append(wi * ci)
    model.params.zero_grad()
    if rows_tgt:
        g = Graph()
        logits, targets, mask = model.teacher_forced_logits(g, rows_src, rows_tgt)
        V = model.config.tgt_vocab_size
        onehots = [_one_hot(targets[:, t], V) for t in range(targets.shape[1])]
        # Minimising sum coef * (-log P) ascends sum w (R - b) log P.
        weights = mask * (np.array(coefs) / len(batch))[:, None]
        loss = _xent_over_steps(g, logits, onehots, weights)
        if loss is not None:
            g.backward(loss)
    if opt is not None:
        opt.step()
    return expected / len(batch), records


# --------------------------------------------------------------------------
# Distillation


@dataclass
class TeacherTrace:
    instance_id: str
    domain: str
    utterance: list[str]
    prefix: list[str]  # teacher's greedy program, end-of-sequence included
    rows: np.ndarray  # (len(prefix), |V|) distributions over the combined vocabulary

    def to_json(self) -> dict:
        return {"instance_id": self.instance_id, "domain": self.domain, "prefix": self.prefix,
                "rows": self.rows.tolist()}


def _vocab_projection(teacher: Parser, combined) -> np.ndarray:
    cols = np.array([combined.stoi[t] if t in combined else -1 for t in teacher.tgt_vocab.itos])
    if np.any(cols < 0):
        missing = [t for t, c in zip(teacher.tgt_vocab.itos, cols) if c < 0]
        raise ContractError(f"teacher tokens missing from combined vocabulary: {missing[:5]}")
    return cols


def teacher_traces(teacher: Parser, instances: Sequence, combined, temperature: float = 1.0,
                   batch_size: int = 64) -> list[TeacherTrace]:
    """Teacher distributions along the teacher's own greedy decode.

    Row j is the teacher's distribution over the combined vocabulary given
    the utterance and its greedy tokens before j.
    """
    model = teacher.model
    cols = _vocab_projection(teacher, combined)
    out = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        src = [teacher.encode_utterance(inst.utterance) for inst in chunk]
        greedy = model.greedy_batch(src)
        tgt = [h.tokens for h in greedy]
        logits, _, _ = model.teacher_forced_logits(Graph(record=False), src, tgt)
        for b, inst in enumerate(chunk):
            rows = np.zeros((len(tgt[b]), len(combined)))
            for j in range(len(tgt[b])):
                rows[j, cols] = softmax_rows(logits[j].value[b] / temperature)
            out.append(TeacherTrace(inst.id, inst.domain, list(inst.utterance),
                                    teacher.decode_program(tgt[b]), rows))
    return out


def teacher_trace(teacher: Parser, instance, combined, temperature: float = 1.0) -> TeacherTrace:
    return teacher_traces(teacher, [instance], combined, temperature)[0]


def distill_loss(g: Graph, student: Parser, traces: Sequence[TeacherTrace]):
    """Cross-entropy of student step distributions against teacher rows.

    Returns ``(sum_loss, n_steps)``; ``sum_loss`` is the multi-teacher
    objective summed over traces, steps and vocabulary.
    """
    V = student.model.config.tgt_vocab_size
    for tr in traces:
        if tr.rows.shape[1] != V:
            raise ContractError(f"trace rows have {tr.rows.shape[1]} columns, student vocabulary {V}")
    src = [student.encode_utterance(tr.utterance) for tr in traces]
    tgt = [student.tgt_vocab.encode(tr.prefix) for tr in traces]
    logits, targets, mask = student.model.teacher_forced_logits(g, src, tgt)
    T = targets.shape[1]
    dists = []
    for t in range(T):
        rows = np.zeros((len(traces), V))
        for b, tr in enumerate(traces):
            if t < len(tr.prefix):
                rows[b] = tr.rows[t]
            else:
                rows[b, 0] = 1.0  # padding; weight 0
        dists.append(rows)
    return _xent_over_steps(g, logits, dists, mask), float(mask.sum())


def distill_step(student: Parser, opt: RMSprop | None, traces: Sequence[TeacherTrace]) -> float:
    """One update towards the teachers' distributions; returns loss per step."""
    student.model.params.zero_grad()
    g = Graph()
    total, steps = distill_loss(g, student, traces)
    g.backward(g.scale(total, 1.0 / steps))
    if opt is not None:
        opt.step()
    return float(total.value) / steps


def write_traces(traces: Sequence[TeacherTrace], path) -> None:
    import json
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_json()) + "\n")


# --------------------------------------------------------------------------
# Training loops


@dataclass
class FitResult:
    best_metric: float
    steps: int
    epochs: int
    log: TrainLog = field(default_factory=TrainLog)


def _batches(items: list, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


def _fit(parser: Parser, items: list, step_fn, validate, cfg: TrainConfig, higher_is_better: bool,
         tag: str, log_: TrainLog | None = None) -> FitResult:
    """Shared loop: batches, periodic validation, patience, best-snapshot restore."""
    rng = np.random.default_rng(cfg.seed)
    opt = cfg.optimizer(parser)
    tl = log_ or TrainLog()
    sign = 1.0 if higher_is_better else -1.0
    best = validate()
    tl.add(0, "val", tag, best)
    best_snap = parser.model.params.snapshot()
    bad = 0
    step = epoch = 0
    steps_per_epoch = math.ceil(len(items) / cfg.batch_size)
    every = cfg.eval_every or steps_per_epoch
    for epoch in range(1, cfg.max_epochs + 1):
        for batch in _batches(items, cfg.batch_size, rng):
            value = step_fn(opt, batch)
            step += 1
            tl.add(step, "train", "objective", value)
            if step % every:
                continue
            metric = validate()
            tl.add(step, "val", tag, metric)
            if sign * metric > sign * best:
                best, bad = metric, 0
                best_snap = parser.model.params.snapshot()
            else:
                bad += 1
            if bad >= cfg.patience:
                break
        if bad >= cfg.patience:
            break
    parser.model.params.load_snapshot(best_snap)
    log.info("%s: best val %s %.3f after %d steps", tag, "metric", best, step)
    return FitResult(best, step, epoch, tl)


def train_supervised(parser: Parser, train: Sequence, val: Sequence, cfg: TrainConfig,
                     log_: TrainLog | None = None) -> FitResult:
    """Fit gold programs; early stopping on validation loss."""
    items = [(inst.utterance, inst.program) for inst in train]
    val_src = [parser.encode_utterance(inst.utterance) for inst in val]
    val_tgt = [parser.encode_program(inst.program) for inst in val]

    def validate():
        return float(supervised_loss(Graph(record=False), parser, val_src, val_tgt).value)

    return _fit(parser, items, lambda opt, b: supervised_step(parser, opt, b), validate, cfg,
                higher_is_better=False, tag="loss", log_=log_)


def _acc_validator(parser, val, kbs, width):
    return lambda: accuracy(evaluate_parser(parser, val, kbs, width))


def train_reinforce(parser: Parser, train: Sequence, val: Sequence, kbs: Mapping[str, KnowledgeBase],
                    cfg: TrainConfig, log_: TrainLog | None = None) -> FitResult:
    """Weak supervision from denotations (or the string-match proxy)."""
    reward_fn = make_reward_fn(cfg.reward_mode, kbs)
    width = cfg.eval_beam_width or cfg.beam_width

    def step(opt, batch):
        return reinforce_step(parser, opt, batch, cfg.beam_width, reward_fn)[0]

    return _fit(parser, list(train), step, _acc_validator(parser, val, kbs, width), cfg,
                higher_is_better=True, tag="accuracy", log_=log_)


def train_distill(student: Parser, traces: Sequence[TeacherTrace], val: Sequence,
                  kbs: Mapping[str, KnowledgeBase], cfg: TrainConfig, log_: TrainLog | None = None) -> FitResult:
    """Fit teacher traces; batches mix domains uniformly at random."""
    width = cfg.eval_beam_width or cfg.beam_width
    return _fit(student, list(traces), lambda opt, b: distill_step(student, opt, b),
                _acc_validator(student, val, kbs, width), cfg, higher_is_better=True, tag="accuracy", log_=log_)


def parallel_subset(train: Sequence, fraction: float) -> list:
    """The first ``fraction`` of each domain's training split (which is already shuffled)."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"parallel fraction must lie in [0, 1], got {fraction}")
    by_domain: dict[str, list] = {}
    for inst in train:
        by_domain.setdefault(inst.domain, []).append(inst)
    out = []
    for insts in by_domain.values():
        out += insts[:int(round(fraction * len(insts)))]
    return out


def pretrain_then(mode: str, parallel_fraction: float, parser: Parser, train: Sequence, val: Sequence,
                  kbs: Mapping[str, KnowledgeBase], cfg: TrainConfig, pretrain_cfg: TrainConfig | None = None,
                  teachers: Mapping[str, Parser] | None = None, log_: TrainLog | None = None) -> FitResult:
    """Supervised warm start on a parallel subset, then weak or distillation training.

    With fraction 0 this is exactly the plain weak / distill pipeline.
    """
    if mode not in ("weak", "distill"):
        raise ConfigError(f"mode must be 'weak' or 'distill', got {mode!r}")
    subset = parallel_subset(train, parallel_fraction)
    tl = log_ or TrainLog()
    if subset:
        train_supervised(parser, subset, val, pretrain_cfg or cfg, tl)
    if mode == "weak":
        return train_reinforce(parser, train, val, kbs, cfg, tl)
    if not teachers:
        raise ConfigError("distill mode needs teachers")
    traces = []
    for domain, teacher in teachers.items():
        traces += teacher_traces(teacher, [i for i in train if i.domain == domain], parser.tgt_vocab, cfg.temperature)
    return train_distill(parser, traces, val, kbs, cfg, tl)


def write_log(result: FitResult, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    result.log.write(path)
