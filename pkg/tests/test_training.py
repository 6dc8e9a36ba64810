from types import SimpleNamespace as NS

import numpy as np
import pytest

from unisem.autodiff import Graph, softmax_rows
from unisem.errors import ConfigError, ContractError
from unisem.model import build_parser
from unisem.training import (TeacherTrace, TrainConfig, centered_rewards, distill_loss, distill_step,
                             make_reward_fn, parallel_subset, pretrain_then, reinforce_step, supervised_step,
                             teacher_traces, train_supervised)
from unisem.vocab import Vocab

WORDS = [["how", "many", "red"], ["largest", "one"], ["blue", "things"], ["count", "blue"]]
TOKENS = ["count", "filter", "argmax", "t", "c", "=", "r", "b", "s"]


def toy_parser(seed=0, **kw):
    kw.setdefault("hidden_size", 8)
    kw.setdefault("embed_size", 6)
    return build_parser(WORDS, TOKENS, seed=seed, **kw)


def toy_instances():
    return [NS(id=f"i{k}", domain="toy", utterance=w) for k, w in enumerate(WORDS)]


def grads(parser):
    return {name: t.grad.copy() for name, t in parser.model.params.items()}


# -- baseline --------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_centered_rewards_sum_to_zero(seed):
    rng = np.random.default_rng(seed)
    rewards = rng.random(rng.integers(2, 30)).tolist()
    b, centered = centered_rewards(rewards)
    assert abs(sum(centered)) <= 1e-12
    assert b == pytest.approx(np.mean(rewards), abs=1e-15)


@pytest.mark.parametrize("shift", [0.5, -0.25, 3.0, 1024.0])
def test_centered_rewards_shift_invariant(shift):
    rewards = [0.0, 0.25, 1.0, 0.5, 0.125]
    _, a = centered_rewards(rewards)
    _, b = centered_rewards([r + shift for r in rewards])
    assert a == b


def test_reinforce_records_baseline_per_beam():
    p = toy_parser()
    rng = np.random.default_rng(0)
    rf = lambda toks, inst: float(rng.random())
    _, records = reinforce_step(p, None, toy_instances(), 5, rf)
    for rec in records:
        assert abs(sum(rec.centered)) <= 1e-12
        assert rec.baseline == pytest.approx(np.mean(rec.rewards))
        assert sum(rec.weights) == pytest.approx(1.0)


@pytest.mark.parametrize("shift", [0.5, 2.0, -1.0])
def test_reinforce_gradients_bit_identical_under_reward_shift(shift):
    p = toy_parser(seed=2)
    table = {}

    def rf(toks, inst):
        return table.setdefault((inst.id, tuple(toks)), [0.0, 0.25, 0.5, 1.0][len(table) % 4])

    reinforce_step(p, None, toy_instances(), 6, rf)
    base = grads(p)
    reinforce_step(p, None, toy_instances(), 6, lambda t, i: rf(t, i) + shift)
    shifted = grads(p)
    for name in base:
        assert np.array_equal(base[name], shifted[name]), name


def test_constant_reward_gives_zero_gradient():
    p = toy_parser()
    reinforce_step(p, None, toy_instances(), 5, lambda t, i: 0.7)
    assert all(not np.any(g) for g in grads(p).values())


def test_reinforce_matches_weighted_log_likelihood_gradient():
    """The update equals the gradient of sum_z w (R - b) log P computed by hand."""
    p = toy_parser(seed=4)
    inst = toy_instances()[0]
    rf = lambda toks, i: float(len(toks) % 3) / 2
    _, (rec,) = reinforce_step(p, None, [inst], 4, rf)
    got = grads(p)
    src = p.encode_utterance(inst.utterance)
    expected = {n: np.zeros_like(v) for n, v in got.items()}
    for toks, w, c in zip(rec.hypotheses, rec.weights, rec.centered):
        ids = p.tgt_vocab.encode(toks)
        p.model.params.zero_grad()
        g = Graph()
        logits, targets, mask = p.model.teacher_forced_logits(g, [src], [ids])
        V = p.model.config.tgt_vocab_size
        loss = None
        for t, lt in enumerate(logits):
            term = g.softmax_xent(g.rows(lt, [0]), np.eye(V)[[targets[0, t]]])
            loss = term if loss is None else g.add(loss, term)
        g.backward(loss)
        for n, t in p.model.params.items():
            expected[n] += w * c * t.grad
    for n in got:
        assert np.allclose(got[n], expected[n], atol=1e-12), n


def test_reinforce_needs_two_hypotheses():
    with pytest.raises(ConfigError):
        reinforce_step(toy_parser(), None, toy_instances(), 1, lambda t, i: 0.0)


def test_toy_task_reaches_high_expected_reward():
    """Full-enumeration beam on a two-symbol task with one rewarded program."""
    inst = NS(id="a", domain="toy", utterance=["a"])
    p = build_parser([["a"]], ["x", "y"], hidden_size=16, embed_size=16, max_tgt_len=3, seed=0)
    gold = p.encode_program(["x", "y"])
    rf = lambda toks, i: float(toks == ["x", "y", "</s>"])
    opt = TrainConfig(lr=0.01).optimizer(p)
    for step in range(200):
        reinforce_step(p, opt, [inst], 15, rf)
        if np.exp(p.model.sequence_log_prob(p.encode_utterance(["a"]), gold)) >= 0.95:
            break
    assert np.exp(p.model.sequence_log_prob(p.encode_utterance(["a"]), gold)) >= 0.95
    assert step < 200


# -- rewards ---------------------------------------------------------------


def test_reward_modes():
    with pytest.raises(ConfigError):
        make_reward_fn("bleu", {})
    with pytest.raises(ConfigError):
        TrainConfig(reward_mode="bleu")
    rf = make_reward_fn("string-match", {})
    assert rf(["a", "</s>"], NS(program=["a"])) == 1.0


# -- distillation ----------------------------------------------------------


def traces_from(teacher, student_vocab):
    return teacher_traces(teacher, toy_instances(), student_vocab)


@pytest.mark.parametrize("seed", range(3))
def test_distill_fixed_point(seed):
    teacher = toy_parser(seed)
    student = toy_parser(seed)
    student.model.params.load_snapshot(teacher.model.params.snapshot())
    traces = traces_from(teacher, student.tgt_vocab)
    g = Graph()
    src = [student.encode_utterance(tr.utterance) for tr in traces]
    tgt = [student.tgt_vocab.encode(tr.prefix) for tr in traces]
    logits, targets, mask = student.model.teacher_forced_logits(g, src, tgt)
    worst = 0.0
    for t, lt in enumerate(logits):
        rows = np.array([tr.rows[t] if t < len(tr.prefix) else np.eye(lt.shape[1])[0] for tr in traces])
        dlogits = mask[:, t:t + 1] * (softmax_rows(lt.value) - rows)
        worst = max(worst, float(np.max(np.abs(dlogits))))
    assert worst <= 1e-10
    distill_step(student, None, traces)
    assert max(float(np.max(np.abs(gr))) for gr in grads(student).values()) <= 1e-10


def test_one_hot_traces_reduce_to_cross_entropy():
    student = toy_parser(1)
    progs = [["count", "filter", "t", "c", "=", "r"], ["argmax", "t", "s"], ["filter", "t", "c", "=", "b"],
             ["count", "filter", "t", "c", "=", "b"]]
    V = len(student.tgt_vocab)
    traces = []
    for inst, prog in zip(toy_instances(), progs):
        ids = student.encode_program(prog)
        traces.append(TeacherTrace(inst.id, "toy", inst.utterance, student.decode_program(ids), np.eye(V)[ids]))
    total, steps = distill_loss(Graph(record=False), student, traces)
    src = [student.encode_utterance(w) for w in WORDS]
    lp = student.model.sequence_log_probs(src, [student.encode_program(p) for p in progs])
    assert float(total.value) == pytest.approx(-lp.sum(), abs=1e-9)
    assert steps == sum(len(p) + 1 for p in progs)


def test_uniform_teacher_row_costs_at_least_log_v():
    student = toy_parser(2)
    V = len(student.tgt_vocab)
    allowed = [i for i in range(V) if i not in student.model.config.blocked_ids]
    row = np.zeros(V)
    row[allowed[:4]] = 0.25
    tr = TeacherTrace("u", "toy", WORDS[0], [student.tgt_vocab.itos[allowed[0]]], row[None, :])
    total, steps = distill_loss(Graph(record=False), student, [tr])
    assert steps == 1 and float(total.value) >= np.log(4) - 1e-12


def test_traces_cover_combined_vocabulary():
    teacher = build_parser(WORDS, ["count", "t"], hidden_size=8, embed_size=6, seed=0)
    combined = Vocab.target(TOKENS)
    for tr in traces_from(teacher, combined):
        assert tr.rows.shape == (len(tr.prefix), len(combined))
        assert np.allclose(tr.rows.sum(axis=1), 1.0)
        assert tr.rows[:, combined.id("filter")].max() == 0.0


def test_traces_reject_tokens_missing_from_combined():
    teacher = toy_parser()
    with pytest.raises(ContractError):
        traces_from(teacher, Vocab.target(["count"]))


def test_distill_rejects_mismatched_width():
    student = toy_parser()
    tr = TeacherTrace("u", "toy", WORDS[0], ["t"], np.ones((1, 3)) / 3)
    with pytest.raises(ContractError):
        distill_loss(Graph(), student, [tr])


def test_distillation_moves_student_towards_teacher():
    teacher, student = toy_parser(0), toy_parser(5)
    traces = traces_from(teacher, student.tgt_vocab)
    opt = TrainConfig(lr=0.01).optimizer(student)
    first = distill_step(student, opt, traces)
    for _ in range(60):
        last = distill_step(student, opt, traces)
    assert last < first


# -- supervised and pretraining -------------------------------------------


def test_supervised_loss_decreases():
    p = toy_parser(3)
    batch = list(zip(WORDS, [["count", "filter", "t", "c", "=", "r"], ["argmax", "t", "s"],
                             ["filter", "t", "c", "=", "b"], ["count", "filter", "t", "c", "=", "b"]]))
    opt = TrainConfig(lr=0.02).optimizer(p)
    losses = [supervised_step(p, opt, batch) for _ in range(300)]
    assert losses[-1] < 0.5 * losses[0]
    assert [p.parse(w) for w, _ in batch] == [list(prog) + ["</s>"] for _, prog in batch]


def test_supervised_step_requires_programs():
    p = toy_parser()
    with pytest.raises(ContractError):
        supervised_step(p, TrainConfig().optimizer(p), [(WORDS[0], None)])


def test_early_stopping_restores_best_snapshot():
    p = toy_parser(3)
    progs = [["count", "t"], ["argmax", "t", "s"], ["filter", "t", "c", "=", "b"], ["count", "t"]]
    train = [NS(utterance=w, program=pr, domain="toy") for w, pr in zip(WORDS, progs)]
    res = train_supervised(p, train, train, TrainConfig(lr=0.05, max_epochs=40, patience=3, batch_size=4))
    from unisem.training import supervised_loss
    src = [p.encode_utterance(w) for w in WORDS]
    tgt = [p.encode_program(pr) for pr in progs]
    assert float(supervised_loss(Graph(record=False), p, src, tgt).value) == pytest.approx(res.best_metric)


@pytest.mark.parametrize("fraction", [-0.1, 1.5])
def test_parallel_fraction_out_of_range(fraction):
    with pytest.raises(ConfigError):
        parallel_subset([], fraction)


def test_parallel_subset_is_per_domain_prefix():
    train = [NS(domain=d, id=f"{d}{k}") for d in "ab" for k in range(10)]
    sub = parallel_subset(train, 0.3)
    assert [i.id for i in sub] == ["a0", "a1", "a2", "b0", "b1", "b2"]
    assert parallel_subset(train, 0.0) == []


def test_pretrain_mode_validation():
    with pytest.raises(ConfigError):
        pretrain_then("supervised", 0.1, toy_parser(), [], [], {}, TrainConfig())
    with pytest.raises(ConfigError):
        pretrain_then("distill", 0.0, toy_parser(), [], [], {}, TrainConfig(max_epochs=0))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(temperature=0.0)
