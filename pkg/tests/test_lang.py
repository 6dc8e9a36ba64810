import numpy as np
import pytest

from oracle import brute_force, random_kb, random_program
from unisem.errors import ExecutionError, ProgramParseError
from unisem.lang import (Count, Denotation, Filter, GetProperty, KnowledgeBase, Placeholder, Superlative, TypeSet,
                         execute, hard_match, parse_program, run_tokens, serialize, soft_f1, string_match_reward)


@pytest.fixture
def kb():
    ents = {
        "en.thing.a": {"size": 3, "colour": "red", "owner": "en.person.x"},
        "en.thing.b": {"size": 5, "colour": "blue", "owner": "en.person.y"},
        "en.thing.c": {"size": 5, "colour": "red", "owner": "en.person.x"},
        "en.thing.d": {"size": 1, "colour": "green", "owner": "en.person.y"},
        "en.thing.e": {"size": 2, "colour": "blue", "owner": "en.person.x"},
    }
    return KnowledgeBase("things", "en.thing", {"size": "number", "colour": "string", "owner": "entity"}, ents)


def ents(*names):
    return Denotation.entities(f"en.thing.{n}" for n in names)


def test_atomic_program():
    assert parse_program(["en.recipe"]) == TypeSet("en.recipe")


def test_filter_with_getproperty_rhs():
    toks = "filter en.recipe posting_date >= ( getProperty e0 posting_date )".split()
    expr = parse_program(toks)
    assert expr == Filter(TypeSet("en.recipe"), "posting_date", ">=", GetProperty(Placeholder("e0"), "posting_date"))
    assert serialize(expr) == toks


@pytest.mark.parametrize("toks,pos", [
    ("filter en.recipe", 2),
    ("en.recipe en.recipe", 1),
    ("count count en.recipe", 1),
    ("filter en.recipe size ~ 3", 3),
    ("filter en.recipe size = ( getProperty e0 size", 8),
    (")", 0),
])
def test_parse_error_reports_first_offending_position(toks, pos):
    with pytest.raises(ProgramParseError) as err:
        parse_program(toks.split())
    assert err.value.position == pos


def test_count_of_typeset(kb):
    assert execute(Count(TypeSet("en.thing")), kb) == Denotation.count(5)


def test_superlative_ties_return_all(kb):
    assert execute(Superlative(TypeSet("en.thing"), "argmax", "size"), kb) == ents("b", "c")


@pytest.mark.parametrize("program,expected", [
    ("filter en.thing colour = red", ents("a", "c")),
    ("filter en.thing size >= ( getProperty e0 size )", ents("a", "b", "c")),
    ("filter en.thing owner = e1", ents("b", "d")),
    ("argmin filter en.thing colour != green size", ents("e")),
    ("getProperty filter en.thing size > 2 colour", Denotation.values(["red", "blue"])),
    ("count filter en.thing size < 3", Denotation.count(2)),
])
def test_execute_examples(kb, program, expected):
    emap = {"e0": "en.thing.a", "e1": "en.person.y"}
    assert execute(parse_program(program.split()), kb, emap) == expected


@pytest.mark.parametrize("program", [
    "filter en.thing size = e3",
    "filter en.thing weight = 3",
    "argmax en.thing colour",
    "filter en.thing colour < 3",
    "en.person",
])
def test_execution_errors(kb, program):
    with pytest.raises(ExecutionError):
        execute(parse_program(program.split()), kb, {})
    assert run_tokens(program.split(), kb, {}) is None


def test_interpreter_matches_brute_force_oracle():
    rng = np.random.default_rng(1234)
    agree = 0
    for i in range(1000):
        kb = random_kb(rng)
        toks, emap = random_program(rng, kb)
        expected = brute_force(toks, kb, emap)
        got = run_tokens(toks, kb, emap)
        if expected is None:
            assert got is None, toks
        else:
            assert got is not None, toks
            assert (got.kind, set(got.items)) == expected, toks
        agree += 1
    assert agree == 1000


def test_execute_is_deterministic_and_pure(kb):
    expr = parse_program("argmax filter en.thing colour = red size".split())
    before = kb.to_json()
    assert execute(expr, kb) == execute(expr, kb)
    assert kb.to_json() == before


@pytest.mark.parametrize("seed", range(20))
def test_subset_laws(seed):
    rng = np.random.default_rng(seed)
    kb = random_kb(rng)
    for _ in range(20):
        toks, emap = random_program(rng, kb, noisy=False)
        expr = parse_program(toks)
        if isinstance(expr, (Filter, Superlative)):
            inner = execute(expr.source, kb, emap)
            assert execute(expr, kb, emap).items <= inner.items
        if isinstance(expr, Count):
            assert next(iter(execute(expr, kb, emap).items)) == len(execute(expr.source, kb, emap))


def test_round_trip_random_programs():
    rng = np.random.default_rng(7)
    for _ in range(300):
        kb = random_kb(rng)
        toks, _ = random_program(rng, kb, noisy=False)
        assert serialize(parse_program(toks)) == toks


# -- metrics ---------------------------------------------------------------


def test_set_equality_ignores_order():
    assert hard_match(Denotation.entities(["a", "b"]), Denotation.entities(["b", "a"])) == 1


def test_subset_is_not_hard_match():
    assert hard_match(Denotation.entities(["a"]), Denotation.entities(["a", "b"])) == 0


def test_failed_program_scores_zero():
    gold = Denotation.entities(["a"])
    assert hard_match(None, gold) == 0 and soft_f1(None, gold) == 0.0


@pytest.mark.parametrize("pred,gold,f1", [
    (["a", "b"], ["a", "b"], 1.0),
    (["a"], ["b"], 0.0),
    (["a", "b"], ["b", "c"], 0.5),
    ([], [], 1.0),
    ([], ["a"], 0.0),
    (["a"], [], 0.0),
])
def test_soft_f1_cases(pred, gold, f1):
    assert soft_f1(Denotation.entities(pred), Denotation.entities(gold)) == f1


def test_soft_f1_matches_direct_precision_recall():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p = set(rng.choice(8, size=rng.integers(1, 8), replace=False).tolist())
        g = set(rng.choice(8, size=rng.integers(1, 8), replace=False).tolist())
        tp = len(p & g)
        expected = 0.0 if tp == 0 else 2 * (tp / len(p)) * (tp / len(g)) / (tp / len(p) + tp / len(g))
        assert soft_f1(Denotation.values(p), Denotation.values(g)) == pytest.approx(expected, abs=1e-15)


def test_counts_compare_as_singletons():
    assert soft_f1(Denotation.count(3), Denotation.count(3)) == 1.0
    assert soft_f1(Denotation.count(3), Denotation.count(4)) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_metric_properties_on_random_denotations(seed):
    rng = np.random.default_rng(seed)
    kb = random_kb(rng)
    dens = []
    for _ in range(15):
        toks, emap = random_program(rng, kb, noisy=False)
        dens.append(run_tokens(toks, kb, emap))
    for d in dens:
        assert hard_match(d, d) == 1 and soft_f1(d, d) == 1.0
    for a in dens:
        for b in dens:
            assert soft_f1(a, b) == soft_f1(b, a)
            if hard_match(a, b):
                assert soft_f1(a, b) == 1.0


def test_string_match():
    assert string_match_reward(["a", "b", "</s>"], ["a", "b"]) == 1
    assert string_match_reward(["b", "a"], ["a", "b"]) == 0


def test_string_match_misses_equivalent_programs(kb):
    a = "filter en.thing size > 4".split()
    b = "filter en.thing size >= 5".split()
    assert execute(parse_program(a), kb) == execute(parse_program(b), kb)
    assert string_match_reward(a, b) == 0


def test_kb_schema_is_enforced():
    with pytest.raises(ValueError):
        KnowledgeBase("d", "en.x", {"p": "number"}, {"en.x.a": {"q": 1}})


def test_kb_json_round_trip(kb, tmp_path):
    kb.save(tmp_path / "kb.json")
    assert KnowledgeBase.load(tmp_path / "kb.json") == kb or KnowledgeBase.load(tmp_path / "kb.json").to_json() == \
        kb.to_json()
