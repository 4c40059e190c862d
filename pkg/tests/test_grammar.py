import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kernevo.grammar import (
    OPERATORS,
    TERMINALS,
    GrammarConfig,
    Node,
    ParseError,
    depth,
    gen_random_tree,
    hyperparam_slots,
    iter_nodes,
    n_slots,
    op,
    parse,
    replace,
    serialize,
    size,
    subtree,
    terminal,
    type_check,
)


def se_tree():
    return op("mul", terminal("hp"), op("expneg", op("square", terminal("r"))))


class TestConstruction:
    def test_depth_and_size(self):
        t = se_tree()
        assert depth(t) == 3
        assert size(t) == 5
        assert depth(terminal("r")) == 0

    def test_unknown_primitive_rejected(self):
        with pytest.raises(ValueError):
            terminal("x")
        with pytest.raises(ValueError):
            op("add", terminal("r"))

    def test_type_check_catches_bad_arity(self):
        assert type_check(se_tree())
        assert not type_check(Node("add", (Node("r"),)))
        assert not type_check(Node("r", (Node("r"),)))
        assert not type_check(Node("cos", (Node("r"),)))

    def test_replace_and_subtree(self):
        t = se_tree()
        t2 = replace(t, (1, 0), terminal("s"))
        assert serialize(t2) == "mul(hp, expneg(s))"
        assert subtree(t2, (1, 0)) == terminal("s")
        # original untouched
        assert serialize(t) == "mul(hp, expneg(square(r)))"

    def test_preorder_paths(self):
        paths = [p for p, _ in iter_nodes(se_tree())]
        assert paths == [(), (0,), (1,), (1, 0), (1, 0, 0)]


class TestSlots:
    def test_single_distance(self):
        slots = hyperparam_slots(terminal("r"))
        assert [(s.kind, s.role) for s in slots] == [("r", "lengthscale")]

    def test_preorder_enumeration(self):
        slots = hyperparam_slots(se_tree())
        assert [s.role for s in slots] == ["constant", "lengthscale"]
        assert [s.path for s in slots] == [(0,), (1, 0, 0)]

    def test_literal_one_has_none(self):
        assert hyperparam_slots(terminal("1")) == []
        assert n_slots(terminal("1")) == 0

    def test_shifted_dot_has_two(self):
        roles = [s.role for s in hyperparam_slots(op("add", terminal("s"), terminal("wn")))]
        assert roles == ["lengthscale", "shift", "noise"]

    def test_deterministic(self):
        t = gen_random_tree(GrammarConfig(), np.random.default_rng(5))
        assert hyperparam_slots(t) == hyperparam_slots(t)
        assert n_slots(t) == len(hyperparam_slots(t))


class TestText:
    def test_round_trip_example(self):
        t = op("add", terminal("r"), terminal("1"))
        assert serialize(t) == "add(r, 1)"
        assert parse("add(r, 1)") == t

    def test_parse_depth(self):
        assert depth(parse("mul(hp, expneg(square(r)))")) == 3

    def test_whitespace_ignored(self):
        assert parse("  mul ( hp ,expneg( square(r) ) ) ") == se_tree()

    @pytest.mark.parametrize(
        "text",
        ["add(r", "add(r,)", "add(r, 1, 1)", "foo(r)", "r)", "", "expneg()", "add(r 1)", "r r"],
    )
    def test_malformed(self, text):
        with pytest.raises(ParseError):
            parse(text)

    def test_error_reports_end_position(self):
        with pytest.raises(ParseError) as info:
            parse("add(r")
        assert info.value.position == len("add(r")


class TestRandomTrees:
    def test_zero_budget_gives_terminal(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            t = gen_random_tree(GrammarConfig(), rng, max_depth=0)
            assert t.name in TERMINALS and not t.children

    def test_coverage(self):
        rng = np.random.default_rng(1)
        cfg = GrammarConfig()
        seen = set()
        for _ in range(10_000):
            seen.update(n.name for _, n in iter_nodes(gen_random_tree(cfg, rng)))
        assert seen == set(TERMINALS) | set(OPERATORS)

    def test_weights_exclude_primitives(self):
        cfg = GrammarConfig(
            terminal_weights={"r": 1.0, "hp": 0.0},
            operator_weights={"mul": 1.0},
        )
        rng = np.random.default_rng(2)
        for _ in range(200):
            names = {n.name for _, n in iter_nodes(gen_random_tree(cfg, rng))}
            assert names <= {"r", "mul"}

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GrammarConfig(max_depth=0)
        with pytest.raises(ValueError):
            GrammarConfig(terminal_weights={"q": 1.0})
        with pytest.raises(ValueError):
            GrammarConfig(terminal_weights={"r": 0.0})

    @settings(max_examples=300, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), max_depth=st.integers(1, 8))
    def test_generated_trees_valid_and_round_trip(self, seed, max_depth):
        t = gen_random_tree(GrammarConfig(max_depth=max_depth), np.random.default_rng(seed))
        assert type_check(t)
        assert depth(t) <= max_depth
        assert parse(serialize(t)) == t
