import pytest
from hypothesis import given, settings, strategies as st

from webdamlog.parser import parse_rule
from webdamlog.syntax import (
    INTENSIONAL,
    ArityMismatch,
    Atom,
    Constant,
    Literal,
    Rule,
    RuleClass,
    Schema,
    SchemaError,
    UnboundHeadVar,
    UnboundPeerVar,
    UnknownRelation,
    UnsafeNegation,
    UnsafeRuleError,
    Variable,
    classify_rule,
    safety_errors,
    substitute,
    validate_rule,
)

ALBUM = (
    "album@sue($p, $n) :- allFriends@sue($n), photoLocation@$n($peer), photos@$peer($p), "
    "features@$peer($p, alice), features@$peer($p, bob)"
)


def kinds(errors):
    return [(type(e).__name__, e.subject) for e in errors]


class TestSafety:
    def test_album_rule_accepted(self):
        rule = parse_rule(ALBUM, "sue")
        assert validate_rule(rule) is rule

    def test_head_peer_never_bound(self):
        errors = safety_errors(parse_rule("r@$X(1) :- s@p(2)"))
        assert kinds(errors) == [("UnboundHeadVar", "X")]

    def test_negation_only_variable(self):
        errors = safety_errors(parse_rule("r@p($X) :- not s@p($X)"))
        assert ("UnsafeNegation", "X") in kinds(errors)

    def test_peer_variable_must_bind_earlier(self):
        errors = safety_errors(parse_rule("r@p($X) :- s@$P($X), t@p($P)"))
        assert kinds(errors) == [("UnboundPeerVar", "P")]

    def test_relation_variable_must_bind_earlier(self):
        errors = safety_errors(parse_rule("r@p($X) :- $R@p($X), t@p($R)"))
        assert isinstance(errors[0], UnboundPeerVar) and errors[0].position == "relation"

    def test_negated_variable_bound_later_is_unsafe(self):
        errors = safety_errors(parse_rule("r@p($X) :- not s@p($X), t@p($X)"))
        assert kinds(errors) == [("UnsafeNegation", "X")]

    def test_arity_mismatch(self):
        schema = Schema()
        schema.declare("s", "p", 2)
        errors = safety_errors(parse_rule("r@p($X) :- s@p($X)"), schema)
        assert isinstance(errors[0], ArityMismatch) and errors[0].expected == 2

    def test_validate_raises_with_all_errors(self):
        with pytest.raises(UnsafeRuleError) as info:
            validate_rule(parse_rule("r@$X($Y) :- s@p(2)"))
        assert {type(e) for e in info.value.errors} == {UnboundHeadVar}
        assert len(info.value.errors) == 2


class TestClassify:
    def setup_method(self):
        self.schema = Schema()

    def cls(self, text, at):
        return classify_rule(parse_rule(text, at), at, self.schema)

    def test_remote_body_is_e(self):
        assert self.cls("allFriends@sue($n) :- friends@aliceFB($n)", "sue") is RuleClass.E

    def test_persistence_rule_is_b(self):
        self.schema.declare("m", "p", 1)
        assert self.cls("m@p($U) :- m@p($U)", "p") is RuleClass.B

    def test_relation_variable_is_f(self):
        assert self.cls("r0@p($Y) :- r1@p($X), $X@p($Y)", "p") is RuleClass.F

    def test_a_c_d(self):
        self.schema.declare("v", "p", 1, INTENSIONAL)
        self.schema.declare("v", "q", 1, INTENSIONAL)
        assert self.cls("v@p($X) :- s@p($X)", "p") is RuleClass.A
        assert self.cls("m@q($X) :- s@p($X)", "p") is RuleClass.C
        assert self.cls("v@q($X) :- s@p($X)", "p") is RuleClass.D

    def test_unknown_head_without_auto_declare(self):
        with pytest.raises(UnknownRelation):
            classify_rule(parse_rule("h@q($X) :- s@p($X)"), "p", self.schema, auto_declare=False)


class TestSubstitute:
    def test_relation_variable(self):
        rule = parse_rule("$X@p($U) :- r1@p($X), s@p($U)", "p").with_id("p:1")
        out = substitute(rule, {"X": "t1"}, "#inst0")
        assert out == parse_rule('t1@p($U) :- r1@p("t1"), s@p($U)')
        assert out.id == "p:1#inst0"

    def test_empty_bindings(self):
        rule = parse_rule("h@p($X) :- s@p($X)").with_id("p:2")
        out = substitute(rule, {})
        assert out == rule and out.id == rule.id

    def test_absent_variable(self):
        rule = parse_rule("h@p($X) :- s@p($X)")
        assert substitute(rule, {"Q": 3}) == rule


class TestSchema:
    def test_kind_conflict(self):
        s = Schema()
        s.declare("r", "p", 1, "ext")
        with pytest.raises(SchemaError):
            s.declare("r", "p", 1, INTENSIONAL)

    def test_sort_conflict(self):
        s = Schema()
        s.declare("r", "p", 1)
        with pytest.raises(ArityMismatch):
            s.declare("r", "p", 2)

    def test_disjoint(self):
        s = Schema()
        s.declare("a", "p", 1)
        s.declare("b", "p", 0, INTENSIONAL)
        assert s.extensional == {("a", "p")} and s.intensional == {("b", "p")}
        assert not (s.extensional & s.intensional)


# --------------------------------------------------------------------------
# Properties
# --------------------------------------------------------------------------

names = st.sampled_from(["r", "s", "t"])
peers = st.sampled_from(["p", "q"])
varnames = st.sampled_from(["X", "Y", "Z"])
values = st.one_of(st.integers(-5, 5), st.sampled_from(["a", "b"]))


def term(kind_names):
    return st.one_of(kind_names.map(Constant), varnames.map(Variable))


@st.composite
def atoms(draw, ground_names=False):
    rel = names.map(Constant) if ground_names else term(names)
    peer = peers.map(Constant) if ground_names else term(peers)
    args = draw(st.lists(st.one_of(values.map(Constant), varnames.map(Variable)), max_size=3))
    return Atom(draw(rel), draw(peer), tuple(args))


@st.composite
def rules(draw, ground_names=False):
    head = draw(atoms(ground_names))
    body = draw(st.lists(st.builds(Literal, atoms(ground_names), st.booleans()), min_size=1, max_size=4))
    return Rule(head, tuple(body))


@settings(max_examples=300, deadline=None)
@given(rules(ground_names=True), peers)
def test_classify_total_on_ground_rules(rule, at):
    assert classify_rule(rule, at, Schema()) in set(RuleClass) - {RuleClass.F}


@settings(max_examples=300, deadline=None)
@given(rules(), peers)
def test_classify_total(rule, at):
    assert isinstance(classify_rule(rule, at, Schema()), RuleClass)


@settings(max_examples=300, deadline=None)
@given(rules())
def test_unbound_head_peer_rejected(rule):
    peer = rule.head.peer
    if isinstance(peer, Variable):
        positive = {v for l in rule.body if l.positive for v in l.atom.variables()}
        if peer.name not in positive:
            assert any(isinstance(e, UnboundHeadVar) and e.subject == peer.name for e in safety_errors(rule))


@settings(max_examples=300, deadline=None)
@given(rules(), st.dictionaries(varnames, values, max_size=3), st.dictionaries(varnames, values, max_size=3))
def test_substitute_disjoint_commutes(rule, a, b):
    b = {k: v for k, v in b.items() if k not in a}
    assert substitute(substitute(rule, a), b) == substitute(substitute(rule, b), a)
