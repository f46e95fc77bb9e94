import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from expr_corpus import DIMS, ERRORS, VALID, context, random_smooth_source
from submfg.coeffexpr import (BinOp, Call, CompiledExpr, Const, Dims, EvalContext, ExprError, ExprSyntaxError, Neg,
                              Pow, Var, diff_expr, eval_expr, parse_expr, substitute, to_source, variables_of)


@pytest.mark.parametrize("source,expected", VALID)
def test_corpus_valid(source, expected):
    value = eval_expr(parse_expr(source, DIMS), EvalContext(**context()))
    assert value == pytest.approx(expected, rel=1e-15, abs=1e-15)


@pytest.mark.parametrize("source,line,column,fragment", ERRORS)
def test_corpus_errors(source, line, column, fragment):
    with pytest.raises(ExprSyntaxError) as info:
        parse_expr(source, DIMS)
    assert (info.value.line, info.value.column) == (line, column)
    assert fragment in str(info.value)


def test_corpus_size():
    assert len(VALID) + len(ERRORS) >= 50


def test_syntax_error_lists_expected_tokens():
    with pytest.raises(ExprSyntaxError) as info:
        parse_expr("1 +", DIMS)
    assert "number" in info.value.expected


def test_measure_variables_need_declared_summaries():
    parse_expr("x1 - m1", Dims(1, 1, 1))
    with pytest.raises(ExprSyntaxError):
        parse_expr("x1 - m1", Dims(1, 1, 0))


def test_division_by_zero_is_flagged():
    ctx = EvalContext(x=np.array([0.0]))
    value = eval_expr(parse_expr("1/x1", (1, 1, 0)), ctx)
    assert not math.isfinite(value)
    assert "division by zero" in ctx.flags


@pytest.mark.parametrize("source,var,point,expected", [
    ("x1^2", "x1", dict(x=[3.0]), 6.0),
    ("x1*a1 + a1^2", "a1", dict(x=[3.0], a=[1.0]), 5.0),
    ("exp(2*x1)", "x1", dict(x=[0.0]), 2.0),
    ("tanh(x1)", "x1", dict(x=[0.0]), 1.0),
    ("x1/(1+x1^2)", "x1", dict(x=[1.0]), 0.0),
    ("t*x1", "t", dict(t=2.0, x=[5.0]), 5.0),
])
def test_derivative_values(source, var, point, expected):
    d = diff_expr(parse_expr(source, (1, 1, 0)), var)
    assert eval_expr(d, EvalContext(**point)) == pytest.approx(expected, abs=1e-12)


def test_derivative_of_square_prints_as_linear_term():
    d = diff_expr(parse_expr("x1^2", (1, 1, 0)), "x1")
    assert eval_expr(d, EvalContext(x=[1.7])) == pytest.approx(3.4)
    assert to_source(d).replace(" ", "") in {"2*x1", "2*x1^1", "x1*2"}


def test_exp_derivative_matches_central_difference():
    f = CompiledExpr("exp(2*x1)", (1, 1, 0))
    fd = (f(x=np.array([1e-6])) - f(x=np.array([-1e-6]))) / 2e-6
    assert float(f.diff("x1")(x=np.array([0.0]))) == pytest.approx(2.0)
    assert float(fd) == pytest.approx(2.0, abs=1e-8)


def test_kink_uses_left_branch_and_flags():
    e = parse_expr("max(x1, 0)", (1, 1, 0))
    d = diff_expr(e, "x1")
    ctx = EvalContext(x=[0.0])
    assert eval_expr(d, ctx) == 1.0
    eval_expr(e, ctx)
    assert "kink" in ctx.flags


def test_compiled_expr_broadcasts():
    f = CompiledExpr("x1 + a1*m1", (1, 1, 1))
    out = f(x=np.zeros((4, 3, 1)), a=np.ones((4, 3, 1)), m=np.full((4, 3, 1), 2.0))
    assert out.shape == (4, 3)
    np.testing.assert_allclose(out, 2.0)


def test_substitute_and_variables():
    e = parse_expr("x1*a1 + t", (1, 1, 0))
    frozen = substitute(e, {Var("a", 1): Const(0.0)})
    assert Var("a", 1) not in variables_of(frozen)
    assert eval_expr(frozen, EvalContext(t=1.0, x=[2.0])) == 1.0


def test_missing_context_value_raises():
    with pytest.raises(ExprError):
        eval_expr(parse_expr("x2", (2, 1, 0)), EvalContext(x=[1.0]))


# -- properties ----------------------------------------------------------------

leaf = st.one_of(
    st.floats(0, 100, allow_nan=False).map(Const),
    st.sampled_from([Var("t"), Var("x", 1), Var("x", 2), Var("a", 1), Var("m", 1), Var("y", 2)]),
)


def _extend(children):
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*/"), children, children).map(lambda a: BinOp(*a)),
        st.tuples(children, st.integers(-3, 4)).map(lambda a: Pow(*a)),
        st.tuples(st.sampled_from(["exp", "tanh", "abs"]), children).map(lambda a: Call(a[0], (a[1],))),
        st.tuples(st.sampled_from(["min", "max"]), children, children).map(lambda a: Call(a[0], (a[1], a[2]))),
        st.tuples(children, children, children).map(lambda a: Call("clamp", a)),
    )


ast_strategy = st.recursive(leaf, _extend, max_leaves=12)


@settings(max_examples=200, deadline=None)
@given(ast_strategy)
def test_print_parse_round_trip(ast):
    assert parse_expr(to_source(ast), (2, 1, 1)) == ast


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_symbolic_derivative_matches_central_difference(seed):
    rng = np.random.default_rng(seed)
    source = random_smooth_source(rng)
    f = CompiledExpr(source, DIMS)
    var = str(rng.choice(["t", "x1", "x2", "a1", "m1", "y1"]))
    ctx = {k: rng.uniform(-1, 1, 2) for k in "xamy"}
    ctx["t"] = rng.uniform(0, 1)
    sym = float(f.diff(var)(**ctx))
    h = 1e-6
    kind, idx = (var, None) if var == "t" else (var[0], int(var[1]) - 1)

    def at(delta):
        c = {k: np.array(v, copy=True) if k != "t" else v for k, v in ctx.items()}
        if kind == "t":
            c["t"] = c["t"] + delta
        else:
            c[kind][idx] += delta
        return float(f(**c))

    fd = (at(h) - at(-h)) / (2 * h)
    assert abs(sym - fd) <= 1e-6 * (1 + abs(sym)), source


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_evaluation_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    f = CompiledExpr(random_smooth_source(rng), DIMS)
    ctx = {k: rng.uniform(-1, 1, (5, 2)) for k in "xamy"}
    np.testing.assert_array_equal(f(**ctx), f(**ctx))
