import numpy as np
import pytest

from constants import TOLERANCES
from errors import GraphLoadError, NonFiniteError, SecondOrderUnsupported, ShapeError, UnknownOp
from tensor_ops import (NUMERIC, OPS, Tape, as_value, backward_slots, finite_difference, get_op, parse_op,
                        register_op)

RNG = np.random.default_rng(1234)


def _positive(shape):
    return RNG.uniform(0.5, 2.0, size=shape)


def _normal(shape):
    return RNG.normal(size=shape)


# (op, argument generators, attrs)
VJP_CASES = [
    ("add", [(_normal, (3,)), (_normal, (3,))], {}),
    ("add", [(_normal, ()), (_normal, (3,))], {}),
    ("sub", [(_normal, (3,)), (_normal, ())], {}),
    ("mul", [(_normal, (3,)), (_normal, ())], {}),
    ("div", [(_normal, (3,)), (_positive, (3,))], {}),
    ("neg", [(_normal, (2, 2))], {}),
    ("exp", [(_normal, (3,))], {}),
    ("log", [(_positive, (3,))], {}),
    ("sqrt", [(_positive, (3,))], {}),
    ("square", [(_normal, (3,))], {}),
    ("pow", [(_positive, (3,))], {"p": 3.0}),
    ("shift", [(_normal, (3,))], {"c": 1.5}),
    ("scale", [(_normal, (3,))], {"c": -2.0}),
    ("identity", [(_normal, (3,))], {}),
    ("sigmoid", [(_normal, (3,))], {}),
    ("log_sigmoid", [(_normal, (3,))], {}),
    ("tanh", [(_normal, (3,))], {}),
    ("relu", [(_positive, (3,))], {}),
    ("sum", [(_normal, (4,))], {}),
    ("mean", [(_normal, (4,))], {}),
    ("dot", [(_normal, (3,)), (_normal, (3,))], {}),
    ("matvec", [(_normal, (2, 3)), (_normal, (3,))], {}),
    ("vecmat", [(_normal, (3,)), (_normal, (3, 2))], {}),
    ("outer", [(_normal, (2,)), (_normal, (3,))], {}),
    ("matmul", [(_normal, (2, 3)), (_normal, (3, 4))], {}),
    ("transpose", [(_normal, (2, 3))], {}),
    ("affine", [(_normal, (2, 3)), (_normal, (3,)), (_normal, (2,))], {}),
    ("affine", [(_normal, ()), (_normal, ()), (_normal, ())], {}),
    ("softmax", [(_normal, (4,))], {}),
    ("log_softmax", [(_normal, (4,))], {}),
    ("concat", [(_normal, ()), (_normal, (2,))], {}),
    ("slice", [(_normal, (5,))], {"start": 1, "stop": 3}),
    ("index", [(_normal, (4,))], {"k": 2}),
    ("embed", [(_normal, (2,))], {"start": 1, "n": 5}),
    ("broadcast", [(_normal, ())], {"shape": (3,)}),
    ("bernoulli_loglik", [(_normal, (3,)), (_normal, (3,))], {}),
    ("reparam", [(_normal, (3,)), (_positive, (3,)), (_normal, (3,))], {}),
    ("reparam_logsigma", [(_normal, ()), (_normal, ()), (_normal, (3,))], {}),
]


class TestRegistry:
    def test_unknown_op(self):
        with pytest.raises(UnknownOp):
            get_op("no_such_op")
        with pytest.raises(KeyError):
            get_op("no_such_op")

    def test_parse_attributes(self):
        spec, attrs = parse_op("pow:3")
        assert spec.name == "pow" and attrs == {"p": 3.0}
        assert parse_op("slice:0:2")[1] == {"start": 0, "stop": 2}
        assert parse_op("broadcast:2:3")[1] == {"shape": (2, 3)}

    @pytest.mark.parametrize("text", ["identity:1", "pow:x", "slice:1", "index:a"])
    def test_bad_attributes(self, text):
        with pytest.raises(GraphLoadError):
            parse_op(text)

    def test_duplicate_registration_rejected(self):
        with pytest.raises(ValueError):
            register_op("add", np.add)

    def test_arity(self):
        with pytest.raises(ShapeError):
            get_op("add").check_arity(3)
        with pytest.raises(ShapeError):
            get_op("lookup").check_arity(1)

    @pytest.mark.parametrize("name,shapes", [
        ("dot", [(3,), (4,)]),
        ("matvec", [(2, 3), (2,)]),
        ("add", [(2,), (3,)]),
        ("softmax", [()]),
        ("affine", [(2, 3), (3,), (3,)]),
    ])
    def test_shape_errors_name_the_op(self, name, shapes):
        with pytest.raises(ShapeError, match=name):
            get_op(name).infer_shape(shapes, {})

    def test_summed_loglik_is_scalar(self):
        assert get_op("bernoulli_loglik").infer_shape([(3,), (3,)], {}) == ()
        with pytest.raises(ShapeError):
            get_op("bernoulli_loglik").infer_shape([(3,), (4,)], {})

    def test_every_builtin_op_describes_itself(self):
        for name, spec in OPS.items():
            info = spec.describe()
            assert info["name"] == name


class TestForward:
    def test_identity_chain(self):
        assert float(NUMERIC.identity(NUMERIC.identity(3.0))) == 3.0

    def test_affine_square(self):
        assert float(NUMERIC.square(NUMERIC.affine(3.0, 2.0, 1.0))) == 49.0

    def test_lookup_and_onehot(self):
        table = np.arange(6.0).reshape(2, 3)
        assert float(NUMERIC.lookup(table, 1.0, 2.0)) == 5.0
        np.testing.assert_array_equal(NUMERIC.onehot(2.0, n=3), [0.0, 0.0, 1.0])

    def test_checked_mode_traps_nan(self):
        tape = Tape(checked=True)
        x = tape.leaf(0.0)
        with np.errstate(divide="ignore"), pytest.raises(NonFiniteError):
            tape.ops.log(x)

    def test_unchecked_mode_propagates(self):
        tape = Tape(checked=False)
        x = tape.leaf(0.0)
        with np.errstate(divide="ignore"):
            y = tape.ops.log(x)
        assert np.isneginf(y.value)

    def test_replay_with_overrides(self):
        tape = Tape()
        x = tape.leaf(2.0)
        tape.ops.square(tape.ops.shift(x, c=1.0))
        values = tape.replay({x.slot: 3.0})
        assert float(values[-1]) == 16.0


class TestReverseMode:
    def test_log_sigmoid_gradient(self):
        tape = Tape()
        x = tape.leaf(0.0)
        y = tape.ops.log_sigmoid(x)
        adj = backward_slots(tape, {y.slot: 1.0})
        assert float(adj[x.slot]) == pytest.approx(0.5)

    def test_seed_shape_mismatch(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ShapeError):
            backward_slots(tape, {x.slot: np.ones(2)})

    def test_wrt_prunes_unrelated_slots(self):
        tape = Tape()
        x, y = tape.leaf(1.0), tape.leaf(2.0)
        z = tape.ops.mul(x, y)
        adj = backward_slots(tape, {z.slot: 1.0}, wrt=[x.slot])
        assert float(adj[x.slot]) == 2.0
        assert y.slot not in adj

    def test_step_blocks_gradient(self):
        tape = Tape()
        x = tape.leaf(0.3)
        y = tape.ops.step(x)
        adj = backward_slots(tape, {y.slot: 1.0})
        assert x.slot not in adj

    @pytest.mark.parametrize("name,gens,attrs", VJP_CASES, ids=[c[0] for c in VJP_CASES])
    @pytest.mark.parametrize("draw", range(10))
    def test_vjp_matches_finite_differences(self, name, gens, attrs, draw):
        spec = get_op(name)
        args = [as_value(gen(shape)) for gen, shape in gens]
        tape = Tape(checked=True)
        leaves = [tape.leaf(a) for a in args]
        out = tape.record(name, leaves, attrs)
        cotangent = as_value(RNG.normal(size=out.shape))
        adj = backward_slots(tape, {out.slot: cotangent})
        for position in range(len(args)):
            if not spec.is_differentiable(position):
                continue

            def f(x, position=position):
                values = list(args)
                values[position] = x
                return np.sum(cotangent * spec.forward(*values, **attrs))

            expected = finite_difference(f, args[position])
            got = adj.get(leaves[position].slot, np.zeros_like(args[position]))
            np.testing.assert_allclose(got, expected, rtol=TOLERANCES["vjp_rtol"], atol=TOLERANCES["vjp_atol"])


def _gradient(build, x):
    tape = Tape()
    leaf = tape.leaf(x)
    out = build(tape.ops, leaf)
    adj = backward_slots(tape, {out.slot: 1.0}, wrt=[leaf.slot])
    return as_value(adj[leaf.slot])


def _hvp(build, x, v):
    tape = Tape()
    leaf = tape.leaf(x)
    out = build(tape.ops, leaf)
    grad = backward_slots(tape, {out.slot: 1.0}, wrt=[leaf.slot], create_graph=True)[leaf.slot]
    inner = tape.ops.sum(tape.ops.mul(grad, v))
    return as_value(backward_slots(tape, {inner.slot: 1.0}, wrt=[leaf.slot])[leaf.slot])


SECOND_ORDER_CASES = {
    "tanh_times_square": lambda F, x: F.sum(F.mul(F.tanh(x), F.square(x))),
    "log_softmax_dot": lambda F, x: F.dot(F.const(np.array([0.0, 1.0, 0.0])), F.log_softmax(x)),
    "sigmoid_exp": lambda F, x: F.sum(F.sigmoid(F.exp(F.scale(x, c=0.5)))),
    "bernoulli_loglik": lambda F, x: F.bernoulli_loglik(x, F.const(np.array([1.0, 0.0, 1.0]))),
}


class TestSecondOrder:
    @pytest.mark.parametrize("case", sorted(SECOND_ORDER_CASES))
    def test_hvp_matches_fd_of_gradient(self, case):
        build = SECOND_ORDER_CASES[case]
        x = np.array([0.3, -0.7, 1.1])
        for _ in range(3):
            v = RNG.normal(size=3)
            expected = finite_difference(lambda z: _gradient(build, z), x) @ v
            np.testing.assert_allclose(_hvp(build, x, v), expected, rtol=TOLERANCES["hvp_rtol"], atol=1e-7)

    def test_first_order_only_op_refuses_create_graph(self):
        register_op("cube_first_order", lambda a: a ** 3,
                    vjp=lambda F, g, args, out, attrs: (g * 3.0 * args[0] ** 2,), replace=True)
        tape = Tape()
        x = tape.leaf(2.0)
        y = tape.record("cube_first_order", [x])
        assert float(backward_slots(tape, {y.slot: 1.0})[x.slot]) == 12.0
        with pytest.raises(SecondOrderUnsupported):
            backward_slots(tape, {y.slot: 1.0}, create_graph=True)


class TestFiniteDifference:
    def test_shape(self):
        jac = finite_difference(lambda x: np.array([x[0] * x[1], x[1]]), np.array([2.0, 3.0]))
        assert jac.shape == (2, 2)
        np.testing.assert_allclose(jac, [[3.0, 0.0], [2.0, 1.0]], atol=1e-6)


def _network(F, w, x):
    return F.log_softmax(F.tanh(F.matvec(w, x)))


class TestReverseModeProperties:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.w = rng.normal(size=(4, 3))
        self.x = rng.normal(size=3)
        self.g1 = rng.normal(size=4)
        self.g2 = rng.normal(size=4)

    def _pullback(self, cotangent):
        tape = Tape()
        w, x = tape.leaf(self.w), tape.leaf(self.x)
        out = _network(tape.ops, w, x)
        adj = backward_slots(tape, {out.slot: cotangent})
        return as_value(adj[w.slot]), as_value(adj[x.slot])

    def test_linear_in_cotangent(self):
        a, b = 0.7, -1.3
        combined = self._pullback(a * self.g1 + b * self.g2)
        first, second = self._pullback(self.g1), self._pullback(self.g2)
        for got, u, v in zip(combined, first, second):
            np.testing.assert_allclose(got, a * u + b * v, rtol=1e-12, atol=1e-12)

    def test_repeated_sweeps_are_bitwise_equal(self):
        tape = Tape()
        w, x = tape.leaf(self.w), tape.leaf(self.x)
        out = _network(tape.ops, w, x)
        first = backward_slots(tape, {out.slot: self.g1})
        for _ in range(5):
            again = backward_slots(tape, {out.slot: self.g1})
            assert sorted(again) == sorted(first)
            for slot in first:
                assert np.array_equal(as_value(again[slot]), as_value(first[slot]))
