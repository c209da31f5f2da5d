import json
from pathlib import Path

import numpy as np
import pytest

from builtin_graphs import builtin
from errors import CostShapeError, CycleError, GraphError, GraphLoadError, IncompleteTrace, ShapeError, UnknownNode
from estimator import sample_trace
from graph_model import (GraphBuilder, Influence, NodeKind, downstream_costs, freeze, graph_from_dict, influence,
                         load_graph, save_graph, validate_differentiability)
from tensor_ops import backward, forward_eval

GRAPHS = Path(__file__).parent / "graphs"


def fig1_5():
    b = GraphBuilder()
    theta = b.add_input(name="theta", param=True)
    x1 = b.add_stoch("bernoulli_logit", [theta], name="x1")
    x2 = b.add_stoch("bernoulli_logit_sum", [theta, x1], name="x2")
    b.add_cost("identity", [x1], name="f1")
    b.add_cost("scale:2", [x2], name="f2")
    return b.freeze()


def fig1_2(op="step"):
    b = GraphBuilder()
    theta = b.add_input(name="theta", param=True)
    x = b.add_stoch("bernoulli_logit", [theta], name="x")
    y = b.add_det(op, [x], name="y")
    b.add_cost("identity", [y], name="f")
    return b.freeze()


class TestFreeze:
    def test_ids_and_kinds(self):
        g = fig1_5()
        assert [n.kind for n in g.nodes] == [NodeKind.INPUT, NodeKind.STOCHASTIC, NodeKind.STOCHASTIC,
                                             NodeKind.COST, NodeKind.COST]
        assert g.params == (0,)
        assert g.stochastic == (1, 2)
        assert g.costs == (3, 4)

    def test_topological_order(self):
        g = fig1_5()
        position = {v: i for i, v in enumerate(g.topo_order)}
        for node in g.nodes:
            for p in node.parents:
                assert position[p] < position[node.id]

    def test_cycle(self):
        b = GraphBuilder()
        b.add_det("identity", [1])
        b.add_det("identity", [0])
        with pytest.raises(CycleError, match="cycle") as err:
            b.freeze()
        assert err.value.edge in {(0, 1), (1, 0)}

    def test_ties_break_by_smallest_id(self):
        b = GraphBuilder()
        b.add_det("identity", [2])
        b.add_input()
        b.add_input()
        b.as_cost(0)
        assert b.freeze().topo_order == (1, 2, 0, 3)

    def test_non_scalar_cost(self):
        b = GraphBuilder()
        x = b.add_input((3,))
        b.add_cost("identity", [x])
        with pytest.raises(CostShapeError):
            b.freeze()

    def test_shape_mismatch_names_node(self):
        b = GraphBuilder()
        x = b.add_input((3,))
        y = b.add_input((4,))
        b.add_det("add", [x, y], name="bad")
        with pytest.raises(ShapeError, match="bad"):
            b.freeze()

    def test_unknown_parent(self):
        b = GraphBuilder()
        b.add_input()
        b.add_det("identity", [7])
        with pytest.raises(UnknownNode):
            b.freeze()

    def test_param_must_be_input(self):
        b = GraphBuilder()
        x = b.add_input()
        y = b.add_det("identity", [x])
        b.mark_param(y)
        with pytest.raises(GraphError):
            b.freeze()

    def test_freeze_is_idempotent(self):
        g = fig1_5()
        again = freeze(g)
        assert again.to_dict() == g.to_dict()
        assert again.topo_order == g.topo_order
        assert again.index == g.index

    def test_resolve(self):
        g = fig1_5()
        assert g.resolve("x2") == 2
        assert g.resolve("3") == 3
        with pytest.raises(UnknownNode):
            g.resolve("nope")
        with pytest.raises(KeyError):
            g.resolve(99)


class TestInfluence:
    def test_markov_chain_influences(self):
        g = fig1_5()
        assert g.descendants(0) == [1, 2, 3, 4]
        assert g.det_descendants(0) == [1, 2]
        assert influence(g, "theta", "f2") is Influence.INFLUENCES
        assert influence(g, "theta", "x2") is Influence.DET_INFLUENCES
        assert influence(g, "f1", "theta") is Influence.NONE

    def test_blocked_path(self):
        g = fig1_2()
        assert g.index.influences(0, 3)
        assert not g.index.det_influences(0, 3)

    def test_deps_and_noninfluenced(self):
        g = fig1_5()
        assert g.deps(2) == [0, 1]
        assert g.noninfluenced(2) == [0, 1, 3]
        assert 2 not in g.noninfluenced(2)

    def test_two_layer_net(self):
        b = GraphBuilder()
        x = b.add_input((3,), name="x")
        w1 = b.add_input((2, 3), name="W1", param=True)
        b1 = b.add_input((2,), name="b1")
        h = b.add_det("tanh", [b.add_det("affine", [w1, x, b1])])
        loss = b.add_cost("sum", [h], name="loss")
        g = b.freeze()
        assert influence(g, "W1", "loss") is Influence.DET_INFLUENCES
        assert loss in g.det_descendants(w1)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_path_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        b = GraphBuilder()
        n_inputs = 2
        for _ in range(n_inputs):
            b.add_input()
        n = int(rng.integers(6, 13))
        for i in range(n_inputs, n):
            if rng.random() < 0.4:
                k = int(rng.integers(1, min(3, i) + 1))
                b.add_stoch("bernoulli_logit_sum", sorted(rng.choice(i, size=k, replace=False).tolist()))
            elif rng.random() < 0.5 and i >= 2:
                b.add_det("add", sorted(rng.choice(i, size=2, replace=False).tolist()))
            else:
                b.add_det("identity", [int(rng.integers(0, i))])
        g = b.freeze()

        def reachable(v, w, det_only):
            stack = [v]
            seen = set()
            while stack:
                u = stack.pop()
                for c in g.children[u]:
                    if c == w:
                        return True
                    if c in seen or (det_only and not g.nodes[c].is_deterministic):
                        continue
                    seen.add(c)
                    stack.append(c)
            return False

        for v in range(len(g.nodes)):
            for w in range(len(g.nodes)):
                assert g.index.influences(v, w) == reachable(v, w, False)
                assert g.index.det_influences(v, w) == reachable(v, w, True)


class TestDepsPerturbation:
    @pytest.mark.parametrize("name", ["nvil-toy", "bernoulli-chain", "fig1-5"])
    def test_only_deps_move_a_node(self, name):
        graph, inputs = builtin(name)
        inputs = graph.normalize_inputs(inputs)
        stochastic = sample_trace(graph, inputs, seed=1).stochastic_values(graph)
        base = forward_eval(graph, inputs, stochastic)
        sources = list(graph.inputs) + list(graph.stochastic)
        for w in sources:
            if w in inputs:
                moved = forward_eval(graph, {**inputs, w: inputs[w] + 0.37}, stochastic)
            else:
                moved = forward_eval(graph, inputs, {**stochastic, w: stochastic[w] + 0.37})
            for v in graph.topo_order:
                if v in sources:
                    continue
                if w not in graph.deps(v):
                    np.testing.assert_array_equal(moved.node_var(v).value, base.node_var(v).value)


class TestDifferentiability:
    def test_step_behind_stochastic_node_passes(self):
        assert validate_differentiability(fig1_2(), "theta").ok

    def test_step_on_deterministic_path_fails(self):
        b = GraphBuilder()
        theta = b.add_input(name="theta", param=True)
        y = b.add_det("step", [theta], name="y")
        b.add_cost("identity", [y])
        report = validate_differentiability(b.freeze(), theta)
        assert not report.ok
        assert (report.violations[0].parent, report.violations[0].child) == (theta, y)
        assert report.to_dict()["ok"] is False

    def test_unknown_likelihood_behind_stochastic_node(self):
        b = GraphBuilder()
        theta = b.add_input(name="theta", param=True)
        table = b.add_input((2, 3))
        x = b.add_stoch("bernoulli_logit", [theta])
        y = b.add_stoch("categorical_table", [table, x])
        b.add_cost("identity", [y])
        assert validate_differentiability(b.freeze(), theta).ok

    def test_table_parameter_fails(self):
        b = GraphBuilder()
        table = b.add_input((2, 2), name="table", param=True)
        idx = b.add_input(name="idx")
        y = b.add_stoch("categorical_table", [table, idx])
        b.add_cost("identity", [y])
        assert not validate_differentiability(b.freeze(), "table").ok

    def test_not_a_parameter(self):
        with pytest.raises(GraphError):
            validate_differentiability(fig1_5(), "x1")


class TestDownstreamCosts:
    def test_markov_chain(self):
        g = fig1_5()
        values = {0: np.float64(0.2), 1: np.float64(1.0), 2: np.float64(1.0), 3: np.float64(1.0),
                  4: np.float64(2.0)}
        assert downstream_costs(g, values, "x1") == 3.0
        assert downstream_costs(g, values, "x2") == 2.0

    def test_reward_to_go(self):
        b = GraphBuilder()
        theta = b.add_input(name="theta", param=True)
        prev = None
        for t in range(1, 4):
            a = b.add_stoch("bernoulli_logit" if prev is None else "bernoulli_logit_sum",
                            [theta] if prev is None else [theta, prev], name=f"a{t}")
            b.add_cost("identity", [a], name=f"c{t}")
            prev = a
        g = b.freeze()
        values = {g.resolve("c1"): -1.0, g.resolve("c2"): -2.0, g.resolve("c3"): -3.0}
        assert downstream_costs(g, values, "a2") == -5.0
        assert downstream_costs(g, values, "a1") == -6.0

    def test_missing_cost(self):
        with pytest.raises(IncompleteTrace):
            downstream_costs(fig1_5(), {3: 1.0}, "x2")


class TestForwardEval:
    def test_values_and_node_gradients(self):
        b = GraphBuilder()
        x = b.add_input(name="x")
        w = b.add_input(name="w", param=True)
        bias = b.add_input(name="b")
        out = b.add_cost("square", [b.add_det("affine", [w, x, bias])])
        g = b.freeze()
        tape = forward_eval(g, {x: 2.0, w: 3.0, bias: 1.0})
        assert float(tape.node_var(out).value) == 49.0
        grads = backward(tape, {out: 1.0})
        assert float(grads[w]) == pytest.approx(2 * 7.0 * 2.0)
        assert float(grads[bias]) == pytest.approx(14.0)

    def test_missing_stochastic_value(self):
        with pytest.raises(IncompleteTrace):
            forward_eval(fig1_5(), {0: 0.2})

    def test_missing_input(self):
        with pytest.raises(IncompleteTrace):
            fig1_5().normalize_inputs({})


class TestGraphFiles:
    def test_load_shipped_graph(self):
        g, inputs = load_graph(GRAPHS / "fig1_5.json")
        assert [n.name for n in g.nodes] == ["theta", "x1", "x2", "f1", "f2"]
        assert float(inputs[0]) == 0.2

    def test_round_trip(self, tmp_path):
        g = fig1_5()
        path = tmp_path / "graph.json"
        save_graph(g, path, {0: 0.5})
        loaded, inputs = load_graph(path)
        assert loaded.to_dict() == g.to_dict()
        assert float(inputs[0]) == 0.5

    def test_missing_file(self, tmp_path):
        with pytest.raises(GraphLoadError, match="not found"):
            load_graph(tmp_path / "missing.json")

    def test_bad_node_is_named(self):
        doc = {"nodes": [{"id": 0, "kind": "input"}, {"id": 1, "kind": "det", "op": "frobnicate", "parents": [0]}]}
        with pytest.raises(GraphLoadError, match="node 1"):
            graph_from_dict(doc)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(GraphLoadError):
            load_graph(path)

    def test_shipped_graph_is_valid_json(self):
        doc = json.loads((GRAPHS / "fig1_5.json").read_text())
        assert doc["params"] == [0]
