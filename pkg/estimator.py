"""
Gradient estimation for stochastic computation graphs.

sample_trace draws one joint sample; build_surrogate turns a trace into a
deterministic loss whose gradient is an unbiased estimate of the gradient of
the expected total cost; grad_algorithm1 computes the same estimate with an
explicit reverse sweep over the graph. estimate() averages per-sample
estimates over independent traces.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from constants import DEFAULTS, ESTIMATOR_METHODS, checked_mode, thread_count
from distributions import expand_log_prob, node_rng
from errors import (BaselineScopeError, ConditionViolation, DirectCostInfluenceError, EstimatorError,
                    GraphError, InvalidParam, NonFiniteError, NonFiniteSupportError, PositiveCostError)
from graph_model import Graph, NodeId, downstream_costs, validate_differentiability
from tensor_ops import (NUMERIC, NumericOps, Tape, TapeVar, as_value, backward_slots, conform,
                        forward_eval)

logger = logging.getLogger(__name__)


@dataclass
class Trace:
    """One joint sample: a value for every node plus log p for each stochastic node."""

    values: Dict[NodeId, np.ndarray]
    logprobs: Dict[NodeId, float]
    sample_index: int = 0
    seed: Optional[int] = None

    def inputs(self, graph: Graph) -> Dict[NodeId, np.ndarray]:
        return {i: self.values[i] for i in graph.inputs}

    def stochastic_values(self, graph: Graph) -> Dict[NodeId, np.ndarray]:
        return {w: self.values[w] for w in graph.stochastic}


def _run_trace(graph: Graph, inputs: Dict[Any, Any], pick: Callable, checked: Optional[bool]) -> Tuple[Dict, Dict]:
    inputs = graph.normalize_inputs(inputs)
    F = NumericOps(checked_mode() if checked is None else checked)
    values: Dict[NodeId, np.ndarray] = {}
    logprobs: Dict[NodeId, float] = {}
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        if node.is_input:
            values[nid] = inputs[nid]
        elif node.is_stochastic:
            params = [values[p] for p in node.parents]
            values[nid] = pick(node, params)
            logprobs[nid] = node.dist.log_prob(params, values[nid])
        else:
            try:
                values[nid] = F.apply(node.op.name, *[values[p] for p in node.parents], **node.attrs)
            except NonFiniteError as exc:
                raise NonFiniteError(f"node {node.label}: {exc}") from None
    return values, logprobs


def sample_trace(graph: Graph, inputs: Dict[Any, Any], seed: int = 0, sample_index: int = 0,
                 checked: Optional[bool] = None) -> Trace:
    """Sample every stochastic node from its conditional, in topological order."""

    def draw(node, params):
        try:
            return node.dist.sample(node_rng(seed, sample_index, node.id), params, node.shape)
        except InvalidParam as exc:
            raise InvalidParam(f"node {node.label}: {exc}") from None

    values, logprobs = _run_trace(graph, inputs, draw, checked)
    return Trace(values, logprobs, sample_index, seed)


def replay_trace(graph: Graph, inputs: Dict[Any, Any], stochastic_values: Dict[Any, Any],
                 sample_index: int = 0, checked: Optional[bool] = None) -> Trace:
    """Build the trace for a given assignment of stochastic values."""
    given = {graph.resolve(k): v for k, v in stochastic_values.items()}

    def pick(node, params):
        if node.id not in given:
            raise GraphError(f"no value given for stochastic node {node.label}")
        return conform(given[node.id], node.shape, f"node {node.label}")

    values, logprobs = _run_trace(graph, inputs, pick, checked)
    return Trace(values, logprobs, sample_index, None)


# ---------------------------------------------------------------------------
# Baselines

class Baseline:
    """Value subtracted from Q̂ in a node's score term. Default: zero."""

    tag = "none"
    inputs: Tuple[Any, ...] = ()

    def value(self, trace: Trace, node: NodeId) -> float:
        return 0.0

    def update(self, node: NodeId, mean_q: float):
        pass


class NoBaseline(Baseline):
    pass


class ConstantBaseline(Baseline):
    def __init__(self, c: float):
        self.c = float(c)
        self.tag = f"const:{self.c:g}"

    def value(self, trace, node):
        return self.c


class MovingAverageBaseline(Baseline):
    """b <- decay * b + (1 - decay) * mean Q̂, per node, applied once per estimate() call."""

    def __init__(self, decay: float = DEFAULTS["moving_average_decay"], init: float = DEFAULTS["moving_average_init"]):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {decay}")
        self.decay = float(decay)
        self.init = float(init)
        self.tag = f"avg:{self.decay:g}"
        self._values: Dict[NodeId, float] = {}
        self._lock = threading.Lock()

    def value(self, trace, node):
        with self._lock:
            return self._values.get(node, self.init)

    def update(self, node, mean_q):
        with self._lock:
            current = self._values.get(node, self.init)
            self._values[node] = self.decay * current + (1.0 - self.decay) * float(mean_q)
            logger.debug("moving-average baseline for node %d: %.6g -> %.6g", node, current, self._values[node])


class FunctionBaseline(Baseline):
    """fn(*values) over declared input nodes, which must not be influenced by the scored node."""

    def __init__(self, inputs: Sequence[Any], fn: Callable[..., float], tag: str = "function"):
        self.inputs = tuple(inputs)
        self.fn = fn
        self.tag = tag

    def value(self, trace, node):
        return float(self.fn(*[trace.values[i] for i in self.inputs]))


@dataclass
class BaselineSpec:
    """A default baseline for every stochastic node, with per-node overrides keyed by id or name."""

    default: Baseline = field(default_factory=NoBaseline)
    per_node: Dict[Any, Baseline] = field(default_factory=dict)

    @property
    def tag(self) -> str:
        if not self.per_node:
            return self.default.tag
        tags = sorted({b.tag for b in self.per_node.values()})
        return f"{self.default.tag}+{','.join(tags)}"

    def for_node(self, node: NodeId) -> Baseline:
        return self.per_node.get(node, self.default)

    def bind(self, graph: Graph) -> "BaselineSpec":
        """Resolve node names and check every baseline reads only nodes its node does not influence."""
        per_node = {}
        for key, baseline in self.per_node.items():
            w = graph.resolve(key)
            if not graph.nodes[w].is_stochastic:
                raise BaselineScopeError(f"baseline attached to non-stochastic node {graph.nodes[w].label}")
            per_node[w] = baseline
        bound = BaselineSpec(self.default, per_node)
        for w in graph.stochastic:
            baseline = bound.for_node(w)
            if not baseline.inputs:
                continue
            resolved = tuple(graph.resolve(i) for i in baseline.inputs)
            allowed = graph.index.noninfluenced[w]
            for i in resolved:
                if not (allowed >> i) & 1:
                    raise BaselineScopeError(f"baseline for node {graph.nodes[w].label} reads node "
                                             f"{graph.nodes[i].label}, which it influences")
            if resolved != baseline.inputs:
                bound.per_node[w] = FunctionBaseline(resolved, baseline.fn, baseline.tag)
        return bound

    def stateful(self) -> List[Tuple[NodeId, Baseline]]:
        return [(w, b) for w, b in self.per_node.items() if isinstance(b, MovingAverageBaseline)]


def parse_baseline(text: Optional[str]) -> BaselineSpec:
    """``none``, ``const:<v>`` or ``avg[:<decay>]`` applied to every stochastic node."""
    text = (text or "none").strip()
    kind, _, arg = text.partition(":")
    try:
        if kind == "none":
            return BaselineSpec()
        if kind == "const":
            return BaselineSpec(ConstantBaseline(float(arg)))
        if kind == "avg":
            return BaselineSpec(MovingAverageBaseline(float(arg)) if arg else MovingAverageBaseline())
    except ValueError:
        pass
    raise ValueError(f"bad baseline {text!r}; expected none, const:<v> or avg:<decay>")


def _bound(graph: Graph, baselines: Optional[BaselineSpec]) -> BaselineSpec:
    return (baselines or BaselineSpec()).bind(graph)


def resolve_theta(graph: Graph, theta) -> NodeId:
    """Parameter node for an id or name; None means the graph's only parameter."""
    if theta is None:
        if len(graph.params) != 1:
            raise GraphError(f"graph has {len(graph.params)} parameters; name one explicitly")
        return graph.params[0]
    theta = graph.resolve(theta)
    if theta not in graph.params:
        raise GraphError(f"node {graph.nodes[theta].label} is not a parameter")
    return theta


def require_condition(graph: Graph, theta: NodeId):
    """Raise ConditionViolation naming the offending edges when theta's paths are not differentiable."""
    report = validate_differentiability(graph, theta)
    if not report.ok:
        edges = ", ".join(f"{v.parent}->{v.child}" for v in report.violations)
        raise ConditionViolation(f"differentiability check failed for parameter {graph.nodes[theta].label} "
                                 f"on edge(s) {edges}: {report.violations[0].reason}")


# ---------------------------------------------------------------------------
# Surrogate loss

@dataclass
class SurrogateTerm:
    node: NodeId
    q_hat: float
    baseline: float
    log_prob: TapeVar

    @property
    def weight(self) -> float:
        return self.q_hat - self.baseline


@dataclass
class SurrogateLoss:
    """Deterministic per-trace loss: Σ log p(w) (Q̂_w - b_w) + Σ costs, with Q̂, b and v̂ constant."""

    tape: Tape
    output: TapeVar
    terms: List[SurrogateTerm]
    costs: Tuple[NodeId, ...]
    ratio_form: bool = False

    @property
    def value(self) -> float:
        return float(self.output.value)

    def gradient(self, theta: NodeId) -> np.ndarray:
        slot = self.tape.node_var(theta).slot
        adj = backward_slots(self.tape, {self.output.slot: 1.0}, wrt=[slot])
        return as_value(adj[slot]) if slot in adj else np.zeros_like(self.tape.values[slot])


def build_surrogate(graph: Graph, trace: Trace, baselines: Optional[BaselineSpec] = None,
                    thetas: Optional[Sequence[Any]] = None, ratio_form: bool = False,
                    checked: Optional[bool] = None) -> SurrogateLoss:
    """
    One log-probability term per stochastic node deterministically influenced by
    a parameter, plus every cost node. With ``ratio_form`` each term is
    p(w) / P̂_w · (Q̂_w - b_w), where P̂_w is the sampled probability held
    constant; its gradient equals the log form's.
    """
    baselines = _bound(graph, baselines)
    thetas = list(graph.params) if thetas is None else [resolve_theta(graph, t) for t in thetas]
    for theta in thetas:
        require_condition(graph, theta)

    tape = forward_eval(graph, trace.inputs(graph), trace.stochastic_values(graph), checked=checked)
    F = tape.ops
    influenced = 0
    for theta in thetas:
        influenced |= graph.index.det_descendants[theta]

    terms: List[SurrogateTerm] = []
    parts: List[TapeVar] = []
    for w in graph.topo_order:
        node = graph.nodes[w]
        if not node.is_stochastic or not (influenced >> w) & 1:
            continue
        log_prob = node.dist.expand(F, [tape.node_var(p) for p in node.parents], trace.values[w])
        term = SurrogateTerm(w, downstream_costs(graph, trace, w), baselines.for_node(w).value(trace, w), log_prob)
        if ratio_form:
            ratio = F.exp(F.shift(log_prob, c=-trace.logprobs[w]))
            parts.append(F.scale(ratio, c=term.weight))
        else:
            parts.append(F.scale(log_prob, c=term.weight))
        terms.append(term)
    parts.extend(tape.node_var(c) for c in graph.costs)

    total = parts[0] if parts else tape.const(0.0)
    for part in parts[1:]:
        total = F.add(total, part)
    return SurrogateLoss(tape, total, terms, graph.costs, ratio_form)


def grad_surrogate(graph: Graph, trace: Trace, baselines: Optional[BaselineSpec] = None, theta=None,
                   ratio_form: bool = False) -> np.ndarray:
    """Backpropagate through the surrogate loss."""
    theta = resolve_theta(graph, theta)
    return build_surrogate(graph, trace, baselines, [theta], ratio_form).gradient(theta)


def grad_algorithm1(graph: Graph, trace: Trace, baselines: Optional[BaselineSpec] = None, theta=None) -> np.ndarray:
    """
    Explicit reverse sweep: g = 1 at costs; at a stochastic node v, every
    non-stochastic parent w receives d/dw log p(v | parents) * (Q̂_v - b_v);
    at a deterministic node v, w receives (dv/dw)^T g_v.
    """
    theta = resolve_theta(graph, theta)
    require_condition(graph, theta)
    baselines = _bound(graph, baselines)
    values = trace.values
    reach = graph.index.det_descendants[theta] | (1 << theta)

    def wanted(p: NodeId) -> bool:
        return bool((reach >> p) & 1) and not graph.nodes[p].is_stochastic

    g: Dict[NodeId, np.ndarray] = {c: as_value(1.0) for c in graph.costs}

    def accumulate(p: NodeId, grad):
        g[p] = as_value(grad) if p not in g else NUMERIC.add(g[p], grad)

    for v in reversed(graph.topo_order):
        node = graph.nodes[v]
        if node.is_input or not any(wanted(p) for p in node.parents):
            continue
        if node.is_stochastic:
            weight = downstream_costs(graph, trace, v) - baselines.for_node(v).value(trace, v)
            grads = expand_log_prob(graph, v, trace).gradient(seed=weight)
            for p, grad in zip(node.parents, grads):
                if wanted(p):
                    accumulate(p, grad)
        elif v in g:
            args = [values[p] for p in node.parents]
            grads = node.op.vjp(NUMERIC, g[v], args, values[v], node.attrs)
            for position, (p, grad) in enumerate(zip(node.parents, grads)):
                if grad is not None and node.op.is_differentiable(position) and wanted(p):
                    accumulate(p, grad)
    return g.get(theta, np.zeros_like(values[theta]))


METHODS: Dict[str, Callable] = {
    "surrogate": grad_surrogate,
    "algorithm1": grad_algorithm1,
}


def get_method(name: str) -> Callable:
    try:
        return METHODS[name]
    except KeyError:
        raise EstimatorError(f"unknown method '{name}'; expected one of {', '.join(ESTIMATOR_METHODS)}") from None


# ---------------------------------------------------------------------------
# Monte Carlo estimate

@dataclass
class GradientEstimate:
    """Sample mean per parameter; stderr and variance are None for a single sample."""

    mean: Dict[NodeId, np.ndarray]
    stderr: Optional[Dict[NodeId, np.ndarray]]
    variance: Optional[Dict[NodeId, np.ndarray]]
    n_samples: int
    method: str
    baseline_tag: str
    seed: int

    def to_dict(self, graph: Optional[Graph] = None) -> Dict[str, Any]:
        def key(node):
            if graph is not None and graph.nodes[node].name:
                return graph.nodes[node].name
            return str(node)

        def table(values):
            if values is None:
                return None
            return {key(k): as_value(v).tolist() for k, v in values.items()}

        return {
            "mean": table(self.mean),
            "stderr": table(self.stderr),
            "variance": table(self.variance),
            "n": self.n_samples,
            "method": self.method,
            "baseline": self.baseline_tag,
            "seed": self.seed,
        }


def estimate(graph: Graph, inputs: Dict[Any, Any], theta=None, n_samples: int = DEFAULTS["samples"],
             seed: int = DEFAULTS["seed"], method: str = DEFAULTS["method"],
             baselines: Optional[BaselineSpec] = None, threads: Optional[int] = None,
             ratio_form: bool = False) -> GradientEstimate:
    """
    Mean and standard error of per-sample gradient estimates over independent traces.

    theta=None estimates every parameter. Samples may run on a thread pool
    (SCG_THREADS caps it); results do not depend on the worker count.
    """
    if n_samples < 1:
        raise EstimatorError(f"n_samples must be at least 1, got {n_samples}")
    thetas = list(graph.params) if theta is None else [resolve_theta(graph, theta)]
    grad_fn = get_method(method)
    inputs = graph.normalize_inputs(inputs)
    baselines = _bound(graph, baselines)
    for t in thetas:
        require_condition(graph, t)
    tracked = [w for w in graph.stochastic if isinstance(baselines.for_node(w), MovingAverageBaseline)]

    def one(index: int):
        trace = sample_trace(graph, inputs, seed, index)
        if method == "surrogate":
            surrogate = build_surrogate(graph, trace, baselines, thetas, ratio_form)
            grads = {t: surrogate.gradient(t) for t in thetas}
        else:
            grads = {t: grad_fn(graph, trace, baselines, t) for t in thetas}
        return grads, [downstream_costs(graph, trace, w) for w in tracked]

    workers = min(thread_count(threads), n_samples)
    logger.debug("estimate: n=%d method=%s baseline=%s workers=%d", n_samples, method, baselines.tag, workers)
    if workers <= 1:
        results = [one(i) for i in range(n_samples)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n_samples)))

    mean, variance, stderr = {}, {}, {}
    for t in thetas:
        samples = np.stack([r[0][t] for r in results])
        mean[t] = samples.mean(axis=0)
        if n_samples > 1:
            variance[t] = samples.var(axis=0, ddof=1)
            stderr[t] = np.sqrt(variance[t] / n_samples)

    for j, w in enumerate(tracked):
        baselines.for_node(w).update(w, float(np.mean([r[1][j] for r in results])))

    return GradientEstimate(mean=mean, stderr=stderr if n_samples > 1 else None,
                            variance=variance if n_samples > 1 else None, n_samples=n_samples,
                            method=method, baseline_tag=baselines.tag, seed=seed)


# ---------------------------------------------------------------------------
# Second order

def hessian_vector_product(graph: Graph, trace: Trace, theta, v, baselines: Optional[BaselineSpec] = None) -> np.ndarray:
    """
    Per-sample estimate of H v.

    Differentiates <grad L, v> once more on the same tape (Q̂ held constant),
    then adds the terms the constant weights leave out: the dependence of
    each Q̂_w on theta through deterministic costs, and the score of
    <ĝ, v> itself, since the gradient estimate is a function of the sample.
    """
    theta = resolve_theta(graph, theta)
    baselines = _bound(graph, baselines)
    _check_hvp_baselines(graph, theta, baselines)
    surrogate = build_surrogate(graph, trace, baselines, [theta])
    tape = surrogate.tape
    F = tape.ops
    slot = tape.node_var(theta).slot
    v = conform(v, graph.nodes[theta].shape, "direction")
    zeros = np.zeros_like(tape.values[slot])

    grad = backward_slots(tape, {surrogate.output.slot: 1.0}, wrt=[slot], create_graph=True).get(slot)
    if grad is None:
        return zeros
    inner = F.sum(F.mul(grad, v))
    hvp = as_value(backward_slots(tape, {inner.slot: 1.0}, wrt=[slot]).get(slot, zeros))
    if not surrogate.terms:
        return hvp

    cost_seeds: Dict[int, float] = {}
    score_seeds: Dict[int, float] = {}
    for term in surrogate.terms:
        score = backward_slots(tape, {term.log_prob.slot: 1.0}, wrt=[slot]).get(slot, zeros)
        along = float(np.sum(as_value(score) * v))
        for c in graph.costs_downstream(term.node):
            c_slot = tape.node_var(c).slot
            cost_seeds[c_slot] = cost_seeds.get(c_slot, 0.0) + along
        score_seeds[term.log_prob.slot] = 1.0

    q_part = backward_slots(tape, cost_seeds, wrt=[slot]).get(slot, zeros)
    score_part = backward_slots(tape, score_seeds, wrt=[slot]).get(slot, zeros)
    return hvp + as_value(q_part) + float(inner.value) * as_value(score_part)


def _check_hvp_baselines(graph: Graph, theta: NodeId, baselines: BaselineSpec):
    # the correction terms treat baseline values as constants in theta
    for w in graph.stochastic:
        for i in baselines.for_node(w).inputs:
            if i == theta or graph.index.det_influences(theta, i):
                raise BaselineScopeError(f"baseline for node {graph.nodes[w].label} reads node "
                                         f"{graph.nodes[i].label}, which depends on {graph.nodes[theta].label} "
                                         "deterministically; not supported for Hessian-vector products")


# ---------------------------------------------------------------------------
# Majorization bound

def mm_bound_gap(graph: Graph, inputs: Dict[Any, Any], theta, theta_old, theta_new) -> Tuple[float, float]:
    """
    Exact (lhs, rhs) of the surrogate upper bound for negative costs:
    lhs = E_new[Σ c], rhs = E_old[Σ c + Σ_v (log p_new(v) - log p_old(v)) Q̂_v].
    lhs <= rhs always; equality when theta_new == theta_old.
    """
    # oracle imports this module
    from oracle import enumerate_configurations

    theta = resolve_theta(graph, theta)
    continuous = [graph.nodes[w].label for w in graph.stochastic if graph.nodes[w].dist.continuous]
    if continuous:
        raise NonFiniteSupportError(f"bound needs finite-support nodes; continuous: {', '.join(continuous)}")
    direct = [graph.nodes[c].label for c in graph.costs if graph.index.det_influences(theta, c)]
    if direct:
        raise DirectCostInfluenceError(f"costs {', '.join(direct)} depend on {graph.nodes[theta].label} "
                                       "deterministically")

    inputs = graph.normalize_inputs(inputs)
    old = {**inputs, theta: conform(theta_old, graph.nodes[theta].shape, "theta_old")}
    new = {**inputs, theta: conform(theta_new, graph.nodes[theta].shape, "theta_new")}

    def total_cost(values):
        costs = [float(values[c]) for c in graph.costs]
        positive = [c for c, value in zip(graph.costs, costs) if value > 0]
        if positive:
            raise PositiveCostError(f"cost node {graph.nodes[positive[0]].label} is positive "
                                    f"({costs[graph.costs.index(positive[0])]:g})")
        return sum(costs)

    lhs = 0.0
    for config in enumerate_configurations(graph, new):
        lhs += config.probability * total_cost(config.values)

    rhs = 0.0
    for config in enumerate_configurations(graph, old):
        trace_old = replay_trace(graph, old, {w: config.values[w] for w in graph.stochastic}, checked=False)
        trace_new = replay_trace(graph, new, {w: config.values[w] for w in graph.stochastic}, checked=False)
        value = total_cost(config.values)
        for w in graph.stochastic:
            q_hat = downstream_costs(graph, trace_old, w)
            if q_hat != 0.0:
                value += (trace_new.logprobs[w] - trace_old.logprobs[w]) * q_hat
        rhs += config.probability * value
    return lhs, rhs
