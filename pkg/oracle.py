"""
Exact expectations and gradients for small graphs.

Finite-support nodes are enumerated depth-first in topological order, so each
node's conditional parameters are known when it is expanded. Gaussian nodes
are integrated with tensorized Gauss-Hermite quadrature (at most
``max_continuous_dims`` dimensions over the whole graph).
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from constants import DEFAULTS, checked_mode
from distributions import reparameterize
from errors import ConditionViolation, ShapeError, SupportTooLarge, UnsupportedContinuous
from estimator import (BaselineSpec, NoBaseline, require_condition, resolve_theta, estimate,
                       get_method, replay_trace)
from graph_model import Graph, NodeId, downstream_costs
from tensor_ops import NumericOps, Tape, as_value, backward_slots, forward_eval

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SupportDescriptor:
    node: NodeId
    kind: str
    outcomes: int
    dims: int = 0
    order: int = 0

    @property
    def continuous(self) -> bool:
        return self.kind == "continuous"


def describe_support(graph: Graph, quadrature_order: Optional[int] = None) -> Dict[NodeId, SupportDescriptor]:
    order = quadrature_order or DEFAULTS["quadrature_order"]
    if order < 2:
        raise ValueError(f"quadrature order must be at least 2, got {order}")
    out = {}
    for w in graph.stochastic:
        node = graph.nodes[w]
        if node.dist.continuous:
            dims = node.dist.continuous_dims(node.shape)
            out[w] = SupportDescriptor(w, "continuous", order ** dims, dims, order)
        else:
            count = node.dist.outcome_count(node.shape, [graph.nodes[p].shape for p in node.parents])
            out[w] = SupportDescriptor(w, "finite", count)
    return out


def check_support(graph: Graph, quadrature_order: Optional[int] = None, max_configurations: Optional[int] = None,
                  max_continuous_dims: Optional[int] = None) -> int:
    """Number of configurations the enumeration will visit (an upper bound before pruning)."""
    limit = max_configurations or DEFAULTS["max_configurations"]
    max_dims = DEFAULTS["max_continuous_dims"] if max_continuous_dims is None else max_continuous_dims
    supports = describe_support(graph, quadrature_order)
    dims = sum(s.dims for s in supports.values())
    if dims > max_dims:
        raise UnsupportedContinuous(f"graph has {dims} Gaussian dimensions; the quadrature oracle handles at most "
                                    f"{max_dims}")
    total = 1
    for s in supports.values():
        total *= s.outcomes
        if total > limit:
            raise SupportTooLarge(f"more than {limit} configurations (stopped at node {graph.nodes[s.node].label})")
    return total


def gauss_hermite(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for E[f(z)], z ~ N(0, 1)."""
    points, weights = hermegauss(order)
    return points, weights / math.sqrt(2.0 * math.pi)


@dataclass
class Configuration:
    """One joint assignment with its probability mass (times quadrature weight for Gaussian nodes)."""

    values: Dict[NodeId, np.ndarray]
    discrete_probability: float = 1.0
    quadrature_weight: float = 1.0
    noise: Dict[NodeId, np.ndarray] = field(default_factory=dict)

    @property
    def probability(self) -> float:
        return self.discrete_probability * self.quadrature_weight

    def total_cost(self, graph: Graph) -> float:
        return float(sum(float(self.values[c]) for c in graph.costs))


def enumerate_configurations(graph: Graph, inputs: Dict[Any, Any], quadrature_order: Optional[int] = None,
                             max_configurations: Optional[int] = None,
                             max_continuous_dims: Optional[int] = None) -> Iterator[Configuration]:
    """Yield every configuration with nonzero probability."""
    order = quadrature_order or DEFAULTS["quadrature_order"]
    count = check_support(graph, order, max_configurations, max_continuous_dims)
    logger.debug("enumerating up to %d configuration(s) over %d stochastic node(s)", count, len(graph.stochastic))
    inputs = graph.normalize_inputs(inputs)
    F = NumericOps(checked_mode())
    points, weights = gauss_hermite(order)
    topo = graph.topo_order

    def grid(shape):
        size = int(np.prod(shape)) if shape else 1
        for idx in itertools.product(range(order), repeat=size):
            yield points[list(idx)].reshape(shape), float(np.prod(weights[list(idx)]))

    def visit(pos, values, config):
        while pos < len(topo) and not graph.nodes[topo[pos]].is_stochastic:
            node = graph.nodes[topo[pos]]
            if node.is_input:
                values[node.id] = inputs[node.id]
            else:
                values[node.id] = F.apply(node.op.name, *[values[p] for p in node.parents], **node.attrs)
            pos += 1
        if pos == len(topo):
            yield Configuration(values, config.discrete_probability, config.quadrature_weight, config.noise)
            return
        node = graph.nodes[topo[pos]]
        params = [values[p] for p in node.parents]
        if node.dist.continuous:
            for z, weight in grid(node.shape):
                branch = Configuration({}, config.discrete_probability, config.quadrature_weight * weight,
                                       {**config.noise, node.id: z})
                yield from visit(pos + 1, {**values, node.id: node.dist.quadrature_value(params, z)}, branch)
        else:
            for value, p in node.dist.support(params, node.shape):
                if p == 0.0:
                    continue
                branch = Configuration({}, config.discrete_probability * p, config.quadrature_weight, config.noise)
                yield from visit(pos + 1, {**values, node.id: value}, branch)

    yield from visit(0, {}, Configuration({}))


def exact_expectation(graph: Graph, inputs: Dict[Any, Any], quadrature_order: Optional[int] = None) -> float:
    """E[Σ costs] summed over all configurations."""
    return float(sum(c.probability * c.total_cost(graph)
                     for c in enumerate_configurations(graph, inputs, quadrature_order)))


def _configuration_tape(graph: Graph, inputs: Dict[NodeId, np.ndarray], config: Configuration):
    """Tape for p(config) * Σ costs with Gaussian values written as mean + sigma * z."""
    tape = Tape(checked_mode())
    F = tape.ops
    log_terms = []
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        if node.is_input:
            tape.leaf(inputs[nid], node=nid)
        elif node.is_stochastic:
            params = [tape.node_var(p) for p in node.parents]
            if not node.dist.continuous:
                tape.leaf(config.values[nid], node=nid)
                log_terms.append(node.dist.expand(F, params, config.values[nid]))
            elif node.dist.reparam_op:
                tape.record(node.dist.reparam_op, params + [tape.const(config.noise[nid])], node=nid)
            else:
                tape.leaf(config.noise[nid], node=nid)
        else:
            tape.record(node.op.name, [tape.node_var(p) for p in node.parents], node.attrs, node=nid)

    total = tape.const(0.0)
    for c in graph.costs:
        total = F.add(total, tape.node_var(c))
    if log_terms:
        log_p = log_terms[0]
        for term in log_terms[1:]:
            log_p = F.add(log_p, term)
        weight = F.scale(F.exp(log_p), c=config.quadrature_weight)
    else:
        weight = tape.const(config.quadrature_weight)
    return tape, F.mul(weight, total)


def exact_gradient(graph: Graph, inputs: Dict[Any, Any], theta=None,
                   quadrature_order: Optional[int] = None) -> np.ndarray:
    """
    Gradient of the enumerated sum, differentiating each configuration's
    probability and costs directly (no score function).
    """
    theta = resolve_theta(graph, theta)
    require_condition(graph, theta)
    inputs = graph.normalize_inputs(inputs)
    grad = np.zeros_like(inputs[theta])
    for config in enumerate_configurations(graph, inputs, quadrature_order):
        tape, objective = _configuration_tape(graph, inputs, config)
        slot = tape.node_var(theta).slot
        adj = backward_slots(tape, {objective.slot: 1.0}, wrt=[slot])
        if slot in adj:
            grad = grad + as_value(adj[slot])
    return grad


def _finite_configurations(graph: Graph, inputs) -> Iterator[Configuration]:
    continuous = [graph.nodes[w].label for w in graph.stochastic if graph.nodes[w].dist.continuous]
    if continuous:
        raise UnsupportedContinuous(f"exact moments need finite-support nodes; continuous: {', '.join(continuous)}")
    return enumerate_configurations(graph, inputs)


def exact_estimator_moments(graph: Graph, inputs: Dict[Any, Any], theta=None,
                            baselines: Optional[BaselineSpec] = None,
                            method: str = DEFAULTS["method"]) -> Tuple[np.ndarray, np.ndarray]:
    """Exact mean and per-component variance of the per-sample gradient estimate."""
    theta = resolve_theta(graph, theta)
    grad_fn = get_method(method)
    inputs = graph.normalize_inputs(inputs)
    baselines = (baselines or BaselineSpec()).bind(graph)
    weighted = []
    for config in _finite_configurations(graph, inputs):
        trace = replay_trace(graph, inputs, {w: config.values[w] for w in graph.stochastic})
        weighted.append((config.probability, as_value(grad_fn(graph, trace, baselines, theta))))
    mean = sum(p * g for p, g in weighted)
    variance = sum(p * np.square(g - mean) for p, g in weighted)
    return as_value(mean), as_value(variance)


def optimal_baseline(graph: Graph, inputs: Dict[Any, Any], theta, node) -> float:
    """E[Q̂ s^2] / E[s^2] with s = d/dtheta log p(node | parents), scalar theta only."""
    theta = resolve_theta(graph, theta)
    node = graph.resolve(node)
    if graph.nodes[theta].shape != ():
        raise ShapeError(f"optimal baseline needs a scalar parameter; {graph.nodes[theta].label} has shape "
                         f"{graph.nodes[theta].shape}")
    if not graph.nodes[node].is_stochastic or not graph.index.det_influences(theta, node):
        raise ConditionViolation(f"node {graph.nodes[node].label} is not a stochastic node driven by "
                                 f"{graph.nodes[theta].label}")
    inputs = graph.normalize_inputs(inputs)
    numerator = denominator = 0.0
    for config in _finite_configurations(graph, inputs):
        trace = replay_trace(graph, inputs, {w: config.values[w] for w in graph.stochastic})
        tape = forward_eval(graph, inputs, trace.stochastic_values(graph))
        target = graph.nodes[node]
        log_prob = target.dist.expand(tape.ops, [tape.node_var(p) for p in target.parents], trace.values[node])
        slot = tape.node_var(theta).slot
        score = float(backward_slots(tape, {log_prob.slot: 1.0}, wrt=[slot]).get(slot, 0.0))
        weight = config.probability * score * score
        numerator += weight * downstream_costs(graph, trace, node)
        denominator += weight
    return numerator / denominator if denominator > 0 else 0.0


def _is_finite(graph: Graph) -> bool:
    return not any(graph.nodes[w].dist.continuous for w in graph.stochastic)


def _moments(graph, inputs, theta, baselines, method, n_samples, seed, threads) -> Dict[str, Any]:
    if _is_finite(graph):
        mean, variance = exact_estimator_moments(graph, inputs, theta, baselines, method)
        return {"mean": mean.tolist(), "variance": variance.tolist(), "exact": True}
    result = estimate(graph, inputs, theta, n_samples, seed, method, baselines, threads)
    variance = result.variance[theta] if result.variance else np.zeros_like(result.mean[theta])
    return {
        "mean": result.mean[theta].tolist(),
        "variance": variance.tolist(),
        "stderr": result.stderr[theta].tolist() if result.stderr else None,
        "exact": False,
    }


def variance_report(graph: Graph, inputs: Dict[Any, Any], theta=None, baselines: Optional[BaselineSpec] = None,
                    method: str = DEFAULTS["method"], n_samples: int = DEFAULTS["samples"],
                    seed: int = DEFAULTS["seed"], reparam_nodes: Optional[Sequence[Any]] = None,
                    threads: Optional[int] = None) -> Dict[str, Any]:
    """
    Estimator variance without a baseline and with ``baselines``, plus score
    function vs. pathwise variance when Gaussian nodes can be reparameterized.
    """
    theta = resolve_theta(graph, theta)
    baselines = baselines or BaselineSpec()
    report: Dict[str, Any] = {"theta": graph.nodes[theta].name or str(theta), "method": method, "baselines": {}}
    report["baselines"]["none"] = _moments(graph, inputs, theta, BaselineSpec(NoBaseline()), method,
                                           n_samples, seed, threads)
    if baselines.tag != "none":
        report["baselines"][baselines.tag] = _moments(graph, inputs, theta, baselines, method,
                                                      n_samples, seed, threads)

    if reparam_nodes is None:
        targets = [w for w in graph.stochastic
                   if graph.nodes[w].dist.reparameterizable and graph.index.det_influences(theta, w)]
    else:
        targets = [graph.resolve(w) for w in reparam_nodes]
    if targets:
        pathwise = graph
        for w in targets:
            pathwise = reparameterize(pathwise, w)
        report["sf_vs_pd"] = {
            "nodes": [graph.nodes[w].name or str(w) for w in targets],
            "sf": _moments(graph, inputs, theta, None, method, n_samples, seed, threads),
            "pd": _moments(pathwise, inputs, theta, None, method, n_samples, seed, threads),
        }
    return report
