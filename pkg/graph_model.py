"""
Stochastic computation graph model.

A GraphBuilder collects input, deterministic, stochastic and cost nodes;
freeze() validates the result into an immutable Graph with a cached
topological order and influence relations (stored as int bitsets).
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from distributions import Distribution, parse_distribution
from errors import (CostShapeError, CycleError, GraphError, GraphLoadError, IncompleteTrace,
                    SCGError, ShapeError, UnknownNode)
from tensor_ops import OpSpec, as_value, parse_op

logger = logging.getLogger(__name__)

NodeId = int
Shape = Tuple[int, ...]


class NodeKind(Enum):
    INPUT = "input"
    DETERMINISTIC = "det"
    STOCHASTIC = "stoch"
    COST = "cost"


KIND_ALIASES = {
    "input": NodeKind.INPUT,
    "det": NodeKind.DETERMINISTIC,
    "deterministic": NodeKind.DETERMINISTIC,
    "stoch": NodeKind.STOCHASTIC,
    "stochastic": NodeKind.STOCHASTIC,
    "cost": NodeKind.COST,
}


class Influence(Enum):
    NONE = "none"
    INFLUENCES = "influences"
    DET_INFLUENCES = "det_influences"


def bits_to_ids(mask: int) -> List[int]:
    ids = []
    while mask:
        low = mask & -mask
        ids.append(low.bit_length() - 1)
        mask ^= low
    return ids


def ids_to_bits(ids: Iterable[int]) -> int:
    mask = 0
    for i in ids:
        mask |= 1 << i
    return mask


@dataclass(frozen=True)
class Node:
    id: NodeId
    kind: NodeKind
    parents: Tuple[NodeId, ...]
    shape: Shape
    op: Optional[OpSpec] = None
    dist: Optional[Distribution] = None
    attrs: Dict[str, Any] = field(default_factory=dict)
    spec_text: Optional[str] = None  # op or distribution string as written
    name: Optional[str] = None

    @property
    def is_input(self) -> bool:
        return self.kind is NodeKind.INPUT

    @property
    def is_stochastic(self) -> bool:
        return self.kind is NodeKind.STOCHASTIC

    @property
    def is_cost(self) -> bool:
        return self.kind is NodeKind.COST

    @property
    def is_deterministic(self) -> bool:
        """Deterministic in the influence sense: det and cost nodes."""
        return self.kind in (NodeKind.DETERMINISTIC, NodeKind.COST)

    @property
    def label(self) -> str:
        return f"{self.id} ({self.name})" if self.name else str(self.id)

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"id": self.id, "kind": self.kind.value, "parents": list(self.parents),
                               "shape": list(self.shape)}
        if self.kind in (NodeKind.DETERMINISTIC, NodeKind.COST):
            doc["op"] = self.spec_text
        elif self.is_stochastic:
            doc["dist"] = self.spec_text
        if self.name:
            doc["name"] = self.name
        return doc


@dataclass(frozen=True)
class InfluenceIndex:
    """
    Per-node bitsets; bit w of descendants[v] is set iff v ≺ w.

    det_descendants follows deterministic edges only, so it stops at sampled
    nodes. deps[v] holds the input and stochastic nodes that reach v
    deterministically, and noninfluenced[v] everything v does not reach.
    """

    descendants: Tuple[int, ...]
    det_descendants: Tuple[int, ...]
    det_ancestors: Tuple[int, ...]
    deps: Tuple[int, ...]
    noninfluenced: Tuple[int, ...]

    @classmethod
    def build(cls, nodes: Sequence[Node], topo_order: Sequence[NodeId],
              children: Sequence[Sequence[NodeId]]) -> "InfluenceIndex":
        n = len(nodes)
        desc = [0] * n
        det_desc = [0] * n
        for v in reversed(topo_order):
            for c in children[v]:
                desc[v] |= (1 << c) | desc[c]
                det_desc[v] |= (1 << c) | (det_desc[c] if nodes[c].is_deterministic else 0)

        det_anc = [0] * n
        for w in topo_order:
            for p in nodes[w].parents:
                det_anc[w] |= (1 << p) | (det_anc[p] if nodes[p].is_deterministic else 0)

        sources = ids_to_bits(node.id for node in nodes if node.is_input or node.is_stochastic)
        everything = (1 << n) - 1
        deps = tuple(det_anc[w] & sources for w in range(n))
        noninfluenced = tuple(everything & ~desc[v] & ~(1 << v) for v in range(n))
        return cls(tuple(desc), tuple(det_desc), tuple(det_anc), deps, noninfluenced)

    def influences(self, v: NodeId, w: NodeId) -> bool:
        return bool((self.descendants[v] >> w) & 1)

    def det_influences(self, v: NodeId, w: NodeId) -> bool:
        return bool((self.det_descendants[v] >> w) & 1)


class Graph:
    """Immutable, validated stochastic computation graph. Build with GraphBuilder.freeze()."""

    def __init__(self, nodes: Sequence[Node], params: Sequence[NodeId], topo_order: Sequence[NodeId]):
        self.nodes: Tuple[Node, ...] = tuple(nodes)
        self.params: Tuple[NodeId, ...] = tuple(params)
        self.topo_order: Tuple[NodeId, ...] = tuple(topo_order)
        self.frozen = True
        children: List[List[NodeId]] = [[] for _ in self.nodes]
        for node in self.nodes:
            for p in node.parents:
                if node.id not in children[p]:
                    children[p].append(node.id)
        self.children: Tuple[Tuple[NodeId, ...], ...] = tuple(tuple(sorted(c)) for c in children)
        self.index = InfluenceIndex.build(self.nodes, self.topo_order, self.children)

        self.inputs = tuple(n.id for n in self.nodes if n.is_input)
        self.deterministic = tuple(n.id for n in self.nodes if n.kind is NodeKind.DETERMINISTIC)
        self.stochastic = tuple(n.id for n in self.nodes if n.is_stochastic)
        self.costs = tuple(n.id for n in self.nodes if n.is_cost)
        self._names = {n.name: n.id for n in self.nodes if n.name}
        self._reports: Dict[NodeId, "DifferentiabilityReport"] = {}

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return (f"Graph(nodes={len(self.nodes)}, stochastic={len(self.stochastic)}, "
                f"costs={len(self.costs)}, params={list(self.params)})")

    def resolve(self, key: Union[NodeId, str]) -> NodeId:
        if isinstance(key, str):
            if key in self._names:
                return self._names[key]
            if key.isdigit():
                key = int(key)
            else:
                raise UnknownNode(f"no node named '{key}'")
        if isinstance(key, (int, np.integer)) and 0 <= int(key) < len(self.nodes):
            return int(key)
        raise UnknownNode(f"unknown node {key!r}")

    def node(self, key: Union[NodeId, str]) -> Node:
        return self.nodes[self.resolve(key)]

    def descendants(self, v: NodeId) -> List[NodeId]:
        return bits_to_ids(self.index.descendants[self.resolve(v)])

    def det_descendants(self, v: NodeId) -> List[NodeId]:
        return bits_to_ids(self.index.det_descendants[self.resolve(v)])

    def deps(self, v: NodeId) -> List[NodeId]:
        return bits_to_ids(self.index.deps[self.resolve(v)])

    def noninfluenced(self, v: NodeId) -> List[NodeId]:
        return bits_to_ids(self.index.noninfluenced[self.resolve(v)])

    def costs_downstream(self, v: NodeId) -> List[NodeId]:
        v = self.resolve(v)
        return [c for c in self.costs if self.index.influences(v, c)]

    def normalize_inputs(self, inputs: Dict[Any, Any]) -> Dict[NodeId, np.ndarray]:
        """Resolve names to ids and coerce input values to arrays of the declared shapes."""
        result = {}
        for key, value in inputs.items():
            nid = self.resolve(key)
            node = self.nodes[nid]
            if not node.is_input:
                raise GraphError(f"node {node.label} is not an input")
            value = as_value(value)
            if value.shape != node.shape:
                raise ShapeError(f"input {node.label}: expected shape {node.shape}, got {value.shape}")
            result[nid] = value
        missing = [self.nodes[i].label for i in self.inputs if i not in result]
        if missing:
            raise IncompleteTrace(f"no value for input node(s) {', '.join(missing)}")
        return result

    def to_dict(self, inputs: Optional[Dict[NodeId, Any]] = None) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"nodes": [n.to_dict() for n in self.nodes], "params": list(self.params)}
        if inputs:
            doc["inputs"] = {str(k): as_value(v).tolist() for k, v in inputs.items()}
        return doc

    def to_builder(self) -> "GraphBuilder":
        return GraphBuilder.from_graph(self)


class GraphBuilder:
    """
    Mutable collection of node declarations.

    Ids are assigned densely in insertion order unless given explicitly;
    parents may refer to ids declared later (resolved at freeze).
    """

    def __init__(self):
        self._specs: Dict[NodeId, Dict[str, Any]] = {}
        self._params: List[NodeId] = []

    def __len__(self):
        return len(self._specs)

    def _claim_id(self, node_id: Optional[NodeId]) -> NodeId:
        if node_id is None:
            node_id = len(self._specs)
            while node_id in self._specs:
                node_id += 1
        elif node_id in self._specs:
            raise GraphError(f"duplicate node id {node_id}")
        if node_id < 0:
            raise GraphError(f"node ids must be non-negative, got {node_id}")
        return int(node_id)

    def _add(self, kind: NodeKind, parents: Sequence[NodeId], text: Optional[str], shape,
             name: Optional[str], node_id: Optional[NodeId]) -> NodeId:
        node_id = self._claim_id(node_id)
        if kind in (NodeKind.DETERMINISTIC, NodeKind.COST):
            op, attrs = parse_op(text)
            op.check_arity(len(parents))
            impl = {"op": op, "attrs": attrs}
        elif kind is NodeKind.STOCHASTIC:
            dist, attrs = parse_distribution(text)
            dist.check_arity(len(parents))
            impl = {"dist": dist, "attrs": attrs}
        else:
            impl = {"attrs": {}}
        self._specs[node_id] = dict(kind=kind, parents=tuple(int(p) for p in parents), text=text,
                                    shape=None if shape is None else tuple(shape), name=name, **impl)
        return node_id

    def add_input(self, shape: Sequence[int] = (), name: Optional[str] = None, param: bool = False,
                  id: Optional[NodeId] = None) -> NodeId:
        node_id = self._add(NodeKind.INPUT, (), None, tuple(shape), name, id)
        if param:
            self._params.append(node_id)
        return node_id

    def add_det(self, op: str, parents: Sequence[NodeId], name: Optional[str] = None,
                shape: Optional[Sequence[int]] = None, id: Optional[NodeId] = None) -> NodeId:
        return self._add(NodeKind.DETERMINISTIC, parents, op, shape, name, id)

    def add_stoch(self, dist: str, parents: Sequence[NodeId] = (), name: Optional[str] = None,
                  shape: Optional[Sequence[int]] = None, id: Optional[NodeId] = None) -> NodeId:
        return self._add(NodeKind.STOCHASTIC, parents, dist, shape, name, id)

    def add_cost(self, op: str, parents: Sequence[NodeId], name: Optional[str] = None,
                 id: Optional[NodeId] = None) -> NodeId:
        return self._add(NodeKind.COST, parents, op, None, name, id)

    def as_cost(self, node: NodeId, name: Optional[str] = None) -> NodeId:
        """Wrap any scalar node (e.g. a stochastic one) in an identity cost."""
        return self.add_cost("identity", [node], name=name)

    def mark_param(self, node: NodeId):
        if node not in self._params:
            self._params.append(node)

    def replace_det(self, node_id: NodeId, op: str, parents: Sequence[NodeId]):
        """Turn an existing node into a deterministic one, keeping its id and name."""
        if node_id not in self._specs:
            raise UnknownNode(f"unknown node {node_id}")
        old = self._specs.pop(node_id)
        self._add(NodeKind.DETERMINISTIC, parents, op, None, old["name"], node_id)

    @classmethod
    def from_graph(cls, graph: Graph) -> "GraphBuilder":
        builder = cls()
        for node in graph.nodes:
            builder._add(node.kind, node.parents, node.spec_text,
                         node.shape if node.is_input else None, node.name, node.id)
        builder._params = list(graph.params)
        return builder

    def freeze(self) -> Graph:
        return freeze(self)


def _topological_order(specs: Dict[NodeId, Dict[str, Any]]) -> List[NodeId]:
    """Topological order; ties always break by smallest id."""
    dag = nx.DiGraph()
    dag.add_nodes_from(specs)
    dag.add_edges_from((p, i) for i, s in specs.items() for p in s["parents"])
    try:
        return list(nx.lexicographical_topological_sort(dag))
    except nx.NetworkXUnfeasible:
        u, v = nx.find_cycle(dag)[0][:2]
        raise CycleError((u, v)) from None


def freeze(builder: Union[GraphBuilder, Graph]) -> Graph:
    """
    Validate a builder into an immutable Graph.

    Checks ids, parent references and parameters, orders the nodes (lowest id
    first among ready nodes), infers every shape from the op and distribution
    rules, and builds the influence index. A Graph passed in is rebuilt from
    its own nodes and comes back equal.
    """
    if isinstance(builder, Graph):
        builder = GraphBuilder.from_graph(builder)
    specs = builder._specs
    if not specs:
        raise GraphError("graph has no nodes")
    n = len(specs)
    if sorted(specs) != list(range(n)):
        raise GraphError(f"node ids must be dense 0..{n - 1}, got {sorted(specs)}")

    def label(i):
        name = specs[i]["name"]
        return f"{i} ({name})" if name else str(i)

    for i, s in specs.items():
        for p in s["parents"]:
            if p not in specs:
                raise UnknownNode(f"node {label(i)} references unknown parent {p}")
        if s["kind"] is NodeKind.INPUT and s["parents"]:
            raise GraphError(f"input node {label(i)} cannot have parents")
    for p in builder._params:
        if p not in specs or specs[p]["kind"] is not NodeKind.INPUT:
            raise GraphError(f"parameter {p} is not an input node")

    order = _topological_order(specs)

    shapes: Dict[NodeId, Shape] = {}
    for i in order:
        s = specs[i]
        parent_shapes = [shapes[p] for p in s["parents"]]
        try:
            if s["kind"] is NodeKind.INPUT:
                shape = s["shape"]
            elif s["kind"] is NodeKind.STOCHASTIC:
                shape = tuple(s["dist"].infer_shape(parent_shapes, s["attrs"]))
            else:
                shape = s["op"].infer_shape(parent_shapes, s["attrs"])
        except ShapeError as exc:
            raise ShapeError(f"node {label(i)}: {exc}") from None
        if s["shape"] is not None and s["kind"] is not NodeKind.INPUT and tuple(s["shape"]) != shape:
            raise ShapeError(f"node {label(i)}: declared shape {s['shape']} but computed {shape}")
        if s["kind"] is NodeKind.COST and shape != ():
            raise CostShapeError(f"cost node {label(i)} must be scalar, got shape {shape}")
        shapes[i] = shape

    nodes = []
    for i in range(n):
        s = specs[i]
        nodes.append(Node(id=i, kind=s["kind"], parents=s["parents"], shape=shapes[i], op=s.get("op"),
                          dist=s.get("dist"), attrs=s["attrs"], spec_text=s["text"], name=s["name"]))
    graph = Graph(nodes, builder._params, order)
    logger.debug("froze graph: %d nodes (%d stochastic, %d costs), %d params",
                 n, len(graph.stochastic), len(graph.costs), len(graph.params))
    return graph


# ---------------------------------------------------------------------------
# Operations

def influence(graph: Graph, v: Union[NodeId, str], w: Union[NodeId, str]) -> Influence:
    """Strongest relation of v to w: deterministic influence, influence through a sampled node, or none."""
    v, w = graph.resolve(v), graph.resolve(w)
    if graph.index.det_influences(v, w):
        return Influence.DET_INFLUENCES
    if graph.index.influences(v, w):
        return Influence.INFLUENCES
    return Influence.NONE


@dataclass(frozen=True)
class EdgeViolation:
    parent: NodeId
    child: NodeId
    position: int
    reason: str

    def to_dict(self):
        return {"parent": self.parent, "child": self.child, "position": self.position, "reason": self.reason}


@dataclass(frozen=True)
class DifferentiabilityReport:
    """Edges on theta's deterministic paths whose op is not differentiable in that argument."""

    theta: NodeId
    violations: Tuple[EdgeViolation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def to_dict(self):
        return {"theta": self.theta, "ok": self.ok, "violations": [v.to_dict() for v in self.violations]}


def validate_differentiability(graph: Graph, theta: Union[NodeId, str]) -> DifferentiabilityReport:
    """
    Check every edge (v, w) with v = theta or theta ≺ᴰ v, and theta ≺ᴰ w: a
    deterministic w must be differentiable in that argument, a stochastic w
    must have a log-probability differentiable in that parameter.
    """
    theta = graph.resolve(theta)
    if theta not in graph.params:
        raise GraphError(f"node {graph.nodes[theta].label} is not a parameter")
    cached = graph._reports.get(theta)
    if cached is not None:
        return cached

    reach = graph.index.det_descendants[theta] | (1 << theta)
    violations = []
    for w in bits_to_ids(graph.index.det_descendants[theta]):
        node = graph.nodes[w]
        for position, v in enumerate(node.parents):
            if not (reach >> v) & 1:
                continue
            if node.is_stochastic:
                if not node.dist.is_differentiable(position):
                    violations.append(EdgeViolation(v, w, position,
                                                    f"log-probability of '{node.dist.name}' is not differentiable "
                                                    f"in parameter {position}"))
            elif not node.op.is_differentiable(position):
                violations.append(EdgeViolation(v, w, position,
                                                f"op '{node.op.name}' is not differentiable in argument {position}"))
    report = DifferentiabilityReport(theta, tuple(violations))
    graph._reports[theta] = report
    return report


def downstream_costs(graph: Graph, trace, v: Union[NodeId, str]) -> float:
    """Q̂_v: sum of sampled cost values downstream of v."""
    values = trace if isinstance(trace, dict) else trace.values
    v = graph.resolve(v)
    total = 0.0
    for c in graph.costs:
        if graph.index.influences(v, c):
            if c not in values:
                raise IncompleteTrace(f"trace has no value for cost node {graph.nodes[c].label}")
            total += float(values[c])
    return total


# ---------------------------------------------------------------------------
# Graph files

def graph_from_dict(doc: Dict[str, Any]) -> Tuple[Graph, Dict[NodeId, np.ndarray]]:
    """Build a graph (and its optional inputs) from the JSON document structure."""
    if not isinstance(doc, dict) or not isinstance(doc.get("nodes"), list):
        raise GraphLoadError("graph document needs a 'nodes' list")
    builder = GraphBuilder()
    for entry in doc["nodes"]:
        node_id = entry.get("id") if isinstance(entry, dict) else None
        try:
            if node_id is None:
                raise GraphLoadError("missing 'id'")
            kind = KIND_ALIASES.get(str(entry.get("kind", "")).lower())
            if kind is None:
                raise GraphLoadError(f"unknown kind {entry.get('kind')!r}")
            parents = [int(p) for p in entry.get("parents", [])]
            shape = entry.get("shape")
            name = entry.get("name")
            if kind is NodeKind.INPUT:
                builder.add_input(shape=tuple(shape or ()), name=name, id=int(node_id))
            elif kind is NodeKind.STOCHASTIC:
                builder.add_stoch(_required(entry, "dist"), parents, name=name, shape=shape, id=int(node_id))
            elif kind is NodeKind.DETERMINISTIC:
                builder.add_det(_required(entry, "op"), parents, name=name, shape=shape, id=int(node_id))
            else:
                builder.add_cost(_required(entry, "op"), parents, name=name, id=int(node_id))
        except (SCGError, TypeError, ValueError) as exc:
            raise GraphLoadError(f"node {node_id}: {exc}") from None
    for p in doc.get("params", []):
        builder.mark_param(int(p))
    graph = builder.freeze()

    inputs: Dict[NodeId, np.ndarray] = {}
    for key, value in (doc.get("inputs") or {}).items():
        try:
            nid = graph.resolve(key)
            inputs[nid] = as_value(value)
        except (SCGError, ValueError) as exc:
            raise GraphLoadError(f"input {key}: {exc}") from None
    return graph, inputs


def _required(entry: Dict[str, Any], key: str) -> str:
    if not entry.get(key):
        raise GraphLoadError(f"missing '{key}'")
    return str(entry[key])


def load_graph(source: Union[str, Path, Dict[str, Any]]) -> Tuple[Graph, Dict[NodeId, np.ndarray]]:
    """Load a graph file (or an already-parsed document)."""
    if isinstance(source, dict):
        return graph_from_dict(source)
    path = Path(source)
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise GraphLoadError(f"graph file {path} not found") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise GraphLoadError(f"cannot read graph file {path}: {exc}") from None
    return graph_from_dict(doc)


def save_graph(graph: Graph, path: Union[str, Path], inputs: Optional[Dict[NodeId, Any]] = None):
    """Write the graph document that load_graph reads back."""
    with open(path, "w") as f:
        json.dump(graph.to_dict(inputs), f, indent=2)
