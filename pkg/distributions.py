"""
Distribution families for stochastic nodes.

Each family knows how to sample given its parameter values, how to write
log p(value | params) with tensor ops (``expand``), and, for finite families,
how to list its outcomes. The numeric log-probability is the same expansion
evaluated with the NUMERIC namespace, so the value recorded in a trace and
the value on a surrogate tape are computed identically.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax

from constants import TOLERANCES
from errors import (GraphLoadError, InvalidParam, NotReparameterizable, OutOfSupport,
                    ShapeError, UnknownDistribution)
from tensor_ops import NUMERIC, Tape, TapeVar, as_value, backward_slots

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]

LOG_2PI = math.log(2.0 * math.pi)


def node_rng(seed: int, sample_index: int, node_id: int) -> np.random.Generator:
    """Independent stream per (seed, sample, node); independent of evaluation order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(sample_index), int(node_id)]))


def _numeric(x) -> np.ndarray:
    return x.value if isinstance(x, TapeVar) else as_value(x)


def _as_index(value) -> int:
    value = as_value(value)
    if value.shape != () or value != np.rint(value):
        raise OutOfSupport(f"categorical value must be an integer scalar, got {value}")
    return int(value)


def _sample_index(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return as_value(min(k, len(probs) - 1))


def _check_probs(probs: np.ndarray, what: str):
    if probs.ndim != 1 or probs.shape[0] == 0:
        raise InvalidParam(f"{what}: probabilities must be a non-empty vector")
    if np.any(probs < 0) or abs(float(np.sum(probs)) - 1.0) > TOLERANCES["categorical_sum"]:
        raise InvalidParam(f"{what}: probabilities must be nonnegative and sum to 1, got {probs.tolist()}")


def _broadcast(shapes: Sequence[Shape]) -> Shape:
    result: Shape = ()
    for s in shapes:
        if s == () or s == result:
            continue
        if result == ():
            result = s
            continue
        raise ShapeError(f"cannot broadcast {result} with {s} (only scalar-tensor broadcasting)")
    return result


class Distribution:
    """A parameterized family; parameters bind positionally to the node's parents."""

    name = ""
    family = ""
    arity: Optional[int] = 1  # None means variadic
    min_arity = 1
    param_names: Tuple[str, ...] = ()
    continuous = False
    reparam_op: Optional[str] = None
    # Whether log p is differentiable in each parameter (last flag repeats for variadic).
    differentiable: Tuple[bool, ...] = (True,)
    takes_shape_attr = False
    description = ""

    def is_differentiable(self, position: int) -> bool:
        if position < len(self.differentiable):
            return self.differentiable[position]
        return self.arity is None and bool(self.differentiable) and self.differentiable[-1]

    @property
    def reparameterizable(self) -> bool:
        return self.reparam_op is not None

    def check_arity(self, n: int):
        if self.arity is not None and n != self.arity:
            raise ShapeError(f"distribution '{self.name}' takes {self.arity} parameter(s), got {n}")
        if self.arity is None and n < self.min_arity:
            raise ShapeError(f"distribution '{self.name}' takes at least {self.min_arity} parameter(s), got {n}")

    def infer_shape(self, param_shapes: Sequence[Shape], attrs: Dict[str, Any]) -> Shape:
        raise NotImplementedError

    def validate(self, params: Sequence[np.ndarray]):
        pass

    def _draw(self, rng: np.random.Generator, params: Sequence[np.ndarray], shape: Shape) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, params: Sequence[Any], shape: Shape) -> np.ndarray:
        params = [as_value(p) for p in params]
        self.validate(params)
        return as_value(self._draw(rng, params, tuple(shape)))

    def check_value(self, params: Sequence[np.ndarray], value: np.ndarray):
        pass

    def expand(self, F, params: Sequence[Any], value: np.ndarray):
        """log p(value | params) written with ops from namespace F; value is a constant."""
        raise NotImplementedError

    def log_prob(self, params: Sequence[Any], value) -> float:
        params = [as_value(p) for p in params]
        value = as_value(value)
        self.check_value(params, value)
        with np.errstate(divide="ignore"):
            return float(self.expand(NUMERIC, params, value))

    def outcomes(self, params: Sequence[np.ndarray], shape: Shape) -> List[np.ndarray]:
        raise NotImplementedError(f"distribution '{self.name}' has no finite support")

    def support(self, params: Sequence[Any], shape: Shape) -> List[Tuple[np.ndarray, float]]:
        """(value, probability) for every outcome, in a fixed order."""
        params = [as_value(p) for p in params]
        self.validate(params)
        return [(v, math.exp(self.log_prob(params, v))) for v in self.outcomes(params, shape)]

    def outcome_count(self, shape: Shape, param_shapes: Sequence[Shape]) -> int:
        raise NotImplementedError

    def describe(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "family": self.family,
            "parameters": list(self.param_names),
            "continuous": self.continuous,
            "reparameterizable": self.reparameterizable,
            "differentiable": list(self.differentiable),
            "description": self.description,
        }


# ---------------------------------------------------------------------------
# Bernoulli

class _BernoulliBase(Distribution):
    family = "bernoulli"

    def check_value(self, params, value):
        if not np.all((value == 0.0) | (value == 1.0)):
            raise OutOfSupport(f"{self.name}: value must be 0 or 1, got {value.tolist()}")

    def _success(self, params) -> np.ndarray:
        raise NotImplementedError

    def _draw(self, rng, params, shape):
        return (rng.random(shape) < self._success(params)).astype(np.float64)

    def outcomes(self, params, shape):
        size = int(np.prod(shape)) if shape else 1
        return [np.array(bits, dtype=np.float64).reshape(shape)
                for bits in itertools.product((0.0, 1.0), repeat=size)]

    def outcome_count(self, shape, param_shapes):
        return 2 ** (int(np.prod(shape)) if shape else 1)


class Bernoulli(_BernoulliBase):
    name = "bernoulli"
    param_names = ("p",)
    description = "independent Bernoulli units with success probabilities p"

    def infer_shape(self, param_shapes, attrs):
        return param_shapes[0]

    def validate(self, params):
        (p,) = params
        if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
            raise InvalidParam(f"bernoulli probability must lie in [0, 1], got {p.tolist()}")

    def _success(self, params):
        return params[0]

    def expand(self, F, params, value):
        (p,) = params
        # p where value is 1, 1 - p where value is 0
        q = F.add(F.mul(2.0 * value - 1.0, p), 1.0 - value)
        return F.sum(F.log(q))


class BernoulliLogit(_BernoulliBase):
    name = "bernoulli_logit"
    param_names = ("logits",)
    description = "independent Bernoulli units with success probabilities sigmoid(logits)"

    def infer_shape(self, param_shapes, attrs):
        return param_shapes[0]

    def validate(self, params):
        if not np.all(np.isfinite(params[0])):
            raise InvalidParam(f"bernoulli logits must be finite, got {params[0].tolist()}")

    def _success(self, params):
        return expit(params[0])

    def expand(self, F, params, value):
        return F.bernoulli_loglik(params[0], value)


class BernoulliLogitSum(_BernoulliBase):
    name = "bernoulli_logit_sum"
    arity = None
    param_names = ("logits...",)
    description = "Bernoulli units whose logits are the sum of all parents"

    def infer_shape(self, param_shapes, attrs):
        return _broadcast(param_shapes)

    def validate(self, params):
        for p in params:
            if not np.all(np.isfinite(p)):
                raise InvalidParam(f"bernoulli logits must be finite, got {p.tolist()}")

    def _success(self, params):
        return expit(sum(params[1:], params[0]))

    def expand(self, F, params, value):
        logits = params[0]
        for p in params[1:]:
            logits = F.add(logits, p)
        if tuple(logits.shape) != value.shape:
            logits = F.broadcast(logits, shape=value.shape)
        return F.bernoulli_loglik(logits, value)


# ---------------------------------------------------------------------------
# Categorical (values are rank-0 float indices)

class _CategoricalBase(Distribution):
    family = "categorical"

    def _probs(self, params) -> np.ndarray:
        raise NotImplementedError

    def _size(self, params) -> int:
        return params[0].shape[-1]

    def check_value(self, params, value):
        k = _as_index(value)
        if not 0 <= k < self._size(params):
            raise OutOfSupport(f"{self.name}: index {k} outside 0..{self._size(params) - 1}")

    def _draw(self, rng, params, shape):
        return _sample_index(rng, self._probs(params))

    def outcomes(self, params, shape):
        return [as_value(k) for k in range(self._size(params))]

    def outcome_count(self, shape, param_shapes):
        return param_shapes[0][-1]


class Categorical(_CategoricalBase):
    name = "categorical"
    param_names = ("probs",)
    description = "one draw from a probability vector"

    def infer_shape(self, param_shapes, attrs):
        if len(param_shapes[0]) != 1:
            raise ShapeError(f"categorical probabilities must be a vector, got {param_shapes[0]}")
        return ()

    def validate(self, params):
        _check_probs(params[0], self.name)

    def _probs(self, params):
        return params[0]

    def expand(self, F, params, value):
        return F.log(F.index(params[0], k=int(value)))


class CategoricalLogits(_CategoricalBase):
    name = "categorical_logits"
    param_names = ("logits",)
    description = "one draw from softmax(logits)"

    def infer_shape(self, param_shapes, attrs):
        if len(param_shapes[0]) != 1:
            raise ShapeError(f"categorical logits must be a vector, got {param_shapes[0]}")
        return ()

    def validate(self, params):
        if not np.all(np.isfinite(params[0])):
            raise InvalidParam(f"categorical logits must be finite, got {params[0].tolist()}")

    def _probs(self, params):
        return softmax(params[0])

    def expand(self, F, params, value):
        return F.index(F.log_softmax(params[0]), k=int(value))


class CategoricalTable(_CategoricalBase):
    """
    Draw from table[i, j, ...], a row selected by the index parents.

    The likelihood is available numerically but is never differentiated, which
    is how environment dynamics enter a graph.
    """

    name = "categorical_table"
    arity = None
    min_arity = 2
    param_names = ("table", "indices...")
    differentiable = (False,)
    description = "draw from the table row selected by the index parents; likelihood not differentiable"

    def infer_shape(self, param_shapes, attrs):
        table, *idx = param_shapes
        if len(table) != len(idx) + 1 or any(s != () for s in idx):
            raise ShapeError(f"table of shape {table} needs {len(table) - 1} scalar index parents")
        return ()

    def _row(self, params) -> np.ndarray:
        table, *idx = params
        try:
            return table[tuple(_as_index(i) for i in idx)]
        except IndexError:
            raise InvalidParam(f"table index {[float(i) for i in idx]} out of range for shape {table.shape}") from None

    def validate(self, params):
        _check_probs(self._row(params), self.name)

    def _probs(self, params):
        return self._row(params)

    def expand(self, F, params, value):
        row = self._row([_numeric(p) for p in params])
        return F.const(np.log(row[int(value)]))


# ---------------------------------------------------------------------------
# Diagonal Gaussian

class _GaussianBase(Distribution):
    family = "gaussian"
    arity = 2
    continuous = True
    differentiable = (True, True)

    def infer_shape(self, param_shapes, attrs):
        return _broadcast(param_shapes)

    def _sigma(self, params) -> np.ndarray:
        raise NotImplementedError

    def _draw(self, rng, params, shape):
        return params[0] + self._sigma(params) * rng.standard_normal(shape)

    def check_value(self, params, value):
        if not np.all(np.isfinite(value)):
            raise OutOfSupport(f"{self.name}: value must be finite")

    def continuous_dims(self, shape: Shape) -> int:
        return int(np.prod(shape)) if shape else 1

    def quadrature_value(self, params: Sequence[Any], z: np.ndarray) -> np.ndarray:
        """Value at standardized point z; matches the node's reparameterization op."""
        params = [as_value(p) for p in params]
        self.validate(params)
        return as_value(params[0] + self._sigma(params) * z)

    def _standardized(self, F, mu, sigma, value):
        return F.div(F.sub(value, mu), sigma)

    def _log_density(self, F, z, log_sigma, value):
        size = int(value.size)
        terms = F.sub(F.scale(F.square(z), c=-0.5), log_sigma)
        return F.shift(F.sum(terms), c=-0.5 * size * LOG_2PI)


class Gaussian(_GaussianBase):
    name = "gaussian"
    param_names = ("mean", "sigma")
    reparam_op = "reparam"
    description = "diagonal Gaussian with mean and standard deviation parents"

    def validate(self, params):
        mu, sigma = params
        if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)) or not np.all(np.isfinite(mu)):
            raise InvalidParam(f"gaussian sigma must be positive and finite, got {sigma.tolist()}")

    def _sigma(self, params):
        return params[1]

    def expand(self, F, params, value):
        mu, sigma = params
        z = self._standardized(F, mu, sigma, value)
        return self._log_density(F, z, F.log(sigma), value)


class GaussianMeanLogSigma(_GaussianBase):
    name = "gaussian_meanlogsigma"
    param_names = ("mean", "log_sigma")
    reparam_op = "reparam_logsigma"
    description = "diagonal Gaussian with mean and log standard deviation parents"

    def validate(self, params):
        if not all(np.all(np.isfinite(p)) for p in params):
            raise InvalidParam("gaussian mean and log sigma must be finite")

    def _sigma(self, params):
        return np.exp(params[1])

    def expand(self, F, params, value):
        mu, log_sigma = params
        z = self._standardized(F, mu, F.exp(log_sigma), value)
        return self._log_density(F, z, log_sigma, value)


class StdNormal(_GaussianBase):
    """Parentless N(0, I) noise; shape comes from the node attribute (``std_normal:3``)."""

    name = "std_normal"
    arity = 0
    min_arity = 0
    param_names = ()
    differentiable = ()
    takes_shape_attr = True
    description = "parentless standard normal noise"

    def infer_shape(self, param_shapes, attrs):
        return tuple(attrs.get("shape", ()))

    def _draw(self, rng, params, shape):
        return rng.standard_normal(shape)

    def quadrature_value(self, params, z):
        return as_value(z)

    def expand(self, F, params, value):
        return F.const(-0.5 * float(np.sum(np.square(value))) - 0.5 * value.size * LOG_2PI)


DISTRIBUTIONS: Dict[str, Distribution] = {}


def register_distribution(dist: Distribution, replace: bool = False) -> Distribution:
    if dist.name in DISTRIBUTIONS and not replace:
        raise ValueError(f"distribution '{dist.name}' is already registered")
    DISTRIBUTIONS[dist.name] = dist
    return dist


for _cls in (Bernoulli, BernoulliLogit, BernoulliLogitSum, Categorical, CategoricalLogits,
             CategoricalTable, Gaussian, GaussianMeanLogSigma, StdNormal):
    register_distribution(_cls())


def get_distribution(name: str) -> Distribution:
    try:
        return DISTRIBUTIONS[name]
    except KeyError:
        raise UnknownDistribution(f"unknown distribution '{name}'") from None


def parse_distribution(text: str) -> Tuple[Distribution, Dict[str, Any]]:
    """Parse ``"bernoulli_logit"`` or ``"std_normal:3"`` style names."""
    name, *raw = text.split(":")
    dist = get_distribution(name)
    if not raw:
        return dist, {}
    if not dist.takes_shape_attr:
        raise GraphLoadError(f"distribution '{name}' takes no attributes")
    try:
        return dist, {"shape": tuple(int(v) for v in raw)}
    except ValueError:
        raise GraphLoadError(f"bad shape for distribution '{name}': {':'.join(raw)!r}") from None


def dist_text(dist: Distribution, shape: Shape) -> str:
    if dist.takes_shape_attr and shape:
        return ":".join([dist.name] + [str(d) for d in shape])
    return dist.name


# ---------------------------------------------------------------------------
# Graph-level helpers

@dataclass
class LogProbExpansion:
    """log p(v | params) recorded on its own tape, with v embedded as a constant."""

    node: int
    tape: Tape
    params: Tuple[TapeVar, ...]
    output: TapeVar
    value: np.ndarray

    @property
    def log_prob(self) -> float:
        return float(self.output.value)

    def gradient(self, seed: float = 1.0) -> Tuple[np.ndarray, ...]:
        """Gradient of seed * log p with respect to each parameter parent."""
        adj = backward_slots(self.tape, {self.output.slot: seed}, wrt=[p.slot for p in self.params])
        return tuple(as_value(adj[p.slot]) if p.slot in adj else np.zeros_like(p.value) for p in self.params)


def expand_log_prob(graph, node: int, trace, checked: Optional[bool] = None) -> LogProbExpansion:
    """Build the log-probability subgraph of a stochastic node at its sampled value."""
    values = trace if isinstance(trace, dict) else trace.values
    n = graph.node(node)
    if not n.is_stochastic:
        raise ShapeError(f"node {n.label} is not stochastic")
    tape = Tape(checked)
    params = tuple(tape.leaf(values[p], node=p) for p in n.parents)
    value = as_value(values[n.id])
    n.dist.check_value([p.value for p in params], value)
    output = n.dist.expand(tape.ops, params, value)
    if not isinstance(output, TapeVar):
        output = tape.const(output)
    return LogProbExpansion(node=n.id, tape=tape, params=params, output=output, value=value)


def reparameterize(graph, node):
    """
    Replace a Gaussian node by h = mu + sigma * eps with a new parentless eps ~ N(0, I).

    The node keeps its id (now deterministic) so downstream edges are unchanged;
    eps gets the next free id.
    """
    # graph_model imports this module for the registry
    from graph_model import GraphBuilder

    n = graph.node(node)
    if not n.is_stochastic or not n.dist.reparameterizable:
        kind = n.dist.name if n.is_stochastic else n.kind.value
        raise NotReparameterizable(f"node {n.label} ({kind}) cannot be reparameterized")

    builder = GraphBuilder.from_graph(graph)
    eps_name = f"{n.name}_eps" if n.name else None
    eps = builder.add_stoch(dist_text(get_distribution("std_normal"), n.shape), [], name=eps_name)
    mu, sigma = n.parents
    builder.replace_det(n.id, n.dist.reparam_op, [mu, sigma, eps])
    logger.debug("reparameterized node %s with noise node %d", n.label, eps)
    return builder.freeze()
