"""
Built-in example graphs: the five small motifs, a deterministic two-layer
network, a Bernoulli chain, a three-layer binary latent model with an
inference network, Gaussian examples, and tabular MDP / POMDP policies.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from errors import UnknownExample
from estimator import BaselineSpec, FunctionBaseline
from graph_model import Graph, GraphBuilder, NodeId

Inputs = Dict[NodeId, np.ndarray]


@dataclass
class BuiltinExample:
    name: str
    description: str
    build: Callable[[], Tuple[Graph, Inputs]]
    baselines: Optional[Callable[[Graph], BaselineSpec]] = None
    finite: bool = True
    # Exact values where they have a closed form.
    reference: Dict[str, float] = field(default_factory=dict)

    def load(self) -> Tuple[Graph, Inputs]:
        return self.build()

    def default_baselines(self, graph: Graph) -> BaselineSpec:
        return self.baselines(graph) if self.baselines else BaselineSpec()

    def describe(self) -> Dict[str, Any]:
        graph, _ = self.build()
        return {
            "name": self.name,
            "description": self.description,
            "params": [graph.nodes[p].name or str(p) for p in graph.params],
            "finite_support": self.finite,
            "nodes": len(graph.nodes),
            "reference": dict(self.reference),
        }


BUILTINS: Dict[str, BuiltinExample] = {}


def register_builtin(example: BuiltinExample) -> BuiltinExample:
    BUILTINS[example.name] = example
    return example


def builtin(name: str) -> Tuple[Graph, Inputs]:
    """Frozen graph and default inputs for a named example."""
    return get_builtin(name).load()


def get_builtin(name: str) -> BuiltinExample:
    try:
        return BUILTINS[name]
    except KeyError:
        raise UnknownExample(f"unknown example '{name}'; available: {', '.join(sorted(BUILTINS))}") from None


def _inputs(graph: Graph, **values) -> Inputs:
    return graph.normalize_inputs({k: np.asarray(v, dtype=np.float64) for k, v in values.items()})


# ---------------------------------------------------------------------------
# Motifs

def _fig1_1():
    b = GraphBuilder()
    theta = b.add_input(name="theta", param=True)
    x = b.add_stoch("bernoulli_logit", [theta], name="x")
    b.add_cost("identity", [x], name="f")
    g = b.freeze()
    return g, _inputs(g, theta=0.0)


def _fig1_2():
    b = GraphBuilder()
    theta = b.add_input(name="theta", param=True)
    x = b.add_stoch("bernoulli_logit", [theta], name="x")
    y = b.add_det("step", [x], name="y")
    b.add_cost("scale:3", [y], name="f")
    g = b.freeze()
    return g, _inputs(g, theta=0.5)


def _fig1_3():
    b = GraphBuilder()
    theta = b.add_input(name="theta", param=True)
    table = b.add_input((2, 3), name="table")
    x = b.add_stoch("bernoulli_logit", [theta], name="x")
    y = b.add_stoch("categorical_table", [table, x], name="y")
    b.add_cost("identity", [y], name="f")
    g = b.freeze()
    return g, _inputs(g, theta=-0.3, table=[[0.5, 0.25, 0.25], [0.125, 0.375, 0.5]])


def _fig1_4():
    b = GraphBuilder()
    theta = b.add_input(name="theta", param=True)
    x = b.add_stoch("bernoulli", [theta], name="x")
    b.add_cost("mul", [x, theta], name="f")
    g = b.freeze()
    return g, _inputs(g, theta=0.3)


def _fig1_5():
    b = GraphBuilder()
    theta = b.add_input(name="theta", param=True)
    x1 = b.add_stoch("bernoulli_logit", [theta], name="x1")
    x2 = b.add_stoch("bernoulli_logit_sum", [theta, x1], name="x2")
    b.add_cost("identity", [x1], name="f1")
    b.add_cost("scale:2", [x2], name="f2")
    g = b.freeze()
    return g, _inputs(g, theta=0.2)


def _bernoulli_chain():
    b = GraphBuilder()
    theta = b.add_input((3,), name="theta", param=True)
    prev = None
    for i in range(3):
        logit = b.add_det(f"index:{i}", [theta], name=f"t{i}")
        if prev is None:
            x = b.add_stoch("bernoulli_logit", [logit], name=f"x{i}")
        else:
            x = b.add_stoch("bernoulli_logit_sum", [logit, prev], name=f"x{i}")
        b.add_cost(f"scale:{i + 1}", [x], name=f"c{i}")
        prev = x
    g = b.freeze()
    return g, _inputs(g, theta=[0.2, -0.4, 0.7])


# ---------------------------------------------------------------------------
# Deterministic network

def _nn2layer():
    b = GraphBuilder()
    x = b.add_input((4,), name="x")
    y = b.add_input((3,), name="y")
    w1 = b.add_input((3, 4), name="W1", param=True)
    b1 = b.add_input((3,), name="b1", param=True)
    w2 = b.add_input((3, 3), name="W2", param=True)
    b2 = b.add_input((3,), name="b2", param=True)
    h = b.add_det("tanh", [b.add_det("affine", [w1, x, b1], name="a1")], name="h")
    z = b.add_det("affine", [w2, h, b2], name="z")
    lsm = b.add_det("log_softmax", [z], name="log_probs")
    ll = b.add_det("dot", [y, lsm], name="log_lik")
    b.add_cost("neg", [ll], name="loss")
    g = b.freeze()
    rng = np.random.default_rng(11)
    return g, _inputs(g, x=[0.5, -1.0, 0.25, 2.0], y=[0.0, 1.0, 0.0],
                      W1=rng.normal(scale=0.5, size=(3, 4)), b1=rng.normal(scale=0.1, size=3),
                      W2=rng.normal(scale=0.5, size=(3, 3)), b2=rng.normal(scale=0.1, size=3))


# ---------------------------------------------------------------------------
# Three-layer binary latent model with an inference network

NVIL_WIDTHS = (3, 2, 2)


def _nvil_toy():
    b = GraphBuilder()
    x = b.add_input((4,), name="x")
    h1_w, h2_w, h3_w = NVIL_WIDTHS

    def layer(prefix, rows, cols, parent):
        w = b.add_input((rows, cols), name=f"{prefix}_W", param=True)
        bias = b.add_input((rows,), name=f"{prefix}_b", param=True)
        return b.add_det("affine", [w, parent, bias], name=f"{prefix}_logits")

    # inference network q(h1|x) q(h2|h1) q(h3|h2)
    q1 = layer("q1", h1_w, 4, x)
    h1 = b.add_stoch("bernoulli_logit", [q1], name="h1")
    q2 = layer("q2", h2_w, h1_w, h1)
    h2 = b.add_stoch("bernoulli_logit", [q2], name="h2")
    q3 = layer("q3", h3_w, h2_w, h2)
    h3 = b.add_stoch("bernoulli_logit", [q3], name="h3")
    lq1 = b.add_det("bernoulli_loglik", [q1, h1], name="log_q1")
    lq2 = b.add_det("bernoulli_loglik", [q2, h2], name="log_q2")
    lq3 = b.add_det("bernoulli_loglik", [q3, h3], name="log_q3")

    # generative model p(h3) p(h2|h3) p(h1|h2) p(x|h1)
    prior = b.add_input((h3_w,), name="p3_logits", param=True)
    ll_h3 = b.add_det("bernoulli_loglik", [prior, h3], name="log_p_h3")
    ll_h2 = b.add_det("bernoulli_loglik", [layer("p2", h2_w, h3_w, h3), h2], name="log_p_h2")
    ll_h1 = b.add_det("bernoulli_loglik", [layer("p1", h1_w, h2_w, h2), h1], name="log_p_h1")
    ll_x = b.add_det("bernoulli_loglik", [layer("px", 4, h1_w, h1), x], name="log_p_x")

    # per-layer costs r_i = log q(h_i | .) - log p(. | h_i)
    b.add_cost("sub", [lq1, ll_x], name="r1")
    b.add_cost("sub", [lq2, ll_h1], name="r2")
    b.add_cost("sub", [lq3, b.add_det("add", [ll_h2, ll_h3], name="log_p_top")], name="r3")
    g = b.freeze()

    rng = np.random.default_rng(5)
    values = {"x": [1.0, 0.0, 1.0, 1.0], "p3_logits": rng.normal(scale=0.5, size=h3_w)}
    for node in g.nodes:
        if node.is_input and node.name not in values:
            values[node.name] = rng.normal(scale=0.5, size=node.shape)
    return g, _inputs(g, **values)


def _nvil_baselines(graph: Graph) -> BaselineSpec:
    return BaselineSpec(per_node={
        "h1": FunctionBaseline(["x"], lambda x: 2.0 + 0.5 * float(np.sum(x)), tag="b1(x)"),
        "h2": FunctionBaseline(["h1"], lambda h1: 1.0 + 0.25 * float(np.sum(h1)), tag="b2(h1)"),
        "h3": FunctionBaseline(["h2"], lambda h2: 0.5 * float(np.sum(h2)), tag="b3(h2)"),
    })


# ---------------------------------------------------------------------------
# Gaussian examples

def _gauss_reparam():
    b = GraphBuilder()
    theta = b.add_input(name="theta", param=True)
    sigma = b.add_input(name="sigma")
    x = b.add_stoch("gaussian", [theta, sigma], name="x")
    b.add_cost("square", [x], name="f")
    g = b.freeze()
    return g, _inputs(g, theta=1.0, sigma=1.0)


def _vae_toy():
    b = GraphBuilder()
    x = b.add_input(name="x")
    enc = {k: b.add_input(name=k, param=True) for k in ("enc_mu_w", "enc_mu_b", "enc_ls_w", "enc_ls_b")}
    dec_w = b.add_input(name="dec_w", param=True)
    dec_b = b.add_input(name="dec_b", param=True)
    mu = b.add_det("affine", [enc["enc_mu_w"], x, enc["enc_mu_b"]], name="mu")
    log_sigma = b.add_det("affine", [enc["enc_ls_w"], x, enc["enc_ls_b"]], name="log_sigma")
    z = b.add_stoch("gaussian_meanlogsigma", [mu, log_sigma], name="z")
    logit = b.add_det("affine", [dec_w, z, dec_b], name="logit")
    b.add_cost("neg", [b.add_det("bernoulli_loglik", [logit, x], name="log_lik")], name="reconstruction")
    # KL(N(mu, sigma^2) || N(0, 1)) = (mu^2 + sigma^2 - 1) / 2 - log sigma
    var = b.add_det("exp", [b.add_det("scale:2", [log_sigma])], name="variance")
    moment = b.add_det("shift:-1", [b.add_det("add", [b.add_det("square", [mu]), var])])
    b.add_cost("sub", [b.add_det("scale:0.5", [moment]), log_sigma], name="kl")
    g = b.freeze()
    return g, _inputs(g, x=1.0, enc_mu_w=0.8, enc_mu_b=-0.2, enc_ls_w=-0.3, enc_ls_b=-0.5, dec_w=1.5, dec_b=0.1)


# ---------------------------------------------------------------------------
# Tabular control

MDP_STATES, MDP_ACTIONS = 3, 2
MDP_INITIAL = [0.5, 0.25, 0.25]
MDP_REWARDS = [[1.0, 0.0], [0.0, 2.0], [0.5, 0.5]]
MDP_TRANSITIONS = [
    [[0.75, 0.25, 0.0], [0.125, 0.5, 0.375]],
    [[0.25, 0.5, 0.25], [0.0, 0.25, 0.75]],
    [[0.5, 0.0, 0.5], [0.375, 0.375, 0.25]],
]
MDP_VALUES = [-1.5, -2.0, -1.0]


def _mdp_toy(horizon: int = 4):
    b = GraphBuilder()
    theta = b.add_input((MDP_STATES, MDP_ACTIONS), name="theta", param=True)
    p0 = b.add_input((MDP_STATES,), name="p0")
    neg_r = b.add_input((MDP_STATES, MDP_ACTIONS), name="neg_reward")
    dynamics = b.add_input((MDP_STATES, MDP_ACTIONS, MDP_STATES), name="dynamics")
    s = b.add_stoch("categorical", [p0], name="s1")
    for t in range(1, horizon + 1):
        onehot = b.add_det(f"onehot:{MDP_STATES}", [s], name=f"onehot{t}")
        logits = b.add_det("vecmat", [onehot, theta], name=f"logits{t}")
        a = b.add_stoch("categorical_logits", [logits], name=f"a{t}")
        b.add_cost("lookup", [neg_r, s, a], name=f"c{t}")
        if t < horizon:
            s = b.add_stoch("categorical_table", [dynamics, s, a], name=f"s{t + 1}")
    g = b.freeze()
    return g, _inputs(g, theta=np.zeros((MDP_STATES, MDP_ACTIONS)), p0=MDP_INITIAL,
                      neg_reward=-np.asarray(MDP_REWARDS), dynamics=MDP_TRANSITIONS)


def _mdp_baselines(graph: Graph) -> BaselineSpec:
    per_node = {}
    for node in graph.nodes:
        if node.is_stochastic and node.name.startswith("a"):
            t = node.name[1:]
            # remaining horizon scales the state value
            steps = sum(1 for n in graph.nodes if n.is_cost) - int(t) + 1
            per_node[node.name] = FunctionBaseline([f"s{t}"], lambda s, k=steps: k * MDP_VALUES[int(s)] / 2.0,
                                                   tag="b_t(s_t)")
    return BaselineSpec(per_node=per_node)


POMDP_OBSERVATIONS = [[0.75, 0.25], [0.25, 0.75], [0.5, 0.5]]


def _pomdp_toy(horizon: int = 3):
    b = GraphBuilder()
    w = b.add_input((MDP_ACTIONS, 2), name="W", param=True)
    bias = b.add_input((MDP_ACTIONS,), name="b", param=True)
    p0 = b.add_input((MDP_STATES,), name="p0")
    neg_r = b.add_input((MDP_STATES, MDP_ACTIONS), name="neg_reward")
    dynamics = b.add_input((MDP_STATES, MDP_ACTIONS, MDP_STATES), name="dynamics")
    obs_model = b.add_input((MDP_STATES, 2), name="observation_model")
    prev_obs = b.add_input(name="o0")
    s = b.add_stoch("categorical", [p0], name="s1")
    for t in range(1, horizon + 1):
        o = b.add_stoch("categorical_table", [obs_model, s], name=f"o{t}")
        window = b.add_det("concat", [prev_obs, o], name=f"window{t}")
        logits = b.add_det("affine", [w, window, bias], name=f"logits{t}")
        a = b.add_stoch("categorical_logits", [logits], name=f"a{t}")
        b.add_cost("lookup", [neg_r, s, a], name=f"c{t}")
        if t < horizon:
            s = b.add_stoch("categorical_table", [dynamics, s, a], name=f"s{t + 1}")
        prev_obs = o
    g = b.freeze()
    return g, _inputs(g, W=[[0.5, -0.25], [-0.5, 0.25]], b=[0.1, -0.1], p0=MDP_INITIAL,
                      neg_reward=-np.asarray(MDP_REWARDS), dynamics=MDP_TRANSITIONS,
                      observation_model=POMDP_OBSERVATIONS, o0=0.0)


def _pomdp_baselines(graph: Graph) -> BaselineSpec:
    per_node = {}
    for t in range(1, sum(1 for n in graph.nodes if n.is_cost) + 1):
        per_node[f"a{t}"] = FunctionBaseline([f"o{t - 1}", f"o{t}"], lambda prev, cur: -0.5 - 0.25 * (prev + cur),
                                             tag="b_t(o_t-1, o_t)")
    return BaselineSpec(per_node=per_node)


for _example in (
    BuiltinExample("fig1-1", "theta -> x ~ Bernoulli(sigmoid(theta)) -> cost x", _fig1_1,
                   reference={"expectation": 0.5, "gradient": 0.25}),
    BuiltinExample("fig1-2", "theta -> x (stochastic) -> y = step(x) -> cost 3y", _fig1_2),
    BuiltinExample("fig1-3", "theta -> x -> y drawn from a table whose likelihood is never differentiated",
                   _fig1_3),
    BuiltinExample("fig1-4", "x ~ Bernoulli(theta) with a cost that also reads theta", _fig1_4,
                   reference={"expectation": 0.09, "gradient": 0.6}),
    BuiltinExample("fig1-5", "theta -> x1 -> x2 with costs on both (Markov reward chain)", _fig1_5),
    BuiltinExample("bernoulli-chain", "three Bernoulli nodes in a chain with per-step costs", _bernoulli_chain),
    BuiltinExample("nn2layer", "deterministic two-layer network with a softmax cross-entropy cost", _nn2layer),
    BuiltinExample("nvil-toy", "three-layer binary latent model trained with an inference network",
                   _nvil_toy, baselines=_nvil_baselines),
    BuiltinExample("gauss-reparam", "x ~ N(theta, 1) with cost x^2", _gauss_reparam, finite=False,
                   reference={"expectation": 2.0, "gradient": 2.0}),
    BuiltinExample("vae-toy", "one-dimensional Gaussian latent with encoder and decoder", _vae_toy, finite=False),
    BuiltinExample("mdp-toy", "3-state 2-action tabular MDP, horizon 4, softmax policy", _mdp_toy,
                   baselines=_mdp_baselines),
    BuiltinExample("pomdp-toy", "partially observed variant reading a two-step observation window", _pomdp_toy,
                   baselines=_pomdp_baselines),
):
    register_builtin(_example)


def builtin_names() -> List[str]:
    return list(BUILTINS)
