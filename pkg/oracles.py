"""
Verification oracles.

gradient_check / run_gradcheck - central finite differences against backward
    for every network architecture and every trainable loss.
loss_value_oracle - every loss recomputed by straight-line numpy (no graph)
    plus the hand-worked cases.
coordination_oracle - grid search over the coordination game.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from envs import COORD_TARGET, coordination_grid_search
from mh_losses import (
    Minibatch,
    actor_loss,
    critic_loss,
    expected_actions_for,
    expected_loss,
    help_loss,
    mh_actor_loss,
    mix_ratio_alpha,
    td_target,
)
from networks import DEFAULT_HIDDEN, AgentSpec, ActorNet, CriticNet, ExpectedNet, JointSpec
from tensor_autodiff import (
    BACKWARD_RULES,
    OP_KINDS,
    Graph,
    Parameter,
    Tensor,
    add,
    as_tensor,
    backward,
    matmul,
    mul,
    reduce_sum,
)

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
FD_FLOOR = 1e-4
VALUE_TOLERANCE = 1e-10
GRADCHECK_HIDDEN = (8, 8)


# ----------------------------------------------------------------------------
# Finite differences
# ----------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float = 0.0
    checked: int = 0
    skipped: int = 0        # coordinates whose perturbation crossed a relu kink
    worst: str = ""
    tolerance: float = FD_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = FD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _evaluate(loss_fn: Callable[[Graph], Tensor]) -> Tuple[float, List[np.ndarray]]:
    graph = Graph()
    return loss_fn(graph).item(), graph.relu_masks()


def _same_masks(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(name: str, loss_fn: Callable[[Graph], Tensor], params: Sequence[Parameter],
                   rng: np.random.Generator, step: float = FD_STEP, coords_per_tensor: int = 16,
                   tolerance: float = FD_TOLERANCE) -> GradCheckResult:
    """Compare backward against central differences on a sample of coordinates.

    `loss_fn` must rebuild the loss from scratch on the graph it is handed.
    """
    graph = Graph()
    loss = loss_fn(graph)
    analytic = backward(graph, loss, params)
    base_masks = graph.relu_masks()

    result = GradCheckResult(name, tolerance=tolerance)
    for p in params:
        original = p.data
        picks = rng.choice(original.size, size=min(coords_per_tensor, original.size), replace=False)
        for flat in picks:
            plus = original.copy()
            plus.flat[flat] += step
            p.data = plus
            f_plus, masks_plus = _evaluate(loss_fn)
            minus = original.copy()
            minus.flat[flat] -= step
            p.data = minus
            f_minus, masks_minus = _evaluate(loss_fn)
            p.data = original
            if not (_same_masks(base_masks, masks_plus) and _same_masks(base_masks, masks_minus)):
                result.skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = relative_error(float(analytic[p].flat[flat]), numeric)
            result.checked += 1
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = f"{p.name}[{int(flat)}]"
    return result


def _wrong_tanh(g, node):
    return (g * (1.0 - node.output),)


def _scaled(rule):
    def wrong(g, node):
        return tuple(None if grad is None else 1.5 * grad for grad in rule(g, node))
    return wrong


@contextmanager
def corrupted_derivative(kind: str = "tanh"):
    """Temporarily replace one backward rule with a wrong one."""
    if kind not in OP_KINDS:
        raise ValueError(f"unknown op kind {kind!r}")
    original = BACKWARD_RULES[kind]
    if kind == "tanh":
        BACKWARD_RULES[kind] = _wrong_tanh
    elif kind == "stop-gradient":
        BACKWARD_RULES[kind] = lambda g, node: (g,)
    else:
        BACKWARD_RULES[kind] = _scaled(original)
    try:
        yield
    finally:
        BACKWARD_RULES[kind] = original


# ----------------------------------------------------------------------------
# Random small instances
# ----------------------------------------------------------------------------

@dataclass
class Instance:
    joint: JointSpec
    actors: List[ActorNet]
    target_actors: List[ActorNet]
    critics: List[CriticNet]
    target_critics: List[CriticNet]
    expected: Dict[int, ExpectedNet]
    batch: Minibatch
    i: int
    eta: float
    beta: float
    gamma: float


def random_instance(rng: np.random.Generator, hidden: Sequence[int] = GRADCHECK_HIDDEN,
                    n_agents: Optional[int] = None, batch_size: Optional[int] = None) -> Instance:
    """Heterogeneous agents, freshly initialised networks and a random minibatch."""
    n = n_agents or int(rng.integers(2, 4))
    m = batch_size or int(rng.integers(1, 7))
    specs = []
    for _ in range(n):
        act_dim = int(rng.integers(1, 3))
        low = rng.uniform(-2.0, -0.5, size=act_dim)
        high = rng.uniform(0.5, 2.0, size=act_dim)
        specs.append(AgentSpec(int(rng.integers(2, 5)), act_dim, tuple(low), tuple(high)))
    joint = JointSpec(specs)

    def draw():
        return np.random.default_rng(int(rng.integers(2 ** 31)))

    actors = [ActorNet(s, draw(), hidden) for s in specs]
    critics = [CriticNet(joint, draw(), hidden) for _ in range(n)]
    expected = {k: ExpectedNet(joint, k, draw(), hidden) for k in range(n)}
    # targets differ from the online nets so target mix-ups show up
    target_actors = [ActorNet(s, draw(), hidden) for s in specs]
    target_critics = [CriticNet(joint, draw(), hidden) for _ in range(n)]
    # scale heads up so tanh saturation and gates are exercised
    for net in [*actors, *target_actors, *expected.values()]:
        w, b = net.mlp.layers[-1]
        w.data = w.data * 10.0
        b.data = b.data * 10.0

    batch = Minibatch(
        obs=rng.normal(size=(m, joint.total_obs)),
        act=rng.uniform(joint.act_low, joint.act_high, size=(m, joint.total_act)),
        rew=rng.normal(size=(m, n)),
        next_obs=rng.normal(size=(m, joint.total_obs)),
        done=rng.uniform(size=m) < 0.3,
    )
    return Instance(joint, actors, target_actors, critics, target_critics, expected, batch,
                    i=int(rng.integers(n)), eta=float(rng.uniform(0.01, 0.5)),
                    beta=float(rng.uniform(0.5, 3.0)), gamma=float(rng.uniform(0.0, 0.99)))


def gradcheck_cases(inst: Instance, rng: np.random.Generator):
    """(name, loss builder, trained parameters) for every architecture and trainable loss."""
    joint, batch, i = inst.joint, inst.batch, inst.i
    actor, critic, mu = inst.actors[i], inst.critics[i], inst.expected[i]
    obs_i = batch.obs[:, joint.obs_slice(i)]
    w_actor = rng.normal(size=(batch.size, joint.specs[i].act_dim))
    w_critic = rng.normal(size=batch.size)
    w_mu = rng.normal(size=(batch.size, mu.out_dim))
    y = td_target(batch.rew[:, i], batch.next_obs, inst.target_critics[i], inst.target_actors,
                  inst.gamma, batch.done, joint)
    teachers = expected_actions_for(i, inst.expected, batch.obs)
    alpha = mix_ratio_alpha(critic, actor, batch, joint, i, inst.beta)

    def combined(graph):
        base = actor_loss(graph, actor, critic, batch, joint, i)
        helped = help_loss(graph, actor, critic, teachers, batch, joint, i, inst.eta)
        return mh_actor_loss(base, helped.loss, alpha)

    return [
        ("actor network", lambda g: reduce_sum(mul(actor.forward(g, obs_i), w_actor)), actor.parameters()),
        ("critic network", lambda g: reduce_sum(mul(critic.forward(g, batch.obs, batch.act), w_critic)),
         critic.parameters()),
        ("expected network", lambda g: reduce_sum(mul(mu.forward(g, batch.obs), w_mu)), mu.parameters()),
        ("critic loss", lambda g: critic_loss(g, critic, batch, y), critic.parameters()),
        ("actor loss", lambda g: actor_loss(g, actor, critic, batch, joint, i), actor.parameters()),
        ("expected loss", lambda g: expected_loss(g, mu, critic, actor, batch, joint, i), mu.parameters()),
        ("help loss", lambda g: help_loss(g, actor, critic, teachers, batch, joint, i, inst.eta).loss,
         actor.parameters()),
        ("help loss, no selectivity",
         lambda g: help_loss(g, actor, critic, teachers, batch, joint, i, inst.eta, selective=False).loss,
         actor.parameters()),
        ("combined actor loss", combined, actor.parameters()),
    ]


@dataclass
class GradCheckReport:
    results: List[GradCheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    def failures(self) -> List[GradCheckResult]:
        return [r for r in self.results if not r.passed]


def run_gradcheck(draws: int = 10, seed: int = 0, step: float = FD_STEP, tolerance: float = FD_TOLERANCE,
                  coords_per_tensor: int = 16, hidden: Sequence[int] = GRADCHECK_HIDDEN,
                  full_size_draws: int = 1) -> GradCheckReport:
    """`draws` small random instances, then `full_size_draws` at the deployed hidden sizes."""
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    full_size = "x".join(str(h) for h in DEFAULT_HIDDEN)
    plan = [(f"#{d}", hidden) for d in range(draws)]
    plan += [(f"#{d} ({full_size})", DEFAULT_HIDDEN) for d in range(full_size_draws)]
    for label, sizes in plan:
        inst = random_instance(rng, sizes)
        for name, loss_fn, params in gradcheck_cases(inst, rng):
            result = gradient_check(f"{name} {label}", loss_fn, params, rng, step, coords_per_tensor, tolerance)
            logger.debug(f"[Gradcheck] {result.name}: max rel err {result.max_rel_error:.2e} "
                         f"over {result.checked} coords ({result.skipped} skipped at kinks)")
            report.results.append(result)
    return report


# ----------------------------------------------------------------------------
# Straight-line references
# ----------------------------------------------------------------------------

def reference_mlp(layers: Sequence[Tuple[np.ndarray, np.ndarray]], x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def _layers(net) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [(w.data, b.data) for w, b in net.mlp.layers]


def reference_actor(net: ActorNet, obs: np.ndarray) -> np.ndarray:
    z = reference_mlp(_layers(net), obs)
    return np.tanh(z) * (net.high - net.low) / 2.0 + (net.high + net.low) / 2.0


def reference_critic(net: CriticNet, obs: np.ndarray, act: np.ndarray) -> np.ndarray:
    return reference_mlp(_layers(net), np.concatenate([obs, act], axis=-1)).sum(axis=-1)


def reference_expected(net: ExpectedNet, obs: np.ndarray) -> np.ndarray:
    z = reference_mlp(_layers(net), obs)
    return np.tanh(z) * (net.high - net.low) / 2.0 + (net.high + net.low) / 2.0


def _substituted(joint: JointSpec, act: np.ndarray, blocks: Mapping[int, np.ndarray]) -> np.ndarray:
    out = act.copy()
    for k, block in blocks.items():
        out[:, joint.act_slice(k)] = block
    return out


def reference_td_target(r, o_next, target_critic, target_actors, gamma, done, joint) -> np.ndarray:
    a_next = np.concatenate([reference_actor(net, o_next[:, joint.obs_slice(j)])
                             for j, net in enumerate(target_actors)], axis=-1)
    q_next = reference_critic(target_critic, o_next, a_next)
    return r + gamma * (1.0 - done.astype(np.float64)) * q_next


def reference_critic_loss(critic, batch: Minibatch, y) -> float:
    return float(np.mean((reference_critic(critic, batch.obs, batch.act) - y) ** 2))


def reference_actor_loss(actor, critic, batch: Minibatch, joint: JointSpec, i: int) -> float:
    own = reference_actor(actor, batch.obs[:, joint.obs_slice(i)])
    return float(-np.mean(reference_critic(critic, batch.obs, _substituted(joint, batch.act, {i: own}))))


def reference_expected_loss(mu, critic, actor, batch: Minibatch, joint: JointSpec, i: int) -> float:
    out = reference_expected(mu, batch.obs)
    blocks = {k: out[:, start:stop] for k, (start, stop) in mu.block_offsets.items()}
    blocks[i] = reference_actor(actor, batch.obs[:, joint.obs_slice(i)])
    return float(-np.mean(reference_critic(critic, batch.obs, _substituted(joint, batch.act, blocks))))


def reference_help_loss(actor, critic, teachers, batch: Minibatch, joint: JointSpec, i: int,
                        eta: float, selective: bool = True) -> float:
    own = reference_actor(actor, batch.obs[:, joint.obs_slice(i)])
    q_own = reference_critic(critic, batch.obs, _substituted(joint, batch.act, {i: own}))
    total = np.zeros(batch.size)
    for j, teacher in sorted(teachers.items()):
        q_teacher = reference_critic(critic, batch.obs, _substituted(joint, batch.act, {i: teacher}))
        gate = (q_teacher + eta - q_own > 0).astype(np.float64) if selective else 1.0
        total += np.sqrt(np.sum((own - teacher) ** 2, axis=-1)) * gate
    return float(np.mean(total) / (joint.n_agents - 1))


def reference_alpha(actor, critic, batch: Minibatch, joint: JointSpec, i: int, beta: float) -> float:
    own = reference_actor(actor, batch.obs[:, joint.obs_slice(i)])
    q = reference_critic(critic, batch.obs, _substituted(joint, batch.act, {i: own}))
    return float(beta * np.mean(np.abs(q)))


# ----------------------------------------------------------------------------
# Loss-value oracle
# ----------------------------------------------------------------------------

class AffineCritic:
    """Fixed critic Q(o, a) = bias + o.w_obs + a.w_act for hand-worked cases."""

    def __init__(self, joint: JointSpec, bias: float = 0.0, w_obs=None, w_act=None):
        self.joint = joint
        self.bias = float(bias)
        self.w_obs = np.zeros(joint.total_obs) if w_obs is None else np.asarray(w_obs, dtype=np.float64)
        self.w_act = np.zeros(joint.total_act) if w_act is None else np.asarray(w_act, dtype=np.float64)

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, graph: Optional[Graph], obs, act, frozen: bool = False) -> Tensor:
        q = add(matmul(as_tensor(obs), self.w_obs[:, None]), matmul(as_tensor(act), self.w_act[:, None]))
        return reduce_sum(add(q, self.bias), axis=-1)

    def __call__(self, obs, act) -> np.ndarray:
        return self.forward(None, obs, act).data


@dataclass
class ValueCheck:
    name: str
    graph_value: float
    expected: float

    @property
    def error(self) -> float:
        return abs(self.graph_value - self.expected)


@dataclass
class ValueReport:
    checks: List[ValueCheck] = field(default_factory=list)
    tolerance: float = VALUE_TOLERANCE

    def add(self, name: str, graph_value, expected):
        self.checks.append(ValueCheck(name, float(graph_value), float(expected)))

    @property
    def max_error(self) -> float:
        return max((c.error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and self.max_error <= self.tolerance

    def mismatches(self) -> List[ValueCheck]:
        return [c for c in self.checks if not c.error <= self.tolerance]


def worked_examples(report: ValueReport):
    """The hand-evaluated cases: help loss 0.5, alpha 2.0, target 2.9."""
    joint = JointSpec([AgentSpec.box(1, 2), AgentSpec.box(1, 2)])
    actor = ActorNet(joint.specs[0], np.random.default_rng(0), hidden=(4,))
    actor.zero_head()
    actor.mlp.layers[-1][1].data = np.array([np.arctanh(0.5), 0.0])   # pi_1(o_1) = (0.5, 0.0)
    critic = AffineCritic(joint, bias=1.0, w_act=[0.0, 2.0 / 3.0, 0.0, 0.0])
    batch = Minibatch(np.ones((1, 2)), np.zeros((1, 4)), np.zeros((1, 2)), np.ones((1, 2)), np.zeros(1, dtype=bool))
    teachers = {1: np.array([[0.1, 0.3]])}
    opened = help_loss(Graph(), actor, critic, teachers, batch, joint, 0, eta=0.05)
    report.add("help loss, open gate", opened.loss.item(), 0.5)
    closed_critic = AffineCritic(joint, bias=1.0, w_act=[0.0, -1.0, 0.0, 0.0])   # teacher scores 0.7
    closed = help_loss(Graph(), actor, closed_critic, teachers, batch, joint, 0, eta=0.05)
    report.add("help loss, closed gate", closed.loss.item(), 0.0)

    alpha_joint = JointSpec([AgentSpec.box(1, 1), AgentSpec.box(1, 1)])
    alpha_actor = ActorNet(alpha_joint.specs[0], np.random.default_rng(0), hidden=(4,))
    alpha_critic = AffineCritic(alpha_joint, w_obs=[1.0, 0.0])
    alpha_batch = Minibatch(np.array([[1.5, 0.0], [-0.5, 0.0]]), np.zeros((2, 2)), np.zeros((2, 2)),
                            np.zeros((2, 2)), np.zeros(2, dtype=bool))
    report.add("alpha, beta=2", mix_ratio_alpha(alpha_critic, alpha_actor, alpha_batch, alpha_joint, 0, 2.0), 2.0)

    target_critic = AffineCritic(alpha_joint, bias=2.0)
    y = td_target(np.array([1.0]), np.zeros((1, 2)), target_critic, [alpha_actor, alpha_actor], 0.95,
                  np.array([False]), alpha_joint)
    report.add("target value", y[0], 2.9)
    y_done = td_target(np.array([1.0]), np.zeros((1, 2)), target_critic, [alpha_actor, alpha_actor], 0.95,
                       np.array([True]), alpha_joint)
    report.add("target value, terminal", y_done[0], 1.0)
    report.add("combined actor loss", mh_actor_loss(Tensor(-1.0), Tensor(0.5), 2.0).item(), 0.0)


def loss_value_oracle(instances: int = 100, seed: int = 0, tolerance: float = VALUE_TOLERANCE) -> ValueReport:
    rng = np.random.default_rng(seed)
    report = ValueReport(tolerance=tolerance)
    for k in range(instances):
        inst = random_instance(rng)
        joint, batch, i = inst.joint, inst.batch, inst.i
        actor, critic, mu = inst.actors[i], inst.critics[i], inst.expected[i]
        r_i = batch.rew[:, i]

        y = td_target(r_i, batch.next_obs, inst.target_critics[i], inst.target_actors, inst.gamma, batch.done, joint)
        y_ref = reference_td_target(r_i, batch.next_obs, inst.target_critics[i], inst.target_actors,
                                    inst.gamma, batch.done, joint)
        for s in range(batch.size):
            report.add(f"#{k} target value [{s}]", y[s], y_ref[s])
        report.add(f"#{k} critic loss", critic_loss(Graph(), critic, batch, y).item(),
                   reference_critic_loss(critic, batch, y_ref))
        a_loss = actor_loss(Graph(), actor, critic, batch, joint, i).item()
        report.add(f"#{k} actor loss", a_loss, reference_actor_loss(actor, critic, batch, joint, i))
        report.add(f"#{k} expected loss", expected_loss(Graph(), mu, critic, actor, batch, joint, i).item(),
                   reference_expected_loss(mu, critic, actor, batch, joint, i))

        teachers = expected_actions_for(i, inst.expected, batch.obs)
        ref_teachers = {j: reference_expected(inst.expected[j], batch.obs)[:, slice(*inst.expected[j].block_offsets[i])]
                        for j in range(joint.n_agents) if j != i}
        h_loss = help_loss(Graph(), actor, critic, teachers, batch, joint, i, inst.eta).loss.item()
        report.add(f"#{k} help loss", h_loss,
                   reference_help_loss(actor, critic, ref_teachers, batch, joint, i, inst.eta))
        report.add(f"#{k} help loss, no selectivity",
                   help_loss(Graph(), actor, critic, teachers, batch, joint, i, inst.eta, selective=False).loss.item(),
                   reference_help_loss(actor, critic, ref_teachers, batch, joint, i, inst.eta, selective=False))
        alpha = mix_ratio_alpha(critic, actor, batch, joint, i, inst.beta)
        alpha_ref = reference_alpha(actor, critic, batch, joint, i, inst.beta)
        report.add(f"#{k} alpha", alpha, alpha_ref)
        report.add(f"#{k} combined actor loss",
                   mh_actor_loss(Tensor(a_loss), Tensor(h_loss), alpha).item(),
                   reference_actor_loss(actor, critic, batch, joint, i)
                   + alpha_ref * reference_help_loss(actor, critic, ref_teachers, batch, joint, i, inst.eta))
    worked_examples(report)
    return report


# ----------------------------------------------------------------------------
# Coordination game
# ----------------------------------------------------------------------------

@dataclass
class CoordinationReport:
    best_joint: Tuple[float, float]
    best_total: float
    best_response_ok: bool

    @property
    def passed(self) -> bool:
        return (np.allclose(self.best_joint, (COORD_TARGET, COORD_TARGET), atol=1e-9)
                and abs(self.best_total) <= 1e-12 and self.best_response_ok)


def coordination_oracle(resolution: float = 0.01) -> CoordinationReport:
    """Agent 1's best response is to copy agent 2; the joint optimum is (0.5, 0.5)."""
    oracle = coordination_grid_search(resolution)
    return CoordinationReport(oracle.best_joint, oracle.best_total,
                              bool(np.allclose(oracle.best_response, oracle.grid)))
