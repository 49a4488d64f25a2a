"""
Losses of mutual-help actor-critic training.

Baseline MADDPG terms (critic regression onto a bootstrapped target, the
deterministic policy-gradient actor loss) plus the mutual-help additions: the
expected-policy loss, the gated imitation ("help") loss, the per-minibatch mix
ratio alpha and the combined actor objective.

Every function that returns a Tensor builds onto the Graph it is given. Values
that must carry no gradient (targets, gates, teacher actions, alpha) are
computed eagerly as plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np

from networks import JointSpec
from tensor_autodiff import (
    Graph,
    ShapeError,
    Tensor,
    absolute,
    add,
    concat,
    l2_norm,
    mul,
    reduce_mean,
    scale,
    square,
    sub,
)


@dataclass(frozen=True)
class Minibatch:
    obs: np.ndarray        # (M, sum obs_dim)
    act: np.ndarray        # (M, sum act_dim)
    rew: np.ndarray        # (M, n)
    next_obs: np.ndarray   # (M, sum obs_dim)
    done: np.ndarray       # (M,) bool

    def __post_init__(self):
        m = self.obs.shape[0]
        if m < 1:
            raise ShapeError("minibatch must hold at least one record")
        for name in ("act", "rew", "next_obs", "done"):
            if getattr(self, name).shape[0] != m:
                raise ShapeError(f"minibatch column {name} has {getattr(self, name).shape[0]} rows, expected {m}")

    @property
    def size(self) -> int:
        return self.obs.shape[0]


@dataclass(frozen=True)
class HyperParams:
    gamma: float = 0.95
    tau: float = 0.01
    eta: float = 0.05
    beta: float = 2.0
    batch_size: int = 64
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    lr_expected: float = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.eta <= 0 or self.beta <= 0:
            raise ValueError(f"eta and beta must be positive, got eta={self.eta} beta={self.beta}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


class HelpTerms(NamedTuple):
    loss: Tensor
    gate_rate: float


def joint_action_with(joint: JointSpec, base: np.ndarray,
                      overrides: Mapping[int, Union[Tensor, np.ndarray]]) -> Tensor:
    """Joint action taken from `base`, with the listed agents' blocks substituted."""
    parts = []
    for k in range(joint.n_agents):
        parts.append(overrides[k] if k in overrides else base[..., joint.act_slice(k)])
    return concat(parts)


def _own_obs(batch: Minibatch, joint: JointSpec, i: int) -> np.ndarray:
    return batch.obs[:, joint.obs_slice(i)]


def _q_value(critic, obs: np.ndarray, act) -> np.ndarray:
    return critic.forward(None, obs, act).data


def _with_block(joint: JointSpec, base: np.ndarray, i: int, block: np.ndarray) -> np.ndarray:
    a = np.array(base, dtype=np.float64)
    a[..., joint.act_slice(i)] = block
    return a


def own_q_values(critic_i, actor_i, batch: Minibatch, joint: JointSpec, i: int,
                 own_action: Optional[Tensor] = None) -> np.ndarray:
    """Q_i(o, a_1..pi_i(o_i)..a_n) per record, as constants."""
    own = own_action.data if own_action is not None else actor_i(_own_obs(batch, joint, i))
    return _q_value(critic_i, batch.obs, _with_block(joint, batch.act, i, own))


def td_target(r_i: np.ndarray, o_next: np.ndarray, target_critic, target_actors: Sequence,
              gamma: float, done: np.ndarray, joint: JointSpec,
              action_noise: Optional[np.ndarray] = None) -> np.ndarray:
    """y_i = r_i + gamma * Q'_i(o', pi'(o')), bootstrap zeroed on terminal records.

    A sequence of target critics bootstraps from their elementwise minimum;
    `action_noise` (already clipped) smooths the target actions.
    """
    critics = list(target_critic) if isinstance(target_critic, (list, tuple)) else [target_critic]
    r_i = np.asarray(r_i, dtype=np.float64)
    done = np.asarray(done, dtype=bool)
    m = r_i.shape[0]
    if r_i.ndim != 1 or o_next.shape != (m, joint.total_obs) or done.shape != (m,):
        raise ShapeError(
            f"td_target: rewards {r_i.shape}, next observations {o_next.shape}, done {done.shape} disagree")
    if len(target_actors) != joint.n_agents:
        raise ShapeError(f"td_target: {len(target_actors)} target actors for {joint.n_agents} agents")

    a_next = np.concatenate(
        [actor(o_next[:, joint.obs_slice(j)]) for j, actor in enumerate(target_actors)], axis=-1)
    if action_noise is not None:
        a_next = joint.clip_actions(a_next + action_noise)
    q_next = _q_value(critics[0], o_next, a_next)
    for critic in critics[1:]:
        q_next = np.minimum(q_next, _q_value(critic, o_next, a_next))
    return r_i + gamma * np.where(done, 0.0, q_next)


def critic_loss(graph: Graph, critic, batch: Minibatch, y_i: np.ndarray) -> Tensor:
    """mean (Q_i(o, a) - y_i)^2."""
    if np.shape(y_i) != (batch.size,):
        raise ShapeError(f"critic_loss: targets of shape {np.shape(y_i)} for a batch of {batch.size}")
    q = critic.forward(graph, batch.obs, batch.act)
    return reduce_mean(square(sub(q, y_i)))


def actor_loss(graph: Graph, actor_i, critic_i, batch: Minibatch, joint: JointSpec, i: int,
               own_action: Optional[Tensor] = None) -> Tensor:
    """mean -Q_i(o, a_1..pi_i(o_i)..a_n); only the actor's parameters receive gradient."""
    own = own_action if own_action is not None else actor_i.forward(graph, _own_obs(batch, joint, i))
    q = critic_i.forward(graph, batch.obs, joint_action_with(joint, batch.act, {i: own}), frozen=True)
    return scale(reduce_mean(q), -1.0)


def expected_loss(graph: Graph, expected_i, critic_i, actor_i, batch: Minibatch,
                  joint: JointSpec, i: int) -> Tensor:
    """mean -Q_i(o, pi_i(o_i), mu_i(o)); only mu_i's parameters receive gradient."""
    own = actor_i.forward(graph, _own_obs(batch, joint, i), frozen=True)
    mu = expected_i.forward(graph, batch.obs)
    overrides = {k: expected_i.mu_slice(mu, k) for k in range(joint.n_agents) if k != i}
    overrides[i] = own
    q = critic_i.forward(graph, batch.obs, joint_action_with(joint, batch.act, overrides), frozen=True)
    return scale(reduce_mean(q), -1.0)


def step_eps(x):
    """1 where x > 0, else 0 (including x == 0)."""
    gate = np.where(np.asarray(x, dtype=np.float64) > 0, 1.0, 0.0)
    return float(gate) if gate.ndim == 0 else gate


def expected_actions_for(i: int, expected_nets: Mapping[int, object], obs: np.ndarray) -> dict:
    """mu_j(o, i) for every other agent j, as constants."""
    return {j: net.mu_slice(net.forward(None, obs), i).data
            for j, net in sorted(expected_nets.items()) if j != i}


def help_loss(graph: Graph, actor_i, critic_i, expected_actions: Mapping[int, np.ndarray],
              batch: Minibatch, joint: JointSpec, i: int, eta: float, selective: bool = True,
              own_action: Optional[Tensor] = None, q_own: Optional[np.ndarray] = None) -> HelpTerms:
    """Selective imitation of the actions other agents expect from agent i.

    Teacher j's term is ||pi_i(o_i) - mu_j(o, i)||, counted only where handing
    agent i's slot to mu_j(o, i) costs Q_i less than `eta`. Gradient reaches
    pi_i through the distance alone.
    """
    n = joint.n_agents
    if n < 2:
        raise ValueError("help loss needs at least two agents")
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    others = [j for j in range(n) if j != i]
    if sorted(expected_actions) != others:
        raise ValueError(f"expected actions for agent {i} must come from agents {others}, got {sorted(expected_actions)}")

    own = own_action if own_action is not None else actor_i.forward(graph, _own_obs(batch, joint, i))
    teachers = [np.asarray(expected_actions[j], dtype=np.float64) for j in others]
    if selective:
        if q_own is None:
            q_own = own_q_values(critic_i, actor_i, batch, joint, i, own)
        # every teacher substitution scored in one stacked critic pass
        stacked_obs = np.tile(batch.obs, (len(others), 1))
        stacked_act = np.concatenate([_with_block(joint, batch.act, i, t) for t in teachers])
        q_teachers = _q_value(critic_i, stacked_obs, stacked_act).reshape(len(others), batch.size)

    total, open_gates = None, 0.0
    for k, teacher in enumerate(teachers):
        gate = step_eps(q_teachers[k] + eta - q_own) if selective else np.ones(batch.size)
        open_gates += float(np.sum(gate))
        term = mul(l2_norm(sub(own, teacher)), gate)
        total = term if total is None else add(total, term)

    loss = scale(reduce_mean(total), 1.0 / (n - 1))
    return HelpTerms(loss, open_gates / (batch.size * (n - 1)))


def mix_ratio_alpha(critic_i, actor_i, batch: Minibatch, joint: JointSpec, i: int, beta: float,
                    own_action: Optional[Tensor] = None, q_own: Optional[np.ndarray] = None) -> float:
    """alpha_i = beta * mean |Q_i(o, a_1..pi_i(o_i)..a_n)|, a constant for this minibatch."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    q = q_own if q_own is not None else own_q_values(critic_i, actor_i, batch, joint, i, own_action)
    return beta * reduce_mean(absolute(q)).item()


def mh_actor_loss(actor_loss_value, help_loss_value, alpha: float, marl_term: bool = True) -> Tensor:
    """L_actor + alpha * L_help; without the MARL term only alpha * L_help remains."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    helped = scale(help_loss_value, alpha)
    return add(actor_loss_value, helped) if marl_term else helped
