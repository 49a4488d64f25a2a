"""
Training harness: the training loop over the MADDPG or MATD3 backend with the
mutual-help layer and its ablation switches, plus evaluation and multi-run
suites.
"""
from __future__ import annotations

import logging
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from envs import TrajectoryRecorder, make_env
from metrics_store import MetricsRow
from mh_losses import (
    Minibatch,
    actor_loss,
    critic_loss,
    expected_actions_for,
    expected_loss,
    help_loss,
    mh_actor_loss,
    mix_ratio_alpha,
    own_q_values,
    td_target,
)
from networks import (
    ActorNet,
    CheckpointError,
    CriticNet,
    ExpectedNet,
    JointSpec,
    TargetPair,
    soft_update,
)
from replay_buffer import ReplayBuffer, Transition
from run_config import TrainConfig
from tensor_autodiff import AdamState, Graph, NonFiniteError, Tensor, adam_step, backward

logger = logging.getLogger(__name__)

# Random stream role codes. Each network draws its initial weights from its
# own stream, so optional networks never shift anyone else's numbers.
ROLE_ENV = 0
ROLE_EXPLORATION = 1
ROLE_SAMPLING = 2
ROLE_TARGET_NOISE = 3
ROLE_EVAL = 4
ROLE_ACTOR = 10
ROLE_CRITIC = 20
ROLE_EXPECTED = 30
ROLE_TWIN_CRITIC = 40


def role_rng(seed: int, role: int) -> np.random.Generator:
    return np.random.default_rng([seed, role])


class TrainingAborted(RuntimeError):
    """A loss became non-finite; the run cannot continue."""


class SuiteError(ValueError):
    """Suite request rejected before any run started."""


@dataclass
class AgentModules:
    actor: TargetPair
    critics: List[TargetPair]
    expected: Optional[ExpectedNet]
    actor_opt: AdamState
    critic_opts: List[AdamState]
    expected_opt: Optional[AdamState]


class MultiAgentLearner:
    """Networks, optimizers and the per-step update of every agent."""

    def __init__(self, joint: JointSpec, config: TrainConfig):
        self.joint = joint
        self.config = config
        self.hp = config.hyper_params()
        self.twin = config.backend == "matd3"
        self.agents: List[AgentModules] = []
        hidden = config.hidden_sizes
        for i, spec in enumerate(joint.specs):
            actor = TargetPair.of(ActorNet(spec, role_rng(config.seed, ROLE_ACTOR + i), hidden))
            critics = [TargetPair.of(CriticNet(joint, role_rng(config.seed, ROLE_CRITIC + i), hidden))]
            if self.twin:
                critics.append(TargetPair.of(CriticNet(joint, role_rng(config.seed, ROLE_TWIN_CRITIC + i), hidden)))
            expected = None
            if config.mutual_help:
                expected = ExpectedNet(joint, i, role_rng(config.seed, ROLE_EXPECTED + i), hidden)
            self.agents.append(AgentModules(
                actor=actor,
                critics=critics,
                expected=expected,
                actor_opt=AdamState.for_params(actor.online.parameters()),
                critic_opts=[AdamState.for_params(pair.online.parameters()) for pair in critics],
                expected_opt=AdamState.for_params(expected.parameters()) if expected else None,
            ))
        self.sample_rng = role_rng(config.seed, ROLE_SAMPLING)
        self.target_noise_rng = role_rng(config.seed, ROLE_TARGET_NOISE)
        self.updates = 0

    @classmethod
    def from_checkpoint(cls, joint: JointSpec, config: TrainConfig,
                        tensors: Dict[str, np.ndarray]) -> "MultiAgentLearner":
        learner = cls(joint, config)
        learner.load_parameters(tensors)
        return learner

    @property
    def n_agents(self) -> int:
        return self.joint.n_agents

    def actors(self) -> List[ActorNet]:
        return [mods.actor.online for mods in self.agents]

    def expected_nets(self) -> Dict[int, ExpectedNet]:
        return {i: mods.expected for i, mods in enumerate(self.agents) if mods.expected is not None}

    # -- acting -------------------------------------------------------------

    def greedy(self, obs_joint: np.ndarray) -> np.ndarray:
        a = np.concatenate([actor(obs_joint[self.joint.obs_slice(i)]) for i, actor in enumerate(self.actors())])
        return self.joint.clip_actions(a)

    def act(self, obs_joint: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
        """Greedy joint action plus independent Gaussian noise, clamped to bounds."""
        noise = rng.normal(0.0, 1.0, size=self.joint.total_act) * sigma
        return self.joint.clip_actions(self.greedy(obs_joint) + noise)

    # -- updates ------------------------------------------------------------

    def _minimize(self, what: str, step: int, build: Callable[[Graph], Tensor], params, opt, lr) -> Tensor:
        graph = Graph()
        try:
            loss = build(graph)
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"{what} loss evaluated to {loss.item()}")
            grads = backward(graph, loss, params)
        except NonFiniteError as exc:
            raise TrainingAborted(f"non-finite {what} loss at step {step}") from exc
        adam_step(params, grads, opt, lr)
        return loss

    def policy_step(self) -> bool:
        """MATD3 delays actor/expected updates; MADDPG updates them every time."""
        return not self.twin or self.updates % self.config.policy_delay == 0

    def _target_action_noise(self, shape) -> Optional[np.ndarray]:
        if not self.twin:
            return None
        noise = self.target_noise_rng.normal(0.0, 1.0, size=shape) * self.config.target_noise
        return np.clip(noise, -self.config.target_noise_clip, self.config.target_noise_clip)

    def update_agent(self, i: int, batch: Minibatch, step: int = 0, update_policy: bool = True) -> Dict[str, float]:
        """Actor, then critic(s), then expected policy of agent i on one minibatch."""
        cfg, hp, joint = self.config, self.hp, self.joint
        mods = self.agents[i]
        actor = mods.actor.online
        critic = mods.critics[0].online
        diag: Dict[str, float] = {}

        if update_policy:
            def build_actor(graph: Graph) -> Tensor:
                own = actor.forward(graph, batch.obs[:, joint.obs_slice(i)])
                base = actor_loss(graph, actor, critic, batch, joint, i, own_action=own)
                diag["actor_loss"] = base.item()
                if not cfg.mutual_help:
                    return base
                teachers = expected_actions_for(i, self.expected_nets(), batch.obs)
                q_own = own_q_values(critic, actor, batch, joint, i, own)
                helped = help_loss(graph, actor, critic, teachers, batch, joint, i, hp.eta,
                                   selective=cfg.selectivity, own_action=own, q_own=q_own)
                alpha = mix_ratio_alpha(critic, actor, batch, joint, i, hp.beta, q_own=q_own)
                diag.update(help_loss=helped.loss.item(), gate_rate=helped.gate_rate, alpha=alpha)
                return mh_actor_loss(base, helped.loss, alpha, marl_term=cfg.marl_term)

            self._minimize("actor", step, build_actor, actor.parameters(), mods.actor_opt, hp.lr_actor)

        target_actors = [m.actor.target for m in self.agents]
        try:
            y = td_target(batch.rew[:, i], batch.next_obs, [pair.target for pair in mods.critics],
                          target_actors, hp.gamma, batch.done, joint,
                          action_noise=self._target_action_noise(batch.act.shape))
        except NonFiniteError as exc:
            raise TrainingAborted(f"non-finite critic loss at step {step}") from exc
        critic_values = []
        for pair, opt in zip(mods.critics, mods.critic_opts):
            loss = self._minimize("critic", step, lambda graph, net=pair.online: critic_loss(graph, net, batch, y),
                                  pair.online.parameters(), opt, hp.lr_critic)
            critic_values.append(loss.item())
        diag["critic_loss"] = float(np.mean(critic_values))

        if update_policy and mods.expected is not None:
            loss = self._minimize(
                "expected", step,
                lambda graph: expected_loss(graph, mods.expected, critic, actor, batch, joint, i),
                mods.expected.parameters(), mods.expected_opt, hp.lr_expected)
            diag["expected_loss"] = loss.item()
        return diag

    def soft_update_targets(self):
        for mods in self.agents:
            soft_update(mods.actor, self.hp.tau)
            for pair in mods.critics:
                soft_update(pair, self.hp.tau)

    def update(self, buffer: ReplayBuffer, step: int = 0) -> List[Dict[str, float]]:
        """One training step: every agent in index order on its own minibatch, then targets."""
        update_policy = self.policy_step()
        diagnostics = []
        for i in range(self.n_agents):
            batch = buffer.sample(self.hp.batch_size, self.sample_rng)
            diagnostics.append(self.update_agent(i, batch, step, update_policy))
        if update_policy:
            self.soft_update_targets()
        self.updates += 1
        return diagnostics

    # -- parameters ---------------------------------------------------------

    def _named_modules(self):
        for i, mods in enumerate(self.agents):
            yield f"agent{i}/actor/online", mods.actor.online
            yield f"agent{i}/actor/target", mods.actor.target
            for c, pair in enumerate(mods.critics):
                yield f"agent{i}/critic{c}/online", pair.online
                yield f"agent{i}/critic{c}/target", pair.target
            if mods.expected is not None:
                yield f"agent{i}/expected", mods.expected

    def named_parameters(self) -> Dict[str, np.ndarray]:
        return {f"{prefix}/{name}": p.data.copy()
                for prefix, net in self._named_modules()
                for name, p in net.named_parameters().items()}

    def load_parameters(self, tensors: Dict[str, np.ndarray]):
        params = {f"{prefix}/{name}": p
                  for prefix, net in self._named_modules()
                  for name, p in net.named_parameters().items()}
        missing = sorted(set(params) - set(tensors))
        unexpected = sorted(set(tensors) - set(params))
        if missing or unexpected:
            raise CheckpointError(f"checkpoint does not match the networks: missing {missing[:5]}, "
                                  f"unexpected {unexpected[:5]}")
        for name, p in params.items():
            if tensors[name].shape != p.shape:
                raise CheckpointError(f"checkpoint tensor {name} has shape {tensors[name].shape}, expected {p.shape}")
        for name, p in params.items():
            p.data = np.array(tensors[name], dtype=np.float64)


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    success_rate: float
    mean_return: float          # summed over agents
    agent_returns: np.ndarray   # (n,)


def evaluate(actors: Sequence[ActorNet], env, episodes: int, rng: np.random.Generator,
             recorder: Optional[TrajectoryRecorder] = None) -> EvalResult:
    """Noise-free rollouts; undiscounted returns averaged over episodes."""
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    joint = env.joint
    returns = np.zeros((episodes, joint.n_agents))
    successes = 0
    for episode in range(episodes):
        obs = env.reset(rng)
        done, t = False, 0
        while not done:
            a = joint.clip_actions(np.concatenate(
                [actor(obs[joint.obs_slice(i)]) for i, actor in enumerate(actors)]))
            result = env.step(a)
            returns[episode] += result.rew
            if recorder is not None:
                recorder.record(episode, t, env, a, result.rew)
            obs, done, t = result.obs, result.done, t + 1
        successes += int(result.info.get("success", False))
    agent_returns = returns.mean(axis=0)
    return EvalResult(successes / episodes, float(agent_returns.sum()), agent_returns)


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

@dataclass
class RunRecord:
    config: TrainConfig
    rows: List[MetricsRow] = field(default_factory=list)
    checkpoint: Dict[str, np.ndarray] = field(default_factory=dict)
    wall_clock: float = 0.0
    steps: int = 0
    updates: int = 0
    episode_returns: List[np.ndarray] = field(default_factory=list)
    final_actions: Optional[np.ndarray] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def exploration_sigma(config: TrainConfig, step: int) -> float:
    """Linear decay from noise_start (step 1) to noise_end (last step)."""
    progress = min(1.0, (step - 1) / max(1, config.total_steps - 1))
    return config.noise_start + (config.noise_end - config.noise_start) * progress


def stored_rewards(rew: np.ndarray, reward_scheme: str) -> np.ndarray:
    rew = np.asarray(rew, dtype=np.float64)
    if reward_scheme == "global_sum":
        return np.full_like(rew, rew.sum())
    return rew


def _mean_or_none(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def train(config: TrainConfig) -> RunRecord:
    """Train one run for `config.total_steps` environment steps."""
    env = make_env(config.env, config.n_agents)
    eval_env = make_env(config.env, config.n_agents)
    learner = MultiAgentLearner(env.joint, config)
    buffer = ReplayBuffer(env.joint, config.buffer_capacity)
    env_rng = role_rng(config.seed, ROLE_ENV)
    explore_rng = role_rng(config.seed, ROLE_EXPLORATION)
    warmup = max(config.warmup, config.batch_size)
    record = RunRecord(config)
    started = time.perf_counter()
    logger.info(f"[Harness] {config.algorithm} seed={config.seed} on {config.env} "
                f"(n={config.n_agents}, steps={config.total_steps})")

    pending: Dict[str, List[float]] = defaultdict(list)
    episode_return = np.zeros(env.joint.n_agents)
    obs = env.reset(env_rng)
    for step in range(1, config.total_steps + 1):
        a = learner.act(obs, exploration_sigma(config, step), explore_rng)
        result = env.step(a)
        rew = stored_rewards(result.rew, config.reward_scheme)
        buffer.push(Transition(obs, a, rew, result.obs, result.done))
        episode_return += rew
        if result.done:
            record.episode_returns.append(episode_return)
            episode_return = np.zeros(env.joint.n_agents)
            obs = env.reset(env_rng)
        else:
            obs = result.obs

        if len(buffer) >= warmup:
            for diag in learner.update(buffer, step):
                for key, value in diag.items():
                    pending[key].append(value)

        if step % config.eval_every == 0 or step == config.total_steps:
            evaluation = evaluate(learner.actors(), eval_env, config.eval_episodes, role_rng(config.seed, ROLE_EVAL))
            row = MetricsRow(
                step=step,
                seed=config.seed,
                algorithm=config.algorithm,
                success_rate=evaluation.success_rate,
                mean_return=evaluation.mean_return,
                **{key: _mean_or_none(pending.get(key, [])) for key in
                   ("critic_loss", "actor_loss", "help_loss", "expected_loss", "alpha", "gate_rate")},
            )
            record.rows.append(row)
            pending.clear()
            recent = record.episode_returns[-config.eval_episodes:]
            train_return = np.mean(recent, axis=0) if recent else np.zeros(env.joint.n_agents)
            logger.info(f"[Harness] {config.algorithm} seed={config.seed} step={step} "
                        f"success={row.success_rate:.2f} return={row.mean_return:.3f} "
                        f"train_return={np.round(train_return, 3).tolist()}")

    if env.clamped_actions:
        logger.warning(f"[Harness] {config.algorithm} seed={config.seed}: "
                       f"{env.clamped_actions} steps had out-of-bounds actions clamped")
    record.steps = config.total_steps
    record.updates = learner.updates
    record.checkpoint = learner.named_parameters()
    record.final_actions = learner.greedy(eval_env.reset(role_rng(config.seed, ROLE_EVAL)))
    record.wall_clock = time.perf_counter() - started
    return record


# ----------------------------------------------------------------------------
# Suites
# ----------------------------------------------------------------------------

def _guarded(runner: Callable[[TrainConfig], RunRecord], config: TrainConfig) -> RunRecord:
    try:
        return runner(config)
    except Exception as exc:
        logger.warning(f"[Suite] {config.algorithm} seed={config.seed} failed: {exc}")
        return RunRecord(config, error=f"{type(exc).__name__}: {exc}")


def run_suite(configs: Sequence[TrainConfig], parallelism: int = 1,
              runner: Callable[[TrainConfig], RunRecord] = train) -> List[RunRecord]:
    """Independent runs, results in input order; a failed run never stops the others.

    With parallelism > 1 the runs go to worker processes, so `runner` must be
    a module-level (picklable) callable.
    """
    if parallelism < 1:
        raise SuiteError(f"parallelism must be >= 1, got {parallelism}")
    seen = set()
    for config in configs:
        key = (config.algorithm, config.seed)
        if key in seen:
            raise SuiteError(f"duplicate run {key[0]} seed={key[1]}")
        seen.add(key)

    logger.info(f"[Suite] launching {len(configs)} run(s) with parallelism {parallelism}")
    if parallelism == 1 or len(configs) <= 1:
        records = [_guarded(runner, config) for config in configs]
    else:
        with ProcessPoolExecutor(max_workers=min(parallelism, len(configs))) as pool:
            records = list(pool.map(_guarded, [runner] * len(configs), configs))
    failed = sum(1 for r in records if not r.ok)
    logger.info(f"[Suite] {len(records) - failed} run(s) completed, {failed} failed")
    return records
