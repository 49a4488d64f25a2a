"""
Actor, critic and expected-policy networks, their target copies, and the
versioned parameter checkpoint format.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from typing import Dict, Generic, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from tensor_autodiff import (
    Graph,
    Parameter,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    matmul,
    mul,
    reduce_sum,
    relu,
    slice_last,
    tanh,
)

CHECKPOINT_FORMAT_VERSION = 1
DEFAULT_HIDDEN = (64, 64)
HEAD_SCALE = 0.1


class CheckpointError(ValueError):
    """Checkpoint file is missing, foreign, or does not match the networks."""


@dataclass(frozen=True)
class AgentSpec:
    obs_dim: int
    act_dim: int
    act_low: Tuple[float, ...]
    act_high: Tuple[float, ...]

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ValueError(f"dimensions must be positive, got obs={self.obs_dim} act={self.act_dim}")
        if len(self.act_low) != self.act_dim or len(self.act_high) != self.act_dim:
            raise ValueError("action bounds must have one entry per action dimension")
        if any(lo >= hi for lo, hi in zip(self.act_low, self.act_high)):
            raise ValueError(f"act_low must be < act_high componentwise: {self.act_low} / {self.act_high}")

    @classmethod
    def box(cls, obs_dim: int, act_dim: int, low: float = -1.0, high: float = 1.0) -> "AgentSpec":
        return cls(obs_dim, act_dim, (low,) * act_dim, (high,) * act_dim)


class JointSpec:
    """Fixed agent-index layout of joint observations and joint actions."""

    def __init__(self, specs: Sequence[AgentSpec]):
        self.specs: Tuple[AgentSpec, ...] = tuple(specs)
        self.n_agents = len(self.specs)
        self.obs_offsets = np.concatenate([[0], np.cumsum([s.obs_dim for s in self.specs])]).astype(int)
        self.act_offsets = np.concatenate([[0], np.cumsum([s.act_dim for s in self.specs])]).astype(int)
        self.total_obs = int(self.obs_offsets[-1])
        self.total_act = int(self.act_offsets[-1])
        self.act_low = np.concatenate([s.act_low for s in self.specs]).astype(np.float64)
        self.act_high = np.concatenate([s.act_high for s in self.specs]).astype(np.float64)

    def obs_slice(self, i: int) -> slice:
        return slice(int(self.obs_offsets[i]), int(self.obs_offsets[i + 1]))

    def act_slice(self, i: int) -> slice:
        return slice(int(self.act_offsets[i]), int(self.act_offsets[i + 1]))

    def clip_actions(self, a_joint: np.ndarray) -> np.ndarray:
        return np.clip(a_joint, self.act_low, self.act_high)


def _bind(graph: Optional[Graph], param: Parameter, frozen: bool) -> Tensor:
    # frozen parameters enter as constants: no leaf, so no gradient can reach them
    if graph is None or frozen:
        return Tensor(param.data)
    return graph.watch(param)


def _constant(*tensors: Tensor) -> bool:
    return all(t.node_id is None for t in tensors)


class MLP:
    """Dense ReLU network; the last layer is linear."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, head_scale: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        self.layers: List[Tuple[Parameter, Parameter]] = []
        last = len(self.sizes) - 2
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=(fan_out,))
            if k == last:
                w, b = w * head_scale, b * head_scale
            self.layers.append((Parameter(w, f"l{k}.weight"), Parameter(b, f"l{k}.bias")))

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer]

    def forward(self, graph: Optional[Graph], x: Tensor, frozen: bool = False) -> Tensor:
        x = as_tensor(x)
        if _constant(x) and (graph is None or frozen):
            return Tensor(self.evaluate(x.data), finite=True)
        h = x
        for k, (w, b) in enumerate(self.layers):
            h = add(matmul(h, _bind(graph, w, frozen)), _bind(graph, b, frozen))
            if k < len(self.layers) - 1:
                h = relu(h)
        return h

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward for constant inputs; same arithmetic as the op path."""
        if not np.isfinite(x).all():
            raise NonFiniteError(f"mlp: non-finite input of shape {x.shape}")
        h = x
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            if h.ndim not in (1, 2) or h.shape[-1] != w.data.shape[0]:
                raise ShapeError(f"matmul: shapes {h.shape} and {w.data.shape} do not conform")
            h = h @ w.data + b.data
            if k < last:
                h = np.maximum(h, 0.0)
        if not np.isfinite(h).all():
            raise NonFiniteError(f"mlp: non-finite output of shape {h.shape}")
        return h

    def zero_head(self):
        w, b = self.layers[-1]
        w.data = np.zeros_like(w.data)
        b.data = np.zeros_like(b.data)


class _Net:
    mlp: MLP

    def parameters(self) -> List[Parameter]:
        return self.mlp.parameters()

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_head(self):
        self.mlp.zero_head()

    def clone(self):
        return copy.deepcopy(self)


def _check_width(what: str, x: Tensor, expected: int):
    if x.data.ndim not in (1, 2) or x.shape[-1] != expected:
        raise ShapeError(f"{what}: expected last dimension {expected}, got shape {x.shape}")


def _bounded(z: Tensor, low: np.ndarray, high: np.ndarray) -> Tensor:
    mid = (high + low) / 2.0
    half = (high - low) / 2.0
    if _constant(z):
        return Tensor(np.tanh(z.data) * half + mid, finite=True)
    return add(mul(tanh(z), half), mid)


class ActorNet(_Net):
    """pi_i: local observation -> bounded action."""

    def __init__(self, spec: AgentSpec, rng: np.random.Generator, hidden: Sequence[int] = DEFAULT_HIDDEN):
        self.spec = spec
        self.low = np.asarray(spec.act_low, dtype=np.float64)
        self.high = np.asarray(spec.act_high, dtype=np.float64)
        self.mlp = MLP((spec.obs_dim, *hidden, spec.act_dim), rng, head_scale=HEAD_SCALE)

    def forward(self, graph: Optional[Graph], obs, frozen: bool = False) -> Tensor:
        obs = as_tensor(obs)
        _check_width("actor", obs, self.spec.obs_dim)
        return _bounded(self.mlp.forward(graph, obs, frozen), self.low, self.high)

    def __call__(self, obs) -> np.ndarray:
        return self.forward(None, obs).data


def actor_forward(net: ActorNet, o_i) -> np.ndarray:
    return net(o_i)


class CriticNet(_Net):
    """Q_i: joint observation + joint action -> scalar value (one per batch row)."""

    def __init__(self, joint: JointSpec, rng: np.random.Generator, hidden: Sequence[int] = DEFAULT_HIDDEN):
        self.joint = joint
        self.mlp = MLP((joint.total_obs + joint.total_act, *hidden, 1), rng)

    def forward(self, graph: Optional[Graph], obs, act, frozen: bool = False) -> Tensor:
        obs, act = as_tensor(obs), as_tensor(act)
        _check_width("critic observations", obs, self.joint.total_obs)
        _check_width("critic actions", act, self.joint.total_act)
        if obs.shape[:-1] != act.shape[:-1]:
            raise ShapeError(f"critic: observations {obs.shape} and actions {act.shape} disagree on batch size")
        if _constant(obs, act) and (graph is None or frozen):
            x = np.concatenate((obs.data, act.data), axis=-1)
            return Tensor(np.sum(self.mlp.evaluate(x), axis=-1), finite=True)
        x = concat((obs, act))
        return reduce_sum(self.mlp.forward(graph, x, frozen), axis=-1)

    def __call__(self, obs, act) -> np.ndarray:
        return self.forward(None, obs, act).data


def critic_forward(net: CriticNet, o_joint, a_joint) -> np.ndarray:
    return net(o_joint, a_joint)


class ExpectedNet(_Net):
    """mu_i: joint observation -> the actions agent `owner` expects from every other agent."""

    def __init__(self, joint: JointSpec, owner: int, rng: np.random.Generator,
                 hidden: Sequence[int] = DEFAULT_HIDDEN):
        if not 0 <= owner < joint.n_agents:
            raise ValueError(f"owner {owner} out of range for {joint.n_agents} agents")
        self.joint = joint
        self.owner = owner
        self.others = [j for j in range(joint.n_agents) if j != owner]
        self.block_offsets: Dict[int, Tuple[int, int]] = {}
        start = 0
        for j in self.others:
            width = joint.specs[j].act_dim
            self.block_offsets[j] = (start, start + width)
            start += width
        self.out_dim = start
        self.low = np.concatenate([joint.specs[j].act_low for j in self.others]).astype(np.float64)
        self.high = np.concatenate([joint.specs[j].act_high for j in self.others]).astype(np.float64)
        self.mlp = MLP((joint.total_obs, *hidden, self.out_dim), rng, head_scale=HEAD_SCALE)

    def forward(self, graph: Optional[Graph], obs, frozen: bool = False) -> Tensor:
        obs = as_tensor(obs)
        _check_width("expected policy", obs, self.joint.total_obs)
        return _bounded(self.mlp.forward(graph, obs, frozen), self.low, self.high)

    def mu_slice(self, output, j: int) -> Tensor:
        """Agent j's block of an expected_forward output."""
        if j == self.owner:
            raise ValueError(f"expected policy of agent {j} holds no block for itself")
        if j not in self.block_offsets:
            raise ValueError(f"agent {j} out of range")
        start, stop = self.block_offsets[j]
        return slice_last(output, start, stop)

    def __call__(self, obs) -> np.ndarray:
        return self.forward(None, obs).data


def expected_forward(net: ExpectedNet, o_joint) -> np.ndarray:
    return net(o_joint)


def mu_slice(net: ExpectedNet, output, j: int) -> np.ndarray:
    return net.mu_slice(output, j).data


N = TypeVar("N", bound=_Net)


@dataclass
class TargetPair(Generic[N]):
    online: N
    target: N

    @classmethod
    def of(cls, online: N) -> "TargetPair[N]":
        return cls(online, online.clone())


def soft_update(pair: TargetPair, tau: float) -> TargetPair:
    """theta' <- tau * theta + (1 - tau) * theta'."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for src, dst in zip(pair.online.parameters(), pair.target.parameters()):
        if tau == 1.0:
            dst.data = src.data.copy()
        elif tau > 0.0:
            dst.data = tau * src.data + (1.0 - tau) * dst.data
    return pair


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def save_checkpoint(tensors: Dict[str, np.ndarray], path: str):
    """Write named float64 tensors as a versioned npz archive (write-then-rename)."""
    if "__format_version__" in tensors:
        raise CheckpointError("tensor name __format_version__ is reserved")
    payload = {name: np.asarray(arr, dtype=np.float64) for name, arr in tensors.items()}
    payload["__format_version__"] = np.array(CHECKPOINT_FORMAT_VERSION)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        np.savez(f, **payload)
    os.replace(tmp_path, path)


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            contents = {name: archive[name] for name in archive.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = contents.pop("__format_version__", None)
    if version is None or int(version) != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} in {path}")
    return contents
