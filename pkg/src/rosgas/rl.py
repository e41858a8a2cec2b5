"""Width and depth agents: DQN with replay, target network, epsilon-greedy
exploration, windowed accuracy reward and nearest-neighbour value estimates."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from . import numcore as nc
from .hetgraph import Subgraph
from .numcore import Param, Tensor

QNET_HIDDEN = (64, 128, 256, 128, 64)


@dataclass
class AgentConfig:
    gamma: float = 0.95
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5      # share of all env steps over which epsilon decays
    lr: float = 1e-3
    replay_capacity: int = 2048
    batch_size: int = 64             # B_D
    train_steps: int = 2             # S, dqn steps per env step and agent
    target_sync: int = 10            # C
    l_corr: float = 7.0
    alpha0: float = 0.5
    beta: float = 0.05
    reward_window: int = 5           # b
    reward_mean_form: str = "as_printed"
    nn_capacity: int = 2048

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.alpha0 <= 1.0 or not 0.0 <= self.beta < 1.0:
            raise ValueError("alpha0 must lie in [0, 1] and beta in [0, 1)")
        if self.reward_window < 1:
            raise ValueError("reward_window must be >= 1")
        if self.reward_mean_form not in ("as_printed", "true_mean"):
            raise ValueError(f"unknown reward_mean_form {self.reward_mean_form!r}")
        if min(self.replay_capacity, self.batch_size, self.train_steps, self.target_sync,
               self.nn_capacity) < 1:
            raise ValueError("capacities, batch size, train steps and sync period must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> AgentConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown agent keys: {sorted(unknown)}")
        return cls(**d)


class QNet:
    def __init__(self, in_dim: int, n_actions: int, seed: int = 0, hidden=QNET_HIDDEN):
        rng = np.random.default_rng(seed)
        dims = [in_dim, *hidden, n_actions]
        self.in_dim, self.n_actions = in_dim, n_actions
        self.params: dict[str, Param] = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.params[f"W{i}"] = Param(nc.glorot(rng, a, b), f"W{i}")
            self.params[f"b{i}"] = Param(np.zeros((1, b)), f"b{i}")
        self.n_linear = len(dims) - 1

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def forward(self, states) -> Tensor:
        h = nc.const(np.atleast_2d(np.asarray(states, dtype=np.float64)))
        for i in range(self.n_linear):
            h = nc.add(nc.matmul(h, self.params[f"W{i}"]), self.params[f"b{i}"])
            if i < self.n_linear - 1:
                h = nc.relu(h)
        return h

    def q_values(self, states) -> np.ndarray:
        return self.forward(states).value

    def copy_from(self, other: QNet) -> None:
        for k, p in self.params.items():
            p.copy_from(other.params[k])


# ---------------------------------------------------------------------------
# state, action and reward


def encode_state(sub: Subgraph) -> np.ndarray:
    """Mean raw feature vector of the subgraph."""
    if sub.size == 0:
        raise ValueError("cannot encode an empty subgraph")
    return sub.features.mean(axis=0)


def select_action(qnet: QNet, state, eps: float, rng: np.random.Generator) -> int:
    if rng.random() < eps:
        return int(rng.integers(qnet.n_actions))
    return int(np.argmax(qnet.q_values(state)[0]))


def epsilon_at(step: int, total_steps: int, cfg: AgentConfig) -> float:
    horizon = max(1.0, cfg.eps_decay_frac * total_steps)
    frac = min(1.0, step / horizon)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def reward_measure(history: Sequence[float], acc_t: float, b: int, form: str = "as_printed") -> float:
    """Current accuracy minus the windowed historical accuracy.

    ``as_printed`` divides the sum of the last ``b`` accuracies by ``b - 1``;
    ``true_mean`` divides by the window length. With fewer than ``b`` entries
    the available ones form the window (divided by ``len - 1``, at least 1).
    """
    window = list(history)[-b:] if b > 0 else []
    if not window:
        return float(acc_t)
    total = float(sum(window))
    if form == "true_mean":
        return float(acc_t) - total / len(window)
    return float(acc_t) - total / max(len(window) - 1, 1)


def binary_reward(r_t: float, r_prev: float) -> int:
    return 1 if r_t > r_prev else -1


def alpha_at(episode: int, alpha0: float, beta: float) -> float:
    return alpha0 * (1.0 - beta) ** episode


# ---------------------------------------------------------------------------
# memories


class Transition(NamedTuple):
    s: np.ndarray
    a: int
    s_next: np.ndarray
    r: int


class ReplayMemory:
    def __init__(self, capacity: int):
        self.buffer: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.buffer)

    def push(self, t: Transition) -> None:
        if t.r not in (-1, 1):
            raise ValueError(f"rewards are +-1, got {t.r}")
        self.buffer.append(t)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        n = min(n, len(self.buffer))
        idx = rng.choice(len(self.buffer), size=n, replace=False)
        return [self.buffer[i] for i in idx]


class NNMemory:
    """Observed (state, action) pairs with their binary rewards, FIFO-bounded."""

    def __init__(self, capacity: int):
        self.records: deque[tuple[np.ndarray, int, int]] = deque(maxlen=capacity)
        self._cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None

    def __len__(self) -> int:
        return len(self.records)

    def add(self, s, a: int, q: int) -> None:
        if q not in (-1, 1):
            raise ValueError(f"value labels are +-1, got {q}")
        self.records.append((np.asarray(s, dtype=np.float64).copy(), int(a), int(q)))
        self._cache = None

    def by_action(self, a: int):
        if self._cache is None:
            cache = {}
            for act in {r[1] for r in self.records}:
                rows = [r for r in self.records if r[1] == act]
                S = np.vstack([r[0] for r in rows])
                cache[act] = (S, np.sqrt((S * S).sum(axis=1)), np.array([r[2] for r in rows], float))
            self._cache = cache
        return self._cache.get(int(a))


def cosine_distance(s: np.ndarray, other: np.ndarray) -> float:
    ns, no = np.sqrt((s * s).sum()), np.sqrt((other * other).sum())
    if ns == 0 or no == 0:
        return 1.0
    return 1.0 - (other * s).sum() / (no * ns)


def nn_estimate(mem: NNMemory, s, a: int, l_corr: float) -> float | None:
    """min over same-action records of ``q_i + l_corr * (1 - cos(s, s_i))``."""
    entry = mem.by_action(a)
    if entry is None:
        return None
    S, norms, q = entry
    s = np.asarray(s, dtype=np.float64)
    ns = np.sqrt((s * s).sum())
    dots = (S * s).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where((norms == 0) | (ns == 0), 1.0, 1.0 - dots / (norms * ns))
    return float(np.min(q + l_corr * d))


def mixed_target(r: float, s_next, qnet_target: QNet, gamma: float, alpha: float,
                 nn_value: float | None) -> float:
    dqn = r + gamma * float(np.max(qnet_target.q_values(s_next)[0]))
    if nn_value is None:
        return dqn
    return alpha * nn_value + (1.0 - alpha) * dqn


# ---------------------------------------------------------------------------
# agent


class DQNAgent:
    def __init__(self, state_dim: int, n_actions: int, cfg: AgentConfig, seed: int = 0,
                 use_nn: bool = True):
        self.cfg = cfg
        self.n_actions = n_actions
        self.pred = QNet(state_dim, n_actions, seed)
        self.target = QNet(state_dim, n_actions, seed)
        self.target.copy_from(self.pred)
        self.replay = ReplayMemory(cfg.replay_capacity)
        self.nn_memory = NNMemory(cfg.nn_capacity)
        self.use_nn = use_nn
        self.n_updates = 0

    def act(self, state, eps: float, rng: np.random.Generator) -> int:
        return select_action(self.pred, state, eps, rng)

    def greedy(self, state) -> int:
        return select_action(self.pred, state, 0.0, np.random.default_rng(0))

    def observe(self, t: Transition) -> None:
        self.replay.push(t)
        if self.use_nn:
            self.nn_memory.add(t.s, t.a, t.r)

    def targets(self, batch: Sequence[Transition], alpha: float) -> np.ndarray:
        nxt = self.target.q_values(np.vstack([t.s_next for t in batch])).max(axis=1)
        out = np.empty(len(batch))
        for i, t in enumerate(batch):
            dqn = t.r + self.cfg.gamma * nxt[i]
            nn_value = nn_estimate(self.nn_memory, t.s, t.a, self.cfg.l_corr) if self.use_nn else None
            out[i] = dqn if nn_value is None else alpha * nn_value + (1.0 - alpha) * dqn
        return out

    def loss(self, batch: Sequence[Transition], y: np.ndarray) -> Tensor:
        q = self.pred.forward(np.vstack([t.s for t in batch]))
        onehot = np.zeros(q.shape)
        onehot[np.arange(len(batch)), [t.a for t in batch]] = 1.0
        q_sa = nc.matmul(nc.mul(q, Tensor(onehot)), Tensor(np.ones((self.n_actions, 1))))
        resid = nc.sub(Tensor(y.reshape(-1, 1)), q_sa)
        return nc.scale(nc.sum_squares(resid), 1.0 / len(batch))

    def sync_target(self) -> None:
        self.target.copy_from(self.pred)


def dqn_step(agent: DQNAgent, batch: Sequence[Transition], alpha: float) -> float:
    """One Adam step on the squared error to the (mixed) target; syncs the
    target network every ``target_sync`` updates."""
    if not batch:
        raise ValueError("empty replay batch")
    y = agent.targets(batch, alpha)
    loss = agent.loss(batch, y)
    nc.backward(loss)
    nc.adam_step(agent.pred.parameters(), agent.cfg.lr)
    agent.n_updates += 1
    if agent.n_updates % agent.cfg.target_sync == 0:
        agent.sync_target()
    return loss.item()


def sync_target(agent: DQNAgent) -> None:
    agent.sync_target()


def agent_arrays(agent: DQNAgent) -> dict[str, np.ndarray]:
    arrays = {f"pred.{k}": p.value for k, p in agent.pred.params.items()}
    arrays.update({f"target.{k}": p.value for k, p in agent.target.params.items()})
    recs = list(agent.nn_memory.records)
    dim = agent.pred.in_dim
    arrays["nn.states"] = np.vstack([r[0] for r in recs]) if recs else np.zeros((0, dim))
    arrays["nn.actions"] = np.array([r[1] for r in recs], dtype=np.float64)
    arrays["nn.values"] = np.array([r[2] for r in recs], dtype=np.float64)
    return arrays


def load_agent_arrays(agent: DQNAgent, arrays: dict[str, np.ndarray]) -> None:
    from .gnn import CheckpointError

    for prefix, net in (("pred.", agent.pred), ("target.", agent.target)):
        for k, p in net.params.items():
            key = prefix + k
            if key not in arrays:
                raise CheckpointError(f"agent checkpoint lacks {key}")
            if arrays[key].shape != p.shape:
                raise CheckpointError(f"{key}: shape {arrays[key].shape} != {p.shape}")
            p.value = np.array(arrays[key])
    agent.nn_memory = NNMemory(agent.cfg.nn_capacity)
    states = arrays.get("nn.states", np.zeros((0, agent.pred.in_dim)))
    for s, a, q in zip(states, arrays.get("nn.actions", []), arrays.get("nn.values", [])):
        agent.nn_memory.add(s, int(a), int(q))
