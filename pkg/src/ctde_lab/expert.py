"""Centralized expert training on the joint observation.

The expert sees every agent's communication-stripped observation
concatenated into one vector and picks one discrete movement per moving
agent. Three trainers share the replay plumbing:

* ``ddpg``: actor with one softmax group per mover and a scalar critic over
  (joint observation, concatenated one-hot movement blocks). Exploration is
  Gumbel-Softmax sampling at temperature 1.0; the executed action is the
  sample's argmax. The actor ascends Q through the critic's input gradient.
* ``dqn_exp``: a single Q network whose output enumerates all joint
  movement tuples (5^m outputs).
* ``dqn_vdn``: one 5-output Q network per mover, all reading the full joint
  observation; the system value is the sum, so the joint argmax decomposes
  into per-agent argmaxes.

Received-communication slots never reach any expert network, and the
expert emits zero communication, so the expert is trained and evaluated
entirely without the channel.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .envs import (
    N_MOVES,
    JointAction,
    ScenarioSpec,
    env_reset,
    env_step,
    uniform_random_action,
    zero_comms,
)
from .nn import (
    AdamState,
    Head,
    MlpPolicy,
    adam_step,
    clip_grad_norm,
    gumbel_softmax_sample,
    mlp_backward,
    mlp_forward,
    soft_update,
)

EXPERT_VARIANTS = ("ddpg", "dqn_exp", "dqn_vdn")


# -- replay ----------------------------------------------------------------


@dataclass
class Transition:
    """One environment step from the expert's point of view.

    obs/next_obs are the concatenated communication-stripped observations;
    move_onehots concatenates one 5-slot block per mover; comms keeps the
    emitted communication vectors (all zeros for the expert) so the record
    mirrors the full action layout.
    """

    obs: np.ndarray
    move_onehots: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool
    comms: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if not np.isfinite(self.reward):
            raise ValueError("non-finite reward")


class ReplayBuffer:
    """Bounded FIFO with uniform without-replacement batch sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.rng = rng
        self._items: list = []
        self._write = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, item) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._write] = item
            self._write = (self._write + 1) % self.capacity

    def sample(self, batch_size: int) -> list:
        if batch_size > len(self._items):
            raise ValueError(
                f"cannot sample {batch_size} from buffer of {len(self._items)}"
            )
        idx = self.rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]

    def ordered_items(self) -> list:
        """Oldest-to-newest contents (test hook for the FIFO contract)."""
        return self._items[self._write :] + self._items[: self._write]


def stack_batch(batch: list):
    obs = np.stack([t.obs for t in batch])
    acts = np.stack([t.move_onehots for t in batch])
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    next_obs = np.stack([t.next_obs for t in batch])
    done = np.array([t.done for t in batch], dtype=np.float64)
    return obs, acts, rewards, next_obs, done


# -- action indexing -------------------------------------------------------


def joint_action_index(indices, arities) -> int:
    """Mixed-radix flattening, first index most significant."""
    indices = tuple(int(v) for v in indices)
    arities = tuple(int(v) for v in arities)
    for v, n in zip(indices, arities, strict=True):
        if not 0 <= v < n:
            raise ValueError(f"index {v} out of range for arity {n}")
    return int(np.ravel_multi_index(indices, arities))


def joint_action_tuple(flat: int, arities) -> tuple:
    arities = tuple(int(v) for v in arities)
    if not 0 <= flat < int(np.prod(arities)):
        raise ValueError(f"flat index {flat} out of range")
    return tuple(int(v) for v in np.unravel_index(flat, arities))


# -- DDPG expert -----------------------------------------------------------


@dataclass
class DdpgExpert:
    spec: ScenarioSpec
    actor: MlpPolicy
    critic: MlpPolicy
    actor_target: MlpPolicy
    critic_target: MlpPolicy
    actor_opt: AdamState
    critic_opt: AdamState
    gamma: float
    clip_norm: float
    final_actor: MlpPolicy | None = None
    best_avg: float = -np.inf

    @classmethod
    def create(
        cls,
        spec: ScenarioSpec,
        hidden: int,
        gamma: float,
        clip_norm: float,
        rng: np.random.Generator,
    ) -> "DdpgExpert":
        movers = spec.mover_indices()
        if not movers:
            raise ValueError("scenario has no moving agent")
        n_in = spec.joint_core_len()
        heads = tuple(
            Head(offset=k * N_MOVES, length=N_MOVES, kind="softmax")
            for k in range(len(movers))
        )
        actor = MlpPolicy.create(
            (n_in, hidden, hidden, N_MOVES * len(movers)), heads, rng
        )
        act_dim = N_MOVES * len(movers)
        critic = MlpPolicy.create(
            (n_in + act_dim, hidden, hidden, 1),
            (Head(offset=0, length=1, kind="linear"),),
            rng,
        )
        return cls(
            spec=spec,
            actor=actor,
            critic=critic,
            actor_target=actor.copy(),
            critic_target=critic.copy(),
            actor_opt=AdamState.for_policy(actor),
            critic_opt=AdamState.for_policy(critic),
            gamma=gamma,
            clip_norm=clip_norm,
        )

    def greedy_moves(self, joint_core_obs: np.ndarray) -> np.ndarray:
        """Per-agent movement indices (non-movers hold still)."""
        out = mlp_forward(self.actor, joint_core_obs)
        moves = np.zeros(self.spec.n_agents, dtype=int)
        for k, agent in enumerate(self.spec.mover_indices()):
            moves[agent] = int(np.argmax(out[k * N_MOVES : (k + 1) * N_MOVES]))
        return moves


def expert_act(
    expert,
    obs: list,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> JointAction:
    """Action for the current observations; communication slots zero-filled.

    sample mode draws one Gumbel-Softmax realization per movement head and
    executes its argmax; greedy takes the plain argmax.
    """
    spec = expert.spec
    core = spec.core_obs(obs)
    if mode == "greedy":
        moves = expert.greedy_moves(core)
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        if isinstance(expert, DdpgExpert):
            out = mlp_forward(expert.actor, core)
            moves = np.zeros(spec.n_agents, dtype=int)
            for k, agent in enumerate(spec.mover_indices()):
                logits = np.log(
                    np.maximum(out[k * N_MOVES : (k + 1) * N_MOVES], 1e-300)
                )
                soft = gumbel_softmax_sample(logits, temperature, rng)
                moves[agent] = int(np.argmax(soft))
        else:
            raise ValueError("sample mode is only defined for the ddpg expert")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return JointAction(moves=moves, comms=zero_comms(spec))


def _mover_onehots(spec: ScenarioSpec, moves: np.ndarray) -> np.ndarray:
    blocks = np.zeros(N_MOVES * len(spec.mover_indices()))
    for k, agent in enumerate(spec.mover_indices()):
        blocks[k * N_MOVES + int(moves[agent])] = 1.0
    return blocks


def _soft_joint_action(expert: DdpgExpert, obs_rows: np.ndarray, net: MlpPolicy):
    """Deterministic softmax outputs of an actor net, batched."""
    return mlp_forward(net, obs_rows)


def critic_targets(
    expert: DdpgExpert,
    rewards: np.ndarray,
    next_obs: np.ndarray,
    done: np.ndarray,
) -> np.ndarray:
    """Bootstrapped regression target for the critic."""
    a2 = _soft_joint_action(expert, next_obs, expert.actor_target)
    q2 = mlp_forward(expert.critic_target, np.hstack([next_obs, a2]))[:, 0]
    return rewards + expert.gamma * (1.0 - done) * q2


def actor_objective_grads(expert: DdpgExpert, obs_rows: np.ndarray):
    """Gradients of loss = -mean Q(o, actor(o)) w.r.t. actor parameters.

    The critic stays frozen; its per-row input gradient, sliced at the
    action block, is the upstream signal for the actor's softmax outputs.
    Returns (grads, actor_loss).
    """
    n = obs_rows.shape[0]
    soft = _soft_joint_action(expert, obs_rows, expert.actor)
    critic_in = np.hstack([obs_rows, soft])
    q = mlp_forward(expert.critic, critic_in)[:, 0]
    upstream = np.full((n, 1), -1.0 / n)
    critic_grads = mlp_backward(expert.critic, critic_in, upstream)
    d_action = critic_grads.d_input[:, obs_rows.shape[1] :]
    grads = mlp_backward(expert.actor, obs_rows, d_action)
    return grads, float(-q.mean())


def ddpg_update(expert: DdpgExpert, batch: list, lr, tau: float):
    """One critic regression step and one actor ascent step, then soft
    target updates. lr may be a scalar or a (critic_lr, actor_lr) pair.
    Returns (critic_loss, actor_loss)."""
    lr_critic, lr_actor = (lr, lr) if np.isscalar(lr) else lr
    obs, acts, rewards, next_obs, done = stack_batch(batch)
    n = obs.shape[0]

    y = critic_targets(expert, rewards, next_obs, done)
    critic_in = np.hstack([obs, acts])
    q = mlp_forward(expert.critic, critic_in)[:, 0]
    diff = q - y
    critic_loss = float(np.mean(diff**2))
    upstream = (2.0 * diff / n)[:, None]
    critic_grads = mlp_backward(expert.critic, critic_in, upstream)
    if not np.isfinite(critic_loss):
        raise RuntimeError(
            f"non-finite critic loss {critic_loss}; |q| max {np.abs(q).max()}"
        )
    clip_grad_norm(critic_grads, expert.clip_norm)
    adam_step(expert.critic, critic_grads, expert.critic_opt, lr_critic)

    actor_grads, actor_loss = actor_objective_grads(expert, obs)
    if not np.isfinite(actor_loss):
        raise RuntimeError(f"non-finite actor loss {actor_loss}")
    clip_grad_norm(actor_grads, expert.clip_norm)
    adam_step(expert.actor, actor_grads, expert.actor_opt, lr_actor)

    soft_update(expert.critic_target, expert.critic, tau)
    soft_update(expert.actor_target, expert.actor, tau)
    return critic_loss, actor_loss


# -- DQN experts -----------------------------------------------------------


@dataclass
class DqnExpert:
    spec: ScenarioSpec
    variant: str  # dqn_exp | dqn_vdn
    nets: list
    targets: list
    opts: list
    gamma: float
    clip_norm: float
    final_nets: list | None = None
    best_avg: float = -np.inf

    @classmethod
    def create(
        cls,
        spec: ScenarioSpec,
        variant: str,
        hidden: int,
        gamma: float,
        clip_norm: float,
        rng: np.random.Generator,
    ) -> "DqnExpert":
        movers = spec.mover_indices()
        if not movers:
            raise ValueError("scenario has no moving agent")
        n_in = spec.joint_core_len()
        if variant == "dqn_exp":
            n_out = N_MOVES ** len(movers)
            nets = [
                MlpPolicy.create(
                    (n_in, hidden, hidden, n_out),
                    (Head(offset=0, length=n_out, kind="linear"),),
                    rng,
                )
            ]
        elif variant == "dqn_vdn":
            nets = [
                MlpPolicy.create(
                    (n_in, hidden, hidden, N_MOVES),
                    (Head(offset=0, length=N_MOVES, kind="linear"),),
                    rng,
                )
                for _ in movers
            ]
        else:
            raise ValueError(f"unknown dqn variant {variant!r}")
        return cls(
            spec=spec,
            variant=variant,
            nets=nets,
            targets=[n.copy() for n in nets],
            opts=[AdamState.for_policy(n) for n in nets],
            gamma=gamma,
            clip_norm=clip_norm,
        )

    @property
    def arities(self) -> tuple:
        return (N_MOVES,) * len(self.spec.mover_indices())

    def greedy_moves(self, joint_core_obs: np.ndarray) -> np.ndarray:
        moves = np.zeros(self.spec.n_agents, dtype=int)
        movers = self.spec.mover_indices()
        if self.variant == "dqn_exp":
            q = mlp_forward(self.nets[0], joint_core_obs)
            tup = joint_action_tuple(int(np.argmax(q)), self.arities)
            for k, agent in enumerate(movers):
                moves[agent] = tup[k]
        else:
            for k, agent in enumerate(movers):
                q = mlp_forward(self.nets[k], joint_core_obs)
                moves[agent] = int(np.argmax(q))
        return moves


def epsilon_schedule(episode: int, total_episodes: int) -> float:
    """Linear 1.0 -> 0.05 across the first tenth of training, then flat."""
    ramp = max(1, total_episodes // 10)
    frac = min(1.0, episode / ramp)
    return 1.0 + frac * (0.05 - 1.0)


def dqn_act(
    expert: DqnExpert, obs: list, epsilon: float, rng: np.random.Generator
) -> JointAction:
    spec = expert.spec
    if rng.random() < epsilon:
        moves = np.zeros(spec.n_agents, dtype=int)
        for agent in spec.mover_indices():
            moves[agent] = int(rng.integers(N_MOVES))
        return JointAction(moves=moves, comms=zero_comms(spec))
    moves = expert.greedy_moves(spec.core_obs(obs))
    return JointAction(moves=moves, comms=zero_comms(spec))


def _batch_move_indices(expert: DqnExpert, acts: np.ndarray) -> np.ndarray:
    """(B, m) per-mover movement indices recovered from one-hot blocks."""
    m = len(expert.spec.mover_indices())
    return np.stack(
        [np.argmax(acts[:, k * N_MOVES : (k + 1) * N_MOVES], axis=1) for k in range(m)],
        axis=1,
    )


def dqn_targets(
    expert: DqnExpert,
    rewards: np.ndarray,
    next_obs: np.ndarray,
    done: np.ndarray,
) -> np.ndarray:
    """r + gamma * (1 - done) * max over joint actions of the target system Q."""
    if expert.variant == "dqn_exp":
        q2 = mlp_forward(expert.targets[0], next_obs)
        best = q2.max(axis=1)
    else:
        best = np.zeros(next_obs.shape[0])
        for net in expert.targets:
            best += mlp_forward(net, next_obs).max(axis=1)
    return rewards + expert.gamma * (1.0 - done) * best


def dqn_update(expert: DqnExpert, batch: list, lr: float, tau: float) -> float:
    """One TD regression step on the taken joint action; returns the loss."""
    obs, acts, rewards, next_obs, done = stack_batch(batch)
    n = obs.shape[0]
    move_idx = _batch_move_indices(expert, acts)
    y = dqn_targets(expert, rewards, next_obs, done)

    if expert.variant == "dqn_exp":
        flat = np.ravel_multi_index(tuple(move_idx.T), expert.arities)
        q_all = mlp_forward(expert.nets[0], obs)
        q_sa = q_all[np.arange(n), flat]
        diff = q_sa - y
        loss = float(np.mean(diff**2))
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite dqn loss {loss}")
        upstream = np.zeros_like(q_all)
        upstream[np.arange(n), flat] = 2.0 * diff / n
        grads = mlp_backward(expert.nets[0], obs, upstream)
        clip_grad_norm(grads, expert.clip_norm)
        adam_step(expert.nets[0], grads, expert.opts[0], lr)
    else:
        q_all = [mlp_forward(net, obs) for net in expert.nets]
        q_sa = np.zeros(n)
        for k, q in enumerate(q_all):
            q_sa += q[np.arange(n), move_idx[:, k]]
        diff = q_sa - y
        loss = float(np.mean(diff**2))
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite dqn loss {loss}")
        for k, net in enumerate(expert.nets):
            upstream = np.zeros_like(q_all[k])
            upstream[np.arange(n), move_idx[:, k]] = 2.0 * diff / n
            grads = mlp_backward(net, obs, upstream)
            clip_grad_norm(grads, expert.clip_norm)
            adam_step(net, grads, expert.opts[k], lr)

    for net, target in zip(expert.nets, expert.targets):
        soft_update(target, net, tau)
    return loss


# -- training loop ---------------------------------------------------------


def _expert_snapshot(expert):
    if isinstance(expert, DdpgExpert):
        return expert.actor.copy()
    return [n.copy() for n in expert.nets]


def _install_snapshot(expert, snap) -> None:
    if isinstance(expert, DdpgExpert):
        expert.final_actor = expert.actor
        expert.actor = snap
    else:
        expert.final_nets = expert.nets
        expert.nets = snap


def train_expert(
    spec: ScenarioSpec,
    rng: np.random.Generator,
    *,
    variant: str = "ddpg",
    episodes: int,
    hidden: int,
    batch_size: int,
    lr: float,
    tau: float,
    gamma: float = 0.9,
    clip_norm: float = 0.0,
    buffer_capacity: int = 1_000_000,
    warmup: int = 1024,
    temperature: float = 1.0,
    avg_window: int = 1000,
):
    """Full training run; returns (expert, curve).

    curve rows are (episode, episode_reward, moving_avg) with the average
    taken over the last up-to-avg_window episodes (1,000 by default). One
    update runs per environment step once the buffer holds
    max(warmup, batch_size) transitions. On return the live network(s)
    hold the snapshot with the best full-window moving average and the
    last iterate stays in final_actor/final_nets; runs shorter than one
    full window keep the final iterate live.
    """
    if variant not in EXPERT_VARIANTS:
        raise ValueError(f"unknown expert variant {variant!r}")
    env_rng, act_rng, batch_rng, init_rng = rng.spawn(4)
    buffer = ReplayBuffer(buffer_capacity, batch_rng)
    if variant == "ddpg":
        expert = DdpgExpert.create(spec, hidden, gamma, clip_norm, init_rng)
    else:
        expert = DqnExpert.create(spec, variant, hidden, gamma, clip_norm, init_rng)

    curve = []
    window: deque = deque(maxlen=avg_window)
    window_sum = 0.0
    best_snap = None
    gate = max(warmup, batch_size)

    for ep in range(episodes):
        state, obs = env_reset(spec, env_rng)
        total = 0.0
        done = False
        while not done:
            if variant == "ddpg":
                action = expert_act(expert, obs, "sample", act_rng, temperature)
            else:
                eps = epsilon_schedule(ep, episodes)
                action = dqn_act(expert, obs, eps, act_rng)
            state, next_obs, reward, done = env_step(spec, state, action)
            buffer.push(
                Transition(
                    obs=spec.core_obs(obs),
                    move_onehots=_mover_onehots(spec, action.moves),
                    reward=reward,
                    next_obs=spec.core_obs(next_obs),
                    done=done,
                    comms=action.comms,
                )
            )
            obs = next_obs
            total += reward
            if len(buffer) >= gate:
                batch = buffer.sample(batch_size)
                if variant == "ddpg":
                    ddpg_update(expert, batch, lr, tau)
                else:
                    dqn_update(expert, batch, lr, tau)
        if len(window) == window.maxlen:
            window_sum -= window[0]
        window.append(total)
        window_sum += total
        avg = window_sum / len(window)
        curve.append((ep, total, avg))
        # Snapshot selection compares full windows only: partial windows at
        # the start of training have far higher variance, and a lucky first
        # episode would otherwise freeze a near-untrained net as "best".
        if len(window) == window.maxlen and avg > expert.best_avg:
            expert.best_avg = avg
            best_snap = _expert_snapshot(expert)

    if best_snap is not None:
        _install_snapshot(expert, best_snap)
    return expert, curve


# -- evaluation ------------------------------------------------------------


def evaluate_expert(expert, episodes: int, rng: np.random.Generator):
    """Greedy rollouts; returns (mean episode reward, standard error)."""
    spec = expert.spec
    totals = np.zeros(episodes)
    for k in range(episodes):
        state, obs = env_reset(spec, rng)
        done = False
        while not done:
            action = expert_act(expert, obs, "greedy")
            state, obs, reward, done = env_step(spec, state, action)
            totals[k] += reward
    stderr = totals.std(ddof=1) / np.sqrt(episodes) if episodes > 1 else 0.0
    return float(totals.mean()), float(stderr)


def random_baseline(spec: ScenarioSpec, episodes: int, rng: np.random.Generator):
    """Uniform-random policy performance; returns (mean, standard error)."""
    totals = np.zeros(episodes)
    for k in range(episodes):
        state, obs = env_reset(spec, rng)
        done = False
        while not done:
            action = uniform_random_action(spec, rng)
            state, obs, reward, done = env_step(spec, state, action)
            totals[k] += reward
    stderr = totals.std(ddof=1) / np.sqrt(episodes) if episodes > 1 else 0.0
    return float(totals.mean()), float(stderr)
