"""Distill the centralized expert into per-agent policies.

The loop is imitation learning on the learners' own state distribution:
agents roll out, every visited joint observation is labeled by the frozen
expert, records aggregate into an append-only dataset, and each moving
agent takes supervised steps on its own (local observation, label) slice.
Rollout actions always come from the agents; the expert only labels.

Each moving agent owns an independent network over exactly its local
observation vector. Non-moving agents hold still and stay silent here;
learned communication lives in a separate module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import (
    N_MOVES,
    JointAction,
    ScenarioSpec,
    env_reset,
    env_step,
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
    mse_batch,
    softmax_ce_batch,
)

DATASET_MODES = ("shared", "per_agent")
SUPERVISED_LOSSES = ("cross_entropy", "mse")


# -- agents ----------------------------------------------------------------


@dataclass
class Agent:
    """One decentralized policy bound to a scenario slot."""

    index: int
    policy: MlpPolicy
    opt: AdamState
    clip_norm: float = 0.0

    def move_probs(self, obs_i: np.ndarray) -> np.ndarray:
        obs_i = np.asarray(obs_i, dtype=np.float64)
        if obs_i.shape != (self.policy.input_len,):
            raise ValueError(
                f"agent {self.index} expects exactly {self.policy.input_len} "
                f"inputs, got {obs_i.shape}"
            )
        return mlp_forward(self.policy, obs_i)[: N_MOVES]


def create_agents(
    spec: ScenarioSpec,
    hidden: int,
    rng: np.random.Generator,
    clip_norm: float = 0.0,
) -> list:
    """One movement-only policy per moving agent, over the full local obs."""
    agents = []
    for i in spec.mover_indices():
        policy = MlpPolicy.create(
            (spec.obs_len(i), hidden, hidden, N_MOVES),
            (Head(offset=0, length=N_MOVES, kind="softmax"),),
            rng,
        )
        agents.append(
            Agent(index=i, policy=policy, opt=AdamState.for_policy(policy), clip_norm=clip_norm)
        )
    return agents


def agent_move(
    agent: Agent,
    obs_i: np.ndarray,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
) -> int:
    probs = agent.move_probs(obs_i)
    if mode == "greedy":
        return int(np.argmax(probs))
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        soft = gumbel_softmax_sample(np.log(np.maximum(probs, 1e-300)), 1.0, rng)
        return int(np.argmax(soft))
    raise ValueError(f"unknown mode {mode!r}")


def agents_joint_action(
    agents: list,
    spec: ScenarioSpec,
    obs: list,
    mode: str,
    rng: np.random.Generator | None = None,
) -> JointAction:
    moves = np.zeros(spec.n_agents, dtype=int)
    for agent in agents:
        moves[agent.index] = agent_move(agent, obs[agent.index], mode, rng)
    return JointAction(moves=moves, comms=zero_comms(spec))


# -- dataset ---------------------------------------------------------------


@dataclass
class DemoRecord:
    """One labeled timestep: the joint observation the expert saw plus each
    moving agent's local observation and its expert movement label."""

    joint_core: np.ndarray
    mover_obs: list
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.mover_obs) != len(self.labels):
            raise ValueError("need one label per stored local observation")
        if np.any(self.labels < 0) or np.any(self.labels >= N_MOVES):
            raise ValueError("movement label out of range")


class DemoDataset:
    """Append-only store of DemoRecords with a minimum-size sampling gate.

    shared mode keeps joint records and serves every agent the same sampled
    timesteps; per_agent mode splits each record into independent per-agent
    stores at insertion, so later sampling draws independently per agent.
    """

    def __init__(self, spec: ScenarioSpec, mode: str = "shared", min_size: int = 1024):
        if mode not in DATASET_MODES:
            raise ValueError(f"unknown dataset mode {mode!r}")
        self.spec = spec
        self.mode = mode
        self.min_size = int(min_size)
        self.movers = spec.mover_indices()
        self.records: list = []
        self.stores = [[] for _ in self.movers]

    def __len__(self) -> int:
        if self.mode == "shared":
            return len(self.records)
        return len(self.stores[0]) if self.stores else 0

    def append(self, record: DemoRecord) -> None:
        if len(record.mover_obs) != len(self.movers):
            raise ValueError("record does not match the scenario's mover count")
        if self.mode == "shared":
            self.records.append(record)
        else:
            for k in range(len(self.movers)):
                self.stores[k].append((record.mover_obs[k], int(record.labels[k])))

    def all_pairs(self, k: int) -> list:
        """Agent k's full (obs, label) population, insertion order."""
        if self.mode == "shared":
            return [(r.mover_obs[k], int(r.labels[k])) for r in self.records]
        return list(self.stores[k])

    def sample_batches(self, batch_size: int, rng: np.random.Generator) -> list:
        """Per-agent (obs_rows, labels) batches; raises before the gate."""
        size = len(self)
        gate = max(self.min_size, batch_size)
        if size < gate:
            raise ValueError(
                f"dataset holds {size} records, below the sampling gate {gate}"
            )
        batches = []
        if self.mode == "shared":
            idx = rng.choice(size, size=batch_size, replace=False)
            for k in range(len(self.movers)):
                rows = np.stack([self.records[i].mover_obs[k] for i in idx])
                labels = np.array([self.records[i].labels[k] for i in idx])
                batches.append((rows, labels))
        else:
            for k in range(len(self.movers)):
                idx = rng.choice(size, size=batch_size, replace=False)
                rows = np.stack([self.stores[k][i][0] for i in idx])
                labels = np.array([self.stores[k][i][1] for i in idx])
                batches.append((rows, labels))
        return batches


def label_record(spec: ScenarioSpec, expert, obs: list) -> DemoRecord:
    """Query the frozen expert greedily at the current joint observation."""
    joint_core = spec.core_obs(obs)
    moves = expert.greedy_moves(joint_core)
    movers = spec.mover_indices()
    return DemoRecord(
        joint_core=joint_core,
        mover_obs=[np.array(obs[i]) for i in movers],
        labels=np.array([moves[i] for i in movers]),
    )


# -- operations ------------------------------------------------------------


def collect_and_label(
    agents: list,
    expert,
    spec: ScenarioSpec,
    steps: int,
    dataset: DemoDataset,
    rng: np.random.Generator,
) -> DemoDataset:
    """Run `steps` environment steps under the agents, labeling each visited
    observation with the expert; episodes reset internally as they end."""
    if expert.spec.name != spec.name:
        raise ValueError(
            f"expert was trained on {expert.spec.name!r}, not {spec.name!r}"
        )
    state, obs = env_reset(spec, rng)
    for _ in range(steps):
        dataset.append(label_record(spec, expert, obs))
        action = agents_joint_action(agents, spec, obs, "sample", rng)
        state, obs, _, done = env_step(spec, state, action)
        if done:
            state, obs = env_reset(spec, rng)
    return dataset


def _per_agent_lr(lr, n: int) -> list:
    if np.isscalar(lr):
        return [float(lr)] * n
    lrs = [float(v) for v in lr]
    if len(lrs) != n:
        raise ValueError("need one learning rate per agent")
    return lrs


def supervise_step(
    agents: list,
    dataset: DemoDataset,
    batch_size: int,
    lr,
    rng: np.random.Generator,
    loss_kind: str = "cross_entropy",
) -> list:
    """One Adam step per agent on sampled batches; returns per-agent losses."""
    if loss_kind not in SUPERVISED_LOSSES:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    lrs = _per_agent_lr(lr, len(agents))
    batches = dataset.sample_batches(batch_size, rng)
    losses = []
    for agent, (rows, labels), agent_lr in zip(agents, batches, lrs):
        out = mlp_forward(agent.policy, rows)
        head = agent.policy.heads[0]
        if loss_kind == "cross_entropy":
            per_row, upstream = softmax_ce_batch(out, head, labels)
        else:
            targets = np.zeros_like(out)
            targets[np.arange(len(labels)), labels] = 1.0
            per_row, upstream = mse_batch(out, targets)
        loss = float(per_row.mean())
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite supervised loss for agent {agent.index}")
        grads = mlp_backward(agent.policy, rows, upstream / len(labels))
        clip_grad_norm(grads, agent.clip_norm)
        adam_step(agent.policy, grads, agent.opt, agent_lr)
        losses.append(loss)
    return losses


def evaluate(agents: list, spec: ScenarioSpec, episodes: int, rng: np.random.Generator):
    """Greedy decentralized rollouts; returns (mean reward, standard error)."""
    totals = np.zeros(episodes)
    for k in range(episodes):
        state, obs = env_reset(spec, rng)
        done = False
        while not done:
            action = agents_joint_action(agents, spec, obs, "greedy")
            state, obs, reward, done = env_step(spec, state, action)
            totals[k] += reward
    stderr = totals.std(ddof=1) / np.sqrt(episodes) if episodes > 1 else 0.0
    return float(totals.mean()), float(stderr)


def decentralize(
    expert,
    spec: ScenarioSpec,
    rng: np.random.Generator,
    *,
    episodes: int,
    hidden: int,
    batch_size: int,
    lr,
    loss_kind: str = "cross_entropy",
    dataset_mode: str = "shared",
    eval_every: int = 250,
    eval_episodes: int = 200,
    stop_tolerance: float = 5.0,
    clip_norm: float = 0.0,
    min_dataset: int = 1024,
    expert_ref: float | None = None,
):
    """Alternate collection and supervision (one supervised step per env
    step once the dataset passes its gate), evaluating greedily every
    `eval_every` episodes and stopping once the evaluation reward reaches
    the expert's reference minus `stop_tolerance`.

    Returns (agents, curve, info): curve rows are
    (episode, latest_eval_reward, per-agent mean losses...) with NaN before
    the first evaluation or supervised step; info records the expert
    reference and the episode training stopped at.
    """
    env_rng, act_rng, batch_rng, eval_rng, init_rng, ref_rng = rng.spawn(6)
    if expert.spec.name != spec.name:
        raise ValueError(
            f"expert was trained on {expert.spec.name!r}, not {spec.name!r}"
        )
    if expert_ref is None:
        from .expert import evaluate_expert

        expert_ref = evaluate_expert(expert, eval_episodes, ref_rng)[0]
    agents = create_agents(spec, hidden, init_rng, clip_norm)
    dataset = DemoDataset(spec, dataset_mode, min_dataset)
    curve = []
    last_eval = float("nan")
    stopped_at = None

    for ep in range(episodes):
        state, obs = env_reset(spec, env_rng)
        loss_sums = np.zeros(len(agents))
        n_steps = 0
        done = False
        while not done:
            dataset.append(label_record(spec, expert, obs))
            action = agents_joint_action(agents, spec, obs, "sample", act_rng)
            state, obs, _, done = env_step(spec, state, action)
            if len(dataset) >= max(min_dataset, batch_size):
                losses = supervise_step(
                    agents, dataset, batch_size, lr, batch_rng, loss_kind
                )
                loss_sums += losses
                n_steps += 1
        mean_losses = loss_sums / n_steps if n_steps else np.full(len(agents), np.nan)
        should_stop = False
        if ep % eval_every == 0 or ep == episodes - 1:
            last_eval, _ = evaluate(agents, spec, eval_episodes, eval_rng)
            # reaching the band below the reference (or exceeding it) stops
            should_stop = last_eval >= expert_ref - stop_tolerance
        curve.append((ep, last_eval, *mean_losses))
        if should_stop:
            stopped_at = ep
            break
    return agents, curve, {"expert_ref": expert_ref, "stopped_at": stopped_at}
