"""Decentralization with a learned inter-agent communication channel.

Plain imitation gives each moving agent a policy over its own observation,
but some scenarios hide the information an agent needs inside another
agent's observation.  Here every agent gets a policy with a movement head
and, if the scenario grants it an outgoing channel, a communication head.
Training replays recorded consecutive observation pairs: the stored
successor observation supplies the supervised movement target (the frozen
expert's greedy choice there), while the communication slots of that
successor are overwritten with messages re-queried from the *current*
policies evaluated at the stored predecessor observations.  Two losses are
minimized per agent:

* an action loss, the cross-entropy between the expert's movement label
  and the agent's movement head at its re-queried input (message senders
  are held constant), and
* a communication loss, which charges a sender for the action losses its
  message induces in every other moving agent.  Its gradient flows through
  each receiver's input sensitivity, sliced at the sender's message block,
  and back through the sender's communication head at the sender's stored
  predecessor observation.

Updates inside one step are synchronous: every agent's gradients are
computed against the same pre-update parameters before any are applied, so
the result does not depend on the order agents are visited in.

Messages are softmax distributions while training (both when collecting
rollouts and when re-queried inside the losses) and hard argmax one-hot
vectors at evaluation time.  With every outgoing channel width zero the
machinery degenerates exactly to the plain supervised step.
"""

from dataclasses import dataclass

import numpy as np

from .decentralize import Agent, _per_agent_lr, agent_move
from .envs import (
    N_MOVES,
    JointAction,
    ScenarioSpec,
    env_reset,
    env_step,
)
from .nn import (
    AdamState,
    GradBundle,
    Head,
    MlpPolicy,
    adam_step,
    clip_grad_norm,
    mlp_backward,
    mlp_forward,
    softmax_ce_batch,
)


# -- agents ----------------------------------------------------------------


def create_comm_agents(
    spec: ScenarioSpec,
    hidden: int,
    rng: np.random.Generator,
    clip_norm: float = 0.0,
) -> list:
    """One policy per agent over its full local observation (own state plus
    received-message slots).  The movement head is always present; agents
    with an outgoing channel get a second softmax head of that width."""
    agents = []
    for i in range(spec.n_agents):
        n_out = spec.comm_out[i]
        heads = [Head(offset=0, length=N_MOVES, kind="softmax")]
        if n_out > 0:
            heads.append(Head(offset=N_MOVES, length=n_out, kind="softmax"))
        policy = MlpPolicy.create(
            (spec.obs_len(i), hidden, hidden, N_MOVES + n_out),
            tuple(heads),
            rng,
        )
        agents.append(
            Agent(index=i, policy=policy, opt=AdamState.for_policy(policy), clip_norm=clip_norm)
        )
    return agents


def comm_probs(agent: Agent, spec: ScenarioSpec, obs_i: np.ndarray) -> np.ndarray:
    """The agent's outgoing-message distribution at one observation."""
    n_out = spec.comm_out[agent.index]
    if n_out == 0:
        return np.zeros(0)
    obs_i = np.asarray(obs_i, dtype=np.float64)
    if obs_i.shape != (agent.policy.input_len,):
        raise ValueError(
            f"agent {agent.index} expects exactly {agent.policy.input_len} "
            f"inputs, got {obs_i.shape}"
        )
    return mlp_forward(agent.policy, obs_i)[N_MOVES : N_MOVES + n_out]


def comm_joint_action(
    agents: list,
    spec: ScenarioSpec,
    obs: list,
    mode: str,
    rng: np.random.Generator | None = None,
) -> JointAction:
    """Joint action of the communicating team.

    "sample" (training rollouts): movement indices are sampled and messages
    are emitted as soft distributions.  "greedy" (evaluation): argmax
    movement and hard one-hot messages.
    """
    if len(agents) != spec.n_agents:
        raise ValueError("need one policy per agent")
    moves = np.zeros(spec.n_agents, dtype=int)
    comms = []
    for agent in agents:
        i = agent.index
        moves[i] = agent_move(agent, obs[i], mode, rng)
        probs = comm_probs(agent, spec, obs[i])
        if mode == "greedy" and probs.size:
            hard = np.zeros_like(probs)
            hard[np.argmax(probs)] = 1.0
            probs = hard
        comms.append(probs)
    return JointAction(moves=moves, comms=comms)


# -- recorded demonstrations ----------------------------------------------


@dataclass
class CommDemoRecord:
    """One consecutive observation pair from a rollout of the communicating
    team, labeled by the frozen expert at the successor.

    prev_obs: every agent's full local observation before the step (its
        message slots hold what was actually received then).
    succ_obs: every agent's full local observation after the step; message
        re-queries replace its message slots at training time.
    joint_core: the message-stripped concatenation of succ_obs, kept so the
        labels can be re-derived from the expert at any point.
    labels: the expert's greedy movement index per moving agent at succ_obs,
        ordered like the scenario's mover index list.
    """

    prev_obs: list
    succ_obs: list
    joint_core: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.prev_obs) != len(self.succ_obs):
            raise ValueError("need matching observation lists")
        if np.any(self.labels < 0) or np.any(self.labels >= N_MOVES):
            raise ValueError("movement label out of range")


class CommDemoDataset:
    """Append-only store of CommDemoRecords with a minimum-size gate.

    Only the shared mode exists: message re-queries need every agent's
    predecessor observation, so records cannot be split per agent."""

    def __init__(self, spec: ScenarioSpec, mode: str = "shared", min_size: int = 1024):
        if mode != "shared":
            raise ValueError(
                "communication training keeps whole-team records; "
                f"mode {mode!r} is not supported"
            )
        self.spec = spec
        self.min_size = int(min_size)
        self.records = []

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: CommDemoRecord) -> None:
        spec = self.spec
        if len(record.prev_obs) != spec.n_agents:
            raise ValueError("record does not match the scenario's agent count")
        for i in range(spec.n_agents):
            if np.asarray(record.succ_obs[i]).shape != (spec.obs_len(i),):
                raise ValueError(f"agent {i} observation has the wrong length")
        if len(record.labels) != len(spec.mover_indices()):
            raise ValueError("need one label per moving agent")
        self.records.append(record)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        gate = max(self.min_size, batch_size)
        if len(self.records) < gate:
            raise ValueError(
                f"dataset holds {len(self.records)} records, gate is {gate}"
            )
        idx = rng.choice(len(self.records), size=batch_size, replace=False)
        return [self.records[k] for k in idx]


def label_comm_record(
    spec: ScenarioSpec, expert, prev_obs: list, succ_obs: list
) -> CommDemoRecord:
    """Label a consecutive observation pair with the expert's greedy moves
    at the successor (the expert never sees the message slots)."""
    joint_core = spec.core_obs(succ_obs)
    moves = expert.greedy_moves(joint_core)
    labels = np.array([moves[i] for i in spec.mover_indices()], dtype=int)
    return CommDemoRecord(
        prev_obs=[np.asarray(o, dtype=np.float64).copy() for o in prev_obs],
        succ_obs=[np.asarray(o, dtype=np.float64).copy() for o in succ_obs],
        joint_core=joint_core,
        labels=labels,
    )


def collect_comm(
    agents: list,
    expert,
    spec: ScenarioSpec,
    steps: int,
    dataset: CommDemoDataset,
    rng: np.random.Generator,
) -> None:
    """Roll the communicating team for `steps` env steps, appending one
    labeled consecutive-pair record per step.  Episodes reset internally
    and pairs never straddle a reset."""
    if expert.spec.name != spec.name:
        raise ValueError(
            f"expert was trained on {expert.spec.name!r}, not {spec.name!r}"
        )
    state, obs = env_reset(spec, rng)
    done = False
    for _ in range(steps):
        if done:
            state, obs = env_reset(spec, rng)
        action = comm_joint_action(agents, spec, obs, "sample", rng)
        state, succ, _, done = env_step(spec, state, action)
        dataset.append(label_comm_record(spec, expert, obs, succ))
        obs = succ


# -- message re-query ------------------------------------------------------


def _sender_rows(agents: list, spec: ScenarioSpec, records: list, receiver: int):
    """Current soft messages addressed to `receiver`, re-queried from the
    stored predecessor observations: (rows, per-sender block slices)."""
    n = len(records)
    cols = []
    blocks = {}
    offset = 0
    for j in range(spec.n_agents):
        if j == receiver or spec.comm_out[j] == 0:
            continue
        prev = np.stack([r.prev_obs[j] for r in records])
        out = mlp_forward(agents[j].policy, prev)
        cols.append(out[:, N_MOVES : N_MOVES + spec.comm_out[j]])
        blocks[j] = slice(offset, offset + spec.comm_out[j])
        offset += spec.comm_out[j]
    rows = np.concatenate(cols, axis=1) if cols else np.zeros((n, 0))
    return rows, blocks


def requery_comm(
    agents: list, spec: ScenarioSpec, record: CommDemoRecord, receiver: int
) -> np.ndarray:
    """The message vector agent `receiver` would hear now: every other
    sender's current soft message at its stored predecessor observation,
    concatenated in ascending sender order (matching the observation
    layout)."""
    rows, _ = _sender_rows(agents, spec, [record], receiver)
    return rows[0]


def _requeried_input(agents: list, spec: ScenarioSpec, records: list, i: int):
    """Stack of agent i's successor observations with the message slots
    replaced by the current re-queried messages."""
    x = np.stack([r.succ_obs[i] for r in records]).astype(np.float64)
    rows, blocks = _sender_rows(agents, spec, records, i)
    x[:, spec.comm_slice(i)] = rows
    return x, blocks


# -- the two losses --------------------------------------------------------


def action_loss(agents: list, spec: ScenarioSpec, i: int, records: list):
    """Mean cross-entropy of agent i's movement head against the expert's
    labels, at the stored successor observations with re-queried messages.
    Gradients flow into agent i only; message senders are held constant.
    Agents that never move have no labels: (nan, zero gradients)."""
    policy = agents[i].policy
    n = len(records)
    movers = spec.mover_indices()
    if i not in movers:
        return float("nan"), GradBundle.zeros_like(policy, (n, policy.input_len))
    column = movers.index(i)
    x, _ = _requeried_input(agents, spec, records, i)
    labels = np.array([r.labels[column] for r in records])
    out = mlp_forward(policy, x)
    per_row, upstream = softmax_ce_batch(out, policy.heads[0], labels)
    loss = float(per_row.mean())
    if not np.isfinite(loss):
        raise RuntimeError(f"non-finite action loss for agent {i}")
    grads = mlp_backward(policy, x, upstream / n)
    return loss, grads


def communication_loss(agents: list, spec: ScenarioSpec, i: int, records: list):
    """How much agent i's outgoing message hurts the other movers: the mean
    of every other moving agent's action loss, scaled by 1/(n_agents - 1).

    The returned gradients are for agent i alone.  Each receiver j
    contributes its input sensitivity sliced at i's message block; those
    slices accumulate into an upstream on i's communication head, applied
    at i's stored predecessor observations.  An agent with no outgoing
    channel gets the (constant) loss value and zero gradients."""
    n_agents = spec.n_agents
    if n_agents < 2:
        raise ValueError("communication needs at least two agents")
    policy = agents[i].policy
    n = len(records)
    n_out = spec.comm_out[i]
    movers = spec.mover_indices()
    scale = 1.0 / (n_agents - 1)
    total = 0.0
    emit_upstream = np.zeros((n, n_out))
    for j in movers:
        if j == i:
            continue
        xj, blocks = _requeried_input(agents, spec, records, j)
        labels_j = np.array([r.labels[movers.index(j)] for r in records])
        out_j = mlp_forward(agents[j].policy, xj)
        per_row, upstream_j = softmax_ce_batch(out_j, agents[j].policy.heads[0], labels_j)
        total += scale * float(per_row.mean())
        if n_out > 0:
            grads_j = mlp_backward(agents[j].policy, xj, upstream_j * (scale / n))
            received = grads_j.d_input[:, spec.comm_slice(j)]
            emit_upstream += received[:, blocks[i]]
    if not np.isfinite(total):
        raise RuntimeError(f"non-finite communication loss for agent {i}")
    if n_out == 0:
        return total, GradBundle.zeros_like(policy, (n, policy.input_len))
    prev_i = np.stack([r.prev_obs[i] for r in records])
    upstream = np.zeros((n, policy.output_len))
    upstream[:, N_MOVES : N_MOVES + n_out] = emit_upstream
    grads = mlp_backward(policy, prev_i, upstream)
    return total, grads


# -- synchronous update ----------------------------------------------------


def comm_update(
    agents: list,
    spec: ScenarioSpec,
    records: list,
    lr,
    comm_loss_enabled: bool = True,
    order=None,
):
    """One synchronous step: every agent's action and communication
    gradients are computed against the same pre-update parameters, then all
    Adam steps are applied.  `order` only permutes the computation sequence
    and cannot change the result.  Returns (action losses, comm losses) per
    agent; entries are nan where the loss does not apply."""
    n_agents = len(agents)
    lrs = _per_agent_lr(lr, n_agents)
    idx = list(order) if order is not None else list(range(n_agents))
    if sorted(idx) != list(range(n_agents)):
        raise ValueError("order must be a permutation of the agent indices")
    a_losses = [float("nan")] * n_agents
    c_losses = [float("nan")] * n_agents
    pending = {}
    for i in idx:
        loss_a, grads = action_loss(agents, spec, i, records)
        a_losses[i] = loss_a
        if comm_loss_enabled:
            loss_c, grads_c = communication_loss(agents, spec, i, records)
            c_losses[i] = loss_c
            grads.add_params(grads_c)
        pending[i] = grads
    for i in range(n_agents):
        clip_grad_norm(pending[i], agents[i].clip_norm)
        adam_step(agents[i].policy, pending[i], agents[i].opt, lrs[i])
    return a_losses, c_losses


def evaluate_comm(
    agents: list, spec: ScenarioSpec, episodes: int, rng: np.random.Generator
):
    """Greedy rollouts with hard one-hot messages; (mean reward, stderr)."""
    totals = np.zeros(episodes)
    for k in range(episodes):
        state, obs = env_reset(spec, rng)
        done = False
        while not done:
            action = comm_joint_action(agents, spec, obs, "greedy")
            state, obs, reward, done = env_step(spec, state, action)
            totals[k] += reward
    stderr = totals.std(ddof=1) / np.sqrt(episodes) if episodes > 1 else 0.0
    return float(totals.mean()), float(stderr)


def decentralize_comm(
    expert,
    spec: ScenarioSpec,
    rng: np.random.Generator,
    *,
    episodes: int,
    hidden: int,
    batch_size: int,
    lr,
    eval_every: int = 250,
    eval_episodes: int = 200,
    stop_tolerance: float = 5.0,
    clip_norm: float = 0.0,
    min_dataset: int = 1024,
    expert_ref: float | None = None,
    comm_loss_enabled: bool = True,
):
    """Imitate a frozen centralized expert with communicating per-agent
    policies.  Each env step appends one labeled consecutive-pair record
    and, once the dataset passes its gate, runs one synchronous update.
    Evaluation (greedy, hard messages) runs every `eval_every` episodes and
    training stops once it reaches the expert's reference reward minus
    `stop_tolerance`.

    Returns (agents, curve, info).  Curve rows are
    (episode, latest_eval_reward, per-agent action losses..., per-agent
    comm losses...) with nan before the first evaluation or update and in
    columns that do not apply (non-movers' action loss; every comm column
    when `comm_loss_enabled` is off).
    """
    env_rng, act_rng, batch_rng, eval_rng, init_rng, ref_rng = rng.spawn(6)
    if expert.spec.name != spec.name:
        raise ValueError(
            f"expert was trained on {expert.spec.name!r}, not {spec.name!r}"
        )
    if expert_ref is None:
        from .expert import evaluate_expert

        expert_ref = evaluate_expert(expert, eval_episodes, ref_rng)[0]
    agents = create_comm_agents(spec, hidden, init_rng, clip_norm)
    dataset = CommDemoDataset(spec, "shared", min_dataset)
    n_agents = spec.n_agents
    curve = []
    last_eval = float("nan")
    stopped_at = None

    for ep in range(episodes):
        state, obs = env_reset(spec, env_rng)
        a_sums = np.zeros(n_agents)
        c_sums = np.zeros(n_agents)
        n_steps = 0
        done = False
        while not done:
            action = comm_joint_action(agents, spec, obs, "sample", act_rng)
            state, succ, _, done = env_step(spec, state, action)
            dataset.append(label_comm_record(spec, expert, obs, succ))
            obs = succ
            if len(dataset) >= max(min_dataset, batch_size):
                batch = dataset.sample(batch_size, batch_rng)
                a_losses, c_losses = comm_update(
                    agents, spec, batch, lr, comm_loss_enabled
                )
                a_sums += a_losses
                c_sums += c_losses
                n_steps += 1
        if n_steps:
            a_means, c_means = a_sums / n_steps, c_sums / n_steps
        else:
            a_means = np.full(n_agents, np.nan)
            c_means = np.full(n_agents, np.nan)
        should_stop = False
        if ep % eval_every == 0 or ep == episodes - 1:
            last_eval, _ = evaluate_comm(agents, spec, eval_episodes, eval_rng)
            # reaching the band below the reference (or exceeding it) stops
            should_stop = last_eval >= expert_ref - stop_tolerance
        curve.append((ep, last_eval, *a_means, *c_means))
        if should_stop:
            stopped_at = ep
            break
    return agents, curve, {"expert_ref": expert_ref, "stopped_at": stopped_at}
