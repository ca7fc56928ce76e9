"""Exact tabular checks of the decentralization bounds.

Everything here runs on deliberately tiny instances: a finite set of joint
observations (at most 8), per-agent projections onto local observations,
per-agent action sets (at most 5 each), an explicit transition table over
joint actions, and a horizon of at most 10. Within those caps every quantity
is computed by exact enumeration - no sampling, no tolerance beyond float
rounding - so the checks below are decisive rather than statistical.

Time convention: ``state_distribution(mdp, policy, t)`` is the distribution
after t actions (t = 0 gives the initial distribution). An episode of horizon
T visits the distributions for t = 1..T, and ``average_state_distribution``
is their mean. Under this convention a mixed rollout policy that plays the
expert with probability q each step satisfies

    l1( avg_mix - avg_learner ) <= 2 * T * q

with equality attainable at q = 1, T = 1 when the two policies reach
disjoint states.

Instance files use a line-oriented text format::

    # comment
    agents 2
    actions 2 2            per-agent action counts
    horizon 4
    obs A B C D            joint observation names
    proj 1 A=x B=x C=y D=y agent 1's local observation per joint observation
    proj 2 A=u B=v C=u D=v
    init A=1.0             unlisted observations get probability 0
    trans A 0,1 B=0.5 C=0.5   P(. | A, joint action (0,1)); one line per
                              (observation, joint action) pair
    expert A 0,1           optional: deterministic expert joint action
    reward A 0,1 -1.0      optional reward entries

Agents and actions in the file are 1-based for agents, 0-based for actions
and symbols, matching the in-memory arrays.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

MAX_JOINT_OBS = 8
MAX_HORIZON = 10
MAX_ACTIONS_PER_AGENT = 5
_ENUM_BUDGET = 1_000_000

_ATOL = 1e-12


class BudgetError(ValueError):
    """Instance too large for exact enumeration."""


@dataclass
class TabularDecMdp:
    """Joint-observation MDP with per-agent views.

    projections[i, o] is agent i's local observation index at joint
    observation o. transitions[o, a, o2] = P(o2 | o, a) with a a flat joint
    action index (first agent most significant).
    """

    projections: np.ndarray  # (M, n_obs) int
    n_actions: tuple
    transitions: np.ndarray  # (n_obs, n_joint_actions, n_obs)
    horizon: int
    init: np.ndarray  # (n_obs,)
    rewards: np.ndarray | None = None
    obs_names: tuple | None = None

    def __post_init__(self) -> None:
        self.projections = np.asarray(self.projections, dtype=int)
        self.n_actions = tuple(int(a) for a in self.n_actions)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.init = np.asarray(self.init, dtype=np.float64)
        m, n_obs = self.projections.shape
        if n_obs > MAX_JOINT_OBS:
            raise BudgetError(
                f"{n_obs} joint observations exceed the exact-enumeration cap "
                f"of {MAX_JOINT_OBS}"
            )
        if self.horizon > MAX_HORIZON or self.horizon < 1:
            raise BudgetError(f"horizon must be in [1, {MAX_HORIZON}]")
        if len(self.n_actions) != m:
            raise ValueError("need one action count per agent")
        if any(a < 1 or a > MAX_ACTIONS_PER_AGENT for a in self.n_actions):
            raise BudgetError(
                f"per-agent action counts must be in [1, {MAX_ACTIONS_PER_AGENT}]"
            )
        n_joint = int(np.prod(self.n_actions))
        if self.transitions.shape != (n_obs, n_joint, n_obs):
            raise ValueError("transition table shape mismatch")
        if self.init.shape != (n_obs,):
            raise ValueError("initial distribution shape mismatch")
        if abs(self.init.sum() - 1.0) > _ATOL or np.any(self.init < -_ATOL):
            raise ValueError("initial distribution must be a probability vector")
        sums = self.transitions.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > _ATOL or np.any(self.transitions < -_ATOL):
            raise ValueError("transition rows must be probability vectors")
        if np.any(self.projections < 0):
            raise ValueError("negative local observation index")
        tuples = {tuple(self.projections[:, o]) for o in range(n_obs)}
        if len(tuples) != n_obs:
            raise ValueError(
                "two joint observations share the same tuple of local views; "
                "a joint observation is identified with that tuple"
            )

    @property
    def n_agents(self) -> int:
        return self.projections.shape[0]

    @property
    def n_obs(self) -> int:
        return self.projections.shape[1]

    @property
    def n_joint_actions(self) -> int:
        return int(np.prod(self.n_actions))

    def n_local(self, i: int) -> int:
        return int(self.projections[i].max()) + 1

    def flat_action(self, tup) -> int:
        return int(np.ravel_multi_index(tuple(int(a) for a in tup), self.n_actions))

    def unflat_action(self, idx: int) -> tuple:
        return tuple(int(v) for v in np.unravel_index(idx, self.n_actions))


# -- policies --------------------------------------------------------------


def expert_joint_matrix(mdp: TabularDecMdp, expert: np.ndarray) -> np.ndarray:
    """Deterministic expert table (n_obs, M) -> stochastic matrix rows."""
    expert = np.asarray(expert, dtype=int)
    if expert.shape != (mdp.n_obs, mdp.n_agents):
        raise ValueError("expert table shape mismatch")
    mat = np.zeros((mdp.n_obs, mdp.n_joint_actions))
    for o in range(mdp.n_obs):
        mat[o, mdp.flat_action(expert[o])] = 1.0
    return mat


def decentralized_joint_matrix(mdp: TabularDecMdp, tables) -> np.ndarray:
    """Per-agent local tables -> product joint policy matrix.

    tables[i] maps local observation -> action, either deterministic
    (int vector of length n_local) or stochastic (n_local, n_actions[i]).
    """
    rows = np.zeros((mdp.n_obs, mdp.n_joint_actions))
    for o in range(mdp.n_obs):
        dist = np.ones(1)
        for i in range(mdp.n_agents):
            tab = np.asarray(tables[i])
            if tab.ndim == 1:
                p = np.zeros(mdp.n_actions[i])
                p[int(tab[mdp.projections[i, o]])] = 1.0
            else:
                p = tab[mdp.projections[i, o]]
            dist = np.outer(dist, p).ravel()
        rows[o] = dist
    return rows


def _validate_policy_matrix(mdp: TabularDecMdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_obs, mdp.n_joint_actions):
        raise ValueError("policy matrix shape mismatch")
    if np.max(np.abs(policy.sum(axis=1) - 1.0)) > _ATOL or np.any(policy < -_ATOL):
        raise ValueError("policy rows must be probability vectors")
    return policy


# -- exact occupancy -------------------------------------------------------


def policy_kernel(mdp: TabularDecMdp, policy: np.ndarray) -> np.ndarray:
    """State-to-state kernel K[o, o2] = sum_a policy[o, a] P(o2 | o, a)."""
    policy = _validate_policy_matrix(mdp, policy)
    return np.einsum("oa,oan->on", policy, mdp.transitions)


def state_distribution(mdp: TabularDecMdp, policy: np.ndarray, t: int) -> np.ndarray:
    """Exact distribution over joint observations after t actions."""
    if t < 0 or t > mdp.horizon:
        raise ValueError(f"t must be in [0, horizon={mdp.horizon}]")
    kernel = policy_kernel(mdp, policy)
    d = mdp.init.copy()
    for _ in range(t):
        d = d @ kernel
    assert abs(d.sum() - 1.0) < 1e-9
    return d


def average_state_distribution(
    mdp: TabularDecMdp, policy: np.ndarray, horizon: int | None = None
) -> np.ndarray:
    """Mean of the distributions after 1..T actions."""
    T = mdp.horizon if horizon is None else horizon
    if T < 1 or T > mdp.horizon:
        raise ValueError("horizon out of range")
    kernel = policy_kernel(mdp, policy)
    d = mdp.init.copy()
    acc = np.zeros_like(d)
    for _ in range(T):
        d = d @ kernel
        acc += d
    return acc / T


@dataclass
class TvReport:
    lhs: float
    bound: float
    holds: bool


def check_tv_lemma(
    mdp: TabularDecMdp,
    expert_policy: np.ndarray,
    learner_policy: np.ndarray,
    mix_prob: float,
    horizon: int | None = None,
) -> TvReport:
    """l1 gap between mixed-rollout and learner occupancies vs 2*T*mix_prob.

    The mixed policy plays the expert's action distribution with probability
    mix_prob at every step, the learner's otherwise.
    """
    if not 0.0 <= mix_prob <= 1.0:
        raise ValueError("mix_prob must be in [0, 1]")
    T = mdp.horizon if horizon is None else horizon
    expert_policy = _validate_policy_matrix(mdp, expert_policy)
    learner_policy = _validate_policy_matrix(mdp, learner_policy)
    mixed = mix_prob * expert_policy + (1.0 - mix_prob) * learner_policy
    avg_mix = average_state_distribution(mdp, mixed, T)
    avg_learner = average_state_distribution(mdp, learner_policy, T)
    lhs = float(np.abs(avg_mix - avg_learner).sum())
    bound = 2.0 * T * mix_prob
    return TvReport(lhs=lhs, bound=bound, holds=lhs <= bound + 1e-9)


def simulate_frequencies(
    mdp: TabularDecMdp,
    policy: np.ndarray,
    n_episodes: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Monte-Carlo estimate of the per-step distributions, shape (T+1, n_obs)."""
    kernel = policy_kernel(mdp, policy)
    cum = np.cumsum(kernel, axis=1)
    states = rng.choice(mdp.n_obs, size=n_episodes, p=mdp.init / mdp.init.sum())
    freq = np.zeros((mdp.horizon + 1, mdp.n_obs))
    freq[0] = np.bincount(states, minlength=mdp.n_obs) / n_episodes
    for t in range(1, mdp.horizon + 1):
        u = rng.random(n_episodes)
        nxt = np.empty_like(states)
        for o in range(mdp.n_obs):
            mask = states == o
            if np.any(mask):
                nxt[mask] = np.searchsorted(cum[o], u[mask], side="right")
        states = np.minimum(nxt, mdp.n_obs - 1)
        freq[t] = np.bincount(states, minlength=mdp.n_obs) / n_episodes
    return freq


# -- partial observability conflicts ---------------------------------------


def detect_po_conflict(mdp: TabularDecMdp, expert: np.ndarray) -> list:
    """Pairs of joint observations an agent cannot tell apart but must act
    differently on.

    Returns (agent, obs_a, obs_b) triples where the two observations share
    the agent's local view yet the expert's action *for that agent* differs.
    An empty list means every agent's expert labels are a function of its own
    observation.
    """
    expert = np.asarray(expert, dtype=int)
    if expert.shape != (mdp.n_obs, mdp.n_agents):
        raise ValueError("expert table shape mismatch")
    conflicts = []
    for i in range(mdp.n_agents):
        proj = mdp.projections[i]
        for a in range(mdp.n_obs):
            for b in range(a + 1, mdp.n_obs):
                if proj[a] == proj[b] and expert[a, i] != expert[b, i]:
                    conflicts.append((i, a, b))
    return conflicts


def construct_decentralized(mdp: TabularDecMdp, expert: np.ndarray) -> list:
    """Per-agent tables copying the expert's label at each local observation.

    Well-defined exactly when detect_po_conflict is empty; with conflicts the
    later occurrence silently loses, so callers should check first.
    """
    expert = np.asarray(expert, dtype=int)
    tables = []
    for i in range(mdp.n_agents):
        tab = np.zeros(mdp.n_local(i), dtype=int)
        for o in range(mdp.n_obs):
            tab[mdp.projections[i, o]] = expert[o, i]
        tables.append(tab)
    return tables


def pointwise_match(mdp: TabularDecMdp, tables, expert: np.ndarray) -> bool:
    """True when the product policy reproduces the expert at every joint obs."""
    expert = np.asarray(expert, dtype=int)
    for o in range(mdp.n_obs):
        for i in range(mdp.n_agents):
            if int(tables[i][mdp.projections[i, o]]) != expert[o, i]:
                return False
    return True


def expected_mismatch(mdp: TabularDecMdp, tables, expert: np.ndarray) -> float:
    """Exact 0-1 imitation loss under the product policy's own occupancy."""
    expert = np.asarray(expert, dtype=int)
    policy = decentralized_joint_matrix(mdp, tables)
    avg = average_state_distribution(mdp, policy)
    loss = 0.0
    for o in range(mdp.n_obs):
        mismatch = any(
            int(tables[i][mdp.projections[i, o]]) != expert[o, i]
            for i in range(mdp.n_agents)
        )
        if mismatch:
            loss += avg[o]
    return float(loss)


def enumerate_decentralized_tables(mdp: TabularDecMdp, n_symbols=None):
    """All deterministic per-agent tables; with n_symbols, tables over
    (local observation, symbol) pairs instead."""
    per_agent = []
    total = 1
    for i in range(mdp.n_agents):
        domain = mdp.n_local(i) * (1 if n_symbols is None else n_symbols[i])
        count = mdp.n_actions[i] ** domain
        total *= count
        per_agent.append(
            [
                np.array(assign, dtype=int).reshape(
                    (mdp.n_local(i),)
                    if n_symbols is None
                    else (mdp.n_local(i), n_symbols[i])
                )
                for assign in itertools.product(range(mdp.n_actions[i]), repeat=domain)
            ]
        )
        if total > _ENUM_BUDGET:
            raise BudgetError("too many decentralized policies to enumerate")
    yield from itertools.product(*per_agent)


def min_expected_mismatch(mdp: TabularDecMdp, expert: np.ndarray):
    """Brute-force floor of the 0-1 imitation loss over deterministic
    decentralized policies (the stochastic optimum is at such a vertex)."""
    best = None
    best_tables = None
    for tables in enumerate_decentralized_tables(mdp):
        loss = expected_mismatch(mdp, tables, expert)
        if best is None or loss < best:
            best, best_tables = loss, list(tables)
    return best, best_tables


def zero_loss_policy_exists(mdp: TabularDecMdp, expert: np.ndarray) -> bool:
    """Brute-force search for a decentralized policy matching the expert at
    every joint observation. Independent of detect_po_conflict on purpose."""
    expert = np.asarray(expert, dtype=int)
    for i in range(mdp.n_agents):
        n_local = mdp.n_local(i)
        if mdp.n_actions[i] ** n_local > _ENUM_BUDGET:
            raise BudgetError("agent policy space too large")
        found = False
        for assign in itertools.product(range(mdp.n_actions[i]), repeat=n_local):
            if all(
                assign[mdp.projections[i, o]] == expert[o, i]
                for o in range(mdp.n_obs)
            ):
                found = True
                break
        if not found:
            return False
    return True


# -- communication sufficiency ---------------------------------------------


def validate_comm(mdp: TabularDecMdp, comm: np.ndarray) -> np.ndarray:
    """comm[i, o]: the symbol agent i *receives* at joint observation o.

    Everything agent i hears was produced by the other agents from their own
    views, so the received symbol must be a function of the others' local
    observations: it may not vary with agent i's private information.
    """
    comm = np.asarray(comm, dtype=int)
    if comm.shape != (mdp.n_agents, mdp.n_obs):
        raise ValueError("comm table shape mismatch")
    for i in range(mdp.n_agents):
        for a in range(mdp.n_obs):
            for b in range(a + 1, mdp.n_obs):
                same_others = all(
                    mdp.projections[j, a] == mdp.projections[j, b]
                    for j in range(mdp.n_agents)
                    if j != i
                )
                if same_others and comm[i, a] != comm[i, b]:
                    raise ValueError(
                        f"what agent {i} hears at observations {a} and {b} differs "
                        "although the other agents' views are identical"
                    )
    return comm


def identity_comm(mdp: TabularDecMdp) -> np.ndarray:
    """Each agent receives the exact tuple of the others' local views,
    encoded as one symbol per distinct tuple."""
    comm = np.zeros((mdp.n_agents, mdp.n_obs), dtype=int)
    for i in range(mdp.n_agents):
        seen = {}
        for o in range(mdp.n_obs):
            key = tuple(
                int(mdp.projections[j, o])
                for j in range(mdp.n_agents)
                if j != i
            )
            comm[i, o] = seen.setdefault(key, len(seen))
    return comm


def constant_comm(mdp: TabularDecMdp) -> np.ndarray:
    return np.zeros((mdp.n_agents, mdp.n_obs), dtype=int)


@dataclass
class CommSufficiencyReport:
    condition_holds: bool
    witness: tuple | None  # (agent, obs_a, obs_b) violating pair
    tables: list | None  # per agent: {(local_obs, heard): action}
    matches_expert: bool


def check_comm_sufficiency(
    mdp: TabularDecMdp, expert: np.ndarray, comm: np.ndarray
) -> CommSufficiencyReport:
    """Does the protocol disambiguate every expert-relevant observation pair?

    Condition checked, verbatim: for every agent i and every pair of joint
    observations sharing agent i's local view, if the expert's *joint* action
    differs between the two then the symbol agent i receives must differ too.
    Nothing stronger is tested; note the condition is sufficient but not
    necessary (zero-loss policies can exist for protocols failing it, e.g. a
    constant protocol when each agent's label already depends only on its own
    view).

    When the condition holds, the constructive policy over (local view,
    received symbol) is built and verified to reproduce the expert's joint
    action at every joint observation, which makes its episode distribution
    identical to the expert's at every step.
    """
    expert = np.asarray(expert, dtype=int)
    comm = validate_comm(mdp, comm)
    for i in range(mdp.n_agents):
        proj = mdp.projections[i]
        for a in range(mdp.n_obs):
            for b in range(a + 1, mdp.n_obs):
                if proj[a] != proj[b]:
                    continue
                if np.array_equal(expert[a], expert[b]):
                    continue
                if comm[i, a] == comm[i, b]:
                    return CommSufficiencyReport(False, (i, a, b), None, False)

    tables = []
    for i in range(mdp.n_agents):
        tab = {}
        for o in range(mdp.n_obs):
            key = (int(mdp.projections[i, o]), int(comm[i, o]))
            if key in tab and tab[key] != int(expert[o, i]):
                # cannot happen when the condition holds; keep the guard
                return CommSufficiencyReport(True, None, None, False)
            tab[key] = int(expert[o, i])
        tables.append(tab)

    matches = all(
        all(
            tables[i][(int(mdp.projections[i, o]), int(comm[i, o]))]
            == int(expert[o, i])
            for i in range(mdp.n_agents)
        )
        for o in range(mdp.n_obs)
    )
    if matches:
        # identical per-observation actions imply identical occupancies;
        # assert it numerically anyway
        induced = np.zeros((mdp.n_obs, mdp.n_joint_actions))
        for o in range(mdp.n_obs):
            tup = tuple(
                tables[i][(int(mdp.projections[i, o]), int(comm[i, o]))]
                for i in range(mdp.n_agents)
            )
            induced[o, mdp.flat_action(tup)] = 1.0
        mat = expert_joint_matrix(mdp, expert)
        for t in range(mdp.horizon + 1):
            da = state_distribution(mdp, mat, t)
            db = state_distribution(mdp, induced, t)
            assert np.max(np.abs(da - db)) < _ATOL
    return CommSufficiencyReport(True, None, tables, matches)


def zero_loss_with_comm_exists(
    mdp: TabularDecMdp, expert: np.ndarray, comm: np.ndarray
) -> bool:
    """Brute force over policies keyed by (local view, received symbol)."""
    expert = np.asarray(expert, dtype=int)
    comm = validate_comm(mdp, comm)
    for i in range(mdp.n_agents):
        keys = sorted(
            {(int(mdp.projections[i, o]), int(comm[i, o])) for o in range(mdp.n_obs)}
        )
        if mdp.n_actions[i] ** len(keys) > _ENUM_BUDGET:
            raise BudgetError("agent policy space too large")
        found = False
        for assign in itertools.product(range(mdp.n_actions[i]), repeat=len(keys)):
            table = dict(zip(keys, assign))
            if all(
                table[(int(mdp.projections[i, o]), int(comm[i, o]))] == expert[o, i]
                for o in range(mdp.n_obs)
            ):
                found = True
                break
        if not found:
            return False
    return True


# -- fixtures --------------------------------------------------------------


def xor_mdp() -> tuple[TabularDecMdp, np.ndarray]:
    """Two agents, joint observations {0,1}^2, agent 1 must act on the bit
    only agent 2 sees. Transitions ignore actions and stay uniform, so every
    policy faces the same occupancy."""
    n_obs = 4
    projections = np.array(
        [
            [0, 0, 1, 1],  # agent 1 sees the first bit
            [0, 1, 0, 1],  # agent 2 sees the second bit
        ]
    )
    transitions = np.full((n_obs, 4, n_obs), 0.25)
    init = np.full(n_obs, 0.25)
    mdp = TabularDecMdp(
        projections=projections,
        n_actions=(2, 2),
        transitions=transitions,
        horizon=4,
        init=init,
        obs_names=("00", "01", "10", "11"),
    )
    # agent 1 must echo the second bit; agent 2 always holds
    expert = np.array([[0, 0], [1, 0], [0, 0], [1, 0]])
    return mdp, expert


def separable_mdp() -> tuple[TabularDecMdp, np.ndarray]:
    """Same observation structure, but each agent's label depends only on its
    own view, so perfect decentralization is possible."""
    mdp, _ = xor_mdp()
    expert = np.zeros((mdp.n_obs, 2), dtype=int)
    for o in range(mdp.n_obs):
        expert[o, 0] = mdp.projections[0, o]
        expert[o, 1] = mdp.projections[1, o]
    return mdp, expert


def disjoint_reach_mdp() -> tuple[TabularDecMdp, np.ndarray, np.ndarray]:
    """Point-mass start; expert's action leads to one state, the learner's to
    another, deterministically. Used for the tight mixture-bound case."""
    n_obs = 3  # 0 = start, 1 = expert-only, 2 = learner-only
    projections = np.array([[0, 1, 2]])
    n_actions = (2,)
    transitions = np.zeros((n_obs, 2, n_obs))
    transitions[0, 0, 1] = 1.0  # action 0 from start -> state 1
    transitions[0, 1, 2] = 1.0  # action 1 from start -> state 2
    transitions[1, :, 1] = 1.0  # absorbing
    transitions[2, :, 2] = 1.0
    init = np.array([1.0, 0.0, 0.0])
    mdp = TabularDecMdp(
        projections=projections,
        n_actions=n_actions,
        transitions=transitions,
        horizon=1,
        init=init,
    )
    expert_policy = np.zeros((n_obs, 2))
    expert_policy[:, 0] = 1.0
    learner_policy = np.zeros((n_obs, 2))
    learner_policy[:, 1] = 1.0
    return mdp, expert_policy, learner_policy


# -- random instances for property sweeps ----------------------------------


def random_instance(rng: np.random.Generator, grid: bool | None = None) -> TabularDecMdp:
    """Random two-agent instance within the enumeration caps.

    grid=True forces the joint observation set to be the full product of the
    two local sets (so distinct joint observations always differ in some
    agent's view); grid=False forces arbitrary projections; None mixes.
    """
    pairs = [(a, b) for a in range(1, 5) for b in range(1, 5) if a * b <= MAX_JOINT_OBS]
    n1, n2 = pairs[rng.integers(len(pairs))]
    if grid is None:
        grid = bool(rng.random() < 0.5)
    if n1 * n2 < 2:
        grid = True
    if grid:
        # full product grid
        n_obs = n1 * n2
        proj = np.array(
            [[o // n2 for o in range(n_obs)], [o % n2 for o in range(n_obs)]]
        )
    else:
        # a strict subset of the grid cells: distinct (view1, view2) tuples
        total = n1 * n2
        n_obs = int(rng.integers(2, min(total, MAX_JOINT_OBS) + 1))
        cells = rng.choice(total, size=n_obs, replace=False)
        proj = np.stack([cells // n2, cells % n2]).astype(int)
        proj[0] -= proj[0].min()
        proj[1] -= proj[1].min()
    n_actions = (int(rng.integers(2, 4)), int(rng.integers(2, 4)))
    n_joint = n_actions[0] * n_actions[1]
    transitions = rng.gamma(1.0, size=(n_obs, n_joint, n_obs)) + 1e-9
    transitions /= transitions.sum(axis=2, keepdims=True)
    init = rng.gamma(1.0, size=n_obs) + 1e-9
    init /= init.sum()
    horizon = int(rng.integers(1, MAX_HORIZON + 1))
    return TabularDecMdp(
        projections=proj,
        n_actions=n_actions,
        transitions=transitions,
        horizon=horizon,
        init=init,
    )


def random_policy_matrix(mdp: TabularDecMdp, rng: np.random.Generator) -> np.ndarray:
    mat = rng.gamma(1.0, size=(mdp.n_obs, mdp.n_joint_actions)) + 1e-9
    return mat / mat.sum(axis=1, keepdims=True)


def random_expert(mdp: TabularDecMdp, rng: np.random.Generator) -> np.ndarray:
    cols = [rng.integers(mdp.n_actions[i], size=mdp.n_obs) for i in range(mdp.n_agents)]
    return np.stack(cols, axis=1)


# -- text format -----------------------------------------------------------


def parse_tabular(text: str):
    """Parse the instance format documented in the module docstring.

    Returns (mdp, expert) where expert is None unless the file has expert
    lines (then it must cover every observation).
    """
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line.split())
    fields = {}
    obs_names = None
    proj_lines, init_items, trans_lines, expert_lines, reward_lines = [], [], [], [], []
    for parts in lines:
        key = parts[0]
        if key == "agents":
            fields["agents"] = int(parts[1])
        elif key == "actions":
            fields["actions"] = tuple(int(v) for v in parts[1:])
        elif key == "horizon":
            fields["horizon"] = int(parts[1])
        elif key == "obs":
            obs_names = tuple(parts[1:])
        elif key == "proj":
            proj_lines.append(parts[1:])
        elif key == "init":
            init_items.extend(parts[1:])
        elif key == "trans":
            trans_lines.append(parts[1:])
        elif key == "expert":
            expert_lines.append(parts[1:])
        elif key == "reward":
            reward_lines.append(parts[1:])
        else:
            raise ValueError(f"unknown directive {key!r}")
    for need in ("agents", "actions", "horizon"):
        if need not in fields:
            raise ValueError(f"missing {need!r} line")
    if obs_names is None:
        raise ValueError("missing obs line")
    m = fields["agents"]
    actions = fields["actions"]
    if len(actions) != m:
        raise ValueError("actions line must list one count per agent")
    n_obs = len(obs_names)
    index = {name: i for i, name in enumerate(obs_names)}

    def obs_idx(name):
        if name not in index:
            raise ValueError(f"unknown observation {name!r}")
        return index[name]

    projections = np.full((m, n_obs), -1, dtype=int)
    for parts in proj_lines:
        agent = int(parts[0]) - 1
        if not 0 <= agent < m:
            raise ValueError(f"proj line for unknown agent {parts[0]}")
        labels = {}
        for item in parts[1:]:
            name, label = item.split("=")
            projections[agent, obs_idx(name)] = labels.setdefault(label, len(labels))
    if np.any(projections < 0):
        raise ValueError("every observation needs a projection for every agent")

    init = np.zeros(n_obs)
    for item in init_items:
        name, val = item.split("=")
        init[obs_idx(name)] = float(val)

    def action_idx(token):
        tup = tuple(int(v) for v in token.split(","))
        if len(tup) != m:
            raise ValueError(f"joint action {token!r} needs {m} components")
        for i, a in enumerate(tup):
            if not 0 <= a < actions[i]:
                raise ValueError(f"action component out of range in {token!r}")
        return int(np.ravel_multi_index(tup, actions))

    n_joint = int(np.prod(actions))
    transitions = np.full((n_obs, n_joint, n_obs), np.nan)
    for parts in trans_lines:
        o = obs_idx(parts[0])
        a = action_idx(parts[1])
        row = np.zeros(n_obs)
        for item in parts[2:]:
            name, val = item.split("=")
            row[obs_idx(name)] = float(val)
        transitions[o, a] = row
    if np.any(np.isnan(transitions)):
        raise ValueError("every (observation, joint action) pair needs a trans line")

    expert = None
    if expert_lines:
        expert = np.full((n_obs, m), -1, dtype=int)
        for parts in expert_lines:
            o = obs_idx(parts[0])
            tup = tuple(int(v) for v in parts[1].split(","))
            expert[o] = tup
        if np.any(expert < 0):
            raise ValueError("expert lines must cover every observation")

    rewards = None
    if reward_lines:
        rewards = np.zeros((n_obs, n_joint))
        for parts in reward_lines:
            rewards[obs_idx(parts[0]), action_idx(parts[1])] = float(parts[2])

    mdp = TabularDecMdp(
        projections=projections,
        n_actions=actions,
        transitions=transitions,
        horizon=fields["horizon"],
        init=init,
        rewards=rewards,
        obs_names=obs_names,
    )
    return mdp, expert


def load_tabular(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_tabular(fh.read())
