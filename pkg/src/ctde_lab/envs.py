"""Two-dimensional particle tasks with discrete movement and cheap talk.

All scenarios share one physics step on an unbounded plane:

    v <- v * (1 - damping * dt) + accel * gain * dt
    v <- v * min(1, max_speed / |v|)
    pos <- pos + v * dt

with dt = 0.1 and damping = 0.25. Movement actions are the five discrete
choices {0: hold, 1: up, 2: down, 3: left, 4: right}, each a unit-magnitude
acceleration scaled by the agent's gain. Episodes run a fixed 25 steps.

Communication is broadcast with a one-step delay: the vector an agent emits
while acting at step t is what the other agents read in their step t+1
observations. Observation vectors are assembled in a fixed order: own
velocity, relative landmark positions, relative other-agent positions, goal
colors, received communication - with segments dropped where a scenario does
not use them. Goal colors are one-hot over landmark indices.

Scenarios:

- coop_nav_3 / coop_nav_6: N agents, N landmarks, shared reward
  -sum_j min_i |agent_i - landmark_j| minus 1 per overlapping agent pair.
- coop_nav_3_het / coop_nav_6_het: same task, but agent bodies differ
  (radii 0.15/0.10/0.05 paired with gains 0.6/1.0/1.4, profiles repeating
  for the 6-agent variant).
- speaker_listener: a static speaker sees only which of 3 landmarks is the
  goal and can only talk (3 symbols); the listener sees landmark geometry
  plus the speaker's message and can only move. Reward is the negative
  squared listener-goal distance.
- coop_nav_comm_2x3 / coop_nav_comm_3x5: each agent has a private goal
  landmark known only to the *other* agents, plus a 10-symbol channel.
  Reward is the negative sum of agent-to-own-goal distances, no collisions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

DT = 0.1
DAMPING = 0.25
EPISODE_LEN = 25

# hold, up, down, left, right
MOVE_DIRS = np.array(
    [[0.0, 0.0], [0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0]]
)
N_MOVES = 5

SCENARIO_NAMES = (
    "coop_nav_3",
    "coop_nav_3_het",
    "coop_nav_6",
    "coop_nav_6_het",
    "speaker_listener",
    "coop_nav_comm_2x3",
    "coop_nav_comm_3x5",
)

_HET_RADII = (0.15, 0.10, 0.05)
_HET_GAINS = (0.6, 1.0, 1.4)


class EpisodeOver(RuntimeError):
    """Raised when stepping an episode that already ran its 25 steps."""


@dataclass(frozen=True)
class ScenarioSpec:
    """Static description of one task: agent bodies, channels, obs layout."""

    name: str
    kind: str  # coop_nav | speaker_listener | coop_nav_comm
    n_agents: int
    n_landmarks: int
    radii: tuple
    gains: tuple
    max_speeds: tuple
    movers: tuple  # bool per agent
    comm_out: tuple  # emitted symbols per agent (0 = mute)
    horizon: int = EPISODE_LEN

    # -- observation layout ------------------------------------------------

    def comm_in(self, i: int) -> int:
        return sum(self.comm_out[j] for j in range(self.n_agents) if j != i)

    def obs_segments(self, i: int) -> list[tuple[str, int]]:
        """(tag, length) segments of agent i's observation, in order."""
        m, l = self.n_agents, self.n_landmarks
        if self.kind == "coop_nav":
            return [("vel", 2), ("rel_landmarks", 2 * l), ("rel_others", 2 * (m - 1))]
        if self.kind == "speaker_listener":
            if i == 0:  # speaker: goal color only
                return [("goal", l)]
            return [("vel", 2), ("rel_landmarks", 2 * l), ("comm", self.comm_in(i))]
        if self.kind == "coop_nav_comm":
            return [
                ("vel", 2),
                ("rel_landmarks", 2 * l),
                ("other_goals", (m - 1) * l),
                ("comm", self.comm_in(i)),
            ]
        raise ValueError(f"unknown scenario kind {self.kind!r}")

    def obs_len(self, i: int) -> int:
        return sum(length for _, length in self.obs_segments(i))

    def comm_slice(self, i: int) -> slice:
        """Slice of agent i's observation holding received communication."""
        n = self.obs_len(i)
        segs = self.obs_segments(i)
        if segs and segs[-1][0] == "comm":
            return slice(n - segs[-1][1], n)
        return slice(n, n)

    def core_len(self, i: int) -> int:
        sl = self.comm_slice(i)
        return self.obs_len(i) - (sl.stop - sl.start)

    def core_obs(self, obs: list[np.ndarray]) -> np.ndarray:
        """Concatenation of all observations with comm slots stripped."""
        return np.concatenate(
            [obs[i][: self.core_len(i)] for i in range(self.n_agents)]
        )

    def joint_core_len(self) -> int:
        return sum(self.core_len(i) for i in range(self.n_agents))

    def mover_indices(self) -> list[int]:
        return [i for i in range(self.n_agents) if self.movers[i]]

    def sender_indices(self) -> list[int]:
        return [i for i in range(self.n_agents) if self.comm_out[i] > 0]


def _coop_nav_spec(name: str, n: int, het: bool) -> ScenarioSpec:
    if het:
        reps = (n + 2) // 3
        radii = tuple((_HET_RADII * reps)[:n])
        gains = tuple((_HET_GAINS * reps)[:n])
    else:
        radii = (0.1,) * n
        gains = (1.0,) * n
    return ScenarioSpec(
        name=name,
        kind="coop_nav",
        n_agents=n,
        n_landmarks=n,
        radii=radii,
        gains=gains,
        max_speeds=(1.0,) * n,
        movers=(True,) * n,
        comm_out=(0,) * n,
    )


def make_scenario(name: str) -> ScenarioSpec:
    if name == "coop_nav_3":
        return _coop_nav_spec(name, 3, het=False)
    if name == "coop_nav_3_het":
        return _coop_nav_spec(name, 3, het=True)
    if name == "coop_nav_6":
        return _coop_nav_spec(name, 6, het=False)
    if name == "coop_nav_6_het":
        return _coop_nav_spec(name, 6, het=True)
    if name == "speaker_listener":
        return ScenarioSpec(
            name=name,
            kind="speaker_listener",
            n_agents=2,
            n_landmarks=3,
            radii=(0.1, 0.1),
            gains=(1.0, 1.0),
            max_speeds=(1.0, 1.0),
            movers=(False, True),
            comm_out=(3, 0),
        )
    if name in ("coop_nav_comm_2x3", "coop_nav_comm_3x5"):
        m, l = (2, 3) if name.endswith("2x3") else (3, 5)
        return ScenarioSpec(
            name=name,
            kind="coop_nav_comm",
            n_agents=m,
            n_landmarks=l,
            radii=(0.1,) * m,
            gains=(1.0,) * m,
            max_speeds=(1.0,) * m,
            movers=(True,) * m,
            comm_out=(10,) * m,
        )
    raise ValueError(
        f"unknown scenario {name!r}; expected one of {', '.join(SCENARIO_NAMES)}"
    )


def coop_nav_spec(n_agents: int, het: bool = False) -> ScenarioSpec:
    """Custom-size cooperative navigation, used by tests."""
    return _coop_nav_spec(f"coop_nav_{n_agents}{'_het' if het else ''}", n_agents, het)


# -- dynamic state ---------------------------------------------------------


@dataclass
class EnvState:
    pos: np.ndarray  # (M, 2)
    vel: np.ndarray  # (M, 2)
    landmarks: np.ndarray  # (L, 2)
    goals: np.ndarray | None  # (M,) landmark indices, scenario dependent
    comm: list  # per agent: vector emitted at the previous step
    t: int = 0


@dataclass
class JointAction:
    """Movement index per agent plus one broadcast message per agent.

    comms[i] has length comm_out[i]; policies emit simplex vectors while
    training and one-hot vectors when executing. Mute agents use length 0.
    """

    moves: np.ndarray  # (M,) ints in [0, 5)
    comms: list

    def move_onehot(self, i: int) -> np.ndarray:
        v = np.zeros(N_MOVES)
        v[int(self.moves[i])] = 1.0
        return v


def zero_comms(spec: ScenarioSpec) -> list:
    return [np.zeros(spec.comm_out[i]) for i in range(spec.n_agents)]


def uniform_random_action(spec: ScenarioSpec, rng: np.random.Generator) -> JointAction:
    moves = rng.integers(0, N_MOVES, size=spec.n_agents)
    comms = []
    for i in range(spec.n_agents):
        c = np.zeros(spec.comm_out[i])
        if spec.comm_out[i]:
            c[rng.integers(spec.comm_out[i])] = 1.0
        comms.append(c)
    return JointAction(moves, comms)


def env_reset(spec: ScenarioSpec, rng: np.random.Generator):
    """Fresh episode: uniform positions in [-1, 1]^2, zero speeds, no talk."""
    pos = rng.uniform(-1.0, 1.0, (spec.n_agents, 2))
    landmarks = rng.uniform(-1.0, 1.0, (spec.n_landmarks, 2))
    if spec.kind == "speaker_listener":
        goals = np.full(spec.n_agents, rng.integers(spec.n_landmarks))
    elif spec.kind == "coop_nav_comm":
        goals = rng.integers(spec.n_landmarks, size=spec.n_agents)
    else:
        goals = None
    state = EnvState(
        pos=pos,
        vel=np.zeros((spec.n_agents, 2)),
        landmarks=landmarks,
        goals=goals,
        comm=zero_comms(spec),
        t=0,
    )
    return state, observe_all(spec, state)


def observe(spec: ScenarioSpec, state: EnvState, i: int) -> np.ndarray:
    parts = []
    for tag, length in spec.obs_segments(i):
        if tag == "vel":
            parts.append(state.vel[i])
        elif tag == "rel_landmarks":
            parts.append((state.landmarks - state.pos[i]).ravel())
        elif tag == "rel_others":
            rel = [
                state.pos[j] - state.pos[i]
                for j in range(spec.n_agents)
                if j != i
            ]
            parts.append(np.concatenate(rel) if rel else np.zeros(0))
        elif tag == "goal":
            onehot = np.zeros(spec.n_landmarks)
            onehot[int(state.goals[i])] = 1.0
            parts.append(onehot)
        elif tag == "other_goals":
            vecs = []
            for j in range(spec.n_agents):
                if j == i:
                    continue
                onehot = np.zeros(spec.n_landmarks)
                onehot[int(state.goals[j])] = 1.0
                vecs.append(onehot)
            parts.append(np.concatenate(vecs))
        elif tag == "comm":
            received = [
                state.comm[j] for j in range(spec.n_agents) if j != i and spec.comm_out[j]
            ]
            parts.append(np.concatenate(received) if received else np.zeros(0))
        else:
            raise ValueError(f"unknown segment {tag!r}")
        if length != parts[-1].size:
            raise ValueError("observation segment length mismatch")
    return np.concatenate(parts) if parts else np.zeros(0)


def observe_all(spec: ScenarioSpec, state: EnvState) -> list[np.ndarray]:
    return [observe(spec, state, i) for i in range(spec.n_agents)]


def scenario_reward(spec: ScenarioSpec, state: EnvState) -> float:
    """Shared team reward of the current configuration."""
    if spec.kind == "coop_nav":
        total = 0.0
        for lm in state.landmarks:
            d = np.sqrt(np.sum((state.pos - lm) ** 2, axis=1))
            total -= float(d.min())
        for i in range(spec.n_agents):
            for j in range(i + 1, spec.n_agents):
                dist = float(np.sqrt(np.sum((state.pos[i] - state.pos[j]) ** 2)))
                if dist < spec.radii[i] + spec.radii[j]:
                    total -= 1.0
        return total
    if spec.kind == "speaker_listener":
        goal = state.landmarks[int(state.goals[1])]
        return -float(np.sum((state.pos[1] - goal) ** 2))
    if spec.kind == "coop_nav_comm":
        total = 0.0
        for i in range(spec.n_agents):
            goal = state.landmarks[int(state.goals[i])]
            total -= float(np.sqrt(np.sum((state.pos[i] - goal) ** 2)))
        return total
    raise ValueError(f"unknown scenario kind {spec.kind!r}")


def env_step(spec: ScenarioSpec, state: EnvState, action: JointAction):
    """Advance one step; returns (state', observations', reward, done)."""
    if state.t >= spec.horizon:
        raise EpisodeOver(f"episode finished after {spec.horizon} steps")
    moves = np.asarray(action.moves)
    if moves.shape != (spec.n_agents,):
        raise ValueError("need one movement index per agent")
    if np.any(moves < 0) or np.any(moves >= N_MOVES):
        raise ValueError("movement index out of range")
    if len(action.comms) != spec.n_agents:
        raise ValueError("need one communication vector per agent")

    vel = state.vel * (1.0 - DAMPING * DT)
    for i in range(spec.n_agents):
        if spec.movers[i]:
            vel[i] = vel[i] + MOVE_DIRS[int(moves[i])] * spec.gains[i] * DT
        speed = float(np.sqrt(vel[i] @ vel[i]))
        if speed > spec.max_speeds[i]:
            vel[i] *= spec.max_speeds[i] / speed
    pos = state.pos + vel * DT

    comm = []
    for i in range(spec.n_agents):
        c = np.asarray(action.comms[i], dtype=np.float64)
        if c.shape != (spec.comm_out[i],):
            raise ValueError(f"agent {i} communication must have length {spec.comm_out[i]}")
        comm.append(c.copy())

    new_state = EnvState(
        pos=pos,
        vel=vel,
        landmarks=state.landmarks,
        goals=state.goals,
        comm=comm,
        t=state.t + 1,
    )
    reward = scenario_reward(spec, new_state)
    done = new_state.t >= spec.horizon
    return new_state, observe_all(spec, new_state), reward, done


def write_trajectory_csv(path, spec: ScenarioSpec, rows) -> None:
    """Dump one episode: rows of (timestep, state, action, reward)."""
    header = ["timestep"]
    for i in range(spec.n_agents):
        header += [f"pos_x_{i}", f"pos_y_{i}", f"vel_x_{i}", f"vel_y_{i}", f"move_{i}"]
    header.append("reward")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t, state, action, reward in rows:
            row = [t]
            for i in range(spec.n_agents):
                row += [
                    repr(float(state.pos[i, 0])),
                    repr(float(state.pos[i, 1])),
                    repr(float(state.vel[i, 0])),
                    repr(float(state.vel[i, 1])),
                    int(action.moves[i]),
                ]
            row.append(repr(float(reward)))
            writer.writerow(row)
