"""2-D particle world with explicit, one-step-delayed communication channels.

Four scenarios: a speaker guiding a listener to a colored target
(``coop_comm``), a three-speaker relay chain (``hierarchical_comm``), a
keyed encode/decode game against an adversary (``covert_comm``), and a
mobile speaker directing two listeners to separate targets
(``multi_target_comm``).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from commrl.layout import MOVE_DIM, Edge, JointLayout
from commrl.rng import RngStream

EPISODE_LENGTH = 25

# movement directions: no-op, +x, -x, +y, -y
_DIRS = np.array(
    [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
)


@dataclass(frozen=True)
class PhysicsConfig:
    dt: float = 0.1
    damping: float = 0.75  # velocity retention per step
    force_scale: float = 5.0
    max_speed: float | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not (0 < self.damping <= 1):
            raise ValueError(f"damping must be in (0, 1], got {self.damping}")


@dataclass(frozen=True)
class ChannelModel:
    """identity | dropout(p) | gaussian(sigma); delivery is one-step delayed."""

    variant: str = "identity"
    drop_p: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.variant not in ("identity", "dropout", "gaussian"):
            raise ValueError(f"unknown channel variant {self.variant!r}")
        if not (0 <= self.drop_p <= 1):
            raise ValueError(f"drop_p must be in [0, 1], got {self.drop_p}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def transmit(channel: ChannelModel, message: np.ndarray, rng: RngStream) -> np.ndarray:
    """Push a message (or a batch of rows) through the channel."""
    msg = np.asarray(message, dtype=np.float64)
    if channel.variant == "identity":
        return msg.copy()
    if channel.variant == "dropout":
        if msg.ndim == 1:
            keep = rng.uniform() >= channel.drop_p
            return msg.copy() if keep else np.zeros_like(msg)
        keep = rng.uniform(size=msg.shape[0]) >= channel.drop_p
        return msg * keep[:, None]
    return msg + rng.normal(0.0, channel.sigma, msg.shape)


@dataclass
class AgentDef:
    name: str
    role: str  # speaker | listener | adversary
    mobile: bool


@dataclass
class Scenario:
    name: str
    agents: list[AgentDef]
    edges: list[Edge]
    n_landmarks: int
    channel: ChannelModel
    physics: PhysicsConfig
    options: dict = field(default_factory=dict)
    layout: JointLayout = field(init=False)

    def __post_init__(self):
        env_dims = [self._env_obs_dim(i) for i in range(len(self.agents))]
        move_dims = [MOVE_DIM if a.mobile else 0 for a in self.agents]
        decode_dims = [self._decode_dim(i) for i in range(len(self.agents))]
        self.layout = JointLayout(env_dims, move_dims, self.edges, decode_dims)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def comm_graph(self):
        return self.layout.comm_graph()

    # -- per-scenario dimensions --------------------------------------------

    def _env_obs_dim(self, i: int) -> int:
        a = self.agents[i]
        n = self.n_landmarks
        if self.name == "coop_comm":
            return n if a.role == "speaker" else 2 + 2 * n
        if self.name == "hierarchical_comm":
            return n if a.role == "speaker" else 2 + 2 * n
        if self.name == "covert_comm":
            m = self.options["msg_dim"]
            k = self.options["key_dim"] if self.options.get("include_key", True) else 0
            if a.role == "speaker":
                return m + k
            if a.role == "listener":
                return k
            return 0  # adversary sees the channel only
        if self.name == "multi_target_comm":
            base = 2 + 2 * n
            return base + 3 * n if a.role == "speaker" else base
        raise ValueError(f"unknown scenario {self.name!r}")

    def _decode_dim(self, i: int) -> int:
        if self.name == "covert_comm" and self.agents[i].role != "speaker":
            return self.options["msg_dim"]
        return 0


@dataclass
class WorldState:
    positions: np.ndarray  # (n_agents, 2)
    velocities: np.ndarray  # (n_agents, 2)
    landmarks: np.ndarray  # (n_landmarks, 2)
    targets: np.ndarray  # per-agent target landmark index (or single entry)
    known_colors: np.ndarray  # hierarchical: non-target color per speaker
    secret_msg: np.ndarray  # covert: binary message vector
    secret_key: np.ndarray  # covert: binary key vector
    pending: dict[int, np.ndarray]  # edge idx -> message in flight
    last_actions: list[np.ndarray] | None
    step: int = 0


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def reset(scenario: Scenario, rng: RngStream) -> tuple[WorldState, list[np.ndarray]]:
    """Draw a fresh episode: uniform spawns in [-1, 1]^2, zero velocities."""
    n = scenario.n_agents
    nl = scenario.n_landmarks
    positions = rng.uniform(-1.0, 1.0, (n, 2))
    landmarks = rng.uniform(-1.0, 1.0, (nl, 2))
    targets = np.zeros(n, dtype=np.int64)
    known = np.zeros(0, dtype=np.int64)
    secret_msg = np.zeros(0)
    secret_key = np.zeros(0)
    if scenario.name in ("coop_comm", "hierarchical_comm"):
        targets[:] = rng.integers(0, nl)
        if scenario.name == "hierarchical_comm":
            non_target = [c for c in range(nl) if c != targets[0]]
            known = np.array(rng.permutation(non_target), dtype=np.int64)
    elif scenario.name == "multi_target_comm":
        targets = rng.integers(0, nl, size=n)
    elif scenario.name == "covert_comm":
        secret_msg = rng.integers(0, 2, size=scenario.options["msg_dim"]).astype(np.float64)
        secret_key = rng.integers(0, 2, size=scenario.options["key_dim"]).astype(np.float64)
    state = WorldState(
        positions=positions,
        velocities=np.zeros((n, 2)),
        landmarks=landmarks,
        targets=targets,
        known_colors=known,
        secret_msg=secret_msg,
        secret_key=secret_key,
        pending={idx: np.zeros(e.dim) for idx, e in enumerate(scenario.edges)},
        last_actions=None,
        step=0,
    )
    return state, observe(state, scenario)


def physics_step(
    state: WorldState, move_indices: list[int], cfg: PhysicsConfig, mobile: list[bool]
) -> WorldState:
    """v <- damping*v + force*dir*dt; p <- p + v*dt; advances the step counter."""
    vel = state.velocities.copy()
    pos = state.positions.copy()
    for i, idx in enumerate(move_indices):
        if not mobile[i]:
            if idx != 0:
                raise ValueError(f"agent {i} is immobile but got movement action {idx}")
            vel[i] *= cfg.damping
            continue
        vel[i] = cfg.damping * vel[i] + cfg.force_scale * _DIRS[idx] * cfg.dt
        if cfg.max_speed is not None:
            speed = np.linalg.norm(vel[i])
            if speed > cfg.max_speed:
                vel[i] *= cfg.max_speed / speed
    pos += vel * cfg.dt
    return replace(state, positions=pos, velocities=vel, step=state.step + 1)


def _onehot(idx: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[idx] = 1.0
    return v


def _env_obs(state: WorldState, scenario: Scenario, i: int) -> np.ndarray:
    a = scenario.agents[i]
    nl = scenario.n_landmarks
    rel = (state.landmarks - state.positions[i]).ravel()
    if scenario.name == "coop_comm":
        if a.role == "speaker":
            return _onehot(int(state.targets[0]), nl)
        return np.concatenate([state.velocities[i], rel])
    if scenario.name == "hierarchical_comm":
        if a.role == "speaker":
            speaker_rank = sum(
                1 for j in range(i) if scenario.agents[j].role == "speaker"
            )
            return _onehot(int(state.known_colors[speaker_rank]), nl)
        return np.concatenate([state.velocities[i], rel])
    if scenario.name == "covert_comm":
        include_key = scenario.options.get("include_key", True)
        if a.role == "speaker":
            parts = [state.secret_msg] + ([state.secret_key] if include_key else [])
            return np.concatenate(parts)
        if a.role == "listener":
            return state.secret_key.copy() if include_key else np.zeros(0)
        return np.zeros(0)
    if scenario.name == "multi_target_comm":
        base = np.concatenate([state.velocities[i], rel])
        if a.role == "speaker":
            colors = np.concatenate(
                [_onehot(int(state.targets[j]), nl) for j in range(scenario.n_agents)]
            )
            return np.concatenate([base, colors])
        return base
    raise ValueError(f"unknown scenario {scenario.name!r}")


def observe(state: WorldState, scenario: Scenario) -> list[np.ndarray]:
    """Per agent: environment block then in-edge slots ordered by sender."""
    lay = scenario.layout
    obs = []
    for i in range(scenario.n_agents):
        obs.append(lay.concat_obs(i, _env_obs(state, scenario, i), state.pending))
    return obs


def reward(scenario: Scenario, state: WorldState) -> np.ndarray:
    """Per-agent step rewards; cooperative tasks share one value."""
    n = scenario.n_agents
    if scenario.name in ("coop_comm", "hierarchical_comm"):
        li = next(i for i, a in enumerate(scenario.agents) if a.role == "listener")
        d = np.linalg.norm(state.positions[li] - state.landmarks[int(state.targets[li])])
        return np.full(n, -d)
    if scenario.name == "multi_target_comm":
        total = sum(
            np.linalg.norm(state.positions[i] - state.landmarks[int(state.targets[i])])
            for i in range(n)
        )
        return np.full(n, -total)
    if scenario.name == "covert_comm":
        if state.last_actions is None:
            return np.zeros(n)
        lay = scenario.layout
        errs = {}
        for i, a in enumerate(scenario.agents):
            if a.role == "speaker":
                continue
            sl = lay.act_decode_slice(i)
            out = state.last_actions[i][sl]
            errs[a.role] = float(np.sum((out - state.secret_msg) ** 2))
        ally = (errs["adversary"] - errs["listener"]) / 2.0
        return np.array(
            [ally if a.role != "adversary" else -ally for a in scenario.agents]
        )
    raise ValueError(f"unknown scenario {scenario.name!r}")


class Env:
    """Owns the step orchestration: physics, transmission, observation, reward."""

    def __init__(self, scenario: Scenario, rng: RngStream):
        self.scenario = scenario
        self.rng = rng
        self.state: WorldState | None = None
        self.episodes = 0

    def reset(self) -> list[np.ndarray]:
        self.state, obs = reset(self.scenario, self.rng.fork(f"ep{self.episodes}"))
        self.episodes += 1
        return obs

    def step(self, actions: list[np.ndarray]):
        """Apply one joint action; returns (obs', rewards, done)."""
        sc, lay = self.scenario, self.scenario.layout
        s = self.state
        move_indices = []
        for i in range(sc.n_agents):
            sl = lay.act_move_slice(i)
            move_indices.append(int(np.argmax(actions[i][sl])) if sl else 0)
        mobile = [a.mobile for a in sc.agents]
        s = physics_step(s, move_indices, sc.physics, mobile)
        pending = {}
        for idx, e in enumerate(sc.edges):
            msg = actions[e.sender][lay.act_msg_slice(e.sender, idx)]
            pending[idx] = transmit(sc.channel, msg, self.rng)
        s = replace(s, pending=pending, last_actions=[a.copy() for a in actions])
        self.state = s
        rewards = reward(sc, s)
        done = s.step >= EPISODE_LENGTH
        return observe(s, sc), rewards, done


# ---------------------------------------------------------------------------
# Scenario constructors
# ---------------------------------------------------------------------------


def coop_comm(n_landmarks: int = 5, drop_p: float = 0.0, physics: PhysicsConfig | None = None) -> Scenario:
    """Immobile speaker sees the target color; mobile listener navigates."""
    if n_landmarks < 2:
        raise ValueError(f"need at least 2 landmarks, got {n_landmarks}")
    channel = ChannelModel("dropout", drop_p=drop_p) if drop_p else ChannelModel()
    return Scenario(
        name="coop_comm",
        agents=[AgentDef("speaker", "speaker", False), AgentDef("listener", "listener", True)],
        edges=[Edge(0, 1, n_landmarks)],
        n_landmarks=n_landmarks,
        channel=channel,
        physics=physics or PhysicsConfig(),
    )


def hierarchical_comm(physics: PhysicsConfig | None = None) -> Scenario:
    """Chain of three immobile speakers relaying color knowledge to a listener."""
    return Scenario(
        name="hierarchical_comm",
        agents=[
            AgentDef("speaker1", "speaker", False),
            AgentDef("speaker2", "speaker", False),
            AgentDef("speaker3", "speaker", False),
            AgentDef("listener", "listener", True),
        ],
        edges=[Edge(0, 1, 4), Edge(1, 2, 6), Edge(2, 3, 4)],
        n_landmarks=4,
        channel=ChannelModel(),
        physics=physics or PhysicsConfig(),
    )


def covert_comm(
    msg_dim: int = 4, key_dim: int = 4, include_key: bool = True,
    physics: PhysicsConfig | None = None,
) -> Scenario:
    """Speaker broadcasts an encoded message; listener and adversary decode."""
    if msg_dim <= 0 or key_dim <= 0:
        raise ValueError(f"invalid dimensions msg_dim={msg_dim} key_dim={key_dim}")
    return Scenario(
        name="covert_comm",
        agents=[
            AgentDef("speaker", "speaker", False),
            AgentDef("listener", "listener", False),
            AgentDef("adversary", "adversary", False),
        ],
        edges=[
            Edge(0, 1, msg_dim, discrete=False),
            Edge(0, 2, msg_dim, discrete=False, tie=0),
        ],
        n_landmarks=0,
        channel=ChannelModel(),
        physics=physics or PhysicsConfig(),
        options={"msg_dim": msg_dim, "key_dim": key_dim, "include_key": include_key},
    )


def multi_target_comm(n_landmarks: int = 5, physics: PhysicsConfig | None = None) -> Scenario:
    """Mobile speaker sees all three targets, messages each listener separately."""
    if n_landmarks < 2:
        raise ValueError(f"need at least 2 landmarks, got {n_landmarks}")
    return Scenario(
        name="multi_target_comm",
        agents=[
            AgentDef("speaker", "speaker", True),
            AgentDef("listener1", "listener", True),
            AgentDef("listener2", "listener", True),
        ],
        edges=[Edge(0, 1, n_landmarks), Edge(0, 2, n_landmarks)],
        n_landmarks=n_landmarks,
        channel=ChannelModel(),
        physics=physics or PhysicsConfig(),
    )


_CONSTRUCTORS = {
    "coop_comm": coop_comm,
    "hierarchical_comm": hierarchical_comm,
    "covert_comm": covert_comm,
    "multi_target_comm": multi_target_comm,
}


def make_scenario(name: str, **options) -> Scenario:
    if name not in _CONSTRUCTORS:
        raise ValueError(f"unknown scenario {name!r}; known: {sorted(_CONSTRUCTORS)}")
    return _CONSTRUCTORS[name](**options)


# ---------------------------------------------------------------------------
# Config loading and trajectory dumps
# ---------------------------------------------------------------------------

_SCENARIO_KEYS = {
    "name", "n_landmarks", "drop_p", "msg_dim", "key_dim", "include_key", "physics",
}
_PHYSICS_KEYS = {"dt", "damping", "force_scale", "max_speed"}


def scenario_from_config(cfg: dict) -> Scenario:
    """Build a scenario from a config mapping; unknown keys are rejected."""
    unknown = set(cfg) - _SCENARIO_KEYS
    if unknown:
        raise ValueError(f"unknown scenario config keys: {sorted(unknown)}")
    if "name" not in cfg:
        raise ValueError("scenario config requires a 'name' key")
    opts = {k: v for k, v in cfg.items() if k not in ("name", "physics")}
    if "physics" in cfg:
        bad = set(cfg["physics"]) - _PHYSICS_KEYS
        if bad:
            raise ValueError(f"unknown physics config keys: {sorted(bad)}")
        opts["physics"] = PhysicsConfig(**cfg["physics"])
    return make_scenario(cfg["name"], **opts)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_config(json.load(fh))


def dump_trajectory(path, rows: list[dict]) -> None:
    """Per-step CSV: episode, step, agent, pos_x, pos_y, action, message, reward."""
    cols = ["episode", "step", "agent", "pos_x", "pos_y", "action", "message", "reward"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
