"""Centralized-critic, decentralized-policy training on relabelled minibatches.

Each agent owns a policy over its local observation and a critic over the
joint observation/action vector (optionally extended with a data-age
fingerprint scalar). Updates consume per-agent batches produced by the
replay relabelling pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from commrl import nn
from commrl.checkpoint import save_checkpoint
from commrl.env import Env, Scenario
from commrl.nn import AdamState, MLPParams
from commrl.relabel import PerAgentBatch, assemble_batches
from commrl.replay import ExperienceRecord, ReplayBuffer
from commrl.rng import RngStream

FINGERPRINT_SCALE = 100_000.0


def fingerprint_value(iteration: int) -> float:
    """Data-age scalar stored with experience: iteration / 100000."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return iteration / FINGERPRINT_SCALE


@dataclass
class TrainConfig:
    lr: float = 0.001
    tau: float = 0.01
    gamma: float = 0.75
    batch_size: int = 1024
    update_every: int = 100  # environment steps between update sweeps
    buffer_capacity: int = 10_000_000
    gumbel_beta: float = 1.0
    mode: str | list[str] = "none"  # none | fcc | occ, optionally per agent
    K: int | None = None  # None: 0 for none, 1 for fcc, nilpotency-1 for occ
    fingerprint: bool | list[bool] = False
    episodes: int = 10_000
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    grad_clip: float = 0.5  # global norm per network per update; 0 disables
    relabel_greedy: bool = False

    def __post_init__(self):
        if not (0 <= self.gamma < 1):
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        for name in ("lr", "tau", "batch_size", "update_every", "buffer_capacity",
                     "gumbel_beta", "episodes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class AgentNets:
    policy: MLPParams
    critic: MLPParams
    target_policy: MLPParams
    target_critic: MLPParams
    policy_opt: AdamState
    critic_opt: AdamState


def act(
    policy: MLPParams,
    obs: np.ndarray,
    rng: RngStream,
    explore: bool,
    blocks,
    beta: float = 1.0,
) -> np.ndarray:
    """Structured action: discrete blocks sampled (or argmax), decode via tanh."""
    logits = nn.mlp_forward(policy, obs)
    out = np.empty_like(logits)
    for blk in blocks:
        z = logits[..., blk.sl]
        if blk.discrete:
            if explore:
                out[..., blk.sl] = nn.gumbel_softmax(z, beta, rng).hard
            else:
                out[..., blk.sl] = nn.onehot_argmax(z)
        else:
            out[..., blk.sl] = np.tanh(z)
    return out


def update_targets(nets: AgentNets, tau: float) -> None:
    nn.soft_update(nets.target_policy, nets.policy, tau)
    nn.soft_update(nets.target_critic, nets.critic, tau)


class Trainer:
    def __init__(self, scenario: Scenario, cfg: TrainConfig):
        self.scenario = scenario
        self.cfg = cfg
        self.layout = scenario.layout
        n = scenario.n_agents
        self.modes = [cfg.mode] * n if isinstance(cfg.mode, str) else list(cfg.mode)
        fps = cfg.fingerprint
        self.fp_flags = [fps] * n if isinstance(fps, bool) else list(fps)
        self.K = cfg.K if cfg.K is not None else self._default_K()

        root = RngStream(cfg.seed)
        self.rng_env = root.fork("env")
        self.rng_explore = root.fork("explore")
        self.rng_sample = root.fork("sample")
        self.rng_relabel = root.fork("relabel")
        rng_init = root.fork("init")

        self.env = Env(scenario, self.rng_env)
        self.buffer = ReplayBuffer(self.layout, cfg.buffer_capacity)
        self.nets: list[AgentNets] = []
        for i in range(n):
            pol = nn.init_mlp(
                [self.layout.obs_dims[i], *cfg.hidden, self.layout.act_dims[i]],
                rng_init.fork(f"policy{i}"),
            )
            critic_in = sum(self.layout.obs_dims) + sum(self.layout.act_dims)
            if self.fp_flags[i]:
                critic_in += 1
            cri = nn.init_mlp([critic_in, *cfg.hidden, 1], rng_init.fork(f"critic{i}"))
            self.nets.append(
                AgentNets(
                    policy=pol,
                    critic=cri,
                    target_policy=pol.copy(),
                    target_critic=cri.copy(),
                    policy_opt=AdamState.for_params(pol, cfg.lr),
                    critic_opt=AdamState.for_params(cri, cfg.lr),
                )
            )
        self.total_steps = 0
        self.total_updates = 0

    def _default_K(self) -> int:
        K = 0
        graph = self.layout.comm_graph()
        for m in self.modes:
            if m == "fcc":
                K = max(K, 1)
            elif m == "occ":
                K = max(K, graph.k_exact)
        return K

    # -- acting -------------------------------------------------------------

    def policies(self) -> list[MLPParams]:
        return [a.policy for a in self.nets]

    def act_joint(self, obs: list[np.ndarray], explore: bool) -> list[np.ndarray]:
        return [
            act(self.nets[i].policy, obs[i], self.rng_explore, explore,
                self.layout.action_blocks(i), self.cfg.gumbel_beta)
            for i in range(self.scenario.n_agents)
        ]

    # -- record plumbing ----------------------------------------------------

    def _split_record(self, episode, step, obs, actions, rewards, next_obs, done):
        lay = self.layout
        obs_env, obs_msg, act_move, act_msg, act_dec, nxt_env, nxt_msg = (
            [], [], [], [], [], [], [])
        for i in range(lay.n_agents):
            obs_env.append(obs[i][lay.obs_env_slice(i)])
            obs_msg.append({e: obs[i][lay.obs_slot_slice(i, e)] for e in lay.in_edges(i)})
            msl = lay.act_move_slice(i)
            act_move.append(actions[i][msl] if msl else None)
            act_msg.append({e: actions[i][lay.act_msg_slice(i, e)]
                            for e in lay.owned_out_edges(i)})
            dsl = lay.act_decode_slice(i)
            act_dec.append(actions[i][dsl] if dsl else None)
            nxt_env.append(next_obs[i][lay.obs_env_slice(i)])
            nxt_msg.append({e: next_obs[i][lay.obs_slot_slice(i, e)]
                            for e in lay.in_edges(i)})
        return ExperienceRecord(
            episode=episode, step=step, obs_env=obs_env, obs_msg=obs_msg,
            act_move=act_move, act_msg=act_msg, rewards=rewards,
            next_obs_env=nxt_env, next_obs_msg=nxt_msg, done=done,
            act_decode=act_dec, fingerprint=fingerprint_value(self.total_steps),
        )

    # -- updates ------------------------------------------------------------

    def _critic_input(self, i: int, obs, actions, fingerprint) -> np.ndarray:
        parts = list(obs) + list(actions)
        if self.fp_flags[i]:
            parts = parts + [fingerprint[:, None]]
        return np.concatenate(parts, axis=-1)

    def critic_target(self, i: int, batch: PerAgentBatch) -> np.ndarray:
        """y = r_i + gamma * Q_target(o', a') with a' from the target policies
        (greedy per discrete block); no bootstrap past episode ends."""
        nxt_actions = []
        for j in range(self.scenario.n_agents):
            nxt_actions.append(
                act(self.nets[j].target_policy, batch.next_obs[j], self.rng_relabel,
                    explore=False, blocks=self.layout.action_blocks(j))
            )
        x = self._critic_input(i, batch.next_obs, nxt_actions, batch.fingerprint)
        q = nn.mlp_forward(self.nets[i].target_critic, x)[:, 0]
        return batch.rewards[:, i] + self.cfg.gamma * (1.0 - batch.done) * q

    def update_critic(self, i: int, batch: PerAgentBatch) -> float:
        y = self.critic_target(i, batch)
        x = self._critic_input(i, batch.obs, batch.actions, batch.fingerprint)
        nets = self.nets[i]
        q = nn.mlp_forward_t(nets.critic, x)
        diff = nn.sub(q, y[:, None])
        loss = nn.mean(nn.mul(diff, diff))
        loss.backward()
        try:
            nn.adam_step(nets.critic, nets.critic_opt, clip=self.cfg.grad_clip)
        except FloatingPointError as exc:
            raise FloatingPointError(f"critic update for agent {i}: {exc}") from exc
        finally:
            nets.critic.zero_grads()
        return float(loss.data)

    def update_policy(self, i: int, batch: PerAgentBatch) -> float:
        """Ascend Q_i with agent i's blocks resampled through the straight-through
        estimator; other agents' actions are fresh policy samples held constant."""
        n = self.scenario.n_agents
        actions: list = []
        for j in range(n):
            if j == i:
                logits = nn.mlp_forward_t(self.nets[i].policy, batch.obs[i])
                parts = []
                for blk in self.layout.action_blocks(i):
                    z = nn.tslice(logits, blk.sl)
                    if blk.discrete:
                        parts.append(nn.st_gumbel(z, self.cfg.gumbel_beta, self.rng_relabel))
                    else:
                        parts.append(nn.tanh(z))
                actions.append(nn.concat(parts) if len(parts) > 1 else parts[0])
            else:
                actions.append(
                    act(self.nets[j].policy, batch.obs[j], self.rng_relabel,
                        explore=True, blocks=self.layout.action_blocks(j),
                        beta=self.cfg.gumbel_beta)
                )
        obs_parts = list(batch.obs)
        parts = obs_parts + actions
        if self.fp_flags[i]:
            parts = parts + [batch.fingerprint[:, None]]
        x = nn.concat(parts)
        q = nn.mlp_forward_t(self.nets[i].critic, x)
        objective = nn.mean(q)
        loss = nn.scale(objective, -1.0)
        loss.backward()
        if not np.isfinite(objective.data):
            raise FloatingPointError(f"non-finite policy objective for agent {i}")
        try:
            nn.adam_step(self.nets[i].policy, self.nets[i].policy_opt,
                         clip=self.cfg.grad_clip)
        finally:
            self.nets[i].policy.zero_grads()
            self.nets[i].critic.zero_grads()
        return float(objective.data)

    def update_all(self) -> dict:
        window = self.buffer.sample_window(self.rng_sample, self.cfg.batch_size, self.K)
        batches = assemble_batches(
            window, self.policies(), self.scenario.channel, self.layout,
            self.rng_relabel, modes=self.modes, greedy=self.cfg.relabel_greedy,
        )
        closs, ploss = [], []
        for i in range(self.scenario.n_agents):
            closs.append(self.update_critic(i, batches[i]))
            ploss.append(self.update_policy(i, batches[i]))
        for nets in self.nets:
            update_targets(nets, self.cfg.tau)
        self.total_updates += 1
        return {"critic_loss": closs, "policy_obj": ploss}

    # -- training loop ------------------------------------------------------

    def run(self, on_episode=None) -> list[dict]:
        """Train for cfg.episodes; returns one metrics row per episode."""
        rows = []
        losses_acc: list[dict] = []
        n = self.scenario.n_agents
        for ep in range(self.cfg.episodes):
            obs = self.env.reset()
            returns = np.zeros(n)
            done = False
            while not done:
                actions = self.act_joint(obs, explore=True)
                next_obs, rewards, done = self.env.step(actions)
                record = self._split_record(
                    ep, self.env.state.step - 1, obs, actions, rewards, next_obs, done
                )
                self.buffer.push(record)
                self.total_steps += 1
                if (self.total_steps % self.cfg.update_every == 0
                        and len(self.buffer) >= self.cfg.batch_size):
                    losses_acc.append(self.update_all())
                obs = next_obs
                returns += rewards
            if losses_acc:
                closs = np.mean([r["critic_loss"] for r in losses_acc], axis=0)
                ploss = np.mean([r["policy_obj"] for r in losses_acc], axis=0)
            else:
                closs = np.full(n, np.nan)
                ploss = np.full(n, np.nan)
            losses_acc = []
            row = {"episode": ep, "returns": returns,
                   "critic_loss": closs, "policy_obj": ploss}
            rows.append(row)
            if on_episode is not None:
                on_episode(row)
        return rows

    # -- evaluation and checkpointing ---------------------------------------

    def evaluate(self, episodes: int, rng: RngStream, scenario: Scenario | None = None) -> np.ndarray:
        """Greedy-policy rollouts; returns (episodes, n_agents) episode returns."""
        sc = scenario or self.scenario
        env = Env(sc, rng)
        out = np.zeros((episodes, sc.n_agents))
        for ep in range(episodes):
            obs = env.reset()
            done = False
            while not done:
                actions = [
                    act(self.nets[i].policy, obs[i], rng, explore=False,
                        blocks=sc.layout.action_blocks(i))
                    for i in range(sc.n_agents)
                ]
                obs, rewards, done = env.step(actions)
                out[ep] += rewards
        return out

    def save(self, path, extra_meta: dict | None = None,
             buffer_snapshot_steps: int = 0) -> None:
        nets, opts = {}, {}
        for i, a in enumerate(self.nets):
            nets[f"policy{i}"] = a.policy
            nets[f"critic{i}"] = a.critic
            nets[f"target_policy{i}"] = a.target_policy
            nets[f"target_critic{i}"] = a.target_critic
            opts[f"policy{i}"] = a.policy_opt
            opts[f"critic{i}"] = a.critic_opt
        arrays = {}
        if buffer_snapshot_steps:
            for k, v in self.buffer.dump_arrays(buffer_snapshot_steps).items():
                arrays[f"buffer/{k}"] = v
        meta = {
            "scenario": self.scenario.name,
            "scenario_options": {k: v for k, v in self.scenario.options.items()},
            "n_landmarks": self.scenario.n_landmarks,
            "drop_p": self.scenario.channel.drop_p,
            "modes": self.modes,
            "fingerprint": self.fp_flags,
            "K": self.K,
            "seed": self.cfg.seed,
            "total_steps": self.total_steps,
            "total_updates": self.total_updates,
            "rng": {
                "env": self.rng_env.get_state(),
                "explore": self.rng_explore.get_state(),
                "sample": self.rng_sample.get_state(),
                "relabel": self.rng_relabel.get_state(),
            },
            **(extra_meta or {}),
        }
        save_checkpoint(path, nets, opts, arrays, meta)
