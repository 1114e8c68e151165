"""Episodic ring replay buffer with k-step window sampling.

Records keep environment and communication parts separable per agent so
sampled windows can be relabelled at training time. Lookback windows are
clamped at episode starts (and at the eviction horizon of the ring).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from commrl.layout import JointLayout
from commrl.rng import RngStream


@dataclass
class ExperienceRecord:
    """One joint time step, split per agent into environment and message parts."""

    episode: int
    step: int
    obs_env: list[np.ndarray]
    obs_msg: list[dict[int, np.ndarray]]  # per agent: edge idx -> received slot
    act_move: list[np.ndarray | None]
    act_msg: list[dict[int, np.ndarray]]  # per agent: owned edge idx -> sent message
    rewards: np.ndarray
    next_obs_env: list[np.ndarray]
    next_obs_msg: list[dict[int, np.ndarray]]
    done: bool = False
    act_decode: list[np.ndarray | None] | None = None
    fingerprint: float = 0.0


@dataclass
class MinibatchWindow:
    """Sampled minibatch with per-sample history: obs at t-K..t plus (a, r, o')."""

    K: int
    obs_hist: list[np.ndarray]  # per agent: (K+1, B, obs_dim); index K is time t
    eff_len: np.ndarray  # (B,) valid lookback steps, <= K
    actions: list[np.ndarray]  # per agent: (B, act_dim) at time t
    rewards: np.ndarray  # (B, n_agents) at t+1
    next_obs: list[np.ndarray]  # per agent: (B, obs_dim)
    done: np.ndarray  # (B,)
    fingerprint: np.ndarray  # (B,)

    @property
    def batch_size(self) -> int:
        return self.eff_len.shape[0]

    def obs_t(self) -> list[np.ndarray]:
        return [h[self.K] for h in self.obs_hist]


class ReplayBuffer:
    """Fixed-capacity ring of ExperienceRecords, oldest evicted first.

    Storage grows geometrically up to ``capacity`` so huge nominal
    capacities cost nothing until filled.
    """

    def __init__(self, layout: JointLayout, capacity: int = 10_000_000):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.layout = layout
        self.capacity = int(capacity)
        self.count = 0  # total pushes ever
        self._alloc = 0
        self._obs: list[np.ndarray] = []
        self._act: list[np.ndarray] = []
        self._next_obs: list[np.ndarray] = []
        self._rew: np.ndarray | None = None
        self._episode: np.ndarray | None = None
        self._step: np.ndarray | None = None
        self._done: np.ndarray | None = None
        self._fp: np.ndarray | None = None

    def __len__(self) -> int:
        return min(self.count, self.capacity)

    @property
    def oldest(self) -> int:
        """Global index of the oldest retained record."""
        return self.count - len(self)

    def _ensure(self, needed: int) -> None:
        if needed <= self._alloc:
            return
        new = min(self.capacity, max(1024, 2 * self._alloc, needed))
        lay = self.layout

        def grow(old, dim):
            fresh = np.zeros((new, dim))
            if old is not None:
                fresh[: old.shape[0]] = old
            return fresh

        if not self._obs:
            self._obs = [np.zeros((new, d)) for d in lay.obs_dims]
            self._act = [np.zeros((new, d)) for d in lay.act_dims]
            self._next_obs = [np.zeros((new, d)) for d in lay.obs_dims]
        else:
            self._obs = [grow(a, d) for a, d in zip(self._obs, lay.obs_dims)]
            self._act = [grow(a, d) for a, d in zip(self._act, lay.act_dims)]
            self._next_obs = [grow(a, d) for a, d in zip(self._next_obs, lay.obs_dims)]
        self._rew = grow(self._rew, lay.n_agents)
        for name in ("_episode", "_step", "_done", "_fp"):
            old = getattr(self, name)
            fresh = np.zeros(new, dtype=np.int64 if name in ("_episode", "_step") else np.float64)
            if old is not None:
                fresh[: old.shape[0]] = old
            setattr(self, name, fresh)
        self._alloc = new

    def push(self, record: ExperienceRecord) -> None:
        lay = self.layout
        obs, act, nxt = [], [], []
        for i in range(lay.n_agents):
            obs.append(lay.concat_obs(i, record.obs_env[i], record.obs_msg[i]))
            decode = record.act_decode[i] if record.act_decode else None
            act.append(lay.concat_act(i, record.act_move[i], record.act_msg[i], decode))
            nxt.append(lay.concat_obs(i, record.next_obs_env[i], record.next_obs_msg[i]))
        rew = np.asarray(record.rewards, dtype=np.float64)
        if rew.shape != (lay.n_agents,):
            raise ValueError(f"rewards shape {rew.shape}, expected ({lay.n_agents},)")
        g = self.count
        if g < self.capacity:
            self._ensure(g + 1)
        s = g % self.capacity
        for i in range(lay.n_agents):
            self._obs[i][s] = obs[i]
            self._act[i][s] = act[i]
            self._next_obs[i][s] = nxt[i]
        self._rew[s] = rew
        self._episode[s] = record.episode
        self._step[s] = record.step
        self._done[s] = float(record.done)
        self._fp[s] = record.fingerprint
        self.count += 1

    def read(self, g: int) -> ExperienceRecord:
        """Reconstruct the record at global index g (splits restored)."""
        if not (self.oldest <= g < self.count):
            raise IndexError(f"index {g} outside retained range [{self.oldest}, {self.count})")
        lay = self.layout
        s = g % self.capacity
        obs_env, obs_msg, act_move, act_msg, nxt_env, nxt_msg, act_dec = [], [], [], [], [], [], []
        for i in range(lay.n_agents):
            o, a, x = self._obs[i][s], self._act[i][s], self._next_obs[i][s]
            obs_env.append(o[lay.obs_env_slice(i)].copy())
            obs_msg.append({e: o[lay.obs_slot_slice(i, e)].copy() for e in lay.in_edges(i)})
            msl = lay.act_move_slice(i)
            act_move.append(a[msl].copy() if msl else None)
            act_msg.append({e: a[lay.act_msg_slice(i, e)].copy() for e in lay.owned_out_edges(i)})
            dsl = lay.act_decode_slice(i)
            act_dec.append(a[dsl].copy() if dsl else None)
            nxt_env.append(x[lay.obs_env_slice(i)].copy())
            nxt_msg.append({e: x[lay.obs_slot_slice(i, e)].copy() for e in lay.in_edges(i)})
        return ExperienceRecord(
            episode=int(self._episode[s]),
            step=int(self._step[s]),
            obs_env=obs_env,
            obs_msg=obs_msg,
            act_move=act_move,
            act_msg=act_msg,
            rewards=self._rew[s].copy(),
            next_obs_env=nxt_env,
            next_obs_msg=nxt_msg,
            done=bool(self._done[s]),
            act_decode=act_dec,
            fingerprint=float(self._fp[s]),
        )

    # -- sampling -----------------------------------------------------------

    def sample_window(
        self,
        rng: RngStream,
        batch_size: int = 1024,
        K: int = 0,
        indices: np.ndarray | None = None,
    ) -> MinibatchWindow:
        """Uniform index sampling with clamped lookback of up to K steps."""
        if K < 0:
            raise ValueError(f"K must be >= 0, got {K}")
        size = len(self)
        if size == 0:
            raise ValueError("cannot sample from an empty buffer")
        lo = self.oldest
        if indices is None:
            idx = lo + rng.integers(0, size, size=batch_size)
        else:
            idx = np.asarray(indices, dtype=np.int64)
        B = idx.shape[0]
        slots = idx % self.capacity
        ep = self._episode[slots]

        eff = np.zeros(B, dtype=np.int64)
        alive = np.ones(B, dtype=bool)
        for j in range(1, K + 1):
            prev = idx - j
            alive &= prev >= lo
            ps = np.where(alive, prev, idx) % self.capacity
            alive &= self._episode[ps] == ep
            eff[alive] = j

        obs_hist = [np.empty((K + 1, B, d)) for d in self.layout.obs_dims]
        for j in range(K + 1):
            back = np.minimum(K - j, eff)
            src = (idx - back) % self.capacity
            for i in range(self.layout.n_agents):
                obs_hist[i][j] = self._obs[i][src]
        return MinibatchWindow(
            K=K,
            obs_hist=obs_hist,
            eff_len=eff,
            actions=[a[slots].copy() for a in self._act],
            rewards=self._rew[slots].copy(),
            next_obs=[a[slots].copy() for a in self._next_obs],
            done=self._done[slots].copy(),
            fingerprint=self._fp[slots].copy(),
        )

    # -- dump/restore -------------------------------------------------------

    def dump_arrays(self, first_n: int | None = None) -> dict[str, np.ndarray]:
        """Flat-array snapshot of the oldest ``first_n`` retained records."""
        size = len(self)
        n = size if first_n is None else min(first_n, size)
        gs = np.arange(self.oldest, self.oldest + n)
        slots = gs % self.capacity
        out = {"episode": self._episode[slots], "step": self._step[slots],
               "rewards": self._rew[slots], "done": self._done[slots],
               "fingerprint": self._fp[slots]}
        for i in range(self.layout.n_agents):
            out[f"obs{i}"] = self._obs[i][slots]
            out[f"act{i}"] = self._act[i][slots]
            out[f"next_obs{i}"] = self._next_obs[i][slots]
        return out

    @classmethod
    def from_arrays(cls, layout: JointLayout, arrays: dict, capacity: int | None = None) -> "ReplayBuffer":
        n = arrays["episode"].shape[0]
        buf = cls(layout, capacity or max(n, 1))
        buf._ensure(min(n, buf.capacity))
        for g in range(n):
            s = g % buf.capacity
            for i in range(layout.n_agents):
                buf._obs[i][s] = arrays[f"obs{i}"][g]
                buf._act[i][s] = arrays[f"act{i}"][g]
                buf._next_obs[i][s] = arrays[f"next_obs{i}"][g]
            buf._rew[s] = arrays["rewards"][g]
            buf._episode[s] = arrays["episode"][g]
            buf._step[s] = arrays["step"][g]
            buf._done[s] = arrays["done"][g]
            buf._fp[s] = arrays["fingerprint"][g]
            buf.count += 1
        return buf
