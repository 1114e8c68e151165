"""Joint observation/action layouts shared by the environment, replay, and trainer.

Each agent's observation is [environment block | one slot per in-edge,
ordered by sender index]. Each agent's action is [movement one-hot (if
mobile) | one message block per owned out-edge, ordered by receiver index |
continuous decode block (if any)]. An edge may be tied to another edge of
the same sender (broadcast): it reuses that edge's action block instead of
owning one. Layouts are total: every component is attributable to exactly
one source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from commrl.graph import CommGraph


@dataclass(frozen=True)
class Edge:
    sender: int
    receiver: int
    dim: int
    discrete: bool = True
    tie: int | None = None  # index of the edge whose action block this one mirrors


MOVE_DIM = 5  # {no-op, +x, -x, +y, -y}


@dataclass(frozen=True)
class ActionBlock:
    kind: str  # "move" | "msg" | "decode"
    sl: slice
    dim: int
    discrete: bool
    edge: int | None = None


class JointLayout:
    def __init__(
        self,
        env_obs_dims: list[int],
        move_dims: list[int],
        edges: list[Edge],
        decode_dims: list[int] | None = None,
    ):
        n = len(env_obs_dims)
        if len(move_dims) != n:
            raise ValueError("env_obs_dims and move_dims length mismatch")
        self.n_agents = n
        self.env_obs_dims = list(env_obs_dims)
        self.move_dims = list(move_dims)
        self.decode_dims = list(decode_dims) if decode_dims else [0] * n
        self.edges = list(edges)
        for idx, e in enumerate(self.edges):
            if not (0 <= e.sender < n and 0 <= e.receiver < n):
                raise ValueError(f"edge {e} references unknown agent")
            if e.dim <= 0:
                raise ValueError(f"edge {e} has non-positive dim")
            if e.tie is not None:
                t = self.edges[e.tie]
                if t.sender != e.sender or t.dim != e.dim or t.tie is not None:
                    raise ValueError(f"edge {idx} has an invalid tie to edge {e.tie}")

        self._in: list[list[int]] = [[] for _ in range(n)]
        self._out: list[list[int]] = [[] for _ in range(n)]
        for idx, e in enumerate(self.edges):
            self._in[e.receiver].append(idx)
            self._out[e.sender].append(idx)
        for i in range(n):
            self._in[i].sort(key=lambda idx: (self.edges[idx].sender, idx))
            self._out[i].sort(key=lambda idx: (self.edges[idx].receiver, idx))

        # observation slices
        self._obs_env_slice: list[slice] = []
        self._obs_slot_slice: list[dict[int, slice]] = []
        self.obs_dims: list[int] = []
        for i in range(n):
            off = env_obs_dims[i]
            self._obs_env_slice.append(slice(0, off))
            slots = {}
            for idx in self._in[i]:
                d = self.edges[idx].dim
                slots[idx] = slice(off, off + d)
                off += d
            self._obs_slot_slice.append(slots)
            self.obs_dims.append(off)

        # action slices; tied edges share their owner's block
        self._act_move_slice: list[slice | None] = []
        self._act_msg_slice: list[dict[int, slice]] = []
        self._act_decode_slice: list[slice | None] = []
        self._blocks: list[list[ActionBlock]] = []
        self.act_dims: list[int] = []
        for i in range(n):
            blocks: list[ActionBlock] = []
            off = 0
            if self.move_dims[i]:
                sl = slice(0, self.move_dims[i])
                self._act_move_slice.append(sl)
                blocks.append(ActionBlock("move", sl, self.move_dims[i], True))
                off = self.move_dims[i]
            else:
                self._act_move_slice.append(None)
            msgs: dict[int, slice] = {}
            for idx in self._out[i]:
                e = self.edges[idx]
                if e.tie is not None:
                    continue
                sl = slice(off, off + e.dim)
                msgs[idx] = sl
                blocks.append(ActionBlock("msg", sl, e.dim, e.discrete, idx))
                off += e.dim
            for idx in self._out[i]:
                e = self.edges[idx]
                if e.tie is not None:
                    msgs[idx] = msgs[e.tie]
            self._act_msg_slice.append(msgs)
            if self.decode_dims[i]:
                sl = slice(off, off + self.decode_dims[i])
                self._act_decode_slice.append(sl)
                blocks.append(ActionBlock("decode", sl, self.decode_dims[i], False))
                off += self.decode_dims[i]
            else:
                self._act_decode_slice.append(None)
            self._blocks.append(blocks)
            self.act_dims.append(off)

    # -- accessors ----------------------------------------------------------

    def in_edges(self, i: int) -> list[int]:
        return self._in[i]

    def out_edges(self, i: int) -> list[int]:
        return self._out[i]

    def owned_out_edges(self, i: int) -> list[int]:
        return [idx for idx in self._out[i] if self.edges[idx].tie is None]

    def obs_env_slice(self, i: int) -> slice:
        return self._obs_env_slice[i]

    def obs_slot_slice(self, i: int, edge_idx: int) -> slice:
        return self._obs_slot_slice[i][edge_idx]

    def act_move_slice(self, i: int) -> slice | None:
        return self._act_move_slice[i]

    def act_msg_slice(self, i: int, edge_idx: int) -> slice:
        return self._act_msg_slice[i][edge_idx]

    def act_decode_slice(self, i: int) -> slice | None:
        return self._act_decode_slice[i]

    def action_blocks(self, i: int) -> list[ActionBlock]:
        return self._blocks[i]

    def senders(self) -> list[int]:
        return [i for i in range(self.n_agents) if self._out[i]]

    def comm_graph(self) -> CommGraph:
        dims: dict[tuple[int, int], int] = {}
        for e in self.edges:
            # parallel edges between one pair collapse in the adjacency
            dims.setdefault((e.sender, e.receiver), e.dim)
        return CommGraph.from_edges(self.n_agents, dims)

    # -- assembly helpers ---------------------------------------------------

    def concat_obs(self, i: int, env: np.ndarray, slots: dict[int, np.ndarray]) -> np.ndarray:
        parts = [np.asarray(env, dtype=np.float64)]
        for idx in self._in[i]:
            parts.append(np.asarray(slots[idx], dtype=np.float64))
        out = np.concatenate(parts, axis=-1)
        if out.shape[-1] != self.obs_dims[i]:
            raise ValueError(
                f"agent {i} observation has {out.shape[-1]} dims, expected {self.obs_dims[i]}"
            )
        return out

    def concat_act(
        self,
        i: int,
        move: np.ndarray | None,
        msgs: dict[int, np.ndarray],
        decode: np.ndarray | None = None,
    ) -> np.ndarray:
        parts = []
        if self.move_dims[i]:
            if move is None:
                raise ValueError(f"agent {i} requires a movement block")
            parts.append(np.asarray(move, dtype=np.float64))
        elif move is not None and np.asarray(move).size:
            raise ValueError(f"agent {i} is immobile; movement block not allowed")
        for idx in self.owned_out_edges(i):
            parts.append(np.asarray(msgs[idx], dtype=np.float64))
        if self.decode_dims[i]:
            if decode is None:
                raise ValueError(f"agent {i} requires a decode block")
            parts.append(np.asarray(decode, dtype=np.float64))
        out = np.concatenate(parts, axis=-1) if parts else np.zeros(0)
        if out.shape[-1] != self.act_dims[i]:
            raise ValueError(
                f"agent {i} action has {out.shape[-1]} dims, expected {self.act_dims[i]}"
            )
        return out
