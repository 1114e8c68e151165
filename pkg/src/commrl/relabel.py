"""Replay-time message relabelling under the senders' current policies.

``occ_relabel`` walks a sampled history window forward from its oldest
observation, regenerating messages with the current policies at every step
so corrected messages feed downstream corrections (exact on DAGs when the
window depth is nilpotency-1). ``fcc_relabel`` is the one-step variant.
``per_agent_restore`` pins each agent's own sent message (and the slots its
receivers saw) back to the stored values, per-agent, after a shared
relabelling pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from commrl.env import ChannelModel, transmit
from commrl.layout import JointLayout
from commrl.nn import MLPParams, gumbel_softmax, mlp_forward, onehot_argmax
from commrl.replay import MinibatchWindow
from commrl.rng import RngStream


@dataclass
class RelabelledWindow:
    obs_t: list[np.ndarray]
    actions: list[np.ndarray]  # stored env/decode blocks with relabelled messages
    next_obs: list[np.ndarray]
    trace: list[list[np.ndarray]] | None = None  # corrected obs at t-K..t+1


@dataclass
class PerAgentBatch:
    """Relabelled minibatch specialized to one agent (its own traffic restored)."""

    agent: int
    obs: list[np.ndarray]
    actions: list[np.ndarray]
    rewards: np.ndarray  # (B, n_agents)
    next_obs: list[np.ndarray]
    done: np.ndarray
    fingerprint: np.ndarray


def sample_messages(
    policies: list[MLPParams],
    layout: JointLayout,
    obs: list[np.ndarray],
    rng: RngStream,
    greedy: bool = False,
    senders: list[int] | None = None,
) -> dict[int, np.ndarray]:
    """Message per owned out-edge from each sender's current policy.

    Discrete blocks use a Gumbel draw at inverse temperature 1 (matching the
    behavior policy) or the greedy argmax; continuous blocks are tanh outputs.
    """
    if senders is None:
        senders = layout.senders()
    out: dict[int, np.ndarray] = {}
    for j in senders:
        logits = mlp_forward(policies[j], obs[j])
        for blk in layout.action_blocks(j):
            if blk.kind != "msg":
                continue
            z = logits[..., blk.sl]
            if blk.discrete:
                if greedy:
                    out[blk.edge] = onehot_argmax(z)
                else:
                    out[blk.edge] = gumbel_softmax(z, 1.0, rng).hard
            else:
                out[blk.edge] = np.tanh(z)
    return out


def _owner(layout: JointLayout, edge_idx: int) -> int:
    tie = layout.edges[edge_idx].tie
    return edge_idx if tie is None else tie


def relabel_step(
    obs_hat: list[np.ndarray],
    stored_next_env: list[np.ndarray],
    stored_next_slots: list[np.ndarray],
    policies: list[MLPParams],
    layout: JointLayout,
    channel: ChannelModel,
    rng: RngStream,
    greedy: bool = False,
    senders: list[int] | None = None,
) -> tuple[list[np.ndarray], dict[int, np.ndarray]]:
    """One correction step: sample messages on the corrected observation,
    push them through the channel, and concatenate with the stored
    environment parts of the next observation.

    ``stored_next_env``/``stored_next_slots`` are the full stored next
    observations (env parts are taken from them; slots of inactive senders
    are kept as stored).
    """
    active = layout.senders() if senders is None else senders
    msgs = sample_messages(policies, layout, obs_hat, rng, greedy, active)
    active_set = set(active)
    new_obs = []
    for i in range(layout.n_agents):
        arr = np.array(stored_next_slots[i], copy=True)
        env_sl = layout.obs_env_slice(i)
        arr[..., env_sl] = stored_next_env[i][..., env_sl]
        for e in layout.in_edges(i):
            sender = layout.edges[e].sender
            if sender in active_set:
                sent = msgs[_owner(layout, e)]
                arr[..., layout.obs_slot_slice(i, e)] = transmit(channel, sent, rng)
        new_obs.append(arr)
    return new_obs, msgs


def occ_relabel(
    window: MinibatchWindow,
    policies: list[MLPParams],
    channel: ChannelModel,
    layout: JointLayout,
    rng: RngStream,
    greedy: bool = False,
    efficient: bool = True,
    return_trace: bool = False,
) -> RelabelledWindow:
    """Ordered correction over the window's full K-step history."""
    K = window.K
    depths = layout.comm_graph().depths
    senders = layout.senders()
    obs_hat = [window.obs_hist[i][0].copy() for i in range(layout.n_agents)]
    trace: list[list[np.ndarray]] | None = [] if return_trace else None
    obs_t: list[np.ndarray] = []
    msgs_t: dict[int, np.ndarray] = {}
    for k in range(K, -1, -1):
        j = K - k  # history index of time t-k
        # rows whose episode history starts here begin from the stored obs
        start = window.eff_len == k
        if start.any():
            for i in range(layout.n_agents):
                obs_hat[i][start] = window.obs_hist[i][j][start]
        if trace is not None:
            trace.append([o.copy() for o in obs_hat])
        if k == 0:
            obs_t = [o.copy() for o in obs_hat]
        active = senders if (k == 0 or not efficient) else [
            s for s in senders if depths[s] >= k
        ]
        if k > 0:
            stored_next = [window.obs_hist[i][j + 1] for i in range(layout.n_agents)]
        else:
            stored_next = window.next_obs
        obs_hat, msgs = relabel_step(
            obs_hat, stored_next, stored_next, policies, layout, channel, rng,
            greedy=greedy, senders=active,
        )
        if k == 0:
            msgs_t = msgs
    if trace is not None:
        trace.append([o.copy() for o in obs_hat])

    actions = [a.copy() for a in window.actions]
    for i in senders:
        for e in layout.owned_out_edges(i):
            actions[i][..., layout.act_msg_slice(i, e)] = msgs_t[e]
    return RelabelledWindow(obs_t=obs_t, actions=actions, next_obs=obs_hat, trace=trace)


def fcc_relabel(
    window: MinibatchWindow,
    policies: list[MLPParams],
    channel: ChannelModel,
    layout: JointLayout,
    rng: RngStream,
    greedy: bool = False,
) -> RelabelledWindow:
    """First-step correction: one extra past observation relabels o_t, then o_{t+1}."""
    return occ_relabel(
        truncate_window(window, 1), policies, channel, layout, rng,
        greedy=greedy, efficient=False,
    )


def truncate_window(window: MinibatchWindow, K_new: int) -> MinibatchWindow:
    """View of the window with lookback limited to K_new steps."""
    if K_new > window.K:
        raise ValueError(f"cannot extend window from K={window.K} to {K_new}")
    off = window.K - K_new
    return MinibatchWindow(
        K=K_new,
        obs_hist=[h[off:] for h in window.obs_hist],
        eff_len=np.minimum(window.eff_len, K_new),
        actions=window.actions,
        rewards=window.rewards,
        next_obs=window.next_obs,
        done=window.done,
        fingerprint=window.fingerprint,
    )


def per_agent_restore(
    rel: RelabelledWindow,
    window: MinibatchWindow,
    agent: int,
    layout: JointLayout,
) -> PerAgentBatch:
    """Pin agent's own sent message at t, and the receiving slots at t and t+1,
    back to the stored originals; keep every other relabelled component."""
    obs = [o.copy() for o in rel.obs_t]
    nxt = [o.copy() for o in rel.next_obs]
    actions = [a.copy() for a in rel.actions]
    stored_obs_t = window.obs_t()
    for e in layout.owned_out_edges(agent):
        sl = layout.act_msg_slice(agent, e)
        actions[agent][..., sl] = window.actions[agent][..., sl]
    for e in layout.out_edges(agent):
        recv = layout.edges[e].receiver
        sl = layout.obs_slot_slice(recv, e)
        obs[recv][..., sl] = stored_obs_t[recv][..., sl]
        nxt[recv][..., sl] = window.next_obs[recv][..., sl]
    return PerAgentBatch(
        agent=agent,
        obs=obs,
        actions=actions,
        rewards=window.rewards,
        next_obs=nxt,
        done=window.done,
        fingerprint=window.fingerprint,
    )


def assemble_batches(
    window: MinibatchWindow,
    policies: list[MLPParams],
    channel: ChannelModel,
    layout: JointLayout,
    rng: RngStream,
    modes: str | list[str] = "none",
    greedy: bool = False,
) -> list[PerAgentBatch]:
    """Per-agent batches under a correction mode (or one mode per agent).

    The shared relabelling is computed once per requested mode, then
    specialized to each agent by the restore step.
    """
    n = layout.n_agents
    if isinstance(modes, str):
        modes = [modes] * n
    if len(modes) != n:
        raise ValueError(f"expected {n} modes, got {len(modes)}")
    bad = set(modes) - {"none", "fcc", "occ"}
    if bad:
        raise ValueError(f"unknown correction modes: {sorted(bad)}")

    shared: dict[str, RelabelledWindow] = {}
    if "occ" in modes:
        shared["occ"] = occ_relabel(window, policies, channel, layout, rng, greedy=greedy)
    if "fcc" in modes:
        shared["fcc"] = fcc_relabel(window, policies, channel, layout, rng, greedy=greedy)

    batches = []
    for i in range(n):
        if modes[i] == "none":
            batches.append(
                PerAgentBatch(
                    agent=i,
                    obs=[o.copy() for o in window.obs_t()],
                    actions=[a.copy() for a in window.actions],
                    rewards=window.rewards,
                    next_obs=[o.copy() for o in window.next_obs],
                    done=window.done,
                    fingerprint=window.fingerprint,
                )
            )
        else:
            batches.append(per_agent_restore(shared[modes[i]], window, i, layout))
    return batches
