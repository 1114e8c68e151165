"""Post-hoc analyses: message correlation structure and reward curves."""

from __future__ import annotations

import csv

import numpy as np

from commrl.env import ChannelModel, Scenario, transmit
from commrl.layout import JointLayout
from commrl.nn import MLPParams
from commrl.relabel import fcc_relabel, occ_relabel, sample_messages
from commrl.replay import ReplayBuffer
from commrl.rng import RngStream

ZERO_VAR_TOL = 1e-12


def joint_message_vector(layout: JointLayout, actions: list[np.ndarray]) -> np.ndarray:
    """Concatenated message blocks of all senders, ordered (sender, edge)."""
    parts = []
    for i in layout.senders():
        for e in layout.owned_out_edges(i):
            parts.append(actions[i][..., layout.act_msg_slice(i, e)])
    return np.concatenate(parts, axis=-1)


def correlation_matrix(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson correlation with a mask for zero-variance components.

    Returns (corr, mask); masked rows/columns are zeroed, diagonal kept 1
    on unmasked entries.
    """
    std = samples.std(axis=0)
    mask = std > ZERO_VAR_TOL
    d = samples.shape[1]
    corr = np.zeros((d, d))
    if mask.sum() >= 1:
        sub = np.corrcoef(samples[:, mask], rowvar=False)
        sub = np.atleast_2d(sub)
        idx = np.flatnonzero(mask)
        corr[np.ix_(idx, idx)] = sub
    return corr, mask


def frobenius_distance(
    c1: np.ndarray, m1: np.ndarray, c2: np.ndarray, m2: np.ndarray
) -> float:
    """Frobenius distance restricted to components unmasked in both."""
    common = m1 & m2
    idx = np.flatnonzero(common)
    diff = c1[np.ix_(idx, idx)] - c2[np.ix_(idx, idx)]
    return float(np.sqrt(np.sum(diff * diff)))


def replay_messages(
    policies: list[MLPParams],
    layout: JointLayout,
    channel: ChannelModel,
    episodes: dict[int, dict],
    rng: RngStream,
    greedy: bool = True,
) -> np.ndarray:
    """Run current policies forward over stored episodes' environment
    observations, regenerating every message; returns per-step joint
    message vectors (concatenated in buffer order)."""
    out = []
    for ep in sorted(episodes):
        data = episodes[ep]
        T = data["obs"][0].shape[0]
        slots = {idx: np.zeros(e.dim) for idx, e in enumerate(layout.edges)}
        for t in range(T):
            obs = []
            for i in range(layout.n_agents):
                env_part = data["obs"][i][t][layout.obs_env_slice(i)]
                obs.append(layout.concat_obs(i, env_part, slots))
            msgs = sample_messages(policies, layout, obs, rng, greedy=greedy)
            row = []
            for i in layout.senders():
                for e in layout.owned_out_edges(i):
                    row.append(msgs[e])
            out.append(np.concatenate(row))
            owner = {idx: (idx if layout.edges[idx].tie is None else layout.edges[idx].tie)
                     for idx in range(len(layout.edges))}
            slots = {idx: transmit(channel, msgs[owner[idx]], rng)
                     for idx in range(len(layout.edges))}
    return np.array(out)


def _group_episodes(layout: JointLayout, arrays: dict) -> dict[int, dict]:
    episodes: dict[int, dict] = {}
    ep_ids = arrays["episode"]
    for ep in np.unique(ep_ids):
        sel = ep_ids == ep
        order = np.argsort(arrays["step"][sel])
        episodes[int(ep)] = {
            "obs": [arrays[f"obs{i}"][sel][order] for i in range(layout.n_agents)],
            "act": [arrays[f"act{i}"][sel][order] for i in range(layout.n_agents)],
        }
    return episodes


def correlation_analysis(
    policies: list[MLPParams],
    scenario: Scenario,
    snapshot: dict[str, np.ndarray],
    rng: RngStream,
    K: int | None = None,
    greedy: bool = True,
) -> dict:
    """Correlation matrices over joint message vectors for four sample sets:

      fresh        current policies replayed over the snapshot episodes
      uncorrected  the stored early-training samples as-is
      fcc          the same samples after the one-step correction
      occ          after the ordered correction (depth: nilpotency - 1)

    plus pairwise Frobenius distances to the fresh reference.
    """
    layout = scenario.layout
    graph = layout.comm_graph()
    K = graph.k_exact if K is None else K
    buf = ReplayBuffer.from_arrays(layout, snapshot)
    indices = np.arange(len(buf))
    window = buf.sample_window(rng, K=max(K, 1), indices=indices)

    stored = joint_message_vector(layout, window.actions)
    rel_occ = occ_relabel(window, policies, scenario.channel, layout, rng, greedy=greedy)
    rel_fcc = fcc_relabel(window, policies, scenario.channel, layout, rng, greedy=greedy)
    occ_vec = joint_message_vector(layout, rel_occ.actions)
    fcc_vec = joint_message_vector(layout, rel_fcc.actions)
    fresh = replay_messages(
        policies, layout, scenario.channel, _group_episodes(layout, snapshot),
        rng, greedy=greedy,
    )

    sets = {"fresh": fresh, "uncorrected": stored, "fcc": fcc_vec, "occ": occ_vec}
    mats = {name: correlation_matrix(x) for name, x in sets.items()}
    ref_c, ref_m = mats["fresh"]
    dists = {
        name: frobenius_distance(ref_c, ref_m, c, m)
        for name, (c, m) in mats.items()
    }
    return {"matrices": mats, "distances": dists, "vectors": sets}


def write_correlation_csv(path, result: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for name, (corr, mask) in result["matrices"].items():
            w.writerow([f"# matrix {name}", f"masked={np.flatnonzero(~mask).tolist()}"])
            for row in corr:
                w.writerow([f"{v:.10g}" for v in row])
        w.writerow(["# frobenius distances to fresh"])
        for name, d in result["distances"].items():
            w.writerow([name, f"{d:.10g}"])


# ---------------------------------------------------------------------------
# Reward curve aggregation
# ---------------------------------------------------------------------------


def smooth(x: np.ndarray, window: int) -> np.ndarray:
    """Windowed mean with a growing warm-up window (output same length)."""
    if window <= 1:
        return np.asarray(x, dtype=float)
    c = np.cumsum(np.insert(np.asarray(x, dtype=float), 0, 0.0))
    out = np.empty(len(x))
    for i in range(len(x)):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def aggregate_curves(per_seed: list[np.ndarray], window: int = 1):
    """Smoothed per-seed traces plus mean and standard error in the mean."""
    traces = np.stack([smooth(s, window) for s in per_seed])
    mean = traces.mean(axis=0)
    sem = (traces.std(axis=0, ddof=1) / np.sqrt(traces.shape[0])
           if traces.shape[0] > 1 else np.zeros_like(mean))
    return traces, mean, sem
