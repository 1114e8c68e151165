"""Command-line harness: train, eval, correlation, plot, covert-nokey.

Run configs are JSON with a strict schema; unknown keys are rejected.
Outputs per run directory: manifest.json, metrics.csv, checkpoints, plots.
"""

from __future__ import annotations

import argparse
import csv
import json
import time
from pathlib import Path

import numpy as np

import commrl
from commrl import analysis
from commrl.checkpoint import load_checkpoint
from commrl.env import make_scenario, scenario_from_config
from commrl.trainer import TrainConfig, Trainer
from commrl.rng import RngStream

VARIANTS = ("maddpg", "maddpg+fp", "maddpg+fcc", "maddpg+occ")

_RUN_KEYS = {"scenario", "variant", "train", "seeds", "out",
             "checkpoint_every", "early_snapshot_steps", "eval_episodes"}
_TRAIN_KEYS = {"lr", "tau", "gamma", "batch_size", "update_every", "buffer_capacity",
               "episodes", "K", "grad_clip", "hidden", "gumbel_beta"}


class ConfigError(ValueError):
    pass


def _check_keys(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _variant_flags(variant: str) -> tuple[str, bool]:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; known: {VARIANTS}")
    mode = {"maddpg": "none", "maddpg+fp": "none",
            "maddpg+fcc": "fcc", "maddpg+occ": "occ"}[variant]
    return mode, variant == "maddpg+fp"


def parse_run_config(cfg: dict) -> dict:
    _check_keys(cfg, _RUN_KEYS, "run config")
    for key in ("scenario", "variant", "seeds", "out"):
        if key not in cfg:
            raise ConfigError(f"run config requires {key!r}")
    scenario = scenario_from_config(cfg["scenario"])
    train_cfg = dict(cfg.get("train", {}))
    _check_keys(train_cfg, _TRAIN_KEYS, "train config")
    if "hidden" in train_cfg:
        train_cfg["hidden"] = tuple(train_cfg["hidden"])

    variant = cfg["variant"]
    if isinstance(variant, dict):
        # per-team assignment (competitive scenarios only)
        _check_keys(variant, {"allies", "adversary"}, "variant")
        if scenario.name != "covert_comm":
            raise ConfigError("per-team variants are only valid for covert_comm")
        ally_mode, ally_fp = _variant_flags(variant["allies"])
        adv_mode, adv_fp = _variant_flags(variant["adversary"])
        modes = [adv_mode if a.role == "adversary" else ally_mode
                 for a in scenario.agents]
        fps = [adv_fp if a.role == "adversary" else ally_fp
               for a in scenario.agents]
        variant_label = f"allies={variant['allies']},adversary={variant['adversary']}"
    else:
        mode, fp = _variant_flags(variant)
        modes, fps = mode, fp
        variant_label = variant
    return {
        "scenario": scenario,
        "scenario_cfg": cfg["scenario"],
        "modes": modes,
        "fingerprint": fps,
        "train": train_cfg,
        "seeds": list(cfg["seeds"]),
        "out": Path(cfg["out"]),
        "checkpoint_every": int(cfg.get("checkpoint_every", 0)),
        "early_snapshot_steps": int(cfg.get("early_snapshot_steps", 0)),
        "variant_label": variant_label,
    }


def report_scale(scenario_name: str) -> float:
    """Per-scenario reward reporting scale applied by eval/plots:
    per-step average for the covert game, per-agent for multi-target."""
    if scenario_name == "covert_comm":
        return 1.0 / 25.0
    if scenario_name == "multi_target_comm":
        return 1.0 / 3.0
    return 1.0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def run_training(cfg: dict) -> Path:
    out: Path = cfg["out"]
    out.mkdir(parents=True, exist_ok=True)
    scenario = cfg["scenario"]
    agent_names = [a.name for a in scenario.agents]
    manifest = {
        "version": commrl.__version__,
        "variant": cfg["variant_label"],
        "scenario": cfg["scenario_cfg"],
        "train": cfg["train"],
        "seeds": cfg["seeds"],
        "status": {str(s): "pending" for s in cfg["seeds"]},
        "timings_s": {},
        "files": [],
    }
    metrics_path = out / "metrics.csv"

    # resume: keep completed seeds from an interrupted run of the same config
    kept_rows: list[list[str]] = []
    prev_path = out / "manifest.json"
    if prev_path.exists() and metrics_path.exists():
        prev = json.loads(prev_path.read_text())
        norm = json.loads(json.dumps(manifest))
        same = all(prev.get(k) == norm[k]
                   for k in ("variant", "scenario", "train", "seeds"))
        if same:
            done = {s for s, st in prev["status"].items() if st == "done"}
            with open(metrics_path, newline="") as fh:
                for row in list(csv.reader(fh))[1:]:
                    if row and row[0] in done:
                        kept_rows.append(row)
            for s in done:
                manifest["status"][s] = "done"
                manifest["timings_s"][s] = prev["timings_s"].get(s)
            manifest["files"] = [f for f in prev.get("files", [])
                                 if f != "metrics.csv"]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))

    cols = (["seed", "episode"]
            + [f"return_{n}" for n in agent_names]
            + ["team_return"]
            + [f"critic_loss_{n}" for n in agent_names]
            + [f"policy_obj_{n}" for n in agent_names])
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        writer.writerows(kept_rows)
        for seed in cfg["seeds"]:
            if manifest["status"][str(seed)] == "done":
                continue
            t0 = time.monotonic()
            tc = TrainConfig(seed=seed, mode=cfg["modes"],
                             fingerprint=cfg["fingerprint"], **cfg["train"])
            trainer = Trainer(scenario, tc)

            def emit(row):
                writer.writerow(
                    [seed, row["episode"]]
                    + [repr(float(r)) for r in row["returns"]]
                    + [repr(float(row["returns"][0]))]
                    + [repr(float(v)) for v in row["critic_loss"]]
                    + [repr(float(v)) for v in row["policy_obj"]]
                )

            trainer.run(on_episode=emit)
            ckpt = out / f"checkpoint_seed{seed}.npz"
            trainer.save(ckpt, extra_meta={"variant": cfg["variant_label"]},
                         buffer_snapshot_steps=cfg["early_snapshot_steps"])
            manifest["status"][str(seed)] = "done"
            manifest["timings_s"][str(seed)] = round(time.monotonic() - t0, 3)
            manifest["files"].append(ckpt.name)
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    manifest["files"].append("metrics.csv")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def cmd_train(args) -> Path:
    cfg = parse_run_config(json.loads(Path(args.config).read_text()))
    if args.out:
        cfg["out"] = Path(args.out)
    if args.seeds:
        cfg["seeds"] = [int(s) for s in args.seeds.split(",")]
    return run_training(cfg)


def cmd_covert_nokey(args) -> Path:
    raw = json.loads(Path(args.config).read_text())
    sc = dict(raw.get("scenario", {}))
    if sc.get("name") != "covert_comm":
        raise ConfigError("covert-nokey requires a covert_comm scenario")
    sc["include_key"] = False
    raw["scenario"] = sc
    cfg = parse_run_config(raw)
    if args.out:
        cfg["out"] = Path(args.out)
    out = run_training(cfg)
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["random_adversary_reference"] = 0.5
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def scenario_from_meta(meta: dict, drop_p: float | None = None) -> object:
    name = meta["scenario"]
    if name == "coop_comm":
        return make_scenario(name, n_landmarks=meta["n_landmarks"],
                             drop_p=meta["drop_p"] if drop_p is None else drop_p)
    if name == "hierarchical_comm":
        return make_scenario(name)
    if name == "covert_comm":
        return make_scenario(name, **meta["scenario_options"])
    if name == "multi_target_comm":
        return make_scenario(name, n_landmarks=meta["n_landmarks"])
    raise ConfigError(f"checkpoint has unknown scenario {name!r}")


def load_policies(ckpt):
    n = len([k for k in ckpt.nets if k.startswith("policy")])
    return [ckpt.nets[f"policy{i}"] for i in range(n)]


def evaluate_checkpoint(checkpoint_path, episodes: int, drop_ps: list[float] | None,
                        out_path, seed: int = 12345) -> list[dict]:
    from commrl.env import Env
    from commrl.trainer import act

    ckpt = load_checkpoint(checkpoint_path)
    meta = ckpt.meta
    policies = load_policies(ckpt)
    rows = []
    sweep = drop_ps if drop_ps is not None else [None]
    for dp in sweep:
        scenario = scenario_from_meta(meta, drop_p=dp)
        if len(policies) != scenario.n_agents:
            raise ConfigError("checkpoint/scenario mismatch: agent count differs")
        for i, p in enumerate(policies):
            if p.layer_sizes[0] != scenario.layout.obs_dims[i]:
                raise ConfigError(
                    f"checkpoint/scenario mismatch: agent {i} expects obs dim "
                    f"{p.layer_sizes[0]}, scenario provides {scenario.layout.obs_dims[i]}"
                )
        rng = RngStream(seed)
        env = Env(scenario, rng)
        returns = np.zeros((episodes, scenario.n_agents))
        for ep in range(episodes):
            obs = env.reset()
            done = False
            while not done:
                actions = [
                    act(policies[i], obs[i], rng, explore=False,
                        blocks=scenario.layout.action_blocks(i))
                    for i in range(scenario.n_agents)
                ]
                obs, r, done = env.step(actions)
                returns[ep] += r
        scaled = returns[:, 0] * report_scale(meta["scenario"])
        rows.append({
            "drop_p": meta["drop_p"] if dp is None else dp,
            "episodes": episodes,
            "mean_return": float(scaled.mean()),
            "sem_return": float(scaled.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0,
        })
    if out_path:
        with open(out_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["drop_p", "episodes", "mean_return", "sem_return"])
            w.writeheader()
            w.writerows(rows)
    return rows


def cmd_eval(args):
    drop_ps = [float(x) for x in args.drop_p.split(",")] if args.drop_p else None
    out = args.out or "eval.csv"
    return evaluate_checkpoint(args.checkpoint, args.episodes, drop_ps, out)


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------


def cmd_correlation(args):
    ckpt = load_checkpoint(args.checkpoint)
    snapshot = {k[len("buffer/"):]: v for k, v in ckpt.arrays.items()
                if k.startswith("buffer/")}
    if not snapshot:
        raise ConfigError("checkpoint carries no buffer snapshot for correlation")
    scenario = scenario_from_meta(ckpt.meta)
    policies = load_policies(ckpt)
    rng = RngStream(args.seed)
    result = analysis.correlation_analysis(policies, scenario, snapshot, rng)
    out = Path(args.out or "correlation")
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_correlation_csv(out / "correlation.csv", result)
    with open(out / "distances.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["set", "frobenius_to_fresh"])
        for name, d in result["distances"].items():
            w.writerow([name, f"{d:.10g}"])
    _plot_correlation(result, out / "correlation.svg")
    return result


def _plot_correlation(result: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = ["fresh", "uncorrected", "fcc", "occ"]
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 4))
    for ax, name in zip(axes, names):
        corr, _ = result["matrices"][name]
        im = ax.imshow(corr, vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_title(f"{name} (d={result['distances'][name]:.3g})")
    fig.colorbar(im, ax=axes, shrink=0.8)
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run_dir)
    rows = list(csv.DictReader(open(run_dir / "metrics.csv")))
    if not rows:
        raise ConfigError(f"{run_dir}/metrics.csv is empty")
    if "team_return" not in rows[0]:
        raise ConfigError("metrics.csv is missing the team_return column")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    scale = report_scale(manifest["scenario"]["name"])
    seeds = sorted({int(r["seed"]) for r in rows})
    per_seed = []
    for s in seeds:
        vals = [float(r["team_return"]) * scale for r in rows if int(r["seed"]) == s]
        per_seed.append(np.array(vals))
    window = args.window
    traces, mean_c, sem_c = analysis.aggregate_curves(per_seed, window)
    x = np.arange(len(mean_c))

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    ax1.plot(x, mean_c, label=manifest.get("variant", "run"))
    ax1.fill_between(x, mean_c - sem_c, mean_c + sem_c, alpha=0.3)
    ax1.set_xlabel("episode")
    ax1.set_ylabel("reward")
    ax1.set_title(f"mean +/- sem over {len(seeds)} seeds (window={window})")
    ax1.legend()
    for s, tr in zip(seeds, traces):
        ax2.plot(x, tr, lw=0.8, label=f"seed {s}")
    ax2.set_xlabel("episode")
    ax2.set_title("individual seed traces")
    fig.tight_layout()
    out = run_dir / "reward_curves.svg"
    fig.savefig(out, metadata={"Description": f"smoothing window {window} episodes"})
    plt.close(fig)
    return out


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None):
    p = argparse.ArgumentParser(prog="commrl")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="run training per config")
    t.add_argument("--config", required=True)
    t.add_argument("--seeds", help="comma-separated override")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=5000)
    e.add_argument("--drop-p", dest="drop_p", help="comma-separated sweep")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("correlation", help="message correlation analysis")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_correlation)

    pl = sub.add_parser("plot", help="reward curves for a run directory")
    pl.add_argument("run_dir")
    pl.add_argument("--window", type=int, default=500)
    pl.set_defaults(fn=cmd_plot)

    ck = sub.add_parser("covert-nokey", help="covert game without the shared key")
    ck.add_argument("--config", required=True)
    ck.add_argument("--out")
    ck.set_defaults(fn=cmd_covert_nokey)

    args = p.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
