"""Versioned checkpoint container (npz + embedded json metadata).

All arrays are stored as 64-bit floats in declared order and round-trip
bit-exactly. Layout, version 1:

  meta                json string: {"version": 1, "nets": {...}, "extra": {...}}
  net/<name>/w<l>     weight array of layer l
  net/<name>/b<l>     bias array of layer l
  opt/<name>/m<l>     Adam first moments, one per leaf (weights then biases)
  opt/<name>/v<l>     Adam second moments
  arr/<key>           caller-provided arrays
"""

from __future__ import annotations

import json

import numpy as np

from commrl.nn import AdamState, MLPParams, Tensor

FORMAT_VERSION = 1


def save_checkpoint(
    path,
    nets: dict[str, MLPParams],
    opts: dict[str, AdamState] | None = None,
    arrays: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    opts = opts or {}
    arrays = arrays or {}
    payload: dict[str, np.ndarray] = {}
    net_meta = {}
    for name, p in nets.items():
        net_meta[name] = {"layer_sizes": p.layer_sizes, "activation": p.activation}
        for l, (w, b) in enumerate(zip(p.weights, p.biases)):
            payload[f"net/{name}/w{l}"] = np.asarray(w.data, dtype=np.float64)
            payload[f"net/{name}/b{l}"] = np.asarray(b.data, dtype=np.float64)
    opt_meta = {}
    for name, s in opts.items():
        opt_meta[name] = {
            "step": s.step, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
        }
        for l, (m, v) in enumerate(zip(s.m, s.v)):
            payload[f"opt/{name}/m{l}"] = np.asarray(m, dtype=np.float64)
            payload[f"opt/{name}/v{l}"] = np.asarray(v, dtype=np.float64)
    for key, a in arrays.items():
        payload[f"arr/{key}"] = np.asarray(a)
    header = {
        "version": FORMAT_VERSION,
        "nets": net_meta,
        "opts": opt_meta,
        "extra": meta or {},
    }
    payload["meta"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **payload)


class Checkpoint:
    def __init__(self, nets, opts, arrays, meta):
        self.nets: dict[str, MLPParams] = nets
        self.opts: dict[str, AdamState] = opts
        self.arrays: dict[str, np.ndarray] = arrays
        self.meta: dict = meta


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as z:
        header = json.loads(bytes(z["meta"]).decode("utf-8"))
        if header["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        nets = {}
        for name, info in header["nets"].items():
            sizes = info["layer_sizes"]
            weights = [Tensor(z[f"net/{name}/w{l}"]) for l in range(len(sizes) - 1)]
            biases = [Tensor(z[f"net/{name}/b{l}"]) for l in range(len(sizes) - 1)]
            nets[name] = MLPParams(sizes, weights, biases, info["activation"])
        opts = {}
        for name, info in header["opts"].items():
            n_leaves = 2 * (len(header["nets"][name]["layer_sizes"]) - 1)
            # leaves are ordered weights then biases; moments stored per leaf
            m = [z[f"opt/{name}/m{l}"] for l in range(n_leaves)]
            v = [z[f"opt/{name}/v{l}"] for l in range(n_leaves)]
            opts[name] = AdamState(
                m=m, v=v, step=info["step"], lr=info["lr"],
                beta1=info["beta1"], beta2=info["beta2"], eps=info["eps"],
            )
        arrays = {k[4:]: z[k] for k in z.files if k.startswith("arr/")}
        return Checkpoint(nets, opts, arrays, header["extra"])
