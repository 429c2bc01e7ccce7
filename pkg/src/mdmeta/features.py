"""Small tanh MLPs: the feature network Y_hat(q, qd) and surrogate disturbance nets."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffengine as ad


@dataclass
class MlpParams:
    architecture: tuple
    weights: list
    biases: list
    seed: int | None = None

    @property
    def size(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(np.ravel(W))
            parts.append(np.ravel(b))
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, flat, architecture, seed=None) -> "MlpParams":
        Ws, bs = split_flat(np.asarray(flat, dtype=float), architecture)
        return cls(tuple(architecture), [np.array(W) for W in Ws], [np.array(b) for b in bs], seed)

    def to_dict(self, **extra) -> dict:
        out = {
            "architecture": list(self.architecture),
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(self.weights, self.biases)],
            "seed": self.seed,
        }
        out.update(extra)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpParams":
        arch = tuple(doc["architecture"])
        Ws = [np.asarray(layer["W"], dtype=float) for layer in doc["layers"]]
        bs = [np.asarray(layer["b"], dtype=float) for layer in doc["layers"]]
        for k, (W, b) in enumerate(zip(Ws, bs)):
            if W.shape != (arch[k], arch[k + 1]) or b.shape != (arch[k + 1],):
                raise ValueError(f"layer {k} does not match architecture {arch}")
        return cls(arch, Ws, bs, doc.get("seed"))


def layer_shapes(architecture):
    return [((a, b), (b,)) for a, b in zip(architecture[:-1], architecture[1:])]


def param_count(architecture) -> int:
    return sum(a * b + b for a, b in zip(architecture[:-1], architecture[1:]))


def split_flat(flat, architecture):
    """Slice a flat vector (array or Var) into per-layer weights and biases."""
    Ws, bs = [], []
    k = 0
    for (wshape, bshape) in layer_shapes(architecture):
        nw = wshape[0] * wshape[1]
        Ws.append(ad.reshape(ad.take(flat, slice(k, k + nw)), wshape))
        k += nw
        bs.append(ad.take(flat, slice(k, k + bshape[0])))
        k += bshape[0]
    if k != (flat.shape[0] if not isinstance(flat, ad.Var) else flat.value.shape[0]):
        raise ValueError("flat parameter vector does not match architecture")
    return Ws, bs


def init_mlp(seed, architecture) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for (fan_in, fan_out), _ in layer_shapes(architecture):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        Ws.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(tuple(architecture), Ws, bs, seed if isinstance(seed, int) else None)


def mlp_apply(Ws, bs, x):
    """tanh hidden layers, linear output.

    Weights of shape (in, out) are shared across the batch; weights of shape
    (B, in, out) apply one network per batch row of ``x`` (B, in).
    """
    return ad.mlp(x, Ws, bs)


def state_input(q, qd):
    return ad.concat([q, qd], axis=-1)


def feature_net(Ws, bs, q, qd, d: int, n: int = 3):
    """Y_hat(q, qd) reshaped row-major to (..., n, d)."""
    if Ws[0].shape[-2] != 2 * n:
        raise ValueError("feature net expects a (q, qd) input of size 2n")
    if Ws[-1].shape[-1] != n * d:
        raise ValueError(f"feature net output size {Ws[-1].shape[-1]} != n*d = {n * d}")
    out = mlp_apply(Ws, bs, state_input(q, qd))
    lead = tuple(out.shape[:-1])
    return ad.reshape(out, lead + (n, d))


def surrogate_net(Ws, bs, q, qd):
    if Ws[-1].shape[-1] != 3:
        raise ValueError("surrogate net must output 3 values")
    return mlp_apply(Ws, bs, state_input(q, qd))


def save_model(path, params: MlpParams, **extra):
    with open(path, "w") as fh:
        json.dump(params.to_dict(**extra), fh)


def load_model(path) -> tuple[MlpParams, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    return MlpParams.from_dict(doc), doc


def stack_params(params: list[MlpParams]):
    """Per-row weight stacks for evaluating several networks in one batch."""
    Ws = [np.stack([p.weights[k] for p in params]) for k in range(len(params[0].weights))]
    bs = [np.stack([p.biases[k] for p in params]) for k in range(len(params[0].biases))]
    return Ws, bs


def linf_bound(params: MlpParams) -> float:
    """Upper bound on max |output| given tanh-bounded penultimate activations."""
    W, b = params.weights[-1], params.biases[-1]
    return float(np.max(np.abs(W).sum(axis=0)) + np.max(np.abs(b)))
