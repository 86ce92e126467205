"""Parametric unmasking posteriors: a tabular softmax model and a small MLP.

Both map a batch of partially masked sequences (n, L) to logits (n, L, |V|)
and backpropagate an upstream gradient on those logits into one flat
parameter vector. Parameter arrays are views into that vector, so in-place
updates of ``model.params`` are seen by every view.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .core import make_rng
from .oracle import STATE_CAP, state_rank


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


class _FlatParams:
    """Allocates named arrays as views into one flat float64 vector."""

    def _allocate(self, shapes: dict[str, tuple[int, ...]]) -> None:
        sizes = [int(np.prod(s)) for s in shapes.values()]
        self.params = np.zeros(sum(sizes))
        self._layout = []
        start = 0
        for (name, shape), size in zip(shapes.items(), sizes):
            self._layout.append((name, start, shape))
            setattr(self, name, self.params[start:start + size].reshape(shape))
            start += size

    def _grad_views(self, grad):
        return {name: grad[start:start + int(np.prod(shape))].reshape(shape)
                for name, start, shape in self._layout}

    def __deepcopy__(self, memo):
        new = object.__new__(type(self))
        for k, v in self.__dict__.items():
            if k not in ("params",) and not isinstance(v, np.ndarray):
                setattr(new, k, copy.deepcopy(v, memo))
        new.params = self.params.copy()
        for name, start, shape in self._layout:
            setattr(new, name, new.params[start:start + int(np.prod(shape))].reshape(shape))
        return new

    @property
    def n_params(self) -> int:
        return self.params.size


class TabularModel(_FlatParams):
    """One logit vector per (state, position) on an enumerable space."""

    kind = "tabular"

    def __init__(self, vocab_size: int, length: int, logits=None):
        if (vocab_size + 1) ** length > 50 * STATE_CAP:
            raise ValueError("state space too large for a tabular model")
        self.vocab_size = vocab_size
        self.length = length
        n_states = (vocab_size + 1) ** length
        self._allocate({"table": (n_states, length, vocab_size)})
        if logits is not None:
            self.table[...] = logits

    @classmethod
    def from_probs(cls, probs, floor: float = 1e-300) -> "TabularModel":
        probs = np.asarray(probs)
        return cls(probs.shape[2], probs.shape[1], np.log(np.maximum(probs, floor)))

    def descriptor(self) -> dict:
        return {"kind": self.kind, "vocab_size": self.vocab_size, "length": self.length}

    def logits(self, x, return_cache: bool = False):
        ranks = state_rank(x, self.vocab_size)
        out = self.table[ranks]
        return (out, ranks) if return_cache else out

    def backward(self, ranks, dlogits) -> np.ndarray:
        grad = np.zeros_like(self.params)
        g = grad.reshape(self.table.shape)
        np.add.at(g, np.asarray(ranks).reshape(-1), dlogits.reshape(-1, *self.table.shape[1:]))
        return grad

    def probs_table(self) -> np.ndarray:
        return softmax(self.table)


@dataclass
class NeuralConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    window: int = 1
    init_scale: float = 1.0


class NeuralModel(_FlatParams):
    """Token+position embeddings, a global tanh layer over the flattened
    sequence, a per-position tanh layer that sees the global features and a
    local window of embeddings, and a shared output projection to |V| logits.
    """

    kind = "neural"

    def __init__(self, vocab_size: int, length: int, config: NeuralConfig | None = None,
                 seed=0):
        self.vocab_size = vocab_size
        self.length = length
        self.config = config or NeuralConfig()
        d, hdim, w = self.config.embed_dim, self.config.hidden_dim, self.config.window
        self._allocate({
            "tok": (vocab_size + 1, d),
            "pos": (length, d),
            "w1": (length * d, hdim),
            "b1": (hdim,),
            "w2": (hdim, hdim),
            "u2": (2 * w + 1, d, hdim),
            "b2": (hdim,),
            "wout": (hdim, vocab_size),
            "bout": (vocab_size,),
        })
        rng = make_rng(seed)
        s = self.config.init_scale
        self.tok[...] = rng.normal(0, s / np.sqrt(d), self.tok.shape)
        self.pos[...] = rng.normal(0, s / np.sqrt(d), self.pos.shape)
        self.w1[...] = rng.normal(0, s / np.sqrt(length * d), self.w1.shape)
        self.w2[...] = rng.normal(0, s / np.sqrt(hdim), self.w2.shape)
        self.u2[...] = rng.normal(0, s / np.sqrt(d * (2 * w + 1)), self.u2.shape)
        self.wout[...] = rng.normal(0, s / np.sqrt(hdim), self.wout.shape)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "vocab_size": self.vocab_size, "length": self.length,
                **asdict(self.config)}

    def _shifted(self, e, o):
        """e shifted so row i holds e[i + o] (zeros off the ends)."""
        out = np.zeros_like(e)
        L = e.shape[1]
        if o >= 0:
            out[:, :L - o] = e[:, o:]
        else:
            out[:, -o:] = e[:, :L + o]
        return out

    def logits(self, x, return_cache: bool = False):
        x = np.asarray(x)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        n, L = x.shape
        w = self.config.window
        e = self.tok[x] + self.pos[None]
        g = np.tanh(e.reshape(n, -1) @ self.w1 + self.b1)
        a2 = (g @ self.w2)[:, None, :] + self.b2
        for k, o in enumerate(range(-w, w + 1)):
            a2 = a2 + self._shifted(e, o) @ self.u2[k]
        z = np.tanh(a2)
        out = z @ self.wout + self.bout
        if squeeze:
            out = out[0]
        if return_cache:
            return out, (x, e, g, z, squeeze)
        return out

    def backward(self, cache, dlogits) -> np.ndarray:
        x, e, g, z, squeeze = cache
        dlogits = np.asarray(dlogits)
        if squeeze:
            dlogits = dlogits[None]
        n, L = x.shape
        w = self.config.window
        grad = np.zeros_like(self.params)
        gv = self._grad_views(grad)
        gv["wout"][...] = np.einsum("nlh,nlv->hv", z, dlogits)
        gv["bout"][...] = dlogits.sum(axis=(0, 1))
        da2 = (dlogits @ self.wout.T) * (1.0 - z * z)
        gv["b2"][...] = da2.sum(axis=(0, 1))
        da2_sum = da2.sum(axis=1)
        gv["w2"][...] = g.T @ da2_sum
        dg = da2_sum @ self.w2.T
        de = np.zeros_like(e)
        for k, o in enumerate(range(-w, w + 1)):
            gv["u2"][k] = np.einsum("nld,nlh->dh", self._shifted(e, o), da2)
            # row i used e[i + o]; route its gradient back by the opposite shift
            de += self._shifted(da2 @ self.u2[k].T, -o)
        da1 = dg * (1.0 - g * g)
        gv["b1"][...] = da1.sum(axis=0)
        eflat = e.reshape(n, -1)
        gv["w1"][...] = eflat.T @ da1
        de += (da1 @ self.w1.T).reshape(e.shape)
        gv["pos"][...] = de.sum(axis=0)
        np.add.at(gv["tok"], x.reshape(-1), de.reshape(-1, e.shape[-1]))
        return grad


def forward(model, x, temperature: float = 1.0) -> np.ndarray:
    """Per-position simplexes, shape (..., L, |V|). Temperature 0 is argmax."""
    z = model.logits(x)
    if temperature < 0:
        raise ValueError("temperature must be nonnegative")
    if temperature == 0:
        return np.eye(z.shape[-1])[np.argmax(z, axis=-1)]
    return softmax(z / temperature)


def weighted_ce_grad(model, x, i: int, target, weight: float) -> np.ndarray:
    """weight * grad of -sum_v target(v) log pi_theta(v | x, i)."""
    x = np.asarray(x)
    if x[i] != model.vocab_size:
        raise ValueError(f"position {i} is not masked")
    target = np.asarray(target, dtype=float)
    z, cache = model.logits(x[None], return_cache=True)
    p = softmax(z[0, i])
    dlogits = np.zeros_like(z)
    dlogits[0, i] = weight * (target.sum() * p - target)
    return model.backward(cache, dlogits)


def weighted_ce(model, x, i: int, target, weight: float) -> float:
    z = model.logits(np.asarray(x)[None])[0, i]
    return float(-weight * np.dot(target, log_softmax(z)))


def clone_frozen(model):
    return copy.deepcopy(model)


class Adam:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.99), eps: float = 1e-8,
                 weight_decay: float = 0.1, clip: float | None = 2.0):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.clip = weight_decay, clip
        self.reset()

    def reset(self):
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> float:
        norm = float(np.linalg.norm(grad))
        if self.clip is not None and norm > self.clip:
            grad = grad * (self.clip / norm)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        params *= 1.0 - self.lr * self.weight_decay
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return norm


class SGD:
    def __init__(self, lr: float = 1.0, clip: float | None = None):
        self.lr, self.clip = lr, clip

    def reset(self):
        pass

    def step(self, params, grad) -> float:
        norm = float(np.linalg.norm(grad))
        if self.clip is not None and norm > self.clip:
            grad = grad * (self.clip / norm)
        params -= self.lr * grad
        return norm


_MAGIC = b"DTMCKPT\x00"
_VERSION = 1


def save_checkpoint(model, path) -> None:
    desc = json.dumps(model.descriptor(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(desc)))
        f.write(desc)
        f.write(struct.pack("<IIQ", model.vocab_size, model.length, model.n_params))
        f.write(model.params.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        version, n = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        desc = json.loads(f.read(n))
        vocab_size, length, n_params = struct.unpack("<IIQ", f.read(16))
        params = np.frombuffer(f.read(8 * n_params), dtype="<f8")
    if desc["kind"] == "tabular":
        model = TabularModel(vocab_size, length)
    elif desc["kind"] == "neural":
        cfg = NeuralConfig(**{k: desc[k] for k in NeuralConfig.__dataclass_fields__})
        model = NeuralModel(vocab_size, length, cfg)
    else:
        raise ValueError(f"unknown architecture {desc['kind']!r}")
    if params.size != model.n_params:
        raise ValueError("checkpoint parameter count does not match its architecture")
    model.params[:] = params
    return model
