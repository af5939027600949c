"""Minimal reverse-mode machinery for small dense networks (f64 throughout).

Parameters of a model live in one flat vector (:class:`ParamTape`) addressed
by named slices, with a parallel gradient accumulator.  Layers hold names, not
arrays, so checkpointing and the optimizer never special-case architectures.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError, SchemaError

_MAGIC = b"IFSNN1"

# exact Lipschitz constants of the supported activations
_GELU_LIP = None  # filled below


def _phi(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softplus":
        return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "gelu":
        return 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))
    raise ConfigError(f"unknown activation {name!r}")


def _act_deriv(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "softplus":
        return 1.0 / (1.0 + np.exp(-z))
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "gelu":
        return 0.5 * (1.0 + erf(z / np.sqrt(2.0))) + z * _phi(z)
    raise ConfigError(f"unknown activation {name!r}")


def softmax_backward_rows(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Adjoint of a row softmax: dlogits given outputs s and upstream ds."""
    return s * (ds - (ds * s).sum(axis=-1, keepdims=True))


def activation_lipschitz(name: str) -> float:
    if name in ("relu", "softplus", "tanh"):
        return 1.0
    if name == "gelu":
        global _GELU_LIP
        if _GELU_LIP is None:
            s = np.sqrt(2.0)
            _GELU_LIP = float(0.5 * (1.0 + erf(1.0)) + s * _phi(s))
        return _GELU_LIP
    raise ConfigError(f"unknown activation {name!r}")


class ParamTape:
    """Flat parameter vector with named slices and a gradient accumulator."""

    def __init__(self):
        self._pending: list[tuple[str, tuple[int, ...], np.ndarray]] = []
        self.values: np.ndarray | None = None
        self.grads: np.ndarray | None = None
        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}

    def alloc(self, name: str, shape: tuple[int, ...], init: np.ndarray) -> str:
        if self.values is not None:
            raise ConfigError("tape already frozen")
        if name in (n for n, _, _ in self._pending):
            raise ConfigError(f"duplicate parameter name {name!r}")
        init = np.asarray(init, dtype=np.float64)
        if init.shape != tuple(shape):
            raise ConfigError(f"init shape {init.shape} != {shape} for {name!r}")
        self._pending.append((name, tuple(shape), init))
        return name

    def alloc_fanin(self, name, shape, fan_in, rng) -> str:
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return self.alloc(name, shape, rng.uniform(-bound, bound, size=shape))

    def alloc_const(self, name, shape, value) -> str:
        return self.alloc(name, shape, np.full(shape, float(value)))

    def override_init(self, name: str, value: np.ndarray) -> None:
        """Replace the pending init of a parameter (pre-freeze only)."""
        if self.values is not None:
            raise ConfigError("tape already frozen")
        for i, (n, shape, _) in enumerate(self._pending):
            if n == name:
                value = np.asarray(value, dtype=np.float64)
                if value.shape != shape:
                    raise ConfigError(f"override shape {value.shape} != {shape}")
                self._pending[i] = (n, shape, value)
                return
        raise ConfigError(f"no pending parameter named {name!r}")

    def freeze(self) -> "ParamTape":
        if self.values is not None:
            return self
        offset = 0
        chunks = []
        for name, shape, init in self._pending:
            size = int(np.prod(shape)) if shape else 1
            self.layout[name] = (offset, shape)
            chunks.append(init.ravel())
            offset += size
        self.values = np.concatenate(chunks) if chunks else np.zeros(0)
        self.grads = np.zeros_like(self.values)
        self._pending = []
        return self

    @property
    def n_params(self) -> int:
        return 0 if self.values is None else self.values.size

    def _slice(self, name):
        offset, shape = self.layout[name]
        size = int(np.prod(shape)) if shape else 1
        return offset, size, shape

    def view(self, name: str) -> np.ndarray:
        offset, size, shape = self._slice(name)
        return self.values[offset : offset + size].reshape(shape)

    def grad_view(self, name: str) -> np.ndarray:
        offset, size, shape = self._slice(name)
        return self.grads[offset : offset + size].reshape(shape)

    def zero_grads(self) -> None:
        self.grads[:] = 0.0

    def nonfinite_slices(self) -> list[str]:
        return [n for n in self.layout if not np.all(np.isfinite(self.grad_view(n)))]

    # --- checkpoint format: magic, little-endian u64 count, f64 values ---

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", self.values.size))
            fh.write(self.values.astype("<f8").tobytes())
        with open(str(path) + ".layout.json", "w", encoding="utf-8") as fh:
            json.dump(self.layout_schema(), fh, indent=1, sort_keys=False)

    def layout_schema(self) -> list[dict]:
        return [
            {"name": n, "offset": off, "shape": list(shape)}
            for n, (off, shape) in self.layout.items()
        ]

    def load_values(self, path) -> None:
        """Load parameter values; the layout must match the stored schema."""
        values, schema = read_checkpoint(path)
        diffs = layout_diff(self.layout_schema(), schema)
        if diffs:
            raise SchemaError("checkpoint layout mismatch: " + "; ".join(diffs))
        self.values[:] = values


def read_checkpoint(path) -> tuple[np.ndarray, list[dict]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise SchemaError(f"bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<Q", fh.read(8))
        values = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64)
        if values.size != count:
            raise SchemaError("checkpoint truncated")
    with open(str(path) + ".layout.json", "r", encoding="utf-8") as fh:
        schema = json.load(fh)
    return values, schema


def layout_diff(ours: list[dict], theirs: list[dict]) -> list[str]:
    """Human-readable slice mismatches between two layout schemas."""
    a = {e["name"]: (e["offset"], tuple(e["shape"])) for e in ours}
    b = {e["name"]: (e["offset"], tuple(e["shape"])) for e in theirs}
    diffs = []
    for name in sorted(set(a) | set(b)):
        if name not in b:
            diffs.append(f"{name}: missing from checkpoint")
        elif name not in a:
            diffs.append(f"{name}: unexpected in checkpoint")
        elif a[name] != b[name]:
            diffs.append(f"{name}: ours {a[name]} vs checkpoint {b[name]}")
    return diffs


@dataclass(frozen=True)
class MlpSpec:
    dims: tuple[int, ...]
    activation: str = "relu"
    residual: bool = False
    spectral_cap: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) < 2:
            raise ConfigError("MlpSpec needs at least input and output widths")
        if self.residual and self.dims[0] != self.dims[-1]:
            raise ConfigError("residual blocks need matching input/output widths")
        if self.spectral_cap is not None and not self.spectral_cap > 0:
            raise ConfigError("spectral_cap must be positive")
        _act(self.activation, np.zeros(1))


class Mlp:
    """Dense network with hidden activations; optionally residual (x + net(x))."""

    def __init__(self, spec: MlpSpec, tape: ParamTape, prefix: str, rng: np.random.Generator):
        self.spec = spec
        self.tape = tape
        self.prefix = prefix
        self.w_names = []
        self.b_names = []
        for l in range(len(spec.dims) - 1):
            fan_in = spec.dims[l]
            self.w_names.append(
                tape.alloc_fanin(f"{prefix}.W{l}", (spec.dims[l + 1], fan_in), fan_in, rng)
            )
            self.b_names.append(
                tape.alloc_fanin(f"{prefix}.b{l}", (spec.dims[l + 1],), fan_in, rng)
            )
        self._pi_state = {
            n: {"u": rng.standard_normal(spec.dims[l + 1])}
            for l, n in enumerate(self.w_names)
        }
        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.w_names)

    def forward(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.spec.dims[0]:
            raise ConfigError(
                f"input width {X.shape[1]} != {self.spec.dims[0]} for {self.prefix!r}"
            )
        hs = [X]
        zs = []
        h = X
        for l in range(self.n_layers):
            z = h @ self.tape.view(self.w_names[l]).T + self.tape.view(self.b_names[l])
            zs.append(z)
            h = _act(self.spec.activation, z) if l < self.n_layers - 1 else z
            hs.append(h)
        out = h + X if self.spec.residual else h
        self._cache = (hs, zs)
        return out

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads; returns the input cotangent."""
        if self._cache is None:
            raise NumericError("backward called without live forward intermediates")
        hs, zs = self._cache
        self._cache = None
        d = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        dx_skip = d if self.spec.residual else 0.0
        for l in reversed(range(self.n_layers)):
            if l < self.n_layers - 1:
                d = d * _act_deriv(self.spec.activation, zs[l])
            self.tape.grad_view(self.w_names[l])[...] += d.T @ hs[l]
            self.tape.grad_view(self.b_names[l])[...] += d.sum(axis=0)
            d = d @ self.tape.view(self.w_names[l])
        return d + dx_skip

    def normalize(self, cap: float | None = None, iters: int = 1) -> dict[str, float]:
        """Spectral normalization of every layer; returns sigma estimates."""
        cap = cap if cap is not None else self.spec.spectral_cap
        out = {}
        for name in self.w_names:
            out[name] = spectral_normalize(self.tape.view(name), cap, iters, self._pi_state[name])
        return out

    def enforce_caps(self, cap: float | None = None) -> None:
        """Exact top-up so no layer exceeds the cap (power iteration can undershoot)."""
        cap = cap if cap is not None else self.spec.spectral_cap
        if cap is None:
            return
        for name in self.w_names:
            W = self.tape.view(name)
            sigma = float(np.linalg.norm(W, 2))
            if sigma > cap:
                W *= cap / sigma

    def lipschitz_cert(self) -> float:
        """Upper bound: product of exact layer norms times activation constants."""
        prod = 1.0
        act_lip = activation_lipschitz(self.spec.activation)
        for l, name in enumerate(self.w_names):
            prod *= float(np.linalg.norm(self.tape.view(name), 2))
            if l < self.n_layers - 1:
                prod *= act_lip
        return 1.0 + prod if self.spec.residual else prod


def spectral_normalize(W: np.ndarray, cap: float | None, iters: int, state: dict) -> float:
    """Power-iteration estimate of the top singular value; rescales in place.

    ``W <- W * min(1, cap/sigma_hat)`` so contractive layers are never
    inflated.  ``state['u']`` persists across calls (warm start).
    """
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    u = state["u"]
    sigma = 0.0
    for _ in range(iters):
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            state["u"] = u
            return 0.0
        v /= nv
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            state["u"] = u
            return 0.0
        u /= nu
        sigma = float(u @ (W @ v))
    state["u"] = u
    if cap is not None and sigma > cap:
        W *= cap / sigma
    return sigma


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params: int, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), lr=lr, **kw)

    def state_arrays(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}


def adam_step(state: AdamState, tape: ParamTape) -> None:
    """Bias-corrected Adam update of the tape values from accumulated grads."""
    bad = tape.nonfinite_slices()
    if bad:
        raise NumericError(f"non-finite gradients in slices: {', '.join(bad)}")
    g = tape.grads
    state.t += 1
    state.m[:] = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v[:] = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    tape.values[:] -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
