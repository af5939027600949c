"""Concrete branch families and selector kernels for the supported blocks.

Four families, each exposing (i) the deterministic block, (ii) a sampled
stochastic step with a matching backward pass, and (iii) a
:class:`~ifslab.ifs_core.StochasticIFS` view used by the generic dynamics
routines:

* ReLU residual blocks (activation-pattern indexed affine maps, Dirac selector),
* softplus residual blocks (continuous logistic-threshold index set),
* a single-head Transformer block acting on contexts of ``n`` tokens
  (attention rows as a product selector),
* (deep) mixture-of-experts layers (gating softmax selector).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff_nn import Mlp, MlpSpec, ParamTape, softmax_backward_rows
from .errors import ConfigError, UnsupportedInstanceError
from .ifs_core import (
    AffineBranch,
    CallableBranch,
    ConstantSelector,
    DiracSelector,
    GatingSelector,
    ProductSelector,
    SelectorKernel,
    StochasticIFS,
    softmax,
)

_LN_EPS = 1e-5


def _gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0)))


# ---------------------------------------------------------------------------
# ReLU residual blocks


class ResnetBlock:
    """x + B relu(Ax + b) + c, with the activation pattern as branch index."""

    def __init__(self, dim: int, width: int, tape: ParamTape, prefix: str,
                 rng: np.random.Generator, bias_free: bool = False):
        self.mlp = Mlp(MlpSpec((dim, width, dim), "relu", residual=True), tape, prefix, rng)
        self.dim = dim
        self.width = width
        self.bias_free = bias_free
        if bias_free:
            for name, shape in zip(self.mlp.b_names, ((width,), (dim,))):
                tape.override_init(name, np.zeros(shape))

    @property
    def tape(self):
        return self.mlp.tape

    def _Ab(self):
        return self.tape.view(self.mlp.w_names[0]), self.tape.view(self.mlp.b_names[0])

    def _Bc(self):
        return self.tape.view(self.mlp.w_names[1]), self.tape.view(self.mlp.b_names[1])

    def forward(self, X):
        return self.mlp.forward(X)

    def backward(self, dY):
        dX = self.mlp.backward(dY)
        if self.bias_free:
            for name in self.mlp.b_names:
                self.tape.grad_view(name)[...] = 0.0
        return dX

    def pattern(self, X) -> np.ndarray:
        """Indicator of positive pre-activations, one row of bits per input."""
        A, b = self._Ab()
        return (np.atleast_2d(X) @ A.T + b > 0.0).astype(np.int64)

    def pattern_ints(self, X) -> np.ndarray:
        bits = self.pattern(X)
        out = np.empty(bits.shape[0], dtype=object)
        for i, row in enumerate(bits):
            out[i] = int("".join("1" if v else "0" for v in row), 2) if row.size else 0
        return out

    def branch(self, pattern) -> AffineBranch:
        """Materialize the affine map selected by one activation pattern."""
        A, b = self._Ab()
        B, c = self._Bc()
        D = np.diag(np.asarray(pattern, dtype=np.float64))
        M = np.eye(self.dim) + B @ D @ A
        return AffineBranch(M, B @ D @ b + c, lipschitz_cert=None)

    def enumerate_branches(self) -> list[AffineBranch]:
        if self.width > 20:
            raise ConfigError("explicit enumeration refused above width 20 (2^m maps)")
        out = []
        for code in range(2 ** self.width):
            bits = [(code >> (self.width - 1 - j)) & 1 for j in range(self.width)]
            out.append(self.branch(bits))
        return out


def resnet_pattern(block: ResnetBlock, x) -> np.ndarray:
    return block.pattern(x)


def resnet_as_ifs(block: ResnetBlock, noise_sigma: float = 0.0,
                  explicit: bool = False) -> StochasticIFS:
    """Degenerate place-dependent view: Dirac selector at the own pattern.

    With ``explicit=True`` all 2^m affine maps are materialized (width <= 20);
    the default keeps branches lazy, evaluating the selected map directly.
    """
    if explicit:
        branches = block.enumerate_branches()
        selector = DiracSelector(lambda X: np.array(
            [int("".join(map(str, row)), 2) for row in block.pattern(X)]))
        return StochasticIFS(branches, selector, noise_sigma, dim=block.dim)
    selector = DiracSelector(block.pattern_ints)
    return StochasticIFS(None, selector, noise_sigma, dim=block.dim,
                         selected_apply=lambda X, idx: block.forward(X))


class ResnetModel:
    """Stack of residual blocks (unshared parameters), trained as a unit."""

    family = "resnet"

    def __init__(self, data_dim: int, width: int, depth: int, rng: np.random.Generator,
                 bias_free: bool = False, cap: float | None = None, noise_sigma: float = 0.0):
        self.tape = ParamTape()
        self.blocks = [
            ResnetBlock(data_dim, width, self.tape, f"block{i}", rng, bias_free=bias_free)
            for i in range(depth)
        ]
        self.tape.freeze()
        self.data_dim = data_dim
        self.width = width
        self.depth = depth
        self.bias_free = bias_free
        self.cap = cap
        self.noise_sigma = noise_sigma

    def describe(self) -> dict:
        return {"family": self.family, "data_dim": self.data_dim, "width": self.width,
                "depth": self.depth, "bias_free": self.bias_free, "cap": self.cap,
                "noise_sigma": self.noise_sigma}

    def encode_batch(self, X):
        return np.atleast_2d(X)

    def decode_points(self, Y):
        return Y

    def forward(self, X):
        for blk in self.blocks:
            X = blk.forward(X)
        return X

    def transfer_sample(self, X, rng, sigma, routing="sampled", estimator="pathwise_selected"):
        # the selector is a Dirac, so sampled and dense routing coincide
        Y = self.forward(X)
        if sigma > 0:
            Y = Y + sigma * rng.standard_normal(Y.shape)
        return Y, {"mode": "deterministic"}

    def backward_points(self, cache, dY):
        d = dY
        for blk in reversed(self.blocks):
            d = blk.backward(d)
        return d

    def mlps(self):
        return [blk.mlp for blk in self.blocks]

    def apply_caps(self, power_iters: int = 1, cap: float | None = None):
        layer_cap = cap if cap is not None else self.cap  # cap per linear layer
        if layer_cap is None:
            return
        for blk in self.blocks:
            blk.mlp.normalize(layer_cap, power_iters)
            blk.mlp.enforce_caps(layer_cap)

    def composite_cert(self) -> float | None:
        return None  # residual blocks are not certified contractive

    def contraction_sup(self, power: int = 2) -> float | None:
        return None

    def to_ifs(self, noise_sigma: float | None = None) -> StochasticIFS:
        sigma = self.noise_sigma if noise_sigma is None else noise_sigma

        def pattern_fn(X):
            # concatenated per-block activation patterns, packed into one int
            cur = np.atleast_2d(X)
            codes = np.zeros(cur.shape[0], dtype=object)
            for blk in self.blocks:
                ints = blk.pattern_ints(cur)
                codes = np.array(
                    [(int(c) << blk.width) | int(i) for c, i in zip(codes, ints)],
                    dtype=object,
                )
                cur = blk.forward(cur)
            return codes

        return StochasticIFS(None, DiracSelector(pattern_fn), sigma, dim=self.data_dim,
                             selected_apply=lambda X, idx: self.forward(X))


# ---------------------------------------------------------------------------
# softplus residual blocks


class LogisticThresholdSelector(SelectorKernel):
    """Continuous index set: one logistic threshold per hidden unit."""

    kind = "logistic_thresholds"

    def __init__(self, width: int):
        self.width = width

    def sample(self, X, rng):
        return rng.logistic(size=(np.atleast_2d(X).shape[0], self.width))


class SoftplusBlock:
    """x + B softplus(Ax+b) + c and its threshold-indexed branch family."""

    def __init__(self, dim: int, width: int, tape: ParamTape, prefix: str,
                 rng: np.random.Generator):
        self.mlp = Mlp(MlpSpec((dim, width, dim), "softplus", residual=True), tape, prefix, rng)
        self.dim = dim
        self.width = width

    @property
    def tape(self):
        return self.mlp.tape

    def forward(self, X):
        return self.mlp.forward(X)

    def branch_apply(self, X, tau) -> np.ndarray:
        """w_tau(x) = x + B relu(Ax + b - tau) + c for one threshold row each."""
        A = self.tape.view(self.mlp.w_names[0])
        b = self.tape.view(self.mlp.b_names[0])
        B = self.tape.view(self.mlp.w_names[1])
        c = self.tape.view(self.mlp.b_names[1])
        X = np.atleast_2d(X)
        z = X @ A.T + b - tau
        return X + np.maximum(z, 0.0) @ B.T + c

    def mc_expectation(self, x, samples: int, rng: np.random.Generator) -> np.ndarray:
        """Monte-Carlo branch average at a single point; converges to forward."""
        if samples < 1:
            raise ConfigError("samples must be >= 1")
        x = np.asarray(x, dtype=np.float64).ravel()
        tau = rng.logistic(size=(samples, self.width))
        return self.branch_apply(np.broadcast_to(x, (samples, x.size)), tau).mean(axis=0)

    def to_ifs(self, noise_sigma: float = 0.0) -> StochasticIFS:
        return StochasticIFS(None, LogisticThresholdSelector(self.width), noise_sigma,
                             dim=self.dim, selected_apply=self.branch_apply)


def softplus_mc_expectation(block: SoftplusBlock, x, samples: int, rng) -> np.ndarray:
    return block.mc_expectation(x, samples, rng)


# ---------------------------------------------------------------------------
# transformer block on contexts


class TransformerBlock:
    """Single-head residual attention block on contexts of n tokens in R^e.

    The block follows the unscaled-logit convention (q.k without 1/sqrt(e));
    ``scaled_attention`` restores the customary scaling.  Layer normalization
    is applied once and feeds both the attention map and the token MLP.
    """

    family = "transformer"

    def __init__(self, embed: int, context: int, hidden: int, tape: ParamTape, prefix: str,
                 rng: np.random.Generator, activation: str = "tanh",
                 scaled_attention: bool = False):
        self.embed = embed
        self.context = context
        self.hidden = hidden
        self.scaled_attention = scaled_attention
        self.tape = tape
        self.wq = tape.alloc_fanin(f"{prefix}.Wq", (embed, embed), embed, rng)
        self.wk = tape.alloc_fanin(f"{prefix}.Wk", (embed, embed), embed, rng)
        self.wv = tape.alloc_fanin(f"{prefix}.Wv", (embed, embed), embed, rng)
        self.ln_g = tape.alloc_const(f"{prefix}.ln_gamma", (embed,), 1.0)
        self.ln_b = tape.alloc_const(f"{prefix}.ln_beta", (embed,), 0.0)
        self.mlp = Mlp(MlpSpec((embed, hidden, embed), activation), tape, f"{prefix}.mlp", rng)
        self._cache = None

    @property
    def dim(self) -> int:
        return self.context * self.embed

    # context packing: a system state is one flattened context vector

    def pack(self, ctx: np.ndarray) -> np.ndarray:
        return np.atleast_3d(ctx).reshape(-1, self.dim)

    def unpack(self, flat: np.ndarray) -> np.ndarray:
        return np.atleast_2d(flat).reshape(-1, self.context, self.embed)

    def _layer_norm(self, x):
        g = self.tape.view(self.ln_g)
        b = self.tape.view(self.ln_b)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + _LN_EPS)
        xhat = xc * inv
        return g * xhat + b, (xhat, inv)

    def _layer_norm_backward(self, dz, ln_cache):
        xhat, inv = ln_cache
        g = self.tape.view(self.ln_g)
        self.tape.grad_view(self.ln_g)[...] += (dz * xhat).sum(axis=(0, 1))
        self.tape.grad_view(self.ln_b)[...] += dz.sum(axis=(0, 1))
        dxhat = dz * g
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    def _qkv(self, z):
        Wq = self.tape.view(self.wq)
        Wk = self.tape.view(self.wk)
        Wv = self.tape.view(self.wv)
        return z @ Wq.T, z @ Wk.T, z @ Wv.T

    def _logit_scale(self) -> float:
        return math.sqrt(self.embed) if self.scaled_attention else 1.0

    def attention_rows(self, ctx_batch: np.ndarray) -> np.ndarray:
        """Row-stochastic attention matrices, (batch, n, n)."""
        X = self.unpack(ctx_batch)
        z, _ = self._layer_norm(X)
        Q, K, _ = self._qkv(z)
        L = Q @ np.swapaxes(K, 1, 2) / self._logit_scale()
        return softmax(L)

    def forward_dense(self, ctx_batch: np.ndarray) -> np.ndarray:
        """G(x) = x + attention(ln x) + mlp(ln x), on flattened contexts."""
        X = self.unpack(ctx_batch)
        z, ln_cache = self._layer_norm(X)
        Q, K, V = self._qkv(z)
        L = Q @ np.swapaxes(K, 1, 2) / self._logit_scale()
        alpha = softmax(L)
        attn = alpha @ V
        m = self.mlp.forward(z.reshape(-1, self.embed)).reshape(X.shape)
        Y = X + attn + m
        self._cache = {"mode": "dense", "X": X, "z": z, "ln": ln_cache,
                       "Q": Q, "K": K, "V": V, "alpha": alpha}
        return Y.reshape(-1, self.dim)

    def step_sampled(self, ctx_batch: np.ndarray, rng: np.random.Generator,
                     estimator: str = "pathwise_selected"):
        """One branch draw per context: token i keeps value row xi_i ~ alpha_i."""
        X = self.unpack(ctx_batch)
        z, ln_cache = self._layer_norm(X)
        Q, K, V = self._qkv(z)
        L = Q @ np.swapaxes(K, 1, 2) / self._logit_scale()
        if estimator == "relaxed_onehot":
            G = _gumbel(rng, L.shape)
            s = softmax(L + G)
            attn = s @ V
            idx = np.argmax(L + G, axis=-1)
            self._cache = {"mode": "relaxed", "X": X, "z": z, "ln": ln_cache,
                           "Q": Q, "K": K, "V": V, "alpha": s}
        else:
            alpha = softmax(L)
            cum = np.cumsum(alpha, axis=-1)
            u = rng.random(cum.shape[:-1])
            idx = np.minimum((cum < u[..., None]).sum(axis=-1), self.context - 1)
            attn = np.take_along_axis(V, idx[..., None], axis=1)
            self._cache = {"mode": "sampled", "X": X, "z": z, "ln": ln_cache,
                           "V": V, "idx": idx}
        m = self.mlp.forward(z.reshape(-1, self.embed)).reshape(X.shape)
        Y = X + attn + m
        return Y.reshape(-1, self.dim), idx

    def backward(self, dY_flat: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise UnsupportedInstanceError("backward without live forward intermediates")
        cache = self._cache
        self._cache = None
        X = cache["X"]
        z = cache["z"]
        dY = self.unpack(dY_flat)
        dz = self.mlp.backward(dY.reshape(-1, self.embed)).reshape(X.shape)
        if cache["mode"] in ("dense", "relaxed"):
            V, alpha = cache["V"], cache["alpha"]
            dalpha = dY @ np.swapaxes(V, 1, 2)
            dV = np.swapaxes(alpha, 1, 2) @ dY
            dL = softmax_backward_rows(alpha, dalpha) / self._logit_scale()
            dQ = dL @ cache["K"]
            dK = np.swapaxes(dL, 1, 2) @ cache["Q"]
            self.tape.grad_view(self.wq)[...] += np.einsum("bnj,bnf->jf", dQ, z)
            self.tape.grad_view(self.wk)[...] += np.einsum("bnj,bnf->jf", dK, z)
            dz += dQ @ self.tape.view(self.wq) + dK @ self.tape.view(self.wk)
        else:
            dV = np.zeros_like(cache["V"])
            np.add.at(dV, (np.arange(dV.shape[0])[:, None], cache["idx"]), dY)
        self.tape.grad_view(self.wv)[...] += np.einsum("bnj,bnf->jf", dV, z)
        dz += dV @ self.tape.view(self.wv)
        dX = dY + self._layer_norm_backward(dz, cache["ln"])
        return dX.reshape(-1, self.dim)

    def branch_for(self, pattern) -> CallableBranch:
        """The branch map of one attention pattern (tuple of value indices)."""
        pattern = tuple(int(j) for j in pattern)

        def apply(flat, _p=pattern):
            X = self.unpack(flat)
            z, _ = self._layer_norm(X)
            V = z @ self.tape.view(self.wv).T
            m = self.mlp.forward(z.reshape(-1, self.embed)).reshape(X.shape)
            Y = X + V[:, _p, :] + m
            out = Y.reshape(-1, self.dim)
            return out if np.asarray(flat).ndim > 1 else out[0]

        return CallableBranch(apply)

    def to_ifs(self, noise_sigma: float = 0.0) -> StochasticIFS:
        selector = ProductSelector(self.attention_rows)

        def selected_apply(flat, idx):
            X = self.unpack(flat)
            z, _ = self._layer_norm(X)
            V = z @ self.tape.view(self.wv).T
            m = self.mlp.forward(z.reshape(-1, self.embed)).reshape(X.shape)
            Y = X + np.take_along_axis(V, idx[..., None], axis=1) + m
            return Y.reshape(-1, self.dim)

        return StochasticIFS(None, selector, noise_sigma, dim=self.dim,
                             selected_apply=selected_apply)


def attention_weights(block: TransformerBlock, context) -> np.ndarray:
    """Attention matrix of a single context (n, d) -> (n, n)."""
    rows = block.attention_rows(np.asarray(context, dtype=np.float64).reshape(1, -1))
    return rows[0]


def transformer_as_ifs(block: TransformerBlock, noise_sigma: float = 0.0) -> StochasticIFS:
    return block.to_ifs(noise_sigma)


class TransformerModel:
    """Trainable wrapper: pairs data points into contexts, pads to the embed dim."""

    family = "transformer"

    def __init__(self, data_dim: int, embed: int, context: int, hidden: int,
                 rng: np.random.Generator, activation: str = "tanh",
                 scaled_attention: bool = False, noise_sigma: float = 0.0):
        if embed < data_dim:
            raise ConfigError("embed dimension must be at least the data dimension")
        self.tape = ParamTape()
        self.block = TransformerBlock(embed, context, hidden, self.tape, "tf", rng,
                                      activation=activation, scaled_attention=scaled_attention)
        self.tape.freeze()
        self.data_dim = data_dim
        self.embed = embed
        self.context = context
        self.hidden = hidden
        self.activation = activation
        self.noise_sigma = noise_sigma
        self.cap = None

    def describe(self) -> dict:
        return {"family": self.family, "data_dim": self.data_dim, "embed": self.embed,
                "context": self.context, "hidden": self.hidden,
                "activation": self.activation,
                "scaled_attention": self.block.scaled_attention,
                "noise_sigma": self.noise_sigma}

    def encode_batch(self, X) -> np.ndarray:
        """Group consecutive points into contexts; zero-pad tokens to R^embed."""
        X = np.atleast_2d(X)
        usable = (X.shape[0] // self.context) * self.context
        if usable == 0:
            raise ConfigError(f"need at least {self.context} points per batch")
        toks = np.zeros((usable, self.embed))
        toks[:, : self.data_dim] = X[:usable]
        return toks.reshape(-1, self.context * self.embed)

    def decode_points(self, flat) -> np.ndarray:
        toks = np.atleast_2d(flat).reshape(-1, self.embed)
        return toks[:, : self.data_dim]

    def transfer_sample(self, Xenc, rng, sigma, routing="dense", estimator="pathwise_selected"):
        if routing == "dense":
            Y = self.block.forward_dense(Xenc)
        else:
            Y, _ = self.block.step_sampled(Xenc, rng, estimator)
        if sigma > 0:
            Y = Y + sigma * rng.standard_normal(Y.shape)
        return Y, {"routing": routing}

    def backward_points(self, cache, dY):
        return self.block.backward(dY)

    def mlps(self):
        return [self.block.mlp]

    def apply_caps(self, power_iters: int = 1, cap: float | None = None):
        return  # Table-2 transformers train without spectral constraints

    def composite_cert(self) -> float | None:
        return None

    def contraction_sup(self, power: int = 2) -> float | None:
        return None

    def to_ifs(self, noise_sigma: float | None = None) -> StochasticIFS:
        sigma = self.noise_sigma if noise_sigma is None else noise_sigma
        return self.block.to_ifs(sigma)


# ---------------------------------------------------------------------------
# mixture of experts


class MoeStage:
    """K expert networks plus one gating distribution."""

    def __init__(self, data_dim: int, n_experts: int, expert_dims: tuple[int, ...],
                 tape: ParamTape, prefix: str, rng: np.random.Generator,
                 activation: str = "tanh", gate: str = "constant",
                 gate_hidden: int = 16, temperature: float = 1.0):
        self.n_experts = n_experts
        self.temperature = temperature
        self.gate_kind = gate
        self.experts = [
            Mlp(MlpSpec(expert_dims, activation), tape, f"{prefix}.expert{k}", rng)
            for k in range(n_experts)
        ]
        if gate == "constant":
            self.gate_name = tape.alloc_const(f"{prefix}.gate_logits", (n_experts,), 0.0)
            self.gate_net = None
        elif gate == "mlp":
            self.gate_net = Mlp(MlpSpec((data_dim, gate_hidden, n_experts), "tanh"),
                                tape, f"{prefix}.gate", rng)
            self.gate_name = None
        else:
            raise ConfigError(f"unknown gate kind {gate!r}")
        self.tape = tape

    def gate_logits(self, X) -> np.ndarray:
        if self.gate_net is None:
            logits = self.tape.view(self.gate_name)
            return np.broadcast_to(logits, (np.atleast_2d(X).shape[0], self.n_experts))
        return self.gate_net.forward(X)

    def gate_probs(self, X) -> np.ndarray:
        return softmax(self.gate_logits(X) / self.temperature)

    def expert_cert(self, k: int) -> float:
        return self.experts[k].lipschitz_cert()

    def selector(self):
        if self.gate_net is None:
            return ConstantSelector(self.tape.view(self.gate_name).copy(), self.temperature)
        return GatingSelector(self.gate_net.forward, self.n_experts, self.temperature)


class MoeModel:
    """Contractive mixture-of-experts generator (optionally a deep cascade).

    ``cap`` is the per-expert Lipschitz budget: every linear layer of an
    expert is spectrally capped at cap**(1/L) so the product certificate of
    one expert equals the cap and a D-stage cascade certifies cap**D.
    """

    family = "moe"

    def __init__(self, data_dim: int, n_experts: int = 8, width: int = 32, depth: int = 1,
                 stages: int = 1, rng: np.random.Generator | None = None,
                 activation: str = "tanh", cap: float | None = 0.9,
                 gate: str = "constant", temperature: float = 1.0,
                 noise_sigma: float = 0.04):
        if cap is not None and not 0.0 < cap < 1.0:
            raise ConfigError("contraction cap must lie in (0, 1)")
        rng = rng or np.random.default_rng(0)
        expert_dims = (data_dim, *([width] * depth), data_dim)
        self.tape = ParamTape()
        self.stages = [
            MoeStage(data_dim, n_experts, expert_dims, self.tape, f"stage{s}", rng,
                     activation=activation, gate=gate, temperature=temperature)
            for s in range(stages)
        ]
        self.tape.freeze()
        self.data_dim = data_dim
        self.n_experts = n_experts
        self.width = width
        self.depth = depth
        self.n_stages = stages
        self.activation = activation
        self.cap = cap
        self.gate = gate
        self.temperature = temperature
        self.noise_sigma = noise_sigma
        n_layers = len(expert_dims) - 1
        self.layer_cap = None if cap is None else cap ** (1.0 / n_layers)

    def describe(self) -> dict:
        return {"family": self.family, "data_dim": self.data_dim,
                "n_experts": self.n_experts, "width": self.width, "depth": self.depth,
                "stages": self.n_stages, "activation": self.activation, "cap": self.cap,
                "gate": self.gate, "temperature": self.temperature,
                "noise_sigma": self.noise_sigma}

    def encode_batch(self, X):
        return np.atleast_2d(X)

    def decode_points(self, Y):
        return Y

    def dense_forward(self, X) -> np.ndarray:
        """Stage-wise composition of gate-weighted expert averages."""
        for stage in self.stages:
            P = stage.gate_probs(X)
            X = sum(P[:, k : k + 1] * stage.experts[k].forward(X)
                    for k in range(stage.n_experts))
        return X

    def transfer_sample(self, X, rng, sigma, routing="sampled", estimator="pathwise_selected"):
        X = np.atleast_2d(X)
        caches = []
        for stage in self.stages:
            if routing == "dense":
                X, cache = self._stage_dense(stage, X)
            elif estimator == "relaxed_onehot":
                X, cache = self._stage_relaxed(stage, X, rng)
            else:
                X, cache = self._stage_pathwise(stage, X, rng)
            caches.append(cache)
        if sigma > 0:
            X = X + sigma * rng.standard_normal(X.shape)
        return X, caches

    def _stage_pathwise(self, stage, X, rng):
        P = stage.gate_probs(X)
        cum = np.cumsum(P, axis=1)
        u = rng.random(X.shape[0])
        idx = np.minimum((cum < u[:, None]).sum(axis=1), stage.n_experts - 1)
        Y = np.empty_like(X)
        masks = []
        for k in range(stage.n_experts):
            mask = idx == k
            masks.append(mask)
            if mask.any():
                Y[mask] = stage.experts[k].forward(X[mask])
        return Y, {"mode": "pathwise", "stage": stage, "masks": masks}

    def _stage_relaxed(self, stage, X, rng):
        logits = stage.gate_logits(X)
        g = _gumbel(rng, (X.shape[0], stage.n_experts))
        s = softmax((logits + g) / stage.temperature)
        outs = [stage.experts[k].forward(X) for k in range(stage.n_experts)]
        Y = sum(s[:, k : k + 1] * outs[k] for k in range(stage.n_experts))
        return Y, {"mode": "mixture", "stage": stage, "weights": s, "outs": outs,
                   "scale": 1.0 / stage.temperature}

    def _stage_dense(self, stage, X):
        P = stage.gate_probs(X)
        outs = [stage.experts[k].forward(X) for k in range(stage.n_experts)]
        Y = sum(P[:, k : k + 1] * outs[k] for k in range(stage.n_experts))
        return Y, {"mode": "mixture", "stage": stage, "weights": P, "outs": outs,
                   "scale": 1.0 / stage.temperature}

    def backward_points(self, caches, dY):
        d = dY
        for cache in reversed(caches):
            stage = cache["stage"]
            if cache["mode"] == "pathwise":
                dX = np.zeros_like(d)
                for k, mask in enumerate(cache["masks"]):
                    if mask.any():
                        dX[mask] = stage.experts[k].backward(d[mask])
                d = dX
            else:
                s, outs = cache["weights"], cache["outs"]
                dX = np.zeros_like(d)
                dlogit_rows = np.empty((d.shape[0], stage.n_experts))
                for k in range(stage.n_experts):
                    dX += stage.experts[k].backward(s[:, k : k + 1] * d)
                    dlogit_rows[:, k] = (d * outs[k]).sum(axis=1)
                dlogits = softmax_backward_rows(s, dlogit_rows) * cache["scale"]
                if stage.gate_net is None:
                    stage.tape.grad_view(stage.gate_name)[...] += dlogits.sum(axis=0)
                else:
                    dX += stage.gate_net.backward(dlogits)
                d = dX
        return d

    def mlps(self):
        out = []
        for stage in self.stages:
            out.extend(stage.experts)
            if stage.gate_net is not None:
                out.append(stage.gate_net)
        return out

    def apply_caps(self, power_iters: int = 1, cap: float | None = None):
        if cap is None:
            layer_cap = self.layer_cap
        else:
            layer_cap = cap ** (1.0 / (self.depth + 1))
        if layer_cap is None:
            return
        for stage in self.stages:
            for expert in stage.experts:
                expert.normalize(layer_cap, power_iters)
                expert.enforce_caps(layer_cap)

    def composite_cert(self) -> float | None:
        """Certified Lipschitz constant of one full (cascade) step."""
        if self.cap is None:
            return None
        cert = 1.0
        for stage in self.stages:
            cert *= max(stage.expert_cert(k) for k in range(stage.n_experts))
        return cert

    def contraction_sup(self, power: int = 2, probe: np.ndarray | None = None) -> float:
        """sup_x sum_k p_k(x) c_k^power across stages (product over stages)."""
        total = 1.0
        for stage in self.stages:
            certs = np.array([stage.expert_cert(k) for k in range(stage.n_experts)]) ** power
            if stage.gate_net is None:
                probs = softmax(stage.tape.view(stage.gate_name) / stage.temperature)
                total *= float(probs @ certs)
            else:
                if probe is None:
                    raise ConfigError("gating-network certification needs a probe batch")
                total *= float((stage.gate_probs(probe) @ certs).max())
        return total

    def to_ifs(self, noise_sigma: float | None = None) -> StochasticIFS:
        sigma = self.noise_sigma if noise_sigma is None else noise_sigma
        stage_systems = []
        for stage in self.stages:
            branches = [
                CallableBranch(stage.experts[k].forward, lipschitz_cert=stage.expert_cert(k))
                for k in range(stage.n_experts)
            ]
            stage_systems.append(
                StochasticIFS(branches, stage.selector(), 0.0, dim=self.data_dim)
            )
        if self.n_stages == 1:
            one = stage_systems[0]
            return StochasticIFS(one.branches, one.selector, sigma, dim=self.data_dim)

        def cascade(X, rng):
            idxs = []
            for sys in stage_systems:
                X, idx = sys.step_batch(X, rng)
                idxs.append(idx)
            return X, np.stack(idxs, axis=1)

        return StochasticIFS(None, stage_systems[0].selector, sigma, dim=self.data_dim,
                             step_fn=cascade, stages=stage_systems)


def moe_as_ifs(model: MoeModel, noise_sigma: float | None = None) -> StochasticIFS:
    return model.to_ifs(noise_sigma)


# ---------------------------------------------------------------------------


def build_model(arch: dict, rng: np.random.Generator | None = None):
    """Instantiate a trainable model from its ``describe()`` dictionary."""
    rng = rng or np.random.default_rng(0)
    arch = dict(arch)
    family = arch.pop("family", None)
    if family == "moe":
        return MoeModel(arch.pop("data_dim"), rng=rng, **arch)
    if family == "resnet":
        return ResnetModel(arch.pop("data_dim"), arch.pop("width"), arch.pop("depth"),
                           rng, **arch)
    if family == "transformer":
        return TransformerModel(arch.pop("data_dim"), arch.pop("embed"),
                                arch.pop("context"), arch.pop("hidden"), rng, **arch)
    raise ConfigError(f"unknown architecture family {family!r}")
