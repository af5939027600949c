"""Stochastic IFS machinery: Hutchinson iteration, Markov recursion, transfer
sampling, contraction certification, and collage-bound arithmetic.

A :class:`StochasticIFS` pairs a branch family with a selector kernel.  Small
finite families carry an explicit ``branches`` list; combinatorially indexed
families (activation patterns, attention patterns, continuous thresholds)
instead provide ``selected_apply`` so sampling never materializes branches.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .errors import (
    CertificationError,
    ConfigError,
    DimensionMismatchError,
    InstabilityError,
    KernelError,
    UnsupportedInstanceError,
)
from .geometry import PointCloud

DIVERGENCE_GUARD = 1e6
_PROB_TOL = 1e-9


# ---------------------------------------------------------------------------
# branch maps


class BranchMap:
    """A self-map of R^d with an optional certified Lipschitz upper bound."""

    lipschitz_cert: float | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


class AffineBranch(BranchMap):
    """w(x) = A x + b; the default certificate is the exact spectral norm."""

    def __init__(self, A, b, lipschitz_cert: float | None = "auto"):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.b = np.asarray(b, dtype=np.float64).ravel()
        if self.A.shape[0] != self.A.shape[1] or self.A.shape[0] != self.b.size:
            raise ConfigError("affine branch needs square A and matching b")
        if lipschitz_cert == "auto":
            lipschitz_cert = float(np.linalg.norm(self.A, 2))
        if lipschitz_cert is not None and lipschitz_cert < np.linalg.norm(self.A, 2) - 1e-12:
            raise ConfigError("certificate below the spectral norm is not an upper bound")
        self.lipschitz_cert = lipschitz_cert

    def __call__(self, x):
        return np.asarray(x) @ self.A.T + self.b


class CallableBranch(BranchMap):
    """Arbitrary vectorized map with an externally supplied certificate."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], lipschitz_cert: float | None = None):
        self.fn = fn
        self.lipschitz_cert = lipschitz_cert

    def __call__(self, x):
        return self.fn(np.asarray(x))


# ---------------------------------------------------------------------------
# selector kernels


def _validate_rows(P: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(P)):
        raise KernelError("selector produced non-finite probabilities")
    if np.any(P < -_PROB_TOL) or np.any(np.abs(P.sum(axis=-1) - 1.0) > _PROB_TOL):
        raise KernelError("selector probabilities must be nonnegative and sum to 1")
    return np.clip(P, 0.0, None)


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class SelectorKernel:
    """Place-dependent categorical distribution over branch indices."""

    kind = "abstract"
    temperature = 1.0

    def probs(self, X: np.ndarray) -> np.ndarray:
        raise UnsupportedInstanceError(f"{self.kind} selector has no enumerable probabilities")

    def sample(self, X: np.ndarray, rng: np.random.Generator):
        P = _validate_rows(self.probs(X))
        cum = np.cumsum(P, axis=-1)
        u = rng.random(X.shape[0])
        return np.minimum((cum < u[:, None]).sum(axis=1), P.shape[1] - 1)


class ConstantSelector(SelectorKernel):
    """Place-independent kernel (the I-IFS case): softmax of fixed logits."""

    kind = "constant"

    def __init__(self, logits, temperature: float = 1.0):
        if temperature <= 0:
            raise ConfigError("temperature must be positive")
        self.logits = np.asarray(logits, dtype=np.float64).ravel()
        self.temperature = temperature

    def weights(self) -> np.ndarray:
        return _validate_rows(softmax(self.logits, self.temperature))

    def probs(self, X):
        return np.broadcast_to(self.weights(), (np.atleast_2d(X).shape[0], self.logits.size))


class GatingSelector(SelectorKernel):
    """Softmax of a state-dependent logit function (gating network)."""

    kind = "gating"

    def __init__(self, logits_fn: Callable[[np.ndarray], np.ndarray], n_branches: int,
                 temperature: float = 1.0):
        if temperature <= 0:
            raise ConfigError("temperature must be positive")
        self.logits_fn = logits_fn
        self.n_branches = n_branches
        self.temperature = temperature

    def probs(self, X):
        logits = np.atleast_2d(self.logits_fn(np.atleast_2d(X)))
        return _validate_rows(softmax(logits, self.temperature))


class DiracSelector(SelectorKernel):
    """Degenerate kernel: the branch index is a deterministic pattern of x."""

    kind = "dirac"

    def __init__(self, pattern_fn: Callable[[np.ndarray], Any]):
        self.pattern_fn = pattern_fn

    def sample(self, X, rng):
        return self.pattern_fn(np.atleast_2d(X))


class ProductSelector(SelectorKernel):
    """Rows of a stochastic matrix sampled independently per component.

    Used for context-valued systems where a pattern is one index per token;
    ``rows_fn`` maps a batch of flattened contexts to (batch, n, K) rows.
    """

    kind = "product"

    def __init__(self, rows_fn: Callable[[np.ndarray], np.ndarray]):
        self.rows_fn = rows_fn

    def row_probs(self, X) -> np.ndarray:
        R = self.rows_fn(np.atleast_2d(X))
        for i in range(R.shape[1]):
            _validate_rows(R[:, i, :])
        return R

    def sample(self, X, rng):
        R = self.row_probs(X)
        cum = np.cumsum(R, axis=-1)
        u = rng.random(cum.shape[:-1])
        return np.minimum((cum < u[..., None]).sum(axis=-1), R.shape[-1] - 1)


# ---------------------------------------------------------------------------
# the system


class StochasticIFS:
    """Branch family + selector kernel, with optional Gaussian step noise."""

    def __init__(self, branches: Sequence[BranchMap] | None, selector: SelectorKernel,
                 noise_sigma: float = 0.0, dim: int | None = None,
                 selected_apply: Callable[[np.ndarray, Any], np.ndarray] | None = None,
                 step_fn: Callable[[np.ndarray, np.random.Generator], tuple] | None = None,
                 stages: Sequence["StochasticIFS"] | None = None):
        if noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if branches is None and selected_apply is None and step_fn is None:
            raise ConfigError("need explicit branches, a selected_apply hook, or a step_fn")
        if branches is not None and len(branches) < 1:
            raise ConfigError("need at least one branch")
        if dim is None:
            raise ConfigError("dim is required")
        self.branches = list(branches) if branches is not None else None
        self.selector = selector
        self.noise_sigma = float(noise_sigma)
        self.dim = int(dim)
        self.selected_apply = selected_apply
        self.step_fn = step_fn
        self.stages = list(stages) if stages is not None else None

    @property
    def n_branches(self) -> int | None:
        return None if self.branches is None else len(self.branches)

    def is_place_independent(self) -> bool:
        return self.selector.kind == "constant"

    def step_batch(self, X: np.ndarray, rng: np.random.Generator):
        """One Markov step applied independently to each row of X."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise DimensionMismatchError(f"points have dim {X.shape[1]}, system has {self.dim}")
        if self.step_fn is not None:
            Y, idx = self.step_fn(X, rng)
        else:
            idx = self.selector.sample(X, rng)
            if self.selected_apply is not None:
                Y = self.selected_apply(X, idx)
            else:
                Y = np.empty_like(X)
                for k in np.unique(idx):
                    mask = idx == k
                    Y[mask] = self.branches[int(k)](X[mask])
        if self.noise_sigma > 0:
            Y = Y + self.noise_sigma * rng.standard_normal(Y.shape)
        return Y, idx


def markov_step(ifs: StochasticIFS, x: np.ndarray, rng: np.random.Generator):
    """Sample xi ~ p(x) and return (w_xi(x) + sigma * g, xi)."""
    y, idx = ifs.step_batch(np.asarray(x, dtype=np.float64)[None, :], rng)
    return y[0], idx[0]


def transfer_step(ifs: StochasticIFS, mu: PointCloud, rng: np.random.Generator) -> PointCloud:
    """One sample of the pushforward of mu by the stochastic step (weights kept)."""
    Y, _ = ifs.step_batch(mu.points, rng)
    return PointCloud(Y, mu.weights)


def hutchinson_step(ifs: StochasticIFS, K: PointCloud, cap: int | None = 100_000,
                    rng: np.random.Generator | None = None) -> PointCloud:
    """Union of branch images of K, subsampled uniformly above ``cap`` points."""
    if ifs.branches is None:
        raise UnsupportedInstanceError("set iteration needs an explicit branch family")
    if cap is not None and cap < K.n:
        raise ConfigError("cap must be at least the current point count")
    images = np.concatenate([np.atleast_2d(w(K.points)) for w in ifs.branches], axis=0)
    if cap is not None and images.shape[0] > cap:
        rng = rng or np.random.default_rng(0)
        images = images[rng.choice(images.shape[0], size=cap, replace=False)]
    return PointCloud.from_points(images)


def hutchinson_iterates(ifs: StochasticIFS, K0: PointCloud, iters: int,
                        cap: int | None = 100_000, seed: int = 0) -> list[PointCloud]:
    rng = np.random.default_rng(seed)
    out = [K0]
    for _ in range(iters):
        out.append(hutchinson_step(ifs, out[-1], cap=cap, rng=rng))
    return out


def sample_attractor(ifs: StochasticIFS, n: int, burn_in: int, rng: np.random.Generator,
                     allow_uncertified: bool = False) -> PointCloud:
    """Terminal states of n independent chains started from standard Gaussians.

    Refuses to run on systems that fail average-contraction certification
    unless ``allow_uncertified`` is set.  Aborts when any coordinate passes
    the divergence guard.
    """
    X = rng.standard_normal((n, ifs.dim))
    if not allow_uncertified:
        estimate, ok = certify_average_contraction(ifs, PointCloud.from_points(X))
        if not ok:
            raise CertificationError(
                f"average-contraction estimate {estimate:.4g} >= 1; "
                "pass allow_uncertified=True to sample anyway"
            )
    for _ in range(burn_in):
        X, _ = ifs.step_batch(X, rng)
        if np.abs(X).max() > DIVERGENCE_GUARD:
            raise InstabilityError(
                f"coordinate exceeded {DIVERGENCE_GUARD:g} during attractor sampling"
            )
    return PointCloud.from_points(X)


# ---------------------------------------------------------------------------
# certification and bounds


def _branch_certs(ifs: StochasticIFS) -> np.ndarray:
    if ifs.branches is None:
        raise CertificationError("certification needs an explicit branch family")
    certs = [w.lipschitz_cert for w in ifs.branches]
    if any(c is None for c in certs):
        raise CertificationError("every branch needs a Lipschitz certificate")
    return np.asarray(certs, dtype=np.float64)


def certify_average_contraction(ifs: StochasticIFS, probe: PointCloud | None = None,
                                power: int = 2):
    """sup_x sum_xi p_xi(x) c_xi^power, estimated on probe points.

    power=2 is the invariant-measure condition; power=1 the strong-average
    variant that also controls the barycentric map.  For place-independent
    selectors the probe is irrelevant and a single evaluation suffices.  For
    place-dependent selectors the sup is heuristically estimated on the probe
    plus its one-step image.  Stage cascades multiply per-stage estimates.
    """
    if ifs.stages is not None:
        estimate = 1.0
        for stage in ifs.stages:
            est_k, _ = certify_average_contraction(stage, probe, power)
            estimate *= est_k
        return estimate, bool(estimate < 1.0)
    certs = _branch_certs(ifs) ** power
    if ifs.is_place_independent():
        estimate = float(ifs.selector.weights() @ certs)
    else:
        if probe is None:
            raise CertificationError("place-dependent certification needs a probe cloud")
        pts = probe.points
        img, _ = ifs.step_batch(pts, np.random.default_rng(0))
        both = np.concatenate([pts, img], axis=0)
        P = _validate_rows(ifs.selector.probs(both))
        estimate = float((P @ certs).max())
    return estimate, bool(estimate < 1.0)


def certification_record(ifs: StochasticIFS, probe: PointCloud | None = None,
                         power: int = 2) -> str:
    """One-line JSON certification record."""
    estimate, ok = certify_average_contraction(ifs, probe, power)
    return json.dumps(
        {"sup_estimate": estimate, "certified": ok,
         "probe_size": 0 if probe is None else probe.n},
        separators=(", ", ": "),
    )


@dataclass(frozen=True)
class CollageBound:
    epsilon: float
    c: float
    bound: float

    def __post_init__(self):
        assert abs(self.bound - self.epsilon / (1.0 - self.c)) <= 1e-12 * max(1.0, self.bound)


def collage_bound(epsilon: float, c: float) -> CollageBound:
    """Distance-to-fixed-point bound epsilon / (1 - c) for a c-contraction."""
    if not 0.0 <= c < 1.0:
        raise ConfigError(f"contraction constant must lie in [0, 1), got {c}")
    if epsilon < 0.0:
        raise ConfigError("epsilon must be nonnegative")
    return CollageBound(epsilon, c, epsilon / (1.0 - c))


def lyapunov_exponent_mc(ifs: StochasticIFS, steps: int, rng: np.random.Generator) -> float:
    """Monte-Carlo average of log c_xi along a sampled branch sequence."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if not ifs.is_place_independent():
        raise UnsupportedInstanceError("Lyapunov sampling is defined for the place-independent case")
    certs = _branch_certs(ifs)
    if np.any(certs == 0.0):
        return -math.inf  # documented sentinel: a zero-certificate branch
    q = ifs.selector.weights()
    draws = rng.choice(certs.size, size=steps, p=q)
    return float(np.log(certs[draws]).mean())


def barycentric_map(ifs: StochasticIFS, x: np.ndarray) -> np.ndarray:
    """Selector-weighted average of branch outputs (the deterministic block)."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    squeeze = np.asarray(x).ndim == 1
    if ifs.selector.kind == "dirac":
        idx = ifs.selector.sample(X, np.random.default_rng(0))
        if ifs.selected_apply is not None:
            out = ifs.selected_apply(X, idx)
        else:
            out = np.stack([ifs.branches[int(k)](X[i]) for i, k in enumerate(idx)])
        return out[0] if squeeze else out
    if ifs.branches is None:
        raise UnsupportedInstanceError("barycentric map needs an explicit branch family")
    P = _validate_rows(ifs.selector.probs(X))
    out = np.zeros_like(X)
    for k, w in enumerate(ifs.branches):
        out += P[:, k : k + 1] * np.atleast_2d(w(X))
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# classic families


def sierpinski_ifs(radius: float = 1.0, noise_sigma: float = 0.0) -> StochasticIFS:
    """Three half-scale maps toward the vertices of an equilateral triangle."""
    verts = radius * np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3.0) / 2.0]])
    branches = [AffineBranch(0.5 * np.eye(2), v / 2.0) for v in verts]
    return StochasticIFS(branches, ConstantSelector(np.zeros(3)), noise_sigma, dim=2)


def cantor_ifs() -> StochasticIFS:
    """The middle-thirds pair x/3 and x/3 + 2/3 on the line."""
    branches = [AffineBranch([[1.0 / 3.0]], [0.0]), AffineBranch([[1.0 / 3.0]], [2.0 / 3.0])]
    return StochasticIFS(branches, ConstantSelector(np.zeros(2)), 0.0, dim=1)


def half_double_ifs(p: float) -> StochasticIFS:
    """1-D pair {x/2 with prob p, 2x with prob 1-p}: Lyapunov-stable yet
    barycentrically expanding for p in (1/2, 2/3)."""
    if not 0.0 < p < 1.0:
        raise ConfigError("p must lie in (0, 1)")
    branches = [AffineBranch([[0.5]], [0.0]), AffineBranch([[2.0]], [0.0])]
    logits = np.log(np.array([p, 1.0 - p]))
    return StochasticIFS(branches, ConstantSelector(logits), 0.0, dim=1)
