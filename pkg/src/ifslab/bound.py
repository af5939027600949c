"""Generalization-bound estimation: every term of
W2(model law, data) <= collage_error/(1-c) + W2(data, empirical)
measured by Monte-Carlo, plus the contraction-constant sweep.

All Wasserstein comparisons use matched-size subsamples (entropic bias then
cancels between terms); instances where both sides hold at most 256 points
are routed to the exact assignment solver instead of Sinkhorn.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ot
from .errors import ConfigError
from .geometry import PointCloud
from .ifs_core import sample_attractor
from .stats import cloud_spread
from .trainer import TrainConfig, train

_EXACT_MAX = 256


@dataclass(frozen=True)
class BoundConfig:
    mc_batches: int = 8
    mc_batch_size: int = 512
    burn_in: int = 100
    blur: float = 0.05
    sinkhorn_max_iters: int = 5000
    sinkhorn_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.mc_batches < 1 or self.mc_batch_size < 2:
            raise ConfigError("mc_batches >= 1 and mc_batch_size >= 2 required")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be >= 0")

    def sinkhorn(self) -> ot.SinkhornConfig:
        return ot.SinkhornConfig(blur=self.blur, max_iters=self.sinkhorn_max_iters,
                                 tol=self.sinkhorn_tol, debiased=True)


@dataclass(frozen=True)
class BoundReport:
    c_theta: float
    epsilon_n_theta: float
    statistical_term: float
    bound_value: float
    generalization_estimate: float
    mc_se: float
    mc_batches: int
    mc_batch_size: int
    burn_in: int
    attractor_spread: float = float("nan")
    cap: float = float("nan")

    def __post_init__(self):
        expected = self.epsilon_n_theta / (1.0 - self.c_theta) + self.statistical_term
        assert abs(self.bound_value - expected) <= 1e-12 * max(1.0, abs(expected))

    def holds(self) -> bool:
        return self.generalization_estimate <= self.bound_value + 2.0 * self.mc_se


def write_bound_csv(path, reports: list[BoundReport]) -> None:
    """CSV schema: cap,epsilon,stat_term,bound,gen_estimate,mc_se."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("cap,epsilon,stat_term,bound,gen_estimate,mc_se\n")
        for r in reports:
            fh.write(f"{r.cap:.17g},{r.epsilon_n_theta:.17g},{r.statistical_term:.17g},"
                     f"{r.bound_value:.17g},{r.generalization_estimate:.17g},{r.mc_se:.17g}\n")


def w2_estimate(a: PointCloud, b: PointCloud, cfg: BoundConfig) -> float:
    """Distance-scale W2 estimate; exact assignment on small equal clouds."""
    if (a.n == b.n and a.n <= _EXACT_MAX and a.is_uniform() and b.is_uniform()):
        return ot.exact_w2(a, b).value
    return ot.sinkhorn_divergence(a, b, cfg.sinkhorn()).value


def _mc(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


def _subsample(cloud: PointCloud, k: int, rng) -> PointCloud:
    return cloud.subsample(min(k, cloud.n), rng)


def collage_error_stats(model, train_cloud: PointCloud, cfg: BoundConfig):
    """Mean and SE of W2(one transfer sample of a subsample, the subsample)."""
    rng = np.random.default_rng([cfg.seed, 101])
    ifs = model.to_ifs()
    vals = []
    for _ in range(cfg.mc_batches):
        sub = _subsample(train_cloud, cfg.mc_batch_size, rng)
        enc = PointCloud.from_points(model.encode_batch(sub.points))
        stepped, _ = ifs.step_batch(enc.points, rng)
        vals.append(w2_estimate(PointCloud.from_points(stepped), enc, cfg))
    return _mc(vals)


def estimate_collage_error(model, train_cloud: PointCloud, cfg: BoundConfig) -> float:
    return collage_error_stats(model, train_cloud, cfg)[0]


def generalization_stats(model, reference: PointCloud, cfg: BoundConfig):
    """Attractor-to-reference W2: one attractor batch against one reference
    subsample per MC batch, everything in the model's state space."""
    rng = np.random.default_rng([cfg.seed, 202])
    ifs = model.to_ifs()
    vals = []
    spreads = []
    for _ in range(cfg.mc_batches):
        n_chains = cfg.mc_batch_size
        att = sample_attractor(ifs, n_chains, cfg.burn_in, rng, allow_uncertified=True)
        ref = _subsample(reference, cfg.mc_batch_size * _ratio(model), rng)
        ref_enc = PointCloud.from_points(model.encode_batch(ref.points))
        vals.append(w2_estimate(att, ref_enc, cfg))
        spreads.append(cloud_spread(PointCloud.from_points(model.decode_points(att.points))))
    return _mc(vals) + (float(np.mean(spreads)),)


def _ratio(model) -> int:
    """Data points consumed per state-space point (context size for contexts)."""
    return getattr(model, "context", 1)


def estimate_generalization(model, reference: PointCloud, cfg: BoundConfig) -> float:
    return generalization_stats(model, reference, cfg)[0]


def statistical_term_stats(model, train_cloud: PointCloud, reference: PointCloud,
                           cfg: BoundConfig):
    """W2 between training subsamples and reference subsamples (matched size)."""
    rng = np.random.default_rng([cfg.seed, 303])
    vals = []
    for _ in range(cfg.mc_batches):
        k = cfg.mc_batch_size * _ratio(model)
        sub_t = _subsample(train_cloud, k, rng)
        sub_r = _subsample(reference, k, rng)
        enc_t = PointCloud.from_points(model.encode_batch(sub_t.points))
        enc_r = PointCloud.from_points(model.encode_batch(sub_r.points))
        vals.append(w2_estimate(enc_t, enc_r, cfg))
    return _mc(vals)


def estimate_statistical_term(model, train_cloud: PointCloud, reference: PointCloud,
                              cfg: BoundConfig) -> float:
    return statistical_term_stats(model, train_cloud, reference, cfg)[0]


def bound_report(model, train_cloud: PointCloud, reference: PointCloud,
                 cfg: BoundConfig, cap: float | None = None) -> BoundReport:
    """Measure every term for one trained model; c is the certified cap."""
    c_theta = cap if cap is not None else model.composite_cert()
    if c_theta is None or not 0.0 <= c_theta < 1.0:
        raise ConfigError("bound evaluation needs a certified contraction constant < 1")
    eps_mean, eps_se = collage_error_stats(model, train_cloud, cfg)
    gen_mean, gen_se, spread = generalization_stats(model, reference, cfg)
    stat_mean, stat_se = statistical_term_stats(model, train_cloud, reference, cfg)
    bound_value = eps_mean / (1.0 - c_theta) + stat_mean
    mc_se = float(np.sqrt((eps_se / (1.0 - c_theta)) ** 2 + stat_se ** 2 + gen_se ** 2))
    return BoundReport(
        c_theta=c_theta, epsilon_n_theta=eps_mean, statistical_term=stat_mean,
        bound_value=bound_value, generalization_estimate=gen_mean, mc_se=mc_se,
        mc_batches=cfg.mc_batches, mc_batch_size=cfg.mc_batch_size, burn_in=cfg.burn_in,
        attractor_spread=spread, cap=float("nan") if cap is None else cap,
    )


def sweep_contraction(data: PointCloud, reference: PointCloud, caps: list[float],
                      train_cfg: TrainConfig, bound_cfg: BoundConfig,
                      model_factory) -> list[BoundReport]:
    """Train one model per cap (shared seeds) and report every bound term.

    ``model_factory(cap, rng)`` builds the untrained model.  Per-cap failures
    are isolated: the failing cap is skipped and the rest still report.
    """
    from dataclasses import replace

    reports = []
    for cap in caps:
        if not 0.0 < cap < 1.0:
            raise ConfigError(f"cap {cap} outside (0, 1)")
        try:
            model = model_factory(cap, np.random.default_rng([train_cfg.seed, 7]))
            cfg_c = replace(train_cfg, contraction_cap=cap)
            model, _ = train(model, data, cfg_c)
            reports.append(bound_report(model, data, reference, bound_cfg, cap=cap))
        except Exception as exc:  # noqa: BLE001 - isolation is the contract
            import sys

            print(f"[sweep] cap={cap} failed: {exc}", file=sys.stderr)
    return reports
