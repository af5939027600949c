"""Collage-error training loop: minimize the Sinkhorn divergence between one
transfer-step sample of a batch and the batch itself.

One trainer owns one model.  Determinism contract: given the same seed the
parameter trajectory is bit-identical, and a checkpoint stores everything
needed (parameters, Adam moments, power-iteration vectors, RNG state) to
continue a run as if it had never stopped.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ot
from .architectures import build_model
from .autodiff_nn import AdamState, ParamTape, adam_step
from .errors import CertificationError, ConfigError, NumericError
from .geometry import PointCloud


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    blur: float = 0.05
    sigma: float = 0.04
    contraction_cap: float | None = 0.9
    seed: int = 0
    routing: str = "sampled"  # sampled | dense
    grad_estimator: str = "pathwise_selected"  # pathwise_selected | relaxed_onehot
    sinkhorn_max_iters: int = 500
    sinkhorn_tol: float = 1e-6
    mc_draws: int = 1
    allow_uncapped: bool = False
    warmup_epochs: int = 0  # contraction warm-up toward the cap, off by default
    warmup_cap_init: float = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.contraction_cap is not None and not 0.0 < self.contraction_cap < 1.0:
            raise ConfigError("contraction_cap must lie in (0, 1) when set")
        if self.routing not in ("sampled", "dense"):
            raise ConfigError(f"unknown routing {self.routing!r}")
        if self.grad_estimator not in ("pathwise_selected", "relaxed_onehot"):
            raise ConfigError(f"unknown grad estimator {self.grad_estimator!r}")
        if self.mc_draws < 1:
            raise ConfigError("mc_draws must be >= 1")

    def sinkhorn(self) -> ot.SinkhornConfig:
        return ot.SinkhornConfig(blur=self.blur, max_iters=self.sinkhorn_max_iters,
                                 tol=self.sinkhorn_tol, debiased=True)


@dataclass
class ReportRow:
    epoch: int
    loss: float
    w2_estimate: float
    sup_c: float
    wallclock_ms: float


@dataclass
class CollageReport:
    rows: list[ReportRow] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    routing: str = "sampled"
    grad_estimator: str = "pathwise_selected"

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,loss,w2_estimate,sup_c,wallclock_ms\n")
            for r in self.rows:
                fh.write(f"{r.epoch},{r.loss:.17g},{r.w2_estimate:.17g},"
                         f"{r.sup_c:.17g},{r.wallclock_ms:.0f}\n")

    def final_loss(self) -> float:
        return self.rows[-1].loss

    def loss_curve(self) -> np.ndarray:
        return np.array([r.loss for r in self.rows])


class LossEval:
    """Outcome of one collage-loss evaluation (grads accumulated on the tape)."""

    __slots__ = ("loss", "w2_estimate", "converged", "tape")

    def __init__(self, loss, w2_estimate, converged, tape):
        self.loss = loss
        self.w2_estimate = w2_estimate
        self.converged = converged
        self.tape = tape


def collage_loss(model, batch: PointCloud, cfg: TrainConfig, rng: np.random.Generator) -> LossEval:
    """Debiased Sinkhorn divergence between a transfer sample and the batch.

    Gradients flow through the sampled points into branch parameters per
    ``cfg.grad_estimator`` and accumulate into ``model.tape.grads`` (caller
    zeroes the tape).  Non-convergence of the OT solve is reported, not raised.
    """
    Xe = model.encode_batch(batch.points)
    target = PointCloud.from_points(Xe)
    scfg = cfg.sinkhorn()
    costs = []
    converged = True
    for _ in range(cfg.mc_draws):
        Y, cache = model.transfer_sample(Xe, rng, cfg.sigma, cfg.routing, cfg.grad_estimator)
        result, gY = ot.divergence_and_grad(PointCloud.from_points(Y), target, scfg)
        model.backward_points(cache, gY / cfg.mc_draws)
        costs.append(result.cost)
        converged = converged and result.converged
    loss = float(np.mean(costs))
    return LossEval(loss, float(np.sqrt(max(loss, 0.0))), converged, model.tape)


def _effective_cap(target: float | None, cfg: TrainConfig, epoch: int) -> float | None:
    if target is None:
        return None
    if cfg.warmup_epochs <= 0 or epoch > cfg.warmup_epochs:
        return target
    # geometric interpolation from the loose warm-up cap down to the target
    t = epoch / cfg.warmup_epochs
    return float(cfg.warmup_cap_init ** (1.0 - t) * target ** t)


def train(model, data: PointCloud, cfg: TrainConfig,
          checkpoint_path=None, start_epoch: int = 0,
          adam: AdamState | None = None, rng: np.random.Generator | None = None,
          report: CollageReport | None = None):
    """Epoch loop: shuffle, batch, collage loss, Adam step, spectral caps.

    Returns ``(model, CollageReport)``.  A NaN loss aborts with a checkpoint
    of the last completed epoch when ``checkpoint_path`` is given.
    """
    if model.composite_cert() is None and not cfg.allow_uncapped:
        raise CertificationError(
            "model carries no contraction certificate; set allow_uncapped to train anyway"
        )
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    adam = adam if adam is not None else AdamState.init(model.tape.n_params, lr=cfg.lr)
    report = report if report is not None else CollageReport(
        routing=cfg.routing, grad_estimator=cfg.grad_estimator)
    target_cap = cfg.contraction_cap if cfg.contraction_cap is not None else model.cap
    if start_epoch == 0:
        model.apply_caps(power_iters=5, cap=_effective_cap(target_cap, cfg, 1))
    t0 = time.perf_counter()
    n = data.n
    batch = min(cfg.batch_size, n)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        step_cap = _effective_cap(target_cap, cfg, epoch)
        perm = rng.permutation(n)
        epoch_costs = []
        for s in range(0, n - batch + 1, batch):
            sel = perm[s : s + batch]
            model.tape.zero_grads()
            ev = collage_loss(model, PointCloud.from_points(data.points[sel]), cfg, rng)
            if not np.isfinite(ev.loss):
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, adam, rng, epoch - 1, cfg)
                raise NumericError(
                    f"non-finite collage loss at epoch {epoch}"
                    + (f"; last good state at {checkpoint_path}" if checkpoint_path else "")
                )
            if not ev.converged:
                report.warnings.append(f"epoch {epoch}: sinkhorn hit the iteration budget")
            adam_step(adam, model.tape)
            if step_cap is not None:
                model.apply_caps(power_iters=1, cap=step_cap)
            epoch_costs.append(ev.loss)
        sup = model.contraction_sup(2) if model.composite_cert() is not None else float("nan")
        mean_cost = float(np.mean(epoch_costs))
        report.rows.append(ReportRow(
            epoch, mean_cost, float(np.sqrt(max(mean_cost, 0.0))),
            sup, (time.perf_counter() - t0) * 1000.0))
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, adam, rng, cfg.epochs, cfg)
    return model, report


# ---------------------------------------------------------------------------
# checkpointing


def _pi_states(model) -> dict:
    out = {}
    for mlp in model.mlps():
        for name, st in mlp._pi_state.items():
            out[name] = st["u"].tolist()
    return out


def _restore_pi_states(model, states: dict) -> None:
    for mlp in model.mlps():
        for name, st in mlp._pi_state.items():
            if name in states:
                st["u"] = np.asarray(states[name], dtype=np.float64)


def save_checkpoint(path, model, adam: AdamState, rng: np.random.Generator,
                    epoch: int, cfg: TrainConfig) -> None:
    model.tape.save(path)
    state = {
        "epoch": epoch,
        "arch": model.describe(),
        "train_config": asdict(cfg),
        "adam": {"m": adam.m.tolist(), "v": adam.v.tolist(), "t": adam.t,
                 "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "rng_state": rng.bit_generator.state,
        "power_iteration": _pi_states(model),
    }
    with open(str(path) + ".state.json", "w", encoding="utf-8") as fh:
        json.dump(state, fh)


def load_checkpoint(path):
    """Rebuild (model, adam, rng, epoch, train_config_dict) from disk."""
    with open(str(path) + ".state.json", "r", encoding="utf-8") as fh:
        state = json.load(fh)
    model = build_model(state["arch"], np.random.default_rng(0))
    model.tape.load_values(path)
    _restore_pi_states(model, state["power_iteration"])
    a = state["adam"]
    adam = AdamState(m=np.asarray(a["m"]), v=np.asarray(a["v"]), t=a["t"],
                     lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state["rng_state"]
    return model, adam, rng, state["epoch"], state["train_config"]


def resume(path, data: PointCloud, cfg: TrainConfig, arch: dict | None = None,
           checkpoint_path=None):
    """Continue a checkpointed run up to ``cfg.epochs`` total epochs.

    When ``arch`` is given it must match the stored layout; mismatches refuse
    with a slice-by-slice diff.
    """
    model, adam, rng, epoch, _ = load_checkpoint(path)
    if arch is not None:
        probe = build_model(arch, np.random.default_rng(0))
        probe.tape.load_values(path)  # raises SchemaError with the diff
        model = probe
        _restore_pi_states(model, json.load(open(str(path) + ".state.json"))["power_iteration"])
    if epoch >= cfg.epochs:
        return model, CollageReport(routing=cfg.routing, grad_estimator=cfg.grad_estimator)
    return train(model, data, cfg, checkpoint_path=checkpoint_path or path,
                 start_epoch=epoch, adam=adam, rng=rng)
