"""Experiment runner.

Subcommands: ``sierpinski``, ``two-moons-train``, ``bound-sweep``,
``appendix-c``, ``attractor``.  Exit codes: 0 success, 2 configuration error,
3 numeric abort, 4 IO error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bound as bound_mod
from . import svgplot, trainer
from .architectures import build_model
from .config import RunConfig, load_config
from .errors import (
    CertificationError,
    ConfigError,
    InstabilityError,
    KernelError,
    NotConvergedError,
    NumericError,
    SchemaError,
    UnsupportedInstanceError,
)
from .geometry import DatasetSpec, PointCloud, generate, hausdorff_distance
from .ifs_core import (
    barycentric_map,
    half_double_ifs,
    hutchinson_iterates,
    lyapunov_exponent_mc,
    markov_step,
    sample_attractor,
    sierpinski_ifs,
)
from .stats import box_counting_dimension, cloud_spread
from .trainer import TrainConfig

_CONFIG_EXIT = 2
_NUMERIC_EXIT = 3
_IO_EXIT = 4


def _out_dir(args, cfg: RunConfig | None) -> Path:
    if args.out is not None:
        d = Path(args.out)
    elif cfg is not None:
        d = Path(cfg.get("output", "dir"))
    else:
        d = Path("out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _want_plot(args, cfg: RunConfig | None) -> bool:
    return bool(args.plot or (cfg is not None and cfg.get("output", "plot")))


def cmd_sierpinski(args) -> int:
    out = _out_dir(args, None)
    rng = np.random.default_rng([args.seed, 11])
    ifs = sierpinski_ifs()
    start = PointCloud.from_points([[0.0, 0.0]])
    iterates = hutchinson_iterates(ifs, start, args.iters, seed=args.seed)
    for k, cloud in enumerate(iterates):
        cloud.to_csv(out / f"sierpinski_T{k}.csv")
    attractor = sample_attractor(ifs, args.samples, args.burn_in, rng)
    attractor.to_csv(out / "sierpinski_attractor.csv")
    d_h = hausdorff_distance(iterates[-1], attractor)
    box_dim = box_counting_dimension(attractor.points)
    summary = {"iters": args.iters, "samples": args.samples,
               "hausdorff_T_last_vs_attractor": d_h, "box_dimension": box_dim,
               "box_dimension_reference": math.log(3) / math.log(2)}
    with open(out / "sierpinski_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
    print(f"d_H(T_{args.iters}, chaos-game attractor) = {d_h:.5f}")
    print(f"box-counting dimension = {box_dim:.4f} (log3/log2 = {math.log(3)/math.log(2):.4f})")
    if _want_plot(args, None):
        svgplot.scatter_plot(out / "sierpinski.svg",
                             [(iterates[-1].points, f"T_{args.iters}"),
                              (attractor.points, "chaos game")],
                             title="Hutchinson iterate vs sampled attractor")
    return 0


def _build_from_config(cfg: RunConfig):
    spec = cfg.dataset_spec()
    data = generate(spec)
    t = cfg.sections["train"]
    arch = cfg.arch_dict(data.dim)
    model = build_model(arch, np.random.default_rng([t["seed"], 0]))
    family = arch["family"]
    train_cfg = TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], blur=t["blur"],
        sigma=t["sigma"], contraction_cap=t["cap"] if family == "moe" else None,
        seed=t["seed"], routing=t["routing"], grad_estimator=t["grad_estimator"],
        sinkhorn_max_iters=t["sinkhorn_max_iters"], sinkhorn_tol=t["sinkhorn_tol"],
        mc_draws=t["mc_draws"], warmup_epochs=t["warmup_epochs"],
        allow_uncapped=family != "moe" or t["cap"] is None,
    )
    return data, model, train_cfg


def cmd_two_moons_train(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    out = _out_dir(args, cfg)
    data, model, train_cfg = _build_from_config(cfg)
    ckpt = out / "model.ckpt"
    model, report = trainer.train(model, data, train_cfg, checkpoint_path=ckpt)
    report.to_csv(out / "collage_report.csv")
    b = cfg.sections["bound"]
    rng = np.random.default_rng([train_cfg.seed, 33])
    n_att = cfg.get("output", "attractor_n")
    ifs = model.to_ifs()
    att = sample_attractor(ifs, max(1, n_att // getattr(model, "context", 1)),
                           b["burn_in"], rng, allow_uncertified=True)
    att_pts = model.decode_points(att.points)
    PointCloud.from_points(att_pts).to_csv(out / "attractor.csv")
    print(f"trained {model.family}: first-epoch loss {report.rows[0].loss:.6f}, "
          f"final loss {report.rows[-1].loss:.6f}")
    if report.warnings:
        print(f"({len(report.warnings)} sinkhorn budget warnings)")
    if _want_plot(args, cfg):
        epochs = [r.epoch for r in report.rows]
        svgplot.line_plot(out / "loss_curve.svg",
                          [(epochs, [r.loss for r in report.rows], "collage loss"),
                           (epochs, [r.w2_estimate for r in report.rows], "W2 estimate")],
                          title="training collage error", xlabel="epoch", logy=True)
        svgplot.scatter_plot(out / "attractor.svg",
                             [(data.points, "data"), (att_pts, "attractor")],
                             title=f"{model.family} attractor vs data")
    return 0


def cmd_bound_sweep(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    out = _out_dir(args, cfg)
    spec = cfg.dataset_spec()
    data = generate(spec)
    b = cfg.sections["bound"]
    reference = generate(replace(spec, n=b["reference_n"], seed=b["reference_seed"]))
    t = cfg.sections["train"]
    bound_cfg = bound_mod.BoundConfig(
        mc_batches=b["mc_batches"], mc_batch_size=b["mc_batch_size"],
        burn_in=b["burn_in"], blur=b["blur"], sinkhorn_max_iters=b["sinkhorn_max_iters"])
    arch = cfg.arch_dict(data.dim)
    if arch["family"] != "moe":
        raise ConfigError("the contraction sweep trains capped moe models")
    for seed in b["seeds"]:
        train_cfg = TrainConfig(
            epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], blur=t["blur"],
            sigma=t["sigma"], contraction_cap=t["cap"], seed=seed,
            routing=t["routing"], grad_estimator=t["grad_estimator"],
            sinkhorn_max_iters=t["sinkhorn_max_iters"], sinkhorn_tol=t["sinkhorn_tol"])

        def factory(cap, rng, _arch=arch):
            a = dict(_arch)
            a["cap"] = cap
            return build_model(a, rng)

        reports = bound_mod.sweep_contraction(
            data, reference, b["caps"], train_cfg,
            replace(bound_cfg, seed=seed), factory)
        path = out / f"bound_sweep_seed{seed}.csv"
        bound_mod.write_bound_csv(path, reports)
        for r in reports:
            flag = "ok" if r.holds() else "VIOLATED"
            print(f"seed {seed} cap {r.cap:g}: gen {r.generalization_estimate:.4f} "
                  f"<= bound {r.bound_value:.4f} + 2se [{flag}]")
        if _want_plot(args, cfg) and reports:
            caps = [r.cap for r in reports]
            svgplot.line_plot(out / f"bound_sweep_seed{seed}.svg",
                              [(caps, [r.generalization_estimate for r in reports], "estimate"),
                               (caps, [r.bound_value for r in reports], "bound")],
                              title="generalization vs bound", xlabel="contraction cap")
    return 0


def cmd_appendix_c(args) -> int:
    out = _out_dir(args, None)
    rows = []
    for p in args.p_values:
        ifs = half_double_ifs(p)
        exponent = lyapunov_exponent_mc(ifs, args.mc_steps, np.random.default_rng([args.seed, 1]))
        formula = (1.0 - 2.0 * p) * math.log(2.0)
        slope = abs(2.0 - 1.5 * p)
        rng = np.random.default_rng([args.seed, 2])
        x = np.array([1.0])
        stochastic = [1.0]
        for _ in range(args.traj_steps):
            x, _ = markov_step(ifs, x, rng)
            stochastic.append(float(x[0]))
        y = np.array([1.0])
        deterministic = [1.0]
        for _ in range(args.traj_steps):
            y = barycentric_map(ifs, y)
            deterministic.append(float(y[0]))
            if abs(y[0]) > 1e9:
                break
        with open(out / f"dichotomy_p{p:g}.csv", "w", encoding="utf-8") as fh:
            fh.write("step,stochastic,deterministic\n")
            for k in range(len(stochastic)):
                det = deterministic[k] if k < len(deterministic) else float("nan")
                fh.write(f"{k},{stochastic[k]:.17g},{det:.17g}\n")
        row = {"p": p, "lyapunov_mc": exponent, "lyapunov_formula": formula,
               "barycentric_slope": slope,
               "stochastic_final_abs": abs(stochastic[-1]),
               "deterministic_final_abs": abs(deterministic[-1])}
        rows.append(row)
        print(f"p={p:g}: lyapunov {exponent:+.4f} (formula {formula:+.4f}), "
              f"barycentric slope {slope:.3f}, |x_stoch| -> {row['stochastic_final_abs']:.3g}, "
              f"|x_det| -> {row['deterministic_final_abs']:.3g}")
    with open(out / "dichotomy_summary.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=1)
    return 0


def cmd_attractor(args) -> int:
    out = _out_dir(args, None)
    model, _, _, _, _ = trainer.load_checkpoint(args.checkpoint)
    rng = np.random.default_rng([args.seed, 44])
    ifs = model.to_ifs()
    n_states = max(1, args.n // getattr(model, "context", 1))
    att = sample_attractor(ifs, n_states, args.burn_in, rng, allow_uncertified=True)
    pts = model.decode_points(att.points)
    PointCloud.from_points(pts).to_csv(out / "attractor.csv")
    print(f"sampled {pts.shape[0]} attractor points "
          f"(burn-in {args.burn_in}, spread {cloud_spread(pts):.4f})")
    if _want_plot(args, None):
        svgplot.scatter_plot(out / "attractor.svg", [(pts, "attractor")],
                             title=f"{model.family} attractor")
    return 0


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ifslab",
                                 description="stochastic-IFS experiments and bounds")
    ap.add_argument("--config", default=None, help="run configuration file")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="master seed override")
    ap.add_argument("--threads", type=int, default=None,
                    help="bound on internal parallelism (results stay deterministic)")
    ap.add_argument("--plot", action="store_true", help="emit SVG plots")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("sierpinski", help="Hutchinson iterates vs chaos game")
    sp.add_argument("--iters", type=int, default=8)
    sp.add_argument("--samples", type=int, default=20000)
    sp.add_argument("--burn-in", type=int, default=200, dest="burn_in")
    sp.set_defaults(fn=cmd_sierpinski)

    tm = sub.add_parser("two-moons-train", help="collage-error training run")
    tm.set_defaults(fn=cmd_two_moons_train)

    bs = sub.add_parser("bound-sweep", help="bound vs estimate across contraction caps")
    bs.set_defaults(fn=cmd_bound_sweep)

    ac = sub.add_parser("appendix-c", help="stochastic vs barycentric stability example")
    ac.add_argument("--p-values", type=float, nargs="+", default=[0.55, 0.6, 0.65])
    ac.add_argument("--mc-steps", type=int, default=100000, dest="mc_steps")
    ac.add_argument("--traj-steps", type=int, default=10000, dest="traj_steps")
    ac.set_defaults(fn=cmd_appendix_c)

    at = sub.add_parser("attractor", help="sample the attractor of a checkpoint")
    at.add_argument("--checkpoint", required=True)
    at.add_argument("--n", type=int, default=4096)
    at.add_argument("--burn-in", type=int, default=100, dest="burn_in")
    at.set_defaults(fn=cmd_attractor)
    return ap


def _apply_threads(n: int | None) -> None:
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        pass  # plain numpy build: computations are already effectively serial


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.seed is None and args.command in ("sierpinski", "appendix-c", "attractor"):
        args.seed = 0
    _apply_threads(args.threads)
    try:
        return args.fn(args)
    except (ConfigError, SchemaError, UnsupportedInstanceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return _CONFIG_EXIT
    except (NumericError, InstabilityError, KernelError, CertificationError,
            NotConvergedError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return _NUMERIC_EXIT
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return _IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
