#!/usr/bin/env python3
"""Contraction-cap sweep: one capped MoE per cap, bound vs estimate CSV + plot.

Uses a shorter schedule than the headline run (the bound holds at any stage
of training); raise [train] epochs for publication-grade curves.
"""
import pathlib
import sys

from ifslab.cli import main

CONFIG = """\
[dataset]
kind = two_moons
n = 2048
noise = 0.1
radius = 2.0
seed = 0

[architecture]
family = moe
experts = 8
width = 32
depth = 1

[train]
epochs = 300
batch_size = 256
lr = 1e-3
blur = 0.05
sigma = 0.04
cap = 0.9
seed = 0

[bound]
caps = 0.3,0.5,0.7,0.9
seeds = 0,1,2
mc_batches = 8
mc_batch_size = 512
burn_in = 100
reference_n = 50000

[output]
dir = out/bound_sweep
plot = true
"""

if __name__ == "__main__":
    out = pathlib.Path("out/bound_sweep")
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "run.cfg"
    cfg.write_text(CONFIG)
    sys.exit(main(["--config", str(cfg), "bound-sweep"]))
