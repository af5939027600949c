#!/usr/bin/env python3
"""Full two-moons MoE training run with the paper-scale settings.

Writes the default config next to the outputs so the run is reproducible
with the CLI alone.  Expect roughly half an hour single-threaded.
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
epochs = 2000
batch_size = 256
lr = 1e-3
blur = 0.05
sigma = 0.04
cap = 0.9
seed = 0

[output]
dir = out/two_moons
plot = true
"""

if __name__ == "__main__":
    out = pathlib.Path("out/two_moons")
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "run.cfg"
    cfg.write_text(CONFIG)
    sys.exit(main(["--config", str(cfg), "two-moons-train"]))
