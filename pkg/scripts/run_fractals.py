#!/usr/bin/env python3
"""Classic set-valued runs: Sierpinski iterates + chaos game, and the
stochastic-vs-barycentric stability example."""
import sys

from ifslab.cli import main

if __name__ == "__main__":
    code = main(["--out", "out/sierpinski", "--plot", "sierpinski"])
    code = code or main(["--out", "out/dichotomy", "appendix-c"])
    sys.exit(code)
