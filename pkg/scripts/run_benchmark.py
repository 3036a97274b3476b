#!/usr/bin/env python3
"""End-to-end synthetic benchmark: generate data, train the full model with
the standard protocol, evaluate the six metrics on the test split, and emit
the size-ratio analysis artifacts.

Usage: python3 scripts/run_benchmark.py [out_dir]
"""

import os
import sys
import time

from caranet.cli import main

OUT = sys.argv[1] if len(sys.argv) > 1 else "runs/benchmark"

CFG = """
data.n_samples = 375
data.extent = 64
data.ratio_lo = 0.005
data.ratio_hi = 0.05
data.blobs_min = 1
data.blobs_max = 3
data.noise = 0.05
data.seed = 0
data.train_fraction = 0.8

model.input_h = 64
model.input_w = 64
model.base_channels = 4
model.decoder_channels = 8
model.seed = 0

train.epochs = 30
train.batch_size = 20
train.seed = 0
train.checkpoint_every = 10
"""


def run(args):
    print("+ caranet " + " ".join(args), flush=True)
    code = main(args)
    if code != 0:
        sys.exit(code)


def main_script():
    os.makedirs(OUT, exist_ok=True)
    cfg_path = os.path.join(OUT, "run.cfg")
    with open(cfg_path, "w") as f:
        f.write(CFG)
    data_dir = os.path.join(OUT, "data")
    train_dir = os.path.join(OUT, "train")
    eval_dir = os.path.join(OUT, "eval")

    t0 = time.time()
    run(["generate", "--spec", cfg_path, "--out", data_dir])
    run(["train", "--config", cfg_path, "--out", train_dir,
         "--set", f"data.manifest={os.path.join(data_dir, 'manifest.tsv')}"])
    run(["eval", "--checkpoint", os.path.join(train_dir, "final.ckpt"),
         "--manifest", os.path.join(data_dir, "manifest.tsv"),
         "--split", "test", "--out", eval_dir])
    run(["analyze", "--reports", os.path.join(eval_dir, "report.csv"),
         "--intervals", "20", "--cutoff", "0.05",
         "--out", os.path.join(OUT, "analysis")])
    print(f"benchmark finished in {time.time() - t0:.0f}s; artifacts under {OUT}/")


if __name__ == "__main__":
    main_script()
