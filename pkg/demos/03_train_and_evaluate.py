#!/usr/bin/env python3
# A small PPO run end to end: train, evaluate, write bitfiles, render an image.
#
# The budget here is tiny (a few minutes on one core) and is meant to show
# the workflow, not to produce a good generator. The command-line equivalent:
#
#   rlprng train demo.ini -v
#   rlprng evaluate runs/demo_rf/final.ckpt --episodes 3 --emit-sequences runs/demo_rf/seqs
#   rlprng nist-test runs/demo_rf/seqs/sequence_000.txt
#   rlprng render-bits runs/demo_rf/seqs/sequence_000.txt -o seq0.pgm

# %%
from pathlib import Path

import numpy as np

from rlprng import harness
from rlprng.bitseq import BitImageSpec, read_bitfile, render_image, write_pgm

out = Path("runs/demo_rf")
cfg = harness.ExperimentConfig(formulation="rf", N=10, T=99, buffer_episodes=20, epochs=4,
                               lstm_hidden=32, master_seed=3, checkpoint_interval=2, output_dir=str(out))
print(harness.serialize_config(cfg))

# %% Training writes metrics.csv (one row per volley of two epochs) and checkpoints.
result = harness.run_experiment(cfg, log=print)
print((out / "metrics.csv").read_text())

# %% Compare with a random agent under the same configuration.
base = harness.random_baseline(cfg, 40)
print(f"random agent: {base.mean:.3f} +/- {base.std:.3f}")

# %% Evaluate the final policy. N=10 and T=99 give exactly 1000 bits per sequence.
summary = harness.evaluate(out / "final.ckpt", 3, emit_dir=out / "seqs", seed=0)
for path, score in zip(summary.files, summary.scores):
    print(path, f"{score:.6f}")

# %% Render the first sequence as 40 x 25 blocks of 10 px, box-smoothed.
seq = read_bitfile(summary.files[0])
img = render_image(seq, BitImageSpec())
write_pgm(out / "sequence_000.pgm", img)
print(img.shape, img.dtype, np.unique(img)[:5])
