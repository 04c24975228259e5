#!/usr/bin/env python3
# Scoring bit sequences with the test battery.
#
# The reward of every environment is avg_nist: each eligible test contributes
# the mean of its P-values, or zero if any of them is below 0.01.

# %%
import numpy as np

from rlprng.bitseq import BitSequence
from rlprng.nist import avg_nist, eligible_tests, run_battery

# %% Which tests run depends on the length of the sequence.
for n in (10, 40, 80, 200, 1000):
    print(n, eligible_tests(n))

# %% A fair-coin sequence, a biased one and a periodic one.
rng = np.random.default_rng(0)
fair = BitSequence(rng.integers(0, 2, 1000))
biased = BitSequence((rng.random(1000) < 0.6).astype(int))
periodic = BitSequence.from_string("0110" * 250)

for name, seq in [("fair", fair), ("biased", biased), ("periodic", periodic)]:
    print(f"--- {name}")
    print(run_battery(seq).format())

# %% Random sequences score about 0.5 on average, at every length used here.
for n in (80, 200, 505, 1010):
    scores = [avg_nist(BitSequence(rng.integers(0, 2, n))) for _ in range(200)]
    print(f"n={n:5d}  mean {np.mean(scores):.3f}  std {np.std(scores):.3f}")
