"""How many dimensions does a probe need to read off the language?

Two synthetic corpora carry identical phone, class and gender structure.
They differ only in how the language code is stored: in one dimension, or
smeared thinly over all 64. An l1 probe swept along its regularization path
finds the single dimension in the first corpus and nothing cheap in the
second.
"""

import numpy as np

from phoneprobe import generate, mean_pool, preset, reg_path, run_probe

GRID = list(np.logspace(-4, 0, 9))

for name in ("concentrated", "diffuse"):
    pooled = mean_pool(*generate(preset(name, n_utterances=200, seed=1)))
    curve = reg_path(pooled, "language", GRID, train_fraction=0.85, seed=0)
    _, full = run_probe(pooled, "language", None, 0.85, 0)
    print(f"\n{name}: {len(pooled)} phone tokens, unregularized accuracy {100 - full.error_pct:.1f}%")
    print(curve.to_csv())
    print(f"best accuracy using at most 2 features: {curve.best_within_budget(2):.1f}%")
