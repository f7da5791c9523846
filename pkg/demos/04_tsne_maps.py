"""Draw the pooled phone vectors on a plane.

Writes coords.csv plus one CSV/SVG scatter per label kind into the folder
given on the command line (default ./tsne_maps). Open the SVGs in a browser:
phone classes form islands, and gender splits each island in two.
"""

import sys
from pathlib import Path

from phoneprobe import export_scatter, generate, mean_pool, preset, tsne
from phoneprobe.embed2d import coords_csv

out = Path(sys.argv[1] if len(sys.argv) > 1 else "tsne_maps")
pooled = mean_pool(*generate(preset("concentrated", n_utterances=80, seed=2)))
emb = tsne(pooled, subset_n=600, perplexity=30, seed=0)
tokens = [pooled.tokens[i] for i in emb.rows]
out.mkdir(parents=True, exist_ok=True)
(out / "coords.csv").write_text(coords_csv(emb, tokens))
for label in ("phone_class", "gender", "language"):
    export_scatter(emb, tokens, label, out)
print(f"KL {emb.kl_initial:.2f} -> {emb.kl_final:.2f}; maps written to {out.resolve()}")
