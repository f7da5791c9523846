"""What survives when frames are replaced by k-means unit ids?

Frames are quantized with codebooks of 50 and 200 units and each phone
token becomes a histogram of its unit ids. Every probe gets worse than on
the continuous features. The gender code is the weakest signal in this
corpus, so a 50-unit codebook folds it away and the larger codebook wins
some of it back.
"""

import warnings

from phoneprobe import assign, fit_kmeans, generate, mean_pool, one_hot_pool, preset, run_probe

LABELS = ("phone_class", "gender", "language")
warnings.simplefilter("ignore")  # unregularized probes on sparse histograms rarely reach the step tolerance

archive, table = generate(preset("quantization", n_utterances=240, seed=3))
pooled = mean_pool(archive, table)
print(f"{len(pooled)} tokens, {archive.total_frames} frames")
print("continuous  " + "  ".join(f"{l}={run_probe(pooled, l, None, 0.85, 0)[1].error_pct:5.1f}%" for l in LABELS))
for k in (50, 200):
    model = fit_kmeans(archive, k, seed=0, n_restarts=2, max_frames=8000)
    units = one_hot_pool(assign(model, archive), table)
    errs = "  ".join(f"{l}={run_probe(units, l, None, 0.85, 0)[1].error_pct:5.1f}%" for l in LABELS)
    print(f"K{k:<9d} {errs}")
