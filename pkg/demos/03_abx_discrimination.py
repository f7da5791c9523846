"""Can a listener-free test tell phones apart?

ABX takes two tokens of phone A and one of phone B, spoken by the same
speaker in the same left and right context, and asks whether A's second
token is closer to A than to B under frame-wise DTW. The error rate is
averaged over contexts, then speakers, then phone pairs.
"""

from phoneprobe import assign, enumerate_cells, fit_kmeans, generate, onehot_frames, preset, score_abx

archive, table = generate(preset("quantization", n_utterances=800, seed=4))
cells = enumerate_cells(table)
print(f"{len(cells)} minimal-pair cells, e.g. {cells[0].phone_a} vs {cells[0].phone_b} "
      f"between {cells[0].context} for {cells[0].speaker}")

result = score_abx(archive, table)
print(f"continuous frames: {result.error_pct:.2f}% error over {result.n_triplets} triplets")
for k in (50, 200):
    units = onehot_frames(assign(fit_kmeans(archive, k, seed=0, n_restarts=1, max_frames=8000), archive))
    print(f"K{k} one-hot frames: {score_abx(units, table, mode='onehot').error_pct:.2f}% error")

worst = sorted(result.pair_scores.items(), key=lambda kv: -kv[1][0])[:3]
print("hardest pairs:", ", ".join(f"{a}/{b} {err:.1f}%" for (a, b), (err, _) in worst))
