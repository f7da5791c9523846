"""Probing toolkit for frame-level speech representations.

Pools frame features into phone-level vectors, trains sparse logistic
probes, quantizes frames with k-means, scores within-speaker ABX
discrimination and draws 2D t-SNE maps.
"""

from phoneprobe.dataio import (
    AlignmentTable,
    DataError,
    FeatureArchive,
    PhoneToken,
    load_alignments,
    load_archive,
    save_alignments,
    save_archive,
)
from phoneprobe.pooling import PooledDataset, mean_pool, one_hot_pool
from phoneprobe.probe import (
    ProbeModel,
    ProbeReport,
    RegPathCurve,
    chance_baseline,
    count_active_features,
    evaluate_probe,
    reg_path,
    run_probe,
    split_dataset,
    train_probe,
)
from phoneprobe.quantize import ClusterAssignment, KMeansModel, assign, fit_kmeans, onehot_frames
from phoneprobe.abx import AbxResult, dtw_distance, enumerate_cells, score_abx
from phoneprobe.embed2d import Embedding2D, export_scatter, tsne
from phoneprobe.synth import FactorSpec, SynthProfile, generate, preset

__version__ = "0.1.0"
