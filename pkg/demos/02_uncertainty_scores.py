"""Anatomy of the uncertainty score and the reliability gate.

The score blends two teacher signals per unlabeled sample:

    s(u) = gamma * (1 - max K-way probability) + (1 - gamma) * P(extra class)

Every unlabeled sample joins the soft-weighted unseen set with weight s(u);
separately, a sample becomes pseudo-labeled seen-class training data only if
the K-way confidence beats both the threshold tau and its own score.

Run: python demos/02_uncertainty_scores.py
"""

import numpy as np

from dts_ssl import (
    TrainConfig,
    build_mismatch_split,
    build_soft_weighted_set,
    generate_synthetic,
    pretrain_teacher,
    reliability_gate,
    uncertainty_score,
)
from dts_ssl.data import feature_scale
from dts_ssl.models import BackboneSpec, derive_pair, init_teacher

# -- hand-computed score examples ------------------------------------------

print("score on hand-built distributions (gamma = 0.5):")
cases = [
    ("confident seen", np.array([0.97, 0.01, 0.01, 0.01]), 0.01),
    ("uniform K-way", np.full(4, 0.25), 0.2),
    ("confident unseen", np.array([0.4, 0.3, 0.2, 0.1]), 0.85),
]
for name, p_its, extra in cases:
    p_ots = np.append(np.full(4, (1 - extra) / 4), extra)
    s = uncertainty_score(p_its, p_ots, gamma=0.5)
    gate = reliability_gate(p_its, s, tau=0.85)
    print(
        f"  {name:18s} 1-max={s.one_minus_max_its:.2f} extra={s.ots_last:.2f} "
        f"-> s={s.value:.3f}, gate {'passes' if gate.passed else 'rejects'}"
    )

# -- scores from real pre-trained teachers ----------------------------------

dataset = generate_synthetic(4, 2, 16, 400, separation=3.0, noise=1.6, seed=1)
split = build_mismatch_split(dataset, [1, 2, 3, 4], 0.5, m=80, n=800, seed=1)
config = TrainConfig.desk(seed=1, hidden_widths=(16, 16), feature_dim=8)

teacher = init_teacher(BackboneSpec(split.dim, (16, 16), 8), split.K, seed=1)
pretrain_teacher(
    teacher, split.labeled_x, split.labeled_y, config,
    rng=np.random.default_rng(1), scale=feature_scale(split),
)
inlier = derive_pair(teacher, "inlier")
outlier = derive_pair(teacher, "outlier")

weighted = build_soft_weighted_set(split.unlabeled_x, inlier.teacher, outlier.teacher, gamma=0.5)
weights = weighted.weights()
flags = split.unlabeled_is_unseen

print("\nafter pre-training (teachers only, no unlabeled training yet):")
print(f"  mean score on hidden seen samples:   {weights[~flags].mean():.4f}")
print(f"  mean score on hidden unseen samples: {weights[flags].mean():.4f}")
print("  (the gap is the raw signal that the unseen-class supervision amplifies)")

bins = np.linspace(0, weights.max() + 1e-9, 8)
print("\nscore histogram (seen vs unseen):")
for lo, hi in zip(bins[:-1], bins[1:]):
    seen_n = int(((weights >= lo) & (weights < hi) & ~flags).sum())
    unseen_n = int(((weights >= lo) & (weights < hi) & flags).sum())
    print(f"  [{lo:.3f}, {hi:.3f})  seen {'#' * (seen_n // 8):<40s} unseen {'#' * (unseen_n // 8)}")
