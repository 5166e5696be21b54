"""
Reading the latent space
========================

Encode every image to its posterior mean, fit LDA on the training split and
classify the test split. Fisher scores rank the latent dimensions, and a
traversal along the best one shows what it encodes.
"""

import numpy as np

from neurovol.analysis import (
    ConfusionStats,
    accuracy,
    fisher_score_per_dim,
    latent_traversal,
    lda_classify,
    lda_fit,
    metadata_bias_report,
    precision_recall,
)
from neurovol.models import ArchitectureConfig, TrainConfig, encode_means, train_vae
from neurovol.phantom import PhantomConfig, generate_dataset

# The published per-class counts (TP, FP, FN, TN) go through the same
# metric path the analysis uses.
published = {"ms": (285, 24, 35, 228), "leuk1": (22, 29, 18, 503), "leuk2": (1, 3, 3, 565),
             "leuk3": (12, 13, 10, 537), "healthy": (138, 45, 48, 341)}
for c, (p, r) in precision_recall(ConfusionStats.from_counts(published)).items():
    print(f"{c:8s} precision {p:.2f} recall {r:.2f}")

manifest, vols = generate_dataset(PhantomConfig(shape=(20, 24, 20)), 60, 4)
train, test = manifest.select("train"), manifest.select("test")
model = train_vae(np.stack([vols[r.image_id] for r in train]), ArchitectureConfig(latent_dim=8),
                  TrainConfig(epochs=5, beta=1e-4, seed=4)).model

mu_tr = encode_means(np.stack([vols[r.image_id] for r in train]), model)
mu_te = encode_means(np.stack([vols[r.image_id] for r in test]), model)
y_tr = [r.class_label for r in train]
labels = [c for c in dict.fromkeys(y_tr) if y_tr.count(c) >= 2]
keep = [i for i, c in enumerate(y_tr) if c in labels]
lda = lda_fit(mu_tr[keep], [y_tr[i] for i in keep], labels)
pred = lda_classify(lda, mu_te)
print("ms-vs-rest test accuracy", accuracy([p == "ms" for p in pred], [r.class_label == "ms" for r in test]))

fisher = fisher_score_per_dim(mu_tr, y_tr)
best = int(np.argmax(fisher))
print("fisher scores", np.round(fisher, 3), "best dim", best)
for v, vol in zip((-1.25, 0.0, 1.25), latent_traversal(model, best, (-1.25, 0.0, 1.25))):
    print(f"z[{best}] = {v:+.2f}: voxels above 0.75 = {int((vol > 0.75).sum())}")

for attr, entry in metadata_bias_report(list(manifest))["attributes"].items():
    for flag in entry["flags"]:
        print(f"bias: {attr} differs between {flag['classes'][0]} and {flag['classes'][1]} by {flag['gap']:.1f}")
