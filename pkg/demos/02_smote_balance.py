"""Balance a skewed grade distribution with SMOTE.

Every synthetic row lies on the segment between a real row and one of its
k nearest same-grade neighbours; the provenance records say which.
"""
import numpy as np

from vulnboost.dataset import SKEWED_WEIGHTS, FeatureSchema, encode_dataset, synth_dataset
from vulnboost.smote import SmoteConfig, class_distribution, smote_oversample

ds = encode_dataset(synth_dataset(3000, SKEWED_WEIGHTS, seed=2), FeatureSchema.default())
print("before:", class_distribution(ds).tolist())

balanced, prov = smote_oversample(ds, SmoteConfig(k_neighbors=5, seed=2))
print("after: ", class_distribution(balanced).tolist())

# check the segment property for the first few synthetic rows
n = len(ds)
for j, p in enumerate(prov[:3]):
    base, nb = balanced.features[p.base_index], balanced.features[p.neighbor_index]
    err = np.abs(balanced.features[n + j] - (base + p.gap * (nb - base))).max()
    print(f"synthetic row {n + j}: grade {balanced.labels[n + j]}, gap {p.gap:.3f}, error {err:.1e}")
