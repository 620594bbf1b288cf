"""Train a single histogram gradient-boosted binary classifier.

The training objective (log loss plus the per-tree leaf penalty) never
increases from one tree to the next, and the model survives a save/load
round trip exactly.
"""
import tempfile
from pathlib import Path

import numpy as np

from vulnboost.gbdt import GbdtParams, load_model, save_model, train_binary

rng = np.random.default_rng(0)
X = rng.normal(size=(1000, 4))
y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)  # XOR: needs depth 2

params = GbdtParams(n_estimators=40, learning_rate=0.2, num_leaves=8, min_data_in_leaf=10)
model = train_binary((X, y), params)
objective = [model.objective(X, y, k) for k in range(0, len(model.trees) + 1, 10)]
print("objective every 10 trees:", [round(v, 2) for v in objective])
print("training accuracy:", np.mean((model.predict_proba(X) >= 0.5) == y))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "xor.model"
    save_model(model, path)
    same = np.array_equal(model.predict_proba(X), load_model(path).predict_proba(X))
    print("model file lines:", len(path.read_text().splitlines()), "reload identical:", same)
