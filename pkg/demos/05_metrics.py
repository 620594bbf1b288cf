"""Confusion matrix and macro precision, recall and F1 over the 11 grades."""
import numpy as np

from vulnboost.metrics import confusion_matrix, format_report, micro_recall

rng = np.random.default_rng(5)
truth = rng.integers(0, 11, 500)
# a predictor that is right 70% of the time and otherwise off by one grade
pred = np.where(rng.random(500) < 0.7, truth, np.clip(truth + rng.choice([-1, 1], 500), 0, 10))

cm = confusion_matrix(truth, pred)
print(format_report(cm))
print("micro recall (equals accuracy):", micro_recall(cm))
