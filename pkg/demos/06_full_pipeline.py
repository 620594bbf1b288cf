"""End to end: synthetic assets, split, SMOTE, one-vs-rest boosting, report.

Set TUNE = True to let a small swarm choose the booster parameters by
cross-validation first (a few minutes on one core).
"""
import tempfile
from pathlib import Path

from vulnboost.dataset import SKEWED_WEIGHTS, FeatureSchema, synth_dataset, write_raw_csv
from vulnboost.gbdt import GbdtParams
from vulnboost.pipeline import PipelineConfig, run_predict, run_train
from vulnboost.qpso import QpsoConfig

TUNE = False

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    data = tmp / "assets.csv"
    write_raw_csv(synth_dataset(2000, SKEWED_WEIGHTS, seed=42), data, FeatureSchema.default())

    cfg = PipelineConfig(input_csv=data, output_dir=tmp / "run", seed=42, tune=TUNE,
                         base_params=GbdtParams(n_estimators=60),
                         qpso=QpsoConfig(n_particles=6, n_iterations=3))
    report = run_train(cfg)
    print(report.to_text())
    print("files written:", sorted(p.name for p in (tmp / "run").iterdir()))

    rows = run_predict(tmp / "run", data)
    print("first predictions:", [r["grade"] for r in rows[:10]])
