"""Turn raw asset records into a numeric feature matrix.

Version strings are first collapsed to a coarser concept (Ubuntu18.04 and
Ubuntu18.10 are both "Ubuntu18"), dates become spreadsheet day serials and
categorical columns get sorted-order integer codes.
"""
from vulnboost.dataset import (FeatureSchema, concept_merge, date_to_serial, encode_dataset,
                               fit_encoder, synth_dataset)

for value, rule in [("Ubuntu18.04", "major-only"), ("PHP5.3.29", "major-minor"),
                    ("Apache2.4.33", "major-minor"), ("CVE-2021-44228", "year-only")]:
    print(f"{value:>16} --{rule}--> {concept_merge(value, rule)}")
print("2022/4/7 ->", date_to_serial("2022/4/7"))

schema = FeatureSchema.default()
records = synth_dataset(110, (1.0,) * 11, seed=1)
print("\nfirst raw record:", records[0])

encoder = fit_encoder(records, schema)
ds = encode_dataset(records, schema, encoder)
print("encoded row:     ", ds.features[0].tolist(), "grade", ds.labels[0])
print("os categories:   ", encoder.classes["os"])
