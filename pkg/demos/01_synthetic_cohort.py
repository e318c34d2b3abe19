"""
Building a labeled cohort from ECG and lab tables
=================================================

Generate a synthetic cohort, load both tables, pair every ECG with its
nearest lab draw and look at the resulting low/high tasks.
"""

import tempfile
from collections import Counter

from ecglab import cohort, ingest, split, synth

# a small cohort is enough to see every moving part
out = tempfile.mkdtemp(prefix="ecglab_demo_")
generated = synth.generate(synth.SynthConfig(n_subjects=600, seed=1), out)
print(open(generated.manifest_path).read())

ecgs = ingest.load_ecg_table(generated.ecg_path)
labs = ingest.load_lab_table(generated.lab_path)
print(len(ecgs), "ECGs,", len(labs), "lab observations,", len(ecgs.rejects) + len(labs.rejects), "rejected rows")
print(ecgs.records[0])

# thresholds are medians of the per-observation reference bounds
for analyte in labs.analytes:
    low = cohort.resolve_threshold(labs.observations, analyte, "low")
    high = cohort.resolve_threshold(labs.observations, analyte, "high")
    print(f"{analyte:<14} low < {low}   high > {high}")

# one dataset per (analyte, direction); 15 features per row, NaN = missing
datasets = cohort.build_cohort(ecgs, labs, horizon_s=3600)
for ds in datasets:
    print(f"{ds.task.key:<22} n={len(ds):<5} positives={ds.n_positive}")

ds = datasets[0]
print(dict(zip(ds.feature_names, ds.X[0].tolist())))

# subjects go to exactly one fold; tasks need 10 cases per class per fold
assignment = split.stratified_group_split(datasets, seed=1)
print(Counter(assignment.mapping.values()))
kept = cohort.filter_tasks(datasets, assignment)
print("retained:", [d.task.key for d in kept])
