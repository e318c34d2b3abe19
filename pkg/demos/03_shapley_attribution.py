"""
Exact Shapley attributions for stump ensembles
==============================================

Each stump splits on one feature, so its Shapley value is just the
learning-rate-scaled leaf value minus its mean over a background set.
"""

import tempfile

import numpy as np

from ecglab import cohort, explain, gbdt, ingest, split, synth

out = tempfile.mkdtemp(prefix="ecglab_demo_")
generated = synth.generate(synth.SynthConfig(n_subjects=2000, seed=3), out)
datasets = {ds.task.key: ds for ds in cohort.build_cohort(
    ingest.load_ecg_table(generated.ecg_path), ingest.load_lab_table(generated.lab_path))}
assignment = split.stratified_group_split(list(datasets.values()), seed=3)

# potassium depends on t_axis and rr_interval in the generator
train, validation, test = split.apply_assignment(datasets["potassium__high"], assignment)
model = gbdt.train(train, validation)
background = explain.sample_background(train, n=1024, seed=0)

a = explain.shap_values(model, test.X[0], background, record_id=test.examples[0].record_id)
print("base value", round(a.base_value, 4), " margin", round(a.margin, 4))
for name, c in zip(model.feature_names, a.contributions):
    if c:
        print(f"  {name:<14}{c:+.4f}")
print("efficiency gap:", a.base_value + a.contributions.sum() - a.margin)

importance = explain.global_importance(model, test, background)
print(importance.as_rows()[:4])

# sign of effect across quartiles of the top feature
top = importance.ranking[0]
for q in explain.directionality_report(model, test, top, background):
    print(f"{top} Q{q.quartile}: [{q.low:.0f}, {q.high:.0f}] n={q.n:<4} mean contribution {q.mean_contribution:+.3f}")

contrib, base = explain.shap_matrix(model, test.X, background)
print("max |efficiency gap| over test fold:", np.abs(base + contrib.sum(1) - model.predict_margin(test.X)).max())
