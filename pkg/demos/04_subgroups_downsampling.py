"""
Subgroup AUROC and the downsampling experiment
==============================================

Break test performance down by gender, race and age band, then retrain
with the Caucasian training rows cut to the size of the Asian group.
"""

import tempfile

from ecglab import cohort, evaluation, gbdt, ingest, split, synth

out = tempfile.mkdtemp(prefix="ecglab_demo_")
generated = synth.generate(synth.SynthConfig(n_subjects=4000, seed=5), out)
datasets = {ds.task.key: ds for ds in cohort.build_cohort(
    ingest.load_ecg_table(generated.ecg_path), ingest.load_lab_table(generated.lab_path))}
assignment = split.stratified_group_split(list(datasets.values()), seed=5)
train, validation, test = split.apply_assignment(datasets["potassium__low"], assignment)

model = gbdt.train(train, validation)
for category in ("gender", "race", "age"):
    reports = evaluation.subgroup_eval(model, test, category, bootstrap_n=500, seed=5)
    print(evaluation.format_table(evaluation.subgroup_rows(reports), evaluation.SUBGROUP_COLUMNS,
                                  title=category.capitalize()))

# same validation fold, smaller Caucasian training population
reduced = evaluation.downsample_train_group(train, "race", "Caucasians", "Asians", seed=5)
print(len(train), "->", len(reduced), "training rows")
retrained = gbdt.train(reduced, validation)
reports = evaluation.subgroup_eval(retrained, test, "race", bootstrap_n=500, seed=5)
print(evaluation.format_table(evaluation.subgroup_rows(reports), evaluation.SUBGROUP_COLUMNS,
                              title="Race, after downsampling"))
