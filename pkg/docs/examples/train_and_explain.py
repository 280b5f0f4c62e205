"""Generate a small synthetic corpus, train the hierarchy, score it and rank feature categories.

Runs in well under a minute on one CPU because the sequence model is shrunk.
"""

from osslifecycle.explain import FeatureCategoryMap, attribute_model, combine_categories
from osslifecycle.features import FeaturePipeline, split_dataset
from osslifecycle.ingestion import SynthesisConfig, generate_synthetic_corpus
from osslifecycle.nn import heavy_config
from osslifecycle.training import build_task_dataset
from osslifecycle.workflow import evaluate_pipeline, train_hierarchy

repos = generate_synthetic_corpus(SynthesisConfig.from_mix(600, noise_level=0.3, seed=3))
split = split_dataset(repos, seed=0)
byid = {r.repo_id: r for r in repos}
parts = {k: [byid[i] for i in split.part(k)] for k in ("train", "val", "test")}
pipe = FeaturePipeline().fit(parts["train"])
fs = {k: pipe.transform(v) for k, v in parts.items()}

dim = fs["train"].tabular.shape[1]
hier = train_hierarchy(fs["train"], fs["val"], seed=0,
                       model_configs={"heavy": heavy_config(dim, d_model=32, n_layers=2, ff_dim=64)})
ev = evaluate_pipeline(fs["test"], hier.models)
print(f"accuracy {ev.report.accuracy:.3f}  macro F1 {ev.report.macro_f1:.3f}")
for name, m in ev.report.per_class.items():
    print(f"  {name:<11} P {m.precision:.3f} R {m.recall:.3f} F1 {m.f1:.3f} (n={m.support})")

# every prediction carries the probabilities that produced it
t = ev.batch.traces[0]
print("first trace:", t.repo_id, t.route, t.final.value, round(t.confidence, 3))

cmap = FeatureCategoryMap.default()
reports = []
for name in ("stage1", "light", "expert"):
    ds = build_task_dataset(fs["test"], name)
    reports.append(attribute_model(name, hier.models.get(name), ds.inputs, "grad_input", cmap, targets=ds.targets))
ds = build_task_dataset(fs["test"], "heavy")
reports.append(attribute_model("heavy", hier.models.heavy, tuple(x[:50] for x in ds.inputs), "ig", cmap, steps=32))
for cat, v in sorted(combine_categories(reports).items(), key=lambda kv: -kv[1]):
    print(f"  {cat:<36} {v:.3f}")
