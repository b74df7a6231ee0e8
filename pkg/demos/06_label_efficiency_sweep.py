"""A miniature label-efficiency sweep, emitting the report tables.

This is the experiment harness behind the headline result: subsample the
labeled subjects at several fractions, train scratch and pretrained arms on
identical subsets, and evaluate everything on one fixed test split. The
full-size analogue sweeps 1% / 10% / 100% of subjects with three seeds; here
we shrink everything so it finishes in a few minutes.
"""

import json
from pathlib import Path

from sleepstager import ModelConfig, SplitSpec, TrainConfig, split_subjectwise, synthesize_corpus
from sleepstager.experiments import (
    METHOD_PT,
    METHOD_SCRATCH,
    SweepSpec,
    emit_report,
    run_label_efficiency,
    write_manifest,
)

corpus = synthesize_corpus(40, 20, (0.18, 0.15, 0.42, 0.12, 0.13), 100.0, seed=13)
splits = split_subjectwise(corpus, SplitSpec(0.6, 0.2, 0.2, seed=0))
print("split sizes:", [s.n_subjects for s in splits], "subjects")

spec = SweepSpec(
    label_fractions=(0.25, 1.0),
    methods=(METHOD_SCRATCH, METHOD_PT),
    seeds=(0,),
    model_cfg=ModelConfig(d_model=48, depth=2, n_heads=4, d_ff=96, dropout=0.1),
    pretrain_cfg=TrainConfig(learning_rate=1e-3, n_epochs=30, batch_size=64, seed=0),
    finetune_cfg=TrainConfig(n_epochs=20, batch_size=32, lr_grid=(3e-4,), seed=0),
)

out_dir = Path("sweep_output")
out_dir.mkdir(exist_ok=True)


def show(row):
    print(f"  {row['method']:>17} fraction {row['fraction']:<5} "
          f"bal acc {row['bal_acc']:.3f}")


print("\nrunning cells (method x fraction):")
result = run_label_efficiency(spec, splits, out_dir=out_dir, progress=show)

emit_report(result, out_dir / "report.csv", "csv")
emit_report(result, out_dir / "report.json", "json")
write_manifest(result, spec, out_dir / "manifest.json")

print(f"\nwrote {out_dir}/report.csv:")
print((out_dir / "report.csv").read_text())

manifest = json.loads((out_dir / "manifest.json").read_text())
print(f"manifest records {len(manifest['rows'])} rows with subject provenance "
      f"and checkpoint paths")
