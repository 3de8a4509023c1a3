"""
From baseline to the full method
================================

Train three rungs of the ablation ladder on one seed at the default desk
size (a few minutes on one core), then export the attention-gate strips of
the full model.  The command line runs the whole ladder over five seeds:

    bmcl ablate --out runs/ablation --seeds 0 1 2 3 4
"""

from pathlib import Path

from bmcl.harness.config import RunConfig
from bmcl.harness.experiments import run_ablation
from bmcl.harness.heatmaps import export_attention_heatmaps

base = RunConfig()
out = Path("demo_runs")
report = run_ablation(base, seeds=(0,), output_dir=out, methods=("baseline", "gate", "bmcl"))
print(report.format())

# gate strips: one image per class, rows are feature dimensions, columns samples
from bmcl.synthdata import generate  # noqa: E402

test = generate(base.gen)[2]
summary = export_attention_heatmaps(out / "seed0" / "bmcl" / "checkpoint.npz", test, out / "heatmaps")
print(f"gate mass on class dims {summary['class_mass']:.3f}, on context dims {summary['context_mass']:.3f}")
print("images:", ", ".join(summary["images"][:3]), "...")
