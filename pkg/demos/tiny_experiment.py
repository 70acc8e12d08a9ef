"""Run a shrunken copy of the main preset and print the gain decomposition.

Two seeds, a few hundred steps per phase: finishes in well under a minute.
The numbers are noisy at this size; the full preset (``recdistill ablate
main``) is the real run.
"""

from __future__ import annotations

from recdistill.config import apply_overrides
from recdistill.pipeline import run_experiment
from recdistill.presets import preset

spec = apply_overrides(
    preset("main"),
    {
        "schedule.batch_steps": "400",
        "schedule.stream_steps": "400",
        "schedule.eval_every": "200",
        "schedule.eval_size": "5000",
        "experiment.seeds": "0,1",
    },
)
report = run_experiment(spec)
last = report.steps()[-1]
for seed in report.seeds:
    v = {m: report.value("distill", seed, m, last) for m in
         ("auc_teacher", "auc_student_raw", "auc_student_distill_main", "gain_scale", "gain_distill", "eta")}
    print(
        f"seed {seed}: teacher {v['auc_teacher']:.4f}  baseline {v['auc_student_raw']:.4f}  "
        f"distilled {v['auc_student_distill_main']:.4f}  gain_scale {v['gain_scale']:+.4f}  "
        f"gain_distill {v['gain_distill']:+.4f}  eta {v['eta']:.2f}"
    )
