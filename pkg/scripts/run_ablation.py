"""Module and scan-strategy ablation over several seeds.

Runs the full ablation table per seed and reports the seed-mean macro AUC of
every variant together with the two directional comparisons:
vessel scan against raster scan (both modules on), and both modules against
the baseline.
"""

from __future__ import annotations

import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent))
from common import Experiment, Results  # noqa: E402

from vampire import pipeline as pl  # noqa: E402


def main(argv=None) -> Results:
    exp = Experiment.from_args(argv, __doc__, out="runs/ablation")
    res = Results(exp)
    per_variant: dict[tuple[str, str], list[float]] = defaultdict(list)
    for seed in exp.seeds:
        rows = pl.ablate(exp.run_config(seed))
        for (group, variant) in dict.fromkeys((r["group"], r["variant"]) for r in rows):
            auc = float(np.nanmean([r["auc"] for r in rows if (r["group"], r["variant"]) == (group, variant)]))
            per_variant[(group, variant)].append(auc)
            res.add(seed=seed, group=group, variant=variant, auc=auc)
    means = {k: float(np.mean(v)) for k, v in per_variant.items()}
    for (group, variant), m in means.items():
        print(f"{group:8s} {variant:9s} seed-mean macro auc {m:.4f}")
    vessel, linear = means[("strategy", "vessel")], means[("strategy", "linear")]
    both, base = means[("module", "both")], means[("module", "baseline")]
    print(f"vessel >= linear: {vessel >= linear} ({vessel:.4f} vs {linear:.4f})")
    print(f"both >= baseline: {both >= base} ({both:.4f} vs {base:.4f})")
    print(res.write("ablation.json"))
    return res


if __name__ == "__main__":
    main()
