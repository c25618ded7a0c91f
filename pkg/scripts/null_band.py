"""Macro AUC of untrained models, one fold-averaged value per seed."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent))
from common import Experiment, Results  # noqa: E402

from vampire import pipeline as pl  # noqa: E402


def main(argv=None) -> Results:
    exp = Experiment.from_args(argv, __doc__, out="runs/null", seeds=tuple(range(10)))
    res = Results(exp)
    for seed in exp.seeds:
        cfg = exp.run_config(seed)
        samples, plan = pl.setup_run(cfg)
        aucs = [pl.evaluate(None, f, cfg, samples, plan, write=False)["macro"]["auc"] for f in range(plan.k)]
        res.add(seed=seed, auc=float(np.nanmean(aucs)), lowest_fold=float(np.min(aucs)), highest_fold=float(np.max(aucs)))
    aucs = [r["auc"] for r in res.rows]
    print(f"range [{min(aucs):.4f}, {max(aucs):.4f}] -> {res.write('null.json')}")
    return res


if __name__ == "__main__":
    main()
