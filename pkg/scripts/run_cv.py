"""Cross-validate one variant over several seeds.

    python scripts/run_cv.py --config scripts/configs/acceptance.json --seeds 0,1,2
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent))
from common import Experiment, Results  # noqa: E402

from vampire import pipeline as pl  # noqa: E402


def main(argv=None) -> Results:
    exp = Experiment.from_args(argv, __doc__, out="runs/cv")
    res = Results(exp)
    for seed in exp.seeds:
        cfg = exp.run_config(seed)
        t0 = time.perf_counter()
        summary = pl.cross_validate(cfg)
        m = summary["macro"]
        res.add(seed=seed, variant=cfg.tag, f1=m["f1"], auc=m["auc"], aupr=m["aupr"],
                minutes=(time.perf_counter() - t0) / 60)
    print(f"mean macro auc {np.mean([r['auc'] for r in res.rows]):.4f} -> {res.write('cv.json')}")
    return res


if __name__ == "__main__":
    main()
