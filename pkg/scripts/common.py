"""Shared helpers for the experiment scripts."""

from __future__ import annotations

import argparse
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from vampire import pipeline as pl


@dataclass(frozen=True)
class Experiment:
    config: str = "scripts/configs/acceptance.json"
    seeds: tuple[int, ...] = (0, 1, 2)
    out: str = "runs/experiment"
    workers: int = 1

    @classmethod
    def from_args(cls, argv=None, description: str = "", **defaults) -> "Experiment":
        base = replace(cls(), **defaults)
        p = argparse.ArgumentParser(description=description,
                                    formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", default=base.config, help="RunConfig JSON")
        p.add_argument("--seeds", default=",".join(map(str, base.seeds)), help="comma-separated seeds")
        p.add_argument("--out", default=base.out, help="output root")
        p.add_argument("--workers", type=int, default=base.workers, help="parallel folds")
        a = p.parse_args(argv)
        return cls(a.config, tuple(int(s) for s in a.seeds.split(",") if s), a.out, a.workers)

    def run_config(self, seed: int, **overrides) -> pl.RunConfig:
        """The base config re-seeded (data, folds and init) and pointed at ``out/seed<k>``."""
        cfg = pl.load_config(self.config)
        cfg = replace(cfg, seed=seed, gen=replace(cfg.gen, seed=seed), workers=self.workers,
                      out_dir=str(Path(self.out) / f"seed{seed}"), **overrides)
        return cfg.validate()


@dataclass
class Results:
    experiment: Experiment
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()), flush=True)

    def write(self, name: str) -> Path:
        path = Path(self.experiment.out) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"experiment": asdict(self.experiment), "rows": self.rows}, indent=2) + "\n")
        return path
