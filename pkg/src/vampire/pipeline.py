"""Fold planning, training, evaluation and the ablation harness.

Everything a run produces lives under ``RunConfig.out_dir``::

    config.json             resolved configuration
    folds.csv               patient -> fold assignment
    <tag>/fold<k>/train_log.csv, model.ckpt, metrics.csv
    <tag>/summary.csv       mean and std over folds
    ablation.csv            (ablate only) macro metrics per variant per fold

Randomness is keyed by (seed, purpose, fold) so that no two consumers share
a stream and reruns reproduce every byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, NumericalError, PreconditionError
from .imageprep import PrepConfig, augment, preprocess_layers, resize
from .metrics import EvalRecord, aggregate_by_eye, metrics_report, summarize_folds, write_report, write_summary
from .network import ModelConfig, Vampire, bce_loss, demographics
from .synthdata import LABELS, GenConfig, LabeledSample, generate_dataset, read_dataset
from .vesseltrace import refine_mask, scan_order_for, segment_vessels

MODULES = ("baseline", "mbd_only", "iem_only", "both")
STRATEGIES = ("vessel", "linear", "diagonal")

# purpose keys for seeded streams
_INIT, _SHUFFLE, _AUGMENT, _FOLDS = range(4)


def _rng(seed: int, purpose: int, fold: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, fold])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1e-4
    weight_decay: float = 5e-2
    scan_strategy: str = "vessel"
    modules: str = "both"
    seed: int = 0
    out_dir: str = "runs/default"
    k_folds: int = 5
    mask_source: str = "truth"
    vessel_fraction_min: float = 0.1
    augment: bool = True
    threshold: float = 0.5
    workers: int = 1

    def validate(self) -> "RunConfig":
        self.gen.validate()
        self.model.validate()
        self.prep.validate(self.model.patch_size)
        if self.prep.target_size != self.model.image_size:
            raise ConfigError(f"prep.target_size {self.prep.target_size} != model.image_size {self.model.image_size}")
        if self.scan_strategy not in STRATEGIES:
            raise ConfigError(f"scan_strategy must be one of {STRATEGIES}, got {self.scan_strategy!r}")
        if self.modules not in MODULES:
            raise ConfigError(f"modules must be one of {MODULES}, got {self.modules!r}")
        if self.mask_source not in ("truth", "segmented"):
            raise ConfigError(f"mask_source must be 'truth' or 'segmented', got {self.mask_source!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.k_folds < 2 or self.workers < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, k_folds >= 2 and workers >= 1 are required")
        if not (self.base_lr > 0 and self.weight_decay >= 0):
            raise ConfigError("base_lr must be positive and weight_decay nonnegative")
        if not 0 <= self.vessel_fraction_min <= 1:
            raise ConfigError(f"vessel_fraction_min must be in [0, 1], got {self.vessel_fraction_min}")
        return self

    @property
    def effective_strategy(self) -> str:
        """Raster order for variants without the vessel-ordered scan."""
        return "linear" if self.modules in ("baseline", "iem_only") else self.scan_strategy

    @property
    def effective_model(self) -> ModelConfig:
        return replace(self.model, use_iem=self.modules in ("iem_only", "both"))

    @property
    def tag(self) -> str:
        return f"{self.modules}-{self.effective_strategy}"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown RunConfig field(s): {sorted(unknown)}")
        d = dict(d)
        sub = {"gen": GenConfig.from_dict, "model": ModelConfig.from_dict, "prep": _prep_from_dict}
        for key, make in sub.items():
            if key in d:
                if not isinstance(d[key], dict):
                    raise ConfigError(f"{key} must be an object")
                d[key] = make(d[key])
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _prep_from_dict(d: dict) -> PrepConfig:
    names = {f.name for f in fields(PrepConfig)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown PrepConfig field(s): {sorted(unknown)}")
    return PrepConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    folds: list[list[str]]
    patient_of: list[str]  # per sample

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_indices(self, fold: int) -> list[int]:
        members = set(self.folds[fold])
        return [i for i, p in enumerate(self.patient_of) if p in members]

    def train_indices(self, fold: int) -> list[int]:
        members = set(self.folds[fold])
        return [i for i, p in enumerate(self.patient_of) if p not in members]

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "fold"])
            for f, members in enumerate(self.folds):
                for p in members:
                    w.writerow([p, f])
        return path


def make_folds(samples: Sequence[LabeledSample], k: int = 5, seed: int = 0) -> FoldPlan:
    """Greedy grouped stratification.

    Patients are visited rarest label signature first (ties broken by a
    seeded shuffle). Each goes to the fold, among those with room left,
    whose per-label positive counts grow least far from the per-fold target
    in squared distance. Room is ceil(patients / k) per fold.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    by_patient: dict[str, np.ndarray] = {}
    n_samples: Counter[str] = Counter()
    for s in samples:
        by_patient.setdefault(s.patient_id, np.zeros(len(LABELS)))
        by_patient[s.patient_id] += s.labels
        n_samples[s.patient_id] += 1
    patients = sorted(by_patient)
    if len(patients) < k:
        raise ConfigError(f"{len(patients)} patients cannot fill {k} folds")
    signature = {p: tuple(by_patient[p] > 0) for p in patients}
    freq = Counter(signature.values())
    tiebreak = dict(zip(patients, _rng(seed, _FOLDS).permutation(len(patients))))
    visit = sorted(patients, key=lambda p: (freq[signature[p]], tiebreak[p]))

    total = sum(by_patient.values())
    target = total / k
    cap = math.ceil(len(patients) / k)
    counts = np.zeros((k, len(LABELS)))
    folds: list[list[str]] = [[] for _ in range(k)]
    for p in visit:
        pos = by_patient[p]
        best, best_cost = -1, math.inf
        for f in range(k):
            if len(folds[f]) >= cap:
                continue
            cost = np.sum((counts[f] + pos - target) ** 2) - np.sum((counts[f] - target) ** 2)
            # prefer smaller folds on ties so sizes stay even
            cost = (cost, len(folds[f]))
            if best < 0 or cost < best_cost:
                best, best_cost = f, cost
        folds[best].append(p)
        counts[best] += pos
    return FoldPlan([sorted(f) for f in folds], [s.patient_id for s in samples])


def fold_fractions(plan: FoldPlan, samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    """(global positive fraction per label, per-fold fractions as a k x labels array)."""
    Y = np.stack([s.labels for s in samples])
    per_fold = np.stack([Y[plan.test_indices(f)].mean(axis=0) for f in range(plan.k)])
    return Y.mean(axis=0), per_fold


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def load_samples(cfg: RunConfig, data_dir: str | Path | None = None) -> list[LabeledSample]:
    if data_dir is not None:
        samples = read_dataset(data_dir)
    else:
        samples = generate_dataset(cfg.gen)
    if not samples:
        raise PreconditionError("dataset is empty")
    return samples


class OrderCache:
    """Scan orders keyed by a digest of the mask and the ordering parameters."""

    def __init__(self, strategy: str, grid_side: int, vessel_fraction_min: float):
        self.strategy = strategy
        self.grid_side = grid_side
        self.vfm = vessel_fraction_min
        self._store: dict[bytes, np.ndarray] = {}
        self.hits = 0

    def key(self, mask: np.ndarray) -> bytes:
        if self.strategy != "vessel":
            return b""
        m = np.ascontiguousarray(mask, dtype=np.uint8)
        return hashlib.sha1(m.tobytes() + str(m.shape).encode()).digest()

    def __call__(self, mask: np.ndarray) -> np.ndarray:
        k = self.key(mask)
        if k in self._store:
            self.hits += 1
            return self._store[k]
        order = scan_order_for(self.strategy, self.grid_side, mask, self.vfm).order
        self._store[k] = order
        return order


@dataclass
class Batch:
    images: np.ndarray
    orders: np.ndarray
    demo: np.ndarray
    labels: np.ndarray
    densities: np.ndarray


def _working_mask(sample: LabeledSample, cfg: RunConfig) -> np.ndarray:
    if cfg.mask_source == "segmented":
        mask = refine_mask(segment_vessels(sample.layers))
    else:
        mask = sample.vessel_mask
    if mask.shape[0] != cfg.prep.target_size:
        mask = resize(mask, cfg.prep.target_size, order=0) > 0.5
    return np.asarray(mask, dtype=np.uint8)


def prepare(samples: Sequence[LabeledSample], cfg: RunConfig, cache: OrderCache,
            rng: np.random.Generator | None = None) -> Batch:
    """Preprocess a list of samples; augments first when ``rng`` is given."""
    imgs, orders, dens = [], [], []
    for s in samples:
        if rng is not None:
            s = augment(s, rng, cfg.prep)
        imgs.append(preprocess_layers(s.layers, cfg.prep))
        mask = _working_mask(s, cfg)
        orders.append(cache(mask))
        dens.append(float(mask.mean()))
    return Batch(
        images=np.stack(imgs),
        orders=np.stack(orders),
        demo=demographics([s.age for s in samples], [s.gender for s in samples]),
        labels=np.stack([s.labels for s in samples]),
        densities=np.array(dens),
    )


def new_cache(cfg: RunConfig) -> OrderCache:
    return OrderCache(cfg.effective_strategy, cfg.model.image_size // cfg.model.patch_size,
                      cfg.vessel_fraction_min)


def build_model(cfg: RunConfig, fold: int) -> Vampire:
    seed = int(np.random.SeedSequence([cfg.seed, _INIT, fold]).generate_state(1)[0])
    return Vampire(cfg.effective_model, seed=seed)


def forward(model: Vampire, batch: Batch) -> tc.Tensor:
    return model(batch.images, batch.orders, batch.demo, model.row_masks(batch.densities))


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def fold_dir(cfg: RunConfig, fold: int) -> Path:
    return Path(cfg.out_dir) / cfg.tag / f"fold{fold}"


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float]


def train(cfg: RunConfig, fold: int, samples: Sequence[LabeledSample] | None = None,
          plan: FoldPlan | None = None) -> TrainResult:
    """Train one fold; writes ``train_log.csv`` and ``model.ckpt`` under the fold directory."""
    cfg.validate()
    samples = load_samples(cfg) if samples is None else samples
    plan = make_folds(samples, cfg.k_folds, cfg.seed) if plan is None else plan
    if not 0 <= fold < plan.k:
        raise ConfigError(f"fold {fold} outside 0..{plan.k - 1}")
    out = fold_dir(cfg, fold)
    out.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg, fold)
    params = model.parameters()
    state = tc.OptimizerState(base_lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    idx = np.array(plan.train_indices(fold))
    per_epoch = math.ceil(len(idx) / cfg.batch_size)
    total = max(1, cfg.epochs * per_epoch)
    shuffle_rng, aug_rng = _rng(cfg.seed, _SHUFFLE, fold), _rng(cfg.seed, _AUGMENT, fold)
    cache = new_cache(cfg)

    # without augmentation every epoch sees the same inputs, so prepare them once
    fixed = None
    if not cfg.augment and cfg.epochs:
        fixed = prepare([samples[i] for i in idx], cfg, cache)
        row_of = {int(i): r for r, i in enumerate(idx)}

    losses: list[float] = []
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = idx[shuffle_rng.permutation(len(idx))]
        batch_losses = []
        for b in range(per_epoch):
            picked = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if fixed is None:
                batch = prepare([samples[i] for i in picked], cfg, cache, aug_rng)
            else:
                sel = [row_of[int(i)] for i in picked]
                batch = Batch(*(getattr(fixed, f.name)[sel] for f in fields(Batch)))
            model.zero_grad()
            loss = bce_loss(forward(model, batch), batch.labels)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            lr = tc.cosine_lr(step, total, cfg.base_lr)
            tc.adamw_step([p.data for p in params], [p.grad for p in params], state, lr)
            step += 1
            batch_losses.append(value)
        losses.append(float(np.mean(batch_losses)))
        rows.append((epoch, losses[-1], tc.cosine_lr(step, total, cfg.base_lr)))

    with (out / "train_log.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr_after"])
        for epoch, loss, lr in rows:
            w.writerow([epoch, repr(loss), repr(lr)])
    ckpt = tc.save_checkpoint(out / "model.ckpt", model.state_dict().items())
    return TrainResult(ckpt, losses)


def predict(model: Vampire, samples: Sequence[LabeledSample], cfg: RunConfig,
            batch_size: int | None = None) -> np.ndarray:
    """Sigmoid scores, no augmentation."""
    cache = new_cache(cfg)
    batch_size = batch_size or cfg.batch_size
    out = []
    for i in range(0, len(samples), batch_size):
        batch = prepare(samples[i:i + batch_size], cfg, cache)
        logits = forward(model, batch).data
        out.append(1.0 / (1.0 + np.exp(-logits)))
    return np.concatenate(out)


def records_for(samples: Sequence[LabeledSample], scores: np.ndarray) -> list[EvalRecord]:
    return [EvalRecord(s.eye_id, s.patient_id, sc, s.labels) for s, sc in zip(samples, scores)]


def evaluate(checkpoint: str | Path | None, fold: int, cfg: RunConfig,
             samples: Sequence[LabeledSample] | None = None, plan: FoldPlan | None = None,
             split: str = "test", write: bool = True) -> dict[str, dict[str, float]]:
    """Eye-level metrics for one fold. ``checkpoint=None`` evaluates the fresh initialisation."""
    cfg.validate()
    samples = load_samples(cfg) if samples is None else samples
    plan = make_folds(samples, cfg.k_folds, cfg.seed) if plan is None else plan
    model = build_model(cfg, fold)
    if checkpoint is not None:
        model.load_state_dict(tc.load_checkpoint(checkpoint))
    if split not in ("test", "train"):
        raise ConfigError(f"split must be 'test' or 'train', got {split!r}")
    chosen = [samples[i] for i in (plan.test_indices(fold) if split == "test" else plan.train_indices(fold))]
    records = aggregate_by_eye(records_for(chosen, predict(model, chosen, cfg)))
    table = metrics_report(records, cfg.threshold)
    if write:
        out = fold_dir(cfg, fold)
        out.mkdir(parents=True, exist_ok=True)
        write_report(table, out / ("metrics.csv" if split == "test" else "metrics_train.csv"))
    return table


def _run_fold(args) -> dict[str, dict[str, float]]:
    cfg, fold, samples, plan = args
    result = train(cfg, fold, samples, plan)
    return evaluate(result.checkpoint, fold, cfg, samples, plan)


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def setup_run(cfg: RunConfig, data_dir: str | Path | None = None):
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    samples = load_samples(cfg, data_dir)
    plan = make_folds(samples, cfg.k_folds, cfg.seed)
    plan.write(out / "folds.csv")
    return samples, plan


def cross_validate(cfg: RunConfig, data_dir: str | Path | None = None,
                   folds: Sequence[int] | None = None) -> dict[str, dict[str, float]]:
    """Train and evaluate every fold, then write the cross-fold summary."""
    samples, plan = setup_run(cfg, data_dir)
    folds = range(plan.k) if folds is None else folds
    tables = _map(_run_fold, [(cfg, f, samples, plan) for f in folds], cfg.workers)
    summary = summarize_folds(tables)
    out = Path(cfg.out_dir) / cfg.tag
    out.mkdir(parents=True, exist_ok=True)
    write_summary(summary, out / "summary.csv")
    return summary


def ablation_variants(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    """Four module rows on the configured strategy, then three strategy rows with both modules."""
    rows = [("module", replace(cfg, modules=m)) for m in MODULES]
    rows += [("strategy", replace(cfg, modules="both", scan_strategy=s)) for s in STRATEGIES]
    return rows


ABLATION_COLUMNS = ("group", "variant", "strategy", "fold", "f1", "auc", "aupr")


def ablate(cfg: RunConfig, data_dir: str | Path | None = None) -> list[dict]:
    """Run every ablation variant on shared folds and seeds; writes ``ablation.csv``.

    Variants that resolve to the same (modules, strategy) pair are trained once
    and reported under both rows.
    """
    samples, plan = setup_run(cfg, data_dir)
    variants = ablation_variants(cfg)
    unique: dict[str, RunConfig] = {}
    for _, v in variants:
        unique.setdefault(v.tag, v)
    jobs = [(v, f, samples, plan) for v in unique.values() for f in range(plan.k)]
    results = _map(_run_fold, jobs, cfg.workers)
    by_tag: dict[str, list] = {}
    for (v, f, _, _), table in zip(jobs, results):
        by_tag.setdefault(v.tag, []).append(table)
    rows = []
    for group, v in variants:
        for f, table in enumerate(by_tag[v.tag]):
            macro = table["macro"]
            rows.append({"group": group, "variant": v.modules if group == "module" else v.scan_strategy,
                         "strategy": v.effective_strategy, "fold": f,
                         "f1": macro["f1"], "auc": macro["auc"], "aupr": macro["aupr"]})
    path = Path(cfg.out_dir) / "ablation.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in ABLATION_COLUMNS})
    for tag, tables in by_tag.items():
        write_summary(summarize_folds(tables), Path(cfg.out_dir) / tag / "summary.csv")
    return rows


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
