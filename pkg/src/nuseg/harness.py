"""Cross-validation protocols, aggregation and result tables.

``exp1`` holds out one image (with all its annotations) per fold and scores
the prediction against every annotation of that image.  ``exp2`` holds out
one annotator per fold, trains on the remaining annotators over all images,
scores predictions against the training annotators' masks, and compares
with the held-out annotator's own agreement with them (the human baseline).

Within a fold every loss kind starts from the same initialization and sees
the same validation split and sample sequence, so the loss is the only
variable.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Corpus, load_corpus
from .errors import ConfigError
from .metrics import MetricReport, evaluate_against_set, inter_annotator_baseline
from .model import TinySegNet, TrainSchedule, forward
from .rpmap import build_rpmap
from .training import LOSS_KINDS, train, write_history_csv

log = logging.getLogger(__name__)

PROTOCOLS = {"exp1": "LeaveOneImageOut", "exp2": "LeaveOneAnnotatorOut"}

# Desk-scale schedule: standard decay factor and patiences, larger step size
# and shorter horizon so a fold trains in well under a minute on one core.
DESK_SCHEDULE = TrainSchedule(
    initial_lr=1e-2,
    plateau_factor=0.1,
    plateau_patience=10,
    early_stop_patience=20,
    max_epochs=60,
    batch_size=4,
    validation_fraction=0.1,
)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = "exp1"
    loss_kinds: tuple = LOSS_KINDS
    schedule: TrainSchedule = DESK_SCHEDULE
    corpus_path: str | None = None
    seeds: tuple = DEFAULT_SEEDS
    rpd_map_side: str = "test"
    threshold: float = 0.5
    channels: int = 8
    leaky_slope: float = 0.3
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {sorted(PROTOCOLS)}, got {self.protocol!r}")
        kinds = tuple(k.lower() for k in self.loss_kinds)
        if not kinds or any(k not in LOSS_KINDS for k in kinds):
            raise ConfigError(f"loss kinds must be a nonempty subset of {LOSS_KINDS}")
        # canonical column order
        object.__setattr__(self, "loss_kinds", tuple(k for k in LOSS_KINDS if k in kinds))
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.rpd_map_side not in ("test", "train"):
            raise ConfigError("rpd_map_side must be 'test' or 'train'")
        if self.protocol == "exp1" and self.rpd_map_side == "train":
            raise ConfigError("exp1 holds out whole images: no training annotations exist for a train-side map")


@dataclass
class FoldResult:
    fold: int
    held_out: str
    loss_kind: str
    seed: int
    report: MetricReport
    seconds: float = 0.0
    best_epoch: int = -1
    baseline: MetricReport | None = None
    history: list = field(default_factory=list, repr=False)


def fold_seed(seed: int, fold: int) -> int:
    """Seed for one fold's initialization and validation split."""
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _train_one(train_set, loss_kind, seed, fold, cfg: ExperimentConfig):
    s = fold_seed(seed, fold)
    shape = train_set[0][0].shape
    net = TinySegNet.init(s, cfg.channels, cfg.leaky_slope, shape, cfg.compute_dtype)
    return train(net, train_set, loss_kind, replace(cfg.schedule, rng_seed=s))


def _exp1_job(args):
    fold, train_set, held, loss_kind, seed, cfg = args
    t0 = time.perf_counter()
    model = _train_one(train_set, loss_kind, seed, fold, cfg)
    prob = forward(model.net, held.intensity)
    report = evaluate_against_set(prob, held.annotations, build_rpmap(held.annotations), cfg.threshold)
    return FoldResult(fold, held.image_id, loss_kind, seed, report,
                      time.perf_counter() - t0, model.best_epoch, None, model.history)


def _exp2_job(args):
    fold, train_set, corpus, held_ann, loss_kind, seed, cfg, baseline = args
    t0 = time.perf_counter()
    model = _train_one(train_set, loss_kind, seed, fold, cfg)
    reports = []
    for (x, refs), im in zip(train_set, corpus):
        m = build_rpmap(im.annotations if cfg.rpd_map_side == "test" else refs)
        reports.append(evaluate_against_set(forward(model.net, x), refs, m, cfg.threshold))
    report = reports[0].merged(*reports[1:])
    return FoldResult(fold, held_ann, loss_kind, seed, report,
                      time.perf_counter() - t0, model.best_epoch, baseline, model.history)


def _map_jobs(fn, jobs, n_jobs):
    if n_jobs <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(n_jobs) as pool:
        return list(pool.map(fn, jobs))


def _resolve_corpus(cfg, corpus):
    if corpus is not None:
        return corpus
    if cfg.corpus_path is None:
        raise ConfigError("no corpus given")
    return load_corpus(cfg.corpus_path)


def _order(results):
    rank = {k: i for i, k in enumerate(LOSS_KINDS)}
    return sorted(results, key=lambda r: (r.fold, rank[r.loss_kind], r.seed))


def run_experiment1(cfg: ExperimentConfig, corpus: Corpus | None = None, n_jobs: int = 1):
    """Leave-one-image-out cross-validation.  Returns ``(results, tables)``."""
    if cfg.protocol != "exp1":
        raise ConfigError("run_experiment1 needs protocol 'exp1'")
    corpus = _resolve_corpus(cfg, corpus)
    if len(corpus) < 2:
        raise ConfigError("leave-one-image-out needs at least two images")
    jobs = []
    for fold, held in enumerate(corpus):
        # fold-scoped view: the held-out image never enters the training set
        train_set = [(im.intensity, im.annotations) for im in corpus if im.image_id != held.image_id]
        for loss_kind in cfg.loss_kinds:
            for seed in cfg.seeds:
                jobs.append((fold, train_set, held, loss_kind, seed, cfg))
    results = _order(_map_jobs(_exp1_job, jobs, n_jobs))
    return results, summarize(results)


def run_experiment2(cfg: ExperimentConfig, corpus: Corpus | None = None, n_jobs: int = 1):
    """Leave-one-annotator-out cross-validation with the inter-annotator baseline."""
    if cfg.protocol != "exp2":
        raise ConfigError("run_experiment2 needs protocol 'exp2'")
    corpus = _resolve_corpus(cfg, corpus)
    annotators = corpus.annotator_ids
    if len(annotators) < 3:
        raise ConfigError("leave-one-annotator-out needs at least three annotators")
    if any(im.annotations.annotator_ids != annotators for im in corpus):
        raise ConfigError("every image must carry the same annotator ids")
    jobs = []
    for fold, aid in enumerate(annotators):
        train_set = [(im.intensity, im.annotations.without(aid)) for im in corpus]
        baselines = []
        for (x, refs), im in zip(train_set, corpus):
            m = build_rpmap(im.annotations if cfg.rpd_map_side == "test" else refs)
            baselines.append(inter_annotator_baseline(im.annotations.mask(aid), refs, m))
        baseline = baselines[0].merged(*baselines[1:])
        for loss_kind in cfg.loss_kinds:
            for seed in cfg.seeds:
                jobs.append((fold, train_set, corpus, aid, loss_kind, seed, cfg, baseline))
    results = _order(_map_jobs(_exp2_job, jobs, n_jobs))
    return results, summarize(results)


def run(cfg: ExperimentConfig, corpus: Corpus | None = None, n_jobs: int = 1):
    fn = run_experiment1 if cfg.protocol == "exp1" else run_experiment2
    return fn(cfg, corpus, n_jobs)


# ---------------------------------------------------------------------------
# aggregation


LABELS = {"wcel": "WCEL", "dl": "DL", "rpdl": "RPDL", "baseline": "Baseline"}


def _cell(scores, metric):
    vals = np.array([getattr(s, metric) for s in scores])
    return float(vals.mean()), float(vals.std()), len(vals)


def summarize(results) -> dict:
    """Per-fold mean/std per loss plus an ``Overall`` row, for Dice and RPD.

    Scores of all seeds are pooled within a fold; the overall row pools
    every score of the experiment.  Standard deviations are population
    (ddof=0).  Returns ``{"rows": [...], "csv": str, "text": str}``.
    """
    results = _order(results)
    if not results:
        raise ValueError("nothing to summarize")
    kinds = [k for k in LOSS_KINDS if any(r.loss_kind == k for r in results)]
    has_baseline = any(r.baseline is not None for r in results)
    columns = kinds + (["baseline"] if has_baseline else [])
    folds = sorted({(r.fold, r.held_out) for r in results})

    def scores_for(fold, column):
        sel = [r for r in results if fold is None or r.fold == fold]
        if column == "baseline":
            seen, out = set(), []
            for r in sel:
                if r.baseline is not None and r.fold not in seen:
                    seen.add(r.fold)
                    out.extend(r.baseline.per_reference)
            return out
        return [s for r in sel if r.loss_kind == column for s in r.report.per_reference]

    rows = []
    for metric in ("dice", "rpd"):
        for fold, held in folds + [(None, "Overall")]:
            for col in columns:
                sc = scores_for(fold, col)
                if sc:
                    mean, std, n = _cell(sc, metric)
                    rows.append({"metric": metric, "fold": "" if fold is None else fold,
                                 "held_out": held, "column": LABELS[col], "mean": mean, "std": std, "n": n})

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "fold", "held_out", "column", "mean", "std", "n"])
    for r in rows:
        w.writerow([r["metric"], r["fold"], r["held_out"], r["column"], repr(r["mean"]), repr(r["std"]), r["n"]])

    lines = []
    for metric in ("dice", "rpd"):
        header = [f"{metric.upper()}"] + [LABELS[c] for c in columns]
        table = [header]
        for _, held in folds + [(None, "Overall")]:
            line = [held]
            for c in columns:
                cell = next((r for r in rows if r["metric"] == metric and r["held_out"] == held
                             and r["column"] == LABELS[c]), None)
                line.append("" if cell is None else f"{cell['mean']:.3f} ± {cell['std']:.3f}")
            table.append(line)
        widths = [max(len(row[i]) for row in table) for i in range(len(header))]
        for row in table:
            lines.append("  ".join(cell.ljust(wd) for cell, wd in zip(row, widths)).rstrip())
        lines.append("")
    return {"rows": rows, "csv": buf.getvalue(), "text": "\n".join(lines)}


def per_seed_means(results, metric: str = "dice") -> dict:
    """``{seed: {loss_kind: mean score over all folds}}``."""
    out: dict = {}
    for seed in sorted({r.seed for r in results}):
        out[seed] = {}
        for k in LOSS_KINDS:
            sc = [getattr(s, metric) for r in results if r.seed == seed and r.loss_kind == k
                  for s in r.report.per_reference]
            if sc:
                out[seed][k] = float(np.mean(sc))
    return out


def directional_report(results, metric: str = "dice") -> dict:
    """Experiment 1 ordering check: overall means and RPDL-vs-DL sign counts over seeds."""
    seeds = per_seed_means(results, metric)
    overall = {k: float(np.mean([v[k] for v in seeds.values()]))
               for k in LOSS_KINDS if all(k in v for v in seeds.values())}
    wins = sum(1 for v in seeds.values() if v.get("rpdl", -1) > v.get("dl", np.inf))
    return {
        "per_seed": seeds,
        "overall": overall,
        "rpdl_beats_dl_seeds": wins,
        "num_seeds": len(seeds),
        "rpdl_ge_dl": overall.get("rpdl", -1) >= overall.get("dl", np.inf),
        "dl_ge_wcel": overall.get("dl", -1) >= overall.get("wcel", np.inf),
    }


def baseline_report(results, metric: str = "dice") -> dict:
    """Experiment 2: per-fold model means versus the held-out annotator baseline."""
    folds = {}
    for r in results:
        f = folds.setdefault(r.fold, {"held_out": r.held_out, "baseline": None, "models": {}})
        if r.baseline is not None:
            f["baseline"] = float(np.mean([getattr(s, metric) for s in r.baseline.per_reference]))
        f["models"].setdefault(r.loss_kind, []).extend(getattr(s, metric) for s in r.report.per_reference)
    for f in folds.values():
        f["models"] = {k: float(np.mean(v)) for k, v in f["models"].items()}
        f["above_baseline"] = {k: v > f["baseline"] for k, v in f["models"].items()}
    counts = {k: sum(f["above_baseline"].get(k, False) for f in folds.values()) for k in LOSS_KINDS}
    return {"folds": folds, "folds_above_baseline": counts, "num_folds": len(folds)}


def write_outputs(out_dir, cfg: ExperimentConfig, results, tables) -> Path:
    """Write score/summary CSVs (byte-reproducible), the text table and timing JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "held_out", "loss", "seed", "image_id", "annotator_id", "dice", "rpd"])
        for r in results:
            for fold, iid, aid, d, p in r.report.csv_rows(r.fold):
                w.writerow([fold, r.held_out, r.loss_kind, r.seed, iid, aid, repr(d), repr(p)])
    if any(r.baseline is not None for r in results):
        with open(out / "baseline.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "held_out", "image_id", "annotator_id", "dice", "rpd"])
            seen = set()
            for r in results:
                if r.baseline is not None and r.fold not in seen:
                    seen.add(r.fold)
                    for fold, iid, aid, d, p in r.baseline.csv_rows(r.fold):
                        w.writerow([fold, r.held_out, iid, aid, repr(d), repr(p)])
    (out / "summary.csv").write_text(tables["csv"])
    (out / "summary.txt").write_text(tables["text"])
    with open(out / "per_seed.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "seed", "loss", "mean"])
        for metric in ("dice", "rpd"):
            for seed, row in per_seed_means(results, metric).items():
                for k, v in row.items():
                    w.writerow([metric, seed, k, repr(v)])
    hist = out / "history"
    hist.mkdir(exist_ok=True)
    for r in results:
        write_history_csv(r.history, hist / f"fold{r.fold}_{r.loss_kind}_seed{r.seed}.csv")
    # wall-clock data stays out of the CSVs so they are byte-reproducible
    meta = {
        "config": {**asdict(cfg), "schedule": asdict(cfg.schedule)},
        "timings": [{"fold": r.fold, "loss": r.loss_kind, "seed": r.seed,
                     "seconds": r.seconds, "best_epoch": r.best_epoch} for r in results],
    }
    (out / "run.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out
