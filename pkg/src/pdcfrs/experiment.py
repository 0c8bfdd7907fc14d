"""Experiment orchestration: load data, run, and write results under ``cfg.out``."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import synthetic
from .config import ExperimentConfig, dump_config
from .data import (InteractionDataset, build_catalog, build_dataset, load_similarity_csv, load_titles,
                   load_word_vectors, parse_ratings, subsample_users, tokenize_title)
from .federated import ExperimentResult, run_experiment
from .metrics import RoundMetrics
from .model import save_params
from .privacy import SimilarityModel, read_contributions, write_contributions

log = logging.getLogger(__name__)

SWEEPABLE = ("epsilon", "alpha", "beta", "lambda", "tau")
METRICS_HEADER = ("round", "recall@K", "ndcg@K", "mean_client_loss", "aux_loss", "wall_ms")


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise FileNotFoundError(f"no {what} path configured")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def load_data(cfg: ExperimentConfig) -> Tuple[InteractionDataset, Optional[SimilarityModel]]:
    """Build the dataset and (when the run needs one) the similarity model."""
    if cfg.dataset == "synthetic":
        syn = synthetic.generate(cfg.synth_users, cfg.synth_items, cfg.synth_clusters,
                                 cfg.synth_mean_interactions, seed=cfg.dataset_seed)
        ds = build_dataset(syn.ratings, cfg.neg_ratio, cfg.train_frac, cfg.dataset_seed)
        titles = {iid: tokenize_title(t) for iid, t in syn.titles.items()}
        sim = SimilarityModel.from_titles(build_catalog(ds, titles), syn.word_vectors)
        return ds, sim

    ratings = parse_ratings(_require(cfg.ratings_path, "ratings"), sep=cfg.ratings_sep)
    if cfg.max_users:
        ratings = subsample_users(ratings, cfg.max_users, cfg.dataset_seed)
    ds = build_dataset(ratings, cfg.neg_ratio, cfg.train_frac, cfg.dataset_seed)
    if not cfg.uses_aux:
        return ds, None
    if cfg.similarity_path:
        return ds, SimilarityModel.from_matrix(load_similarity_csv(_require(cfg.similarity_path, "similarity"),
                                                                   ds.item_ids))
    titles = load_titles(_require(cfg.titles_path, "titles"), sep=cfg.titles_sep)
    vectors = load_word_vectors(_require(cfg.word_vectors_path, "word vectors"))
    return ds, SimilarityModel.from_titles(build_catalog(ds, titles), vectors)


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def metrics_csv(trace: Sequence[RoundMetrics], record_timing: bool = False) -> str:
    """Per-round CSV text. ``wall_ms`` stays empty unless timing is requested, keeping reruns byte-identical."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = trace[0].k if trace else 20
    w.writerow([h.replace("K", str(k)) for h in METRICS_HEADER])
    for m in trace:
        w.writerow([m.round, _fmt(m.recall_at_k), _fmt(m.ndcg_at_k), _fmt(m.mean_client_loss), _fmt(m.aux_loss),
                    _fmt(m.wall_ms) if record_timing else ""])
    return buf.getvalue()


@dataclass
class RunOutput:
    variant: str
    result: ExperimentResult
    out_dir: Path

    @property
    def final(self) -> RoundMetrics:
        return self.result.metrics[-1]


def run(cfg: ExperimentConfig, dataset: Optional[InteractionDataset] = None,
        sim_model: Optional[SimilarityModel] = None, contributions_path: Optional[str] = None) -> RunOutput:
    """Run one experiment and write metrics.csv, summary.json, config.json, checkpoint.npz
    (and contributions.tsv when perturbed uploads exist) under ``cfg.out``."""
    if dataset is None:
        dataset, sim_model = load_data(cfg)
    contributions = None
    if contributions_path:
        contributions = read_contributions(contributions_path, dataset.user_index(), dataset.item_index())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("running %s on %d users / %d items", cfg.variant, dataset.num_users, dataset.num_items)
    result = run_experiment(dataset, cfg, sim_model, contributions)

    (out / "metrics.csv").write_text(metrics_csv(result.metrics, cfg.record_timing))
    dump_config(cfg, out / "config.json")
    save_params(out / "checkpoint.npz", result.params, {"variant": cfg.variant})
    if result.contributions:
        write_contributions(out / "contributions.tsv", result.contributions, dataset.user_ids, dataset.item_ids)
    final = result.metrics[-1]
    summary = {
        "variant": cfg.variant,
        "rounds": cfg.rounds,
        "k": final.k,
        "recall": final.recall_at_k,
        "ndcg": final.ndcg_at_k,
        "users_evaluated": final.users_evaluated,
        "total_wall_ms": sum(m.wall_ms for m in result.metrics[1:]),
        "config": cfg.to_dict(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunOutput(cfg.variant, result, out)


def sweep(cfg: ExperimentConfig, param: str, values: Sequence, seed_offset: bool = True) -> List[dict]:
    """One run per value, each under ``<out>/<param>=<value>``; returns the summary rows.

    Run ``i`` uses ``seed + i`` (pass ``seed_offset=False`` to share one seed).
    The dataset seed is pinned to the base config's, so every value sees the
    same data. A failing run is recorded with its error and the sweep continues.
    """
    if param not in SWEEPABLE:
        raise ValueError(f"cannot sweep {param!r}; choose from {SWEEPABLE}")
    rows = []
    base = Path(cfg.out)
    for i, value in enumerate(values):
        run_cfg = cfg.replace(**{param: value, "out": str(base / f"{param}={value}"),
                                 "seed": cfg.seed + i if seed_offset else cfg.seed, "data_seed": cfg.dataset_seed})
        try:
            res = run(run_cfg)
            rows.append({param: value, "seed": run_cfg.seed, "recall": res.final.recall_at_k,
                         "ndcg": res.final.ndcg_at_k, "error": ""})
        except Exception as e:  # keep partial results
            log.exception("sweep run %s=%s failed", param, value)
            rows.append({param: value, "seed": run_cfg.seed, "recall": float("nan"), "ndcg": float("nan"),
                         "error": str(e)})
    base.mkdir(parents=True, exist_ok=True)
    with open(base / f"sweep_{param}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[param, "seed", "recall", "ndcg", "error"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows
