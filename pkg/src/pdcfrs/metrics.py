"""Full-candidate top-K evaluation (Recall@K, NDCG@K)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Collection, Sequence

import numpy as np

from .data import InteractionDataset
from .model import ModelParams, score_all_items


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    recall_at_k: float
    ndcg_at_k: float
    k: int
    users_evaluated: int
    mean_client_loss: float = float("nan")
    aux_loss: float = float("nan")
    wall_ms: float = float("nan")


def rank_top_k(scores: np.ndarray, exclude: Collection[int], k: int) -> list:
    """Indices of the ``k`` highest scores outside ``exclude``; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    mask = np.ones(len(scores), dtype=bool)
    if exclude:
        mask[np.fromiter(exclude, dtype=np.int64)] = False
    cand = np.flatnonzero(mask)
    order = np.argsort(-scores[cand], kind="stable")
    return cand[order[:k]].tolist()


def topk_candidates(params: ModelParams, user_index: int, train_positive_set: Collection[int], k: int) -> list:
    """Rank every item the user has not trained on. Ranking uses logits (same order as probabilities)."""
    return rank_top_k(score_all_items(params, [user_index])[0], train_positive_set, k)


def recall_at_k(ranked: Sequence[int], test_positives: Collection[int], k: int) -> float:
    if not test_positives:
        raise ValueError("test_positives is empty")
    hits = sum(1 for i in ranked[:k] if i in test_positives)
    return hits / len(test_positives)


def ndcg_at_k(ranked: Sequence[int], test_positives: Collection[int], k: int) -> float:
    if not test_positives:
        raise ValueError("test_positives is empty")
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(ranked[:k]) if i in test_positives)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(len(test_positives), k)))
    return dcg / idcg


def evaluate_all(params: ModelParams, dataset: InteractionDataset, k: int = 20, round_index: int = 0,
                 chunk: int = 64) -> RoundMetrics:
    """Macro-averaged Recall@K / NDCG@K over users with at least one test positive."""
    users = [u for u in range(dataset.num_users) if dataset.test_positives[u]]
    if not users:
        raise ValueError("no user has test positives")
    recalls, ndcgs = [], []
    for s in range(0, len(users), chunk):
        block = users[s:s + chunk]
        scores = score_all_items(params, block, chunk=chunk)
        for row, u in zip(scores, block):
            ranked = rank_top_k(row, dataset.user_positive_sets[u], k)
            recalls.append(recall_at_k(ranked, dataset.test_positives[u], k))
            ndcgs.append(ndcg_at_k(ranked, dataset.test_positives[u], k))
    return RoundMetrics(round_index, float(np.mean(recalls)), float(np.mean(ndcgs)), k, len(users))
