"""Synthetic MovieLens-style data with planted item clusters.

Items belong to latent clusters. Titles are built from cluster-specific
words whose word vectors sit near a cluster centroid, so title similarity
recovers the clusters. Users prefer a couple of clusters and have power-law
activity, which reproduces the few-interactions-per-client regime.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from .data import RawRating, WordVectorTable
from .seeding import stream

GENERIC_WORDS = ("the", "of", "a", "and", "in", "story", "night", "day", "return", "man")


@dataclass
class SyntheticData:
    ratings: List[RawRating]
    titles: Dict[str, str]
    word_vectors: WordVectorTable
    item_clusters: np.ndarray


def generate(num_users: int = 1000, num_items: int = 400, num_clusters: int = 20,
             mean_interactions: float = 24.0, seed: int = 0, word_dim: int = 16,
             words_per_cluster: int = 8, in_cluster_prob: float = 0.85) -> SyntheticData:
    rng = stream(seed, "synthetic")
    clusters = rng.integers(0, num_clusters, size=num_items)
    clusters[:num_clusters] = np.arange(min(num_clusters, num_items))  # no empty cluster when possible

    centroids = rng.normal(size=(num_clusters, word_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    vectors = {}
    cluster_words = []
    for c in range(num_clusters):
        words = [f"k{c}w{w}" for w in range(words_per_cluster)]
        for w in words:
            vectors[w] = centroids[c] + 0.35 * rng.normal(size=word_dim) / np.sqrt(word_dim)
        cluster_words.append(words)
    for w in GENERIC_WORDS:
        vectors[w] = 0.3 * rng.normal(size=word_dim) / np.sqrt(word_dim)

    titles = {}
    for j in range(num_items):
        words = list(rng.choice(cluster_words[clusters[j]], size=2, replace=False))
        if rng.random() < 0.5:
            words.insert(int(rng.integers(0, 3)), str(rng.choice(GENERIC_WORDS)))
        titles[str(j + 1)] = " ".join(w.capitalize() for w in words) + f" ({int(rng.integers(1950, 2001))})"

    # item popularity: Zipf-like inside each cluster; cluster popularity also skewed
    item_pop = 1.0 / (1.0 + rng.permutation(num_items)) ** 0.7
    cluster_pop = 1.0 / (1.0 + np.arange(num_clusters)) ** 0.5
    cluster_pop = rng.permutation(cluster_pop / cluster_pop.sum())
    members = [np.flatnonzero(clusters == c) for c in range(num_clusters)]

    ratings: List[RawRating] = []
    max_n = max(5, num_items // 3)
    for u in range(num_users):
        n = int(np.clip(np.round(5 + rng.pareto(2.0) * (mean_interactions - 5)), 5, max_n))
        prefs = rng.choice(num_clusters, size=2, replace=False, p=cluster_pop)
        pool = np.concatenate([members[c] for c in prefs])
        chosen = set()
        while len(chosen) < n:
            if rng.random() < in_cluster_prob and len(chosen) < len(pool):
                p = item_pop[pool] / item_pop[pool].sum()
                j = int(rng.choice(pool, p=p))
            else:
                j = int(rng.choice(num_items, p=item_pop / item_pop.sum()))
            chosen.add(j)
        ts = 978300000 + int(rng.integers(0, 10 ** 6))
        for k, j in enumerate(sorted(chosen)):
            ratings.append(RawRating(str(u + 1), str(j + 1), float(rng.integers(1, 6)), ts + k))
    return SyntheticData(ratings, titles, WordVectorTable(vectors, word_dim), clusters)


def write(data: SyntheticData, directory) -> Dict[str, Path]:
    """Write ``ratings.dat``, ``movies.dat`` (``::``-separated) and ``vectors.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"ratings": d / "ratings.dat", "titles": d / "movies.dat", "vectors": d / "vectors.txt"}
    with open(paths["ratings"], "w", encoding="latin-1") as fh:
        for r in data.ratings:
            fh.write(f"{r.user_id}::{r.item_id}::{int(r.rating)}::{r.timestamp}\n")
    with open(paths["titles"], "w", encoding="latin-1") as fh:
        for iid, title in data.titles.items():
            fh.write(f"{iid}::{title}::Synthetic\n")
    with open(paths["vectors"], "w", encoding="utf-8") as fh:
        for w, v in data.word_vectors.vectors.items():
            fh.write(w + " " + " ".join(repr(float(x)) for x in v) + "\n")
    return paths
