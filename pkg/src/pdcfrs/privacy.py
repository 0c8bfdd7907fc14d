"""Item similarity and exponential-mechanism perturbation of interacted-item sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import WordVectorTable
from .seeding import stream


class SimilarityModel:
    """Item-to-item similarity in [-1, 1].

    Two backends: mean title word vectors compared by cosine, or a dense
    precomputed matrix. Items without a title vector are similar only to
    themselves (similarity 1) and neutral (0) to everything else.
    """

    def __init__(self, vectors: Optional[np.ndarray] = None, matrix: Optional[np.ndarray] = None):
        if (vectors is None) == (matrix is None):
            raise ValueError("provide exactly one of vectors or matrix")
        self._vectors = vectors
        self._matrix = matrix
        if vectors is not None:
            self._has = np.linalg.norm(vectors, axis=1) > 0
            self.num_items = vectors.shape[0]
        else:
            matrix = np.asarray(matrix, dtype=np.float64)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
                raise ValueError("similarity matrix must be square")
            if np.any(np.abs(matrix) > 1.0) or not np.all(np.isfinite(matrix)):
                raise ValueError("similarity values must lie in [-1, 1]")
            if not np.allclose(matrix, matrix.T):
                raise ValueError("similarity matrix must be symmetric")
            self._matrix = matrix
            self.num_items = matrix.shape[0]

    @classmethod
    def from_titles(cls, catalog: Sequence[Sequence[str]], table: WordVectorTable) -> "SimilarityModel":
        dim = max(table.dim, 1)
        vectors = np.zeros((len(catalog), dim))
        for j, tokens in enumerate(catalog):
            found = [table.vectors[t] for t in tokens if t in table.vectors]
            if not found:
                continue
            mean = np.mean(found, axis=0)
            norm = np.linalg.norm(mean)
            if norm > 0:
                vectors[j] = mean / norm
        return cls(vectors=vectors)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "SimilarityModel":
        return cls(matrix=matrix)

    def item_vector(self, item: int) -> Optional[np.ndarray]:
        if self._vectors is None:
            raise TypeError("item vectors exist only for the title-vector backend")
        return self._vectors[item].copy() if self._has[item] else None

    def row(self, item: int) -> np.ndarray:
        """Similarities from ``item`` to every item."""
        if self._matrix is not None:
            return self._matrix[item].copy()
        if self._has[item]:
            out = np.clip(self._vectors @ self._vectors[item], -1.0, 1.0)
        else:
            out = np.zeros(self.num_items)
        out[item] = 1.0
        return out

    def similarity(self, i: int, j: int) -> float:
        if self._matrix is not None:
            return float(self._matrix[i, j])
        if i == j:
            return 1.0
        if not (self._has[i] and self._has[j]):
            return 0.0
        return float(np.clip(self._vectors[i] @ self._vectors[j], -1.0, 1.0))

    def matrix(self) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix.copy()
        return np.stack([self.row(i) for i in range(self.num_items)])

    def value_range(self, chunk: int = 512) -> Tuple[float, float]:
        """(min, max) similarity over all ordered pairs, diagonal included."""
        lo, hi = np.inf, -np.inf
        for s in range(0, self.num_items, chunk):
            block = np.stack([self.row(i) for i in range(s, min(s + chunk, self.num_items))])
            lo, hi = min(lo, block.min()), max(hi, block.max())
        return float(lo), float(hi)


def default_sensitivity(sim_model: SimilarityModel) -> float:
    """Observed similarity spread; falls back to 1 when all similarities are equal."""
    lo, hi = sim_model.value_range()
    return hi - lo if hi > lo else 1.0


@dataclass(frozen=True)
class PrivacyConfig:
    epsilon: float = 5.0
    delta_sensitivity: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if not self.delta_sensitivity > 0:
            raise ValueError("delta_sensitivity must be > 0")


@dataclass(frozen=True)
class PerturbedContribution:
    user_index: int
    perturbed_items: Tuple[int, ...]


def replacement_distribution(sim_model: SimilarityModel, cfg: PrivacyConfig, source_item: int) -> np.ndarray:
    """P[A(source) = j] proportional to exp(eps * sim(source, j) / (2 * Delta))."""
    if sim_model.num_items == 0:
        raise ValueError("empty catalog")
    logits = cfg.epsilon * sim_model.row(source_item) / (2.0 * cfg.delta_sensitivity)
    w = np.exp(logits - logits.max())
    return w / w.sum()


class ExponentialMechanism:
    """Samples item replacements; caches each source item's CDF."""

    def __init__(self, sim_model: SimilarityModel, cfg: PrivacyConfig):
        self.sim_model = sim_model
        self.cfg = cfg
        self._cdf: Dict[int, np.ndarray] = {}

    def cdf(self, source: int) -> np.ndarray:
        c = self._cdf.get(source)
        if c is None:
            c = np.cumsum(replacement_distribution(self.sim_model, self.cfg, source))
            self._cdf[source] = c
        return c

    def sample(self, source: int, rng: np.random.Generator, size: Optional[int] = None):
        c = self.cdf(source)
        u = rng.random(size) * c[-1]
        idx = np.minimum(np.searchsorted(c, u, side="right"), len(c) - 1)
        return idx if size is not None else int(idx)

    def perturb(self, user_index: int, positive_items: Iterable[int]) -> PerturbedContribution:
        items = sorted(set(int(i) for i in positive_items))
        if not items:
            raise ValueError("positive_items must be non-empty")
        rng = stream(self.cfg.rng_seed, "perturb", user_index)
        u = rng.random(len(items))
        out = []
        for src, x in zip(items, u):
            c = self.cdf(src)
            out.append(int(min(np.searchsorted(c, x * c[-1], side="right"), len(c) - 1)))
        return PerturbedContribution(user_index, tuple(out))


def perturb_user_set(sim_model: SimilarityModel, cfg: PrivacyConfig, positive_items: Iterable[int],
                     user_index: int = 0) -> PerturbedContribution:
    """Replace each interacted item by an exponential-mechanism sample.

    Items are processed in ascending order with a generator keyed by
    ``(cfg.rng_seed, user_index)``, so the output is a pure function of
    the arguments.
    """
    return ExponentialMechanism(sim_model, cfg).perturb(user_index, positive_items)


def verify_ldp_bound(sim_model: SimilarityModel, cfg: PrivacyConfig) -> float:
    """max over (x1, x2, y) of log(P[A(x1)=y] / P[A(x2)=y]), by exhaustive enumeration."""
    n = sim_model.num_items
    if n <= 1:
        return 0.0
    logp = np.log(np.stack([replacement_distribution(sim_model, cfg, x) for x in range(n)]))
    return float(np.max(logp.max(axis=0) - logp.min(axis=0)))


def write_contributions(path, contributions: Iterable[PerturbedContribution], user_ids: Sequence[str],
                        item_ids: Sequence[str]) -> None:
    """One line per user: ``user_id<TAB>item_id,item_id,...`` (multiset order kept)."""
    with open(path, "w", encoding="utf-8") as fh:
        for c in contributions:
            fh.write(f"{user_ids[c.user_index]}\t{','.join(item_ids[j] for j in c.perturbed_items)}\n")


def read_contributions(path, user_index: Mapping[str, int], item_index: Mapping[str, int]) -> List[PerturbedContribution]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            uid, _, rest = line.partition("\t")
            try:
                items = tuple(item_index[i] for i in rest.split(",") if i)
                out.append(PerturbedContribution(user_index[uid], items))
            except KeyError as e:
                raise ValueError(f"{path}: line {lineno}: unknown id {e.args[0]!r}") from None
    return out
