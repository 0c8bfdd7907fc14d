"""Single-process simulation of the federated protocol with an auxiliary server model.

Per global round the server first refreshes its auxiliary NCF on the
perturbed uploads. Clients are then visited in a shuffled order, in
sequential batches. Every client in a batch starts from the same broadcast
snapshot and trains locally on its own triples plus augmented positives.
The batch's uploads are averaged, and the server applies the item-contrastive
update before the next batch starts.

Only :class:`Broadcast` objects go server -> client and only
:class:`Upload` / :class:`~pdcfrs.privacy.PerturbedContribution` objects go
client -> server.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .config import ExperimentConfig
from .data import InteractionDataset
from .metrics import RoundMetrics, evaluate_all, rank_top_k
from .model import (AdamState, LossConfig, ModelParams, Packer, PublicParams, adam_step, bce_grad,
                    client_objective, grad_item_cl, init_params, score_all_items, unit_rows)
from .privacy import ExponentialMechanism, PerturbedContribution, PrivacyConfig, SimilarityModel, default_sensitivity
from .seeding import stream

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- messages

@dataclass(frozen=True)
class Broadcast:
    """What the server sends one client at the start of its local training."""

    public: PublicParams
    aux_scores: Optional[np.ndarray] = None  # aux-model logits of every item for this user
    alpha: int = 0
    aux_view: Optional[np.ndarray] = None  # unit-normalized U_aux rows for the user-contrastive term
    aux_pos: int = 0  # index of the client's own row in aux_view
    round: int = 0


@dataclass(frozen=True)
class Upload:
    user_index: int
    public: PublicParams
    loss: float
    num_samples: Optional[int] = None  # only sent for size-weighted aggregation


# ---------------------------------------------------------------- training primitives

def train_centralized(params: ModelParams, triples: np.ndarray, adam: AdamState, epochs: int,
                      batch_size: Optional[int] = None, rng: Optional[np.random.Generator] = None):
    """Plain minibatch Adam on summed BCE over all tensors of ``params``.

    The optimizer works on the tensors packed into one flat vector; a fresh
    ``AdamState`` of any layout is accepted. With ``batch_size=None`` each
    epoch is a single full-batch step and no randomness is used. Returns
    (params, adam, mean per-triple loss of the last epoch).
    """
    nl = len(params.weights)
    packer = Packer([t.shape for t in params.tensors()])
    flat = packer.pack(params.tensors())
    if adam.step == 0 and len(adam.m) != 1:
        adam = AdamState.zeros_like([flat], lr=adam.lr, beta1=adam.beta1, beta2=adam.beta2, eps=adam.eps)
    n = len(triples)
    last = float("nan")
    for _ in range(epochs):
        if batch_size is None or batch_size >= n:
            batches = [triples]
        else:
            order = rng.permutation(n)
            batches = [triples[order[s:s + batch_size]] for s in range(0, n, batch_size)]
        total = 0.0
        for b in batches:
            t = packer.unpack(flat)
            cur = ModelParams(t[0], t[1], t[2:2 + nl], t[2 + nl:2 + 2 * nl], t[-1], params.activation)
            loss, (dU, dV, dws, dbs, dh) = bce_grad(cur, b)
            (flat,), adam = adam_step(adam, [flat], [packer.pack([dU, dV, *dws, *dbs, dh])])
            total += loss
        last = total / max(n, 1)
    t = packer.unpack(flat)
    out = ModelParams(t[0], t[1], t[2:2 + nl], t[2 + nl:2 + 2 * nl], t[-1], params.activation)
    return out, adam, last


def generate_augmentation(aux_scores: np.ndarray, local_positive_set: Iterable[int], alpha: int) -> List[int]:
    """Top-``alpha`` items by auxiliary score, excluding the user's own positives (ties -> lower index)."""
    if alpha <= 0:
        return []
    return rank_top_k(np.asarray(aux_scores), set(local_positive_set), alpha)


def aggregate(uploads: Sequence[PublicParams], weights: Optional[Sequence[float]] = None) -> PublicParams:
    """Element-wise (weighted) mean of every tensor, reduced in the given order."""
    if not uploads:
        raise ValueError("nothing to aggregate")
    agg = Aggregator()
    for i, up in enumerate(uploads):
        agg.add(up, 1.0 if weights is None else weights[i])
    return agg.result()


class Aggregator:
    """Running weighted sum of uploads so a batch never holds all copies at once."""

    def __init__(self):
        self._sum: Optional[List[np.ndarray]] = None
        self._total = 0.0

    def add(self, up: PublicParams, weight: float = 1.0) -> None:
        ts = up.tensors()
        if self._sum is None:
            self._sum = [np.zeros_like(t) for t in ts]
        if len(ts) != len(self._sum) or any(t.shape != s.shape for t, s in zip(ts, self._sum)):
            raise ValueError("upload shapes do not match")
        for s, t in zip(self._sum, ts):
            if weight == 1.0:
                s += t
            else:
                s += weight * t
        self._total += weight

    def result(self) -> PublicParams:
        if self._sum is None:
            raise ValueError("nothing to aggregate")
        return PublicParams.from_tensors([s / self._total for s in self._sum])


# ---------------------------------------------------------------- parties

class Client:
    """One user's device: private embedding plus local triples."""

    def __init__(self, user_index: int, embedding: np.ndarray, local_triples: np.ndarray,
                 interacted: Iterable[int] = (), num_items: int = 0):
        self.user_index = user_index
        self.embedding = embedding.copy()
        self._triples = np.asarray(local_triples, dtype=np.int64).reshape(-1, 3)
        if len(self._triples) and np.any(self._triples[:, 0] != user_index):
            raise ValueError("local triples must all belong to this client")
        self._positives = frozenset(self._triples[self._triples[:, 2] == 1, 1].tolist())
        self._interacted = frozenset(interacted) | self._positives
        self._num_items = num_items

    @property
    def positives(self) -> frozenset:
        return self._positives

    def contribute(self, mechanism: ExponentialMechanism) -> Optional[PerturbedContribution]:
        if not self._positives:
            return None
        return mechanism.perturb(self.user_index, self._positives)

    def _training_triples(self, cfg: ExperimentConfig, round_index: int) -> np.ndarray:
        if not cfg.resample_negatives:
            return self._triples
        pos = np.array(sorted(self._positives), dtype=np.int64)
        mask = np.ones(self._num_items, dtype=bool)
        mask[list(self._interacted)] = False
        pool = np.flatnonzero(mask)
        n_neg = min(cfg.neg_ratio * len(pos), len(pool))
        neg = np.sort(stream(cfg.seed, "resample", round_index, self.user_index).choice(pool, n_neg, replace=False))
        out = np.empty((len(pos) + n_neg, 3), dtype=np.int64)
        out[:, 0] = self.user_index
        out[:, 1] = np.concatenate([pos, neg])
        out[:, 2] = np.concatenate([np.ones(len(pos), np.int64), np.zeros(n_neg, np.int64)])
        return out

    def train(self, bc: Broadcast, cfg: ExperimentConfig) -> Upload:
        """Local Adam epochs on BCE over own + augmented data plus lambda * user-contrastive loss.

        The optimizer starts fresh every round. Only rows of V the client
        touches are optimized; Adam leaves zero-gradient rows with zero
        moments unchanged, so this equals a dense update.
        """
        triples = self._training_triples(cfg, bc.round)
        aug = generate_augmentation(bc.aux_scores, self._positives, bc.alpha) if bc.aux_scores is not None else []
        aug = np.asarray(aug, dtype=np.int64)
        items = np.concatenate([triples[:, 1], aug])
        if len(aug) and cfg.aug_labels == "soft":
            aug_labels = expit(bc.aux_scores[aug])  # the aux model's predicted probability is the label
        else:
            aug_labels = np.ones(len(aug))
        labels = np.concatenate([triples[:, 2].astype(np.float64), aug_labels])
        touched, local_idx = np.unique(items, return_inverse=True)

        snap = bc.public
        nl = len(snap.weights)
        init = [self.embedding, snap.V[touched], *snap.weights, *snap.biases, snap.h]
        packer = Packer([t.shape for t in init])
        flat = packer.pack(init)
        adam = AdamState.zeros_like([flat], lr=cfg.lr)
        lam = cfg.effective_lam if bc.aux_view is not None else 0.0
        rng = stream(cfg.seed, "local", bc.round, self.user_index) if cfg.local_batch_size else None
        n = len(items)
        loss = 0.0
        for _ in range(cfg.local_epochs):
            if not cfg.local_batch_size or cfg.local_batch_size >= n:
                batches = [np.arange(n)]
            else:
                order = rng.permutation(n)
                batches = [order[s:s + cfg.local_batch_size] for s in range(0, n, cfg.local_batch_size)]
            loss = 0.0
            for idx in batches:
                t = packer.unpack(flat)
                l, g = client_objective(t[0], t[1], t[2:2 + nl], t[2 + nl:2 + 2 * nl], t[-1], local_idx[idx],
                                        labels[idx], bc.aux_view, bc.aux_pos, lam, cfg.tau, cfg.activation,
                                        view_is_unit=True)
                (flat,), adam = adam_step(adam, [flat], [packer.pack([g.u, g.V, *g.weights, *g.biases, g.h])])
                loss += l
        t = packer.unpack(flat)
        self.embedding = t[0].copy()
        V = snap.V.copy()
        V[touched] = t[1]
        pub = PublicParams(V, [w.copy() for w in t[2:2 + nl]], [b.copy() for b in t[2 + nl:2 + 2 * nl]],
                           t[-1].copy())
        return Upload(self.user_index, pub, loss, n if cfg.weighting == "size" else None)


def build_aux_store(contributions: Iterable[PerturbedContribution], num_items: int, neg_ratio: int,
                    seed: int) -> np.ndarray:
    """Server-side training triples from perturbed uploads.

    Each user's perturbed multiset is deduplicated into positives; the server
    samples ``neg_ratio`` negatives per positive uniformly from the remaining
    items, with a stream keyed by the user.
    """
    blocks = []
    for c in sorted(contributions, key=lambda c: c.user_index):
        pos = np.array(sorted(set(c.perturbed_items)), dtype=np.int64)
        mask = np.ones(num_items, dtype=bool)
        mask[pos] = False
        pool = np.flatnonzero(mask)
        n_neg = min(neg_ratio * len(pos), len(pool))
        neg = np.sort(stream(seed, "aux-negatives", c.user_index).choice(pool, n_neg, replace=False))
        block = np.empty((len(pos) + n_neg, 3), dtype=np.int64)
        block[:, 0] = c.user_index
        block[:, 1] = np.concatenate([pos, neg])
        block[:, 2] = np.concatenate([np.ones(len(pos), np.int64), np.zeros(n_neg, np.int64)])
        blocks.append(block)
    return np.concatenate(blocks) if blocks else np.empty((0, 3), dtype=np.int64)


class Server:
    def __init__(self, public: PublicParams, cfg: ExperimentConfig, aux: Optional[ModelParams] = None,
                 aux_store: Optional[np.ndarray] = None):
        self.public = public
        self.cfg = cfg
        self.aux = aux
        self.aux_store = aux_store if aux_store is not None else np.empty((0, 3), dtype=np.int64)
        self.aux_adam = AdamState.zeros_like(aux.tensors(), lr=cfg.lr) if aux is not None else None
        self.cl_adam = AdamState.zeros_like([public.V], lr=cfg.lr)
        self.round = 0
        self.aux_loss = float("nan")
        self._aux_scores: Optional[np.ndarray] = None
        self._aux_unit: Optional[np.ndarray] = None

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.cfg.tau, beta=self.cfg.effective_beta, lam=self.cfg.effective_lam)

    def train_auxiliary(self, epochs: Optional[int] = None) -> Optional[ModelParams]:
        epochs = self.cfg.aux_epochs if epochs is None else epochs
        if self.aux is None:
            return None
        if len(self.aux_store) == 0:
            log.warning("auxiliary store is empty; skipping auxiliary training")
            return self.aux
        if epochs > 0:
            rng = stream(self.cfg.seed, "aux-train", self.round)
            self.aux, self.aux_adam, self.aux_loss = train_centralized(
                self.aux, self.aux_store, self.aux_adam, epochs, self.cfg.aux_batch_size, rng)
        self._aux_scores = None
        self._aux_unit = None
        return self.aux

    def aux_scores(self) -> np.ndarray:
        """Aux-model logits for every (user, item); recomputed after each aux update."""
        if self._aux_scores is None:
            self._aux_scores = score_all_items(self.aux, np.arange(self.aux.U.shape[0]))
        return self._aux_scores

    def broadcast(self, user_index: int, snapshot: PublicParams) -> Broadcast:
        alpha = self.cfg.effective_alpha if self.aux is not None else 0
        scores = self.aux_scores()[user_index] if alpha > 0 else None
        view, pos = None, 0
        if self.aux is not None and self.cfg.effective_lam > 0:
            view, pos = self._user_view(user_index)
        return Broadcast(snapshot, scores, alpha, view, pos, self.round)

    def _user_view(self, user_index: int) -> Tuple[np.ndarray, int]:
        # cosine only needs directions; normalize once per aux update
        if self._aux_unit is None:
            self._aux_unit = unit_rows(self.aux.U)
        U_aux = self._aux_unit
        m = self.cfg.cl_sample
        if m is None or m >= U_aux.shape[0]:
            return U_aux, user_index
        rng = stream(self.cfg.seed, "user-cl-sample", self.round, user_index)
        others = np.delete(np.arange(U_aux.shape[0]), user_index)
        rows = np.sort(np.concatenate([[user_index], rng.choice(others, m - 1, replace=False)]))
        return U_aux[rows], int(np.searchsorted(rows, user_index))

    def item_cl_update(self) -> PublicParams:
        """``item_cl_steps`` Adam steps on beta * InfoNCE(V, V_aux); V_aux, MLP and h untouched."""
        cfg = self.loss_config
        if self.aux is None or cfg.beta == 0:
            return self.public
        V = self.public.V
        n = V.shape[0]
        for step in range(self.cfg.item_cl_steps):
            rows = None
            if self.cfg.cl_sample is not None and self.cfg.cl_sample < n:
                rows = np.sort(stream(self.cfg.seed, "item-cl-sample", self.round, self.cl_adam.step)
                               .choice(n, self.cfg.cl_sample, replace=False))
            _, g = grad_item_cl(V, self.aux.V, cfg, rows)
            (V,), self.cl_adam = adam_step(self.cl_adam, [V], [g])
        self.public = PublicParams(V, self.public.weights, self.public.biases, self.public.h)
        return self.public


# ---------------------------------------------------------------- rounds and experiments

@dataclass
class Simulation:
    dataset: InteractionDataset
    cfg: ExperimentConfig
    server: Server
    clients: List[Client]
    contributions: List[PerturbedContribution] = field(default_factory=list)

    def user_table(self) -> np.ndarray:
        return np.stack([c.embedding for c in self.clients])

    def model(self) -> ModelParams:
        pub = self.server.public
        return ModelParams(self.user_table(), pub.V, list(pub.weights), list(pub.biases), pub.h, self.cfg.activation)

    def evaluate(self, round_index: int) -> RoundMetrics:
        return evaluate_all(self.model(), self.dataset, self.cfg.k, round_index)


def setup(dataset: InteractionDataset, cfg: ExperimentConfig, sim_model: Optional[SimilarityModel] = None,
          contributions: Optional[List[PerturbedContribution]] = None) -> Simulation:
    """Initialize parameters, clients, perturbed uploads and the server."""
    params = init_params(dataset.num_users, dataset.num_items, cfg.dim, cfg.layers, cfg.seed, cfg.activation)
    clients = [Client(u, params.U[u], dataset.user_triples(u), dataset.interacted(u), dataset.num_items)
               for u in range(dataset.num_users)]
    aux, store = None, None
    if cfg.uses_aux:
        if contributions is None:
            if sim_model is None:
                raise ValueError("a similarity model is required to perturb contributions")
            delta = cfg.delta if cfg.delta is not None else default_sensitivity(sim_model)
            mech = ExponentialMechanism(sim_model, PrivacyConfig(cfg.epsilon, delta, cfg.seed))
            contributions = [c for c in (cl.contribute(mech) for cl in clients) if c is not None]
        aux = init_params(dataset.num_users, dataset.num_items, cfg.dim, cfg.layers, cfg.seed, cfg.activation,
                          stream_name="aux-init")
        store = build_aux_store(contributions, dataset.num_items, cfg.neg_ratio, cfg.seed)
    server = Server(params.public().copy(), cfg, aux, store)
    return Simulation(dataset, cfg, server, clients, list(contributions or []))


def run_round(sim: Simulation) -> RoundMetrics:
    """One global round; returns metrics evaluated after the round."""
    t0 = time.perf_counter()
    cfg, server = sim.cfg, sim.server
    server.train_auxiliary()
    order = stream(cfg.seed, "order", server.round).permutation(len(sim.clients))
    losses = []
    for s in range(0, len(order), cfg.batch_size):
        batch = np.sort(order[s:s + cfg.batch_size])
        snapshot = server.public
        agg = Aggregator()
        for u in batch:
            up = sim.clients[u].train(server.broadcast(int(u), snapshot), cfg)
            agg.add(up.public, 1.0 if up.num_samples is None else float(up.num_samples))
            losses.append(up.loss)
        server.public = agg.result()
        server.item_cl_update()
    server.round += 1
    m = sim.evaluate(server.round)
    wall = (time.perf_counter() - t0) * 1000.0
    return RoundMetrics(m.round, m.recall_at_k, m.ndcg_at_k, m.k, m.users_evaluated,
                        float(np.mean(losses)) if losses else float("nan"), server.aux_loss, wall)


@dataclass
class ExperimentResult:
    metrics: List[RoundMetrics]
    params: ModelParams
    aux: Optional[ModelParams]
    contributions: List[PerturbedContribution]


def run_experiment(dataset: InteractionDataset, cfg: ExperimentConfig, sim_model: Optional[SimilarityModel] = None,
                   contributions: Optional[List[PerturbedContribution]] = None,
                   on_round: Optional[Callable[[RoundMetrics], None]] = None) -> ExperimentResult:
    """Initialize, evaluate the untrained model (round 0), then run ``cfg.rounds`` rounds."""
    sim = setup(dataset, cfg, sim_model, contributions)
    first = sim.evaluate(0)
    trace = [first]
    if on_round:
        on_round(first)
    for _ in range(cfg.rounds):
        m = run_round(sim)
        log.info("round %d recall@%d=%.5f ndcg@%d=%.5f", m.round, m.k, m.recall_at_k, m.k, m.ndcg_at_k)
        trace.append(m)
        if on_round:
            on_round(m)
    return ExperimentResult(trace, sim.model(), sim.server.aux, sim.contributions)
