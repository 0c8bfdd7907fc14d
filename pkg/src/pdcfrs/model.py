"""NCF predictor, its losses with hand-derived gradients, and Adam.

Shapes: ``U`` is (num_users, d), ``V`` is (num_items, d). MLP layer ``l``
maps row vectors as ``x @ W_l + b_l`` followed by the hidden activation, and
the score is ``sigmoid(act_L @ h)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .seeding import stream

LOG_CLAMP = 1e-7
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "tanh", "identity")


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class PublicParams:
    """The shared part of the model: item table, MLP and output head."""

    V: np.ndarray
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    h: np.ndarray

    def tensors(self) -> List[np.ndarray]:
        return [self.V, *self.weights, *self.biases, self.h]

    @classmethod
    def from_tensors(cls, tensors: Sequence[np.ndarray]) -> "PublicParams":
        n = (len(tensors) - 2) // 2
        return cls(V=tensors[0], weights=list(tensors[1:1 + n]), biases=list(tensors[1 + n:1 + 2 * n]), h=tensors[-1])

    def copy(self) -> "PublicParams":
        return PublicParams.from_tensors([t.copy() for t in self.tensors()])


@dataclass
class ModelParams:
    U: np.ndarray
    V: np.ndarray
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    h: np.ndarray
    activation: str = "relu"

    @property
    def dim(self) -> int:
        return self.U.shape[1]

    def public(self) -> PublicParams:
        return PublicParams(self.V, self.weights, self.biases, self.h)

    def with_public(self, pub: PublicParams) -> "ModelParams":
        return replace(self, V=pub.V, weights=list(pub.weights), biases=list(pub.biases), h=pub.h)

    def tensors(self) -> List[np.ndarray]:
        return [self.U, self.V, *self.weights, *self.biases, self.h]

    def copy(self) -> "ModelParams":
        return ModelParams(self.U.copy(), self.V.copy(), [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.h.copy(), self.activation)

    def allclose(self, other: "ModelParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors()))


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    beta: float = 0.5
    lam: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lambda must be >= 0")


def init_params(num_users: int, num_items: int, dim: int = 32, layers: Sequence[int] = (32, 16, 8),
                rng_seed: int = 0, activation: str = "relu", stream_name: str = "init") -> ModelParams:
    """Embeddings ~ N(0, 0.01^2), Xavier-uniform MLP weights and head, zero biases."""
    if min(num_users, num_items, dim, *layers) <= 0:
        raise ValueError("all dimensions must be positive")
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = stream(rng_seed, stream_name)
    U = rng.normal(0.0, 0.01, size=(num_users, dim))
    V = rng.normal(0.0, 0.01, size=(num_items, dim))
    widths = [2 * dim, *layers]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    limit = np.sqrt(6.0 / (widths[-1] + 1))
    h = rng.uniform(-limit, limit, size=widths[-1])
    return ModelParams(U, V, weights, biases, h, activation)


# ---------------------------------------------------------------- forward / backward

def mlp_forward(u: np.ndarray, v: np.ndarray, weights, biases, h, activation="relu"):
    """Logits for row-aligned user/item embeddings; returns (logits, cache)."""
    x = np.concatenate([u, v], axis=1)
    inputs, pre = [x], []
    for W, b in zip(weights, biases):
        z = x @ W + b
        x = _act(z, activation)
        pre.append(z)
        inputs.append(x)
    return x @ h, (inputs, pre)


def mlp_backward(dlogit: np.ndarray, cache, weights, h, activation="relu"):
    """Backprop ``dL/dlogit`` (n,) through the MLP.

    Returns (du, dv, dweights, dbiases, dh) where du/dv are per-row.
    """
    inputs, pre = cache
    dh = inputs[-1].T @ dlogit
    dx = np.outer(dlogit, h)
    dws: List[np.ndarray] = [None] * len(weights)
    dbs: List[np.ndarray] = [None] * len(weights)
    for l in range(len(weights) - 1, -1, -1):
        dz = dx * _act_grad(pre[l], inputs[l + 1], activation)
        dws[l] = inputs[l].T @ dz
        dbs[l] = dz.sum(axis=0)
        dx = dz @ weights[l].T
    d = dx.shape[1] // 2
    return dx[:, :d], dx[:, d:], dws, dbs, dh


def predict_logits(params: ModelParams, users, items) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    logit, _ = mlp_forward(params.U[users], params.V[items], params.weights, params.biases, params.h,
                           params.activation)
    return logit


def predict_score(params: ModelParams, user_index: int, item_index: int) -> float:
    if not (0 <= user_index < params.U.shape[0] and 0 <= item_index < params.V.shape[0]):
        raise IndexError(f"index out of range: user {user_index}, item {item_index}")
    return float(expit(predict_logits(params, [user_index], [item_index])[0]))


def score_all_items(params: ModelParams, users: Sequence[int], chunk: int = 64) -> np.ndarray:
    """Logits of every item for each user in ``users``; shape (len(users), num_items).

    The first layer is split into user and item halves so the item half is
    computed once per call.
    """
    users = np.asarray(users, dtype=np.int64)
    d = params.dim
    W1, b1 = params.weights[0], params.biases[0]
    item_part = params.V @ W1[d:] + b1
    user_part = params.U[users] @ W1[:d]
    out = np.empty((len(users), params.V.shape[0]))
    for s in range(0, len(users), chunk):
        x = _act(user_part[s:s + chunk, None, :] + item_part[None, :, :], params.activation)
        for W, b in zip(params.weights[1:], params.biases[1:]):
            x = _act(x @ W + b, params.activation)
        out[s:s + chunk] = x @ params.h
    return out


# ---------------------------------------------------------------- losses

def _bce_terms(logit: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = np.clip(expit(logit), LOG_CLAMP, 1.0 - LOG_CLAMP)
    return -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))


def bce_loss(params: ModelParams, triples) -> float:
    """Summed binary cross-entropy over (user, item, label) triples."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(triples) == 0:
        return 0.0
    logit = predict_logits(params, triples[:, 0], triples[:, 1])
    return float(_bce_terms(logit, triples[:, 2].astype(np.float64)).sum())


def scatter_rows(num_rows: int, index: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Sum ``rows`` into a (num_rows, d) zero table at ``index``.

    Rows sharing an index are reduced in their original order, so any
    order-preserving relabelling of ``index`` gives bit-identical sums.
    """
    out = np.zeros((num_rows, rows.shape[1]))
    if len(index) == 0:
        return out
    order = np.argsort(index, kind="stable")
    idx = index[order]
    starts = np.flatnonzero(np.concatenate([[True], idx[1:] != idx[:-1]]))
    out[idx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def _unit_rows(x: np.ndarray, what: str) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm row in {what}; cosine similarity is undefined")
    return x / norms[:, None], norms


def _log_softmax(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=1, keepdims=True))


def unit_rows(x: np.ndarray) -> np.ndarray:
    return _unit_rows(x, "view")[0]


def info_nce_with_grad(anchor: np.ndarray, view: np.ndarray, positives, tau: float,
                       need_grad: bool = True, view_is_unit: bool = False):
    """Cosine InfoNCE of anchor rows against view rows, and its anchor gradient.

    Row ``i`` of ``anchor`` has positive ``view[positives[i]]``; every view
    row is in its denominator. Returns (loss, grad) with grad shaped like
    ``anchor`` (``None`` when ``need_grad`` is false). ``view_is_unit``
    skips re-normalizing a view whose rows already have unit length.
    """
    positives = np.asarray(positives, dtype=np.int64)
    a_hat, a_norm = _unit_rows(anchor, "anchor")
    b_hat = view if view_is_unit else _unit_rows(view, "view")[0]
    cos = a_hat @ b_hat.T
    logp = _log_softmax(cos / tau)
    rows = np.arange(len(anchor))
    loss = float(-logp[rows, positives].sum())
    if not need_grad:
        return loss, None
    g = np.exp(logp)
    g[rows, positives] -= 1.0
    # d cos(a, b_j)/da = (b_hat_j - cos_j * a_hat) / |a|
    grad = (g @ b_hat - (g * cos).sum(axis=1, keepdims=True) * a_hat) / (tau * a_norm[:, None])
    return loss, grad


def info_nce(anchor_rows: np.ndarray, view_rows: np.ndarray, tau: float) -> float:
    """Sum over rows of -log softmax_j(cos(a_i, b_j)/tau) at j = i."""
    anchor_rows = np.asarray(anchor_rows, dtype=np.float64)
    view_rows = np.asarray(view_rows, dtype=np.float64)
    if anchor_rows.shape != view_rows.shape:
        raise ValueError("anchor and view must have the same shape")
    if anchor_rows.shape[0] < 2:
        raise ValueError("need at least two rows")
    return info_nce_with_grad(anchor_rows, view_rows, np.arange(len(anchor_rows)), tau, need_grad=False)[0]


def grad_item_cl(V: np.ndarray, V_aux: np.ndarray, cfg: LossConfig, rows: Optional[np.ndarray] = None):
    """Gradient of ``beta * InfoNCE(V, V_aux)`` with respect to V only.

    ``rows`` restricts the anchors (sampled denominators keep all of
    ``V_aux`` unless the caller slices it). Returns (loss, grad).
    """
    if V.shape != V_aux.shape:
        raise ValueError("V and V_aux shapes differ")
    if cfg.beta == 0:
        return 0.0, np.zeros_like(V)
    if rows is None:
        loss, g = info_nce_with_grad(V, V_aux, np.arange(len(V)), cfg.tau)
        return cfg.beta * loss, cfg.beta * g
    grad = np.zeros_like(V)
    loss, g = info_nce_with_grad(V[rows], V_aux[rows], np.arange(len(rows)), cfg.tau)
    grad[rows] = cfg.beta * g
    return cfg.beta * loss, grad


@dataclass
class ClientGrads:
    u: np.ndarray
    V: np.ndarray
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    h: np.ndarray

    def public(self) -> List[np.ndarray]:
        return [self.V, *self.weights, *self.biases, self.h]


def client_objective(u: np.ndarray, V: np.ndarray, weights, biases, h, items, labels,
                     aux_view: Optional[np.ndarray] = None, aux_pos: int = 0,
                     lam: float = 0.0, tau: float = 1.0, activation: str = "relu",
                     view_is_unit: bool = False):
    """Value and gradient of BCE over one user's (item, label) pairs plus ``lam`` x user InfoNCE.

    ``u`` is the user's embedding (d,), ``V`` any item table the ``items``
    index into. The contrastive term uses ``aux_view`` as the (constant)
    view rows with ``aux_view[aux_pos]`` as the positive.
    """
    items = np.asarray(items, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.float64)
    n = len(items)
    du = np.zeros_like(u)
    dV = np.zeros_like(V)
    loss = 0.0
    if n:
        U_rows = np.broadcast_to(u, (n, u.shape[0]))
        logit, cache = mlp_forward(U_rows, V[items], weights, biases, h, activation)
        loss = float(_bce_terms(logit, labels).sum())
        # clamp ignored: this is the gradient of the unclamped BCE
        dlogit = expit(logit) - labels
        du_rows, dv_rows, dws, dbs, dh = mlp_backward(dlogit, cache, weights, h, activation)
        # same reduction as bce_grad, so single-user training matches it bit for bit
        du += scatter_rows(1, np.zeros(n, dtype=np.int64), du_rows)[0]
        dV = scatter_rows(V.shape[0], items, dv_rows)
    else:
        dws = [np.zeros_like(w) for w in weights]
        dbs = [np.zeros_like(b) for b in biases]
        dh = np.zeros_like(h)
    if lam > 0 and aux_view is not None:
        cl, g = info_nce_with_grad(u[None, :], aux_view, [aux_pos], tau, view_is_unit=view_is_unit)
        loss += lam * cl
        du += lam * g[0]
    return loss, ClientGrads(du, dV, dws, dbs, dh)


def grad_total_client_loss(params: ModelParams, triples, U_aux: Optional[np.ndarray], cfg: LossConfig,
                           self_user: int):
    """Loss and gradient of BCE + lambda * user-contrastive loss for one user.

    Returns (loss, ClientGrads) where ``u`` is the gradient of the user's own
    embedding row and the rest are full-size public-parameter gradients.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(triples) and np.any(triples[:, 0] != self_user):
        raise ValueError("all triples must belong to self_user")
    if U_aux is not None and U_aux.shape != params.U.shape:
        raise ValueError("U_aux shape must match U")
    return client_objective(params.U[self_user], params.V, params.weights, params.biases, params.h,
                            triples[:, 1], triples[:, 2], U_aux, self_user, cfg.lam, cfg.tau,
                            params.activation)


def bce_grad(params: ModelParams, triples):
    """Loss and full-size gradients (dU, dV, dweights, dbiases, dh) of summed BCE."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    dU = np.zeros_like(params.U)
    dV = np.zeros_like(params.V)
    if len(triples) == 0:
        return 0.0, (dU, dV, [np.zeros_like(w) for w in params.weights],
                     [np.zeros_like(b) for b in params.biases], np.zeros_like(params.h))
    users, items = triples[:, 0], triples[:, 1]
    labels = triples[:, 2].astype(np.float64)
    logit, cache = mlp_forward(params.U[users], params.V[items], params.weights, params.biases, params.h,
                               params.activation)
    loss = float(_bce_terms(logit, labels).sum())
    du, dv, dws, dbs, dh = mlp_backward(expit(logit) - labels, cache, params.weights, params.h,
                                        params.activation)
    dU = scatter_rows(params.U.shape[0], users, du)
    dV = scatter_rows(params.V.shape[0], items, dv)
    return loss, (dU, dV, dws, dbs, dh)


# ---------------------------------------------------------------- Adam

class Packer:
    """Views a list of tensors as one flat vector so Adam runs as a single fused update."""

    def __init__(self, shapes: Sequence[Tuple[int, ...]]):
        self.shapes = [tuple(s) for s in shapes]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    def pack(self, arrays: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in arrays])

    def unpack(self, flat: np.ndarray) -> List[np.ndarray]:
        o = self.offsets
        return [flat[o[i]:o[i + 1]].reshape(s) for i, s in enumerate(self.shapes)]


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], lr: float = 0.001, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr, **kw)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """One bias-corrected Adam update; returns (new_params, new_state). Inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(state, m=new_m, v=new_v, step=t)


# ---------------------------------------------------------------- checkpoints

def save_params(path, params: ModelParams, extra: Optional[dict] = None) -> None:
    """Write an uncompressed ``.npz`` holding every tensor plus a JSON header.

    Tensor names: ``U``, ``V``, ``W0..``, ``b0..``, ``h``; ``header`` holds
    the format version, activation and layer count.
    """
    n = len(params.weights)
    arrays = {"U": params.U, "V": params.V, "h": params.h}
    for i in range(n):
        arrays[f"W{i}"] = params.weights[i]
        arrays[f"b{i}"] = params.biases[i]
    header = {"format": "pdcfrs-params", "version": CHECKPOINT_VERSION, "layers": n,
              "activation": params.activation, **(extra or {})}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> ModelParams:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != "pdcfrs-params" or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint header {header}")
        n = header["layers"]
        return ModelParams(z["U"], z["V"], [z[f"W{i}"] for i in range(n)], [z[f"b{i}"] for i in range(n)],
                           z["h"], header["activation"])
