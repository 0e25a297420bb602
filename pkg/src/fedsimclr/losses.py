"""Batch objectives with analytic gradients.

All functions return ``(loss, grads)`` where ``loss`` is the quantity that is
*minimized*. For the contrastive terms this is the negated variational bound,
so ``-infonce(...)[0]`` is the bound value (at most ``log K``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import ModelParams, backward, forward_encoder, uv_head_backward
from .numerics import DEFAULT_EPS, ConfigurationError, log_softmax, row_l2_normalize

METHODS = ("local_simclr", "federated_simclr", "spectral", "spectral_uv",
           "simsiam", "simsiam_uv", "supervised")
UV_METHODS = frozenset({"federated_simclr", "spectral_uv", "simsiam_uv"})
SIMSIAM_METHODS = frozenset({"simsiam", "simsiam_uv"})


@dataclass(frozen=True)
class Critic:
    """Cosine similarity over a temperature."""

    temperature: float = 0.5
    kind: str = "cosine_over_temperature"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError("critic temperature must be positive")
        if self.kind != "cosine_over_temperature":
            raise ConfigurationError(f"unknown critic kind {self.kind!r}")

    def scores(self, a, b) -> np.ndarray:
        """``scores[j, k] = f(a_j, b_k)``."""
        return row_l2_normalize(a) @ row_l2_normalize(b).T / self.temperature


@dataclass
class BatchViews:
    z1: np.ndarray
    z2: np.ndarray
    labels: np.ndarray | None = None
    client_id: int = 0

    def __post_init__(self):
        self.z1 = np.asarray(self.z1, dtype=np.float64)
        self.z2 = np.asarray(self.z2, dtype=np.float64)
        if self.z1.shape != self.z2.shape or self.z1.ndim != 2:
            raise ConfigurationError(f"view shapes differ: {self.z1.shape} vs {self.z2.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def k(self) -> int:
        return self.z1.shape[0]


def infonce(views: BatchViews, critic: Critic = Critic(), eps: float = DEFAULT_EPS):
    if views.k == 0:
        return 0.0, (np.zeros_like(views.z1), np.zeros_like(views.z2))
    loss, g1, g2 = kernels.cosine_infonce(views.z1, views.z2, critic.temperature, eps)
    return loss, (g1, g2)


def _softmax_ce(logits: np.ndarray, target: np.ndarray):
    """Summed NLL of ``target`` and d(sum)/d(logits)."""
    lsm = log_softmax(logits, axis=1)
    rows = np.arange(logits.shape[0])
    loss = -float(np.sum(lsm[rows, target]))
    g = np.exp(lsm)
    g[rows, target] -= 1.0
    return loss, g


def uv_loss(views: BatchViews, uv_weights: np.ndarray, client_id: int | None = None,
            eps: float = DEFAULT_EPS):
    """Client-ID cross entropy on both views.

    The gradient w.r.t. ``uv_weights`` is restricted to row ``client_id``;
    every other row is a fixed input during local optimization.
    """
    s = views.client_id if client_id is None else client_id
    num_clients = uv_weights.shape[0]
    if not 0 <= s < num_clients:
        raise ConfigurationError(f"client id {s} outside [0, {num_clients})")
    k = views.k
    if k == 0:
        return 0.0, (np.zeros_like(views.z1), np.zeros_like(views.z2), np.zeros_like(uv_weights))
    target = np.full(k, s)
    total, grads = 0.0, []
    d_uv = np.zeros_like(uv_weights)
    for z in (views.z1, views.z2):
        logits = row_l2_normalize(z, eps) @ uv_weights.T
        l, g = _softmax_ce(logits, target)
        total += l / k
        d_z, d_w = uv_head_backward(z, uv_weights, g / k, eps)
        grads.append(d_z)
        d_uv[s] += d_w[s]
    return total, (grads[0], grads[1], d_uv)


def _grouped(loss_fn, views: BatchViews):
    """Sample-weighted mean of ``loss_fn`` over same-label groups.

    Singleton groups contribute zero loss but still count towards the weight.
    """
    if views.labels is None:
        raise ConfigurationError("grouped loss needs labels")
    n = views.k
    g1, g2 = np.zeros_like(views.z1), np.zeros_like(views.z2)
    total = 0.0
    if n == 0:
        return total, (g1, g2)
    for c in np.unique(views.labels):
        idx = np.flatnonzero(views.labels == c)
        if idx.size < 2:
            continue
        l, (a, b) = loss_fn(BatchViews(views.z1[idx], views.z2[idx]))
        w = idx.size / n
        total += w * l
        g1[idx] += w * a
        g2[idx] += w * b
    return total, (g1, g2)


def supervised_contrastive_infonce(views: BatchViews, critic: Critic = Critic(),
                                   eps: float = DEFAULT_EPS):
    """InfoNCE restricted to pairs of datapoints that share a label."""
    return _grouped(lambda v: infonce(v, critic, eps), views)


def label_ce_loss(views: BatchViews, label_head, num_classes: int | None = None):
    """Label cross entropy of a linear head applied to both views, summed over views."""
    w, b = label_head
    c = w.shape[0] if num_classes is None else num_classes
    y = views.labels
    if y is None:
        raise ConfigurationError("label loss needs labels")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ConfigurationError(f"label outside [0, {c})")
    k = views.k
    dw, db = np.zeros_like(w), np.zeros_like(b)
    if k == 0:
        return 0.0, (np.zeros_like(views.z1), np.zeros_like(views.z2), (dw, db))
    total, dzs = 0.0, []
    for z in (views.z1, views.z2):
        l, g = _softmax_ce(z @ w.T + b, y)
        g /= k
        total += l / k
        dw += g.T @ z
        db += g.sum(axis=0)
        dzs.append(g @ w)
    return total, (dzs[0], dzs[1], (dw, db))


def spectral_loss(views: BatchViews):
    """``-2 mean_k <a_k, b_k> + mean_{k != j} <a_k, b_j>^2``."""
    a, b = views.z1, views.z2
    k = views.k
    if k == 0:
        return 0.0, (np.zeros_like(a), np.zeros_like(b))
    m = a @ b.T
    pos = float(np.trace(m)) / k
    ga, gb = -2.0 * b / k, -2.0 * a / k
    neg = 0.0
    if k >= 2:
        off = m.copy()
        np.fill_diagonal(off, 0.0)
        scale = 1.0 / (k * (k - 1))
        neg = float(np.sum(off * off)) * scale
        ga = ga + 2.0 * scale * (off @ b)
        gb = gb + 2.0 * scale * (off.T @ a)
    return -2.0 * pos + neg, (ga, gb)


def _cosine_rows(p: np.ndarray, t: np.ndarray, eps: float):
    """Row cosines cos(p_k, t_k) and their gradient w.r.t. ``p`` only."""
    pn = np.maximum(np.linalg.norm(p, axis=1), eps)
    tn = np.maximum(np.linalg.norm(t, axis=1), eps)
    pu, tu = p / pn[:, None], t / tn[:, None]
    cos = np.einsum("ij,ij->i", pu, tu)
    grad = (tu - pu * cos[:, None]) / pn[:, None]
    return cos, grad


def simsiam_loss(p1, p2, z1, z2, eps: float = DEFAULT_EPS):
    """Symmetric negative cosine between predictions and stopped targets.

    ``z1`` and ``z2`` are treated as constants: the returned gradients are
    w.r.t. ``p1`` and ``p2`` only.
    """
    p1, p2 = np.asarray(p1, float), np.asarray(p2, float)
    k = p1.shape[0]
    if k == 0:
        return 0.0, (np.zeros_like(p1), np.zeros_like(p2))
    c1, g1 = _cosine_rows(p1, np.asarray(z2, float), eps)
    c2, g2 = _cosine_rows(p2, np.asarray(z1, float), eps)
    loss = -0.5 * (float(c1.mean()) + float(c2.mean()))
    return loss, (-0.5 * g1 / k, -0.5 * g2 / k)


# -- per-client composition -------------------------------------------------

@dataclass
class LossTerms:
    total: float = 0.0
    contrastive: float = 0.0
    uv: float = 0.0
    label: float = 0.0


def compose_client_loss(params: ModelParams, x1, x2, *, client_id: int, method: str,
                        uv_weight: float = 1.0, labels=None, labelled_mask=None,
                        critic: Critic = Critic(), frozen_targets=None,
                        with_grad: bool = True, eps: float = DEFAULT_EPS):
    """Full local objective on one minibatch and its parameter gradient.

    Unlabelled rows get the plain unsupervised loss; labelled rows get the
    same loss within label groups plus a label cross entropy on both views.
    UV methods add ``uv_weight`` times the client-ID loss over every row.
    ``supervised`` trains the label head and encoder on labelled rows only.

    ``frozen_targets`` replaces the SimSiam target projections ``(z1, z2)``
    with fixed arrays; by default the current projections are used. With
    ``with_grad=False`` the backward pass is skipped and ``None`` is returned
    in place of the gradient.
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {METHODS}")
    if uv_weight < 0:
        raise ConfigurationError("uv_weight must be non-negative")
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = x1.shape[0]
    mask = np.zeros(n, bool) if labelled_mask is None else np.asarray(labelled_mask, bool)
    if mask.shape != (n,):
        raise ConfigurationError("labelled_mask length must match the batch")
    if mask.any() and labels is None:
        raise ConfigurationError("labelled rows present but no labels given")
    if method in SIMSIAM_METHODS and not params.predictor:
        raise ConfigurationError(f"{method} needs a predictor network")
    if method == "supervised" and labels is None:
        raise ConfigurationError("supervised method needs labels")
    labels = None if labels is None else np.asarray(labels, dtype=np.int64)

    t1, t2 = forward_encoder(params, x1), forward_encoder(params, x2)
    d = {key: np.zeros_like(getattr(t, attr)) for key, t, attr in
         (("z1", t1, "z"), ("z2", t2, "z"), ("p1", t1, "projection"), ("p2", t2, "projection"))}
    if method in SIMSIAM_METHODS:
        d["q1"], d["q2"] = np.zeros_like(t1.prediction), np.zeros_like(t2.prediction)
    terms = LossTerms()
    d_uv_total = None
    d_head = None
    ul, lab = np.flatnonzero(~mask), np.flatnonzero(mask)
    tz1, tz2 = (t1.projection, t2.projection) if frozen_targets is None else frozen_targets

    def unsup(rows, grouped):
        views = BatchViews(t1.projection[rows], t2.projection[rows],
                           None if labels is None else labels[rows])
        if method in ("local_simclr", "federated_simclr"):
            fn = (lambda v: infonce(v, critic, eps))
            l, (a, b) = _grouped(fn, views) if grouped else fn(views)
            d["p1"][rows] += a
            d["p2"][rows] += b
        elif method in ("spectral", "spectral_uv"):
            l, (a, b) = _grouped(spectral_loss, views) if grouped else spectral_loss(views)
            d["p1"][rows] += a
            d["p2"][rows] += b
        else:
            # group-weighted means of a per-pair loss equal the plain mean
            l, (a, b) = simsiam_loss(t1.prediction[rows], t2.prediction[rows],
                                     tz1[rows], tz2[rows], eps)
            d["q1"][rows] += a
            d["q2"][rows] += b
        return l

    if method != "supervised":
        terms.contrastive += unsup(ul, grouped=False)
        if lab.size:
            terms.contrastive += unsup(lab, grouped=True)
        if method in UV_METHODS and uv_weight > 0:
            l, (a, b, d_uv) = uv_loss(BatchViews(t1.projection, t2.projection),
                                      params.uv_weights, client_id, eps)
            terms.uv = l
            d["p1"] += uv_weight * a
            d["p2"] += uv_weight * b
            d_uv_total = uv_weight * d_uv
    if lab.size:
        l, (a, b, (dw, db)) = label_ce_loss(BatchViews(t1.z[lab], t2.z[lab], labels[lab]),
                                            params.label_head)
        terms.label = l
        d["z1"][lab] += a
        d["z2"][lab] += b
        d_head = (dw, db)

    terms.total = terms.contrastive + uv_weight * terms.uv + terms.label
    if not with_grad:
        return terms, None
    grads = backward(params, t1, d_z=d["z1"], d_proj=d["p1"], d_pred=d.get("q1"))
    g2 = backward(params, t2, d_z=d["z2"], d_proj=d["p2"], d_pred=d.get("q2"))
    for name in ("encoder", "projector", "predictor"):
        setattr(grads, name, [(gw + hw, gb + hb) for (gw, gb), (hw, hb)
                              in zip(getattr(grads, name), getattr(g2, name))])
    if d_uv_total is not None:
        grads.uv_weights = d_uv_total
    if d_head is not None:
        grads.label_head = d_head
    return terms, grads
