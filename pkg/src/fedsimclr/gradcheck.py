"""Finite-difference verification of every client objective's analytic gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import SIMSIAM_METHODS, Critic, compose_client_loss
from .model import ModelDims, ModelParams, forward_encoder, init_params
from .numerics import derive_rng, finite_diff_grad, relative_error

# (label, method, labelled fraction of the batch)
GRADIENT_VARIANTS = (
    ("local_simclr", "local_simclr", 0.0),
    ("federated_simclr", "federated_simclr", 0.0),
    ("semi_supervised_simclr", "federated_simclr", 0.5),
    ("spectral", "spectral", 0.0),
    ("spectral_uv", "spectral_uv", 0.0),
    ("simsiam", "simsiam", 0.0),
    ("simsiam_uv", "simsiam_uv", 0.0),
    ("supervised", "supervised", 1.0),
)


@dataclass
class GradCase:
    params: ModelParams
    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    client_id: int
    method: str
    critic: Critic


def _min_abs_preactivation(params: ModelParams, *xs) -> float:
    out = np.inf
    for x in xs:
        for pre in forward_encoder(params, x).preactivations():
            out = min(out, float(np.min(np.abs(pre))))
    return out


def random_case(method: str, labelled_fraction: float, seed: int, kink_tol: float = 1e-4,
                max_tries: int = 100, min_grad_norm: float = 1e-6) -> GradCase:
    """Small random problem (batch <= 8, widths <= 16) away from ReLU kinks."""
    rng = derive_rng(seed, "gradcheck", method, int(labelled_fraction * 100))
    for _ in range(max_tries):
        dims = ModelDims(input_dim=int(rng.integers(2, 7)), encoder_hidden=int(rng.integers(4, 11)),
                         z_dim=int(rng.integers(2, 7)), proj_hidden=int(rng.integers(4, 11)),
                         proj_dim=int(rng.integers(2, 7)),
                         pred_hidden=int(rng.integers(4, 11)) if method in SIMSIAM_METHODS else 0,
                         num_clients=int(rng.integers(2, 5)), num_classes=int(rng.integers(2, 4)))
        params = init_params(dims, rng)
        params = params.map(lambda a: a + 0.1 * rng.standard_normal(a.shape))
        params.uv_weights /= np.linalg.norm(params.uv_weights, axis=1, keepdims=True)
        k = int(rng.integers(2, 9))
        x1 = rng.standard_normal((k, dims.input_dim))
        x2 = x1 + 0.3 * rng.standard_normal(x1.shape)
        labels = rng.integers(0, dims.num_classes, size=k)
        mask = rng.random(k) < labelled_fraction
        if labelled_fraction >= 1.0:
            mask[:] = True
        if _min_abs_preactivation(params, x1, x2) < kink_tol:
            continue
        critic = Critic(float(rng.uniform(0.2, 1.0)))
        case = GradCase(params, x1, x2, labels, mask, int(rng.integers(0, dims.num_clients)),
                        method, critic)
        # a locally constant loss (all units dead) makes relative error meaningless
        if np.linalg.norm(_analytic(case)) >= min_grad_norm:
            return case
    raise RuntimeError("could not draw a kink-free gradient-check case")


def _analytic(case: GradCase) -> np.ndarray:
    _, grads = compose_client_loss(case.params, case.x1, case.x2, client_id=case.client_id,
                                   method=case.method, labels=case.labels,
                                   labelled_mask=case.mask, critic=case.critic)
    return grads.flatten()


def gradient_error(case: GradCase, h: float = 1e-6) -> float:
    """Relative error of the analytic gradient against central differences.

    UV rows other than the client's own are excluded (their gradient is zero
    by construction). SimSiam targets are frozen at their current value,
    which is what the stop-gradient means.
    """
    p0 = case.params
    frozen = None
    if case.method in SIMSIAM_METHODS:
        frozen = (forward_encoder(p0, case.x1).projection, forward_encoder(p0, case.x2).projection)

    def loss(vec):
        terms, _ = compose_client_loss(
            p0.unflatten(vec), case.x1, case.x2, client_id=case.client_id, method=case.method,
            labels=case.labels, labelled_mask=case.mask, critic=case.critic,
            frozen_targets=frozen, with_grad=False)
        return terms.total

    analytic = _analytic(case)
    numeric = finite_diff_grad(loss, p0.flatten(), h)
    free = np.ones(analytic.size, bool)
    for r in range(p0.uv_weights.shape[0]):
        if r != case.client_id:
            free[p0.uv_row_slice(r)] = False
    return relative_error(analytic[free], numeric[free])


def gradient_suite(num_seeds: int = 20, variants=GRADIENT_VARIANTS) -> dict[str, list[float]]:
    return {label: [gradient_error(random_case(method, frac, seed)) for seed in range(num_seeds)]
            for label, method, frac in variants}
