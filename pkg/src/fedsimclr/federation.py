"""Federated training: local SGD on clients, averaged deltas, server-side Adam."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .data import AugmentSpec, ClientDataset, make_views
from .losses import METHODS, UV_METHODS, Critic, LossTerms, compose_client_loss
from .model import ModelParams, project_uv_rows, save_checkpoint
from .numerics import ConfigurationError, derive_rng

log = logging.getLogger(__name__)

METRICS_HEADER = ("round", "method", "loss_total", "loss_contrastive", "loss_uv", "loss_label",
                  "lp_train_acc", "lp_test_acc", "participating_clients", "params_l2")
SERVER_MODES = ("adam", "average")


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 100
    clients_per_round: int = 10
    local_epochs: int = 1
    batch_size: int = 128
    local_lr: float = 0.1
    server_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    method: str = "federated_simclr"
    uv_weight: float = 1.0
    temperature: float = 0.5
    seed: int = 0
    server_mode: str = "adam"       # "average" is plain delta averaging, for debugging
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    eval_every: int = 10
    checkpoint_every: int = 0

    def validate(self, num_clients: int) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.server_mode not in SERVER_MODES:
            raise ConfigurationError(f"unknown server_mode {self.server_mode!r}")
        if not 1 <= self.clients_per_round <= num_clients:
            raise ConfigurationError(
                f"clients_per_round={self.clients_per_round} outside [1, {num_clients}]")
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("rounds >= 0, local_epochs >= 1 and batch_size >= 1 required")
        if self.local_lr < 0 or self.server_lr <= 0 or self.adam_eps <= 0:
            raise ConfigurationError("learning rates and adam_eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if self.uv_weight < 0:
            raise ConfigurationError("uv_weight must be non-negative")


@dataclass
class ServerState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def init(cls, flat: np.ndarray) -> "ServerState":
        flat = np.asarray(flat, dtype=np.float64).copy()
        return cls(flat, np.zeros_like(flat), np.zeros_like(flat), 0)


@dataclass
class RoundMetrics:
    round: int
    method: str
    loss_total: float = float("nan")
    loss_contrastive: float = float("nan")
    loss_uv: float = float("nan")
    loss_label: float = float("nan")
    lp_train_acc: float = float("nan")
    lp_test_acc: float = float("nan")
    participating_clients: tuple[int, ...] = ()
    params_l2: float = float("nan")

    def csv_row(self) -> list[str]:
        def f(x):
            return repr(float(x))
        return [str(self.round), self.method, f(self.loss_total), f(self.loss_contrastive),
                f(self.loss_uv), f(self.loss_label), f(self.lp_train_acc), f(self.lp_test_acc),
                ";".join(str(c) for c in self.participating_clients), f(self.params_l2)]


def client_rng(seed: int, round_idx: int, client_id: int) -> np.random.Generator:
    return derive_rng(seed, "client", round_idx, client_id)


def iterate_minibatches(client: ClientDataset, batch_size: int,
                        rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled local indices in batches; the last short batch is kept."""
    order = rng.permutation(len(client))
    for start in range(0, order.size, batch_size):
        yield order[start:start + batch_size]


def client_update(global_params: ModelParams, client: ClientDataset, cfg: FederationConfig,
                  rng: np.random.Generator):
    """Local SGD epochs on the client's objective.

    Returns the final local parameters and the mean loss terms over steps.
    Only UV row ``client_id`` can move; it is re-projected to unit norm after
    every step.
    """
    s = client.client_id
    critic = Critic(cfg.temperature)
    uses_uv = cfg.method in UV_METHODS
    params = global_params.copy()
    acc = LossTerms()
    steps = 0
    for _ in range(cfg.local_epochs):
        for idx in iterate_minibatches(client, cfg.batch_size, rng):
            x1, x2 = make_views(client.x[idx], cfg.augment, rng)
            terms, grads = compose_client_loss(
                params, x1, x2, client_id=s, method=cfg.method, uv_weight=cfg.uv_weight,
                labels=client.y[idx], labelled_mask=client.labelled_mask[idx], critic=critic)
            params = params.map(lambda p, g: p - cfg.local_lr * g, grads)
            if uses_uv:
                params.uv_weights = project_uv_rows(params.uv_weights, rows=[s])
            for name in ("total", "contrastive", "uv", "label"):
                setattr(acc, name, getattr(acc, name) + getattr(terms, name))
            steps += 1
    if steps:
        for name in ("total", "contrastive", "uv", "label"):
            setattr(acc, name, getattr(acc, name) / steps)
    return params, acc


def aggregate_deltas(global_flat: np.ndarray, client_flats: list[np.ndarray]) -> np.ndarray:
    """Mean of ``global - client`` in the given (ascending client-id) order."""
    if not client_flats:
        raise ConfigurationError("no participating clients")
    n = len(client_flats)
    g = np.zeros_like(global_flat)
    for c in client_flats:
        g += (global_flat - c) / n
    return g


def server_adam_step(state: ServerState, g: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
                     beta2: float = 0.999, eps: float = 1e-8) -> ServerState:
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise FloatingPointError(f"non-finite pseudo-gradient at {bad.size} coordinates "
                                 f"(first index {bad[0]})")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ServerState(params, m, v, t)


def server_average_step(state: ServerState, g: np.ndarray, lr: float = 1.0) -> ServerState:
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite pseudo-gradient")
    return ServerState(state.params - lr * g, state.m, state.v, state.step + 1)


def sample_clients(seed: int, round_idx: int, num_clients: int, k: int) -> list[int]:
    rng = derive_rng(seed, "sampling", round_idx)
    return sorted(int(c) for c in rng.choice(num_clients, size=k, replace=False))


AuditHook = Callable[[int, list[int], np.ndarray], None]


def run_federation(cfg: FederationConfig, clients: list[ClientDataset], init: ModelParams,
                   evaluator: Callable[[ModelParams], tuple[float, float]] | None = None,
                   metrics_path=None, checkpoint_dir=None, audit: AuditHook | None = None):
    """Run ``cfg.rounds`` rounds; returns ``(metrics, final_params)``.

    Round 0 holds the evaluation of the initial model. When ``metrics_path``
    is given, rows are written as they are produced so an aborted run leaves
    its partial trajectory on disk. ``audit(round, participants, pseudo_grad)``
    observes every aggregated pseudo-gradient.
    """
    cfg.validate(len(clients))
    if init.uv_weights.shape[0] != len(clients):
        raise ConfigurationError("uv_weights must have one row per client")
    state = ServerState.init(init.flatten())
    template = init
    metrics: list[RoundMetrics] = []
    fh = writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)

    def emit(row: RoundMetrics):
        metrics.append(row)
        if writer is not None:
            writer.writerow(row.csv_row())
            fh.flush()

    try:
        params = template.unflatten(state.params)
        row = RoundMetrics(0, cfg.method, params_l2=float(np.linalg.norm(state.params)))
        if evaluator is not None:
            row.lp_train_acc, row.lp_test_acc = evaluator(params)
        emit(row)
        for t in range(1, cfg.rounds + 1):
            chosen = sample_clients(cfg.seed, t, len(clients), cfg.clients_per_round)
            flats, terms, used = [], [], []
            for s in chosen:
                if len(clients[s]) == 0:
                    log.warning("round %d: client %d has no data, skipped", t, s)
                    continue
                local, lt = client_update(params, clients[s], cfg, client_rng(cfg.seed, t, s))
                flats.append(local.flatten())
                terms.append(lt)
                used.append(s)
            row = RoundMetrics(t, cfg.method, participating_clients=tuple(used))
            if flats:
                g = aggregate_deltas(state.params, flats)
                if audit is not None:
                    audit(t, used, g)
                if cfg.server_mode == "adam":
                    state = server_adam_step(state, g, cfg.server_lr, cfg.beta1, cfg.beta2,
                                             cfg.adam_eps)
                else:
                    state = server_average_step(state, g, cfg.server_lr)
                params = template.unflatten(state.params)
                if cfg.method in UV_METHODS:
                    params.uv_weights = project_uv_rows(params.uv_weights)
                    state.params = params.flatten()
                for name in ("total", "contrastive", "uv", "label"):
                    setattr(row, f"loss_{name}", float(np.mean([getattr(x, name) for x in terms])))
            row.params_l2 = float(np.linalg.norm(state.params))
            if evaluator is not None and (t == cfg.rounds or
                                          (cfg.eval_every > 0 and t % cfg.eval_every == 0)):
                row.lp_train_acc, row.lp_test_acc = evaluator(params)
            emit(row)
            if checkpoint_dir is not None and cfg.checkpoint_every > 0 and t % cfg.checkpoint_every == 0:
                save_checkpoint(params, Path(checkpoint_dir) / f"params_round{t:05d}.fclp")
    finally:
        if fh is not None:
            fh.close()
    return metrics, params
