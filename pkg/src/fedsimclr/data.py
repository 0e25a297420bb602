"""Synthetic classification data, non-i.i.d. client partitions and view augmentation."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ConfigurationError

log = logging.getLogger(__name__)

DATASET_MAGIC = b"FCDS"
DATASET_VERSION = 1
PARTITION_MODES = ("label_skew", "covariate_shift", "joint_shift")


class GenerationError(RuntimeError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ConfigurationError("x must be (N, D) with one label per row")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ConfigurationError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def label_prior(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes) / max(len(self), 1)


@dataclass
class ClientDataset:
    """One client's local data.

    ``x`` holds the features the client trains on (rotated for covariate and
    joint shift); ``indices`` point back into the parent dataset.
    """

    client_id: int
    indices: np.ndarray
    x: np.ndarray
    y: np.ndarray
    labelled_mask: np.ndarray
    bins: np.ndarray                       # per-sample rotation bin, -1 if unrotated
    angles: np.ndarray
    rotation_bins: frozenset = field(default_factory=frozenset)

    def __len__(self) -> int:
        return self.indices.size

    def label_histogram(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.y, minlength=num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "label_skew"
    alpha: float = 0.1
    num_clients: int = 20
    num_rotation_bins: int = 10
    labelled_fraction: float = 0.0
    max_angle: float = 2 * math.pi

    def __post_init__(self):
        if self.mode not in PARTITION_MODES:
            raise ConfigurationError(f"unknown partition mode {self.mode!r}")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        if self.num_clients < 1 or self.num_rotation_bins < 1:
            raise ConfigurationError("num_clients and num_rotation_bins must be >= 1")
        if not 0.0 <= self.labelled_fraction <= 1.0:
            raise ConfigurationError("labelled_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class AugmentSpec:
    noise_sigma: float = 0.1
    mask_prob: float = 0.2
    scale_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.noise_sigma < 0 or not 0.0 <= self.mask_prob < 1.0 or not 0 < lo <= hi:
            raise ConfigurationError(f"invalid augmentation {self}")


# -- generation -------------------------------------------------------------

def generate_synthetic(num_classes: int, dim: int, n_per_class: int, class_separation: float,
                       rng: np.random.Generator, min_angle_deg: float = 30.0,
                       max_attempts: int = 1000) -> Dataset:
    """Isotropic unit-variance Gaussians around scaled unit-norm class means.

    Means are redrawn until every pair is at least ``min_angle_deg`` apart.
    """
    if dim < 2:
        raise ConfigurationError("dim must be >= 2")
    if n_per_class < 1 or num_classes < 1:
        raise ConfigurationError("need at least one class and one sample per class")
    if class_separation <= 0:
        raise ConfigurationError("class_separation must be positive")
    cos_max = math.cos(math.radians(min_angle_deg))
    for _ in range(max_attempts):
        mu = rng.standard_normal((num_classes, dim))
        mu /= np.linalg.norm(mu, axis=1, keepdims=True)
        g = mu @ mu.T
        np.fill_diagonal(g, -1.0)
        if g.max() <= cos_max:
            break
    else:
        raise GenerationError(
            f"could not place {num_classes} means {min_angle_deg} deg apart in {dim} dims")
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = mu[y] * class_separation + rng.standard_normal((y.size, dim))
    return Dataset(x, y, num_classes)


def train_test_split(ds: Dataset, test_fraction: float, rng: np.random.Generator):
    """Per-class split so both sides keep the class balance."""
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigurationError("test_fraction must lie in [0, 1)")
    train, test = [], []
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.y == c))
        n_test = int(math.floor(test_fraction * idx.size))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train))
    test_idx = np.sort(np.concatenate(test))
    return ds.subset(train_idx), ds.subset(test_idx)


# -- partitioning -----------------------------------------------------------

def _client_sizes(n: int, num_clients: int) -> np.ndarray:
    sizes = np.full(num_clients, n // num_clients)
    sizes[: n % num_clients] += 1
    return sizes


def _dirichlet(rng: np.random.Generator, conc: np.ndarray) -> np.ndarray:
    q = rng.dirichlet(conc)
    if not np.all(np.isfinite(q)):
        # tiny concentrations can underflow every gamma draw; fall back to one-hot
        q = np.zeros_like(conc)
        q[rng.choice(conc.size, p=conc / conc.sum())] = 1.0
    return q


def dirichlet_label_assignment(y: np.ndarray, num_classes: int, num_clients: int, alpha: float,
                               rng: np.random.Generator) -> list[np.ndarray]:
    """Greedy Dirichlet fill with concentration ``alpha * p(y)``.

    Clients are visited in order. Each draws ``q ~ Dir(alpha p(y))`` and then
    fills its quota with multinomial draws from ``q`` restricted to the class
    pools that still have samples, truncating to availability, until the
    quota is met or ``q`` has no mass left on non-empty pools. Whatever
    remains afterwards is dealt round-robin to clients still below quota.
    """
    prior = np.bincount(y, minlength=num_classes) / y.size
    conc = np.where(prior > 0, alpha * prior, 0.0)
    pools = [list(rng.permutation(np.flatnonzero(y == c))) for c in range(num_classes)]
    sizes = _client_sizes(y.size, num_clients)
    assigned: list[list[int]] = [[] for _ in range(num_clients)]
    active = conc > 0
    for s in range(num_clients):
        q = np.zeros(num_classes)
        q[active] = _dirichlet(rng, conc[active])
        need = int(sizes[s])
        while need > 0:
            avail = np.array([len(p) for p in pools])
            w = np.where(avail > 0, q, 0.0)
            if w.sum() <= 0:
                break
            counts = rng.multinomial(need, w / w.sum())
            counts = np.minimum(counts, avail)
            for c in np.flatnonzero(counts):
                assigned[s].extend(pools[c][: counts[c]])
                del pools[c][: counts[c]]
            need -= int(counts.sum())
    leftover = [i for c in range(num_classes) for i in pools[c]]
    s = 0
    for i in leftover:
        while len(assigned[s % num_clients]) >= sizes[s % num_clients]:
            s += 1
        assigned[s % num_clients].append(i)
        s += 1
    return [np.sort(np.asarray(a, dtype=np.int64)) for a in assigned]


def iid_assignment(n: int, num_clients: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    bounds = np.concatenate([[0], np.cumsum(_client_sizes(n, num_clients))])
    return [np.sort(perm[bounds[s]:bounds[s + 1]]) for s in range(num_clients)]


def rotate_pairs(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate every consecutive coordinate pair of row i by ``angles[i]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] % 2:
        raise ConfigurationError("rotation needs an even feature dimension")
    c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
    a, b = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = c * a - s * b
    out[:, 1::2] = s * a + c * b
    return out


def _labelled_mask(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[: int(math.floor(fraction * n))]] = True
    return mask


def _build_clients(ds: Dataset, groups: list[np.ndarray], spec: PartitionSpec,
                   rng: np.random.Generator, rotate: bool) -> list[ClientDataset]:
    clients = []
    width = spec.max_angle / spec.num_rotation_bins
    bin_conc = np.full(spec.num_rotation_bins, spec.alpha / spec.num_rotation_bins)
    for s, idx in enumerate(groups):
        n = idx.size
        x = ds.x[idx]
        bins = np.full(n, -1, dtype=np.int64)
        angles = np.zeros(n)
        if rotate:
            if ds.dim % 2:
                raise ConfigurationError("rotation needs an even feature dimension")
            q = _dirichlet(rng, bin_conc)
            bins = rng.choice(spec.num_rotation_bins, size=n, p=q) if n else bins
            angles = (bins + rng.uniform(0.0, 1.0, size=n)) * width
            x = rotate_pairs(x, angles)
        mask = _labelled_mask(n, spec.labelled_fraction, rng)
        clients.append(ClientDataset(s, idx, x, ds.y[idx].copy(), mask, bins, angles,
                                     frozenset(int(b) for b in np.unique(bins) if b >= 0)))
    return clients


def partition_label_skew(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator):
    groups = dirichlet_label_assignment(ds.y, ds.num_classes, spec.num_clients, spec.alpha, rng)
    return _build_clients(ds, groups, spec, rng, rotate=False)


def partition_covariate_shift(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator):
    if ds.dim % 2:
        raise ConfigurationError("covariate shift needs an even feature dimension")
    groups = iid_assignment(len(ds), spec.num_clients, rng)
    return _build_clients(ds, groups, spec, rng, rotate=True)


def partition_joint_shift(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator):
    if ds.dim % 2:
        raise ConfigurationError("joint shift needs an even feature dimension")
    groups = dirichlet_label_assignment(ds.y, ds.num_classes, spec.num_clients, spec.alpha, rng)
    return _build_clients(ds, groups, spec, rng, rotate=True)


def partition(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[ClientDataset]:
    fn = {"label_skew": partition_label_skew,
          "covariate_shift": partition_covariate_shift,
          "joint_shift": partition_joint_shift}[spec.mode]
    clients = fn(ds, spec, rng)
    for c in clients:
        if len(c) == 0:
            log.warning("client %d received no samples", c.client_id)
    return clients


def make_views(batch_x, aug: AugmentSpec, rng: np.random.Generator):
    """Two independent noise -> coordinate-mask -> global-scale draws of each row."""
    x = np.asarray(batch_x, dtype=np.float64)
    lo, hi = aug.scale_range
    views = []
    for _ in range(2):
        v = x + aug.noise_sigma * rng.standard_normal(x.shape) if aug.noise_sigma > 0 else x.copy()
        if aug.mask_prob > 0:
            v = v * (rng.random(x.shape) >= aug.mask_prob)
        if hi > lo:
            v = v * rng.uniform(lo, hi, size=(x.shape[0], 1))
        elif lo != 1.0:
            v = v * lo
        views.append(v)
    return views[0], views[1]


# -- file formats -----------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    n, d = ds.x.shape
    header = DATASET_MAGIC + struct.pack("<IQQQ", DATASET_VERSION, n, d, ds.num_classes)
    Path(path).write_bytes(header + ds.x.astype("<f8").tobytes()
                           + ds.y.astype("<u4").tobytes())


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise ConfigurationError(f"{path}: not a dataset file")
    version, n, d, c = struct.unpack_from("<IQQQ", buf, 4)
    if version != DATASET_VERSION:
        raise ConfigurationError(f"{path}: unsupported dataset version {version}")
    off = 4 + struct.calcsize("<IQQQ")
    x = np.frombuffer(buf, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    y = np.frombuffer(buf, dtype="<u4", count=n, offset=off + 8 * n * d)
    return Dataset(x.astype(np.float64), y.astype(np.int64), int(c))


def write_manifest(clients: list[ClientDataset], path) -> None:
    lines = ["client_id,index,labelled_flag,bin_id"]
    for c in clients:
        for i, flag, b in zip(c.indices, c.labelled_mask, c.bins):
            lines.append(f"{c.client_id},{int(i)},{int(flag)},{int(b)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[int, int, bool, int]]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        s, i, f, b = line.split(",")
        rows.append((int(s), int(i), f == "1", int(b)))
    return rows
