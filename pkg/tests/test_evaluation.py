import numpy as np
import pytest

from fedsimclr.data import Dataset, PartitionSpec, generate_synthetic, partition
from fedsimclr.evaluation import (LinearProbe, ProbeEvaluator, accuracy, extract_representations,
                                  probe_training_set, train_probe)
from fedsimclr.model import ModelDims, init_params
from fedsimclr.numerics import ConfigurationError, derive_rng


def test_representations_zero_identity_and_deterministic():
    p = init_params(ModelDims(input_dim=3, z_dim=3, num_clients=1), derive_rng(0))
    x = np.random.default_rng(1).standard_normal((4, 3))
    np.testing.assert_array_equal(extract_representations(p, x), extract_representations(p, x))
    p.encoder = [(np.eye(3), np.zeros(3))]
    np.testing.assert_array_equal(extract_representations(p, x), x)
    p.encoder = [(np.zeros((3, 3)), np.zeros(3))]
    np.testing.assert_array_equal(extract_representations(p, x), 0.0)


def test_probe_separable_and_monotone():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, size=150)
    reps = np.eye(3)[y] * 4.0 + 0.1 * rng.standard_normal((150, 3))
    probe = LinearProbe.zeros(3, 3)
    losses = [probe.loss(reps, y)]
    for _ in range(30):
        probe = train_probe(probe, reps, y, epochs=5, lr=0.05)
        losses.append(probe.loss(reps, y))
    assert np.all(np.diff(losses) <= 1e-15)
    assert accuracy(probe, reps, y) >= 0.99
    assert probe.version == 30


def test_probe_lr_zero_and_bad_labels():
    probe = LinearProbe(np.ones((2, 2)), np.zeros(2))
    out = train_probe(probe, np.ones((3, 2)), np.array([0, 1, 0]), epochs=5, lr=0.0)
    np.testing.assert_array_equal(out.weight, probe.weight)
    with pytest.raises(ConfigurationError):
        train_probe(probe, np.ones((1, 2)), np.array([2]))


def test_accuracy_examples():
    y = np.repeat(np.arange(4), 5)
    reps = np.eye(4)[y]
    perfect = LinearProbe(np.eye(4), np.zeros(4))
    assert accuracy(perfect, reps, y) == 1.0
    const = LinearProbe(np.zeros((4, 4)), np.zeros(4))
    assert accuracy(const, reps, y) == pytest.approx(0.25)


def test_random_probe_is_near_chance():
    accs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        y = np.repeat(np.arange(10), 100)
        reps = rng.standard_normal((1000, 8))
        probe = LinearProbe(rng.standard_normal((10, 8)), rng.standard_normal(10))
        accs.append(accuracy(probe, reps, y))
    assert abs(np.mean(accs) - 0.10) < 0.03


def test_training_set_modes_and_source():
    ds = generate_synthetic(4, 4, 20, 2.0, derive_rng(0))
    clients = partition(ds, PartitionSpec("covariate_shift", 1.0, 4, labelled_fraction=0.25),
                        derive_rng(1))
    x, y = probe_training_set(clients, "full_labels")
    assert x.shape[0] == len(ds)
    x, y = probe_training_set(clients, "labelled_subset")
    assert x.shape[0] == sum(int(c.labelled_mask.sum()) for c in clients)
    x, _ = probe_training_set(clients, "full_labels", source=ds)
    np.testing.assert_array_equal(x, np.concatenate([ds.x[c.indices] for c in clients]))
    with pytest.raises(ConfigurationError):
        probe_training_set(clients, "bogus")


def test_evaluator_warm_starts():
    ds = generate_synthetic(3, 4, 30, 3.0, derive_rng(0))
    clients = partition(ds, PartitionSpec("label_skew", 1.0, 3), derive_rng(1))
    p = init_params(ModelDims(input_dim=4, z_dim=8, num_clients=3, num_classes=3), derive_rng(2))
    ev = ProbeEvaluator(clients, Dataset(ds.x, ds.y, 3), 8, "full_labels", epochs=5)
    ev(p)
    w1 = ev.probe.weight.copy()
    ev(p)
    assert ev.probe.version == 2
    assert not np.array_equal(w1, ev.probe.weight)
