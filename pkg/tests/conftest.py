import numpy as np
import pytest

from tgattack.attack import AttackConfig
from tgattack.ddne import DdneHyper, init_model, train
from tgattack.dynnet import DynamicNetwork
from tgattack.evalharness import SyntheticSpec, TargetSelection, generate_synthetic, select_targets, stream

# Desk-scale benchmark corpus: n=60, N=2, gamma=10.
CORPUS_SEEDS = range(5)
CORPUS_HYPER = DdneHyper(hidden_dim=16, decoder_hidden=(64,))
CORPUS_SELECTION = TargetSelection("probability", 100)


def tiny_hyper(**kw):
    base = dict(history_length=2, hidden_dim=3, decoder_hidden=(4,), epochs=5, batch_size=4)
    base.update(kw)
    return DdneHyper(**base)


def random_network(rng, n=6, T=3, density=0.4):
    A = (rng.random((T, n, n)) < density).astype(np.uint8)
    A[:, np.arange(n), np.arange(n)] = 0
    return DynamicNetwork(A)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_trained():
    """A trained model on a small synthetic network, with its window."""
    net = generate_synthetic(SyntheticSpec(n=24, num_snapshots=3, density=0.15, rng_seed=7))
    model = train(net, DdneHyper(hidden_dim=8, decoder_hidden=(32,), epochs=150), rng=stream(7, "train", 0))
    return net, model


class Corpus:
    """Synthetic fixture corpus with lazily trained models and targets."""

    def __init__(self):
        self.entries = []
        for seed in CORPUS_SEEDS:
            net = generate_synthetic(SyntheticSpec(n=60, num_snapshots=3, density=0.1,
                                                   flip_noise=0.1, rng_seed=seed))
            model = train(net, CORPUS_HYPER, rng=stream(seed, "train", 0))
            targets = select_targets(model, net, CORPUS_SELECTION)
            self.entries.append((seed, net, model, targets))
        self._reports = {}

    def reports(self, method, config=AttackConfig()):
        from tgattack.evalharness import attack_targets
        key = (method, config)
        if key not in self._reports:
            self._reports[key] = [
                attack_targets(method, model, net, targets, config, 0, dataset=f"synthetic-{seed}")
                for seed, net, model, targets in self.entries
            ]
        return self._reports[key]

    def mean_asr(self, method, config=AttackConfig()):
        return float(np.mean([r.asr for r in self.reports(method, config)]))


@pytest.fixture(scope="session")
def corpus():
    return Corpus()
