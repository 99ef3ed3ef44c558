import numpy as np
import pytest

from spikebp import LayerSpec, NeuronParams, build_topology, init_weights
from spikebp import INPUT, FEEDFORWARD, RECURRENT


@pytest.fixture
def params2():
    """Table-default constants for a 2-layer (input + one) net."""
    return NeuronParams.for_layers(2)


@pytest.fixture
def params3():
    return NeuronParams.for_layers(3)


def make_net(sizes, kinds, densities=None, seed=0):
    specs = []
    for i, (n, kind) in enumerate(zip(sizes, kinds)):
        d = densities[i] if densities else (0.3 if kind == RECURRENT else 0.0)
        specs.append(LayerSpec(kind, n, d if kind == RECURRENT else 0.0))
    return init_weights(build_topology(specs), seed)


@pytest.fixture
def small_ff_net():
    return make_net([3, 4, 2], [INPUT, FEEDFORWARD, FEEDFORWARD], seed=1)


@pytest.fixture
def small_rec_net():
    return make_net([3, 4, 2], [INPUT, RECURRENT, FEEDFORWARD], seed=1)


def random_trains(n_neurons, duration, rate_hz, rng, refractory=None):
    """Independent per-ms Bernoulli trains, optionally thinned to an ISI floor."""
    p = rate_hz / 1000.0
    trains = []
    for _ in range(n_neurons):
        hits = np.flatnonzero(rng.random(int(duration)) < p).astype(float)
        if refractory and hits.size:
            kept = [hits[0]]
            for t in hits[1:]:
                if t - kept[-1] >= refractory:
                    kept.append(t)
            hits = np.array(kept)
        trains.append(hits)
    return trains
