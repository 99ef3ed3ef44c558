"""Spike-train level aggregation: accumulated synaptic contributions at the
post-synaptic neuron's firing times, their rate sensitivities, and the total
pre-activation each neuron sees."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .core import Episode, NeuronParams, Topology
from .simulate import kernel_scale, psp_kernel


def compute_spsp(pre_times, post_times, params: NeuronParams) -> float:
    """Kernel mass the pre train deposits at every post firing time.

    Sums psp_kernel(t_f - delay - tau) over all post firing times t_f and all
    pre spike times tau arriving no later than t_f.
    """
    pre = np.asarray(pre_times, dtype=float)
    post = np.asarray(post_times, dtype=float)
    if pre.size == 0 or post.size == 0:
        return 0.0
    lags = post[:, None] - params.synaptic_delay - pre[None, :]
    return float(np.sum(psp_kernel(lags, params)))


def _series_from_raster(raster, params: NeuronParams):
    """Kernel-sum series for spikes given as a boolean (n, n_steps) grid."""
    n, n_steps = raster.shape
    d = params.delay_steps
    arrivals = np.zeros((n, n_steps))
    if d < n_steps:
        arrivals[:, d:] = raster[:, :n_steps - d]
    c = kernel_scale(params)
    decay_m = np.exp(-params.sim_step / params.tau_m)
    decay_s = np.exp(-params.sim_step / params.tau_s)
    # each trace is the first-order recurrence y[s] = decay * y[s-1] + c * x[s]
    slow = lfilter([c], [1.0, -decay_m], arrivals, axis=1)
    fast = lfilter([c], [1.0, -decay_s], arrivals, axis=1)
    return slow - fast


def kernel_sum_series(trains, n_steps: int, params: NeuronParams):
    """(n_neurons, n_steps) array of running kernel sums on the step grid.

    Entry [j, s] equals sum of psp_kernel(s*dt - delay - tau) over spikes tau
    of neuron j with tau + delay <= s*dt, evaluated with the same two-trace
    recurrence the simulator uses.
    """
    from .simulate import trains_to_steps
    return _series_from_raster(trains_to_steps(trains, n_steps, params.sim_step),
                               params)


@dataclass
class SpsapTableau:
    """Per layer k >= 1: matrices over (post neuron, pre neuron).

    ff_* pair layer k with its preceding layer; rec_* pair a recurrent layer
    with itself (None elsewhere).  de_pre/de_post estimate how one extra pre-
    or post-synaptic spike moves the aggregated value.  counts mirrors the
    episode's firing counts.
    """

    ff_e: list
    ff_de_pre: list
    ff_de_post: list
    rec_e: list
    rec_de_pre: list
    rec_de_post: list
    counts: list


def _pair_matrices(series_pre, post_raster, counts_pre, counts_post):
    # e[l, j] sums neuron j's kernel series at neuron l's firing steps
    e = post_raster.astype(float) @ series_pre.T
    de_pre = e / np.maximum(counts_pre, 1)[None, :]
    de_post = e / np.maximum(counts_post, 1)[:, None]
    return e, de_pre, de_post


def compute_tableau(episode: Episode, topology: Topology, params: NeuronParams,
                    post_gain_cap: float = None) -> SpsapTableau:
    """Aggregate every feedforward pair and every recurrent layer of an
    episode, fill the sensitivity estimates, and attach per-layer totals to
    the episode.

    post_gain_cap, when set, rescales each neuron's post-synaptic sensitivity
    row so the weighted self-feedback gain (1/nu) * sum(w * de_post) never
    exceeds the cap; see the gradient module for why the raw estimate can
    push that gain past 1.
    """
    if len(episode.trains) != topology.n_layers or any(
            len(episode.trains[k]) != topology.size(k)
            for k in range(topology.n_layers)):
        raise ValueError("episode does not match topology layer sizes")
    dt = params.sim_step
    n_steps = int(round(episode.duration / dt))

    n_layers = topology.n_layers
    tab = SpsapTableau(ff_e=[None], ff_de_pre=[None], ff_de_post=[None],
                       rec_e=[None], rec_de_pre=[None], rec_de_post=[None],
                       counts=[np.asarray(c) for c in episode.counts])
    rasters = episode.rasters
    if rasters is None:
        from .simulate import trains_to_steps
        rasters = [trains_to_steps(layer, n_steps, dt) for layer in episode.trains]
    series = [_series_from_raster(rasters[0], params)]
    for k in range(1, n_layers):
        series.append(_series_from_raster(rasters[k], params))

        e, dpre, dpost = _pair_matrices(series[k - 1], rasters[k],
                                        episode.counts[k - 1],
                                        episode.counts[k])
        tab.ff_e.append(e)
        tab.ff_de_pre.append(dpre)
        tab.ff_de_post.append(dpost)
        if topology.is_recurrent(k):
            re, rdpre, rdpost = _pair_matrices(series[k], rasters[k],
                                               episode.counts[k],
                                               episode.counts[k])
            tab.rec_e.append(re)
            tab.rec_de_pre.append(rdpre)
            tab.rec_de_post.append(rdpost)
        else:
            tab.rec_e.append(None)
            tab.rec_de_pre.append(None)
            tab.rec_de_post.append(None)

        if post_gain_cap is not None:
            _cap_post_gain(tab, topology, params, k, post_gain_cap)

    episode.tpsp = [None] + [compute_tpsp(tab, topology, k)
                             for k in range(1, n_layers)]
    return tab


def _cap_post_gain(tab, topology, params, k, cap):
    nu = params.threshold(k)
    gain = (topology.ff_weights[k] * tab.ff_de_post[k]).sum(axis=1) / nu
    if topology.is_recurrent(k):
        gain += (topology.rec_weights[k] * tab.rec_de_post[k]).sum(axis=1) / nu
    over = gain > cap
    if not over.any():
        return
    scale = np.ones_like(gain)
    scale[over] = cap / gain[over]
    tab.ff_de_post[k] *= scale[:, None]
    if topology.is_recurrent(k):
        tab.rec_de_post[k] *= scale[:, None]


def compute_tpsp(tableau: SpsapTableau, topology: Topology, k: int):
    """Total weighted pre-activation of layer k, feedforward plus recurrent."""
    a = (topology.ff_weights[k] * tableau.ff_e[k]).sum(axis=1)
    if topology.is_recurrent(k):
        a = a + (topology.rec_weights[k] * tableau.rec_e[k]).sum(axis=1)
    return a


def activation(a, nu: float):
    """Firing-count estimate from the total pre-activation (linear in a)."""
    if nu <= 0:
        raise ValueError("threshold must be positive")
    return np.asarray(a, dtype=float) / nu
