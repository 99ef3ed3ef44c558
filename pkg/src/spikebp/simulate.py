"""Time-stepped forward pass: LIF neurons with double-exponential synapses.

Each non-input neuron keeps two exponentially decaying accumulators; their
difference is the membrane potential, so a single arriving spike of weight w
traces out w * psp_kernel(t - arrival) exactly.  Firing zeroes both
accumulators (hard reset) and starts the refractory window, during which
arriving spikes are discarded.
"""

from __future__ import annotations

import numpy as np

from .core import Episode, NeuronParams, Topology, validate, ValidationError


def kernel_scale(params: NeuronParams) -> float:
    """Normalization constant of the double-exponential response."""
    return 1.0 / (1.0 - params.tau_s / params.tau_m)


def psp_kernel(dt, params: NeuronParams):
    """Post-synaptic response at lag dt (ms); zero for dt < 0 (causality)."""
    dt = np.asarray(dt, dtype=float)
    c = kernel_scale(params)
    out = c * (np.exp(-dt / params.tau_m) - np.exp(-dt / params.tau_s))
    out = np.where(dt < 0, 0.0, out)
    return out if out.ndim else float(out)


def kernel_peak(params: NeuronParams) -> float:
    """Maximum of psp_kernel over dt >= 0."""
    r = params.tau_s / params.tau_m
    a = params.tau_s / (params.tau_m - params.tau_s)
    b = params.tau_m / (params.tau_m - params.tau_s)
    return kernel_scale(params) * (r ** a - r ** b)


def lateral_inhibition_current(prev_step_spikes, inhibition_weight: float):
    """Negative injection each output neuron receives one step after its
    peers fired: every spike suppresses every *other* neuron."""
    spikes = np.asarray(prev_step_spikes, dtype=float)
    total = spikes.sum()
    return -inhibition_weight * (total - spikes)


def trains_to_steps(trains, n_steps: int, sim_step: float):
    """Spike-time arrays -> boolean (n_neurons, n_steps) raster."""
    raster = np.zeros((len(trains), n_steps), dtype=bool)
    sizes = [len(t) for t in trains]
    if sum(sizes) == 0:
        return raster
    all_times = np.concatenate([np.asarray(t, dtype=float) for t in trains])
    rows = np.repeat(np.arange(len(trains)), sizes)
    idx = np.round(all_times / sim_step).astype(int)
    bad = (idx < 0) | (idx >= n_steps)
    if bad.any():
        raise ValueError(f"input neuron {rows[bad][0]}: spike time outside episode")
    raster[rows, idx] = True
    return raster


def steps_to_trains(raster, sim_step: float):
    rows, cols = np.nonzero(raster)
    splits = np.searchsorted(rows, np.arange(1, raster.shape[0]))
    return [t * sim_step for t in np.split(cols.astype(float), splits)]


def run_forward(topology: Topology, params: NeuronParams, input_trains,
                duration: float, inhibition_weight: float = 0.0,
                record_potentials: bool = False) -> Episode:
    """Simulate one episode and return the full spike record.

    Input spike times are snapped to the nearest step.  inhibition_weight > 0
    enables lateral inhibition in the final layer (used during training only).
    """
    violations = validate(topology, params)
    if violations:
        raise ValidationError(violations)
    if len(input_trains) != topology.size(0):
        raise ValueError(f"expected {topology.size(0)} input trains, "
                         f"got {len(input_trains)}")
    dt = params.sim_step
    n_steps = int(round(duration / dt))
    if n_steps <= 0 or abs(n_steps * dt - duration) > 1e-9:
        raise ValueError(f"duration must be a positive multiple of sim_step, "
                         f"got {duration}")

    n_layers = topology.n_layers
    last = n_layers - 1
    c = kernel_scale(params)
    decay_m = np.exp(-dt / params.tau_m)
    decay_s = np.exp(-dt / params.tau_s)
    d_steps = params.delay_steps

    # No top-down connections and the synaptic delay is at least one step, so
    # each layer can be integrated over the full episode before the next one;
    # the cross-layer drive then becomes a single matrix product.
    rasters = [trains_to_steps(input_trains, n_steps, dt)]
    potentials = [None] if record_potentials else None
    for k in range(1, n_layers):
        n = topology.size(k)
        ff_cur = c * (topology.ff_weights[k] @ rasters[k - 1].astype(float))
        raster = np.zeros((n, n_steps), dtype=bool)
        m = np.zeros(n)
        tr_s = np.zeros(n)
        ref_until = np.full(n, -np.inf)
        u_rec = np.zeros((n_steps, n)) if record_potentials else None
        recurrent = topology.is_recurrent(k)
        inhibit = k == last and inhibition_weight != 0.0
        nu = params.threshold(k)

        u = np.empty(n)
        refractory_left = 0  # neurons still inside their refractory window
        for s in range(n_steps):
            t = s * dt
            np.multiply(m, decay_m, out=m)
            np.multiply(tr_s, decay_s, out=tr_s)
            arr = s - d_steps
            inc = None
            if arr >= 0:
                inc = ff_cur[:, arr]  # view; never mutated in place
                if recurrent:
                    own = np.flatnonzero(raster[:, arr])
                    if own.size:
                        inc = inc + c * topology.rec_weights[k][:, own].sum(axis=1)
            if inhibit and s >= 1:
                extra = lateral_inhibition_current(raster[:, s - 1],
                                                   inhibition_weight)
                inc = extra if inc is None else inc + extra

            if refractory_left:
                active = t >= ref_until - 1e-9
                refractory_left = n - int(active.sum())
                if inc is not None:
                    m[active] += inc[active]
                    tr_s[active] += inc[active]
            else:
                active = None
                if inc is not None:
                    m += inc
                    tr_s += inc

            np.subtract(m, tr_s, out=u)
            if record_potentials:
                u_rec[s] = u
            fired = u >= nu
            if active is not None:
                fired &= active
            if fired.any():
                raster[fired, s] = True
                m[fired] = 0.0
                tr_s[fired] = 0.0
                ref_until[fired] = t + params.refractory
                refractory_left = n
        rasters.append(raster)
        if record_potentials:
            potentials.append(u_rec)

    trains = [steps_to_trains(r, dt) for r in rasters]
    counts = [r.sum(axis=1).astype(int) for r in rasters]
    episode = Episode(duration=float(n_steps * dt), trains=trains, counts=counts,
                      potentials=potentials)
    episode.rasters = rasters  # cached step grid, reused by the aggregation
    return episode
