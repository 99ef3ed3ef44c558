"""Shared domain types: neuron parameters, network topology, spike episodes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

INPUT = "input"
FEEDFORWARD = "feedforward"
RECURRENT = "recurrent"

LAYER_KINDS = (INPUT, FEEDFORWARD, RECURRENT)


class ValidationError(ValueError):
    """Raised when a topology or parameter set breaks a structural invariant."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class NeuronParams:
    """Leaky integrate-and-fire constants, all times in ms, potentials in mV.

    thresholds holds one firing threshold per non-input layer.
    """

    tau_m: float = 64.0
    tau_s: float = 8.0
    thresholds: tuple = (10.0,)
    refractory: float = 2.0
    reset_voltage: float = 0.0
    synaptic_delay: float = 1.0
    sim_step: float = 1.0

    def threshold(self, layer: int) -> float:
        """Firing threshold for layer index `layer` (layer 0 is the input)."""
        if layer < 1:
            raise IndexError("input layer has no firing threshold")
        return self.thresholds[layer - 1]

    @property
    def delay_steps(self) -> int:
        return int(round(self.synaptic_delay / self.sim_step))

    @staticmethod
    def for_layers(n_layers: int, threshold: float = 10.0, **kwargs) -> "NeuronParams":
        """Parameters with a uniform threshold for a net of `n_layers` layers."""
        return NeuronParams(thresholds=(float(threshold),) * (n_layers - 1), **kwargs)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int
    recurrent_density: float = 0.0


@dataclass
class Topology:
    """Layer specs plus weight matrices.

    ff_weights[k] is the dense matrix from layer k-1 into layer k, shape
    (N_k, N_{k-1}); index 0 is None.  rec_weights[k] / rec_masks[k] exist only
    for recurrent layers; the boolean mask fixes which intra-layer synapses
    exist and has an all-False diagonal (no self-connections).
    """

    layers: list
    ff_weights: list = field(default_factory=list)
    rec_weights: list = field(default_factory=list)
    rec_masks: list = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def size(self, k: int) -> int:
        return self.layers[k].size

    def is_recurrent(self, k: int) -> bool:
        return self.layers[k].kind == RECURRENT

    def copy(self) -> "Topology":
        return Topology(
            layers=list(self.layers),
            ff_weights=[None if w is None else w.copy() for w in self.ff_weights],
            rec_weights=[None if w is None else w.copy() for w in self.rec_weights],
            rec_masks=[None if m is None else m.copy() for m in self.rec_masks],
        )


def build_topology(specs) -> Topology:
    """Zero-weight topology for the given layer specs (masks empty until init)."""
    specs = list(specs)
    ff = [None]
    rec = [None]
    masks = [None]
    for k in range(1, len(specs)):
        ff.append(np.zeros((specs[k].size, specs[k - 1].size)))
        if specs[k].kind == RECURRENT:
            n = specs[k].size
            rec.append(np.zeros((n, n)))
            masks.append(np.zeros((n, n), dtype=bool))
        else:
            rec.append(None)
            masks.append(None)
    return Topology(layers=specs, ff_weights=ff, rec_weights=rec, rec_masks=masks)


def _check_params(params: NeuronParams, n_layers: int, out: list):
    if not (params.tau_m > params.tau_s > 0):
        out.append("params: tau_m > tau_s > 0 violated "
                   f"(tau_m={params.tau_m}, tau_s={params.tau_s})")
    if len(params.thresholds) != n_layers - 1:
        out.append(f"params: expected {n_layers - 1} thresholds, "
                   f"got {len(params.thresholds)}")
    for i, nu in enumerate(params.thresholds):
        if not nu > 0:
            out.append(f"params: threshold for layer {i + 1} must be > 0, got {nu}")
    if params.refractory < 0:
        out.append(f"params: refractory must be >= 0, got {params.refractory}")
    if not params.sim_step > 0:
        out.append(f"params: sim_step must be > 0, got {params.sim_step}")
    else:
        ratio = params.synaptic_delay / params.sim_step
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            out.append("params: synaptic_delay must be a positive integer "
                       f"multiple of sim_step, got {params.synaptic_delay}")


def validate(topology: Topology, params: NeuronParams) -> list:
    """Collect every invariant violation; empty list means well-formed."""
    v = []
    layers = topology.layers
    if not layers:
        return ["topology: no layers"]
    _check_params(params, len(layers), v)

    if layers[0].kind != INPUT:
        v.append("layer 0: must be the input layer")
    for k, spec in enumerate(layers):
        if spec.kind not in LAYER_KINDS:
            v.append(f"layer {k}: unknown kind {spec.kind!r}")
        if k > 0 and spec.kind == INPUT:
            v.append(f"layer {k}: input kind only allowed at layer 0")
        if spec.size < 1:
            v.append(f"layer {k}: size must be >= 1, got {spec.size}")
        if spec.kind == RECURRENT:
            if not 0.0 <= spec.recurrent_density <= 1.0:
                v.append(f"layer {k}: recurrent_density must be in [0, 1], "
                         f"got {spec.recurrent_density}")
        elif spec.recurrent_density != 0.0:
            v.append(f"layer {k}: recurrent_density must be 0 for "
                     f"non-recurrent layers")

    if len(topology.ff_weights) != len(layers):
        v.append("topology: ff_weights list length does not match layer count")
        return v
    if len(topology.rec_weights) != len(layers) or len(topology.rec_masks) != len(layers):
        v.append("topology: rec_weights/rec_masks list length does not match layer count")
        return v

    for k in range(1, len(layers)):
        w = topology.ff_weights[k]
        want = (layers[k].size, layers[k - 1].size)
        if w is None or w.shape != want:
            v.append(f"layer {k} ff_weights: expected shape {want}")
            continue
        if not np.all(np.isfinite(w)):
            v.append(f"layer {k} ff_weights: non-finite entry")

        r, m = topology.rec_weights[k], topology.rec_masks[k]
        if layers[k].kind != RECURRENT:
            if r is not None or m is not None:
                v.append(f"layer {k}: rec_weights on a non-recurrent layer")
            continue
        n = layers[k].size
        if r is None or r.shape != (n, n) or m is None or m.shape != (n, n):
            v.append(f"layer {k} rec_weights: expected shape {(n, n)} with mask")
            continue
        if not np.all(np.isfinite(r)):
            v.append(f"layer {k} rec_weights: non-finite entry")
        if np.any(np.diagonal(r) != 0.0) or np.any(np.diagonal(m)):
            v.append(f"layer {k} rec_weights: self-connection (nonzero diagonal)")
        off_diag = ~np.eye(n, dtype=bool)
        if np.any(r[~m & off_diag] != 0.0):
            v.append(f"layer {k} rec_weights: nonzero entry outside sparsity mask")
    return v


def init_weights(topology: Topology, seed: int) -> Topology:
    """Fresh topology with U[-1, 1] weights and seeded recurrent masks.

    The recurrent mask for a layer of size N with density d activates exactly
    floor(d * N * (N - 1)) off-diagonal entries, chosen without replacement.
    Masked entries and diagonals stay exactly zero.
    """
    shape_errors = [s for s in validate(topology, NeuronParams.for_layers(topology.n_layers))
                    if not s.startswith("params")]
    if shape_errors:
        raise ValidationError(shape_errors)

    rng = np.random.default_rng(seed)
    out = topology.copy()
    for k in range(1, out.n_layers):
        nk, nprev = out.size(k), out.size(k - 1)
        out.ff_weights[k] = rng.uniform(-1.0, 1.0, size=(nk, nprev))
        if out.is_recurrent(k):
            off_diag = np.flatnonzero(~np.eye(nk, dtype=bool))
            n_active = int(math.floor(out.layers[k].recurrent_density * nk * (nk - 1)))
            chosen = rng.choice(off_diag, size=n_active, replace=False)
            mask = np.zeros(nk * nk, dtype=bool)
            mask[chosen] = True
            mask = mask.reshape(nk, nk)
            w = np.zeros((nk, nk))
            w[mask] = rng.uniform(-1.0, 1.0, size=n_active)
            out.rec_weights[k] = w
            out.rec_masks[k] = mask
    return out


@dataclass
class Episode:
    """Full forward record for one sample.

    trains[k][i] is the (possibly empty) float array of spike times of neuron
    i in layer k; counts[k] the per-neuron firing counts; tpsp[k] the total
    accumulated potential per neuron, filled by the aggregation module (None
    for the input layer).  potentials is only recorded on request.
    """

    duration: float
    trains: list
    counts: list
    tpsp: list = None
    potentials: list = None
    rasters: list = None  # optional boolean step grid, same content as trains


def spike_train_violations(times, duration, *, sim_step=None, refractory=None) -> list:
    """Invariant check for one spike train; refractory applies only to
    simulator-produced trains (encoders emit independent per-step events)."""
    t = np.asarray(times, dtype=float)
    v = []
    if t.size == 0:
        return v
    if np.any(np.diff(t) <= 0):
        v.append("spike times not strictly increasing")
    if t[0] < 0 or t[-1] >= duration:
        v.append("spike time outside [0, duration)")
    if sim_step is not None:
        steps = t / sim_step
        if np.any(np.abs(steps - np.round(steps)) > 1e-9):
            v.append("spike time not a multiple of sim_step")
    if refractory is not None and refractory > 0 and t.size > 1:
        if np.any(np.diff(t) < refractory - 1e-9):
            v.append("inter-spike interval below refractory period")
    return v
