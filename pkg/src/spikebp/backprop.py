"""Backward pass at the spike-train level.

Instead of unrolling the network in time, each layer gets a small linear
system built from the aggregated spike-train quantities: a diagonal gain
matrix (omega), an intra-layer coupling matrix (theta, zero for feedforward
layers) and a cross-layer drive matrix (phi).  Solving
(omega - theta) P = phi yields the sensitivity of the layer's pre-activations
to the previous layer's, which carries the output error backwards in one shot
per layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NeuronParams, Topology
from .spsp import SpsapTableau

DENOM_EPS = 1e-12
RESIDUAL_RTOL = 1e-9


class SolveFailure(ArithmeticError):
    """A layer's sensitivity system is singular to working precision."""

    def __init__(self, message, layer=None):
        self.layer = layer
        super().__init__(message)


@dataclass
class LayerSystem:
    """Sensitivity system for one adjacent layer pair.

    omega holds the diagonal of the (strictly diagonal) gain matrix; theta is
    zero off a recurrent layer's synapses and has a zero diagonal; phi drives
    the system from the preceding layer; p is filled by a solve.
    """

    omega: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    p: np.ndarray = None
    layer: int = None


def output_delta(counts, labels, nu: float):
    """Error signal at the output layer: (actual - desired count) / threshold."""
    o = np.asarray(counts, dtype=float)
    y = np.asarray(labels, dtype=float)
    if o.shape != y.shape:
        raise ValueError("counts and labels must have the same length")
    return (o - y) / nu


def _pre_threshold(params: NeuronParams, k: int) -> float:
    # The input layer carries rates directly, so its activation scale is 1.
    return params.threshold(k) if k >= 1 else 1.0


def _omega_theta(tableau: SpsapTableau, topology: Topology,
                 params: NeuronParams, k: int):
    """Diagonal gain vector and intra-layer coupling for layer k."""
    nu = params.threshold(k)
    gain = (topology.ff_weights[k] * tableau.ff_de_post[k]).sum(axis=1)
    theta = None
    if topology.is_recurrent(k):
        gain = gain + (topology.rec_weights[k] * tableau.rec_de_post[k]).sum(axis=1)
        theta = topology.rec_weights[k] * tableau.rec_de_pre[k] / nu
        np.fill_diagonal(theta, 0.0)
    omega = 1.0 - gain / nu
    return omega, theta


def assemble_recurrent_system(tableau: SpsapTableau, topology: Topology,
                              params: NeuronParams, k: int) -> LayerSystem:
    """System matrices for the pair (k-1, k) where layer k is recurrent."""
    if not topology.is_recurrent(k):
        raise ValueError(f"layer {k} is not recurrent")
    omega, theta = _omega_theta(tableau, topology, params, k)
    nu_pre = _pre_threshold(params, k - 1)
    phi = topology.ff_weights[k] * tableau.ff_de_pre[k] / nu_pre
    return LayerSystem(omega=omega, theta=theta, phi=phi, layer=k)


def solve_p_exact(system: LayerSystem):
    """Dense partial-pivoting solve of (omega - theta) p = phi."""
    a = np.diag(system.omega) - system.theta
    try:
        p = np.linalg.solve(a, system.phi)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"layer {system.layer}: singular sensitivity system "
                           f"({exc})", layer=system.layer) from exc
    residual = np.max(np.abs(a @ p - system.phi))
    bound = RESIDUAL_RTOL * (1.0 + np.max(np.abs(system.phi)))
    if not np.isfinite(residual) or residual > bound:
        raise SolveFailure(f"layer {system.layer}: solve residual {residual:.3e} "
                           f"exceeds {bound:.3e}", layer=system.layer)
    system.p = p
    return p


def solve_p_taylor(system: LayerSystem):
    """First-order expansion of the inverse: no factorization, only diagonal
    scaling plus one coupling product."""
    omega = system.omega
    if np.any(np.abs(omega) <= DENOM_EPS):
        bad = int(np.argmin(np.abs(omega)))
        raise SolveFailure(f"layer {system.layer}: zero diagonal gain at "
                           f"neuron {bad}", layer=system.layer)
    scaled = system.phi / omega[:, None]
    p = scaled + (system.theta @ scaled) / omega[:, None]
    system.p = p
    return p


def feedforward_p(tableau: SpsapTableau, topology: Topology,
                  params: NeuronParams, k: int):
    """Closed-form sensitivities when layer k has no recurrent synapses."""
    if topology.is_recurrent(k):
        raise ValueError(f"layer {k} is recurrent; solve its coupled system instead")
    omega, _ = _omega_theta(tableau, topology, params, k)
    if np.any(np.abs(omega) <= DENOM_EPS):
        bad = int(np.argmin(np.abs(omega)))
        raise SolveFailure(f"layer {k}: self-feedback denominator vanishes at "
                           f"neuron {bad}", layer=k)
    nu_pre = _pre_threshold(params, k - 1)
    phi = topology.ff_weights[k] * tableau.ff_de_pre[k] / nu_pre
    return phi / omega[:, None]


def layer_p(tableau: SpsapTableau, topology: Topology, params: NeuronParams,
            k: int, solver: str = "exact"):
    """Sensitivity matrix of layer k's pre-activations to layer k-1's."""
    if topology.is_recurrent(k):
        system = assemble_recurrent_system(tableau, topology, params, k)
        if solver == "taylor":
            return solve_p_taylor(system)
        return solve_p_exact(system)
    return feedforward_p(tableau, topology, params, k)


def propagate_delta(p, delta_next):
    """Carry the error one layer back through the sensitivity matrix."""
    return np.asarray(p).T @ np.asarray(delta_next, dtype=float)


@dataclass
class GradientSet:
    """Loss gradients shaped like the topology's weights (index 0 is None)."""

    ff: list
    rec: list

    def pairs(self, topology: Topology):
        """Yield (gradient, weight, mask-or-None) for every trainable matrix."""
        for k in range(1, len(self.ff)):
            yield self.ff[k], topology.ff_weights[k], None
            if self.rec[k] is not None:
                yield self.rec[k], topology.rec_weights[k], topology.rec_masks[k]


def _effective_delta(tableau, topology, params, k, delta, solver):
    """Per-neuron error after resolving the layer's own feedback.

    For a feedforward layer this is the textbook division by the diagonal
    gain.  For a recurrent layer the intra-layer coupling re-routes error
    between neurons, so the transposed system is solved; dropping that
    coupling (keeping only the diagonal) is what the plain rational form of
    the activation derivative would do, and it does not survive a finite-
    difference check on recurrent layers.
    """
    omega, theta = _omega_theta(tableau, topology, params, k)
    if theta is None:
        if np.any(np.abs(omega) <= DENOM_EPS):
            bad = int(np.argmin(np.abs(omega)))
            raise SolveFailure(f"layer {k}: self-feedback denominator vanishes "
                               f"at neuron {bad}", layer=k)
        return delta / omega
    if solver == "taylor":
        if np.any(np.abs(omega) <= DENOM_EPS):
            bad = int(np.argmin(np.abs(omega)))
            raise SolveFailure(f"layer {k}: zero diagonal gain at neuron {bad}",
                               layer=k)
        scaled = delta / omega
        return scaled + (theta.T @ scaled) / omega
    a = (np.diag(omega) - theta).T
    try:
        out = np.linalg.solve(a, delta)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"layer {k}: singular sensitivity system ({exc})",
                           layer=k) from exc
    if not np.all(np.isfinite(out)):
        raise SolveFailure(f"layer {k}: non-finite effective error", layer=k)
    return out


def weight_gradients(tableau: SpsapTableau, topology: Topology,
                     params: NeuronParams, deltas, solver: str = "exact") -> GradientSet:
    """Per-weight loss gradients from the per-layer error vectors."""
    ff = [None]
    rec = [None]
    for k in range(1, topology.n_layers):
        delta = np.asarray(deltas[k], dtype=float)
        dtil = _effective_delta(tableau, topology, params, k, delta, solver)
        ff.append(dtil[:, None] * tableau.ff_e[k])
        if topology.is_recurrent(k):
            g = dtil[:, None] * tableau.rec_e[k]
            g[~topology.rec_masks[k]] = 0.0
            rec.append(g)
        else:
            rec.append(None)
    return GradientSet(ff=ff, rec=rec)


def backward_from_tableau(tableau: SpsapTableau, topology: Topology,
                          params: NeuronParams, output_counts, labels,
                          solver: str = "exact") -> GradientSet:
    """Full backward pass given an already-aggregated tableau."""
    last = topology.n_layers - 1
    deltas = [None] * topology.n_layers
    deltas[last] = output_delta(output_counts, labels, params.threshold(last))
    for k in range(last, 1, -1):
        p = layer_p(tableau, topology, params, k, solver)
        deltas[k - 1] = propagate_delta(p, deltas[k])
    return weight_gradients(tableau, topology, params, deltas, solver)


def backward(episode, tableau: SpsapTableau, topology: Topology,
             params: NeuronParams, labels, solver: str = "exact") -> GradientSet:
    """Backward pass for one simulated episode."""
    return backward_from_tableau(tableau, topology, params,
                                 episode.counts[-1], labels, solver)
