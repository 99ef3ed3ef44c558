"""Independent verification engines, used only by tests and gradcheck.

Everything here recomputes what the production modules compute, but the slow
and obvious way: literal double loops for the spike-train aggregation, a
stacked dense system with hand-rolled Gaussian elimination for the layer
sensitivities, and an analytic surrogate network whose pair interactions are
smooth functions of the rates, so gradients can be finite-differenced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import NeuronParams, Topology, build_topology, init_weights
from .spsp import SpsapTableau


class ConvergenceError(RuntimeError):
    pass


def brute_spsp(pre_times, post_times, params: NeuronParams) -> float:
    """Reference aggregation: explicit loop over every spike pair."""
    c = 1.0 / (1.0 - params.tau_s / params.tau_m)
    total = 0.0
    for t_f in post_times:
        for tau in pre_times:
            lag = t_f - params.synaptic_delay - tau
            if lag >= 0:
                total += c * (math.exp(-lag / params.tau_m)
                              - math.exp(-lag / params.tau_s))
    return total


def gauss_solve(a, b):
    """Textbook Gaussian elimination with partial pivoting."""
    a = [list(map(float, row)) for row in np.asarray(a)]
    b = [float(x) for x in np.asarray(b)]
    n = len(b)
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs(a[r][col]))
        if abs(a[pivot][col]) < 1e-300:
            raise ArithmeticError("singular stacked system")
        if pivot != col:
            a[col], a[pivot] = a[pivot], a[col]
            b[col], b[pivot] = b[pivot], b[col]
        for r in range(col + 1, n):
            f = a[r][col] / a[col][col]
            if f == 0.0:
                continue
            for cc in range(col, n):
                a[r][cc] -= f * a[col][cc]
            b[r] -= f * b[col]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        s = b[r]
        for cc in range(r + 1, n):
            s -= a[r][cc] * x[cc]
        x[r] = s / a[r][r]
    return np.array(x)


def _scalar_system(tableau: SpsapTableau, topology: Topology,
                   params: NeuronParams, k: int):
    """Omega diagonal, theta and phi for layer k, built entry by entry."""
    n_post = topology.size(k)
    n_pre = topology.size(k - 1)
    nu = params.threshold(k)
    nu_pre = params.threshold(k - 1) if k - 1 >= 1 else 1.0
    w = topology.ff_weights[k]
    rec = topology.is_recurrent(k)

    omega = np.zeros(n_post)
    theta = np.zeros((n_post, n_post))
    phi = np.zeros((n_post, n_pre))
    for l in range(n_post):
        gain = 0.0
        for j in range(n_pre):
            gain += w[l, j] * tableau.ff_de_post[k][l, j]
        if rec:
            for p in range(n_post):
                gain += topology.rec_weights[k][l, p] * tableau.rec_de_post[k][l, p]
        omega[l] = 1.0 - gain / nu
        for i in range(n_pre):
            phi[l, i] = w[l, i] * tableau.ff_de_pre[k][l, i] / nu_pre
        if rec:
            for p in range(n_post):
                if p != l:
                    theta[l, p] = (topology.rec_weights[k][l, p]
                                   * tableau.rec_de_pre[k][l, p] / nu)
    return omega, theta, phi


def naive_sensitivities(tableau: SpsapTableau, topology: Topology,
                        params: NeuronParams):
    """All layer sensitivity matrices via one stacked dense solve per pair.

    The unknowns of a pair are flattened into a single vector and eliminated
    without using that the gain matrix is diagonal.  Intended for networks of
    a handful of neurons per layer.
    """
    ps = [None]
    for k in range(1, topology.n_layers):
        omega, theta, phi = _scalar_system(tableau, topology, params, k)
        n_post, n_pre = phi.shape
        m = n_post * n_pre
        a = np.zeros((m, m))
        b = np.zeros(m)
        for l in range(n_post):
            for i in range(n_pre):
                row = l * n_pre + i
                a[row, row] += omega[l]
                for p in range(n_post):
                    a[row, p * n_pre + i] -= theta[l, p]
                b[row] = phi[l, i]
        x = gauss_solve(a, b)
        ps.append(x.reshape(n_post, n_pre))
    return ps


def naive_gradients(tableau: SpsapTableau, topology: Topology,
                    params: NeuronParams, output_counts, labels):
    """Loss gradients recomputed with scalar loops and the stacked solver."""
    last = topology.n_layers - 1
    ps = naive_sensitivities(tableau, topology, params)

    deltas = [None] * (last + 1)
    nu_out = params.threshold(last)
    deltas[last] = np.array([(float(o) - float(y)) / nu_out
                             for o, y in zip(output_counts, labels)])
    for k in range(last, 1, -1):
        p = ps[k]
        prev = np.zeros(topology.size(k - 1))
        for i in range(topology.size(k - 1)):
            s = 0.0
            for l in range(topology.size(k)):
                s += p[l, i] * deltas[k][l]
            prev[i] = s
        deltas[k - 1] = prev

    ff = [None]
    rec = [None]
    for k in range(1, last + 1):
        omega, theta, _ = _scalar_system(tableau, topology, params, k)
        m = np.diag(omega) - theta
        dtil = gauss_solve(m.T, deltas[k])
        n_post, n_pre = tableau.ff_e[k].shape
        g = np.zeros((n_post, n_pre))
        for l in range(n_post):
            for j in range(n_pre):
                g[l, j] = dtil[l] * tableau.ff_e[k][l, j]
        ff.append(g)
        if topology.is_recurrent(k):
            gr = np.zeros((n_post, n_post))
            mask = topology.rec_masks[k]
            for l in range(n_post):
                for p in range(n_post):
                    if mask[l, p]:
                        gr[l, p] = dtil[l] * tableau.rec_e[k][l, p]
            rec.append(gr)
        else:
            rec.append(None)
    return ff, rec


@dataclass
class SurrogateNet:
    """Smooth stand-in network with analytic pair interactions.

    The interaction of a pre neuron firing o_pre times with a post neuron
    firing o_post times is alpha * o_pre + beta * o_pre * o_post, which keeps
    both rate-dependence paths alive while staying differentiable.  (A pure
    product term alone admits only the zero fixed point, so the linear term
    is required for a non-degenerate network.)
    """

    topology: Topology
    params: NeuronParams
    alpha_ff: list
    beta_ff: list
    alpha_rec: list
    beta_rec: list

    def threshold(self, k: int) -> float:
        return self.params.threshold(k) if k >= 1 else 1.0


def random_surrogate(layer_specs, seed: int, coeff_scale: float = 0.6) -> SurrogateNet:
    """Random surrogate with coefficients scaled for a contractive fixed point."""
    topo = init_weights(build_topology(layer_specs), seed)
    params = NeuronParams.for_layers(len(layer_specs), threshold=10.0)
    rng = np.random.default_rng(seed + 1)
    alpha_ff, beta_ff, alpha_rec, beta_rec = [None], [None], [None], [None]
    for k in range(1, topo.n_layers):
        fan = max(topo.size(k - 1), 1)
        shape = topo.ff_weights[k].shape
        alpha_ff.append(rng.uniform(0.2, 1.0, shape) * coeff_scale / fan)
        beta_ff.append(rng.uniform(0.1, 0.5, shape) * coeff_scale / fan)
        if topo.is_recurrent(k):
            n = topo.size(k)
            alpha_rec.append(rng.uniform(0.2, 1.0, (n, n)) * coeff_scale / n)
            beta_rec.append(rng.uniform(0.1, 0.5, (n, n)) * coeff_scale / n)
        else:
            alpha_rec.append(None)
            beta_rec.append(None)
    return SurrogateNet(topology=topo, params=params, alpha_ff=alpha_ff,
                        beta_ff=beta_ff, alpha_rec=alpha_rec, beta_rec=beta_rec)


def surrogate_forward(net: SurrogateNet, input_rates, labels=None,
                      damping: float = 0.5, tol: float = 1e-12,
                      max_iter: int = 10000):
    """Solve each layer's pre-activation fixed point by damped iteration.

    Returns (per-layer activations a, loss) with a[0] = input rates; the loss
    is None when no labels are given.
    """
    topo = net.topology
    a = [np.asarray(input_rates, dtype=float)]
    for k in range(1, topo.n_layers):
        nu = net.threshold(k)
        o_pre = a[k - 1] / net.threshold(k - 1)
        w = topo.ff_weights[k]
        drive = w * (net.alpha_ff[k] * o_pre[None, :])  # o_post-free part
        cross = w * (net.beta_ff[k] * o_pre[None, :])
        ak = np.zeros(topo.size(k))
        for it in range(max_iter):
            o = ak / nu
            t = drive.sum(axis=1) + cross.sum(axis=1) * o
            if topo.is_recurrent(k):
                wr = topo.rec_weights[k]
                t = t + (wr * (net.alpha_rec[k] * o[None, :])).sum(axis=1)
                t = t + (wr * (net.beta_rec[k] * o[None, :])).sum(axis=1) * o
            if np.max(np.abs(t - ak)) <= tol:
                ak = t
                break
            ak = (1.0 - damping) * ak + damping * t
        else:
            raise ConvergenceError(f"layer {k}: fixed point did not converge")
        a.append(ak)
    loss = None
    if labels is not None:
        o_out = a[-1] / net.threshold(topo.n_layers - 1)
        loss = 0.5 * float(np.sum((o_out - np.asarray(labels, dtype=float)) ** 2))
    return a, loss


def surrogate_tableau(net: SurrogateNet, a_list) -> SpsapTableau:
    """Exact interaction values and partials at a solved operating point."""
    topo = net.topology
    tab = SpsapTableau(ff_e=[None], ff_de_pre=[None], ff_de_post=[None],
                       rec_e=[None], rec_de_pre=[None], rec_de_post=[None],
                       counts=[a_list[0].copy()])
    for k in range(1, topo.n_layers):
        o_pre = a_list[k - 1] / net.threshold(k - 1)
        o_post = a_list[k] / net.threshold(k)
        tab.counts.append(o_post.copy())
        al, be = net.alpha_ff[k], net.beta_ff[k]
        tab.ff_e.append(al * o_pre[None, :] + be * o_pre[None, :] * o_post[:, None])
        tab.ff_de_pre.append(al + be * o_post[:, None])
        tab.ff_de_post.append(be * o_pre[None, :])
        if topo.is_recurrent(k):
            al, be = net.alpha_rec[k], net.beta_rec[k]
            tab.rec_e.append(al * o_post[None, :] + be * o_post[None, :] * o_post[:, None])
            tab.rec_de_pre.append(al + be * o_post[:, None])
            tab.rec_de_post.append(be * o_post[None, :])
        else:
            tab.rec_e.append(None)
            tab.rec_de_pre.append(None)
            tab.rec_de_post.append(None)
    return tab


def finite_diff_gradient(net: SurrogateNet, input_rates, labels, h: float = 1e-5,
                         tol: float = 1e-12):
    """Central-difference loss gradient for every trainable weight.

    tol is the fixed-point tolerance of the inner forward solves; the
    difference quotient cannot resolve gradients below roughly tol / h, so
    callers comparing against analytic gradients should tighten it.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("perturbation h must lie in [1e-6, 1e-4]")
    topo = net.topology

    def loss_with(matrix, i, j, delta):
        matrix[i, j] += delta
        try:
            _, loss = surrogate_forward(net, input_rates, labels, tol=tol)
        finally:
            matrix[i, j] -= delta
        return loss

    ff = [None]
    rec = [None]
    for k in range(1, topo.n_layers):
        w = topo.ff_weights[k]
        g = np.zeros_like(w)
        for i in range(w.shape[0]):
            for j in range(w.shape[1]):
                g[i, j] = (loss_with(w, i, j, h) - loss_with(w, i, j, -h)) / (2 * h)
        ff.append(g)
        if topo.is_recurrent(k):
            wr = topo.rec_weights[k]
            gr = np.zeros_like(wr)
            mask = topo.rec_masks[k]
            for i in range(wr.shape[0]):
                for j in range(wr.shape[1]):
                    if mask[i, j]:
                        gr[i, j] = (loss_with(wr, i, j, h)
                                    - loss_with(wr, i, j, -h)) / (2 * h)
            rec.append(gr)
        else:
            rec.append(None)
    return ff, rec
