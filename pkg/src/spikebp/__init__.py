"""Training engine for spiking neural networks with feedforward and recurrent
layers: LIF forward simulation, spike-train level aggregation, and a backward
pass that solves each recurrent layer's coupled sensitivity system instead of
unrolling the network in time."""

from .core import (Episode, LayerSpec, NeuronParams, Topology, ValidationError,
                   build_topology, init_weights, validate,
                   INPUT, FEEDFORWARD, RECURRENT)
from .simulate import psp_kernel, run_forward
from .spsp import SpsapTableau, activation, compute_spsp, compute_tableau, compute_tpsp
from .backprop import (GradientSet, LayerSystem, SolveFailure,
                       assemble_recurrent_system, backward, backward_from_tableau,
                       feedforward_p, output_delta, propagate_delta,
                       solve_p_exact, solve_p_taylor, weight_gradients)
from .optimize import (AdamState, TrainConfig, adam_step, evaluate, loss,
                       make_labels, regularization_gradient, train)
from .data import (DataFormatError, LabeledSpikeSample, load_event_csv,
                   load_idx, make_synthetic_rate_task, poisson_encode)

__version__ = "0.1.0"
