"""Command-line surface: train / eval / gradcheck / encode / validate.

Configuration is a single JSON document with nested key groups; unknown keys
anywhere are hard errors so a typo in a tuned hyperparameter cannot silently
fall back to a default.  Checkpoints are versioned text files with weights
printed to 17 significant digits, which round-trips binary64 exactly and
stays human-diffable.

Exit codes: 0 success, 1 validation failure, 2 data failure, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .backprop import SolveFailure, backward_from_tableau
from .core import (FEEDFORWARD, INPUT, RECURRENT, LayerSpec, NeuronParams,
                   Topology, ValidationError, build_topology, init_weights,
                   validate)
from .data import (DataFormatError, LabeledSpikeSample, load_event_csv,
                   load_idx, make_synthetic_rate_task, poisson_encode,
                   write_event_csv)
from .optimize import DEFAULT_POST_GAIN_CAP, TrainConfig, evaluate, train
from .oracle import (ConvergenceError, finite_diff_gradient, naive_gradients,
                     random_surrogate, surrogate_forward, surrogate_tableau)

CHECKPOINT_MAGIC = "spikebp-checkpoint"
CHECKPOINT_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _f17(x) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# configuration

_NEURON_KEYS = {"tau_m", "tau_s", "thresholds", "refractory", "reset_voltage",
                "synaptic_delay", "sim_step"}
_TRAIN_KEYS = {"epochs", "learning_rate", "target_count", "nontarget_count",
               "lambda_reg", "inhibition_weight", "solver", "post_gain_cap",
               "eval_every"}
_LAYER_KEYS = {"kind", "size", "density"}
_TOP_KEYS = {"seed", "layers", "neuron", "train", "data", "out_dir"}
_DATA_KEYS = {
    "synthetic": {"source", "num_classes", "num_inputs", "duration",
                  "samples_per_class", "high_hz", "low_hz", "seed"},
    "event_csv": {"source", "train_events", "train_labels", "test_events",
                  "test_labels", "num_neurons", "duration"},
    "idx": {"source", "train_images", "train_labels", "test_images",
            "test_labels", "duration", "scale", "encode_seed", "train_limit",
            "test_limit"},
}


def _reject_unknown(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


class RunConfig:
    """Everything one training run needs, parsed and validated."""

    def __init__(self, doc: dict, base_dir: str = "."):
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        _reject_unknown(doc, _TOP_KEYS, "config")
        self.base_dir = base_dir
        self.seed = int(doc.get("seed", 0))
        self.out_dir = doc.get("out_dir")

        layers = doc.get("layers")
        if not layers:
            raise ConfigError("config: 'layers' list is required")
        self.layer_specs = []
        for i, ld in enumerate(layers):
            _reject_unknown(ld, _LAYER_KEYS, f"layers[{i}]")
            kind = ld.get("kind")
            if kind not in (INPUT, FEEDFORWARD, RECURRENT):
                raise ConfigError(f"layers[{i}]: kind must be one of "
                                  f"input/feedforward/recurrent, got {kind!r}")
            self.layer_specs.append(LayerSpec(kind, int(ld.get("size", 0)),
                                              float(ld.get("density", 0.0))))

        neuron = dict(doc.get("neuron", {}))
        _reject_unknown(neuron, _NEURON_KEYS, "neuron")
        th = neuron.pop("thresholds", 10.0)
        if np.isscalar(th):
            th = (float(th),) * (len(self.layer_specs) - 1)
        else:
            th = tuple(float(x) for x in th)
        self.params = NeuronParams(thresholds=th, **neuron)

        tr = dict(doc.get("train", {}))
        _reject_unknown(tr, _TRAIN_KEYS, "train")
        tr.setdefault("post_gain_cap", DEFAULT_POST_GAIN_CAP)
        try:
            self.train = TrainConfig(seed=self.seed, **tr)
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc

        self.data = dict(doc.get("data", {}))
        source = self.data.get("source")
        if source not in _DATA_KEYS:
            raise ConfigError(f"data: source must be one of "
                              f"{sorted(_DATA_KEYS)}, got {source!r}")
        _reject_unknown(self.data, _DATA_KEYS[source], "data")

    def path(self, key: str):
        value = self.data.get(key)
        return None if value is None else os.path.join(self.base_dir, value)

    def referenced_paths(self):
        for key in ("train_events", "train_labels", "test_events", "test_labels",
                    "train_images", "test_images"):
            p = self.path(key)
            if p is not None:
                yield key, p

    def build_topology(self) -> Topology:
        return build_topology(self.layer_specs)

    def load_datasets(self):
        """(train samples, test samples or None) per the data section."""
        src = self.data["source"]
        if src == "synthetic":
            return make_synthetic_rate_task(
                int(self.data["num_classes"]), int(self.data["num_inputs"]),
                float(self.data["duration"]),
                seed=int(self.data.get("seed", self.seed)),
                samples_per_class=int(self.data.get("samples_per_class", 25)),
                high_hz=float(self.data.get("high_hz", 80.0)),
                low_hz=float(self.data.get("low_hz", 10.0)))
        if src == "event_csv":
            n = int(self.data["num_neurons"])
            dur = float(self.data["duration"])
            tr = load_event_csv(self.path("train_events"),
                                self.path("train_labels"), n, dur)
            te = None
            if self.data.get("test_events"):
                te = load_event_csv(self.path("test_events"),
                                    self.path("test_labels"), n, dur)
            return tr, te
        return self._load_idx_datasets()

    def _load_idx_datasets(self):
        dur = float(self.data.get("duration", 400.0))
        scale = float(self.data.get("scale", 0.25))
        enc_seed = int(self.data.get("encode_seed", self.seed))

        def encode(pairs, limit, split):
            if limit:
                pairs = pairs[:int(limit)]
            out = []
            for i, (pixels, label) in enumerate(pairs):
                trains = poisson_encode(pixels, dur, scale, seed=[enc_seed, split, i])
                out.append(LabeledSpikeSample(input=trains, label=label,
                                              duration=dur))
            return out

        tr = encode(load_idx(self.path("train_images"), self.path("train_labels")),
                    self.data.get("train_limit"), 0)
        te = None
        if self.data.get("test_images"):
            te = encode(load_idx(self.path("test_images"), self.path("test_labels")),
                        self.data.get("test_limit"), 1)
        return tr, te


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    return RunConfig(doc, base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str, topology: Topology, seed: int):
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}", f"seed {seed}",
             f"layers {topology.n_layers}"]
    for spec in topology.layers:
        lines.append(f"layer {spec.kind} {spec.size} {_f17(spec.recurrent_density)}")
    for k in range(1, topology.n_layers):
        w = topology.ff_weights[k]
        lines.append(f"ff {k} {w.shape[0]} {w.shape[1]}")
        lines.extend(" ".join(_f17(x) for x in row) for row in w)
        if topology.is_recurrent(k):
            m = topology.rec_masks[k]
            lines.append(f"recmask {k} {m.shape[0]}")
            lines.extend(" ".join(str(int(x)) for x in row) for row in m)
            r = topology.rec_weights[k]
            lines.append(f"rec {k} {r.shape[0]}")
            lines.extend(" ".join(_f17(x) for x in row) for row in r)
    lines.append("end")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(path: str):
    """Returns (topology, seed); raises CheckpointError on any malformation."""
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}")
    it = iter(lines)

    def next_line(what):
        try:
            return next(it)
        except StopIteration:
            raise CheckpointError(f"checkpoint truncated while reading {what}")

    head = next_line("header").split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if head[1] != f"v{CHECKPOINT_VERSION}":
        raise CheckpointError(f"{path}: unsupported checkpoint version {head[1]}, "
                              f"expected v{CHECKPOINT_VERSION}")
    seed = int(next_line("seed").split()[1])
    n_layers = int(next_line("layer count").split()[1])
    specs = []
    for _ in range(n_layers):
        parts = next_line("layer spec").split()
        if parts[0] != "layer":
            raise CheckpointError(f"{path}: malformed layer spec line")
        specs.append(LayerSpec(parts[1], int(parts[2]), float(parts[3])))
    topo = build_topology(specs)

    def read_matrix(rows, what):
        out = []
        for _ in range(rows):
            out.append([float(x) for x in next_line(what).split()])
        return np.array(out)

    for k in range(1, n_layers):
        tag, kk, r, c = next_line("ff header").split()
        if tag != "ff" or int(kk) != k:
            raise CheckpointError(f"{path}: expected ff block for layer {k}")
        topo.ff_weights[k] = read_matrix(int(r), "ff weights")
        if topo.ff_weights[k].shape != (int(r), int(c)):
            raise CheckpointError(f"{path}: ragged ff matrix at layer {k}")
        if specs[k].kind == RECURRENT:
            tag, kk, n = next_line("recmask header").split()
            if tag != "recmask":
                raise CheckpointError(f"{path}: expected recmask block at layer {k}")
            topo.rec_masks[k] = read_matrix(int(n), "recurrent mask").astype(bool)
            tag, kk, n = next_line("rec header").split()
            if tag != "rec":
                raise CheckpointError(f"{path}: expected rec block at layer {k}")
            topo.rec_weights[k] = read_matrix(int(n), "recurrent weights")
    if next_line("end marker") != "end":
        raise CheckpointError(f"{path}: missing end marker")
    return topo, seed


# ---------------------------------------------------------------------------
# commands

def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _check_run_inputs(cfg: RunConfig):
    violations = validate(cfg.build_topology(), cfg.params)
    if violations:
        raise ValidationError(violations)
    for key, p in cfg.referenced_paths():
        if not os.path.exists(p):
            raise DataFormatError(f"data.{key}: path does not exist: {p}")
    if cfg.data["source"] == "synthetic":
        n_in = int(cfg.data["num_inputs"])
        if n_in != cfg.layer_specs[0].size:
            raise ConfigError(f"data.num_inputs ({n_in}) does not match input "
                              f"layer size ({cfg.layer_specs[0].size})")


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.train.seed = args.seed
        if args.solver:
            cfg.train.solver = args.solver
        _check_run_inputs(cfg)
    except (ConfigError, ValidationError) as exc:
        return _fail(EXIT_VALIDATION, str(exc))
    except DataFormatError as exc:
        return _fail(EXIT_DATA, str(exc))
    out_dir = args.out or cfg.out_dir or "."
    if args.dry_run:
        print("dry-run ok")
        return EXIT_OK
    os.makedirs(out_dir, exist_ok=True)

    try:
        train_set, test_set = cfg.load_datasets()
    except DataFormatError as exc:
        return _fail(EXIT_DATA, str(exc))
    if not train_set:
        return _fail(EXIT_DATA, "training set is empty")

    topo = init_weights(cfg.build_topology(), cfg.seed)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    timing_path = os.path.join(out_dir, "timing.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.txt")
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as mf, \
            open(timing_path, "w", encoding="utf-8", newline="\n") as tf:
        mf.write("epoch,train_loss,train_acc,test_acc\n")
        tf.write("epoch,wall_seconds\n")

        def on_epoch(row):
            test = "" if row.test_acc is None else _f17(row.test_acc)
            mf.write(f"{row.epoch},{_f17(row.train_loss)},"
                     f"{_f17(row.train_acc)},{test}\n")
            mf.flush()
            tf.write(f"{row.epoch},{row.wall_seconds:.3f}\n")
            save_checkpoint(ckpt_path, topo, cfg.seed)
            print(f"epoch {row.epoch}: train_loss={row.train_loss:.4f} "
                  f"train_acc={row.train_acc:.4f}"
                  + ("" if row.test_acc is None else f" test_acc={row.test_acc:.4f}"))

        try:
            topo, _ = train(train_set, topo, cfg.params, cfg.train,
                            test_set=test_set, on_epoch=on_epoch)
        except SolveFailure as exc:
            return _fail(EXIT_NUMERIC, str(exc))
    save_checkpoint(ckpt_path, topo, cfg.seed)
    print(f"wrote {metrics_path} and {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg = load_config(args.config)
        topo, _seed = load_checkpoint(args.checkpoint)
    except ConfigError as exc:
        return _fail(EXIT_VALIDATION, str(exc))
    except CheckpointError as exc:
        return _fail(EXIT_VALIDATION, str(exc))
    violations = validate(topo, cfg.params)
    if violations:
        return _fail(EXIT_VALIDATION, "; ".join(violations))
    if args.dry_run:
        print("dry-run ok")
        return EXIT_OK
    try:
        train_set, test_set = cfg.load_datasets()
    except DataFormatError as exc:
        return _fail(EXIT_DATA, str(exc))
    samples = test_set if args.split == "test" else train_set
    if not samples:
        return _fail(EXIT_DATA, f"{args.split} split is empty")
    accuracy, confusion = evaluate(samples, topo, cfg.params)
    print(f"accuracy={accuracy}")
    for true_class, row in enumerate(confusion):
        print(f"confusion[{true_class}]=" + ",".join(str(int(x)) for x in row))
    return EXIT_OK


def _parse_layer_string(text: str):
    specs = []
    for i, tok in enumerate(text.split("-")):
        tok = tok.strip()
        recurrent = tok[:1].upper() == "R"
        size = int(tok[1:] if recurrent else tok)
        if i == 0:
            specs.append(LayerSpec(INPUT, size))
        elif recurrent:
            specs.append(LayerSpec(RECURRENT, size, 0.5))
        else:
            specs.append(LayerSpec(FEEDFORWARD, size))
    return specs


def cmd_gradcheck(args) -> int:
    specs = _parse_layer_string(args.layers)
    if args.dry_run:
        print("dry-run ok")
        return EXIT_OK
    rng = np.random.default_rng(args.seed)
    print(f"gradcheck: layers={args.layers} instances={args.instances} "
          f"seed={args.seed}")
    worst_fd = 0.0
    worst_naive = 0.0
    failures = []
    done = 0
    attempt = 0
    while done < args.instances and attempt < 20 * args.instances:
        attempt += 1
        inst_seed = int(rng.integers(0, 2 ** 31))
        net = random_surrogate(specs, seed=inst_seed)
        try:
            rates = np.random.default_rng(inst_seed + 1).uniform(
                1.0, 5.0, specs[0].size)
            a, _ = surrogate_forward(net, rates, tol=1e-15)
        except ConvergenceError:
            continue
        done += 1
        nu_out = net.threshold(net.topology.n_layers - 1)
        o_out = a[-1] / nu_out
        lrng = np.random.default_rng(inst_seed + 2)
        labels = o_out + np.where(lrng.random(o_out.size) < 0.5, -1.0, 1.0) \
            * lrng.uniform(1.0, 2.0, o_out.size)
        tab = surrogate_tableau(net, a)
        grads = backward_from_tableau(tab, net.topology, net.params, o_out, labels)
        if args.inject_error:
            grads.ff[1][0, 0] += args.inject_error
        fd_ff, fd_rec = finite_diff_gradient(net, rates, labels, h=1e-5, tol=1e-15)
        nv_ff, nv_rec = naive_gradients(tab, net.topology, net.params, o_out, labels)
        for k in range(1, net.topology.n_layers):
            pairs = [(grads.ff[k], fd_ff[k], nv_ff[k])]
            if grads.rec[k] is not None:
                mask = net.topology.rec_masks[k]
                pairs.append((grads.rec[k][mask], fd_rec[k][mask], nv_rec[k][mask]))
            for g, fd, nv in pairs:
                g, fd, nv = (np.asarray(x).ravel() for x in (g, fd, nv))
                worst_naive = max(worst_naive, float(np.max(np.abs(g - nv)))
                                  if g.size else 0.0)
                sel = np.abs(fd) > 1e-8
                if sel.any():
                    dev = np.abs(g[sel] - fd[sel])
                    allowed = np.maximum(1e-4 * np.abs(fd[sel]), 1e-9)
                    if np.any(dev > allowed):
                        failures.append(f"finite-difference mismatch in layer {k}")
                    worst_fd = max(worst_fd, float(np.max(dev / np.abs(fd[sel]))))
    if done < args.instances:
        failures.append("could not generate enough convergent instances")
    if worst_naive > 1e-10:
        failures.append("stacked-elimination mismatch")
    print(f"max finite-difference relative deviation: {worst_fd:.3e}")
    print(f"max stacked-elimination deviation: {worst_naive:.3e}")
    if failures:
        for f in sorted(set(failures)):
            print(f"FAIL: {f}")
        return EXIT_NUMERIC
    print("all gradient checks passed")
    return EXIT_OK


def cmd_encode(args) -> int:
    try:
        pairs = load_idx(args.images, args.labels)
    except (OSError, DataFormatError) as exc:
        return _fail(EXIT_DATA, str(exc))
    if args.limit:
        pairs = pairs[:args.limit]
    if args.dry_run:
        print(f"dry-run ok ({len(pairs)} images)")
        return EXIT_OK
    samples = []
    for i, (pixels, label) in enumerate(pairs):
        trains = poisson_encode(pixels, args.duration, args.scale,
                                seed=[args.seed, i])
        samples.append(LabeledSpikeSample(input=trains, label=label,
                                          duration=args.duration))
    write_event_csv(samples, args.out_events, args.out_labels)
    print(f"encoded {len(samples)} samples -> {args.out_events}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
        _check_run_inputs(cfg)
    except (ConfigError, ValidationError) as exc:
        return _fail(EXIT_VALIDATION, str(exc))
    except DataFormatError as exc:
        return _fail(EXIT_DATA, str(exc))
    print("config ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikebp",
        description="Train spiking networks with spike-train level backpropagation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (metrics, checkpoints)")
    p.add_argument("--seed", type=int)
    p.add_argument("--solver", choices=["exact", "taylor"])
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="verify gradients against independent oracles")
    p.add_argument("--layers", default="4-R5-3",
                   help="layer sizes, R prefix marks recurrent (e.g. 4-R5-3)")
    p.add_argument("--instances", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-error", type=float, default=0.0,
                   help="perturb one gradient entry (negative control)")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("encode", help="Poisson-encode IDX images to event CSV")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-events", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--duration", type=float, default=400.0)
    p.add_argument("--scale", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("validate", help="validate a config file and its paths")
    p.add_argument("--config", required=True)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
