"""Dataset ingestion and spike encoding: IDX image files, event-CSV spike
recordings, Poisson rate encoding and a synthetic rate-classification task."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger("spikebp.data")

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledSpikeSample:
    """One encoded input: a spike train per input neuron plus a class label."""

    input: list
    label: int
    duration: float

    def violations(self) -> list:
        v = []
        for i, times in enumerate(self.input):
            t = np.asarray(times, dtype=float)
            if t.size and (t[0] < 0 or t[-1] >= self.duration):
                v.append(f"neuron {i}: spike time outside [0, duration)")
            if t.size > 1 and np.any(np.diff(t) <= 0):
                v.append(f"neuron {i}: times not strictly increasing")
        if self.label < 0:
            v.append("negative label")
        return v


def poisson_encode(pixels, duration: float, scale: float, seed: int):
    """Bernoulli draw per neuron per 1 ms step with p = scale * intensity/255."""
    if not 0.0 <= scale <= 1.0:
        raise ValueError("scale must lie in [0, 1]")
    intensities = np.asarray(pixels, dtype=float)
    n_steps = int(round(duration))
    p = np.clip(scale * intensities / 255.0, 0.0, 1.0)
    rng = np.random.default_rng(seed)
    hits = rng.random((intensities.size, n_steps)) < p[:, None]
    return [np.flatnonzero(row).astype(float) for row in hits]


def _read_exact(f, n, path, what):
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"{path}: truncated while reading {what}")
    return buf


def load_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files into (pixels, label) pairs.

    Pixels come back as a flat uint8 vector per image, paired with its label
    by index.
    """
    with open(images_path, "rb") as f:
        magic, n_images = struct.unpack(">II", _read_exact(f, 8, images_path,
                                                           "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(f"{images_path}: bad image magic "
                                  f"0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        rows, cols = struct.unpack(">II", _read_exact(f, 8, images_path,
                                                      "image dimensions"))
        raw = _read_exact(f, n_images * rows * cols, images_path, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n_images, rows * cols)

    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, labels_path,
                                                           "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(f"{labels_path}: bad label magic "
                                  f"0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, n_labels, labels_path, "labels"),
                               dtype=np.uint8)

    if n_images != n_labels:
        raise DataFormatError(f"{images_path}: {n_images} images but "
                              f"{n_labels} labels in {labels_path}")
    return [(images[i], int(labels[i])) for i in range(n_images)]


def write_idx(images, labels, images_path, labels_path):
    """Inverse of load_idx; images is an (n, side*side) uint8 array."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n = images.shape[0]
    side = int(round(images.shape[1] ** 0.5))
    if side * side != images.shape[1]:
        raise ValueError("write_idx expects square images")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, side, side))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_event_csv(events_path, labels_path, num_neurons: int, duration: float):
    """Read "sample_id,neuron_id,time_ms" events plus "sample_id,label" rows.

    Events are grouped per sample and sorted in time; exact duplicate events
    are dropped with a warning.  Range violations are reported with their
    line number.
    """
    labels = {}
    with open(labels_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataFormatError(f"{labels_path}:{lineno}: expected "
                                      f"'sample_id,label', got {line!r}")
            try:
                sid, label = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataFormatError(f"{labels_path}:{lineno}: non-integer field")
            if label < 0:
                raise DataFormatError(f"{labels_path}:{lineno}: negative label")
            if sid in labels:
                raise DataFormatError(f"{labels_path}:{lineno}: duplicate sample id {sid}")
            labels[sid] = label

    events = {sid: {} for sid in labels}
    n_dupes = 0
    with open(events_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DataFormatError(f"{events_path}:{lineno}: expected "
                                      f"'sample_id,neuron_id,time_ms', got {line!r}")
            try:
                sid, nid, t = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise DataFormatError(f"{events_path}:{lineno}: malformed field")
            if sid not in labels:
                raise DataFormatError(f"{events_path}:{lineno}: sample {sid} "
                                      f"has no label")
            if not 0 <= nid < num_neurons:
                raise DataFormatError(f"{events_path}:{lineno}: neuron id {nid} "
                                      f"outside [0, {num_neurons})")
            if not 0 <= t < duration:
                raise DataFormatError(f"{events_path}:{lineno}: time {t} outside "
                                      f"[0, {duration})")
            bucket = events[sid].setdefault(nid, set())
            if t in bucket:
                n_dupes += 1
            else:
                bucket.add(t)
    if n_dupes:
        log.warning("%s: dropped %d duplicate events", events_path, n_dupes)

    samples = []
    for sid in sorted(labels):
        trains = [np.array(sorted(events[sid].get(i, ())), dtype=float)
                  for i in range(num_neurons)]
        samples.append(LabeledSpikeSample(input=trains, label=labels[sid],
                                          duration=duration))
    return samples


def write_event_csv(samples, events_path, labels_path):
    """Write samples in the event-CSV interchange format (LF-terminated)."""
    with open(events_path, "w", encoding="utf-8", newline="\n") as ef:
        for sid, sample in enumerate(samples):
            for nid, times in enumerate(sample.input):
                for t in np.asarray(times, dtype=float):
                    ef.write(f"{sid},{nid},{t:g}\n")
    with open(labels_path, "w", encoding="utf-8", newline="\n") as lf:
        for sid, sample in enumerate(samples):
            lf.write(f"{sid},{sample.label}\n")


def make_synthetic_rate_task(num_classes: int, num_inputs: int, duration: float,
                             seed: int, samples_per_class: int = 25,
                             high_hz: float = 80.0, low_hz: float = 10.0,
                             train_fraction: float = 0.8):
    """Separable rate-coded classification task.

    Each class gets a fixed template assigning every input neuron a high or
    low Poisson rate; templates are redrawn until every pair differs on at
    least 25% of the inputs.  Samples are fresh Poisson draws from the
    class template, split per class into train/test.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    min_diff = max(1, int(np.ceil(0.25 * num_inputs)))

    templates = []
    for _ in range(num_classes):
        for _attempt in range(1000):
            cand = rng.random(num_inputs) < 0.5
            if all(np.sum(cand != t) >= min_diff for t in templates):
                templates.append(cand)
                break
        else:
            raise RuntimeError("could not draw sufficiently distinct templates")

    n_steps = int(round(duration))
    train, test = [], []
    n_train = int(round(train_fraction * samples_per_class))
    for label, template in enumerate(templates):
        rates = np.where(template, high_hz, low_hz) / 1000.0  # per-ms probability
        for s in range(samples_per_class):
            hits = rng.random((num_inputs, n_steps)) < rates[:, None]
            trains = [np.flatnonzero(row).astype(float) for row in hits]
            sample = LabeledSpikeSample(input=trains, label=label,
                                        duration=float(duration))
            (train if s < n_train else test).append(sample)
    return train, test
