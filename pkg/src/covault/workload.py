"""The bundled demo workload: a tiny deterministic trainer.

Stands in for the heavyweight training jobs the framework is meant to
protect. It fits a logistic-separator by plain gradient descent using a
rational sigmoid (0.5 * (1 + z / (1 + |z|))), so the arithmetic is just
IEEE add/mul/div and the output bytes are bit-reproducible for fixed
inputs on any platform.

Model file format: b"CVM1" | u32 BE feature count | big-endian float64
weights | big-endian float64 bias.
"""

from __future__ import annotations

import struct

MODEL_MAGIC = b"CVM1"


class WorkloadError(Exception):
    pass


def parse_dataset(csv_text: str) -> list[tuple[list[float], float]]:
    """Rows of "f1,f2,...,label"; blank lines and #-comments are skipped."""
    rows: list[tuple[list[float], float]] = []
    for line in csv_text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) < 2:
            raise WorkloadError(f"bad dataset row {line!r}")
        *features, label = fields
        rows.append(([float(x) for x in features], float(label)))
    if not rows:
        raise WorkloadError("empty dataset")
    widths = {len(f) for f, _ in rows}
    if len(widths) != 1:
        raise WorkloadError("inconsistent feature count")
    return rows


def _sigmoid(z: float) -> float:
    return 0.5 * (1.0 + z / (1.0 + abs(z)))


def run_training(params: dict, csv_text: str) -> bytes:
    """Deterministic model bytes for fixed params and dataset."""
    rows = parse_dataset(csv_text)
    n_features = len(rows[0][0])
    learning_rate = float(params.get("learning_rate", 0.1))
    epochs = int(params.get("epochs", 50))
    weights = [0.0] * n_features
    bias = 0.0
    n = float(len(rows))
    for _ in range(epochs):
        grad_w = [0.0] * n_features
        grad_b = 0.0
        for features, label in rows:
            z = bias
            for w, x in zip(weights, features):
                z += w * x
            delta = _sigmoid(z) - label
            for i, x in enumerate(features):
                grad_w[i] += delta * x
            grad_b += delta
        for i in range(n_features):
            weights[i] -= learning_rate * grad_w[i] / n
        bias -= learning_rate * grad_b / n
    return serialize_model(weights, bias)


def serialize_model(weights: list[float], bias: float) -> bytes:
    out = [MODEL_MAGIC, struct.pack(">I", len(weights))]
    for value in [*weights, bias]:
        out.append(struct.pack(">d", value))
    return b"".join(out)


def deserialize_model(data: bytes) -> tuple[list[float], float]:
    if not data.startswith(MODEL_MAGIC):
        raise WorkloadError("bad model magic")
    (count,) = struct.unpack_from(">I", data, len(MODEL_MAGIC))
    values = struct.unpack_from(f">{count + 1}d", data, len(MODEL_MAGIC) + 4)
    return list(values[:-1]), values[-1]


def predict(weights: list[float], bias: float, features: list[float]) -> float:
    z = bias
    for w, x in zip(weights, features):
        z += w * x
    return _sigmoid(z)
