"""Query interface to the classifier being explained.

Two kinds are supported: a built-in MLP classifier and an external process
reached through request/response files, so any model that can read a file
of float32 rows can be explained.

External protocol: the request file is a 16-byte header (``b"XBB1"``, row
count N as little-endian uint32, pixel count n as little-endian uint32, four
zero bytes) followed by N*n little-endian float32 values, row-major. The
command writes N little-endian int32 labels to the response path.
"""
from __future__ import annotations

import shlex
import struct
import subprocess
import sys
import tempfile
import threading
from pathlib import Path

import numpy as np

from .errors import OracleError, ShapeError
from .nncore import Mlp, TrainConfig, fit

_REQ_MAGIC = b"XBB1"


class BlackBox:
    n: int
    num_classes: int

    def _check(self, batch) -> np.ndarray:
        arr = np.asarray(batch, dtype=np.float64)
        if arr.ndim == 1 and arr.size == 0:
            arr = arr.reshape(0, self.n)
        if arr.ndim != 2 or arr.shape[1] != self.n:
            raise ShapeError(f"black box expects images with {self.n} pixels, got shape {arr.shape}")
        return arr

    def classify(self, batch) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, batch) -> np.ndarray:
        return self.classify(batch)

    def classify_one(self, image) -> int:
        return int(self.classify(np.asarray(image, dtype=np.float64)[None, :])[0])


class BuiltinBlackBox(BlackBox):
    """Softmax MLP; the label is the argmax, ties going to the lowest index."""

    def __init__(self, net: Mlp):
        if net.layers[-1].activation != "softmax":
            raise ValueError("built-in classifier needs a softmax output layer")
        self.net = net
        self.n = net.in_dim
        self.num_classes = net.out_dim
        self.report: dict = {}

    def predict_proba(self, batch) -> np.ndarray:
        return self.net.forward(self._check(batch))

    def classify(self, batch) -> np.ndarray:
        arr = self._check(batch)
        if len(arr) == 0:
            return np.zeros(0, dtype=np.int64)
        # np.argmax returns the first maximum
        return np.argmax(self.net.forward(arr), axis=1).astype(np.int64)

    def save(self, path) -> None:
        self.net.save(path)

    @classmethod
    def load(cls, path) -> "BuiltinBlackBox":
        return cls(Mlp.load(path))


class ExternalBlackBox(BlackBox):
    """Runs ``command`` once per batch; ``{req}`` and ``{resp}`` are replaced by file paths."""

    def __init__(self, command: str, n: int, num_classes: int, timeout: float | None = 600.0):
        if "{req}" not in command or "{resp}" not in command:
            raise ValueError("command template needs {req} and {resp} placeholders")
        self.command = command
        self.n = n
        self.num_classes = num_classes
        self.timeout = timeout
        self._lock = threading.Lock()

    def classify(self, batch) -> np.ndarray:
        arr = self._check(batch)
        if len(arr) == 0:
            return np.zeros(0, dtype=np.int64)
        with self._lock, tempfile.TemporaryDirectory(prefix="xbb-") as tmp:
            req, resp = Path(tmp) / "request.bin", Path(tmp) / "response.bin"
            write_request(req, arr)
            argv = [
                part.replace("{req}", str(req)).replace("{resp}", str(resp))
                for part in shlex.split(self.command)
            ]
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise OracleError(f"could not run oracle: {exc}", stage="classify", command=argv) from exc
            if proc.returncode != 0:
                raise OracleError(
                    f"oracle exited with status {proc.returncode}",
                    stage="classify",
                    command=argv,
                    stderr=proc.stderr.decode(errors="replace")[-2000:],
                )
            if not resp.exists():
                raise OracleError("oracle wrote no response file", stage="classify", command=argv)
            labels = read_response(resp, expected=len(arr))
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise OracleError(
                f"oracle returned labels outside [0, {self.num_classes})", stage="classify",
                bad=sorted(set(labels[(labels < 0) | (labels >= self.num_classes)].tolist()))[:10],
            )
        return labels


# -- wire format ---------------------------------------------------------------


def encode_request(batch) -> bytes:
    arr = np.asarray(batch, dtype="<f4")
    rows, n = arr.shape
    return _REQ_MAGIC + struct.pack("<II", rows, n) + b"\0" * 4 + arr.tobytes()


def decode_request(raw: bytes) -> np.ndarray:
    if len(raw) < 16 or raw[:4] != _REQ_MAGIC:
        raise OracleError("malformed request header")
    rows, n = struct.unpack("<II", raw[4:12])
    if len(raw) != 16 + 4 * rows * n:
        raise OracleError(f"request body should hold {rows}x{n} float32 values")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, n)


def write_request(path, batch) -> None:
    Path(path).write_bytes(encode_request(batch))


def read_request(path) -> np.ndarray:
    return decode_request(Path(path).read_bytes())


def write_response(path, labels) -> None:
    Path(path).write_bytes(np.asarray(labels, dtype="<i4").tobytes())


def read_response(path, expected: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise OracleError(f"response length {len(raw)} is not a multiple of 4")
    labels = np.frombuffer(raw, dtype="<i4").astype(np.int64)
    if expected is not None and len(labels) != expected:
        raise OracleError(f"expected {expected} labels, oracle returned {len(labels)}")
    return labels


# -- training --------------------------------------------------------------------


def accuracy(bb: BlackBox, images, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(bb.classify(images) == labels))


def train_builtin(
    images,
    labels,
    hidden=(128, 64),
    cfg: TrainConfig | None = None,
    num_classes: int | None = None,
    test: tuple | None = None,
) -> BuiltinBlackBox:
    """Train a softmax MLP classifier; accuracies land in ``bb.report``."""
    cfg = cfg or TrainConfig(learning_rate=1e-3, epochs=15, batch_size=64)
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(num_classes or labels.max() + 1)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    sizes = [images.shape[1], *hidden, num_classes]
    net = Mlp.build(sizes, ["relu"] * len(hidden) + ["softmax"], seed=cfg.seed)
    onehot = np.eye(num_classes)[labels]
    history = fit(net, images, onehot, "cross_entropy", cfg)
    bb = BuiltinBlackBox(net)
    bb.report = {"train_loss": history, "train_accuracy": accuracy(bb, images, labels)}
    if test is not None:
        bb.report["test_accuracy"] = accuracy(bb, *test)
    return bb


def serve(model_path, req, resp) -> None:
    """Answer one request file with a saved built-in model (external-oracle adapter)."""
    bb = BuiltinBlackBox.load(model_path)
    write_response(resp, bb.classify(read_request(req).astype(np.float64)))


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit("usage: python -m latexplain.blackbox MODEL.mlp REQUEST RESPONSE")
    serve(*sys.argv[1:])
