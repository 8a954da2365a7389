"""Model zoo on top of the tape core.

Four architectures: linear (affine only), slp (affine then ReLU, same
parameter count as linear), mlp (two hidden ReLU layers of 100), and a small
two-conv cnn. Parameters initialize uniform in +-1/sqrt(fan_in) from a
seeded stream. Models expose a flat-vector view so the FL and SA layers can
treat the whole parameter set as one float64 vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core
from .nn_core import Tape, Tensor
from .data_io import Dataset

__all__ = ["ModelSpec", "Model", "FlatParams", "build", "flatten", "unflatten", "evaluate"]

ARCHS = ("linear", "slp", "mlp", "cnn")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple[int, ...]
    class_count: int = 10
    hidden: tuple[int, ...] = (100, 100)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}, expected one of {ARCHS}")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.arch == "cnn" and len(self.input_shape) != 3:
            raise ValueError(f"cnn needs (channels, h, w) input, got {self.input_shape}")
        if self.arch == "mlp" and len(self.hidden) != 2:
            raise ValueError(f"mlp needs exactly two hidden sizes, got {self.hidden}")

    @property
    def flat_input(self) -> int:
        return int(np.prod(self.input_shape))


@dataclass(frozen=True)
class FlatParams:
    """One float64 vector plus the (name, offset, shape) layout to rebuild it."""

    values: np.ndarray
    layout: tuple[tuple[str, int, tuple[int, ...]], ...]


class Model:
    """Parameter tensors plus a forward pass that records on a caller tape."""

    def __init__(self, spec: ModelSpec, params: list[tuple[str, Tensor]]):
        self.spec = spec
        self.params = params

    @property
    def d(self) -> int:
        return sum(t.size for _, t in self.params)

    def param(self, name: str) -> Tensor:
        for n, t in self.params:
            if n == name:
                return t
        raise KeyError(name)

    def logits(self, tape: Tape, images: Tensor) -> Tensor:
        """Forward pass. images is a Tensor so input gradients flow back to it:
        [n, *input_shape] for cnn, [n, flat] or [n, *input_shape] otherwise."""
        spec = self.spec
        x = images
        if spec.arch != "cnn" and x.data.ndim != 2:
            x = Tensor(x.data.reshape(len(x.data), -1))
            # reshape is a fixed bijection; route gradients through it
            inner, outer = images, x

            def backward():
                if outer.grad is not None:
                    inner.accumulate(outer.grad.reshape(inner.data.shape))

            tape.record(backward)
        if spec.arch == "linear":
            return nn_core.affine(tape, x, self.param("w0"), self.param("b0"))
        if spec.arch == "slp":
            return nn_core.relu(tape, nn_core.affine(tape, x, self.param("w0"), self.param("b0")))
        if spec.arch == "mlp":
            h = nn_core.relu(tape, nn_core.affine(tape, x, self.param("w0"), self.param("b0")))
            h = nn_core.relu(tape, nn_core.affine(tape, h, self.param("w1"), self.param("b1")))
            return nn_core.affine(tape, h, self.param("w2"), self.param("b2"))
        # cnn
        if x.data.ndim != 4:
            raise nn_core.ShapeError(f"cnn input must be [n, c, h, w], got {x.shape}")
        h = nn_core.relu(tape, nn_core.conv2d(tape, x, self.param("k0"), self.param("c0"), stride=2))
        h = nn_core.relu(tape, nn_core.conv2d(tape, h, self.param("k1"), self.param("c1"), stride=2))
        flat = Tensor(h.data.reshape(len(h.data), -1))
        inner = h

        def backward():
            if flat.grad is not None:
                inner.accumulate(flat.grad.reshape(inner.data.shape))

        tape.record(backward)
        return nn_core.affine(tape, flat, self.param("w0"), self.param("b0"))

    def prep_images(self, images: np.ndarray) -> np.ndarray:
        """Reshape a raw image batch to what logits() expects for this arch."""
        if self.spec.arch == "cnn":
            return images.reshape((len(images),) + tuple(self.spec.input_shape))
        return images.reshape(len(images), -1)

    # -- flat-vector training interface -------------------------------------

    def set_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.d,):
            raise ValueError(f"flat vector length {values.shape}, expected ({self.d},)")
        offset = 0
        for _, t in self.params:
            t.data = values[offset:offset + t.size].reshape(t.data.shape).copy()
            offset += t.size

    def loss_grad(self, flat: np.ndarray, images: np.ndarray, labels: np.ndarray,
                  extra_grad: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        """Mean cross-entropy loss and its flat gradient at the given point.

        extra_grad, when given, is added to the returned gradient (the
        proximal term hook)."""
        self.set_flat(flat)
        tape = Tape()
        for _, t in self.params:
            t.zero_grad()
        logits = self.logits(tape, Tensor(images))
        loss, dlogits = nn_core.softmax_xent(tape, logits, labels)
        tape.backward([(logits, dlogits)])
        grad = np.concatenate([
            (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
            for _, t in self.params
        ])
        if extra_grad is not None:
            grad = grad + extra_grad
        return loss, grad

    def predict(self, flat: np.ndarray, images: np.ndarray, batch: int = 512) -> np.ndarray:
        self.set_flat(flat)
        out = []
        for lo in range(0, len(images), batch):
            tape = Tape()
            logits = self.logits(tape, Tensor(images[lo:lo + batch]))
            out.append(logits.data.argmax(axis=1))
        return np.concatenate(out) if out else np.array([], dtype=np.int64)


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Instantiate a model with seeded uniform +-1/sqrt(fan_in) parameters."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
    params: list[tuple[str, Tensor]] = []

    def add(name: str, shape: tuple[int, ...], fan_in: int):
        params.append((name, Tensor(_uniform_init(rng, shape, fan_in), name=name)))

    din, c = spec.flat_input, spec.class_count
    if spec.arch in ("linear", "slp"):
        add("w0", (din, c), din)
        add("b0", (c,), din)
    elif spec.arch == "mlp":
        h1, h2 = spec.hidden
        add("w0", (din, h1), din)
        add("b0", (h1,), din)
        add("w1", (h1, h2), h1)
        add("b1", (h2,), h1)
        add("w2", (h2, c), h2)
        add("b2", (c,), h2)
    else:
        cin, h, w = spec.input_shape
        add("k0", (8, cin, 5, 5), cin * 25)
        add("c0", (8,), cin * 25)
        oh1 = (h - 5) // 2 + 1
        ow1 = (w - 5) // 2 + 1
        add("k1", (16, 8, 5, 5), 8 * 25)
        add("c1", (16,), 8 * 25)
        oh2 = (oh1 - 5) // 2 + 1
        ow2 = (ow1 - 5) // 2 + 1
        if oh2 < 1 or ow2 < 1:
            raise ValueError(f"input {spec.input_shape} too small for the cnn stack")
        flat = 16 * oh2 * ow2
        add("w0", (flat, c), flat)
        add("b0", (c,), flat)
    return Model(spec, params)


def flatten(model: Model) -> FlatParams:
    layout = []
    chunks = []
    offset = 0
    for name, t in model.params:
        layout.append((name, offset, t.data.shape))
        chunks.append(t.data.reshape(-1))
        offset += t.size
    return FlatParams(np.concatenate(chunks), tuple(layout))


def unflatten(model: Model, flat: FlatParams | np.ndarray) -> None:
    values = flat.values if isinstance(flat, FlatParams) else flat
    model.set_flat(values)


def evaluate(model: Model, flat: np.ndarray, dataset: Dataset, batch: int = 512) -> float:
    """Classification accuracy of the flat parameter vector on the dataset."""
    pred = model.predict(flat, model.prep_images(dataset.images), batch=batch)
    return float((pred == dataset.labels).mean()) if len(pred) else 0.0
