"""Dense tensors and the operation tape used for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from mcnet.errors import GradientError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "mcnet_active_tape", default=None
)
_RECORDING: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "mcnet_recording", default=True
)
_PATTERN_LOG: contextvars.ContextVar[Optional[list]] = contextvars.ContextVar(
    "mcnet_pattern_log", default=None
)


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it.

    Values are held as-is (no copy).  Activations are 4-D ``(N, C, H, W)``;
    bias vectors and scalar losses are the only other shapes that flow through
    the engine.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    # Maps the output gradient to one gradient (or None) per input.
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op executed inside the block whose inputs
    require gradients appends an entry.  Entries are appended in execution
    order, so the list is already topologically sorted.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, op, inputs, output, backward):
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor):
        backward(loss, self)


def active_tape() -> Optional[Tape]:
    if not _RECORDING.get():
        return None
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_grad():
    """Suspend recording even when a tape is active."""
    token = _RECORDING.set(False)
    try:
        yield
    finally:
        _RECORDING.reset(token)


@contextlib.contextmanager
def pattern_log():
    """Collect the discrete choices (ReLU masks, pooling argmaxes) made by ops.

    Two evaluations with equal logs took the same piecewise-smooth branch, so
    a finite difference between them never straddles a kink.
    """
    log: list = []
    token = _PATTERN_LOG.set(log)
    try:
        yield log
    finally:
        _PATTERN_LOG.reset(token)


def log_pattern(op: str, choice: np.ndarray):
    log = _PATTERN_LOG.get()
    if log is not None:
        log.append((op, choice.tobytes()))


def record(op, inputs, out_data, backward_fn) -> Tensor:
    """Wrap ``out_data`` and put it on the active tape if anything needs grads."""
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape() if needs else None
    out = Tensor(out_data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape):
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    A tensor consumed by several operations receives the sum over paths.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(e.output is loss for e in tape.entries):
        raise GradientError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(e.output) for e in tape.entries}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        entry.output.grad = g
        in_grads = entry.backward(g)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise GradientError(
                    f"{entry.op}: gradient shape {gi.shape} does not match input {t.shape}"
                )
            key = id(t)
            if key in produced:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi


def _zeros(shape, dtype):
    return np.zeros(shape, dtype=dtype)


@dataclass
class LayerParams:
    """Learnable weight and bias of one layer plus its Adam state."""

    weight: Tensor
    bias: Tensor
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        self.weight.requires_grad = True
        self.bias.requires_grad = True
        if self.bias.data.ndim != 1 or self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )
        for slot in ("weight", "bias"):
            arr = getattr(self, slot).data
            self.adam_m.setdefault(slot, _zeros(arr.shape, arr.dtype))
            self.adam_v.setdefault(slot, _zeros(arr.shape, arr.dtype))

    @classmethod
    def he_normal(cls, out_ch, in_ch, kh, kw, rng, dtype=np.float32):
        fan_in = in_ch * kh * kw
        w = rng.standard_normal((out_ch, in_ch, kh, kw)) * np.sqrt(2.0 / fan_in)
        return cls(Tensor(w.astype(dtype)), Tensor(np.zeros(out_ch, dtype=dtype)))

    @property
    def tensors(self):
        return (self.weight, self.bias)

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    def zero_grad(self):
        self.weight.grad = None
        self.bias.grad = None
