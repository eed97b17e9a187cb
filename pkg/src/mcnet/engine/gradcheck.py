"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mcnet.engine.tensor import Tape, Tensor, no_grad, pattern_log


@dataclass
class GradSample:
    tensor_name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    samples: list = field(default_factory=list)
    tol: float = 1e-4
    h: float = 1e-5
    skipped_kinks: int = 0

    @property
    def max_rel_error(self) -> float:
        return max((s.rel_error for s in self.samples), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.samples) and self.max_rel_error <= self.tol

    @property
    def worst(self):
        return max(self.samples, key=lambda s: s.rel_error, default=None)

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: {len(self.samples)} samples, max relative error "
                f"{self.max_rel_error:.3e} (tol {self.tol:g}, h {self.h:g}, "
                f"{self.skipped_kinks} kink-straddling draws skipped)")


def relative_error(a: float, b: float, floor: float = 1e-7) -> float:
    """|a - b| scaled by the larger magnitude; ``floor`` keeps pairs of
    near-zero gradients from blowing up on roundoff alone."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def _candidates(tensors, rng):
    """One random entry per tensor first (coverage), then uniform over all scalars."""
    for ti, (_, t) in enumerate(tensors):
        yield ti, int(rng.integers(t.size))
    sizes = np.array([t.size for _, t in tensors])
    offsets = np.cumsum(sizes)
    while True:
        f = int(rng.integers(offsets[-1]))
        ti = int(np.searchsorted(offsets, f, side="right"))
        yield ti, f - (int(offsets[ti - 1]) if ti else 0)


def grad_check(build, n_samples=20, h=1e-5, tol=1e-4, seed=0, skip_kinks=True,
               max_draws=None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``build()`` must return ``(loss_fn, tensors)``: ``loss_fn()`` evaluates the
    scalar loss as a :class:`Tensor` and is deterministic; ``tensors`` is a
    list of ``(name, Tensor)`` whose entries are sampled.

    With ``skip_kinks`` a draw is discarded (and counted) when the ReLU masks
    or pooling argmaxes at ``w + h`` or ``w - h`` differ from those at ``w``:
    such a difference quotient straddles a non-differentiable point.
    """
    loss_fn, tensors = build()
    tensors = list(tensors)
    for _, t in tensors:
        t.grad = None
    with Tape() as tape, pattern_log() as base_pattern:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {id(t): (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for _, t in tensors}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, h=h)
    max_draws = max_draws or 20 * n_samples + len(tensors)
    seen = set()
    for draw, (ti, flat) in enumerate(_candidates(tensors, rng)):
        if len(report.samples) >= n_samples or draw >= max_draws:
            break
        if (ti, flat) in seen:
            continue
        seen.add((ti, flat))
        name, t = tensors[ti]
        idx = np.unravel_index(flat, t.shape)
        orig = t.data[idx].copy()
        with no_grad():
            t.data[idx] = orig + h
            with pattern_log() as plus_pattern:
                f_plus = _value(loss_fn())
            t.data[idx] = orig - h
            with pattern_log() as minus_pattern:
                f_minus = _value(loss_fn())
        t.data[idx] = orig
        if skip_kinks and not (plus_pattern == base_pattern == minus_pattern):
            report.skipped_kinks += 1
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        a = float(analytic[id(t)][idx])
        report.samples.append(GradSample(name, tuple(int(i) for i in idx), a, numeric,
                                         relative_error(a, numeric)))
    return report


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)
