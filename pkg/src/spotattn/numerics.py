"""Dense float64 linear algebra with a reverse-mode gradient tape.

Everything the model touches is a 64-bit float matrix: a C-contiguous 2-D
numpy array (layer-norm gains/shifts are the one 1-D exception). numpy
supplies storage and BLAS; the differentiation machinery is local to this
module so that every gradient can be checked against central finite
differences.

A :class:`Tape` is an append-only log of primitive operations. Each op
appends a closure that propagates the output adjoint to its inputs;
``Tape.backward`` zeroes all adjoints, seeds the loss with 1, and replays
the closures in exact reverse order of the forward pass. Ops called with
``tape=None`` compute values only and record nothing, which is what
evaluation and finite-difference probing use.

:class:`Rng` is a splitmix64 stream. Its output is a pure function of
(seed, counter) over uint64 arithmetic, so identical seeds give identical
streams on every platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

from .errors import DegenerateRowError, ProbeError, ShapeError, TapeStateError

Array = np.ndarray


class Tensor:
    """A float64 array plus an adjoint slot filled in by Tape.backward."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class Tape:
    """Ordered record of primitives; backward replays the exact reverse."""

    def __init__(self):
        self._backwards: list[Callable[[], None]] = []
        self._tensors: list[Tensor] = []
        self._seen: set[int] = set()

    def __len__(self) -> int:
        return len(self._backwards)

    def _track(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._seen:
                self._seen.add(id(t))
                self._tensors.append(t)

    def record(self, backward: Callable[[], None], out: Tensor, *inputs: Tensor) -> None:
        self._track(out, *inputs)
        self._backwards.append(backward)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(x) into ``x.grad`` for every taped tensor."""
        if not self._backwards:
            raise TapeStateError("backward called on a tape with no recorded forward pass")
        if id(loss) not in self._seen:
            raise TapeStateError("loss tensor was not produced on this tape")
        if loss.data.shape != ():
            raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
        for t in self._tensors:
            t.grad = np.zeros_like(t.data)
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._backwards):
            fn()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_matrix(x, name: str = "matrix") -> Array:
    """Coerce to a C-contiguous float64 2-D array, the package's matrix type."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# Primitive operations. Each computes forward from .data and, when a tape is
# given, records a closure that accumulates the vector-Jacobian product.
# ---------------------------------------------------------------------------


def matmul(a, b, tape: Tape | None = None) -> Tensor:
    """Matrix product a @ b with gradients da = g bᵀ, db = aᵀ g."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.cols != b.rows:
        raise ShapeError(f"cannot multiply shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data @ b.data)
    if tape is not None:
        a_data, b_data = a.data, b.data

        def backward():
            g = out.grad
            a.grad += g @ b_data.T
            b.grad += a_data.T @ g

        tape.record(backward, out, a, b)
    return out


def transpose(a, tape: Tape | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.T)
    if tape is not None:

        def backward():
            a.grad += out.grad.T

        tape.record(backward, out, a)
    return out


def add(a, b, tape: Tape | None = None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cannot add shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:

        def backward():
            a.grad += out.grad
            b.grad += out.grad

        tape.record(backward, out, a, b)
    return out


def scale(a, c: float, tape: Tape | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * c)
    if tape is not None:

        def backward():
            a.grad += out.grad * c

        tape.record(backward, out, a)
    return out


def concat_rows(a, b, tape: Tape | None = None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.cols:
        raise ShapeError(f"cannot stack shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=0))
    if tape is not None:
        split = a.rows

        def backward():
            a.grad += out.grad[:split]
            b.grad += out.grad[split:]

        tape.record(backward, out, a, b)
    return out


def concat_cols(parts: list, tape: Tape | None = None) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    if tape is not None:
        widths = [p.cols for p in parts]
        offsets = np.cumsum([0] + widths)

        def backward():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                p.grad += out.grad[:, lo:hi]

        tape.record(backward, out, *parts)
    return out


def slice_rows(a, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data[start:stop].copy())
    if tape is not None:

        def backward():
            a.grad[start:stop] += out.grad

        tape.record(backward, out, a)
    return out


def softmax_rows(m, mask: Array | None = None, tape: Tape | None = None) -> Tensor:
    """Row softmax with per-row max subtraction; masked entries are exactly 0.

    ``mask`` is boolean with True marking attendable entries. A row with no
    unmasked entry raises :class:`DegenerateRowError` naming the row.
    """
    m = _as_tensor(m)
    x = m.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match {x.shape}")
        alive = mask.any(axis=1)
        if not alive.all():
            row = int(np.flatnonzero(~alive)[0])
            raise DegenerateRowError(f"row {row} has no unmasked entries")
        shifted = np.where(mask, x, -np.inf)
    else:
        shifted = x
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)  # masked entries: exp(-inf) == 0 exactly
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)
    if tape is not None:

        def backward():
            g = out.grad
            inner = (g * y).sum(axis=1, keepdims=True)
            m.grad += y * (g - inner)  # masked entries stay 0 since y == 0

        tape.record(backward, out, m)
    return out


def layer_norm(x, gain, shift, eps: float = 1e-5, tape: Tape | None = None) -> Tensor:
    """Per-row normalization to mean 0 / biased variance 1, then scale+shift."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.cols
    if gain.data.shape != (d,) or shift.data.shape != (d,):
        raise ShapeError(
            f"gain/shift must have shape ({d},), got {gain.data.shape} and {shift.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + shift.data)
    if tape is not None:

        def backward():
            g = out.grad
            shift.grad += g.sum(axis=0)
            gain.grad += (g * xhat).sum(axis=0)
            gx = g * gain.data
            x.grad += inv * (
                gx
                - gx.mean(axis=1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=1, keepdims=True)
            )

        tape.record(backward, out, x, gain, shift)
    return out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x, tape: Tape | None = None) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)
    if tape is not None:
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI

        def backward():
            x.grad += out.grad * (cdf + x.data * pdf)

        tape.record(backward, out, x)
    return out


def gather_dot(q, keys, idx: Array, tape: Tape | None = None) -> Tensor:
    """Per-row dot products against gathered key rows.

    out[i, j] = q[i] . keys[idx[i, j]]. This is the score kernel for
    neighbor-restricted attention; idx has one row of key indices per query.
    """
    q, keys = _as_tensor(q), _as_tensor(keys)
    if q.cols != keys.cols:
        raise ShapeError(f"feature dims differ: {q.data.shape} vs {keys.data.shape}")
    kg = keys.data[idx]  # (n, k, d)
    out = Tensor(np.einsum("id,ijd->ij", q.data, kg))
    if tape is not None:
        q_data = q.data

        def backward():
            g = out.grad
            q.grad += np.einsum("ij,ijd->id", g, kg)
            np.add.at(keys.grad, idx, g[:, :, None] * q_data[:, None, :])

        tape.record(backward, out, q, keys)
    return out


def gather_mix(weights, values, idx: Array, tape: Tape | None = None) -> Tensor:
    """Weighted combination of gathered value rows.

    out[i] = sum_j weights[i, j] * values[idx[i, j]].
    """
    weights, values = _as_tensor(weights), _as_tensor(values)
    if weights.data.shape != idx.shape:
        raise ShapeError(f"weights shape {weights.data.shape} does not match idx {idx.shape}")
    vg = values.data[idx]  # (n, k, d)
    out = Tensor(np.einsum("ij,ijd->id", weights.data, vg))
    if tape is not None:
        w_data = weights.data

        def backward():
            g = out.grad
            weights.grad += np.einsum("id,ijd->ij", g, vg)
            np.add.at(values.grad, idx, w_data[:, :, None] * g[:, None, :])

        tape.record(backward, out, weights, values)
    return out


def mse_loss(pred, target, tape: Tape | None = None) -> Tensor:
    """Mean over all entries of the squared difference; scalar output."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.data.shape} does not match target {target.shape}")
    diff = pred.data - target
    out = Tensor(np.float64((diff * diff).mean()))
    if tape is not None:
        coeff = 2.0 / diff.size

        def backward():
            pred.grad += out.grad * coeff * diff

        tape.record(backward, out, pred)
    return out


def weighted_sum(a, w, tape: Tape | None = None) -> Tensor:
    """sum(a * w) as a scalar; the standard probe functional for grad checks."""
    a = _as_tensor(a)
    w = np.asarray(w, dtype=np.float64)
    if a.data.shape != w.shape:
        raise ShapeError(f"weight shape {w.shape} does not match {a.data.shape}")
    out = Tensor(np.float64((a.data * w).sum()))
    if tape is not None:

        def backward():
            a.grad += out.grad * w

        tape.record(backward, out, a)
    return out


# ---------------------------------------------------------------------------
# Seeded random numbers.
# ---------------------------------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO53 = float(1 << 53)


class Rng:
    """splitmix64 stream: output i is a bit mix of seed + (i+1)*gamma.

    Counter-based, so a stream is reproducible byte-for-byte from its seed
    on any platform, and blocks can be produced with vectorized uint64 math.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def raw64(self, n: int) -> Array:
        """Next n raw 64-bit outputs, advancing the counter by n."""
        with np.errstate(over="ignore"):
            i = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
            z = self._seed + i * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self._counter += n
        return z

    def uniform(self, n: int) -> Array:
        """n doubles in [0, 1) with 53 random bits each."""
        return (self.raw64(n) >> np.uint64(11)).astype(np.float64) / _TWO53

    def normal(self, n: int, std: float = 1.0) -> Array:
        """n i.i.d. normal(0, std^2) doubles via Box-Muller.

        Consumes raw outputs in pairs; an odd trailing draw is discarded so
        each call's consumption depends only on n.
        """
        if std < 0:
            raise ValueError("std must be non-negative")
        m = (n + 1) // 2
        # u1 in (0, 1] so the log is finite
        u1 = ((self.raw64(m) >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n] * std

    def permutation(self, n: int) -> Array:
        """A uniformly random permutation of range(n), derived by key sort."""
        return np.argsort(self.raw64(n), kind="stable")


def seeded_normal(rng: Rng, rows: int, cols: int, std: float) -> Array:
    """Matrix of i.i.d. normal(0, std^2) entries drawn from the stream."""
    return rng.normal(rows * cols, std).reshape(rows, cols)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.
# ---------------------------------------------------------------------------


@dataclass
class ParamCheck:
    name: str
    max_rel: float
    mean_rel: float


@dataclass
class GradCheckReport:
    per_param: dict[str, ParamCheck] = field(default_factory=dict)
    max_rel: float = 0.0
    mean_rel: float = 0.0
    worst_param: str = ""

    def summary(self) -> str:
        lines = [
            f"{c.name}: max_rel={c.max_rel:.3e} mean_rel={c.mean_rel:.3e}"
            for c in self.per_param.values()
        ]
        lines.append(
            f"overall: max_rel={self.max_rel:.3e} mean_rel={self.mean_rel:.3e}"
            f" (worst: {self.worst_param})"
        )
        return "\n".join(lines)


def finite_diff_check(
    f: Callable[[Tape | None], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of a scalar objective against central differences.

    ``f(tape)`` must rebuild the objective from the live ``params`` tensors;
    it is called once with a fresh tape for the analytic gradients and then
    twice per parameter entry with ``tape=None`` at perturbed points.
    Relative error uses the denominator max(|analytic|, |numeric|, 1e-12).
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")

    tape = Tape()
    loss = f(tape)
    if not np.isfinite(loss.data):
        raise ProbeError("objective is non-finite at the base point")
    tape.backward(loss)
    analytic = {name: t.grad.copy() for name, t in params.items()}

    report = GradCheckReport()
    rel_sum = 0.0
    rel_count = 0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        rels = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(None).data)
            flat[i] = orig - eps
            f_minus = float(f(None).data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise ProbeError(f"objective non-finite probing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = grad_flat[i]
            rels[i] = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        check = ParamCheck(name, float(rels.max()), float(rels.mean()))
        report.per_param[name] = check
        if check.max_rel >= report.max_rel:
            report.max_rel = check.max_rel
            report.worst_param = name
        rel_sum += rels.sum()
        rel_count += rels.size
    report.mean_rel = rel_sum / max(rel_count, 1)
    return report
