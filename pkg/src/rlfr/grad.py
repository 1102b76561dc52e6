"""A small define-by-run reverse-mode autodiff engine over float64 numpy arrays.

A :class:`Tape` records every op whose inputs require gradients.  Calling
:meth:`Tape.backward` walks the record in reverse and *adds* the result into
the ``grad`` buffer of each leaf, so gradients from several tapes accumulate
until :meth:`Tensor.zero_grad` is called.  A tape can be backpropagated once;
a second call raises :class:`GradError`.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

DEBUG = os.environ.get("RLFR_DEBUG", "") not in ("", "0")


class GradError(RuntimeError):
    """Contract violation inside the autodiff engine."""


class NonFiniteGradient(GradError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def _check_finite(out: np.ndarray, op: str) -> None:
    if DEBUG and not np.all(np.isfinite(out)):
        raise GradError(f"{op} produced non-finite values")


class Tape:
    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def _make(self, value: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
        _check_finite(value, op)
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(value, requires_grad=needs)
        if needs:
            self._nodes.append((out, inputs, backward))
            self._outputs.add(id(out))
        return out

    # -- forward ops -------------------------------------------------------

    def affine(self, x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
        """``x @ W + b`` over the last axis of ``x``."""
        if x.shape[-1] != W.shape[0] or W.data.ndim != 2:
            raise GradError(f"affine: x {x.shape} incompatible with W {W.shape}")
        if b is not None and b.shape != (W.shape[1],):
            raise GradError(f"affine: bias {b.shape} does not match W {W.shape}")
        out = x.data @ W.data
        if b is not None:
            out = out + b.data
        inputs = (x, W) if b is None else (x, W, b)

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            grads = [g @ W.data.T, x2.T @ g2]
            if b is not None:
                grads.append(g2.sum(axis=0))
            return grads

        return self._make(out, inputs, backward, "affine")

    def embed(self, ids: np.ndarray, E: Tensor) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
            raise GradError(f"embed: id out of range for table with {E.shape[0]} rows")

        def backward(g):
            gE = np.zeros_like(E.data)
            np.add.at(gE, ids.reshape(-1), g.reshape(-1, E.shape[1]))
            return [gE]

        return self._make(E.data[ids], (E,), backward, "embed")

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise GradError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return self._make(a.data + b.data, (a, b), lambda g: [g, g], "add")

    def tanh(self, x: Tensor) -> Tensor:
        t = np.tanh(x.data)
        return self._make(t, (x,), lambda g: [g * (1.0 - t * t)], "tanh")

    def softmax_rows(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Softmax over the last axis; entries where ``mask`` is False get probability 0."""
        z = x.data
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
            if not mask.any(axis=-1).all():
                raise GradError("softmax_rows: a row is fully masked")
            z = np.where(mask, z, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            return [p * (g - (g * p).sum(axis=-1, keepdims=True))]

        return self._make(p, (x,), backward, "softmax_rows")

    def log_softmax_rows(self, x: Tensor) -> Tensor:
        z = x.data - x.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse

        def backward(g):
            return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]

        return self._make(out, (x,), backward, "log_softmax_rows")

    def gather_rows(self, x: Tensor, idx: np.ndarray) -> Tensor:
        """Pick ``x[..., idx[...]]`` along the last axis."""
        idx = np.asarray(idx)
        if idx.shape != x.shape[:-1]:
            raise GradError(f"gather_rows: index shape {idx.shape} vs rows {x.shape[:-1]}")
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
            raise GradError("gather_rows: index out of range")
        out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

        def backward(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
            return [gx]

        return self._make(out, (x,), backward, "gather_rows")

    def take(self, x: Tensor, index: tuple[np.ndarray, ...]) -> Tensor:
        """Fancy-index ``x[index]``; repeated entries accumulate gradient."""

        def backward(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, index, g)
            return [gx]

        return self._make(x.data[index], (x,), backward, "take")

    def bmm(self, a: Tensor, b: Tensor, transpose_b: bool = False, scale: float = 1.0) -> Tensor:
        """Batched matrix product ``scale * a @ b`` (or ``a @ b^T``) over 3-d tensors."""
        if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]:
            raise GradError(f"bmm: expected matching 3-d tensors, got {a.shape} and {b.shape}")
        bd = b.data.transpose(0, 2, 1) if transpose_b else b.data
        if a.shape[2] != bd.shape[1]:
            raise GradError(f"bmm: inner dimensions differ ({a.shape} x {bd.shape})")
        out = scale * (a.data @ bd)

        def backward(g):
            ga = scale * (g @ bd.transpose(0, 2, 1))
            gbd = scale * (a.data.transpose(0, 2, 1) @ g)
            return [ga, gbd.transpose(0, 2, 1) if transpose_b else gbd]

        return self._make(out, (a, b), backward, "bmm")

    def sum(self, x: Tensor) -> Tensor:
        return self._make(np.asarray(x.data.sum()), (x,), lambda g: [np.full_like(x.data, g)], "sum")

    def scale_add(self, acc: Tensor | None, c, x: Tensor) -> Tensor:
        """``acc + c * x`` for a constant ``c`` (scalar or array of ``x``'s shape)."""
        c = np.asarray(c, dtype=np.float64)
        if c.ndim and c.shape != x.shape:
            raise GradError(f"scale_add: weight shape {c.shape} vs {x.shape}")
        if acc is None:
            return self._make(c * x.data, (x,), lambda g: [c * g], "scale_add")
        if acc.shape != x.shape:
            raise GradError(f"scale_add: shape mismatch {acc.shape} vs {x.shape}")
        return self._make(acc.data + c * x.data, (acc, x), lambda g: [g, c * g], "scale_add")

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != ():
            raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise GradError("loss was not produced on this tape (detached graph)")
        if self._consumed:
            raise GradError("backward already called on this tape")
        self._consumed = True
        loss.grad += 1.0
        for out, inputs, fn in reversed(self._nodes):
            if not out.grad.any():
                continue
            for t, g in zip(inputs, fn(out.grad)):
                if t.requires_grad:
                    t.grad += g
        self._nodes.clear()


class SGD:
    """Plain gradient descent (or ascent) with optional global-norm clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float, max_norm: float | None = 1.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.max_norm = max_norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params)))

    def step(self, ascent: bool = False) -> float:
        """Apply one update and return the pre-clipping gradient norm.

        Parameters are left untouched if any gradient is non-finite.
        """
        norm = self.grad_norm()
        if not np.isfinite(norm):
            raise NonFiniteGradient("non-finite gradient; update skipped")
        scale = self.lr
        if self.max_norm is not None and norm > self.max_norm:
            scale *= self.max_norm / norm
        sign = 1.0 if ascent else -1.0
        for p in self.params:
            p.data += sign * scale * p.grad
        return norm
