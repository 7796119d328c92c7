"""Minimal reverse-mode autodiff on numpy arrays.

A Tape records every op executed while it is active (define-by-run). Each
node keeps the input tensors, the output tensor and a backward closure that
maps the output gradient to per-input gradients. Tape.backward walks the
records in reverse execution order, which is already a valid topological
order, accumulating gradients by tensor identity.

Tensors default to float32 and C-contiguous storage. The engine itself is
dtype-generic; the float64 path exists for the finite-difference oracles.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, GradientError, NumericError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False,
                 dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype == np.float64:
            arr = arr.astype(np.float32)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
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

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.dtype)

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype.name}, " \
               f"requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "out_id", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], out_id: int,
                 backward: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.out_id = out_id
        self.backward = backward


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records ops while active; replays them in reverse for gradients."""

    def __init__(self):
        self.nodes: list[_Node] = []
        # id -> tensor, keeps every recorded tensor alive for the walk
        self._tensors: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable):
        output.requires_grad = True
        self.nodes.append(_Node(op, inputs, id(output), backward))
        self._tensors[id(output)] = output
        for t in inputs:
            self._tensors[id(t)] = t

    def backward(self, loss: Tensor):
        """Populate .grad on every recorded tensor that requires_grad."""
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise GradientError("backward on an empty tape")
        if id(loss) not in self._tensors or not loss.requires_grad:
            raise GradientError(
                "loss tensor was not produced on this tape (detached graph)")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue  # this output never reached the loss
            gins = node.backward(g)
            if not isinstance(gins, tuple):
                gins = (gins,)
            if len(gins) != len(node.inputs):
                raise GradientError(
                    f"op '{node.op}' returned {len(gins)} gradients for "
                    f"{len(node.inputs)} inputs")
            out_t = self._tensors[node.out_id]
            if out_t.requires_grad:
                out_t.grad = g if out_t.grad is None else out_t.grad + g
            for t, gi in zip(node.inputs, gins):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise GradientError(
                        f"op '{node.op}' produced gradient shape {gi.shape} "
                        f"for input shape {t.data.shape}")
                if not np.isfinite(gi).all():
                    raise NumericError(node.op, "gradient")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # flush gradients that stopped at leaves
        for key, g in grads.items():
            t = self._tensors.get(key)
            if t is not None and t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def current_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward: Callable) -> Tensor:
    """Shared entry point for ops: finiteness check, wrap, maybe record."""
    if not np.isfinite(out_data).all():
        raise NumericError(op)
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward)
    return out


def as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))
