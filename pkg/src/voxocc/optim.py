"""AdamW with decoupled weight decay.

Decay multiplies the parameter by (1 - lr*wd) before the Adam update, so a
parameter with zero gradient still shrinks. Moment buffers are keyed by
parameter identity and stored in float32 alongside the parameters.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericError
from .tensor import Tensor


class AdamW:
    def __init__(self, params, lr: float = 2e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: list[Tensor] = list(params)
        if not self.params:
            raise ContractViolation("AdamW: empty parameter list")
        for p in self.params:
            if not p.requires_grad:
                raise ContractViolation(
                    f"AdamW: parameter {p.name or p.shape} has "
                    "requires_grad=False")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ContractViolation(f"AdamW: bad betas {betas}")
        if lr < 0 or eps <= 0 or weight_decay < 0:
            raise ContractViolation("AdamW: bad hyperparameters")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        """One update. Parameters with no gradient only experience decay."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            p.data *= 1.0 - self.lr * self.weight_decay
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractViolation(
                    f"AdamW: gradient shape {g.shape} vs param {p.data.shape}")
            if not np.isfinite(g).all():
                raise NumericError("adamw", f"gradient of {p.name or 'param'}")
            g = g.astype(p.data.dtype, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_tensors(self):
        """Moment buffers and step count for checkpointing."""
        out = {"adamw.t": np.asarray([float(self.t)], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self._m, self._v)):
            out[f"adamw.m.{i:04d}"] = m
            out[f"adamw.v.{i:04d}"] = v
        return out

    def load_state_tensors(self, blobs: dict):
        self.t = int(round(float(blobs["adamw.t"][0])))
        for i in range(len(self.params)):
            m = blobs[f"adamw.m.{i:04d}"]
            v = blobs[f"adamw.v.{i:04d}"]
            if m.shape != self._m[i].shape or v.shape != self._v[i].shape:
                raise ContractViolation("AdamW: checkpoint moment shape "
                                        "mismatch")
            self._m[i][...] = m
            self._v[i][...] = v
