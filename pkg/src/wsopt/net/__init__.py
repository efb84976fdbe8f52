"""Minimal tensor/network core: stride-1 convolutions, pooling, dense-block
concatenation, a fully connected head, stable binary cross-entropy, explicit
reverse-mode gradients, Adam, a finite-difference gradient checker, and a
named-tensor checkpoint container.

Everything operates on plain numpy arrays laid out (batch, channel, height,
width), row-major. Training runs in float32 by default; gradient checking
casts to float64.
"""

from . import adam, checkpoint, gradcheck, model, ops  # noqa: F401
