"""Simulated per-tensor symmetric quantization with straight-through gradients.

Three quantizer flavors share one fake-quantize kernel:
  FIXED - constant step size
  LSQ   - learnable step size with the scaled step gradient
  TQT   - learnable real exponent, effective step snapped to a power of two
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .autodiff import Tensor


class QuantMode(Enum):
    FIXED = "FIXED"
    LSQ = "LSQ"
    TQT = "TQT"


def int_range(bits: int, signed: bool) -> tuple[int, int]:
    if bits < 2:
        raise ValueError("bit width must be >= 2")
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


MIN_STEP = 1e-9


@dataclass
class QuantParams:
    bits: int
    signed: bool
    mode: QuantMode = QuantMode.FIXED
    # learnable scalar: the step itself for FIXED/LSQ, the exponent for TQT
    param: Tensor = field(default_factory=lambda: Tensor(1.0, requires_grad=True))
    initialized: bool = False

    def __post_init__(self):
        self.n_min, self.n_max = int_range(self.bits, self.signed)
        if self.mode == QuantMode.FIXED:
            self.param.requires_grad = False

    def step_value(self) -> float:
        """Current effective step size as a float."""
        if self.mode == QuantMode.TQT:
            return 2.0 ** float(np.rint(self.param.values))
        return float(self.param.values)

    def set_step(self, s: float):
        if s <= 0:
            raise ValueError("step must be positive")
        if self.mode == QuantMode.TQT:
            self.param.values = np.asarray(math.log2(s), dtype=np.float64)
        else:
            self.param.values = np.asarray(s, dtype=np.float64)
        self.initialized = True

    def clamp_step(self):
        """Keep the step strictly positive after an optimizer update."""
        if self.mode != QuantMode.TQT:
            self.param.values = np.maximum(self.param.values, MIN_STEP)


def init_step(v: np.ndarray, qp: QuantParams) -> float:
    """LSQ-style step initialization from tensor statistics."""
    mean_abs = float(np.mean(np.abs(v)))
    if mean_abs == 0.0:
        s0 = 1.0
    else:
        s0 = 2.0 * mean_abs / math.sqrt(qp.n_max)
    qp.set_step(s0)
    return s0


def tqt_pot_step(qp: QuantParams) -> float:
    """Effective power-of-two step for a TQT quantizer."""
    if qp.mode != QuantMode.TQT:
        raise ValueError("tqt_pot_step requires TQT mode")
    return 2.0 ** float(np.rint(qp.param.values))


def fake_quantize(v: Tensor, qp: QuantParams) -> Tensor:
    """Quantize-then-dequantize in float: s * clip(round(v/s), n_min, n_max).

    Rounding is half-to-even. The backward rule is the clipped STE for v;
    for LSQ the step receives the scaled step gradient, for TQT the exponent
    receives it through d(2^theta)/d(theta) with the round treated as identity.
    """
    n_min, n_max = qp.n_min, qp.n_max
    s = qp.step_value()
    if s <= 0:
        raise ValueError("fake_quantize requires a positive step")
    x = v.values
    scaled = x / s
    vbar = np.clip(np.rint(scaled), n_min, n_max)
    out_vals = s * vbar
    param = qp.param
    mode = qp.mode

    if not (v.requires_grad or param.requires_grad):
        return Tensor(out_vals)

    in_range = (scaled >= n_min) & (scaled <= n_max)
    below = scaled < n_min

    def backward(g):
        gv = g * in_range if v.requires_grad else None
        gp = None
        if param.requires_grad and mode != QuantMode.FIXED:
            d = np.where(in_range, vbar - scaled, np.where(below, float(n_min), float(n_max)))
            gscale = 1.0 / math.sqrt(x.size * n_max)
            gs = float(np.sum(g * d) * gscale)
            if mode == QuantMode.TQT:
                gs = gs * s * math.log(2.0)
            gp = np.asarray(gs, dtype=np.float64).reshape(param.values.shape)
        return (gv, gp)

    from .autodiff import GraphNode
    return Tensor(out_vals, node=GraphNode("fake_quantize", (v, param), backward))


def ste_backward(upstream: np.ndarray, v: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Clipped straight-through gradient: pass upstream where v/s is in range."""
    scaled = v / qp.step_value()
    in_range = (scaled >= qp.n_min) & (scaled <= qp.n_max)
    return upstream * in_range


def lsq_step_gradient(upstream: np.ndarray, v: np.ndarray, qp: QuantParams) -> float:
    """Standalone step gradient, exposed for testing against the fused kernel."""
    s = qp.step_value()
    scaled = v / s
    vbar = np.clip(np.rint(scaled), qp.n_min, qp.n_max)
    in_range = (scaled >= qp.n_min) & (scaled <= qp.n_max)
    below = scaled < qp.n_min
    d = np.where(in_range, vbar - scaled, np.where(below, float(qp.n_min), float(qp.n_max)))
    gscale = 1.0 / math.sqrt(v.size * qp.n_max)
    return float(np.sum(upstream * d) * gscale)


FULL_PRECISION_BITS = 32


@dataclass
class BitPolicy:
    """Network-wide bit assignment: a global width plus per-layer overrides.

    Width 32 means full precision (no fake quantization anywhere). For
    quantized widths the first layer and the head output layers are pinned
    to 8 bits by the harness when it builds the override map.
    """
    global_bits: int
    overrides: dict[str, int] = field(default_factory=dict)
    mode: QuantMode = QuantMode.LSQ

    def bits_for(self, layer_name: str) -> int:
        return self.overrides.get(layer_name, self.global_bits)

    def to_dict(self) -> dict:
        return {"global_bits": self.global_bits,
                "overrides": dict(self.overrides),
                "mode": self.mode.value}

    @classmethod
    def from_dict(cls, d: dict) -> "BitPolicy":
        return cls(global_bits=int(d["global_bits"]),
                   overrides={k: int(v) for k, v in d.get("overrides", {}).items()},
                   mode=QuantMode(d.get("mode", "LSQ")))


class QuantizedConv:
    """Wraps a conv layer so both weights and input activations are fake-quantized.

    Activation step sizes are initialized lazily from the first batch seen.
    """

    def __init__(self, layer, bits: int, mode: QuantMode, act_signed: bool):
        self.layer = layer
        self.name = layer.name
        self.weight_qp = QuantParams(bits=bits, signed=True, mode=mode)
        self.act_qp = QuantParams(bits=bits, signed=act_signed, mode=mode)
        init_step(layer.weight.values, self.weight_qp)

    def quant_params(self):
        out = []
        if self.weight_qp.mode != QuantMode.FIXED:
            out.append(self.weight_qp.param)
        if self.act_qp.mode != QuantMode.FIXED:
            out.append(self.act_qp.param)
        return out

    def parameters(self):
        return self.layer.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        if not self.act_qp.initialized:
            init_step(x.values, self.act_qp)
        xq = fake_quantize(x, self.act_qp)
        wq = fake_quantize(self.layer.weight, self.weight_qp)
        return self.layer.forward_with(xq, wq)
