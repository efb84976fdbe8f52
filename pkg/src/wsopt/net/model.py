"""The mini dense-block classifier: config, init, forward, backward.

Topology (all convs stride 1, each followed by ReLU):

    stem: 3x3 conv (1 -> stem_channels), pad 1
    for each block:
        layers_per_block dense layers, each
            1x1 conv (C -> 4*growth_rate), pad 0   "squeeze"
            3x3 conv (4*growth_rate -> growth_rate), pad 1   "grow"
        output concatenated onto the running feature map
        (between blocks) transition: 1x1 conv halving channels + 2x2 avg pool
    global average pool -> fully connected -> 1 logit

Channel bookkeeping: a block maps C channels to C + layers_per_block *
growth_rate; each transition halves (floor) the count. The forward pass
asserts this arithmetic on every call.

Parameters live in an insertion-ordered dict name -> ndarray; iteration
order is the deterministic update order the optimizer relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class NetworkConfig:
    growth_rate: int = 8
    num_blocks: int = 2
    layers_per_block: int = 4
    stem_channels: int = 16
    input_size: int = 64

    def validate(self) -> None:
        for name in ("growth_rate", "num_blocks", "layers_per_block", "stem_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.input_size < 4:
            raise ValueError(f"input_size must be >= 4, got {self.input_size}")
        if self.input_size % (2 ** (self.num_blocks - 1)) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by the "
                f"{self.num_blocks - 1} transition poolings"
            )

    def channel_flow(self) -> list:
        """Channel count after the stem and after each block/transition."""
        flow = [self.stem_channels]
        ch = self.stem_channels
        for b in range(self.num_blocks):
            ch = ch + self.layers_per_block * self.growth_rate
            flow.append(ch)
            if b < self.num_blocks - 1:
                ch = ch // 2
                flow.append(ch)
        return flow

    def head_channels(self) -> int:
        return self.channel_flow()[-1]

    def to_dict(self) -> dict:
        return {
            "growth_rate": self.growth_rate,
            "num_blocks": self.num_blocks,
            "layers_per_block": self.layers_per_block,
            "stem_channels": self.stem_channels,
            "input_size": self.input_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        cfg = cls(**{k: int(v) for k, v in d.items()})
        cfg.validate()
        return cfg


def _he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


def init_params(cfg: NetworkConfig, seed: int, dtype=np.float32) -> dict:
    """He fan-in Gaussian init for weights, zero biases; deterministic per seed."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    params: dict[str, np.ndarray] = {}

    def add_conv(name, out_ch, in_ch, k):
        std = _he_std(in_ch * k * k)
        params[f"{name}/w"] = rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(dtype)
        params[f"{name}/b"] = np.zeros(out_ch, dtype=dtype)

    add_conv("stem", cfg.stem_channels, 1, 3)
    ch = cfg.stem_channels
    for b in range(1, cfg.num_blocks + 1):
        for l in range(1, cfg.layers_per_block + 1):
            add_conv(f"block{b}/layer{l}/squeeze", 4 * cfg.growth_rate, ch, 1)
            add_conv(f"block{b}/layer{l}/grow", cfg.growth_rate, 4 * cfg.growth_rate, 3)
            ch += cfg.growth_rate
        if b < cfg.num_blocks:
            add_conv(f"block{b}/transition", ch // 2, ch, 1)
            ch //= 2
    head = cfg.head_channels()
    params["head/w"] = rng.normal(0.0, _he_std(head), size=(head,)).astype(dtype)
    params["head/b"] = np.zeros(1, dtype=dtype)
    return params


class StaleCacheError(RuntimeError):
    """backward() called with a cache from a different forward configuration."""


def forward(params: dict, cfg: NetworkConfig, batch: np.ndarray):
    """Run the classifier; returns (logits (N,), cache for backward)."""
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ops.ShapeError(f"expected batch (N, 1, H, W), got {batch.shape}")
    if batch.shape[2] != cfg.input_size or batch.shape[3] != cfg.input_size:
        raise ops.ShapeError(
            f"batch spatial size {batch.shape[2]}x{batch.shape[3]} does not match "
            f"configured input_size {cfg.input_size}"
        )
    steps = []
    h, cache = ops.conv2d(batch, params["stem/w"], params["stem/b"], pad=1)
    steps.append(("conv", "stem", cache))
    h, mask = ops.relu(h)
    steps.append(("relu", "stem", mask))

    ch = cfg.stem_channels
    for b in range(1, cfg.num_blocks + 1):
        for l in range(1, cfg.layers_per_block + 1):
            name = f"block{b}/layer{l}"
            t, cache = ops.conv2d(h, params[f"{name}/squeeze/w"], params[f"{name}/squeeze/b"], pad=0)
            steps.append(("conv", f"{name}/squeeze", cache))
            t, mask = ops.relu(t)
            steps.append(("relu", f"{name}/squeeze", mask))
            t, cache = ops.conv2d(t, params[f"{name}/grow/w"], params[f"{name}/grow/b"], pad=1)
            steps.append(("conv", f"{name}/grow", cache))
            t, mask = ops.relu(t)
            steps.append(("relu", f"{name}/grow", mask))
            h, bounds = ops.concat_channels([h, t])
            steps.append(("concat", name, bounds))
            ch += cfg.growth_rate
            if h.shape[1] != ch:
                raise ops.ShapeError(
                    f"channel bookkeeping broken after {name}: {h.shape[1]} != {ch}"
                )
        if b < cfg.num_blocks:
            name = f"block{b}/transition"
            h, cache = ops.conv2d(h, params[f"{name}/w"], params[f"{name}/b"], pad=0)
            steps.append(("conv", name, cache))
            h, mask = ops.relu(h)
            steps.append(("relu", name, mask))
            h, shape = ops.avgpool2(h)
            steps.append(("avgpool", name, shape))
            ch //= 2

    if ch != cfg.head_channels():
        raise ops.ShapeError(f"head expects {cfg.head_channels()} channels, got {ch}")
    pooled, shape = ops.global_avgpool(h)
    steps.append(("gap", "head", shape))
    logits, xcache = ops.fc(pooled, params["head/w"], params["head/b"])
    steps.append(("fc", "head", xcache))
    return logits, (cfg, steps)


def backward(params: dict, cfg: NetworkConfig, cache, dlogits: np.ndarray):
    """Reverse-mode pass; returns (grads dict keyed like params, dinput)."""
    cached_cfg, steps = cache
    if cached_cfg != cfg:
        raise StaleCacheError("cache was produced by a different network config")
    grads = {}
    g = dlogits
    for kind, name, payload in reversed(steps):
        if kind == "fc":
            g, dw, db = ops.fc_backward(g, params["head/w"], payload)
            grads["head/w"] = dw
            grads["head/b"] = db
        elif kind == "gap":
            g = ops.global_avgpool_backward(g, payload)
        elif kind == "avgpool":
            g = ops.avgpool2_backward(g, payload)
        elif kind == "concat":
            g, g_tail = ops.concat_channels_backward(g, payload)
            pending = g_tail  # gradient flowing into this layer's grow conv
        elif kind == "relu":
            if name.endswith("/squeeze") or name.endswith("/grow"):
                pending = ops.relu_backward(pending, payload)
            else:
                g = ops.relu_backward(g, payload)
        elif kind == "conv":
            if name.endswith("/squeeze"):
                dx, dw, db = ops.conv2d_backward(pending, params[f"{name}/w"], payload)
                # squeeze input is the running feature map: merge into trunk
                g = g + dx
            elif name.endswith("/grow"):
                pending, dw, db = ops.conv2d_backward(pending, params[f"{name}/w"], payload)
            else:
                g, dw, db = ops.conv2d_backward(g, params[f"{name}/w"], payload)
            grads[f"{name}/w"] = dw
            grads[f"{name}/b"] = db
        else:  # pragma: no cover
            raise StaleCacheError(f"unknown cache entry {kind}")
    # reorder to match params iteration order
    ordered = {k: grads[k] for k in params if k in grads}
    return ordered, g
