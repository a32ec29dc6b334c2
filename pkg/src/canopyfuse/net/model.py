"""The pyramid receptive-field regressor and its layers.

Layers hold their parameters and accumulated gradients; ``backward`` returns
the input gradient so composite layers chain by calling children in reverse.
Initialization is He-normal from a generator passed down in declaration
order, so a model is a pure function of (in_channels, config).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops

Params = list[tuple[str, np.ndarray]]


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)).astype(dtype)


class PointwiseConv:
    """1x1 convolution over channels with optional ReLU."""

    def __init__(self, in_ch, out_ch, relu, rng=None, dtype=np.float32):
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.relu = bool(relu)
        if rng is None:
            self.weight = np.zeros((out_ch, in_ch), dtype=dtype)
        else:
            self.weight = _he_normal(rng, (out_ch, in_ch), in_ch, dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self.gw = np.zeros_like(self.weight)
        self.gb = np.zeros_like(self.bias)
        self._x = None
        self._mask = None

    def forward(self, x):
        self._x = x
        z = ops.pointwise_forward(x, self.weight, self.bias)
        if self.relu:
            z = np.maximum(z, 0)
            self._mask = z > 0
        return z

    def backward(self, g):
        if self.relu:
            g = g * self._mask
        dx, dw, db = ops.pointwise_backward(g, self._x, self.weight)
        self.gw += dw
        self.gb += db
        return dx

    def params(self) -> Params:
        return [("weight", self.weight), ("bias", self.bias)]

    def grads(self) -> Params:
        return [("weight", self.gw), ("bias", self.gb)]

    def zero_grads(self):
        self.gw[...] = 0.0
        self.gb[...] = 0.0


class DepthwiseConv:
    """Per-channel k x k spatial convolution (no bias, no activation)."""

    def __init__(self, channels, kernel_size, rng=None, dtype=np.float32):
        self.channels = int(channels)
        self.kernel_size = int(kernel_size)
        shape = (channels, kernel_size, kernel_size)
        if rng is None:
            self.weight = np.zeros(shape, dtype=dtype)
        else:
            self.weight = _he_normal(rng, shape, kernel_size * kernel_size, dtype)
        self.gw = np.zeros_like(self.weight)
        self._xp = None

    def forward(self, x):
        out, self._xp = ops.depthwise_forward(x, self.weight)
        return out

    def backward(self, g):
        dx, dwd = ops.depthwise_backward(g, self._xp, self.weight)
        self.gw += dwd
        return dx

    def params(self) -> Params:
        return [("weight", self.weight)]

    def grads(self) -> Params:
        return [("weight", self.gw)]

    def zero_grads(self):
        self.gw[...] = 0.0


class SepConv:
    """Depthwise spatial conv followed by a 1x1 channel combination + bias."""

    def __init__(self, in_ch, out_ch, kernel_size, rng=None, dtype=np.float32):
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.kernel_size = int(kernel_size)
        if rng is None:
            self.depthwise = np.zeros((in_ch, kernel_size, kernel_size), dtype=dtype)
            self.pointwise = np.zeros((out_ch, in_ch), dtype=dtype)
        else:
            self.depthwise = _he_normal(
                rng, (in_ch, kernel_size, kernel_size),
                kernel_size * kernel_size, dtype,
            )
            self.pointwise = _he_normal(rng, (out_ch, in_ch), in_ch, dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self.g_dw = np.zeros_like(self.depthwise)
        self.g_pw = np.zeros_like(self.pointwise)
        self.g_b = np.zeros_like(self.bias)
        self._xp = None
        self._mid = None

    def forward(self, x):
        mid, self._xp = ops.depthwise_forward(x, self.depthwise)
        self._mid = mid
        return ops.pointwise_forward(mid, self.pointwise, self.bias)

    def backward(self, g):
        dmid, dpw, db = ops.pointwise_backward(g, self._mid, self.pointwise)
        self.g_pw += dpw
        self.g_b += db
        dx, ddw = ops.depthwise_backward(dmid, self._xp, self.depthwise)
        self.g_dw += ddw
        return dx

    def params(self) -> Params:
        return [
            ("depthwise", self.depthwise),
            ("pointwise", self.pointwise),
            ("bias", self.bias),
        ]

    def grads(self) -> Params:
        return [("depthwise", self.g_dw), ("pointwise", self.g_pw), ("bias", self.g_b)]

    def zero_grads(self):
        self.g_dw[...] = 0.0
        self.g_pw[...] = 0.0
        self.g_b[...] = 0.0


class PyramidBlock:
    """Parallel multi-scale branches fused by a learned 1x1 convolution.

    Branches: one sepconv per kernel size, plus (optionally) 3x3 max pool ->
    1x1 pointwise. Outputs concatenate along channels, a fusing 1x1 conv with
    ReLU realizes the weighted multi-scale sum, and a residual skip adds the
    block input (through a linear 1x1 alignment only when channel counts
    differ — never an activation).
    """

    def __init__(self, in_ch, out_ch, branch_channels, branches=(1, 3, 5, 7),
                 pool_branch=True, residual=True, rng=None, dtype=np.float32):
        if not branches:
            raise ValueError("branch set must be non-empty")
        for k in branches:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"branch kernel sizes must be odd, got {k}")
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.residual = bool(residual)
        self.branches = {
            int(k): SepConv(in_ch, branch_channels, k, rng=rng, dtype=dtype)
            for k in branches
        }
        if pool_branch:
            self.pool = ops.MaxPool3x3()
            self.pool_pw = PointwiseConv(in_ch, branch_channels, relu=False,
                                         rng=rng, dtype=dtype)
        else:
            self.pool = None
            self.pool_pw = None
        n_parallel = len(self.branches) + (1 if pool_branch else 0)
        self.fuse = PointwiseConv(n_parallel * branch_channels, out_ch,
                                  relu=True, rng=rng, dtype=dtype)
        if residual and in_ch != out_ch:
            self.skip = PointwiseConv(in_ch, out_ch, relu=False, rng=rng, dtype=dtype)
        else:
            self.skip = None
        self._branch_channels = int(branch_channels)

    def max_kernel_size(self) -> int:
        k = max(self.branches)
        return max(k, 3) if self.pool is not None else k

    def forward(self, x):
        outs = [b.forward(x) for b in self.branches.values()]
        if self.pool is not None:
            outs.append(self.pool_pw.forward(self.pool.forward(x)))
        y = self.fuse.forward(np.concatenate(outs, axis=1))
        if self.residual:
            y = y + (x if self.skip is None else self.skip.forward(x))
        return y

    def backward(self, g):
        if self.residual:
            dskip = g if self.skip is None else self.skip.backward(g)
        dcat = self.fuse.backward(g)
        bc = self._branch_channels
        dx = None
        for i, b in enumerate(self.branches.values()):
            piece = b.backward(dcat[:, i * bc : (i + 1) * bc])
            dx = piece if dx is None else dx + piece
        if self.pool is not None:
            i = len(self.branches)
            dpool = self.pool_pw.backward(dcat[:, i * bc : (i + 1) * bc])
            dx = dx + self.pool.backward(dpool)
        if self.residual:
            dx = dx + dskip
        return dx

    def _children(self):
        for k, b in self.branches.items():
            yield f"branch{k}", b
        if self.pool_pw is not None:
            yield "pool", self.pool_pw
        yield "fuse", self.fuse
        if self.skip is not None:
            yield "skip", self.skip

    def params(self) -> Params:
        return [(f"{cn}.{pn}", a) for cn, ch in self._children()
                for pn, a in ch.params()]

    def grads(self) -> Params:
        return [(f"{cn}.{pn}", a) for cn, ch in self._children()
                for pn, a in ch.grads()]

    def zero_grads(self):
        for _, ch in self._children():
            ch.zero_grads()


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; the entry stack is three 1x1 convolutions whose
    last width sets the feature depth carried through the pyramid blocks."""

    entry_widths: tuple = (128, 256, 256)
    num_blocks: int = 8
    branches: tuple = (1, 3, 5, 7)
    pool_branch: bool = True
    branch_channels: int | None = None
    residual: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.entry_widths) != 3 or any(w < 1 for w in self.entry_widths):
            raise ValueError(
                f"entry_widths must be three positive widths, got {self.entry_widths}"
            )
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if not self.branches:
            raise ValueError("branch set must be non-empty")
        for k in self.branches:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"branch kernel sizes must be odd, got {k}")
        if self.branch_channels is not None and self.branch_channels < 1:
            raise ValueError("branch_channels must be >= 1")

    def resolved_branch_channels(self) -> int:
        return (
            self.branch_channels
            if self.branch_channels is not None
            else self.entry_widths[-1]
        )


class PyramidRegressor:
    """Entry pointwise stack -> residual pyramid blocks -> three 1x1 heads
    (predictions, variances, second moments). Only the prediction head is
    trained; the other two are forward-only diagnostics."""

    def __init__(self, in_channels, config: ModelConfig | None = None,
                 dtype=np.float32, channel_stats=None):
        self.in_channels = int(in_channels)
        self.config = config if config is not None else ModelConfig()
        self.dtype = np.dtype(dtype)
        self.channel_stats = channel_stats
        rng = np.random.default_rng(self.config.seed)
        widths = self.config.entry_widths
        self.entry = []
        prev = self.in_channels
        for w in widths:
            self.entry.append(PointwiseConv(prev, w, relu=True, rng=rng, dtype=dtype))
            prev = w
        feat = widths[-1]
        bc = self.config.resolved_branch_channels()
        self.blocks = [
            PyramidBlock(feat, feat, bc, branches=self.config.branches,
                         pool_branch=self.config.pool_branch,
                         residual=self.config.residual, rng=rng, dtype=dtype)
            for _ in range(self.config.num_blocks)
        ]
        self.head_pred = PointwiseConv(feat, 1, relu=False, rng=rng, dtype=dtype)
        self.head_var = PointwiseConv(feat, 1, relu=False, rng=rng, dtype=dtype)
        self.head_m2 = PointwiseConv(feat, 1, relu=False, rng=rng, dtype=dtype)
        self._single = None

    # ------------------------------------------------------------- plumbing

    def _named_layers(self):
        for i, l in enumerate(self.entry):
            yield f"entry{i}", l
        for i, b in enumerate(self.blocks):
            yield f"block{i}", b
        yield "head_pred", self.head_pred
        yield "head_var", self.head_var
        yield "head_m2", self.head_m2

    def params(self) -> Params:
        return [(f"{ln}.{pn}", a) for ln, layer in self._named_layers()
                for pn, a in layer.params()]

    def grads(self) -> Params:
        return [(f"{ln}.{pn}", a) for ln, layer in self._named_layers()
                for pn, a in layer.grads()]

    def zero_grads(self):
        for _, layer in self._named_layers():
            layer.zero_grads()

    def n_params(self) -> int:
        return sum(a.size for _, a in self.params())

    def snapshot_params(self) -> list[np.ndarray]:
        return [a.copy() for _, a in self.params()]

    def load_param_snapshot(self, snap) -> None:
        own = self.params()
        if len(snap) != len(own):
            raise ValueError("snapshot length mismatch")
        for (_, a), s in zip(own, snap):
            if a.shape != s.shape:
                raise ValueError("snapshot shape mismatch")
            a[...] = s

    # ------------------------------------------------------- forward/backward

    def forward(self, cube):
        x = np.asarray(cube, dtype=self.dtype)
        self._single = x.ndim == 3
        if self._single:
            x = x[None]
        if x.ndim != 4:
            raise ValueError(f"expected (C,H,W) or (N,C,H,W), got {cube.shape}")
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"input has {x.shape[1]} channels, model expects {self.in_channels}"
            )
        if not np.isfinite(x).all():
            raise FloatingPointError("non-finite values in model input")
        for layer in self.entry:
            x = layer.forward(x)
        for block in self.blocks:
            x = block.forward(x)
        pred = self.head_pred.forward(x)[:, 0]
        var = self.head_var.forward(x)[:, 0]
        m2 = self.head_m2.forward(x)[:, 0]
        for name, out in (("pred", pred), ("var", var), ("m2", m2)):
            if not np.isfinite(out).all():
                raise FloatingPointError(f"non-finite values in {name} head output")
        if self._single:
            return pred[0], var[0], m2[0]
        return pred, var, m2

    def backward(self, d_pred):
        """Backpropagate from the prediction head; accumulates param grads and
        returns the input gradient."""
        g = np.asarray(d_pred, dtype=self.dtype)
        if self._single is None:
            raise RuntimeError("backward called before forward")
        if self._single:
            g = g[None]
        g = self.head_pred.backward(g[:, None])
        for block in reversed(self.blocks):
            g = block.backward(g)
        for layer in reversed(self.entry):
            g = layer.backward(g)
        return g[0] if self._single else g
