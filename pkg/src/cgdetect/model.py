"""The dual-stream network.

A residual stream consumes high-pass residual maps (pixels in 0-255 scale
filtered by the fixed kernel bank) and a joint channel stream consumes the raw
RGB image scaled to [0, 1]. Each stream is five downsampling layers; plain
layers are conv3x3/s1 -> batchnorm -> ReLU -> 2x2 pool, and designated layers
are replaced by a two-branch block (conv/ReLU/pool main branch plus a
stride-2 conv shortcut, summed) with no batchnorm inside. A fusion head turns
the two 128-dim stream outputs into 2-class logits.

Every published ablation axis is a config switch: stream removal, filter
subset, residual-block placement, and the pooling operator per stream.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace, asdict

import numpy as np

from . import ops
from .ops import DEFAULT_DTYPE, Tensor4
from .softpool import softpool_forward, softpool_backward
from .srm import load_bank, apply_bank
from .params import (ParamStore, KIND_CONV_WEIGHT, KIND_CONV_BIAS,
                     KIND_BN_GAMMA, KIND_BN_BETA, KIND_BN_RUNNING_MEAN,
                     KIND_BN_RUNNING_VAR, KIND_BN_RUNNING_COUNT,
                     KIND_LINEAR_WEIGHT, KIND_LINEAR_BIAS)

FUSIONS = ("concat", "logit_avg", "residual_only", "joint_only")
POOLINGS = ("softpool", "maxpool")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# pixel scale fed to the joint channel stream (the residual stream keeps
# the 0-255 scale so residual magnitudes match forensics convention)
JOINT_INPUT_SCALE = 1.0 / 255.0


@dataclass(frozen=True)
class ModelConfig:
    """All architecture knobs. Defaults are the proposed network."""
    fusion: str = "concat"
    residual_block_layers: tuple = (2, 3, 4)
    joint_stream_residual_blocks: bool = False
    pooling_residual: str = "softpool"
    pooling_joint: str = "softpool"
    filter_subset: str = "all_30"
    channel_schedule: tuple = (32, 64, 96, 128, 128)
    crop: int = 224
    width_multiplier: float = 1.0

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.pooling_residual not in POOLINGS or self.pooling_joint not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        layers = tuple(self.residual_block_layers)
        if not set(layers) <= {1, 2, 3, 4, 5}:
            raise ValueError("residual_block_layers must be a subset of {1..5}")
        object.__setattr__(self, "residual_block_layers", tuple(sorted(layers)))
        if len(self.channel_schedule) != 5 or min(self.channel_schedule) < 1:
            raise ValueError("channel_schedule must be 5 positive integers")
        object.__setattr__(self, "channel_schedule", tuple(self.channel_schedule))
        if self.crop % 32:
            raise ValueError("crop must be divisible by 32 (five 2x halvings)")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")

    def scaled_channels(self) -> tuple:
        return tuple(max(1, round(c * self.width_multiplier))
                     for c in self.channel_schedule)

    def stream_out_channels(self) -> int:
        return self.scaled_channels()[-1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        raw["residual_block_layers"] = tuple(raw["residual_block_layers"])
        raw["channel_schedule"] = tuple(raw["channel_schedule"])
        return cls(**raw)


def ablation_variant(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """Config for a published ablation row, differing from the proposed model
    only along that row's axis. Scale knobs (crop, width, schedule) are taken
    from `base`."""
    base = base if base is not None else ModelConfig()
    default = replace(base, fusion="concat", residual_block_layers=(2, 3, 4),
                      joint_stream_residual_blocks=False,
                      pooling_residual="softpool", pooling_joint="softpool",
                      filter_subset="all_30")
    variants = {
        "default": default,
        "VA": replace(default, residual_block_layers=(),
                      joint_stream_residual_blocks=False),
        "VB": replace(default, residual_block_layers=(),
                      joint_stream_residual_blocks=True),
        "VC": replace(default, residual_block_layers=(2, 3, 4),
                      joint_stream_residual_blocks=True),
        "layers3": default,
        "layers4": replace(default, residual_block_layers=(2, 3, 4, 5)),
        "layers5": replace(default, residual_block_layers=(1, 2, 3, 4, 5)),
        "M1": replace(default, pooling_residual="maxpool", pooling_joint="maxpool"),
        "M2": replace(default, pooling_residual="softpool", pooling_joint="maxpool"),
        "M3": replace(default, pooling_residual="maxpool", pooling_joint="softpool"),
        "only_residual": replace(default, fusion="residual_only"),
        "only_joint": replace(default, fusion="joint_only"),
    }
    if name in variants:
        return variants[name]
    if name.startswith("subset:"):
        subset = name.split(":", 1)[1]
        load_bank().subset(subset)  # validate early
        return replace(default, filter_subset=subset)
    raise ValueError(f"unknown ablation variant: {name!r}")


ABLATION_NAMES = ("VA", "VB", "VC", "default", "M1", "M2", "M3",
                  "layers3", "layers4", "layers5", "only_residual", "only_joint")


# ---------------------------------------------------------------------------
# layers (parameters live in the shared ParamStore; each layer caches its
# forward intermediates for the following backward call)
# ---------------------------------------------------------------------------

class _Conv:
    def __init__(self, store, name, in_c, out_c, stride, rng, dtype):
        fan_in = in_c * 9
        w = (rng.standard_normal((out_c, in_c, 3, 3))
             * math.sqrt(2.0 / fan_in)).astype(dtype)
        self.w = store.register(f"{name}.weight", w, KIND_CONV_WEIGHT)
        self.b = store.register(f"{name}.bias", np.zeros(out_c, dtype), KIND_CONV_BIAS)
        self.stride = stride
        self._x = None

    def forward(self, x):
        self._x = x
        return ops.conv2d_forward(x, self.w.value, self.b.value,
                                  stride=self.stride, pad=1)

    def backward(self, g, need_input_grad=True):
        if self._x is None:
            raise ValueError("conv backward called without cached forward")
        gx, gw, gb = ops.conv2d_backward(g, self._x, self.w.value,
                                         stride=self.stride, pad=1,
                                         need_input_grad=need_input_grad)
        self.w.grad += gw
        self.b.grad += gb
        return gx


class _BatchNorm:
    def __init__(self, store, name, c, dtype):
        self.gamma = store.register(f"{name}.gamma", np.ones(c, dtype), KIND_BN_GAMMA)
        self.beta = store.register(f"{name}.beta", np.zeros(c, dtype), KIND_BN_BETA)
        self.rmean = store.register(f"{name}.running_mean", np.zeros(c, dtype),
                                    KIND_BN_RUNNING_MEAN)
        self.rvar = store.register(f"{name}.running_var", np.ones(c, dtype),
                                   KIND_BN_RUNNING_VAR)
        self.rcount = store.register(f"{name}.running_count", np.zeros((), dtype),
                                     KIND_BN_RUNNING_COUNT)
        self._cache = None

    def forward(self, x, mode):
        if mode == "eval" and self.rcount.value == 0:
            raise ValueError("eval-mode batchnorm with uninitialized running stats "
                             "(model was never trained)")
        y, cache = ops.batchnorm2d_forward(
            x, self.gamma.value, self.beta.value, mode=mode,
            running_mean=self.rmean.value, running_var=self.rvar.value,
            momentum=BN_MOMENTUM, eps=BN_EPS)
        if mode == "train":
            self.rcount.value[...] += 1
        self._cache = cache
        return y

    def backward(self, g):
        if self._cache is None:
            raise ValueError("batchnorm backward requires a train-mode forward")
        gx, ggamma, gbeta = ops.batchnorm2d_backward(g, self._cache)
        self.gamma.grad += ggamma
        self.beta.grad += gbeta
        return gx


class _Relu:
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return ops.relu_forward(x)

    def backward(self, g):
        return ops.relu_backward(g, self._x)


class _Pool:
    def __init__(self, kind):
        self.kind = kind
        self._x = None
        self._idx = None

    def forward(self, x):
        self._x = x
        if self.kind == "softpool":
            return softpool_forward(x)
        y, self._idx = ops.maxpool2x2_forward(x)
        return y

    def backward(self, g):
        if self.kind == "softpool":
            return softpool_backward(g, self._x)
        return ops.maxpool2x2_backward(g, self._idx, self._x.shape)


class _PlainLayer:
    """conv3x3/s1 -> batchnorm -> ReLU -> 2x2 pool"""

    def __init__(self, store, name, in_c, out_c, pooling, rng, dtype):
        self.conv = _Conv(store, f"{name}.conv", in_c, out_c, 1, rng, dtype)
        self.bn = _BatchNorm(store, f"{name}.bn", out_c, dtype)
        self.relu = _Relu()
        self.pool = _Pool(pooling)

    def forward(self, x, mode):
        return self.pool.forward(self.relu.forward(self.bn.forward(
            self.conv.forward(x), mode)))

    def backward(self, g, need_input_grad=True):
        g = self.bn.backward(self.relu.backward(self.pool.backward(g)))
        return self.conv.backward(g, need_input_grad)


class _ResidualBlock:
    """Two branches at matched output scale, merged by adding: main is
    conv3x3/s1 -> ReLU -> 2x2 pool, the shortcut is a single conv3x3/s2."""

    def __init__(self, store, name, in_c, out_c, pooling, rng, dtype):
        self.main = _Conv(store, f"{name}.main", in_c, out_c, 1, rng, dtype)
        self.relu = _Relu()
        self.pool = _Pool(pooling)
        self.shortcut = _Conv(store, f"{name}.shortcut", in_c, out_c, 2, rng, dtype)

    def forward(self, x, mode):
        branch = self.pool.forward(self.relu.forward(self.main.forward(x)))
        return branch + self.shortcut.forward(x)

    def backward(self, g, need_input_grad=True):
        gx_short = self.shortcut.backward(g, need_input_grad)
        gm = self.main.backward(self.relu.backward(self.pool.backward(g)),
                                need_input_grad)
        if not need_input_grad:
            return None
        return gm + gx_short


class _Stream:
    def __init__(self, store, prefix, in_c, channels, block_layers, pooling,
                 rng, dtype):
        self.layers = []
        prev = in_c
        for i, out_c in enumerate(channels, start=1):
            cls = _ResidualBlock if i in block_layers else _PlainLayer
            self.layers.append(cls(store, f"{prefix}.layer{i}", prev, out_c,
                                   pooling, rng, dtype))
            prev = out_c

    def forward(self, x, mode):
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, g):
        for i, layer in enumerate(reversed(self.layers)):
            last = i == len(self.layers) - 1
            g = layer.backward(g, need_input_grad=not last)


class _Linear:
    def __init__(self, store, name, in_f, out_f, rng, dtype):
        w = (rng.standard_normal((out_f, in_f))
             * math.sqrt(2.0 / in_f)).astype(dtype)
        self.w = store.register(f"{name}.weight", w, KIND_LINEAR_WEIGHT)
        self.b = store.register(f"{name}.bias", np.zeros(out_f, dtype),
                                KIND_LINEAR_BIAS)
        self._x = None

    def forward(self, x):
        self._x = x
        return ops.linear_forward(x, self.w.value, self.b.value)

    def backward(self, g):
        gx, gw, gb = ops.linear_backward(g, self._x, self.w.value)
        self.w.grad += gw
        self.b.grad += gb
        return gx


class DualStreamModel:
    """Built network: parameter store, stream layers, and fusion head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.store = ParamStore()
        self.kernels = load_bank().subset(cfg.filter_subset)
        rng = np.random.default_rng(seed)
        channels = cfg.scaled_channels()
        out_c = channels[-1]

        self.res_stream = None
        self.joint_stream = None
        if cfg.fusion != "joint_only":
            self.res_stream = _Stream(self.store, "res", 3 * len(self.kernels),
                                      channels, set(cfg.residual_block_layers),
                                      cfg.pooling_residual, rng, self.dtype)
        if cfg.fusion != "residual_only":
            joint_blocks = {2, 3, 4} if cfg.joint_stream_residual_blocks else set()
            self.joint_stream = _Stream(self.store, "joint", 3, channels,
                                        joint_blocks, cfg.pooling_joint, rng,
                                        self.dtype)

        if cfg.fusion == "concat":
            self.head = _Linear(self.store, "head.fused", 2 * out_c, 2, rng, self.dtype)
        elif cfg.fusion == "logit_avg":
            self.head_res = _Linear(self.store, "head.res", out_c, 2, rng, self.dtype)
            self.head_joint = _Linear(self.store, "head.joint", out_c, 2, rng, self.dtype)
        elif cfg.fusion == "residual_only":
            self.head_res = _Linear(self.store, "head.res", out_c, 2, rng, self.dtype)
        else:
            self.head_joint = _Linear(self.store, "head.joint", out_c, 2, rng, self.dtype)

        self.last_stream_features = {}
        self._cache = None

    # -- forward / backward -------------------------------------------------

    def _pooled(self, feat):
        n = feat.shape[0]
        return ops.global_avg_pool_forward(feat).reshape(n, -1), feat.shape

    def forward(self, x: Tensor4, mode: str = "train") -> np.ndarray:
        """x: (n, 3, crop, crop) pixels in 0-255 scale. Returns (n, 2) logits."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (n, 3, h, w) input, got {x.shape}")
        if x.shape[2] != self.cfg.crop or x.shape[3] != self.cfg.crop:
            raise ValueError(f"wrong crop size: model expects "
                             f"{self.cfg.crop}x{self.cfg.crop}, got "
                             f"{x.shape[2]}x{x.shape[3]}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        ops.ensure_finite("model input", x)

        self.last_stream_features = {}
        cache = {"mode": mode}
        pooled = {}
        for key, stream, feed in (("res", self.res_stream,
                                   lambda: apply_bank(x, self.kernels)),
                                  ("joint", self.joint_stream,
                                   lambda: x * np.asarray(JOINT_INPUT_SCALE, self.dtype))):
            if stream is None:
                continue
            feat = stream.forward(feed(), mode)
            self.last_stream_features[key] = feat
            pooled[key], cache[f"{key}_shape"] = self._pooled(feat)

        if self.cfg.fusion == "concat":
            fused = np.concatenate([pooled["res"], pooled["joint"]], axis=1)
            logits = self.head.forward(fused)
            cache["split"] = pooled["res"].shape[1]
        elif self.cfg.fusion == "logit_avg":
            logits = 0.5 * (self.head_res.forward(pooled["res"])
                            + self.head_joint.forward(pooled["joint"]))
        elif self.cfg.fusion == "residual_only":
            logits = self.head_res.forward(pooled["res"])
        else:
            logits = self.head_joint.forward(pooled["joint"])
        self._cache = cache
        return logits

    def _unpool(self, g2d, shape):
        n, c, h, w = shape
        return ops.global_avg_pool_backward(g2d.reshape(n, c, 1, 1), shape)

    def backward(self, grad_logits: np.ndarray) -> None:
        """Populate parameter gradients from d(loss)/d(logits)."""
        if self._cache is None:
            raise ValueError("backward called without a cached forward")
        if self._cache["mode"] != "train":
            raise ValueError("backward requires a train-mode forward")
        cache = self._cache
        grad_logits = grad_logits.astype(self.dtype, copy=False)
        if self.cfg.fusion == "concat":
            gz = self.head.backward(grad_logits)
            split = cache["split"]
            self.res_stream.backward(self._unpool(gz[:, :split], cache["res_shape"]))
            self.joint_stream.backward(self._unpool(gz[:, split:], cache["joint_shape"]))
        elif self.cfg.fusion == "logit_avg":
            g = 0.5 * grad_logits
            self.res_stream.backward(
                self._unpool(self.head_res.backward(g), cache["res_shape"]))
            self.joint_stream.backward(
                self._unpool(self.head_joint.backward(g), cache["joint_shape"]))
        elif self.cfg.fusion == "residual_only":
            self.res_stream.backward(
                self._unpool(self.head_res.backward(grad_logits), cache["res_shape"]))
        else:
            self.joint_stream.backward(
                self._unpool(self.head_joint.backward(grad_logits), cache["joint_shape"]))

    # -- reporting ----------------------------------------------------------

    def param_count(self) -> int:
        return self.store.param_count()

    def summary(self) -> str:
        """Per-layer architecture dump: name, type, output dims, param count."""
        cfg = self.cfg
        lines = [f"fusion={cfg.fusion}  filter_subset={cfg.filter_subset} "
                 f"({len(self.kernels)} kernels)  crop={cfg.crop}  "
                 f"width_multiplier={cfg.width_multiplier}"]
        channels = cfg.scaled_channels()

        def stream_lines(prefix, stream, in_c, pooling):
            size = cfg.crop
            prev = in_c
            for i, (layer, out_c) in enumerate(zip(stream.layers, channels), 1):
                size //= 2
                kind = ("residual_block" if isinstance(layer, _ResidualBlock)
                        else "plain")
                count = _layer_params(layer)
                lines.append(f"  {prefix}.layer{i:<2} {kind:<15} {pooling:<9}"
                             f"{prev:>4} -> {out_c:<4} out={out_c}x{size}x{size}"
                             f"  params={count}")
                prev = out_c

        if self.res_stream is not None:
            lines.append(f"residual stream: {3 * len(self.kernels)} residual maps in")
            stream_lines("res", self.res_stream, 3 * len(self.kernels),
                         cfg.pooling_residual)
        if self.joint_stream is not None:
            lines.append("joint channel stream: RGB in")
            stream_lines("joint", self.joint_stream, 3, cfg.pooling_joint)
        head_params = sum(e.value.size for n, e in self.store.learnable()
                          if n.startswith("head."))
        lines.append(f"head ({cfg.fusion}): params={head_params}")
        lines.append(f"total learnable parameters: {self.param_count()}")
        return "\n".join(lines)


def _layer_params(layer) -> int:
    entries = []
    if isinstance(layer, _PlainLayer):
        entries = [layer.conv.w, layer.conv.b, layer.bn.gamma, layer.bn.beta]
    elif isinstance(layer, _ResidualBlock):
        entries = [layer.main.w, layer.main.b, layer.shortcut.w, layer.shortcut.b]
    return sum(e.value.size for e in entries)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> DualStreamModel:
    return DualStreamModel(cfg, seed=seed, dtype=dtype)
