"""Named parameter storage, the SGD update rule, and binary checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

KIND_CONV_WEIGHT = "conv_weight"
KIND_CONV_BIAS = "conv_bias"
KIND_BN_GAMMA = "bn_gamma"
KIND_BN_BETA = "bn_beta"
KIND_BN_RUNNING_MEAN = "bn_running_mean"
KIND_BN_RUNNING_VAR = "bn_running_var"
KIND_BN_RUNNING_COUNT = "bn_running_count"  # train-batch counter; 0 = uninitialized
KIND_LINEAR_WEIGHT = "linear_weight"
KIND_LINEAR_BIAS = "linear_bias"

LEARNABLE_KINDS = frozenset({
    KIND_CONV_WEIGHT, KIND_CONV_BIAS, KIND_BN_GAMMA, KIND_BN_BETA,
    KIND_LINEAR_WEIGHT, KIND_LINEAR_BIAS,
})
# weight decay applies to weights only, never to BN parameters or biases
DECAYED_KINDS = frozenset({KIND_CONV_WEIGHT, KIND_LINEAR_WEIGHT})


@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray | None  # None for running statistics
    kind: str


class ParamStore:
    """Ordered name -> (value, grad, kind) map.

    Values are updated in place so layers can hold direct references to the
    arrays they registered. Registration order is stable, which makes
    checkpoints byte-reproducible for a given architecture.
    """

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def register(self, name: str, value: np.ndarray, kind: str) -> ParamEntry:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        grad = np.zeros_like(value) if kind in LEARNABLE_KINDS else None
        entry = ParamEntry(value, grad, kind)
        self._entries[name] = entry
        return entry

    def __getitem__(self, name: str) -> ParamEntry:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def learnable(self):
        return [(n, e) for n, e in self._entries.items() if e.kind in LEARNABLE_KINDS]

    def zero_grads(self) -> None:
        for e in self._entries.values():
            if e.grad is not None:
                e.grad[...] = 0

    def param_count(self) -> int:
        """Number of learnable scalars."""
        return sum(e.value.size for _, e in self.learnable())


@dataclass(frozen=True)
class SgdConfig:
    """Optimizer settings; the defaults are the published training recipe."""
    lr0: float = 1e-3
    lr_gamma: float = 0.5
    lr_step_epochs: int = 20
    weight_decay: float = 1e-3
    batch_size: int = 64
    epochs: int = 120

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_gamma <= 1:
            raise ValueError("lr_gamma must lie in (0, 1]")
        if self.lr_step_epochs < 1:
            raise ValueError("lr_step_epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def learning_rate(cfg: SgdConfig, epoch: int) -> float:
    """Step schedule: lr0 halves (by lr_gamma) every lr_step_epochs."""
    return cfg.lr0 * cfg.lr_gamma ** (epoch // cfg.lr_step_epochs)


def sgd_step(store: ParamStore, epoch: int, cfg: SgdConfig) -> None:
    """Plain SGD with decoupled-from-BN weight decay; zeroes grads afterward."""
    lr = learning_rate(cfg, epoch)
    for _, e in store.learnable():
        g = e.grad
        if cfg.weight_decay and e.kind in DECAYED_KINDS:
            g = g + cfg.weight_decay * e.value
        e.value -= lr * g
        e.grad[...] = 0


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "CGDN", u32 version=1, u32 entry count; per entry: u16 name length,
# UTF-8 name, u8 dtype code, u8 ndim, ndim x u32 dims, raw little-endian
# payload. dtype codes: 0 = float32, 1 = float64, 2 = uint8 (raw bytes, used
# for the reserved "__config__" JSON entry).
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CGDN"
CHECKPOINT_VERSION = 1
CONFIG_ENTRY = "__config__"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                   np.dtype(np.uint8): 2}


class CheckpointError(ValueError):
    """Malformed checkpoint file or architecture mismatch on load."""


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    code = _CODE_FOR_DTYPE.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name}")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def write_checkpoint(path, entries, config_json: str | None = None) -> None:
    """Write (name, array) pairs; the config JSON, when given, goes first."""
    items = list(entries)
    if config_json is not None:
        items.insert(0, (CONFIG_ENTRY, np.frombuffer(config_json.encode("utf-8"),
                                                     dtype=np.uint8)))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, arr in items:
            _write_entry(fh, name, arr)


def save_checkpoint(path, store: ParamStore, config_json: str | None = None) -> None:
    write_checkpoint(path, ((n, e.value) for n, e in store.items()), config_json)


def read_checkpoint(path):
    """Read a checkpoint. Returns (entries dict in file order, config_json)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    entries = {}
    config_json = None
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code}")
        dims = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(data[off:off + nbytes], dtype=dtype).reshape(dims).copy()
        off += nbytes
        if name == CONFIG_ENTRY:
            config_json = arr.tobytes().decode("utf-8")
        else:
            entries[name] = arr
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return entries, config_json


def load_into_store(store: ParamStore, entries: dict) -> None:
    """Copy checkpoint arrays into an existing store; names and shapes must match."""
    missing = [n for n, _ in store.items() if n not in entries]
    extra = [n for n in entries if n not in store]
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match model "
                              f"(missing={missing[:3]}, unexpected={extra[:3]})")
    for name, arr in entries.items():
        e = store[name]
        if e.value.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: "
                                  f"model {e.value.shape}, checkpoint {arr.shape}")
        e.value[...] = arr.astype(e.value.dtype)
