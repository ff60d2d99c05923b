"""The 30 high-pass prediction-error kernels and per-channel residual filtering.

Each kernel predicts a pixel from a local neighborhood and subtracts; the taps
therefore sum to zero, so constant regions produce zero residual and only the
high-frequency content (where sensor noise lives) survives. Kernels are fixed,
never trained, and are applied to R, G and B independently with reflect
padding, giving 3 * |subset| residual maps in kernel-major channel order
(k0R, k0G, k0B, k1R, ...).

Tap values follow the standard rich-model definitions: 8 first-order
differences, 4 second-order, 8 third-order, plus square and edge predictors at
3x3 and 5x5. Each kernel is divided by the magnitude of its central
coefficient so the residual is a per-pixel prediction error.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .ops import Tensor4, conv2d_forward

FAMILIES = ("first_order", "second_order", "third_order",
            "edge3x3", "square3x3", "edge5x5", "square5x5")

SUBSET_NAMES = ("first_order", "second_order", "third_order",
                "all_3x3", "all_5x5", "all_30")

# name, family, normalizer, integer taps (native 3x3 or 5x5)
_KERNEL_TABLE = (
    ("first_left", "first_order", 1, ((0, 0, 0), (1, -1, 0), (0, 0, 0))),
    ("first_right", "first_order", 1, ((0, 0, 0), (0, -1, 1), (0, 0, 0))),
    ("first_up_left", "first_order", 1, ((1, 0, 0), (0, -1, 0), (0, 0, 0))),
    ("first_up", "first_order", 1, ((0, 1, 0), (0, -1, 0), (0, 0, 0))),
    ("first_up_right", "first_order", 1, ((0, 0, 1), (0, -1, 0), (0, 0, 0))),
    ("first_down_left", "first_order", 1, ((0, 0, 0), (0, -1, 0), (1, 0, 0))),
    ("first_down", "first_order", 1, ((0, 0, 0), (0, -1, 0), (0, 1, 0))),
    ("first_down_right", "first_order", 1, ((0, 0, 0), (0, -1, 0), (0, 0, 1))),

    ("second_horizontal", "second_order", 2, ((0, 0, 0), (1, -2, 1), (0, 0, 0))),
    ("second_vertical", "second_order", 2, ((0, 1, 0), (0, -2, 0), (0, 1, 0))),
    ("second_diagonal", "second_order", 2, ((1, 0, 0), (0, -2, 0), (0, 0, 1))),
    ("second_anti_diagonal", "second_order", 2, ((0, 0, 1), (0, -2, 0), (1, 0, 0))),

    ("third_right", "third_order", 3, ((0, 0, 0, 0, 0),
                                       (0, 0, 0, 0, 0),
                                       (0, 1, -3, 3, -1),
                                       (0, 0, 0, 0, 0),
                                       (0, 0, 0, 0, 0))),
    ("third_down_right", "third_order", 3, ((0, 0, 0, 0, 0),
                                            (0, 1, 0, 0, 0),
                                            (0, 0, -3, 0, 0),
                                            (0, 0, 0, 3, 0),
                                            (0, 0, 0, 0, -1))),
    ("third_down", "third_order", 3, ((0, 0, 0, 0, 0),
                                      (0, 0, 1, 0, 0),
                                      (0, 0, -3, 0, 0),
                                      (0, 0, 3, 0, 0),
                                      (0, 0, -1, 0, 0))),
    ("third_down_left", "third_order", 3, ((0, 0, 0, 0, 0),
                                           (0, 0, 0, 1, 0),
                                           (0, 0, -3, 0, 0),
                                           (0, 3, 0, 0, 0),
                                           (-1, 0, 0, 0, 0))),
    ("third_left", "third_order", 3, ((0, 0, 0, 0, 0),
                                      (0, 0, 0, 0, 0),
                                      (-1, 3, -3, 1, 0),
                                      (0, 0, 0, 0, 0),
                                      (0, 0, 0, 0, 0))),
    ("third_up_left", "third_order", 3, ((-1, 0, 0, 0, 0),
                                         (0, 3, 0, 0, 0),
                                         (0, 0, -3, 0, 0),
                                         (0, 0, 0, 1, 0),
                                         (0, 0, 0, 0, 0))),
    ("third_up", "third_order", 3, ((0, 0, -1, 0, 0),
                                    (0, 0, 3, 0, 0),
                                    (0, 0, -3, 0, 0),
                                    (0, 0, 1, 0, 0),
                                    (0, 0, 0, 0, 0))),
    ("third_up_right", "third_order", 3, ((0, 0, 0, 0, -1),
                                          (0, 0, 0, 3, 0),
                                          (0, 0, -3, 0, 0),
                                          (0, 1, 0, 0, 0),
                                          (0, 0, 0, 0, 0))),

    ("square_3x3", "square3x3", 4, ((-1, 2, -1), (2, -4, 2), (-1, 2, -1))),
    ("square_5x5", "square5x5", 12, ((-1, 2, -2, 2, -1),
                                     (2, -6, 8, -6, 2),
                                     (-2, 8, -12, 8, -2),
                                     (2, -6, 8, -6, 2),
                                     (-1, 2, -2, 2, -1))),

    ("edge_3x3_top", "edge3x3", 4, ((-1, 2, -1), (2, -4, 2), (0, 0, 0))),
    ("edge_3x3_left", "edge3x3", 4, ((-1, 2, 0), (2, -4, 0), (-1, 2, 0))),
    ("edge_3x3_bottom", "edge3x3", 4, ((0, 0, 0), (2, -4, 2), (-1, 2, -1))),
    ("edge_3x3_right", "edge3x3", 4, ((0, 2, -1), (0, -4, 2), (0, 2, -1))),

    ("edge_5x5_top", "edge5x5", 12, ((-1, 2, -2, 2, -1),
                                     (2, -6, 8, -6, 2),
                                     (-2, 8, -12, 8, -2),
                                     (0, 0, 0, 0, 0),
                                     (0, 0, 0, 0, 0))),
    ("edge_5x5_bottom", "edge5x5", 12, ((0, 0, 0, 0, 0),
                                        (0, 0, 0, 0, 0),
                                        (-2, 8, -12, 8, -2),
                                        (2, -6, 8, -6, 2),
                                        (-1, 2, -2, 2, -1))),
    ("edge_5x5_right", "edge5x5", 12, ((0, 0, -2, 2, -1),
                                       (0, 0, 8, -6, 2),
                                       (0, 0, -12, 8, -2),
                                       (0, 0, 8, -6, 2),
                                       (0, 0, -2, 2, -1))),
    ("edge_5x5_left", "edge5x5", 12, ((-1, 2, -2, 0, 0),
                                      (2, -6, 8, 0, 0),
                                      (-2, 8, -12, 0, 0),
                                      (2, -6, 8, 0, 0),
                                      (-1, 2, -2, 0, 0))),
)

# guards the embedded tap asset against accidental edits
_BANK_SHA256 = "f2fadb92735f837e178a365c310b2e4889f6371d5e70bdf71d271f729a6229f8"


@dataclass(frozen=True)
class SrmKernel:
    name: str
    family: str
    normalizer: int
    taps: tuple  # integer taps, native 3x3 or 5x5

    def matrix(self, dtype=np.float64) -> np.ndarray:
        """Normalized taps at native size."""
        return np.asarray(self.taps, dtype=dtype) / self.normalizer

    def padded(self, dtype=np.float64) -> np.ndarray:
        """Normalized taps centered in a 5x5 frame."""
        m = self.matrix(dtype)
        if m.shape == (5, 5):
            return m
        out = np.zeros((5, 5), dtype=dtype)
        out[1:4, 1:4] = m
        return out


class FilterBank:
    """Immutable registry of the 30 kernels and the named subsets."""

    def __init__(self, kernels, subsets):
        self.kernels = tuple(kernels)
        self.by_name = {k.name: k for k in self.kernels}
        self.subsets = dict(subsets)

    def __len__(self):
        return len(self.kernels)

    def subset(self, name: str) -> tuple[SrmKernel, ...]:
        """Resolve a registry subset name, or a single kernel name, to kernels."""
        if name in self.subsets:
            return tuple(self.by_name[n] for n in self.subsets[name])
        if name in self.by_name:
            return (self.by_name[name],)
        raise KeyError(f"unknown filter subset or kernel: {name!r}")


def _canonical_bytes() -> bytes:
    return json.dumps([[n, f, d, [list(r) for r in taps]]
                       for n, f, d, taps in _KERNEL_TABLE]).encode()


@lru_cache(maxsize=1)
def load_bank() -> FilterBank:
    """Build the verified 30-kernel bank with its subset registry."""
    digest = hashlib.sha256(_canonical_bytes()).hexdigest()
    if digest != _BANK_SHA256:
        raise ValueError("SRM kernel asset corrupted: checksum mismatch")
    kernels = [SrmKernel(n, f, d, taps) for n, f, d, taps in _KERNEL_TABLE]
    for k in kernels:
        if sum(sum(r) for r in k.taps) != 0:
            raise ValueError(f"kernel {k.name} is not zero-sum")
    names = [k.name for k in kernels]
    fam = lambda *families: tuple(k.name for k in kernels if k.family in families)
    subsets = {
        "first_order": fam("first_order"),
        "second_order": fam("second_order"),
        "third_order": fam("third_order"),
        "all_3x3": fam("first_order", "second_order", "square3x3", "edge3x3"),
        "all_5x5": fam("third_order", "square5x5", "edge5x5"),
        "all_30": tuple(names),
    }
    return FilterBank(kernels, subsets)


def apply_bank(rgb: Tensor4, kernels) -> Tensor4:
    """Filter each of R, G, B with every kernel (reflect padding, stride 1).

    Input is expected in 0-255 scale; output has 3 * len(kernels) channels in
    kernel-major order and the input's spatial size and dtype.
    """
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ValueError(f"expected (n, 3, h, w) input, got {rgb.shape}")
    n, _, h, w = rgb.shape
    if h < 5 or w < 5:
        raise ValueError("input must be at least 5x5")
    k = len(kernels)
    padded = np.pad(rgb, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="reflect")
    flat = padded.reshape(n * 3, 1, h + 4, w + 4)
    weights = np.stack([kern.padded(rgb.dtype) for kern in kernels])[:, None]
    res = conv2d_forward(flat, weights, np.zeros(k, dtype=rgb.dtype), stride=1, pad=0)
    return res.reshape(n, 3, k, h, w).transpose(0, 2, 1, 3, 4).reshape(n, 3 * k, h, w)


def format_kernels(bank: FilterBank) -> str:
    """Human-readable dump of every kernel for audit."""
    lines = []
    for kern in bank.kernels:
        lines.append(f"{kern.name}  family={kern.family}  normalizer=1/{kern.normalizer}")
        for row in kern.taps:
            lines.append("    " + " ".join(f"{v:4d}" for v in row))
        lines.append("")
    lines.append("subsets: " + ", ".join(
        f"{name}({len(members)})" for name, members in bank.subsets.items()))
    return "\n".join(lines)
