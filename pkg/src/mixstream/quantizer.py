"""Channel-wise mixed 1-bit/8-bit weight quantization and compression accounting.

Every weight keeps a sign bit scaled by its filter's mean magnitude ``alpha``;
the largest-magnitude fraction ``p`` of each filter additionally stores an
8-bit residual ``w - sign*alpha`` on a per-layer symmetric scale ``s_r``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import SchemaError
from .netmodel import NetworkDesc, layer_params

INT8_MAX = 127


def _exact(p) -> Fraction:
    return Fraction(repr(p)) if isinstance(p, float) else Fraction(p)


def large_count(p, n: int) -> int:
    """``ceil(p * n)`` evaluated on the decimal value of ``p`` (0.035 * 200 -> 7, not 8)."""
    if not 0 <= p <= 1:
        raise ValueError(f"ratio p={p} outside [0, 1]")
    return math.ceil(_exact(p) * n)


def partition_filter(weights, p) -> tuple[np.ndarray, np.ndarray]:
    """Split flat positions into (small, large); large holds the top ``ceil(p*n)`` magnitudes.

    Ties on magnitude go to the lower position.  Both arrays come back sorted.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    count = large_count(p, w.size)
    idx = np.arange(w.size)
    order = np.lexsort((idx, -np.abs(w)))
    large = np.sort(order[:count])
    small = np.sort(order[count:])
    return small, large


@dataclass
class FilterRecord:
    alpha: float
    signs: np.ndarray       # bool, True = +1
    large: np.ndarray       # flat positions with residuals
    residuals: np.ndarray   # unquantized w - sign*alpha at ``large``


def _signs(w: np.ndarray) -> np.ndarray:
    return w >= 0


def _alpha(w: np.ndarray, small: np.ndarray, mode: str) -> np.float32:
    if mode == "small":
        sel = np.abs(w[small])
    elif mode == "all":
        sel = np.abs(w)
    else:
        raise ValueError(f"alpha mode must be 'small' or 'all', got {mode!r}")
    return np.float32(sel.mean()) if sel.size else np.float32(0.0)


def quantize_filter(weights, p, alpha_mode: str = "small") -> FilterRecord:
    w = np.asarray(weights, dtype=np.float64).ravel()
    small, large = partition_filter(w, p)
    alpha = _alpha(w, small, alpha_mode)
    signs = _signs(w)
    sign_val = np.where(signs[large], 1.0, -1.0)
    return FilterRecord(float(alpha), signs, large, w[large] - sign_val * float(alpha))


@dataclass(eq=False)
class MixedLayerWeights:
    """Quantized layer.  Residuals are flat arrays sorted by (filter, position)."""

    shape: tuple[int, int, int, int]  # (M, N, K, K)
    alpha: np.ndarray                 # float32 (M,)
    signs: np.ndarray                 # bool (M, N, K, K)
    res_filter: np.ndarray            # int64 (nnz,)
    res_pos: np.ndarray               # int64 (nnz,), position within the filter
    res_val: np.ndarray               # int8 (nnz,)
    s_r: np.float32
    p: float = 0.0
    layer_id: int = 0

    @property
    def m(self) -> int:
        return self.shape[0]

    @property
    def filter_size(self) -> int:
        return self.shape[1] * self.shape[2] * self.shape[3]

    @property
    def nnz(self) -> int:
        return int(self.res_val.size)

    def counts_per_filter(self) -> np.ndarray:
        return np.bincount(self.res_filter, minlength=self.m)

    def equals(self, other: "MixedLayerWeights") -> bool:
        """Bit-exact comparison of every stored field."""
        return (
            self.shape == other.shape
            and self.layer_id == other.layer_id
            and np.float32(self.p).tobytes() == np.float32(other.p).tobytes()
            and np.float32(self.s_r).tobytes() == np.float32(other.s_r).tobytes()
            and self.alpha.astype(np.float32).tobytes() == other.alpha.astype(np.float32).tobytes()
            and np.array_equal(self.signs, other.signs)
            and np.array_equal(self.res_filter, other.res_filter)
            and np.array_equal(self.res_pos, other.res_pos)
            and np.array_equal(self.res_val, other.res_val)
        )


def quantize_layer(weights, p, *, layer_id: int = 0, alpha_mode: str = "small",
                   partition: str = "channel") -> MixedLayerWeights:
    """Quantize an ``(M, N, K, K)`` tensor.

    ``partition="layer"`` picks the large weights across the whole layer
    instead of per filter (the layer-wise baseline used for comparisons).
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"expected (M, N, K, K) weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    m = w.shape[0]
    flat = w.reshape(m, -1)
    n = flat.shape[1]

    if partition == "channel":
        large_sets = [partition_filter(flat[f], p)[1] for f in range(m)]
    elif partition == "layer":
        _, large_all = partition_filter(flat, p)
        large_sets = [large_all[large_all // n == f] % n for f in range(m)]
    else:
        raise ValueError(f"partition must be 'channel' or 'layer', got {partition!r}")

    alpha = np.zeros(m, dtype=np.float32)
    res_filter, res_pos, res_raw = [], [], []
    for f in range(m):
        large = large_sets[f]
        small = np.setdiff1d(np.arange(n), large, assume_unique=True)
        alpha[f] = _alpha(flat[f], small, alpha_mode)
        sign_val = np.where(flat[f, large] >= 0, 1.0, -1.0)
        res_filter.append(np.full(large.size, f, dtype=np.int64))
        res_pos.append(large.astype(np.int64))
        res_raw.append(flat[f, large] - sign_val * float(alpha[f]))

    res_filter = np.concatenate(res_filter) if m else np.zeros(0, np.int64)
    res_pos = np.concatenate(res_pos) if m else np.zeros(0, np.int64)
    raw = np.concatenate(res_raw) if m else np.zeros(0)
    peak = float(np.abs(raw).max()) if raw.size else 0.0
    s_r = np.float32(peak / INT8_MAX) if peak > 0 else np.float32(1.0)
    if s_r == 0:  # peak below float32 resolution
        s_r = np.float32(np.finfo(np.float32).tiny)
    vals = np.clip(np.rint(raw / float(s_r)), -INT8_MAX, INT8_MAX).astype(np.int8)
    return MixedLayerWeights(
        shape=tuple(int(d) for d in w.shape), alpha=alpha, signs=_signs(w),
        res_filter=res_filter, res_pos=res_pos, res_val=vals, s_r=s_r,
        p=float(p), layer_id=layer_id,
    )


def reconstruct(mixed: MixedLayerWeights) -> np.ndarray:
    """Effective real weights: ``sign*alpha`` everywhere plus ``s_r*v`` on residual positions."""
    m = mixed.m
    sign = np.where(mixed.signs.reshape(m, -1), 1.0, -1.0)
    out = sign * mixed.alpha.astype(np.float64)[:, None]
    np.add.at(out, (mixed.res_filter, mixed.res_pos), float(mixed.s_r) * mixed.res_val.astype(np.float64))
    return out.reshape(mixed.shape)


def to_fixed(x, frac_bits: int = 12, width: int = 16) -> int:
    """Round a non-negative scale to a signed ``width``-bit fixed-point integer."""
    q = int(np.rint(float(x) * (1 << frac_bits)))
    if abs(q) >= 1 << (width - 1):
        raise OverflowError(f"{float(x):g} does not fit {width}-bit fixed point with {frac_bits} fraction bits")
    return q


def reconstruct_fixed(mixed: MixedLayerWeights, frac_bits: int = 12, width: int = 16) -> np.ndarray:
    """Integer weights ``sign*alpha_q + v*s_q`` shared by the dense and sparse datapaths."""
    m = mixed.m
    alpha_q = np.array([to_fixed(a, frac_bits, width) for a in mixed.alpha], dtype=np.int64)
    s_q = to_fixed(mixed.s_r, frac_bits, width)
    sign = np.where(mixed.signs.reshape(m, -1), 1, -1).astype(np.int64)
    out = sign * alpha_q[:, None]
    np.add.at(out, (mixed.res_filter, mixed.res_pos), mixed.res_val.astype(np.int64) * s_q)
    return out.reshape(mixed.shape)


def compression_rate(p, n_i, n_total):
    return 32 / (1 + 7 * p) * n_i / n_total


def layer_bits(p) -> float:
    """Bits per weight charged to a quantized layer at ratio ``p``."""
    return 1 + 7 * p


def effective_bits(net: NetworkDesc, ratios: Mapping[int, float]) -> dict[int, Fraction]:
    """Per-layer storage bits (keyed by layer id) for the cost model."""
    out = {}
    for l in net.conv_layers:
        if l.quantize:
            if l.id not in ratios:
                raise KeyError(f"no ratio for quantized layer {l.id}")
            out[l.id] = 1 + 7 * _exact(ratios[l.id])
        else:
            out[l.id] = Fraction(net.precision.q_full)
    return out


def avg_bits(net: NetworkDesc, ratios: Mapping[int, float]) -> float:
    total_bits = 0.0
    total = 0
    for l in net.conv_layers:
        n = layer_params(l)
        if l.quantize:
            if l.id not in ratios:
                raise KeyError(f"no ratio for quantized layer {l.id}")
            total_bits += layer_bits(ratios[l.id]) * n
        else:
            total_bits += net.precision.q_full * n
        total += n
    return total_bits / total


def objective(accuracy, compression, gamma=0.01):
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return accuracy + gamma * compression


# --- weight tensor file -----------------------------------------------------

WEIGHT_MAGIC = b"MPQW"
WEIGHT_VERSION = 1


def write_weight_file(path: str | Path, tensors: Mapping[int, np.ndarray]) -> None:
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(tensors))]
    for lid in sorted(tensors):
        t = np.asarray(tensors[lid], dtype="<f4")
        if t.ndim != 4:
            raise ValueError(f"tensor for layer {lid} must be (M, N, K, K)")
        parts.append(struct.pack("<5I", lid, *t.shape))
        parts.append(np.ascontiguousarray(t).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_weight_file(path: str | Path) -> dict[int, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHT_MAGIC:
        raise SchemaError(f"{path}: bad magic {data[:4]!r}, expected {WEIGHT_MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != WEIGHT_VERSION:
        raise SchemaError(f"{path}: unsupported weight file version {version}")
    off = 12
    out = {}
    for _ in range(count):
        if off + 20 > len(data):
            raise SchemaError(f"{path}: truncated tensor header")
        lid, m, n, k1, k2 = struct.unpack_from("<5I", data, off)
        off += 20
        size = m * n * k1 * k2 * 4
        if off + size > len(data):
            raise SchemaError(f"{path}: truncated data for layer {lid}")
        out[lid] = np.frombuffer(data, dtype="<f4", count=m * n * k1 * k2, offset=off).reshape(m, n, k1, k2).copy()
        off += size
    if off != len(data):
        raise SchemaError(f"{path}: {len(data) - off} trailing bytes")
    return out
