"""Brute-force oracles: integer convolution and a loop-nest traffic counter.

The convolution pair checks that running the dense sign path and the sparse
residual path separately gives exactly the accumulators of a direct
convolution with the reconstructed fixed-point weights.

The traffic counter walks the tile loops of each layer and tallies weight
fetches, feature-map traffic, buffer capacity and idealized cycles without
calling into the analytic cost model, so the two can be compared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from .errors import AccumulatorOverflowError
from .netmodel import LayerDesc, NetworkDesc
from .quantizer import quantize_layer, reconstruct_fixed, to_fixed
from .sparsefmt import EncodedLayer, _block_entries, _global_positions, decode, encode

# --- integer convolution ------------------------------------------------------


@dataclass(frozen=True)
class QuantTensor:
    data: np.ndarray  # integer (H, W, C)
    bits: int = 8
    scale: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"activations must be (H, W, C), got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("activations must be integers")
        lo, hi = -(1 << (self.bits - 1)), (1 << (self.bits - 1)) - 1
        if arr.size and (arr.min() < lo or arr.max() > hi):
            raise ValueError(f"activations outside the signed {self.bits}-bit range")
        object.__setattr__(self, "data", arr.astype(np.int64))


def _patches(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(H_out*W_out, C*K*K) windows with zero 'same' padding; column order is (c, ky, kx)."""
    h, w, c = x.shape
    h_out, w_out = -(-h // stride), -(-w // stride)
    pad = k // 2
    pad_h = max((h_out - 1) * stride + k - h, 0)
    pad_w = max((w_out - 1) * stride + k - w, 0)
    xp = np.pad(x, ((pad, max(pad_h - pad, 0)), (pad, max(pad_w - pad, 0)), (0, 0)))
    cols = np.empty((h_out, w_out, c, k, k), dtype=np.int64)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, :, ky, kx] = xp[ky:ky + stride * h_out:stride, kx:kx + stride * w_out:stride, :]
    return cols.reshape(h_out * w_out, c * k * k), h_out, w_out


def _check_range(acc: np.ndarray, q_s: int) -> np.ndarray:
    bound = 1 << (q_s - 1)
    if acc.size and (acc.min() < -bound or acc.max() >= bound):
        raise AccumulatorOverflowError(f"accumulator exceeds the signed {q_s}-bit range")
    return acc


def direct_conv(x: QuantTensor, weights: np.ndarray, *, q_s: int = 32, stride: int = 1) -> np.ndarray:
    """Exact integer convolution; ``weights`` are integers of shape (M, N, K, K)."""
    w = np.asarray(weights)
    if not np.issubdtype(w.dtype, np.integer):
        raise ValueError("direct_conv takes integer (fixed-point) weights")
    m, n, k, _ = w.shape
    if x.data.shape[2] != n:
        raise ValueError(f"input has {x.data.shape[2]} channels, weights expect {n}")
    cols, h_out, w_out = _patches(x.data, k, stride)
    acc = cols @ w.reshape(m, -1).astype(np.int64).T
    return _check_range(acc.reshape(h_out, w_out, m), q_s)


def mixed_conv(x: QuantTensor, enc: EncodedLayer, *, q_s: int = 32, stride: int = 1,
               frac_bits: int = 12) -> np.ndarray:
    """Sign-gated dense sums scaled by ``alpha`` plus residual products read from the entry stream."""
    if x.data.shape[2] != enc.n:
        raise ValueError(f"input has {x.data.shape[2]} channels, layer expects {enc.n}")
    fsize = enc.n * enc.k * enc.k
    cols, h_out, w_out = _patches(x.data, enc.k, stride)

    signs = np.unpackbits(enc.sign_bits, axis=1, bitorder="little", count=fsize).astype(np.int64)
    sign_sum = cols @ (2 * signs - 1).T  # add where positive, subtract otherwise
    alpha_q = np.array([to_fixed(a, frac_bits) for a in enc.alpha], dtype=np.int64)
    dense = sign_sum * alpha_q

    block, coords, values = _block_entries(enc)
    filt, ch, k_pos = _global_positions(enc, block, coords)
    sparse = np.zeros((h_out * w_out, enc.m), dtype=np.int64)
    products = cols[:, ch * enc.k * enc.k + k_pos] * values.astype(np.int64)
    np.add.at(sparse.T, filt, products.T)
    acc = dense + sparse * to_fixed(enc.s_r, frac_bits)
    return _check_range(acc.reshape(h_out, w_out, enc.m), q_s)


@dataclass(frozen=True)
class ConvCheck:
    passed: int
    total: int
    first_failure: dict | None = None


def random_conv_case(rng: np.random.Generator) -> dict:
    m, n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    k = int(rng.choice([1, 3, 5]))
    h, w = int(rng.integers(1, 11)), int(rng.integers(1, 11))
    return {
        "weights": rng.normal(0.0, 0.2, size=(m, n, k, k)),
        "p": float(rng.choice([0.0, rng.uniform(0, 0.3), rng.uniform(0, 1), 1.0])),
        "t_i": int(rng.choice([1, 2, 4, 8])),
        "t_o": int(rng.choice([1, 2, 4, 8])),
        "stride": int(rng.choice([1, 2])),
        "x": rng.integers(-128, 128, size=(h, w, n)),
    }


def check_conv_case(case: dict) -> tuple[bool, np.ndarray, np.ndarray]:
    mixed = quantize_layer(case["weights"], case["p"])
    enc = encode(mixed, case["t_i"], case["t_o"])
    x = QuantTensor(case["x"], bits=8)
    got = mixed_conv(x, enc, stride=case["stride"])
    want = direct_conv(x, reconstruct_fixed(decode(enc)), stride=case["stride"])
    return bool(np.array_equal(got, want)), got, want


def verify_conv(cases: int = 200, seed: int = 0) -> ConvCheck:
    rng = np.random.default_rng(seed)
    for j in range(cases):
        case = random_conv_case(rng)
        ok, got, want = check_conv_case(case)
        if not ok:
            diff = np.argwhere(got != want)[0]
            return ConvCheck(j, cases, {
                "case": j, "shape": case["weights"].shape, "p": case["p"],
                "position": tuple(int(v) for v in diff),
                "mixed": int(got[tuple(diff)]), "direct": int(want[tuple(diff)]),
            })
    return ConvCheck(cases, cases)


# --- loop-nest traffic counter ---------------------------------------------------

SCHEME_ROW_STREAM = "scheme3"   # group 1: weights re-fetched for every output row
SCHEME_FRAME = "scheme2"        # main layer: whole frames on chip, inputs re-read per output tile
COUNTER_HEADER = ("layer", "scheme", "dram_weight_bytes", "dram_fmap_read_bytes",
                  "dram_fmap_write_bytes", "sram_peak_bits", "cycles")


@dataclass
class TrafficCounters:
    dram_weight_bytes: int = 0
    dram_fmap_read_bytes: int = 0
    dram_fmap_write_bytes: int = 0
    sram_peak_bits: int = 0
    cycles: Fraction = Fraction(0)
    input_passes: int = 0  # times the layer's input is streamed through the kernel

    def add(self, other: "TrafficCounters") -> None:
        self.dram_weight_bytes += other.dram_weight_bytes
        self.dram_fmap_read_bytes += other.dram_fmap_read_bytes
        self.dram_fmap_write_bytes += other.dram_fmap_write_bytes
        self.input_passes += other.input_passes


@dataclass
class LayerTraffic:
    layer_id: int
    name: str
    scheme: str
    counters: TrafficCounters


@dataclass
class TrafficReport:
    layers: list[LayerTraffic] = field(default_factory=list)
    totals: TrafficCounters = field(default_factory=TrafficCounters)

    def to_csv(self) -> str:
        lines = [",".join(COUNTER_HEADER)]
        for row in self.layers:
            lines.append(_csv_row(row.name, row.scheme, row.counters))
        lines.append(_csv_row("total", "", self.totals))
        return "\n".join(lines) + "\n"


def _fmt_cycles(c: Fraction) -> str:
    return str(c.numerator) if c.denominator == 1 else f"{float(c):.6f}"


def _csv_row(name, scheme, c: TrafficCounters) -> str:
    return ",".join([name, scheme, str(c.dram_weight_bytes), str(c.dram_fmap_read_bytes),
                     str(c.dram_fmap_write_bytes), str(c.sram_peak_bits), _fmt_cycles(c.cycles)])


def _ceil(x: Fraction) -> int:
    return -(-x.numerator // x.denominator)


def _fetch_weights(layer: LayerDesc, t_i: int, t_o: int, bits: Fraction) -> int:
    """Bytes of one sweep over every K x K x T_i x T_o weight block, fetched as one burst."""
    total = Fraction(0)
    for o0 in range(0, layer.m, t_o):
        for i0 in range(0, layer.n, t_i):
            total += layer.k * layer.k * (min(t_i, layer.n - i0) * min(t_o, layer.m - o0)) * bits
    return _ceil(_ceil(total) / Fraction(8))


def _tile_cycles(layer: LayerDesc, t_i: int, t_o: int, rows: int, out_tiles) -> Fraction:
    """Idealized cycles for ``rows`` output rows over the given output-tile offsets."""
    macs = 0
    for o0 in out_tiles:
        for i0 in range(0, layer.n, t_i):
            macs += rows * layer.w_out * layer.k * layer.k * min(t_i, layer.n - i0) * min(t_o, layer.m - o0)
    return Fraction(macs, layer.k * layer.k * t_i * t_o)


def _output_elems(layer: LayerDesc) -> int:
    return layer.h_out * layer.w_out * layer.m


def traffic_sim(net: NetworkDesc, plan, params_on_chip: bool | None = None,
                weight_overrides: Mapping[int, Fraction | int] | None = None) -> TrafficReport:
    """Count per-frame events for ``plan``.

    The input image and the final outputs are treated as host I/O and not
    counted; every intermediate map stays on chip, so feature-map DRAM
    counters remain zero unless a layer spills (it never does in this model).
    """
    on_chip = plan.params_on_chip if params_on_chip is None else params_on_chip
    prec = net.precision
    convs = net.conv_layers
    i = plan.boundary
    report = TrafficReport()
    capacity: dict[str, int] = {}

    def reserve(name: str, bits: int) -> None:
        capacity[name] = max(capacity.get(name, 0), bits)

    # fill delay per group-1 layer (rows the next layer waits for), including pools after it
    delay_rows = {}
    for idx, layer in enumerate(net.layers):
        if layer.is_conv:
            d = layer.delay
            for nxt in net.layers[idx + 1:]:
                if nxt.is_conv:
                    break
                d += nxt.delay
            delay_rows[layer.id] = d

    pipeline_fill = Fraction(0)
    for j, layer in enumerate(convs):
        bits = Fraction((weight_overrides or {}).get(layer.id, prec.q_w))
        t_i, t_o = plan.t_i[j], plan.t_o[j]
        c = TrafficCounters()
        if j < i:
            scheme = SCHEME_ROW_STREAM
            row_time = Fraction(0)
            for _row in range(layer.h_out):
                if not on_chip:
                    c.dram_weight_bytes += _fetch_weights(layer, t_i, t_o, bits)
                row_time = _tile_cycles(layer, t_i, t_o, 1, range(0, layer.m, t_o))
                c.cycles += row_time
                c.input_passes += 1
            live = {
                f"rows{j}": (layer.k + 1) * layer.w_in * layer.n * prec.q_a,
                f"line_out{j}": t_o * layer.w_out * prec.q_s,
            }
            if on_chip:
                live[f"weights{j}"] = _ceil(layer.k * layer.k * layer.n * layer.m * bits)
            if j < i - 1:
                pipeline_fill += delay_rows[layer.id] * row_time
            else:
                pipeline_fill += c.cycles
        else:
            scheme = SCHEME_FRAME
            c.dram_weight_bytes += _fetch_weights(layer, t_i, t_o, bits)
            for o0 in range(0, layer.m, t_o):
                c.input_passes += 1
                c.cycles += _tile_cycles(layer, t_i, t_o, layer.h_out, [o0])
            in_frame = layer.h_in * layer.w_in * layer.n * prec.q_a
            live = {"frame_in_a": in_frame, "frame_in_b": in_frame, "frame_in_c": in_frame,
                    "frame_out": t_o * layer.h_out * layer.w_out * prec.q_s}
            if layer.shortcut_from is not None:
                live["shortcut"] = _output_elems(net.by_id[layer.shortcut_from]) * prec.q_a
        for name, b in live.items():
            reserve(name, b)
        c.sram_peak_bits = sum(live.values())
        report.layers.append(LayerTraffic(layer.id, layer.name, scheme, c))
        report.totals.add(c)

    main_cycles = sum((r.counters.cycles for r in report.layers[i:]), Fraction(0))
    report.totals.cycles = pipeline_fill + main_cycles
    report.totals.sram_peak_bits = sum(capacity.values())
    return report
