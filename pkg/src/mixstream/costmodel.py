"""Analytic buffer, SRAM, DRAM and timing model for the two-group dataflow.

Layers ``1..i`` (conv ordinals) form the line-buffered pipeline that re-reads
weights once per output row; layers ``i+1..L`` run one at a time on the shared
main layer out of whole-frame buffers.  On-chip sizes are in bits, DRAM traffic
in bytes, times in cycles (kept as exact ``Fraction``).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence, Union

from .netmodel import LayerDesc, NetworkDesc, Precision, layer_params, output_fmap_elems

PIPELINED = "pipelined"
MAIN = "main"

MIB = 1 << 20

Bits = Union[int, Fraction]


@dataclass(frozen=True)
class BufferSizes:
    row_buff: int = 0
    line_out_buff: int = 0
    in_frame_buff: int = 0
    frame_out_buff: int = 0
    shortcut_buff: int = 0
    param_store: int = 0


@dataclass(frozen=True)
class CostReport:
    boundary: int
    sram_bits: int
    dram_bytes_per_frame: int
    t_g1: Fraction
    t_g2: Fraction
    frame_rate: Fraction
    multipliers: int
    # conv ordinals whose t_l is not a whole number of cycles
    fractional_time_layers: tuple[int, ...] = ()

    @property
    def sram_mib(self) -> float:
        return self.sram_bits / 8 / MIB

    @property
    def dram_mib(self) -> float:
        return self.dram_bytes_per_frame / MIB


def weight_bits(net: NetworkDesc, layer: LayerDesc, overrides: Mapping[int, Bits] | None = None) -> Bits:
    """Storage bits per weight for ``layer``; overrides are keyed by layer id."""
    if overrides and layer.id in overrides:
        return overrides[layer.id]
    return net.precision.q_w


def param_bits(layer: LayerDesc, bits: Bits) -> int:
    total = layer_params(layer) * Fraction(bits)
    return -(-total.numerator // total.denominator)


def param_bytes(layer: LayerDesc, bits: Bits) -> int:
    return -(-param_bits(layer, bits) // 8)


def buffer_sizes(layer: LayerDesc, prec: Precision, t_o: int, group: str, *,
                 shortcut_elems: int = 0, bits: Bits | None = None) -> BufferSizes:
    if t_o < 1:
        raise ValueError("t_o must be >= 1")
    store = param_bits(layer, prec.q_w if bits is None else bits)
    if group == PIPELINED:
        return BufferSizes(
            row_buff=(layer.k + 1) * layer.n * layer.w_in * prec.q_a,
            line_out_buff=t_o * layer.w_out * prec.q_s,
            param_store=store,
        )
    if group == MAIN:
        return BufferSizes(
            in_frame_buff=layer.h_in * layer.w_in * layer.n * prec.q_a,
            frame_out_buff=t_o * layer.h_out * layer.w_out * prec.q_s,
            shortcut_buff=shortcut_elems * prec.q_a,
            param_store=store,
        )
    raise ValueError(f"unknown group {group!r}")


def shortcut_elems(net: NetworkDesc, layer: LayerDesc) -> int:
    if layer.shortcut_from is None:
        return 0
    return output_fmap_elems(net.by_id[layer.shortcut_from])


def _t_o_list(net: NetworkDesc, tilings) -> Sequence[int]:
    t_o = getattr(tilings, "t_o", None)
    if t_o is None:
        t_o = [pair[1] for pair in tilings]
    if len(t_o) != len(net.conv_layers):
        raise ValueError(f"tilings cover {len(t_o)} conv layers, network has {len(net.conv_layers)}")
    return t_o


def _check_boundary(net: NetworkDesc, i: int):
    if not 0 <= i <= len(net.conv_layers):
        raise ValueError(f"boundary {i} outside [0, {len(net.conv_layers)}]")


def sram_size(net: NetworkDesc, i: int, tilings, params_on_chip: bool = False,
              weight_overrides: Mapping[int, Bits] | None = None) -> int:
    """On-chip bits for boundary ``i``; group-1 weights are included when ``params_on_chip``."""
    _check_boundary(net, i)
    t_o = _t_o_list(net, tilings)
    prec = net.precision
    total = 0
    in_frame = shortcut = frame_out = 0
    for j, layer in enumerate(net.conv_layers):
        bits = weight_bits(net, layer, weight_overrides)
        if j < i:
            b = buffer_sizes(layer, prec, t_o[j], PIPELINED, bits=bits)
            total += b.row_buff + b.line_out_buff
            if params_on_chip:
                total += b.param_store
        else:
            b = buffer_sizes(layer, prec, t_o[j], MAIN, bits=bits,
                             shortcut_elems=shortcut_elems(net, layer))
            in_frame = max(in_frame, b.in_frame_buff)
            shortcut = max(shortcut, b.shortcut_buff)
            frame_out = max(frame_out, b.frame_out_buff)
    return total + 3 * in_frame + shortcut + frame_out


def dram_access(net: NetworkDesc, i: int, params_on_chip: bool = False,
                weight_overrides: Mapping[int, Bits] | None = None) -> int:
    """Weight bytes fetched per frame.  Input image and final outputs are not counted."""
    _check_boundary(net, i)
    total = 0
    for j, layer in enumerate(net.conv_layers):
        nbytes = param_bytes(layer, weight_bits(net, layer, weight_overrides))
        if j < i:
            if not params_on_chip:
                total += layer.h_out * nbytes
        else:
            total += nbytes
    return total


def layer_time(layer: LayerDesc, pf: int) -> Fraction:
    if pf < 1:
        raise ValueError("parallelism factor must be >= 1")
    return Fraction(layer.h_out * layer.w_out * layer.n * layer.m, pf)


def _pf_list(net: NetworkDesc, tilings) -> list[int]:
    pf = getattr(tilings, "pf", None)
    if pf is not None:
        return list(pf)
    return [a * b for a, b in tilings]


def group_times(net: NetworkDesc, i: int, tilings) -> tuple[Fraction, Fraction]:
    """(pipeline time of group 1 including fill delay, summed main-layer time)."""
    _check_boundary(net, i)
    pf = _pf_list(net, tilings)
    convs = net.conv_layers
    delays = net.conv_delays
    t_g1 = Fraction(0)
    if i > 0:
        for j in range(i - 1):
            t_g1 += delays[j] * layer_time(convs[j], pf[j]) / convs[j].h_out
        t_g1 += layer_time(convs[i - 1], pf[i - 1])
    t_g2 = sum((layer_time(convs[j], pf[j]) for j in range(i, len(convs))), Fraction(0))
    return t_g1, t_g2
