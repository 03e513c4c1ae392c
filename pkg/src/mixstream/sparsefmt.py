"""Block-sparse serialization of mixed-precision layers and sparse-kernel sizing.

Layout of one layer
-------------------
* header: ``layer_id, M, N, K, T_i, T_o, coord_bits, B, nnz`` as u32 LE, then
  ``p`` and ``s_r`` as f32 LE (44 bytes)
* dense section: per output filter an f32 ``alpha`` followed by its sign
  bitplane (1 = positive), packed LSB-first and padded to a byte
* block info: ``B`` u16 LE counts, one per ``K x K x T_i x T_o`` block, blocks
  ordered output-tile major then input-tile
* entry stream: per residual a ``coord_bits`` relative coordinate then the
  int8 value (two's complement), packed LSB-first with no gaps; byte padding
  only at the end of the layer

The relative coordinate inside a block is ``(k_pos * T_i + t_i) * T_o + t_o``
with ``k_pos = ky * K + kx``.  Channels that do not fill a tile are padded
with empty filters that never carry residuals.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CoordinateOverflowError, CorruptLayerError, SchemaError
from .quantizer import MixedLayerWeights

ENCODED_MAGIC = b"MPQE"
ENCODED_VERSION = 1
_HEADER = struct.Struct("<9I2f")
U16_MAX = 0xFFFF


@dataclass(eq=False)
class EncodedLayer:
    layer_id: int
    m: int
    n: int
    k: int
    t_i: int
    t_o: int
    coord_bits: int
    p: np.float32
    s_r: np.float32
    alpha: np.ndarray       # float32 (M,)
    sign_bits: np.ndarray   # uint8 (M, ceil(N*K*K / 8))
    counts: np.ndarray      # uint16 (B,)
    stream: bytes

    @property
    def n_in_tiles(self) -> int:
        return -(-self.n // self.t_i)

    @property
    def n_out_tiles(self) -> int:
        return -(-self.m // self.t_o)

    @property
    def blocks(self) -> int:
        return self.n_in_tiles * self.n_out_tiles

    @property
    def block_positions(self) -> int:
        return self.k * self.k * self.t_i * self.t_o

    @property
    def nnz(self) -> int:
        return int(self.counts.sum(dtype=np.int64))

    @property
    def entry_bits(self) -> int:
        return self.coord_bits + 8


@dataclass(frozen=True)
class KernelStats:
    n_multipliers: int
    tree_size: int


@dataclass(frozen=True)
class SectionSizes:
    sparse: int
    dense: int
    header: int = _HEADER.size

    @property
    def total(self) -> int:
        return self.sparse + self.dense + self.header


def required_coord_bits(positions: int) -> int:
    return max(1, (positions - 1).bit_length())


def _pack_entries(coords: np.ndarray, values: np.ndarray, coord_bits: int) -> bytes:
    width = coord_bits + 8
    if coords.size == 0:
        return b""
    words = coords.astype(np.uint64) | (values.astype(np.uint8).astype(np.uint64) << np.uint64(coord_bits))
    bits = (words[:, None] >> np.arange(width, dtype=np.uint64)) & np.uint64(1)
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder="little").tobytes()


def unpack_entries(stream: bytes, count: int, coord_bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Read ``count`` (coordinate, int8 value) pairs from a packed entry stream."""
    width = coord_bits + 8
    if count == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int8)
    bits = np.unpackbits(np.frombuffer(stream, dtype=np.uint8), bitorder="little",
                         count=count * width).reshape(count, width).astype(np.uint64)
    words = (bits << np.arange(width, dtype=np.uint64)).sum(axis=1, dtype=np.uint64)
    coords = (words & np.uint64((1 << coord_bits) - 1)).astype(np.int64)
    values = (words >> np.uint64(coord_bits)).astype(np.uint8).view(np.int8)
    return coords, values


def encode(mixed: MixedLayerWeights, t_i: int, t_o: int, coord_bits: int = 12) -> EncodedLayer:
    m, n, k, _ = mixed.shape
    if t_i < 1 or t_o < 1:
        raise ValueError("tiles must be >= 1")
    positions = k * k * t_i * t_o
    if positions > 1 << coord_bits:
        raise CoordinateOverflowError(positions, coord_bits, required_coord_bits(positions))
    kk = k * k
    n_in_tiles = -(-n // t_i)
    n_blocks = n_in_tiles * -(-m // t_o)

    f = mixed.res_filter
    ch, k_pos = np.divmod(mixed.res_pos, kk)
    out_tile, o_idx = np.divmod(f, t_o)
    in_tile, i_idx = np.divmod(ch, t_i)
    block = out_tile * n_in_tiles + in_tile
    coord = (k_pos * t_i + i_idx) * t_o + o_idx
    order = np.lexsort((coord, block))
    counts = np.bincount(block, minlength=n_blocks)
    if counts.size and counts.max() > U16_MAX:
        raise ValueError(f"block holds {counts.max()} residuals, more than a u16 count allows")

    sign_bits = np.packbits(mixed.signs.reshape(m, -1), axis=1, bitorder="little")
    return EncodedLayer(
        layer_id=mixed.layer_id, m=m, n=n, k=k, t_i=t_i, t_o=t_o, coord_bits=coord_bits,
        p=np.float32(mixed.p), s_r=np.float32(mixed.s_r),
        alpha=mixed.alpha.astype(np.float32), sign_bits=sign_bits,
        counts=counts.astype(np.uint16),
        stream=_pack_entries(coord[order], mixed.res_val[order], coord_bits),
    )


def _check_stream(enc: EncodedLayer) -> None:
    need = -(-enc.nnz * enc.entry_bits // 8)
    if len(enc.stream) == need:
        return
    if len(enc.stream) > need:
        raise CorruptLayerError(f"entry stream has {len(enc.stream)} bytes, counts imply {need}")
    available = len(enc.stream) * 8 // enc.entry_bits
    cum = np.cumsum(enc.counts.astype(np.int64))
    block = int(np.searchsorted(cum, available, side="right"))
    raise CorruptLayerError(
        f"entry stream truncated: {len(enc.stream)} bytes for {enc.nnz} entries", block=block)


def _block_entries(enc: EncodedLayer):
    """(block index, coordinate, value) per entry, validated."""
    _check_stream(enc)
    coords, values = unpack_entries(enc.stream, enc.nnz, enc.coord_bits)
    block = np.repeat(np.arange(enc.blocks), enc.counts.astype(np.int64))
    if coords.size:
        bad = np.nonzero(coords >= enc.block_positions)[0]
        if bad.size:
            raise CorruptLayerError(f"coordinate {coords[bad[0]]} outside block", block=int(block[bad[0]]))
        same_block = block[1:] == block[:-1]
        not_rising = np.nonzero(same_block & (coords[1:] <= coords[:-1]))[0]
        if not_rising.size:
            raise CorruptLayerError("duplicate or unsorted coordinates", block=int(block[not_rising[0] + 1]))
    return block, coords, values


def _global_positions(enc: EncodedLayer, block: np.ndarray, coords: np.ndarray):
    out_tile, in_tile = np.divmod(block, enc.n_in_tiles)
    rest, o_idx = np.divmod(coords, enc.t_o)
    k_pos, i_idx = np.divmod(rest, enc.t_i)
    filt = out_tile * enc.t_o + o_idx
    ch = in_tile * enc.t_i + i_idx
    return filt, ch, k_pos


def decode(enc: EncodedLayer) -> MixedLayerWeights:
    block, coords, values = _block_entries(enc)
    filt, ch, k_pos = _global_positions(enc, block, coords)
    pad = np.nonzero((filt >= enc.m) | (ch >= enc.n))[0]
    if pad.size:
        raise CorruptLayerError("residual in a padding channel", block=int(block[pad[0]]))
    pos = ch * enc.k * enc.k + k_pos
    order = np.lexsort((pos, filt))
    fsize = enc.n * enc.k * enc.k
    signs = np.unpackbits(enc.sign_bits, axis=1, bitorder="little", count=fsize).astype(bool)
    return MixedLayerWeights(
        shape=(enc.m, enc.n, enc.k, enc.k),
        alpha=enc.alpha.astype(np.float32),
        signs=signs.reshape(enc.m, enc.n, enc.k, enc.k),
        res_filter=filt[order].astype(np.int64),
        res_pos=pos[order].astype(np.int64),
        res_val=values[order],
        s_r=np.float32(enc.s_r),
        p=float(enc.p),
        layer_id=enc.layer_id,
    )


def kernel_stats(enc: EncodedLayer | Sequence[EncodedLayer]) -> KernelStats:
    """Largest residual count per ``KxKxT_ixT_o`` block and per ``KxKxT_i`` output slice.

    Given several layers (those sharing the main layer) the maxima are taken
    over all of them.
    """
    if not isinstance(enc, EncodedLayer):
        stats = [kernel_stats(e) for e in enc]
        return KernelStats(max((s.n_multipliers for s in stats), default=0),
                           max((s.tree_size for s in stats), default=0))
    if enc.nnz == 0:
        return KernelStats(0, 0)
    block, coords, _ = _block_entries(enc)
    slice_id = block * enc.t_o + coords % enc.t_o
    return KernelStats(int(enc.counts.max()), int(np.bincount(slice_id).max()))


def encoded_size(enc: EncodedLayer) -> SectionSizes:
    sparse = -(-enc.nnz * enc.entry_bits // 8) + 2 * enc.blocks
    dense = enc.m * (4 + enc.sign_bits.shape[1])
    return SectionSizes(sparse=sparse, dense=dense)


def serialize_layer(enc: EncodedLayer) -> bytes:
    head = _HEADER.pack(enc.layer_id, enc.m, enc.n, enc.k, enc.t_i, enc.t_o, enc.coord_bits,
                        enc.blocks, enc.nnz, float(enc.p), float(enc.s_r))
    dense = b"".join(
        np.float32(a).astype("<f4").tobytes() + enc.sign_bits[f].tobytes()
        for f, a in enumerate(enc.alpha)
    )
    return head + dense + enc.counts.astype("<u2").tobytes() + enc.stream


def parse_layer(data: bytes, offset: int = 0) -> tuple[EncodedLayer, int]:
    if offset + _HEADER.size > len(data):
        raise CorruptLayerError("truncated layer header")
    lid, m, n, k, t_i, t_o, cb, blocks, nnz, p, s_r = _HEADER.unpack_from(data, offset)
    off = offset + _HEADER.size
    if min(m, n, k, t_i, t_o) < 1 or not 1 <= cb <= 56:
        raise CorruptLayerError(f"layer {lid}: implausible header")
    row = -(-(n * k * k) // 8)
    dense_len = m * (4 + row)
    if off + dense_len > len(data):
        raise CorruptLayerError(f"layer {lid}: truncated dense section")
    rec = np.frombuffer(data, dtype=np.uint8, count=dense_len, offset=off).reshape(m, 4 + row)
    alpha = rec[:, :4].copy().view("<f4").ravel().astype(np.float32)
    sign_bits = rec[:, 4:].copy()
    off += dense_len
    if off + 2 * blocks > len(data):
        raise CorruptLayerError(f"layer {lid}: truncated block info")
    counts = np.frombuffer(data, dtype="<u2", count=blocks, offset=off).astype(np.uint16)
    off += 2 * blocks
    stream_len = -(-nnz * (cb + 8) // 8)
    stream = data[off:off + stream_len]
    off += len(stream)
    enc = EncodedLayer(lid, m, n, k, t_i, t_o, cb, np.float32(p), np.float32(s_r),
                       alpha, sign_bits, counts, stream)
    if enc.blocks != blocks:
        raise CorruptLayerError(f"layer {lid}: header says {blocks} blocks, geometry gives {enc.blocks}")
    if enc.nnz != nnz:
        raise CorruptLayerError(f"layer {lid}: header says {nnz} entries, counts sum to {enc.nnz}")
    _check_stream(enc)
    return enc, off


def write_encoded_model(path: str | Path, layers: Iterable[EncodedLayer]) -> int:
    layers = list(layers)
    blob = ENCODED_MAGIC + struct.pack("<II", ENCODED_VERSION, len(layers))
    blob += b"".join(serialize_layer(e) for e in layers)
    Path(path).write_bytes(blob)
    return len(blob)


def read_encoded_model(path: str | Path) -> list[EncodedLayer]:
    data = Path(path).read_bytes()
    if data[:4] != ENCODED_MAGIC:
        raise SchemaError(f"{path}: bad magic {data[:4]!r}, expected {ENCODED_MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != ENCODED_VERSION:
        raise SchemaError(f"{path}: unsupported encoded model version {version}")
    off, out = 12, []
    for _ in range(count):
        enc, off = parse_layer(data, off)
        out.append(enc)
    if off != len(data):
        raise SchemaError(f"{path}: {len(data) - off} trailing bytes")
    return out
