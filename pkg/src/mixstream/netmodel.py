"""Network description: layer geometry, precision defaults and the JSON loader.

Feature maps are square in the original formulation; every formula here uses
``h * w`` in place of ``H**2`` so rectangular inputs work unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .errors import GeometryError, SchemaError

CONV_KINDS = ("conv", "pointwise-conv")
POOL_KINDS = ("maxpool",)


@dataclass(frozen=True)
class Precision:
    q_a: int = 8
    q_w: int = 8
    q_s: int = 32
    q_full: int = 32

    def __post_init__(self):
        for name in ("q_a", "q_w", "q_s", "q_full"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise SchemaError(f"precision.{name} must be a positive integer, got {v!r}")
        if self.q_s < self.q_a + self.q_w:
            raise SchemaError(
                f"precision.q_s={self.q_s} cannot hold a q_a={self.q_a} x q_w={self.q_w} product"
            )


@dataclass(frozen=True)
class LayerDesc:
    id: int
    kind: str
    k: int
    stride: int
    h_in: int
    w_in: int
    n: int
    m: int
    quantize: bool = True
    shortcut_from: int | None = None
    delay_rows: int | None = None
    label: str | None = None

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS

    @property
    def h_out(self) -> int:
        return -(-self.h_in // self.stride)

    @property
    def w_out(self) -> int:
        return -(-self.w_in // self.stride)

    @property
    def delay(self) -> int:
        """Rows of pipeline delay to the next layer."""
        if self.delay_rows is not None:
            return self.delay_rows
        if self.is_conv:
            return self.k - 1 if self.k >= 2 else 1
        # a 2x downsample needs two input rows per output row
        return self.stride - 1

    @property
    def name(self) -> str:
        return self.label or f"{self.kind}{self.id}"


def layer_params(layer: LayerDesc) -> int:
    if not layer.is_conv:
        return 0
    return layer.k * layer.k * layer.n * layer.m


def layer_macs(layer: LayerDesc) -> int:
    if not layer.is_conv:
        raise ValueError(f"layer {layer.id} is a {layer.kind} layer; MACs are defined for conv only")
    return layer_params(layer) * layer.h_out * layer.w_out


def output_fmap_elems(layer: LayerDesc) -> int:
    return layer.h_out * layer.w_out * layer.m


@dataclass(frozen=True)
class NetworkDesc:
    name: str
    h: int
    w: int
    c: int
    layers: tuple[LayerDesc, ...]
    precision: Precision = field(default_factory=Precision)

    @property
    def L(self) -> int:
        return len(self.layers)

    @cached_property
    def conv_layers(self) -> tuple[LayerDesc, ...]:
        return tuple(l for l in self.layers if l.is_conv)

    @cached_property
    def by_id(self) -> dict[int, LayerDesc]:
        return {l.id: l for l in self.layers}

    @cached_property
    def conv_delays(self) -> tuple[int, ...]:
        """Delay rows after each conv layer, folding in the pools that follow it."""
        out = []
        for j, conv in enumerate(self.conv_layers):
            d = conv.delay
            pos = self.layers.index(conv) + 1
            while pos < len(self.layers) and not self.layers[pos].is_conv:
                d += self.layers[pos].delay
                pos += 1
            out.append(d)
        return tuple(out)

    def total_params(self) -> int:
        return sum(layer_params(l) for l in self.layers)

    def total_macs(self) -> int:
        return sum(layer_macs(l) for l in self.conv_layers)


def _field(obj: Mapping[str, Any], key: str, where: str, kind=int, default=..., allow_none=False):
    if key not in obj:
        if default is ...:
            raise SchemaError(f"{where}: missing field '{key}'")
        return default
    v = obj[key]
    if v is None and allow_none:
        return None
    if kind is int and (not isinstance(v, int) or isinstance(v, bool)):
        raise SchemaError(f"{where}: field '{key}' must be an integer, got {v!r}")
    if kind is bool and not isinstance(v, bool):
        raise SchemaError(f"{where}: field '{key}' must be a boolean, got {v!r}")
    if kind is str and not isinstance(v, str):
        raise SchemaError(f"{where}: field '{key}' must be a string, got {v!r}")
    return v


def parse_network(document: str | bytes | Mapping[str, Any]) -> NetworkDesc:
    """Parse and validate a network description (JSON text or decoded mapping)."""
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not valid JSON: {exc}") from exc
    else:
        doc = document
    if not isinstance(doc, Mapping):
        raise SchemaError("network document must be a JSON object")

    name = _field(doc, "name", "network", kind=str)
    inp = doc.get("input")
    if not isinstance(inp, Mapping):
        raise SchemaError("network: missing object 'input'")
    h = _field(inp, "h", "input")
    w = _field(inp, "w", "input", default=h)
    c = _field(inp, "c", "input")
    if min(h, w, c) < 1:
        raise SchemaError("input: h, w, c must be >= 1")

    prec_doc = doc.get("precision", {})
    if not isinstance(prec_doc, Mapping):
        raise SchemaError("network: 'precision' must be an object")
    precision = Precision(
        q_a=_field(prec_doc, "q_a", "precision", default=8),
        q_w=_field(prec_doc, "q_w", "precision", default=8),
        q_s=_field(prec_doc, "q_s", "precision", default=32),
        q_full=_field(prec_doc, "q_full", "precision", default=32),
    )

    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise SchemaError("network: 'layers' must be a non-empty list")

    layers: list[LayerDesc] = []
    cur_h, cur_w, cur_c = h, w, c
    for pos, raw in enumerate(raw_layers, start=1):
        if not isinstance(raw, Mapping):
            raise SchemaError(f"layer #{pos}: must be an object")
        lid = _field(raw, "id", f"layer #{pos}")
        where = f"layer {lid}"
        if lid != pos:
            raise SchemaError(f"{where}: ids must be dense 1..L in order (expected {pos})")
        kind = _field(raw, "kind", where, kind=str)
        if kind not in CONV_KINDS + POOL_KINDS:
            raise SchemaError(f"{where}: field 'kind' must be one of {CONV_KINDS + POOL_KINDS}, got {kind!r}")
        k = _field(raw, "k", where, default=1 if kind == "pointwise-conv" else ...)
        stride = _field(raw, "stride", where, default=1)
        if k < 1:
            raise SchemaError(f"{where}: field 'k' must be >= 1")
        if kind == "pointwise-conv" and k != 1:
            raise SchemaError(f"{where}: pointwise-conv requires k=1")
        if stride not in (1, 2):
            raise SchemaError(f"{where}: field 'stride' must be 1 or 2, got {stride}")
        if kind in CONV_KINDS:
            m = _field(raw, "out_channels", where)
            if m < 1:
                raise SchemaError(f"{where}: field 'out_channels' must be >= 1")
        else:
            m = _field(raw, "out_channels", where, default=cur_c)
            if m != cur_c:
                raise GeometryError(f"{where}: pooling cannot change channels ({cur_c} -> {m})")
        n_decl = _field(raw, "in_channels", where, default=None, allow_none=True)
        if n_decl is not None and n_decl != cur_c:
            raise GeometryError(
                f"{where}: declares in_channels={n_decl} but the previous layer produces {cur_c}"
            )
        h_decl = _field(raw, "h", where, default=None, allow_none=True)
        if h_decl is not None and h_decl != cur_h:
            raise GeometryError(f"{where}: declares h={h_decl} but the incoming feature map is {cur_h}")
        if cur_h < k or cur_w < k:
            raise GeometryError(f"{where}: feature map {cur_h}x{cur_w} smaller than kernel {k}")
        shortcut = _field(raw, "shortcut_from", where, default=None, allow_none=True)
        if shortcut is not None:
            if kind not in CONV_KINDS:
                raise SchemaError(f"{where}: shortcut_from is only allowed on conv layers")
            if not 1 <= shortcut < lid:
                raise SchemaError(f"{where}: shortcut_from={shortcut} does not reference an earlier layer")
        delay = _field(raw, "delay_rows", where, default=None, allow_none=True)
        if delay is not None and delay < 0:
            raise SchemaError(f"{where}: field 'delay_rows' must be >= 0")
        quantize = _field(raw, "quantize", where, kind=bool, default=True)
        label = _field(raw, "label", where, kind=str, default=None, allow_none=True)

        layer = LayerDesc(
            id=lid, kind=kind, k=k, stride=stride, h_in=cur_h, w_in=cur_w,
            n=cur_c, m=m, quantize=quantize, shortcut_from=shortcut,
            delay_rows=delay, label=label,
        )
        layers.append(layer)
        cur_h, cur_w, cur_c = layer.h_out, layer.w_out, layer.m

    if not any(l.is_conv for l in layers):
        raise SchemaError("network: at least one conv layer is required")
    return NetworkDesc(name=name, h=h, w=w, c=c, layers=tuple(layers), precision=precision)


def dump_network(net: NetworkDesc) -> dict[str, Any]:
    """Inverse of :func:`parse_network`; ``parse_network(dump_network(n)) == n``."""
    layers = []
    for l in net.layers:
        entry: dict[str, Any] = {
            "id": l.id, "kind": l.kind, "k": l.k, "stride": l.stride,
            "out_channels": l.m, "quantize": l.quantize,
            "shortcut_from": l.shortcut_from, "delay_rows": l.delay_rows,
        }
        if l.label is not None:
            entry["label"] = l.label
        layers.append(entry)
    p = net.precision
    return {
        "name": net.name,
        "input": {"h": net.h, "w": net.w, "c": net.c},
        "precision": {"q_a": p.q_a, "q_w": p.q_w, "q_s": p.q_s, "q_full": p.q_full},
        "layers": layers,
    }


def load_network(path: str | Path) -> NetworkDesc:
    return parse_network(Path(path).read_text())


def reference_network(name: str) -> NetworkDesc:
    """Load a bundled reference architecture (``simyolov2``, ``tiny_yolov2``, ``resnet152``)."""
    res = resources.files("mixstream") / "data" / f"{name}.json"
    if not res.is_file():
        available = sorted(p.name[:-5] for p in (resources.files("mixstream") / "data").iterdir()
                           if p.name.endswith(".json"))
        raise FileNotFoundError(f"no reference network {name!r}; available: {available}")
    return parse_network(res.read_text())


def chain(name: str, h: int, c: int, specs, *, w: int | None = None,
          precision: Precision | None = None) -> NetworkDesc:
    """Build a network from compact ``(kind, k, stride, out_channels)`` tuples.

    Handy for tests and for generating the bundled reference files.
    """
    layers = []
    for i, spec in enumerate(specs, start=1):
        kind, k, stride, m = spec[:4]
        extra = spec[4] if len(spec) > 4 else {}
        layers.append({"id": i, "kind": kind, "k": k, "stride": stride, "out_channels": m, **extra})
    doc = {"name": name, "input": {"h": h, "w": w if w is not None else h, "c": c}, "layers": layers}
    p = precision or Precision()
    doc["precision"] = {"q_a": p.q_a, "q_w": p.q_w, "q_s": p.q_s, "q_full": p.q_full}
    return parse_network(doc)

