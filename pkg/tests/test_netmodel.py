import json

import pytest
from hypothesis import given, settings, strategies as st

from mixstream.errors import GeometryError, SchemaError
from mixstream.netmodel import (
    LayerDesc,
    Precision,
    chain,
    dump_network,
    layer_macs,
    layer_params,
    load_network,
    parse_network,
    reference_network,
)


def doc(layers, h=16, c=3, **extra):
    return {"name": "t", "input": {"h": h, "c": c}, "layers": layers, **extra}


def test_minimal_network_parses_with_defaults():
    net = parse_network(json.dumps(doc([{"id": 1, "kind": "conv", "k": 3, "out_channels": 8}])))
    (l,) = net.layers
    assert (l.h_in, l.w_in, l.n, l.m, l.stride) == (16, 16, 3, 8, 1)
    assert net.precision == Precision(8, 8, 32, 32)
    assert l.quantize is True and l.shortcut_from is None


def test_geometry_chains_through_pool_and_stride():
    net = chain("g", 15, 3, [("conv", 3, 2, 8), ("maxpool", 2, 2, 8), ("pointwise-conv", 1, 1, 4)])
    assert [l.h_in for l in net.layers] == [15, 8, 4]
    assert net.layers[0].h_out == 8  # ceil(15 / 2)
    assert net.layers[2].n == 8


def test_rectangular_input():
    net = chain("r", 12, 2, [("conv", 3, 1, 4)], w=20)
    l = net.layers[0]
    assert (l.h_in, l.w_in) == (12, 20)
    assert layer_macs(l) == 12 * 20 * 9 * 2 * 4


def test_params_and_macs():
    l = LayerDesc(1, "conv", 3, 1, 416, 416, 3, 32)
    assert layer_params(l) == 864
    assert layer_macs(l) == 864 * 416 * 416
    pool = LayerDesc(2, "maxpool", 2, 2, 416, 416, 32, 32)
    assert layer_params(pool) == 0
    with pytest.raises(ValueError):
        layer_macs(pool)


def test_delays_fold_following_pools():
    net = chain("d", 16, 3, [("conv", 3, 1, 8), ("maxpool", 2, 2, 8), ("pointwise-conv", 1, 1, 4),
                             ("conv", 5, 1, 4)])
    assert net.conv_delays == (2 + 1, 1, 4)


def test_explicit_delay_override():
    net = chain("d", 16, 3, [("conv", 3, 1, 8, {"delay_rows": 7}), ("conv", 3, 1, 8)])
    assert net.conv_delays[0] == 7


@pytest.mark.parametrize("layers, err, text", [
    ([{"id": 2, "kind": "conv", "k": 3, "out_channels": 8}], SchemaError, "dense"),
    ([{"id": 1, "kind": "deconv", "k": 3, "out_channels": 8}], SchemaError, "kind"),
    ([{"id": 1, "kind": "conv", "k": 3, "stride": 3, "out_channels": 8}], SchemaError, "stride"),
    ([{"id": 1, "kind": "conv", "k": 3, "out_channels": 8, "in_channels": 4}], GeometryError, "in_channels"),
    ([{"id": 1, "kind": "conv", "k": 3, "out_channels": 8, "h": 32}], GeometryError, "h=32"),
    ([{"id": 1, "kind": "conv", "k": 3, "out_channels": 8, "shortcut_from": 1}], SchemaError, "earlier"),
    ([{"id": 1, "kind": "conv", "k": 32, "out_channels": 8}], GeometryError, "kernel"),
    ([{"id": 1, "kind": "maxpool", "k": 2, "stride": 2}], SchemaError, "conv layer"),
    ([{"id": 1, "kind": "conv", "k": "3", "out_channels": 8}], SchemaError, "'k'"),
    ([{"id": 1, "kind": "pointwise-conv", "k": 3, "out_channels": 8}], SchemaError, "k=1"),
])
def test_schema_errors_name_the_problem(layers, err, text):
    with pytest.raises(err, match=text):
        parse_network(doc(layers))


def test_pool_cannot_carry_shortcut():
    layers = [{"id": 1, "kind": "conv", "k": 3, "out_channels": 8},
              {"id": 2, "kind": "maxpool", "k": 2, "stride": 2, "shortcut_from": 1}]
    with pytest.raises(SchemaError, match="shortcut"):
        parse_network(doc(layers))


def test_bad_precision_rejected():
    with pytest.raises(SchemaError, match="q_s"):
        parse_network(doc([{"id": 1, "kind": "conv", "k": 3, "out_channels": 8}],
                          precision={"q_a": 16, "q_w": 16, "q_s": 24}))


def test_invalid_json_is_schema_error():
    with pytest.raises(SchemaError):
        parse_network("{not json")


def test_load_network_from_file(tmp_path):
    p = tmp_path / "n.json"
    p.write_text(json.dumps(doc([{"id": 1, "kind": "conv", "k": 3, "out_channels": 8}])))
    assert load_network(p).layers[0].m == 8


def test_unknown_reference_lists_available():
    with pytest.raises(FileNotFoundError, match="simyolov2"):
        reference_network("nope")


def test_reference_networks_frozen_sizes():
    sim = reference_network("simyolov2")
    assert len(sim.conv_layers) == 17
    assert sim.total_params() == 14_688_096
    tiny = reference_network("tiny_yolov2")
    assert len(tiny.conv_layers) == 9
    assert 2 * tiny.total_macs() / 1e9 == pytest.approx(6.97, abs=0.01)
    res = reference_network("resnet152")
    assert len(res.conv_layers) == 151
    assert sum(l.shortcut_from is not None for l in res.layers) == 50


layer_spec = st.tuples(
    st.sampled_from(["conv", "pointwise-conv", "maxpool"]),
    st.integers(1, 16),
    st.sampled_from([1, 2]),
)


@settings(max_examples=60, deadline=None)
@given(st.integers(8, 64), st.integers(1, 8), st.lists(layer_spec, min_size=1, max_size=6), st.booleans())
def test_dump_parse_round_trip(h, c, raw, quant_last):
    specs, ch, cur = [], c, h
    for kind, m, stride in raw:
        k = {"conv": 3, "pointwise-conv": 1, "maxpool": 2}[kind]
        if cur < max(k, 2):
            break
        if kind == "maxpool":
            m = ch
        specs.append((kind, k, stride, m))
        ch, cur = m, -(-cur // stride)
    specs.append(("conv", 1, 1, 5, {"quantize": quant_last}))
    net = chain("rt", h, c, specs)
    again = parse_network(json.dumps(dump_network(net)))
    assert again == net
