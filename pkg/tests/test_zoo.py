import json
from importlib import resources

import pytest

from mixstream.netmodel import dump_network, reference_network
from mixstream.zoo import BUILDERS


@pytest.mark.parametrize("name", sorted(BUILDERS))
def test_bundled_asset_matches_builder(name):
    text = resources.files("mixstream").joinpath("data").joinpath(f"{name}.json").read_text()
    assert json.loads(text) == json.loads(json.dumps(dump_network(BUILDERS[name]())))
    assert reference_network(name) == BUILDERS[name]()


def test_simyolo_keeps_end_layers_full_precision():
    net = reference_network("simyolov2")
    flags = [l.quantize for l in net.conv_layers]
    assert len(flags) == 17 and not flags[0] and not flags[-1] and all(flags[1:-1])
    assert net.conv_layers[0].k * net.conv_layers[0].k * 3 * 32 == 864
