"""Builders for the bundled reference architectures.

The JSON assets under ``mixstream/data`` are generated from these functions
(``python -m mixstream.zoo``); a test keeps the two in sync.

* ``simyolov2`` -- Darknet-19 CONV1..CONV16 followed by a 1x1 detection head
  with 125 outputs, 416x416 input, 8-bit.  The first and last layers stay at
  8 bits when mixed precision is applied.
* ``tiny_yolov2`` -- the 9-conv VOC Tiny-YOLOv2, 416x416, 16-bit.
* ``resnet152`` -- conv1 + maxpool + 50 bottleneck blocks (3/8/36/3), 224x224,
  16-bit.  Each block's last 1x1 conv carries a shortcut from the block input;
  projection convolutions are not modelled.
"""

from __future__ import annotations

import json
from pathlib import Path

from .netmodel import NetworkDesc, Precision, chain, dump_network


def _conv(k, m, label, stride=1, **extra):
    return ("conv" if k > 1 else "pointwise-conv", k, stride, m, {"label": label, **extra})


def _pool(label, k=2, stride=2):
    return ("maxpool", k, stride, 0, {"label": label})


def _fix_pool_channels(specs):
    # pools keep the channel count of whatever precedes them
    out, c = [], None
    for kind, k, stride, m, extra in specs:
        if kind == "maxpool":
            m = c
        c = m
        out.append((kind, k, stride, m, extra))
    return out


def simyolov2() -> NetworkDesc:
    plan = [
        (3, 32), "P", (3, 64), "P",
        (3, 128), (1, 64), (3, 128), "P",
        (3, 256), (1, 128), (3, 256), "P",
        (3, 512), (1, 256), (3, 512), (1, 256), (3, 512), "P",
        (3, 1024), (1, 512), (3, 1024), (1, 125),
    ]
    specs, conv_no, pool_no = [], 0, 0
    for item in plan:
        if item == "P":
            pool_no += 1
            specs.append(_pool(f"POOL{pool_no}"))
        else:
            conv_no += 1
            k, m = item
            specs.append(_conv(k, m, f"CONV{conv_no}", quantize=conv_no not in (1, 17)))
    return chain("SimYOLOv2", 416, 3, _fix_pool_channels(specs),
                 precision=Precision(q_a=8, q_w=8, q_s=32, q_full=8))


def tiny_yolov2() -> NetworkDesc:
    specs = []
    for j, m in enumerate((16, 32, 64, 128, 256, 512), start=1):
        specs.append(_conv(3, m, f"CONV{j}", quantize=j != 1))
        specs.append(_pool(f"POOL{j}", stride=1 if j == 6 else 2))
    specs += [_conv(3, 1024, "CONV7"), _conv(3, 1024, "CONV8"),
              _conv(1, 125, "CONV9", quantize=False)]
    return chain("Tiny-YOLOv2", 416, 3, _fix_pool_channels(specs),
                 precision=Precision(q_a=16, q_w=16, q_s=32, q_full=16))


def resnet152() -> NetworkDesc:
    specs = [_conv(7, 64, "conv1", stride=2, quantize=False), _pool("pool1", k=3, stride=2)]
    block_input = 2  # layer id whose output feeds the next block
    for stage, (blocks, width) in enumerate(((3, 64), (8, 128), (36, 256), (3, 512)), start=2):
        for b in range(1, blocks + 1):
            stride = 2 if (b == 1 and stage > 2) else 1
            name = f"conv{stage}_{b}"
            specs.append(_conv(1, width, f"{name}a"))
            specs.append(_conv(3, width, f"{name}b", stride=stride))
            specs.append(_conv(1, 4 * width, f"{name}c", shortcut_from=block_input))
            block_input = len(specs)
    return chain("ResNet-152", 224, 3, _fix_pool_channels(specs),
                 precision=Precision(q_a=16, q_w=16, q_s=32, q_full=16))


BUILDERS = {"simyolov2": simyolov2, "tiny_yolov2": tiny_yolov2, "resnet152": resnet152}


def write_assets(directory: Path | None = None) -> None:
    directory = directory or Path(__file__).parent / "data"
    directory.mkdir(parents=True, exist_ok=True)
    for name, build in BUILDERS.items():
        (directory / f"{name}.json").write_text(json.dumps(dump_network(build()), indent=1) + "\n")


if __name__ == "__main__":
    write_assets()
