"""Layer-shape lists for the synthetic models.

Only layers the accelerator executes (conv2d, fully_connected) appear as
layers. Everything else (pooling, depthwise conv, residual adds, attention
matmuls, softmax, norms) is folded into one CPU entry whose time is a
reference per-image CPU time for a dual-core edge board.

Shapes use batch 1 at 224x224. Only ``tiny`` is a linear chain that can be
executed end to end; the others are layer lists for simulation.
"""

from __future__ import annotations

from .errors import UnknownPreset


def _conv(name, h, cin, cout, k, stride=1, padding="same", w=None):
    return dict(name=name, kind="conv2d", input_shape=[1, h, w or h, cin],
                weight_shape=[cout, k, k, cin], stride=stride, padding=padding)


def _fc(name, rows, cin, cout):
    return dict(name=name, kind="fully_connected", input_shape=[rows, cin],
                weight_shape=[cout, cin], stride=1, padding="valid")


def _out(h, stride):
    return -(-h // stride)


def resnet18():
    layers = [_conv("conv1", 224, 3, 64, 7, 2)]
    h, cin = 56, 64
    for stage, cout in enumerate((64, 128, 256, 512), start=1):
        for block in range(2):
            stride = 2 if (stage > 1 and block == 0) else 1
            ho = _out(h, stride)
            pre = f"layer{stage}.{block}"
            layers.append(_conv(f"{pre}.conv1", h, cin, cout, 3, stride))
            layers.append(_conv(f"{pre}.conv2", ho, cout, cout, 3))
            if stride != 1 or cin != cout:
                layers.append(_conv(f"{pre}.downsample", h, cin, cout, 1, stride))
            h, cin = ho, cout
    layers.append(_fc("fc", 1, 512, 1000))
    return layers, ["maxpool", "residual_add", "avgpool", "softmax"]


def _inverted_residual(layers, cpu, name, h, cin, cout, expand, k, stride):
    hidden = cin * expand
    if expand != 1:
        layers.append(_conv(f"{name}.expand", h, cin, hidden, 1))
    cpu.append(f"{name}.depthwise{k}x{k}")
    layers.append(_conv(f"{name}.project", _out(h, stride), hidden, cout, 1))
    return _out(h, stride), cout


def _mobile_net(blocks, stem, head, name_prefix):
    layers = [_conv("stem", 224, 3, stem, 3, 2)]
    cpu = []
    h, cin = 112, stem
    for i, (t, k, c, n, s) in enumerate(blocks):
        for j in range(n):
            h, cin = _inverted_residual(layers, cpu, f"{name_prefix}{i}.{j}", h, cin, c, t, k, s if j == 0 else 1)
    layers.append(_conv("head", h, cin, head, 1))
    layers.append(_fc("fc", 1, head, 1000))
    return layers, cpu + ["residual_add", "avgpool", "softmax"]


def mobilenetv2():
    blocks = [(1, 3, 16, 1, 1), (6, 3, 24, 2, 2), (6, 3, 32, 3, 2), (6, 3, 64, 4, 2),
              (6, 3, 96, 3, 1), (6, 3, 160, 3, 2), (6, 3, 320, 1, 1)]
    return _mobile_net(blocks, 32, 1280, "block")


def efficientnet_lite():
    blocks = [(1, 3, 16, 1, 1), (6, 3, 24, 2, 2), (6, 5, 40, 2, 2), (6, 3, 80, 3, 2),
              (6, 5, 112, 3, 1), (6, 5, 192, 4, 2), (6, 3, 320, 1, 1)]
    return _mobile_net(blocks, 32, 1280, "mbconv")


_INCEPTION = [
    # name, in, 1x1, 3x3 reduce, 3x3, 5x5 reduce, 5x5, pool proj
    ("3a", 192, 64, 96, 128, 16, 32, 32),
    ("3b", 256, 128, 128, 192, 32, 96, 64),
    ("4a", 480, 192, 96, 208, 16, 48, 64),
    ("4b", 512, 160, 112, 224, 24, 64, 64),
    ("4c", 512, 128, 128, 256, 24, 64, 64),
    ("4d", 512, 112, 144, 288, 32, 64, 64),
    ("4e", 528, 256, 160, 320, 32, 128, 128),
    ("5a", 832, 256, 160, 320, 32, 128, 128),
    ("5b", 832, 384, 192, 384, 48, 128, 128),
]


def inceptionv1():
    layers = [
        _conv("conv1", 224, 3, 64, 7, 2),
        _conv("conv2_reduce", 56, 64, 64, 1),
        _conv("conv2", 56, 64, 192, 3),
    ]
    for name, cin, b1, r3, b3, r5, b5, pp in _INCEPTION:
        h = {"3": 28, "4": 14, "5": 7}[name[0]]
        layers += [
            _conv(f"{name}.1x1", h, cin, b1, 1),
            _conv(f"{name}.3x3_reduce", h, cin, r3, 1),
            _conv(f"{name}.3x3", h, r3, b3, 3),
            _conv(f"{name}.5x5_reduce", h, cin, r5, 1),
            _conv(f"{name}.5x5", h, r5, b5, 5),
            _conv(f"{name}.pool_proj", h, cin, pp, 1),
        ]
    layers.append(_fc("fc", 1, 1024, 1000))
    return layers, ["maxpool", "concat", "avgpool", "softmax"]


def _deit(dim, depth=12, mlp_ratio=4):
    tokens = 197
    layers = [_conv("patch_embed", 224, 3, dim, 16, 16, padding="valid")]
    for b in range(depth):
        layers += [
            _fc(f"block{b}.qkv", tokens, dim, 3 * dim),
            _fc(f"block{b}.proj", tokens, dim, dim),
            _fc(f"block{b}.fc1", tokens, dim, mlp_ratio * dim),
            _fc(f"block{b}.fc2", tokens, mlp_ratio * dim, dim),
        ]
    layers.append(_fc("head", 1, dim, 1000))
    return layers, ["layernorm", "attention_matmul", "softmax", "gelu", "residual_add"]


def deit_tiny():
    return _deit(192)


def deit_small():
    return _deit(384)


def tiny():
    layers = [
        _conv("conv1", 16, 3, 8, 3, 1),
        _conv("conv2", 16, 8, 16, 3, 2),
        _conv("conv3", 8, 16, 16, 3, 1, padding="valid"),
        _fc("fc", 1, 6 * 6 * 16, 10),
    ]
    return layers, []


# builder, reference CPU time (ms/image) for the non-offloaded layers
MODEL_PRESETS = {
    "tiny": (tiny, 0.0),
    "resnet18": (resnet18, 51.5),
    "mobilenetv2": (mobilenetv2, 130.3),
    "inceptionv1": (inceptionv1, 67.2),
    "efficientnet-lite": (efficientnet_lite, 653.3),
    "deit-tiny": (deit_tiny, 1007.1),
    "deit-small": (deit_small, 2015.4),
}
CHAIN_PRESETS = {"tiny"}


def preset_layers(name: str) -> tuple[list[dict], list[dict]]:
    """Layer dicts and CPU-layer entries for a named preset."""
    try:
        build, cpu_ms = MODEL_PRESETS[name]
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; valid: {', '.join(MODEL_PRESETS)}") from None
    layers, cpu_ops = build()
    cpu = [{"name": "cpu_other", "time_ms": cpu_ms, "ops": cpu_ops}] if cpu_ops else []
    return layers, cpu
