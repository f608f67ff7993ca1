"""Generator and PatchGAN discriminators, plus the tensor checkpoint format.

Architectures are described by ordered lists of :class:`LayerSpec`; the
modules are built from those lists so that the static shape arithmetic and
the live networks can never drift apart.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .physics import ShapeError

WIDTH_SCALES = (1.0, 0.5, 0.25)
LEAKY_SLOPE = 0.2
IN_EPS = 1e-5
MIN_DISC_INPUT = 16

CIR = "cir"
RESBLOCK = "resblock"
CTIR = "ctir"
CILR = "cilr"
OUTPUT = "output"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    filter_size: int
    filter_count: int
    stride: int
    padding: int
    norm: bool = True
    act: bool = True


def _check_scale(width_scale):
    if float(width_scale) not in WIDTH_SCALES:
        raise ValueError(f"width_scale must be one of {WIDTH_SCALES}, got {width_scale}")
    return float(width_scale)


def _scaled(n, width_scale):
    return max(1, int(round(n * width_scale)))


def build_generator(width_scale=1.0, n_resblocks=9, out_channels=3):
    """Layer list of the restoration generator.

    CIR(7,64,1) -> CIR(3,128,2) -> CIR(3,256,2) -> ResBlock(3,256,1) x n
    -> CTIR(3,128,2) -> CTIR(3,64,2) -> conv(7,3,1) with a tanh head.
    """
    ws = _check_scale(width_scale)
    if n_resblocks < 1:
        raise ValueError("n_resblocks must be >= 1")
    arch = [
        LayerSpec("cir1", CIR, 7, _scaled(64, ws), 1, 3),
        LayerSpec("cir2", CIR, 3, _scaled(128, ws), 2, 1),
        LayerSpec("cir3", CIR, 3, _scaled(256, ws), 2, 1),
    ]
    arch += [LayerSpec(f"res{i + 1}", RESBLOCK, 3, _scaled(256, ws), 1, 1) for i in range(n_resblocks)]
    arch += [
        LayerSpec("ctir1", CTIR, 3, _scaled(128, ws), 2, 1),
        LayerSpec("ctir2", CTIR, 3, _scaled(64, ws), 2, 1),
        LayerSpec("out", OUTPUT, 7, out_channels, 1, 3, norm=False, act=False),
    ]
    return arch


def build_discriminator(width_scale=1.0):
    """Layer list of the 70x70 PatchGAN (filter 4, padding 1 throughout)."""
    ws = _check_scale(width_scale)
    return [
        LayerSpec("cilr1", CILR, 4, _scaled(64, ws), 2, 1, norm=False),
        LayerSpec("cilr2", CILR, 4, _scaled(128, ws), 2, 1),
        LayerSpec("cilr3", CILR, 4, _scaled(256, ws), 2, 1),
        LayerSpec("cilr4", CILR, 4, _scaled(512, ws), 1, 1),
        LayerSpec("cilr5", CILR, 4, 1, 1, 1, norm=False, act=False),
    ]


# static shape arithmetic ----------------------------------------------------


def conv_out(n, f, s, p):
    return (n + 2 * p - f) // s + 1


def deconv_out(n, f, s, p, output_padding=1):
    return (n - 1) * s - 2 * p + f + output_padding


def predict_shape(arch, h, w):
    """Spatial output size of ``arch`` on an ``h x w`` input, layer by layer."""
    for spec in arch:
        if spec.kind == CTIR:
            h = deconv_out(h, spec.filter_size, spec.stride, spec.padding)
            w = deconv_out(w, spec.filter_size, spec.stride, spec.padding)
        elif spec.kind == RESBLOCK:
            continue
        else:
            h = conv_out(h, spec.filter_size, spec.stride, spec.padding)
            w = conv_out(w, spec.filter_size, spec.stride, spec.padding)
        if h < 1 or w < 1:
            return (max(h, 0), max(w, 0))
    return (h, w)


def receptive_field(arch):
    """Input extent seen by one output unit: RF <- RF * s + (f - s), output to input."""
    rf = 1
    for spec in reversed(arch):
        if spec.kind in (RESBLOCK, CTIR):
            raise ValueError("receptive_field handles plain convolution stacks only")
        rf = rf * spec.stride + (spec.filter_size - spec.stride)
    return rf


# modules --------------------------------------------------------------------


def _norm(c):
    return nn.InstanceNorm2d(c, eps=IN_EPS, affine=False)


class ResBlock(nn.Module):
    def __init__(self, channels, f=3):
        super().__init__()
        p = f // 2
        self.conv_a = nn.Conv2d(channels, channels, f)
        self.conv_b = nn.Conv2d(channels, channels, f)
        self.body = nn.Sequential(
            nn.ReflectionPad2d(p),
            self.conv_a,
            _norm(channels),
            nn.ReLU(),
            nn.ReflectionPad2d(p),
            self.conv_b,
            _norm(channels),
        )

    def forward(self, x):
        return x + self.body(x)


def _make_layer(spec, c_in):
    f, c, s, p = spec.filter_size, spec.filter_count, spec.stride, spec.padding
    if spec.kind == RESBLOCK:
        return ResBlock(c, f)
    if spec.kind == CTIR:
        return nn.Sequential(nn.ConvTranspose2d(c_in, c, f, s, p, output_padding=1), _norm(c), nn.ReLU())
    if spec.kind in (CIR, OUTPUT):
        # stride-1 layers use reflection padding, strided ones zero padding
        layers = [nn.ReflectionPad2d(p), nn.Conv2d(c_in, c, f, s)] if s == 1 else [nn.Conv2d(c_in, c, f, s, p)]
        if spec.norm:
            layers.append(_norm(c))
        layers.append(nn.ReLU() if spec.act else nn.Tanh())
        return nn.Sequential(*layers)
    if spec.kind == CILR:
        layers = [nn.Conv2d(c_in, c, f, s, p)]
        if spec.norm:
            layers.append(_norm(c))
        if spec.act:
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
        return nn.Sequential(*layers)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


class _ArchNet(nn.Module):
    def __init__(self, arch, in_channels=3):
        super().__init__()
        self.arch = list(arch)
        self.in_channels = in_channels
        c = in_channels
        self.layers = nn.ModuleDict()
        for spec in self.arch:
            self.layers[spec.name] = _make_layer(spec, c)
            c = spec.filter_count

    def forward(self, x):
        for layer in self.layers.values():
            x = layer(x)
        return x


class Generator(_ArchNet):
    """Encoder / residual trunk / decoder generator; output in [-1, 1]."""

    def forward(self, y):
        squeeze = y.ndim == 3
        if squeeze:
            y = y.unsqueeze(0)
        h, w = y.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"generator input {h}x{w} must be divisible by 4")
        if h < 8 or w < 8:
            raise ShapeError(f"generator input {h}x{w} too small (min 8x8)")
        if y.shape[1] == 1 and self.in_channels == 3:
            y = y.expand(-1, 3, -1, -1)
        out = super().forward(y)
        return out[0] if squeeze else out


class PatchDiscriminator(_ArchNet):
    """Fully convolutional critic emitting one raw score per input patch."""

    def forward(self, img):
        squeeze = img.ndim == 3
        if squeeze:
            img = img.unsqueeze(0)
        h, w = img.shape[-2:]
        if h < MIN_DISC_INPUT or w < MIN_DISC_INPUT:
            raise ShapeError(f"discriminator input {h}x{w} smaller than {MIN_DISC_INPUT}x{MIN_DISC_INPUT}")
        oh, ow = predict_shape(self.arch, h, w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"discriminator input {h}x{w} yields an empty patch map")
        if img.shape[1] == 1 and self.in_channels == 3:
            img = img.expand(-1, 3, -1, -1)
        out = super().forward(img)
        return out[0] if squeeze else out


def conv_modules(net):
    return [m for m in net.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))]


def init_params(net, seed):
    """Gaussian weights with zero mean and variance 2/s, s = filter area; zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in conv_modules(net):
            kh, kw = m.kernel_size
            std = (2.0 / (kh * kw)) ** 0.5
            m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=torch.float64) * std)
            if m.bias is not None:
                m.bias.zero_()
    return net


def make_generator(width_scale=1.0, n_resblocks=9, seed=0, in_channels=3):
    return init_params(Generator(build_generator(width_scale, n_resblocks), in_channels), seed)


def make_discriminator(width_scale=1.0, seed=0, in_channels=3):
    return init_params(PatchDiscriminator(build_discriminator(width_scale), in_channels), seed)


def generator_forward(params, y):
    return params(y)


def discriminator_forward(params, img):
    return params(img)


# checkpoint blobs -----------------------------------------------------------


def write_blobs(prefix, tensors):
    """Write named tensors as ``<prefix>.bin`` (little-endian float32) and ``<prefix>.json``."""
    prefix = Path(prefix)
    entries = []
    offset = 0
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset})
            offset += arr.nbytes
    prefix.with_suffix(".json").write_text(json.dumps(entries, indent=1) + "\n")


def read_blobs(prefix):
    prefix = Path(prefix)
    entries = json.loads(prefix.with_suffix(".json").read_text())
    raw = prefix.with_suffix(".bin").read_bytes()
    out = {}
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=e["dtype"], count=n, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return out


def arch_to_json(arch):
    return [asdict(s) for s in arch]


def arch_from_json(items):
    return [LayerSpec(**d) for d in items]


def save_net(net, prefix):
    write_blobs(prefix, net.state_dict())
    Path(str(prefix) + ".arch.json").write_text(
        json.dumps({"in_channels": net.in_channels, "arch": arch_to_json(net.arch)}, indent=1) + "\n"
    )


def load_net(prefix, cls):
    meta = json.loads(Path(str(prefix) + ".arch.json").read_text())
    net = cls(arch_from_json(meta["arch"]), meta["in_channels"])
    net.load_state_dict(read_blobs(prefix))
    return net
