"""Network architectures: SFCN counter, ResNet generators, patch and domain discriminators.

Every model records an ``arch`` dict (its constructor kwargs plus a ``kind``)
and an ``arch_id`` string so checkpoints can rebuild it exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class _Arch(nn.Module):
    kind = ""

    def _remember(self, **kwargs):
        self.arch = {"kind": self.kind, **kwargs}

    @property
    def arch_id(self) -> str:
        extras = "-".join(f"{k}{v}" for k, v in self.arch.items() if k != "kind")
        return f"{self.kind}-{extras}" if extras else self.kind


def _conv_relu(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True)]


def _sweep(x, conv, dim, reverse):
    # slice-by-slice message passing; each slice adds relu(conv(previous slice))
    slices = list(x.unbind(dim))
    order = range(len(slices) - 1, -1, -1) if reverse else range(len(slices))
    prev = None
    for i in order:
        if prev is not None:
            slices[i] = slices[i] + F.relu(conv(prev))
        prev = slices[i]
    return torch.stack(slices, dim)


class SpatialEncoder(_Arch):
    """Four sequential directional passes: down, up, left-to-right, right-to-left.

    After the passes every output pixel depends on its whole row and column.
    With ``residual=False`` the input itself is subtracted back out, leaving only
    the propagated context.
    """

    kind = "spatial"

    def __init__(self, channels: int, kernel: int = 9, residual: bool = True):
        super().__init__()
        self._remember(channels=channels, kernel=kernel, residual=residual)
        self.channels = channels
        self.residual = residual
        pad = kernel // 2
        self.down, self.up, self.right, self.left = (
            nn.Conv1d(channels, channels, kernel, padding=pad, bias=False) for _ in range(4))
        for conv in (self.down, self.up, self.right, self.left):
            nn.init.normal_(conv.weight, 0.0, (1.0 / (channels * kernel)) ** 0.5)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"spatial encoder expects N x {self.channels} x H x W, got {tuple(x.shape)}")
        h = _sweep(x, self.down, 2, reverse=False)
        h = _sweep(h, self.up, 2, reverse=True)
        h = _sweep(h, self.right, 3, reverse=False)
        h = _sweep(h, self.left, 3, reverse=True)
        return h if self.residual else h - x


class SFCN(_Arch):
    """Spatial FCN: 10-conv backbone (stride 8), spatial encoder, density and mask heads.

    The backbone is a small from-scratch stand-in for VGG-16; ``arch_id`` carries
    the ``small10`` tag.
    """

    kind = "sfcn"
    stride = 8

    def __init__(self, in_channels: int = 3, width: int = 16, kernel: int = 9, seg_head: bool = True):
        super().__init__()
        self._remember(backbone="small10", in_channels=in_channels, width=width, kernel=kernel,
                       seg_head=seg_head)
        w = width
        c = 4 * w
        self.backbone = nn.Sequential(
            *_conv_relu(in_channels, w), *_conv_relu(w, w), nn.MaxPool2d(2),
            *_conv_relu(w, 2 * w), *_conv_relu(2 * w, 2 * w), nn.MaxPool2d(2),
            *_conv_relu(2 * w, c), *_conv_relu(c, c), *_conv_relu(c, c), nn.MaxPool2d(2),
            *_conv_relu(c, c), *_conv_relu(c, c), *_conv_relu(c, c),
        )
        for m in self.backbone:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        self.spatial = SpatialEncoder(c, kernel)
        self.regress = nn.Sequential(nn.Conv2d(c, w, 3, padding=1), nn.ReLU(inplace=True),
                                     nn.Conv2d(w, 1, 1), nn.ReLU())
        # non-negative last weights over rectified inputs: every output pixel starts on the live side of the ReLU
        with torch.no_grad():
            self.regress[2].weight.abs_()
        nn.init.constant_(self.regress[2].bias, 0.01)
        self.seg = None
        if seg_head:
            self.seg = nn.Sequential(
                nn.ConvTranspose2d(c, 2 * w, 4, 2, 1), nn.ReLU(inplace=True),
                nn.ConvTranspose2d(2 * w, w, 4, 2, 1), nn.ReLU(inplace=True),
                nn.ConvTranspose2d(w, w, 4, 2, 1), nn.ReLU(inplace=True),
                nn.Conv2d(w, 2, 1),
            )
        self.in_channels = in_channels

    @property
    def arch_id(self) -> str:
        a = self.arch
        return f"sfcn-small10-in{a['in_channels']}-w{a['width']}-k{a['kernel']}" + ("-seg" if a["seg_head"] else "")

    def features(self, x):
        """Spatial-encoder output; the features fed to the domain classifier."""
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected N x {self.in_channels} x H x W, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"input {h}x{w} is not divisible by {self.stride}; pad the image first")
        return self.spatial(self.backbone(x))

    def heads(self, f, with_seg=False):
        density = self.regress(f)
        if not with_seg:
            return density
        if self.seg is None:
            raise ShapeError("this SFCN was built without a segmentation head")
        return density, self.seg(f)

    def forward(self, x, with_seg: bool = False):
        return self.heads(self.features(x), with_seg)


class ResidualBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(c, c, 3), nn.InstanceNorm2d(c), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(c, c, 3), nn.InstanceNorm2d(c),
        )

    def forward(self, x):
        return x + self.block(x)


def _gan_init(m):
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class ResnetGenerator(_Arch):
    """CycleGAN-style translator split at the first upsampling layer.

    ``encode`` runs the stem, two stride-2 downsamplings and the residual
    blocks (output stride 4); ``decode`` upsamples back to a tanh image.
    """

    kind = "resgen"

    def __init__(self, channels: int = 3, ngf: int = 16, n_blocks: int = 3):
        super().__init__()
        self._remember(channels=channels, ngf=ngf, n_blocks=n_blocks)
        self.encoder = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(channels, ngf, 7), nn.InstanceNorm2d(ngf), nn.ReLU(True),
            nn.Conv2d(ngf, 2 * ngf, 3, 2, 1), nn.InstanceNorm2d(2 * ngf), nn.ReLU(True),
            nn.Conv2d(2 * ngf, 4 * ngf, 3, 2, 1), nn.InstanceNorm2d(4 * ngf), nn.ReLU(True),
            *[ResidualBlock(4 * ngf) for _ in range(n_blocks)],
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * ngf, 2 * ngf, 3, 2, 1, output_padding=1),
            nn.InstanceNorm2d(2 * ngf), nn.ReLU(True),
            nn.ConvTranspose2d(2 * ngf, ngf, 3, 2, 1, output_padding=1),
            nn.InstanceNorm2d(ngf), nn.ReLU(True),
            nn.ReflectionPad2d(3), nn.Conv2d(ngf, channels, 7), nn.Tanh(),
        )
        self.apply(_gan_init)

    def encode(self, x):
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ShapeError(f"generator input {tuple(x.shape[-2:])} must be divisible by 4")
        return self.encoder(x)

    def decode(self, f):
        return self.decoder(f)

    def forward(self, x):
        return self.decode(self.encode(x))


class PatchDiscriminator(_Arch):
    """Per-patch real/fake logits (one channel)."""

    kind = "patchd"

    def __init__(self, channels: int = 3, ndf: int = 16, n_layers: int = 3):
        super().__init__()
        self._remember(channels=channels, ndf=ndf, n_layers=n_layers)
        layers = [nn.Conv2d(channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        c = ndf
        for i in range(1, n_layers):
            stride = 2 if i < n_layers - 1 else 1
            layers += [nn.Conv2d(c, 2 * c, 4, stride, 1), nn.InstanceNorm2d(2 * c), nn.LeakyReLU(0.2, True)]
            c *= 2
        layers.append(nn.Conv2d(c, 1, 4, 1, 1))
        self.net = nn.Sequential(*layers)
        self.apply(_gan_init)

    def forward(self, x):
        return self.net(x)


class DomainClassifier(_Arch):
    """Four 3x3 convolutions with leaky ReLU, producing 2-channel per-location logits."""

    kind = "domcls"

    def __init__(self, in_channels: int, ndf: int = 32, strides=(1, 1, 1, 1)):
        super().__init__()
        strides = tuple(int(s) for s in strides)
        if len(strides) != 4:
            raise ValueError("domain classifier needs exactly four strides")
        self._remember(in_channels=in_channels, ndf=ndf, strides=list(strides))
        widths = (in_channels, ndf, 2 * ndf, 2 * ndf, 2)
        layers = []
        for i, s in enumerate(strides):
            layers.append(nn.Conv2d(widths[i], widths[i + 1], 3, s, 1))
            if i < 3:
                layers.append(nn.LeakyReLU(0.2, True))
        self.net = nn.Sequential(*layers)
        self.in_channels = in_channels
        self.apply(_gan_init)

    @property
    def arch_id(self) -> str:
        a = self.arch
        return f"domcls-in{a['in_channels']}-ndf{a['ndf']}-s{''.join(map(str, a['strides']))}"

    def forward(self, f):
        if f.shape[1] != self.in_channels:
            raise ShapeError(f"domain classifier expects {self.in_channels} channels, got {f.shape[1]}")
        return self.net(f)


KINDS = {cls.kind: cls for cls in (SFCN, SpatialEncoder, ResnetGenerator, PatchDiscriminator, DomainClassifier)}


def build(arch: dict) -> nn.Module:
    kwargs = dict(arch)
    kind = kwargs.pop("kind")
    kwargs.pop("backbone", None)
    return KINDS[kind](**kwargs)


@dataclass
class DAModels:
    """Everything trained jointly during adaptation."""

    G_sr: nn.Module
    G_rs: nn.Module
    D_r: nn.Module
    D_s: nn.Module
    D_dc: nn.Module
    sfcn: nn.Module

    @classmethod
    def create(cls, sfcn_width=16, ngf=16, n_blocks=3, ndf=16, dc_ndf=32, dc_strides=(1, 1, 1, 1),
               adv_features="sfcn", channels=3) -> "DAModels":
        sfcn = SFCN(channels, sfcn_width, seg_head=False)
        dc_in = 4 * sfcn_width if adv_features == "sfcn" else 4 * ngf
        return cls(ResnetGenerator(channels, ngf, n_blocks), ResnetGenerator(channels, ngf, n_blocks),
                   PatchDiscriminator(channels, ndf), PatchDiscriminator(channels, ndf),
                   DomainClassifier(dc_in, dc_ndf, dc_strides), sfcn)

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]
