"""Training objectives for counting, segmentation and SSIM-embedded CycleGAN adaptation.

Generator-side images live in [-1, 1]; SSIM terms map them to [0, 1] first so
the dynamic range is 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0


@dataclass
class LossWeights:
    alpha: float = 1.0          # counting
    beta: float = 0.1           # translation
    lambda_adv: float = 0.01    # inverse adversarial on real-domain features
    lambda_cycle: float = 10.0  # L1 cycle inside the CycleGAN objective

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise ValueError(f"loss weight {f.name} must be >= 0, got {v}")


def _check_same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def counting_mse(pred, gt):
    _check_same_shape(pred, gt, "counting_mse")
    return ((pred - gt) ** 2).mean()


def seg_ce(logits, mask):
    """Mean per-pixel cross entropy; logits (N, 2, H, W) or (2, H, W)."""
    if logits.dim() == 3:
        logits, mask = logits[None], mask[None]
    if tuple(logits.shape[-2:]) != tuple(mask.shape[-2:]) or logits.shape[0] != mask.shape[0]:
        raise ValueError(f"seg_ce: logits {tuple(logits.shape)} do not match mask {tuple(mask.shape)}")
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("seg_ce: mask values must be 0 or 1")
    return F.cross_entropy(logits, mask.long())


@lru_cache(maxsize=8)
def _gauss_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _as_nchw(x):
    """numpy H x W [x C] or torch [N x] [C x] H x W -> float torch N x C x H x W."""
    if isinstance(x, np.ndarray):
        t = torch.from_numpy(np.asarray(x, dtype=np.float64))
        if t.dim() == 3:
            t = t.permute(2, 0, 1)
    else:
        t = x
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t


def ssim_map(a, b, config: SSIMConfig = SSIMConfig()):
    """Local SSIM over every valid Gaussian window position, per channel."""
    _check_same_shape(a, b, "ssim")
    n, c, h, w = a.shape
    k = config.window
    if k > h or k > w:
        raise ValueError(f"SSIM window {k} is larger than the {h}x{w} image")
    g = torch.as_tensor(_gauss_1d(k, config.sigma), dtype=a.dtype, device=a.device)
    gx = g.view(1, 1, 1, k).repeat(5 * c, 1, 1, 1)
    gy = g.view(1, 1, k, 1).repeat(5 * c, 1, 1, 1)
    stack = torch.cat([a, b, a * a, b * b, a * b], dim=1)
    filt = F.conv2d(F.conv2d(stack, gx, groups=5 * c), gy, groups=5 * c)
    mu_a, mu_b, e_aa, e_bb, e_ab = filt.split(c, dim=1)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    c1 = (config.k1 * config.data_range) ** 2
    c2 = (config.k2 * config.data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim_index(a, b, config: SSIMConfig = SSIMConfig()):
    """Mean SSIM. numpy inputs (H x W or H x W x C) give a float; tensors stay differentiable."""
    numpy_in = isinstance(a, np.ndarray)
    value = ssim_map(_as_nchw(a), _as_nchw(b), config).mean()
    return float(value) if numpy_in else value


def ssim_per_image(a, b, config: SSIMConfig = SSIMConfig()):
    return ssim_map(a, b, config).mean(dim=(1, 2, 3))


def to_unit(x):
    return (x + 1) / 2


def se_cycle_from_reconstruction(i_s, rec_s, i_r, rec_r, config: SSIMConfig = SSIMConfig()):
    """E[1 - SSIM(i_s, rec_s)] + E[1 - SSIM(i_r, rec_r)] on [-1, 1] images."""
    s = (1 - ssim_per_image(to_unit(i_s), to_unit(rec_s), config)).mean()
    r = (1 - ssim_per_image(to_unit(i_r), to_unit(rec_r), config)).mean()
    return s + r


def se_cycle_loss(i_s, i_r, G_sr, G_rs, config: SSIMConfig = SSIMConfig()):
    return se_cycle_from_reconstruction(i_s, G_rs(G_sr(i_s)), i_r, G_sr(G_rs(i_r)), config)


def gan_loss(pred, real: bool, mode: str = "lsgan"):
    if mode == "lsgan":
        return ((pred - (1.0 if real else 0.0)) ** 2).mean()
    if mode == "bce":
        target = torch.full_like(pred, 1.0 if real else 0.0)
        return F.binary_cross_entropy_with_logits(pred, target)
    raise ValueError(f"unknown GAN criterion {mode!r}")


def discriminator_loss(D, real, fake, mode: str = "lsgan"):
    return 0.5 * (gan_loss(D(real), True, mode) + gan_loss(D(fake.detach()), False, mode))


@dataclass
class CycleGANTerms:
    gan_sr: torch.Tensor
    gan_rs: torch.Tensor
    cycle: torch.Tensor
    total: torch.Tensor
    fake_r: torch.Tensor = field(repr=False)
    fake_s: torch.Tensor = field(repr=False)
    rec_s: torch.Tensor = field(repr=False)
    rec_r: torch.Tensor = field(repr=False)


def cycle_gan_loss(batch_s, batch_r, models, lambda_cycle: float = 10.0, mode: str = "lsgan") -> CycleGANTerms:
    """Generator-side CycleGAN objective: two adversarial terms plus weighted L1 cycle."""
    if len(batch_s) == 0 or len(batch_r) == 0:
        raise ValueError("cycle_gan_loss needs non-empty batches from both domains")
    fake_r = models.G_sr(batch_s)
    fake_s = models.G_rs(batch_r)
    rec_s = models.G_rs(fake_r)
    rec_r = models.G_sr(fake_s)
    gan_sr = gan_loss(models.D_r(fake_r), True, mode)
    gan_rs = gan_loss(models.D_s(fake_s), True, mode)
    cycle = (rec_s - batch_s).abs().mean() + (rec_r - batch_r).abs().mean()
    return CycleGANTerms(gan_sr, gan_rs, cycle, gan_sr + gan_rs + lambda_cycle * cycle,
                         fake_r, fake_s, rec_s, rec_r)


def domain_cls_loss(O_s, O_r):
    """Pixel-wise cross entropy: class 0 at source locations, class 1 at target ones."""
    if O_s.shape[1] != 2 or O_r.shape[1] != 2:
        raise ValueError("domain logits must have two channels")
    ls = -F.log_softmax(O_s, dim=1)[:, 0].mean()
    lr = -F.log_softmax(O_r, dim=1)[:, 1].mean()
    return ls + lr


def inverse_adv_loss(O_r, reduction: str = "mean"):
    """-log p(source) at every real-feature location; summed, or averaged."""
    if O_r.shape[1] != 2:
        raise ValueError("domain logits must have two channels")
    nll = -F.log_softmax(O_r, dim=1)[:, 0]
    if reduction == "sum":
        return nll.sum()
    if reduction == "mean":
        return nll.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def weighted_total(cnt, trans, adv, w: LossWeights):
    return w.alpha * cnt + w.beta * trans + w.lambda_adv * adv


def adversarial_features(models, batch_s, fake_r, batch_r, adv_features: str = "sfcn", f_s=None):
    """Feature maps the domain classifier sees for the synthetic and real batches.

    "sfcn": spatial-encoder output on translated synthetic and on real images.
    "generator": G_sr encoder output on raw synthetic and on real images.
    """
    if adv_features == "sfcn":
        return (models.sfcn.features(fake_r) if f_s is None else f_s), models.sfcn.features(batch_r)
    if adv_features == "generator":
        return models.G_sr.encode(batch_s), models.G_sr.encode(batch_r)
    raise ValueError(f"unknown adv_features {adv_features!r}")


@dataclass
class JointTerms:
    cnt: torch.Tensor
    trans: torch.Tensor
    adv: torch.Tensor
    total: torch.Tensor
    cyclegan: CycleGANTerms = field(repr=False)
    se_cycle: torch.Tensor
    feat_s: torch.Tensor = field(repr=False)
    feat_r: torch.Tensor = field(repr=False)

    def scalars(self) -> dict:
        c = self.cyclegan
        return {k: float(v.detach()) for k, v in (
            ("cnt", self.cnt), ("trans", self.trans), ("adv", self.adv), ("total", self.total),
            ("gan_sr", c.gan_sr), ("gan_rs", c.gan_rs), ("cycle", c.cycle), ("se_cycle", self.se_cycle))}


def joint_loss(batch_s, labels_s, batch_r, models, w: LossWeights, *, se_cycle: bool = True,
               gan_mode: str = "lsgan", adv_features: str = "sfcn", adv_reduction: str = "mean",
               count_to_generator: bool = True, ssim_config: SSIMConfig = SSIMConfig()) -> JointTerms:
    """alpha * L_cnt(SFCN(G_sr(i_s)), labels) + beta * L_trans + lambda_adv * L_adv(F_R).

    L_trans is the CycleGAN objective plus the SSIM cycle term (when enabled).
    With count_to_generator=False the counting term sees G_sr(i_s) through a
    stop-gradient, so G_sr is shaped by the translation terms alone.
    """
    cg = cycle_gan_loss(batch_s, batch_r, models, w.lambda_cycle, gan_mode)
    se = (se_cycle_from_reconstruction(batch_s, cg.rec_s, batch_r, cg.rec_r, ssim_config)
          if se_cycle else torch.zeros((), dtype=batch_s.dtype))
    trans = cg.total + se
    f_s = models.sfcn.features(cg.fake_r if count_to_generator else cg.fake_r.detach())
    cnt = counting_mse(models.sfcn.heads(f_s), labels_s)
    if adv_features == "generator":
        f_s = None
    f_s, f_r = adversarial_features(models, batch_s, cg.fake_r, batch_r, adv_features, f_s)
    adv = inverse_adv_loss(models.D_dc(f_r), adv_reduction)
    return JointTerms(cnt, trans, adv, weighted_total(cnt, trans, adv, w), cg, se, f_s, f_r)
