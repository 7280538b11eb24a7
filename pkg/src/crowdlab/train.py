"""Training regimes: supervised SFCN, pre-train/fine-tune, and joint adaptation.

Runs are deterministic for a given config and seed in single-threaded mode.
When ``run_dir`` is given, a run writes::

    config.json      normalized config
    records.jsonl    one line of loss components per step
    eval/            per-epoch EvalReports
    ckpt/            last.ckpt and best.ckpt
    translate/       (adaptation only) synthetic | translated image strips
    density_bound.json  (adaptation with density_reg) fitted MAX_S
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import losses as L
from .checkpoint import save_checkpoint
from .config import TrainConfig, write_config
from .labels import Split
from .metrics import EvalReport, count_errors, evaluate_model
from .nets import SFCN, DAModels
from .regularizers import DensityBound, FilterRule, apply_scene_filter, density_clip, fit_density_bound

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_finite_step):
        super().__init__(f"non-finite loss at step {step}; last finite step {last_finite_step}")
        self.step = step
        self.last_finite_step = last_finite_step


class ModeCollapse(RuntimeError):
    pass


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def state_digest(module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class RunRecord:
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_checkpoint: str | None = None
    initial_digest: str = ""
    best_state: dict | None = field(default=None, repr=False)

    def loss_curve(self, key: str = "total") -> list[float]:
        return [s[key] for s in self.steps]

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("best_state")
        return d


class _Writer:
    def __init__(self, run_dir, cfg: TrainConfig):
        self.dir = Path(run_dir) if run_dir is not None else None
        if self.dir is not None:
            for sub in ("eval", "ckpt"):
                (self.dir / sub).mkdir(parents=True, exist_ok=True)
            write_config(cfg, self.dir)
            self._records = open(self.dir / "records.jsonl", "w")

    def step(self, row: dict):
        if self.dir is not None:
            self._records.write(json.dumps(row) + "\n")

    def eval(self, epoch: int, report: EvalReport | None, extra: dict | None = None):
        if self.dir is not None and report is not None:
            payload = {**asdict(report), **(extra or {})}
            (self.dir / "eval" / f"epoch_{epoch:03d}.json").write_text(json.dumps(payload, indent=1))

    def ckpt(self, name: str, models, optimizers, step, cfg) -> str | None:
        if self.dir is None:
            return None
        return str(save_checkpoint(self.dir / "ckpt" / f"{name}.ckpt", models, optimizers, step, cfg.hash))

    def close(self, record: RunRecord):
        if self.dir is not None:
            self._records.close()
            (self.dir / "record.json").write_text(json.dumps(record.to_json(), indent=1))


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 in [0, 1] -> 3 x H x W in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float() * 2 - 1


def to_image(t: torch.Tensor) -> np.ndarray:
    return ((t.detach().clamp(-1, 1) + 1) / 2).permute(1, 2, 0).numpy()


class _Cache:
    """Tensors for a set of ids: images, stride-8 density targets, masks."""

    def __init__(self, ds, ids, cfg: TrainConfig, with_mask=False):
        self.ids = list(ids)
        self.images = {i: to_tensor(ds.image(i)) for i in self.ids}
        self.density = {i: torch.from_numpy(ds.density(i, cfg.sigma, cfg.lnf, SFCN.stride)).float()[None]
                        for i in self.ids}
        self.masks = ({i: torch.from_numpy(ds.mask(i).astype(np.int64)) for i in self.ids}
                      if with_mask else None)


def _crop_box(shape, crop, rng):
    h, w = shape
    ch, cw = min(crop, h), min(crop, w)
    oy = int(rng.integers(0, (h - ch) // 8 + 1)) * 8
    ox = int(rng.integers(0, (w - cw) // 8 + 1)) * 8
    return oy, ox, ch, cw


def _batch(cache: _Cache, ids, cfg: TrainConfig, rng, with_mask=False):
    imgs, dens, masks = [], [], []
    for i in ids:
        img = cache.images[i]
        oy, ox, ch, cw = _crop_box(img.shape[-2:], cfg.crop_size, rng)
        im = img[:, oy:oy + ch, ox:ox + cw]
        d = cache.density[i][:, oy // 8:(oy + ch) // 8, ox // 8:(ox + cw) // 8]
        m = cache.masks[i][oy:oy + ch, ox:ox + cw] if with_mask else None
        if cfg.hflip and rng.random() < 0.5:
            im, d = im.flip(-1), d.flip(-1)
            m = m.flip(-1) if m is not None else None
        imgs.append(im)
        dens.append(d)
        masks.append(m)
    out = torch.stack(imgs), torch.stack(dens)
    return (*out, torch.stack(masks)) if with_mask else out


def _epoch_batches(ids, batch_size, rng):
    order = [ids[i] for i in rng.permutation(len(ids))]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** epoch


def _better(report: EvalReport, best, select_by):
    if best is None:
        return True
    if select_by == "miou":
        return report.miou > best.miou
    return report.mae < best.mae


def train_supervised(cfg: TrainConfig, dataset, split: Split, run_dir=None, init_state: dict | None = None,
                     eval_ids=None) -> RunRecord:
    """Train an SFCN on counting MSE, plus mtl_seg_weight * cross entropy when > 0.

    The best epoch is chosen on ``split.val_ids`` (MAE, or mIoU with
    select_by="miou"); without validation ids the last epoch wins.
    """
    set_determinism(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    mtl = cfg.mtl_seg_weight > 0
    model = SFCN(3, cfg.sfcn_width, seg_head=mtl)
    if init_state is not None:
        model.load_state_dict(init_state)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    train = _Cache(dataset, split.train_ids, cfg, with_mask=mtl)
    val_ids = list(split.val_ids if eval_ids is None else eval_ids)

    record = RunRecord(cfg.hash, initial_digest=state_digest(model))
    writer = _Writer(run_dir, cfg)
    best_report, step, last_finite = None, 0, -1
    try:
        for epoch in range(cfg.epochs):
            lr = epoch_lr(cfg, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            sums = {}
            batches = _epoch_batches(train.ids, cfg.batch_size, rng)
            for ids in batches:
                if mtl:
                    x, d, m = _batch(train, ids, cfg, rng, with_mask=True)
                    dens, logits = model(x, with_seg=True)
                    cnt = L.counting_mse(dens, d)
                    seg = L.seg_ce(logits, m)
                    total = cnt + cfg.mtl_seg_weight * seg
                    row = {"cnt": cnt.item(), "seg": seg.item(), "total": total.item()}
                else:
                    x, d = _batch(train, ids, cfg, rng)
                    cnt = L.counting_mse(model(x), d)
                    total = cnt
                    row = {"cnt": cnt.item(), "total": total.item()}
                if not math.isfinite(row["total"]):
                    raise TrainingDiverged(step, last_finite)
                opt.zero_grad()
                total.backward()
                opt.step()
                last_finite = step
                row = {"step": step, "epoch": epoch, "lr": lr, **row}
                record.steps.append(row)
                writer.step(row)
                for k in row:
                    if k not in ("step", "epoch", "lr"):
                        sums[k] = sums.get(k, 0.0) + row[k]
                step += 1
            entry = {"epoch": epoch, "lr": lr, "losses": {k: v / len(batches) for k, v in sums.items()}}
            report = evaluate_model(model, val_ids, dataset, cfg.lnf, cfg.sigma) if val_ids else None
            entry["val"] = asdict(report) if report else None
            record.epochs.append(entry)
            writer.eval(epoch, report)
            writer.ckpt("last", {"sfcn": model}, {"sfcn": opt}, step, cfg)
            if report is None or _better(report, best_report, cfg.select_by):
                best_report = report
                record.best_epoch = epoch
                record.best_state = copy.deepcopy(model.state_dict())
                record.best_checkpoint = writer.ckpt("best", {"sfcn": model}, {"sfcn": opt}, step, cfg)
    finally:
        writer.close(record)
    return record


def load_sfcn(record: RunRecord, cfg: TrainConfig) -> SFCN:
    model = SFCN(3, cfg.sfcn_width, seg_head=cfg.mtl_seg_weight > 0)
    model.load_state_dict(record.best_state)
    return model.eval()


@dataclass
class PretrainResult:
    pretrain: RunRecord
    finetune: RunRecord
    scratch: RunRecord
    handoff_state: dict = field(repr=False, default=None)


def pretrain_then_finetune(cfg_pre: TrainConfig, cfg_ft: TrainConfig, source_ds, source_split: Split,
                           target_ds, target_split: Split, run_dir=None) -> PretrainResult:
    """Pre-train on the source domain, fine-tune every parameter on the target.

    A control arm trains on the target from scratch with the fine-tune config.
    """
    arch = lambda c: (c.sfcn_width, c.mtl_seg_weight > 0)  # noqa: E731
    if arch(cfg_pre) != arch(cfg_ft):
        raise ValueError(f"architecture mismatch between phases: {arch(cfg_pre)} vs {arch(cfg_ft)}")
    sub = (lambda name: Path(run_dir) / name) if run_dir is not None else (lambda name: None)
    pre = train_supervised(cfg_pre, source_ds, source_split, sub("pretrain"))
    handoff = copy.deepcopy(pre.best_state)
    ft = train_supervised(cfg_ft, target_ds, target_split, sub("finetune"), init_state=handoff)
    scratch = train_supervised(cfg_ft, target_ds, target_split, sub("scratch"))
    return PretrainResult(pre, ft, scratch, handoff)


@dataclass
class DARun:
    record: RunRecord
    models: DAModels
    bound: DensityBound | None

    def predictor(self, clip: bool | None = None):
        """Target-domain predictor: the jointly trained SFCN applied directly."""
        from .metrics import sfcn_predictor
        base = sfcn_predictor(self.models.sfcn)
        bound = self.bound if clip is None or clip else None
        if bound is None:
            return base

        def predict(image):
            d, m = base(image)
            return density_clip(d, bound), m
        return predict


def reconstruction_ssim(models: DAModels, images_s, images_r) -> float:
    """Mean SSIM(original, two-generator reconstruction) over both domains."""
    vals = []
    with torch.no_grad():
        for imgs, first, second in ((images_s, models.G_sr, models.G_rs), (images_r, models.G_rs, models.G_sr)):
            for img in imgs:
                x = to_tensor(img)[None]
                rec = second(first(x))
                vals.append(float(L.ssim_index(L.to_unit(x), L.to_unit(rec))))
    return float(np.mean(vals))


def _set_train(models: DAModels, flag: bool):
    for _, m in models.items():
        m.train(flag)


def _dump_pairs(path, images, translated):
    strips = [np.concatenate([a, b], axis=1) for a, b in zip(images, translated)]
    Image.fromarray((np.concatenate(strips, axis=0) * 255).round().astype(np.uint8)).save(path)


def train_da_joint(cfg: TrainConfig, synth_ds, synth_split: Split, real_images, run_dir=None) -> DARun:
    """Joint SE CycleGAN + SFCN training with feature-level adversarial learning.

    ``real_images`` only needs ``ids`` and ``image(id)``; a full dataset is
    wrapped in an image-only view so target labels stay unread. Each step
    first updates D_R, D_S and the domain classifier on their own losses, then
    generators and SFCN on the joint objective. The best epoch is selected on the
    MAE of translated synthetic validation images.
    """
    set_determinism(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if hasattr(real_images, "images_only"):
        real_images = real_images.images_only()

    train_ids = list(synth_split.train_ids)
    if cfg.filter_rule is not None:
        rule = (FilterRule.from_dict(cfg.filter_rule) if isinstance(cfg.filter_rule, dict)
                else FilterRule.load(cfg.filter_rule))
        recs = [synth_ds.by_id[i] for i in train_ids]
        train_ids = [r["id"] for r in apply_scene_filter(recs, rule)]
        if not train_ids:
            raise ValueError(f"filter rule {rule.name or cfg.filter_rule} rejected every synthetic image")
    synth = _Cache(synth_ds, train_ids, cfg)
    real = {i: to_tensor(real_images.image(i)) for i in real_images.ids}
    real_ids = list(real)
    bound = fit_density_bound([d.numpy() for d in synth.density.values()]) if cfg.density_reg else None

    models = DAModels.create(cfg.sfcn_width, cfg.ngf, cfg.n_blocks, cfg.ndf, cfg.dc_ndf,
                             adv_features=cfg.adv_features)
    w = cfg.loss_weights
    opt_g = torch.optim.Adam([*models.G_sr.parameters(), *models.G_rs.parameters()],
                             lr=cfg.gan_lr, betas=cfg.gan_betas)
    opt_c = torch.optim.Adam(models.sfcn.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    opt_d = torch.optim.Adam([*models.D_r.parameters(), *models.D_s.parameters()],
                             lr=cfg.gan_lr, betas=cfg.gan_betas)
    opt_dc = torch.optim.Adam(models.D_dc.parameters(), lr=cfg.dc_lr, betas=cfg.betas, eps=cfg.eps)
    optimizers = {"gen": opt_g, "sfcn": opt_c, "disc": opt_d, "domcls": opt_dc}
    model_map = dict(models.items())

    record = RunRecord(cfg.hash, initial_digest=state_digest(models.sfcn))
    writer = _Writer(run_dir, cfg)
    if writer.dir is not None:
        (writer.dir / "translate").mkdir(exist_ok=True)
        if bound is not None:
            (writer.dir / "density_bound.json").write_text(json.dumps({"max_s": bound.max_s}))
    val_ids = list(synth_split.val_ids)
    best_mae, low_var_epochs, step, last_finite = math.inf, 0, 0, -1
    try:
        for epoch in range(cfg.epochs):
            for group in opt_c.param_groups:
                group["lr"] = epoch_lr(cfg, epoch)
            warm = epoch < cfg.warmup_epochs
            ew = L.LossWeights(0.0 if warm else w.alpha, w.beta, 0.0 if warm else w.lambda_adv, w.lambda_cycle)
            _set_train(models, True)
            sums, variances = {}, []
            batches = _epoch_batches(synth.ids, cfg.batch_size, rng)
            for ids in batches:
                xs, ds = _batch(synth, ids, cfg, rng)
                pick = rng.integers(0, len(real_ids), len(ids))
                xr = torch.stack([real[real_ids[j]] for j in pick])
                oy, ox, ch, cw = _crop_box(xr.shape[-2:], cfg.crop_size, rng)
                xr = xr[..., oy:oy + ch, ox:ox + cw]

                # (1) discriminators and domain classifier on the current translations
                with torch.no_grad():
                    fake_r, fake_s = models.G_sr(xs), models.G_rs(xr)
                    f_s, f_r = L.adversarial_features(models, xs, fake_r, xr, cfg.adv_features)
                d_gan = (L.discriminator_loss(models.D_r, xr, fake_r, cfg.gan_mode)
                         + L.discriminator_loss(models.D_s, xs, fake_s, cfg.gan_mode))
                d_dom = L.domain_cls_loss(models.D_dc(f_s), models.D_dc(f_r))
                opt_d.zero_grad()
                opt_dc.zero_grad()
                (d_gan + d_dom).backward()
                opt_d.step()
                opt_dc.step()

                # (2) generators and SFCN on the joint objective
                jt = L.joint_loss(xs, ds, xr, models, ew, se_cycle=cfg.se_cycle, gan_mode=cfg.gan_mode,
                                  adv_features=cfg.adv_features, adv_reduction=cfg.adv_reduction,
                                  count_to_generator=cfg.count_to_generator)
                if not math.isfinite(jt.total.item()):
                    raise TrainingDiverged(step, last_finite)
                opt_g.zero_grad()
                opt_c.zero_grad()
                jt.total.backward()
                opt_g.step()
                if not warm:
                    opt_c.step()

                last_finite = step
                row = {"step": step, "epoch": epoch, **jt.scalars(), "d_gan": d_gan.item(), "d_dom": d_dom.item()}
                record.steps.append(row)
                writer.step(row)
                for k, v in row.items():
                    if k not in ("step", "epoch"):
                        sums[k] = sums.get(k, 0.0) + v
                variances.append(fake_r.var().item())
                step += 1

            _set_train(models, False)
            mean_var = float(np.mean(variances))
            low_var_epochs = low_var_epochs + 1 if mean_var < cfg.collapse_var else 0
            entry = {"epoch": epoch, "lr": epoch_lr(cfg, epoch), "translated_var": mean_var,
                     "losses": {k: v / len(batches) for k, v in sums.items()}}
            report = None
            if val_ids:
                report = evaluate_model(_translated_predictor(models, bound), val_ids, synth_ds, cfg.lnf, cfg.sigma)
                entry["val"] = asdict(report)
                writer.eval(epoch, report, {"translated_var": mean_var})
            record.epochs.append(entry)
            if writer.dir is not None and val_ids:
                shown = [synth_ds.image(i) for i in val_ids[:4]]
                with torch.no_grad():
                    trans = [to_image(models.G_sr(to_tensor(im)[None])[0]) for im in shown]
                _dump_pairs(writer.dir / "translate" / f"epoch_{epoch:03d}.png", shown, trans)
            writer.ckpt("last", model_map, optimizers, step, cfg)
            score = report.mae if report is not None else -epoch
            if score < best_mae or record.best_state is None:
                best_mae = score
                record.best_epoch = epoch
                record.best_state = {k: copy.deepcopy(m.state_dict()) for k, m in models.items()}
                record.best_checkpoint = writer.ckpt("best", model_map, optimizers, step, cfg)
            if low_var_epochs >= cfg.collapse_patience:
                raise ModeCollapse(
                    f"translated-batch pixel variance {mean_var:.2e} below {cfg.collapse_var:g} "
                    f"for {low_var_epochs} consecutive epochs (epoch {epoch})")
    finally:
        writer.close(record)

    for name, m in models.items():
        m.load_state_dict(record.best_state[name])
    _set_train(models, False)
    return DARun(record, models, bound)


def _translated_predictor(models: DAModels, bound):
    @torch.no_grad()
    def predict(image):
        x = models.G_sr(to_tensor(image)[None])
        d = models.sfcn(x)[0, 0].double().numpy()
        return (density_clip(d, bound) if bound is not None else d), None
    return predict


def target_mae(predict, dataset, ids, lnf=100.0) -> float:
    """Count MAE of a predictor over labeled ids (evaluation only, after training)."""
    preds = [float(np.asarray(predict(dataset.image(i))[0]).sum() / lnf) for i in ids]
    return count_errors(preds, [len(dataset.dots(i)) for i in ids])[0]
