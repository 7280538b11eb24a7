"""Generate a few crowd scenes, train a small SFCN on them and report counting errors.

Runs in a couple of minutes on one CPU core:

    python demos/count_a_crowd.py
"""
import numpy as np
import torch

from crowdlab import MemoryDataset, evaluate_model, generate_samples, split_manifest, validate_config
from crowdlab.train import load_sfcn, train_supervised

torch.set_num_threads(1)

data = MemoryDataset.from_samples(generate_samples(8, seed=0, image_size=(64, 64), per_scene=1))
split = split_manifest(data.records, "random", seed=0)
counts = [len(data.dots(rid)) for rid in data.ids]
print(f"{len(data.ids)} images, {np.mean(counts):.1f} people on average")

cfg = validate_config({"lr": 5e-4, "epochs": 40, "batch_size": 2, "crop_size": 64, "hflip": True})
record = train_supervised(cfg, data, split)
print(f"best epoch {record.best_epoch}, val MAE {record.epochs[record.best_epoch]['val']['mae']:.2f}")

model = load_sfcn(record, cfg)
report = evaluate_model(model, split.test_ids, data)
print(f"test MAE {report.mae:.2f}  MSE {report.mse:.2f}  PSNR {report.psnr:.1f}  SSIM {report.ssim:.3f}")
