"""Pick synthetic scenes that resemble a target dataset, then adapt to unlabelled target-style images.

The adaptation run translates synthetic images toward the target style while the
counter trains on the translated images; target labels are never read.

    python demos/filter_and_adapt.py
"""
import torch

from crowdlab import FilterRule, MemoryDataset, generate_samples, scene_filter, split_manifest, validate_config
from crowdlab.scenes import TINTED
from crowdlab.train import target_mae, train_da_joint

torch.set_num_threads(1)

synthetic = MemoryDataset.from_samples(generate_samples(12, seed=1, image_size=(64, 64), per_scene=1))
target = MemoryDataset.from_samples(generate_samples(4, seed=2, image_size=(64, 64), per_scene=1, style=TINTED))

rule = FilterRule.load("sht_b")
kept, rejected = scene_filter(synthetic.records, rule)
print(f"rule {rule.name}: kept {len(kept)}, rejected {len(rejected)}")
for clause in sorted(set(rejected.values())):
    print(f"  {clause}: {sum(c == clause for c in rejected.values())}")

split = split_manifest(synthetic.records, "random", seed=0)
cfg = validate_config({"regime": "da_joint", "lr": 5e-4, "epochs": 3, "batch_size": 4, "crop_size": 64,
                       "ngf": 8, "n_blocks": 2, "ndf": 8, "density_reg": True,
                       "warmup_epochs": 1, "count_to_generator": False})
before = target.label_reads
run = train_da_joint(cfg, synthetic, split, target.images_only())
assert target.label_reads == before
print(f"MAX_S {run.bound.max_s:.4f}")

# labels are read here, after training, only to score the result
print(f"target MAE {target_mae(run.predictor(clip=True), target, target.ids):.2f}")
