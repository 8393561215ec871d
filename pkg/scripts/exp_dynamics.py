"""Probe phase-2 dynamics: do generated AD follow-ups grow ventricles and
shrink hippocampi, ordered by gap bin?  Short run, slim model."""

import os
import sys
import time

import numpy as np
import torch
from scipy import stats

from progdae.data import load_dataset, write_cohort
from progdae.models import ModelConfig
from progdae.phantom import CohortConfig, generate_cohort, region_windows, segment_bands
from progdae.training import TrainConfig, generate_followups, run_training
from progdae.models import load_checkpoint

ROOT = sys.argv[1] if len(sys.argv) > 1 else "/root/exp/dyn1"
LAMBDA3 = float(sys.argv[2]) if len(sys.argv) > 2 else 0.02
EPOCHS = (int(sys.argv[3]), int(sys.argv[4])) if len(sys.argv) > 4 else (30, 60)

data_dir = os.path.join(ROOT, "data")
run_dir = os.path.join(ROOT, "run")

if not os.path.exists(os.path.join(data_dir, "manifest.csv")):
    cohort = generate_cohort(CohortConfig(seed=0))
    write_cohort(cohort, data_dir)
    print("cohort written", flush=True)

dataset = load_dataset(data_dir)
model_cfg = ModelConfig(unet_channels=(16, 32, 64), enc_channels=(16, 32, 64, 96))
cfg = TrainConfig(
    epochs_autoencode=EPOCHS[0],
    epochs_progression=EPOCHS[1],
    lambda3=LAMBDA3,
    seed=0,
    model=model_cfg,
)
t0 = time.time()
result = run_training(cfg, dataset, run_dir)
print(f"training took {time.time()-t0:.0f}s", flush=True)

model, _ = load_checkpoint(result.checkpoint_path)
model.eval()


def psnr(a, b):
    mse = float(np.mean((a - b) ** 2))
    return 100.0 if mse < 1e-10 else min(10 * np.log10(1.0 / mse), 100.0)


def areas(image, masks):
    segs = segment_bands(image, region_windows(masks, 3))
    return {r: int(m.sum()) for r, m in segs.items()}


test_baselines = dataset.baselines("test")
ad_baselines = [v for v in test_baselines if v.diagnosis == "AD"]
cn_baselines = [v for v in test_baselines if v.diagnosis == "CN"]
print(f"test: {len(ad_baselines)} AD, {len(cn_baselines)} CN", flush=True)

# reconstruction quality (phase includes shift=0? use CN smallest gap as proxy for identity)
recon_psnrs = []
for v in test_baselines[:12]:
    gen = generate_followups(model, v.image, [v.diagnosis], [0.5], sample_steps=50, seed=1)
    recon_psnrs.append(psnr(gen[0], v.image))
print(f"identity PSNR (gap 0.5, own diag): mean {np.mean(recon_psnrs):.2f} dB", flush=True)

# cross-subject PSNR floor
import itertools
cross = [psnr(a.image, b.image) for a, b in itertools.combinations(test_baselines[:8], 2)]
print(f"cross-subject PSNR: mean {np.mean(cross):.2f} dB", flush=True)

# per-bin cohort mean ventricle / hippocampus ratios for AD attributes
bins = np.arange(1, 11)
gaps = bins * 0.5
vent_ratio = np.zeros(10)
hip_ratio = np.zeros(10)
for bi, gap in enumerate(gaps):
    vr, hr = [], []
    for v in ad_baselines:
        gen = generate_followups(model, v.image, ["AD"], [float(gap)], sample_steps=50, seed=2)
        base_areas = areas(v.image, v.masks)
        gen_areas = areas(gen[0], v.masks)
        if base_areas["ventricles"] > 0:
            vr.append(gen_areas["ventricles"] / base_areas["ventricles"])
        if base_areas["hippocampus"] > 0:
            hr.append(gen_areas["hippocampus"] / base_areas["hippocampus"])
    vent_ratio[bi] = np.mean(vr)
    hip_ratio[bi] = np.mean(hr)
    print(f"bin {bi+1} (gap {gap:.1f}y): vent ratio {vent_ratio[bi]:.4f}, hip ratio {hip_ratio[bi]:.4f}", flush=True)

rho_v = stats.spearmanr(bins, vent_ratio).statistic
rho_h = stats.spearmanr(bins, hip_ratio).statistic
print(f"Spearman vent: {rho_v:.3f} (need > 0.8), hip: {rho_h:.3f} (need < -0.5)", flush=True)

# CN smallest gap: area change should be near zero
vr_cn = []
for v in cn_baselines:
    gen = generate_followups(model, v.image, ["CN"], [0.5], sample_steps=50, seed=3)
    a0 = areas(v.image, v.masks)
    a1 = areas(gen[0], v.masks)
    if a0["ventricles"] > 0:
        vr_cn.append(a1["ventricles"] / a0["ventricles"])
print(f"CN bin1 vent ratio: mean {np.mean(vr_cn):.4f}", flush=True)
print("DONE", flush=True)
