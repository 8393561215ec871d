"""Overfit check: can the slim model + DDIM sampler reconstruct 16 images?"""
import sys, time
sys.path.insert(0, "src")
import numpy as np
import torch

from progdae.data import load_dataset
from progdae.models import ModelConfig
from progdae.training import (
    TrainConfig, make_train_state, train_step_autoencode,
    build_training_arrays, reconstruct,
)
from progdae.metrics import psnr

root = sys.argv[1]
steps = int(sys.argv[2])
batch = int(sys.argv[3])

ds = load_dataset(root + "/data")
mc = ModelConfig(enc_channels=(16, 32, 64, 96), unet_channels=(16, 32, 64))
tc = TrainConfig(model=mc, batch_size=batch, seed=0)
state = make_train_state(tc)
arrays = build_training_arrays(ds, tc)
x = arrays.images[:16].clone()

t0 = time.time()
for step in range(steps):
    idx = torch.randint(0, 16, (batch,), generator=state.generator)
    mse = train_step_autoencode(state, x[idx])
    if step % 150 == 0:
        print(f"step {step}: mse {mse:.5f}  ({time.time()-t0:.0f}s)", flush=True)
print(f"train {time.time()-t0:.0f}s")

state.model.eval()
vals = []
for i in range(8):
    rec = reconstruct(state.model, x[i].numpy()[0], sample_steps=50, seed=1)
    vals.append(psnr(rec, x[i].numpy()[0]))
print("overfit identity PSNR:", np.round(vals, 2), "mean", np.mean(vals))
