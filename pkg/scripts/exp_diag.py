"""Longer overfit + per-t one-shot prediction quality diagnostic."""
import sys, time
sys.path.insert(0, "src")
import numpy as np
import torch

from progdae.data import load_dataset
from progdae.diffusion import make_linear_schedule, forward_noise
from progdae.models import ModelConfig
from progdae.training import (
    TrainConfig, make_train_state, train_step_autoencode,
    build_training_arrays, reconstruct,
)
from progdae.metrics import psnr

root, steps, batch = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
ch = sys.argv[4] if len(sys.argv) > 4 else "16"
chans = {"16": ((16,32,64,96),(16,32,64)), "24": ((24,48,96,128),(24,48,96)), "32": ((32,64,96,128),(32,64,96))}[ch]

ds = load_dataset(root + "/data")
mc = ModelConfig(enc_channels=chans[0], unet_channels=chans[1])
tc = TrainConfig(model=mc, batch_size=batch, seed=0)
state = make_train_state(tc)
arrays = build_training_arrays(ds, tc)
x = arrays.images[:16].clone()

t0 = time.time()
for step in range(steps):
    idx = torch.randint(0, 16, (batch,), generator=state.generator)
    mse = train_step_autoencode(state, x[idx])
    if step % 500 == 0:
        print(f"step {step}: mse {mse:.5f}  ({time.time()-t0:.0f}s)", flush=True)
print(f"train {time.time()-t0:.0f}s  params {sum(p.numel() for p in state.model.parameters())}")
from progdae.models import save_checkpoint
save_checkpoint(sys.argv[5] if len(sys.argv) > 5 else "/root/exp/diag_model.ckpt", state.model)

state.model.eval()
sched = make_linear_schedule(tc.num_timesteps, tc.beta_start, tc.beta_end)
g = torch.Generator().manual_seed(7)
with torch.no_grad():
    z = state.model.encode(x)
    for t in (50, 200, 500, 800, 950, 999):
        eps = torch.randn(x.shape, generator=g)
        xt = forward_noise(x, t, eps, sched)
        x0h = state.model.denoise(xt, torch.full((16,), t, dtype=torch.long), z)
        vals = [psnr(x0h[i, 0].numpy(), x[i, 0].numpy()) for i in range(16)]
        print(f"one-shot t={t:4d}: PSNR mean {np.mean(vals):.2f}")
for ns in (10, 50):
    vals = [psnr(reconstruct(state.model, x[i, 0].numpy(), sample_steps=ns, seed=1), x[i, 0].numpy()) for i in range(8)]
    print(f"sampled recon steps={ns}: PSNR mean {np.mean(vals):.2f}")
