"""Phase-1 health probe at default widths on the full toy train split."""
import sys, time
sys.path.insert(0, "src")
import numpy as np
import torch

from progdae.data import load_dataset
from progdae.models import ModelConfig, save_checkpoint
from progdae.training import (
    TrainConfig, make_train_state, train_step_autoencode,
    build_training_arrays, reconstruct,
)
from progdae.metrics import psnr

root, steps, batch = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
ckpt = sys.argv[4]

ds = load_dataset(root + "/data")
mc = ModelConfig()
tc = TrainConfig(model=mc, batch_size=batch, seed=0)
state = make_train_state(tc)
arrays = build_training_arrays(ds, tc)
x = arrays.images
n = x.shape[0]
print(f"train images: {n}  params {sum(p.numel() for p in state.model.parameters())}", flush=True)

t0 = time.time()
for step in range(steps):
    idx = torch.randint(0, n, (batch,), generator=state.generator)
    mse = train_step_autoencode(state, x[idx])
    if step % 250 == 0:
        print(f"step {step}: mse {mse:.5f}  ({time.time()-t0:.0f}s)", flush=True)
print(f"train {time.time()-t0:.0f}s", flush=True)
save_checkpoint(ckpt, state.model)

state.model.eval()
test_base = ds.baselines("test")[:8]
train_imgs = [x[i, 0].numpy() for i in range(8)]
test_imgs = [np.asarray(v.image, dtype=np.float64) for v in test_base]
for name, imgs in (("train", train_imgs), ("test", test_imgs)):
    vals = [psnr(reconstruct(state.model, im, sample_steps=50, seed=1), np.asarray(im, dtype=np.float64)) for im in imgs]
    print(f"sampled identity PSNR ({name}): {np.mean(vals):.2f}  {['%.1f' % v for v in vals]}", flush=True)
cross = [psnr(test_imgs[i], test_imgs[j]) for i in range(8) for j in range(i + 1, 8)]
print(f"cross-subject PSNR: {np.mean(cross):.2f}")
