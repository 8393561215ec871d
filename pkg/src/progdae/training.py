"""Two-phase training orchestration and follow-up inference.

Phase 1 (auto-encode mode) trains encoder and denoiser to reconstruct the
clean image from its noised version and its own latent.  Phase 2
(progression mode) additionally routes the latent through the attribute
shift before decoding and adds the consistency cross-entropy, optimizing
all four networks jointly:

    loss = mse                      (auto-encode mode)
    loss = l2 * mse + l3 * ce       (progression mode)

where mse anchors the generated follow-up to the baseline (identity
preservation; no follow-up image is ever read by the loss) and ce is the
attribute regressor's cross-entropy on the requested diagnosis and gap bin.
The training-time follow-up estimate is the denoiser's single-pass clean
prediction; iterative sampling is inference-only.

Training state (weights, optimizer moments, epoch, RNG stream) serializes
to a single file; resuming reproduces the uninterrupted run bit-exactly.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, fields

import numpy as np
import torch
from torch.nn import functional as F

from .control import (
    NUM_GAP_BINS,
    attribute_ce_loss,
    apply_shift,
    encode_attributes,
)
from .data import Dataset
from .diffusion import (
    NoiseSchedule,
    forward_noise,
    make_linear_schedule,
    timestep_subsequence,
    ddim_sample,
)
from .models import ModelConfig, ProgressionModel, load_checkpoint, save_checkpoint
from .phantom import DIAGNOSES, region_windows

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainResult",
    "make_train_state",
    "save_train_state",
    "load_train_state",
    "train_step_autoencode",
    "train_step_progression",
    "run_training",
    "reconstruct",
    "infer_followup",
    "generate_followups",
]

logger = logging.getLogger(__name__)

TRAIN_STATE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; defaults are the full-scale recipe."""

    epochs_autoencode: int = 50
    epochs_progression: int = 100
    lambda2: float = 1.0
    lambda3: float = 0.001
    learning_rate: float = 0.001
    batch_size: int = 16
    num_timesteps: int = 1000
    sample_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    mask_dilation_px: int = 2
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if self.lambda2 <= 0:
            raise ValueError(f"lambda2 must be > 0, got {self.lambda2}")
        if self.lambda3 < 0:
            raise ValueError(f"lambda3 must be >= 0, got {self.lambda3}")
        if self.epochs_autoencode < 0 or self.epochs_progression < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 1 <= self.sample_steps <= self.num_timesteps:
            raise ValueError("sample_steps must lie in [1, num_timesteps]")
        if self.mask_dilation_px < 0:
            raise ValueError("mask_dilation_px must be >= 0")

    @property
    def total_epochs(self) -> int:
        return self.epochs_autoencode + self.epochs_progression

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_dict() if f.name == "model" else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        kwargs = dict(data)
        if "model" in kwargs and isinstance(kwargs["model"], dict):
            kwargs["model"] = ModelConfig.from_dict(kwargs["model"])
        unknown = set(kwargs) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**kwargs)


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""

    config: TrainConfig
    model: ProgressionModel
    optimizer: torch.optim.Adam
    generator: torch.Generator
    schedule: NoiseSchedule
    epoch: int = 0
    global_step: int = 0


@dataclass(frozen=True)
class TrainResult:
    out_dir: str
    checkpoint_path: str
    state_path: str
    metrics_path: str
    epochs_run: int
    completed: bool


def make_train_state(config: TrainConfig) -> TrainState:
    """Fresh state: seeded weight init, Adam over all four networks."""
    torch.manual_seed(config.seed)
    model = ProgressionModel(config.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    generator = torch.Generator().manual_seed(config.seed)
    schedule = make_linear_schedule(
        config.num_timesteps, config.beta_start, config.beta_end
    )
    return TrainState(
        config=config,
        model=model,
        optimizer=optimizer,
        generator=generator,
        schedule=schedule,
    )


def save_train_state(path: str, state: TrainState) -> None:
    meta = {
        "format_version": TRAIN_STATE_FORMAT_VERSION,
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "global_step": state.global_step,
        "param_groups": state.optimizer.state_dict()["param_groups"],
    }
    arrays = {
        "meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
        "rng/torch": state.generator.get_state().numpy(),
    }
    for name, tensor in state.model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    opt_state = state.optimizer.state_dict()["state"]
    for idx, entry in opt_state.items():
        for key, value in entry.items():
            arrays[f"opt/{idx}/{key}"] = (
                value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
            )
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_train_state(path: str) -> TrainState:
    with np.load(path, allow_pickle=False) as data:
        if "meta" not in data:
            raise ValueError(f"{path}: not a training state file")
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("format_version") != TRAIN_STATE_FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported training state version "
                f"{meta.get('format_version')!r}"
            )
        config = TrainConfig.from_dict(meta["config"])
        state = make_train_state(config)
        model_state = {
            name[len("param/"):]: torch.from_numpy(np.array(data[name]))
            for name in data.files
            if name.startswith("param/")
        }
        state.model.load_state_dict(model_state, strict=True)
        opt_entries: dict[int, dict[str, torch.Tensor]] = {}
        for name in data.files:
            if not name.startswith("opt/"):
                continue
            _, idx, key = name.split("/", 2)
            opt_entries.setdefault(int(idx), {})[key] = torch.from_numpy(
                np.array(data[name])
            )
        state.optimizer.load_state_dict(
            {"state": opt_entries, "param_groups": meta["param_groups"]}
        )
        state.generator.set_state(torch.from_numpy(np.array(data["rng/torch"])))
        state.epoch = int(meta["epoch"])
        state.global_step = int(meta["global_step"])
    return state


@dataclass(frozen=True)
class TrainArrays:
    """Train-split tensors: every visit (baselines and follow-ups alike)
    serves as a clean image with its own masks and diagnosis label."""

    images: torch.Tensor  # (N, 1, H, W) float32
    diagnosis_idx: torch.Tensor  # (N,) long
    roi: torch.Tensor  # (N, 1, H, W) float32, residual bounding boxes

    def __len__(self) -> int:
        return self.images.shape[0]


def build_training_arrays(dataset: Dataset, config: TrainConfig) -> TrainArrays:
    from .control import residual_roi_mask

    visits = dataset.split("train")
    if not visits:
        raise ValueError("dataset has no train split")
    images = []
    diag = []
    rois = []
    for visit in visits:
        images.append(visit.image[None])
        diag.append(DIAGNOSES.index(visit.diagnosis))
        dilated = region_windows(visit.masks, config.mask_dilation_px)
        rois.append(residual_roi_mask(dilated, dilated).mask[None])
    return TrainArrays(
        images=torch.from_numpy(np.stack(images)).float(),
        diagnosis_idx=torch.tensor(diag, dtype=torch.long),
        roi=torch.from_numpy(np.stack(rois)).float(),
    )


def _check_finite(loss: torch.Tensor, state: TrainState, out_dir: str | None, **context):
    if torch.isfinite(loss):
        return
    dump_path = None
    if out_dir is not None:
        dump_path = os.path.join(out_dir, "diagnostic_dump.npz")
        np.savez(
            dump_path,
            loss=loss.detach().numpy(),
            epoch=np.asarray(state.epoch),
            global_step=np.asarray(state.global_step),
            **{k: v.detach().cpu().numpy() for k, v in context.items()},
        )
    raise RuntimeError(
        f"non-finite loss {loss.item()} at epoch {state.epoch}, "
        f"step {state.global_step}"
        + (f"; diagnostics dumped to {dump_path}" if dump_path else "")
    )


def _draw_noise_and_t(
    state: TrainState, images: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    batch = images.shape[0]
    t = torch.randint(
        1, state.config.num_timesteps + 1, (batch,), generator=state.generator
    )
    eps = torch.randn(images.shape, generator=state.generator)
    return t, eps


def train_step_autoencode(
    state: TrainState, images: torch.Tensor, out_dir: str | None = None
) -> float:
    """One optimizer update in auto-encode mode; returns the scalar MSE.

    The shift estimator and regressor are never invoked, so their
    parameters (and optimizer moments) stay bitwise untouched.
    """
    if images.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    t, eps = _draw_noise_and_t(state, images)
    x_t = forward_noise(images, t, eps, state.schedule)
    z = state.model.encode(images)
    x0_hat = state.model.denoise(x_t, t, z)
    loss = F.mse_loss(x0_hat, images)
    _check_finite(loss, state, out_dir, images=images, t=t)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.global_step += 1
    return float(loss.detach())


def train_step_progression(
    state: TrainState,
    images: torch.Tensor,
    diagnosis_idx: torch.Tensor,
    roi: torch.Tensor,
    out_dir: str | None = None,
) -> tuple[float, float | None]:
    """One joint update in progression mode; returns (mse, ce).

    v_d is the subject's diagnosis; the gap bin is drawn uniformly per
    sample.  With lambda3 = 0 the consistency branch is skipped entirely
    and ce comes back as None.
    """
    if images.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    config = state.config
    batch = images.shape[0]
    gap_bins = torch.randint(1, NUM_GAP_BINS + 1, (batch,), generator=state.generator)
    onehot = torch.cat(
        [
            F.one_hot(diagnosis_idx, len(DIAGNOSES)).float(),
            F.one_hot(gap_bins - 1, NUM_GAP_BINS).float(),
        ],
        dim=1,
    )
    t, eps = _draw_noise_and_t(state, images)
    x_t = forward_noise(images, t, eps, state.schedule)
    z_b = state.model.encode(images)
    shift = state.model.shifter(onehot)
    z_f = apply_shift(z_b, shift)
    xf_hat = state.model.denoise(x_t, t, z_f)
    mse = F.mse_loss(xf_hat, images)
    ce = None
    loss = config.lambda2 * mse
    if config.lambda3 > 0:
        residual = (images - xf_hat) * roi
        logits_d, logits_a = state.model.regressor(images, xf_hat, residual)
        ce = attribute_ce_loss(logits_d, logits_a, diagnosis_idx, gap_bins - 1)
        loss = loss + config.lambda3 * ce
    _check_finite(loss, state, out_dir, images=images, t=t)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.global_step += 1
    return float(mse.detach()), None if ce is None else float(ce.detach())


def _prune_epoch_checkpoints(out_dir: str, keep: int = 2) -> None:
    snaps = sorted(
        f for f in os.listdir(out_dir)
        if f.startswith("model_epoch_") and f.endswith(".npz")
    )
    for name in snaps[:-keep] if keep else snaps:
        os.remove(os.path.join(out_dir, name))


def run_training(
    config: TrainConfig,
    dataset: Dataset,
    out_dir: str,
    *,
    resume_from: str | None = None,
    epoch_limit: int | None = None,
) -> TrainResult:
    """Run both phases, checkpointing each epoch and logging each step.

    epoch_limit caps the total epoch counter (useful for interrupting a run
    that is later resumed via resume_from).  Resuming refuses to continue
    under a different configuration.  Metrics land in metrics.csv with
    columns step, epoch, mse, ce, lr; ce is empty when the consistency
    branch did not run.
    """
    os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        state = load_train_state(resume_from)
        if state.config.to_dict() != config.to_dict():
            raise ValueError(
                "resume config mismatch: the checkpoint was written under a "
                "different training configuration"
            )
    else:
        state = make_train_state(config)
    arrays = build_training_arrays(dataset, config)
    n = len(arrays)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    mode = "a" if resume_from is not None and os.path.exists(metrics_path) else "w"
    target_epoch = config.total_epochs
    if epoch_limit is not None:
        target_epoch = min(target_epoch, epoch_limit)
    state_path = os.path.join(out_dir, "train_state.npz")
    latest_path = os.path.join(out_dir, "model_latest.npz")
    lr = config.learning_rate
    with open(metrics_path, mode, newline="") as metrics:
        if mode == "w":
            metrics.write("step,epoch,mse,ce,lr\n")
        while state.epoch < target_epoch:
            epoch = state.epoch
            autoencode = epoch < config.epochs_autoencode
            perm = torch.randperm(n, generator=state.generator)
            for start in range(0, n, config.batch_size):
                idx = perm[start : start + config.batch_size]
                images = arrays.images[idx]
                if autoencode:
                    mse = train_step_autoencode(state, images, out_dir)
                    ce_cell = ""
                else:
                    mse, ce = train_step_progression(
                        state,
                        images,
                        arrays.diagnosis_idx[idx],
                        arrays.roi[idx],
                        out_dir,
                    )
                    ce_cell = "" if ce is None else f"{ce:.6f}"
                metrics.write(
                    f"{state.global_step},{epoch},{mse:.6f},{ce_cell},{lr}\n"
                )
            metrics.flush()
            state.epoch = epoch + 1
            phase = "autoencode" if autoencode else "progression"
            extra = {"epoch": state.epoch, "phase": phase, "global_step": state.global_step}
            save_train_state(state_path, state)
            save_checkpoint(latest_path, state.model, extra=extra)
            save_checkpoint(
                os.path.join(out_dir, f"model_epoch_{state.epoch:03d}.npz"),
                state.model,
                extra=extra,
            )
            _prune_epoch_checkpoints(out_dir)
            if state.epoch == config.epochs_autoencode:
                save_checkpoint(
                    os.path.join(out_dir, "model_phase1.npz"), state.model, extra=extra
                )
            logger.info(
                "epoch %d/%d (%s) mse=%.5f", state.epoch, config.total_epochs, phase, mse
            )
    completed = state.epoch >= config.total_epochs
    final_path = latest_path
    if completed:
        final_path = os.path.join(out_dir, "model_final.npz")
        save_checkpoint(
            final_path,
            state.model,
            extra={"epoch": state.epoch, "phase": "final", "global_step": state.global_step},
        )
    return TrainResult(
        out_dir=out_dir,
        checkpoint_path=final_path,
        state_path=state_path,
        metrics_path=metrics_path,
        epochs_run=state.epoch,
        completed=completed,
    )


def _as_batch_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    elif t.ndim != 4:
        raise ValueError(f"expected (H,W), (N,H,W) or (N,1,H,W) images, got {tuple(t.shape)}")
    return t


def _sample_images(
    model: ProgressionModel,
    z: torch.Tensor,
    shape: tuple[int, ...],
    *,
    num_timesteps: int,
    sample_steps: int,
    beta_start: float,
    beta_end: float,
    seed: int,
) -> np.ndarray:
    schedule = make_linear_schedule(num_timesteps, beta_start, beta_end)
    steps = timestep_subsequence(num_timesteps, sample_steps)
    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(shape, generator=gen)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = ddim_sample(model.denoise, z, schedule, steps, noise)
    finally:
        model.train(was_training)
    return np.clip(out.numpy()[:, 0], 0.0, 1.0).astype(np.float32)


def reconstruct(
    model: ProgressionModel,
    image,
    *,
    num_timesteps: int = 1000,
    sample_steps: int = 50,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    seed: int = 0,
) -> np.ndarray:
    """Auto-encode an image: full sampling guided by its own latent."""
    x = _as_batch_tensor(image)
    with torch.no_grad():
        z = model.encode(x)
    out = _sample_images(
        model,
        z,
        tuple(x.shape),
        num_timesteps=num_timesteps,
        sample_steps=sample_steps,
        beta_start=beta_start,
        beta_end=beta_end,
        seed=seed,
    )
    return out[0] if np.asarray(image).ndim == 2 else out


def generate_followups(
    model: ProgressionModel,
    images,
    diagnoses: list[str],
    age_gaps: list[float],
    *,
    num_timesteps: int = 1000,
    sample_steps: int = 50,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    seed: int = 0,
) -> np.ndarray:
    """Generate follow-ups for a batch of baselines; deterministic per seed."""
    x = _as_batch_tensor(images)
    if not len(diagnoses) == len(age_gaps) == x.shape[0]:
        raise ValueError("diagnoses and age_gaps must match the number of images")
    attrs = [encode_attributes(d, g) for d, g in zip(diagnoses, age_gaps)]
    onehot = torch.from_numpy(np.stack([a.combined for a in attrs]))
    with torch.no_grad():
        z_b = model.encode(x)
        z_f = apply_shift(z_b, model.shifter(onehot))
    return _sample_images(
        model,
        z_f,
        tuple(x.shape),
        num_timesteps=num_timesteps,
        sample_steps=sample_steps,
        beta_start=beta_start,
        beta_end=beta_end,
        seed=seed,
    )


def infer_followup(
    model: ProgressionModel,
    image,
    diagnosis: str,
    age_gap: float,
    *,
    num_timesteps: int = 1000,
    sample_steps: int = 50,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    seed: int = 0,
) -> np.ndarray:
    """Generate one disease-progressed follow-up of a baseline image."""
    out = generate_followups(
        model,
        np.asarray(image)[None] if np.asarray(image).ndim == 2 else image,
        [diagnosis],
        [age_gap],
        num_timesteps=num_timesteps,
        sample_steps=sample_steps,
        beta_start=beta_start,
        beta_end=beta_end,
        seed=seed,
    )
    return out[0]


def load_model_for_inference(checkpoint_path: str) -> tuple[ProgressionModel, dict]:
    """Load a checkpoint and switch to eval mode."""
    model, extra = load_checkpoint(checkpoint_path)
    model.eval()
    return model, extra
