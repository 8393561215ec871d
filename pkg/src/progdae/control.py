"""Attribute encoding, latent shift estimation, and the consistency head.

Progression attributes are two concatenated one-hot vectors: diagnosis over
(CN, MCI, AD) and the baseline-to-target age gap over ten half-year bins
covering (0, 5] years.  The shift estimator maps attributes to a shift in
the first m latent coordinates; applying it leaves the remaining identity
coordinates bit-identical.  The consistency regressor reads the baseline,
the generated follow-up, and their ROI-masked residual, and predicts both
attribute one-hots; its cross-entropy pushes generated changes to actually
encode the requested diagnosis and gap.

The shift estimator factorizes as shift = gain(gap bin) * direction(diagnosis):
gap bins are ordered categories, so they enter as a positive scalar gain
(initialized proportional to the bin index) scaling a learned per-diagnosis
direction.  This keeps the response to larger gaps ordered along one ray per
diagnosis instead of leaving ten unrelated bin embeddings to the optimizer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

__all__ = [
    "DIAGNOSES",
    "NUM_GAP_BINS",
    "GAP_BIN_YEARS",
    "MAX_GAP_YEARS",
    "AttributeVector",
    "encode_attributes",
    "attributes_to_tensors",
    "ShiftEstimator",
    "apply_shift",
    "ResidualMask",
    "residual_roi_mask",
    "AttributeRegressor",
    "attribute_ce_loss",
]

logger = logging.getLogger(__name__)

DIAGNOSES = ("CN", "MCI", "AD")
NUM_GAP_BINS = 10
GAP_BIN_YEARS = 0.5
MAX_GAP_YEARS = NUM_GAP_BINS * GAP_BIN_YEARS


@dataclass(frozen=True)
class AttributeVector:
    """One-hot progression attributes: diagnosis and age-gap bin."""

    diagnosis_index: int
    gap_bin: int  # 1-based, bin b covers ((b-1)*0.5, b*0.5] years

    def __post_init__(self) -> None:
        if not 0 <= self.diagnosis_index < len(DIAGNOSES):
            raise ValueError(f"diagnosis_index out of range: {self.diagnosis_index}")
        if not 1 <= self.gap_bin <= NUM_GAP_BINS:
            raise ValueError(f"gap_bin must lie in [1, {NUM_GAP_BINS}], got {self.gap_bin}")

    @property
    def diagnosis(self) -> str:
        return DIAGNOSES[self.diagnosis_index]

    @property
    def v_diagnosis(self) -> np.ndarray:
        v = np.zeros(len(DIAGNOSES), dtype=np.float32)
        v[self.diagnosis_index] = 1.0
        return v

    @property
    def v_gap(self) -> np.ndarray:
        v = np.zeros(NUM_GAP_BINS, dtype=np.float32)
        v[self.gap_bin - 1] = 1.0
        return v

    @property
    def combined(self) -> np.ndarray:
        return np.concatenate([self.v_diagnosis, self.v_gap])


def encode_attributes(diagnosis: str, age_gap: float) -> AttributeVector:
    """Encode a diagnosis label and an age gap in years.

    The gap must lie in (0, 5]; bin b covers ((b-1)*0.5, b*0.5], so e.g.
    2.0 years falls in bin 4 and 2.1 years in bin 5.
    """
    if diagnosis not in DIAGNOSES:
        raise ValueError(f"unknown diagnosis {diagnosis!r}, expected one of {DIAGNOSES}")
    if not age_gap > 0:
        raise ValueError(f"age gap must be positive, got {age_gap}")
    if age_gap > MAX_GAP_YEARS + 1e-9:
        raise ValueError(
            f"age gap {age_gap} exceeds the encodable maximum {MAX_GAP_YEARS}"
        )
    # tolerate float slop at bin edges (2.0000000001 stays in bin 4)
    gap_bin = math.ceil((age_gap - 1e-9) / GAP_BIN_YEARS)
    gap_bin = min(max(gap_bin, 1), NUM_GAP_BINS)
    return AttributeVector(DIAGNOSES.index(diagnosis), gap_bin)


def attributes_to_tensors(
    attrs: list[AttributeVector],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack attributes into (one-hot (B, 13), diagnosis idx, gap-bin idx)."""
    onehot = torch.from_numpy(np.stack([a.combined for a in attrs]))
    diag_idx = torch.tensor([a.diagnosis_index for a in attrs], dtype=torch.long)
    gap_idx = torch.tensor([a.gap_bin - 1 for a in attrs], dtype=torch.long)
    return onehot, diag_idx, gap_idx


class ShiftEstimator(nn.Module):
    """Attributes (B, 13) -> progression-subspace shift (B, m).

    gain: softplus of a linear read-out of the gap one-hot, initialized so
    bin b starts at gain b/10 (monotone in the gap).  direction: a small
    MLP on the diagnosis one-hot with a zero-initialized final layer, so
    training starts from exactly zero shift (pure auto-encoding).
    """

    def __init__(self, shift_dim: int, hidden: int = 32):
        super().__init__()
        if shift_dim < 1:
            raise ValueError("shift_dim must be >= 1")
        self.shift_dim = shift_dim
        self.gain = nn.Linear(NUM_GAP_BINS, 1, bias=False)
        with torch.no_grad():
            init = [math.log(math.expm1((b + 1) / NUM_GAP_BINS)) for b in range(NUM_GAP_BINS)]
            self.gain.weight.copy_(torch.tensor([init], dtype=torch.float32))
        self.direction = nn.Sequential(
            nn.Linear(len(DIAGNOSES), hidden),
            nn.SiLU(),
            nn.Linear(hidden, shift_dim),
        )
        nn.init.zeros_(self.direction[-1].weight)
        nn.init.zeros_(self.direction[-1].bias)

    def forward(self, attrs: torch.Tensor) -> torch.Tensor:
        if attrs.ndim != 2 or attrs.shape[1] != len(DIAGNOSES) + NUM_GAP_BINS:
            raise ValueError(
                f"expected (B, {len(DIAGNOSES) + NUM_GAP_BINS}) attributes, "
                f"got {tuple(attrs.shape)}"
            )
        v_d = attrs[:, : len(DIAGNOSES)]
        v_a = attrs[:, len(DIAGNOSES):]
        gain = F.softplus(self.gain(v_a))
        return gain * self.direction(v_d)


def apply_shift(z: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """Add a shift to the first m latent coordinates.

    Coordinates m..d pass through bit-identically; the operation is a
    concatenation, so it stays differentiable with respect to both inputs.
    """
    if z.ndim != 2 or shift.ndim != 2:
        raise ValueError("latents and shifts must be 2-D (batch, dim)")
    m = shift.shape[1]
    if m >= z.shape[1]:
        raise ValueError(
            f"shift dim {m} must be smaller than latent dim {z.shape[1]}"
        )
    if shift.shape[0] != z.shape[0]:
        raise ValueError("batch sizes differ between latents and shifts")
    return torch.cat([z[:, :m] + shift, z[:, m:]], dim=1)


@dataclass(frozen=True)
class ResidualMask:
    """Filled bounding box over the union of region masks."""

    mask: np.ndarray
    bbox: tuple[int, int, int, int] | None  # (row0, row1, col0, col1), inclusive

    @property
    def empty(self) -> bool:
        return self.bbox is None


def residual_roi_mask(
    masks_baseline: dict[str, np.ndarray] | np.ndarray,
    masks_followup: dict[str, np.ndarray] | np.ndarray,
) -> ResidualMask:
    """Bounding-box ROI over the union of baseline and follow-up region masks.

    Accepts either a dict of per-region boolean masks or a stacked boolean
    array.  Both unions empty yields an all-zero mask and a warning instead
    of an error, since an empty ROI only weakens the consistency signal.
    """

    def as_union(masks) -> np.ndarray:
        if isinstance(masks, dict):
            arrays = list(masks.values())
            if not arrays:
                raise ValueError("mask dict is empty")
            union = np.zeros(np.asarray(arrays[0]).shape, dtype=bool)
            for arr in arrays:
                union |= np.asarray(arr).astype(bool)
            return union
        arr = np.asarray(masks).astype(bool)
        return arr.any(axis=0) if arr.ndim == 3 else arr

    union_b = as_union(masks_baseline)
    union_f = as_union(masks_followup)
    if union_b.shape != union_f.shape:
        raise ValueError(
            f"mask shapes differ between visits: {union_b.shape} vs {union_f.shape}"
        )
    union = union_b | union_f
    if union.ndim != 2:
        raise ValueError(f"expected 2-D masks, got shape {union.shape}")
    if not union.any():
        logger.warning("residual ROI is empty: no region pixels in either visit")
        return ResidualMask(mask=np.zeros(union.shape, dtype=np.float32), bbox=None)
    rows = np.flatnonzero(union.any(axis=1))
    cols = np.flatnonzero(union.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    mask = np.zeros(union.shape, dtype=np.float32)
    mask[r0 : r1 + 1, c0 : c1 + 1] = 1.0
    return ResidualMask(mask=mask, bbox=(r0, r1, c0, c1))


class AttributeRegressor(nn.Module):
    """(baseline, generated follow-up, masked residual) -> attribute logits.

    The three images enter as channels of one convolutional trunk; two
    linear heads emit diagnosis logits (3) and gap-bin logits (10).
    """

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64), groups: int = 8):
        super().__init__()
        layers: list[nn.Module] = []
        prev = 3
        for i, c in enumerate(channels):
            layers.append(nn.Conv2d(prev, c, 3, stride=1 if i == 0 else 2, padding=1))
            layers.append(nn.GroupNorm(min(groups, c), c))
            layers.append(nn.SiLU())
            prev = c
        self.trunk = nn.Sequential(*layers)
        self.head_diagnosis = nn.Linear(prev, len(DIAGNOSES))
        self.head_gap = nn.Linear(prev, NUM_GAP_BINS)

    def forward(
        self,
        x_baseline: torch.Tensor,
        x_followup: torch.Tensor,
        residual: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        for name, t in (
            ("baseline", x_baseline),
            ("followup", x_followup),
            ("residual", residual),
        ):
            if t.shape != x_baseline.shape:
                raise ValueError(f"{name} shape {tuple(t.shape)} differs from baseline")
        h = self.trunk(torch.cat([x_baseline, x_followup, residual], dim=1))
        h = h.mean(dim=(2, 3))
        return self.head_diagnosis(h), self.head_gap(h)


def attribute_ce_loss(
    logits_diagnosis: torch.Tensor,
    logits_gap: torch.Tensor,
    diagnosis_idx: torch.Tensor,
    gap_idx: torch.Tensor,
) -> torch.Tensor:
    """Summed cross-entropy of both heads, averaged over the batch.

    Logits are converted to probabilities per head by softmax; probabilities
    are floored at 1e-12 before the log, so an exactly one-hot prediction of
    the correct class yields exactly zero loss.
    """
    loss = torch.zeros((), dtype=logits_diagnosis.dtype)
    for logits, target in ((logits_diagnosis, diagnosis_idx), (logits_gap, gap_idx)):
        if logits.shape[0] != target.shape[0]:
            raise ValueError("logits and targets disagree on batch size")
        probs = F.softmax(logits, dim=1).clamp_min(1e-12)
        picked = probs[torch.arange(logits.shape[0]), target]
        loss = loss - torch.log(picked).mean()
    return loss
