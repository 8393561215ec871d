"""Synthetic longitudinal brain phantom cohort.

Each subject is an ellipse-based 2-D head phantom: a skull ring, textured
tissue, paired lateral ventricles, hippocampi, and amygdalae.  Disease
progression over an age gap dt scales region areas analytically,

    ventricles:            area * (1 + g_d * dt)
    hippocampus/amygdala:  area * (1 - s_d * dt)

with per-diagnosis rates g_d, s_d.  The matching ground-truth displacement
field is radial per region: u(x) = (k - 1) * (x - c) * w(x) with k the axis
scale factor, so the Jacobian determinant of (id + u) equals k^2 exactly on
a plateau that covers the region mask, decaying to zero in a narrow shell.
The layout keeps every region's shell clear of every other region's mask so
per-region Jacobians stay analytic.

Identity is carried by a per-subject sinusoid mixture texture and a
cortical-fold phase, both constant across ages, so identity preservation is
measurable with image metrics.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "REGIONS",
    "DIAGNOSES",
    "ProgressionRates",
    "DEFAULT_RATES",
    "PhantomSubject",
    "LongitudinalSample",
    "make_subject",
    "render_phantom",
    "ellipse_mask",
    "segment_bands",
    "brain_mask",
    "region_windows",
    "CohortConfig",
    "VisitRecord",
    "SwapPair",
    "PhantomCohort",
    "generate_cohort",
]

REGIONS = ("ventricles", "hippocampus", "amygdala")
DIAGNOSES = ("CN", "MCI", "AD")

# intensity plateaus; region bands must stay separable after mild blurring
INTENSITY = {
    "background": 0.0,
    "tissue": 0.42,
    "skull": 0.62,
    "hippocampus": 0.76,
    "amygdala": 0.86,
    "ventricles": 1.0,
}

# half-open intensity bands used by the band segmenter
BAND_EDGES = {
    "hippocampus": (0.70, 0.81),
    "amygdala": (0.81, 0.92),
    "ventricles": (0.92, float("inf")),
}

_BASE_GRID = 64.0

# geometric layout on the 64x64 reference grid: center offsets from the head
# center, uniform ranges for semi-axes, and displacement plateau/shell depths
# in pixels.  Shells of one region must not reach another region's mask plus
# a 1 px finite-difference stencil; verified by the cohort layout test.
_LAYOUT = {
    "skull_row_semi": (26.0, 28.0),
    "skull_col_semi": (20.5, 22.5),
    "ring_px": 1.6,
    "center": (33.0, 32.0),
    "center_jitter": (0.8, 1.0),
    "ventricles": {
        "offset": (-8.5, 7.0),
        "row_semi": (4.9, 6.7),
        "col_semi": (2.6, 3.3),
        "plateau": 3.0,
        "shell": 4.0,
    },
    "hippocampus": {
        "offset": (10.5, 9.4),
        "row_semi": (2.3, 2.9),
        "col_semi": (2.8, 3.5),
        "plateau": 2.0,
        "shell": 3.0,
    },
    "amygdala": {
        "offset": (20.0, 5.2),
        "row_semi": (1.7, 2.15),
        "col_semi": (1.7, 2.2),
        "plateau": 2.0,
        "shell": 3.0,
    },
}

# baseline-area multipliers tying diagnosis to morphology (atrophy visible at
# baseline), drawn as factor + U(-0.06, 0.06) so the distributions overlap
_DIAG_AREA_FACTOR = {
    "ventricles": {"CN": 0.92, "MCI": 1.00, "AD": 1.10},
    "hippocampus": {"CN": 1.05, "MCI": 1.00, "AD": 0.90},
    "amygdala": {"CN": 1.05, "MCI": 1.00, "AD": 0.90},
}

_TEXTURE_FREQS = ((2.0, 5.0), (4.5, 1.5), (3.0, 3.5), (5.5, 4.0))
_TEXTURE_CLIP = 0.12
_FOLD_AMP = 0.05
_FOLD_CYCLES = 9


@dataclass(frozen=True)
class ProgressionRates:
    """Per-diagnosis annual area-change rates.

    growth applies to ventricles (area * (1 + g * dt)), shrink to
    hippocampus and amygdala (area * (1 - s * dt)).  Rates must be
    non-negative and strictly ordered CN < MCI < AD.
    """

    growth: dict[str, float] = field(
        default_factory=lambda: {"CN": 0.005, "MCI": 0.02, "AD": 0.05}
    )
    shrink: dict[str, float] = field(
        default_factory=lambda: {"CN": 0.002, "MCI": 0.01, "AD": 0.02}
    )

    def __post_init__(self) -> None:
        for name, rates in (("growth", self.growth), ("shrink", self.shrink)):
            missing = [d for d in DIAGNOSES if d not in rates]
            if missing:
                raise ValueError(f"{name} rates missing diagnoses {missing}")
            if any(rates[d] < 0 for d in DIAGNOSES):
                raise ValueError(f"{name} rates must be non-negative")
            if not rates["CN"] < rates["MCI"] < rates["AD"]:
                raise ValueError(f"{name} rates must be ordered CN < MCI < AD")


DEFAULT_RATES = ProgressionRates()


@dataclass(frozen=True)
class PhantomSubject:
    """Deterministic shape/texture parameters of one phantom subject."""

    subject_id: str
    identity_seed: int
    diagnosis: str
    baseline_age: float
    center: tuple[float, float]
    skull_axes: tuple[float, float]
    region_axes: dict[str, tuple[float, float]]
    texture_amps: tuple[float, ...]
    texture_freq_jitter: tuple[float, ...]
    texture_phases: tuple[float, ...]
    fold_phase: float

    def __post_init__(self) -> None:
        if self.diagnosis not in DIAGNOSES:
            raise ValueError(f"unknown diagnosis {self.diagnosis!r}")


@dataclass(frozen=True)
class LongitudinalSample:
    """One rendered visit: image, region masks, and ground-truth motion."""

    subject_id: str
    diagnosis: str
    age: float
    age_gap: float
    image: np.ndarray
    masks: dict[str, np.ndarray]
    displacement: np.ndarray


def _stable_hash(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_subject(
    subject_id: str,
    diagnosis: str,
    baseline_age: float,
    seed: int,
) -> PhantomSubject:
    """Draw a subject's shape and texture parameters deterministically.

    The same (subject_id, seed) pair always regenerates identical
    parameters regardless of draw order elsewhere.
    """
    if diagnosis not in DIAGNOSES:
        raise ValueError(f"unknown diagnosis {diagnosis!r}")
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(int(seed) & 0xFFFFFFFF, _stable_hash(subject_id)))
    )
    jr, jc = _LAYOUT["center_jitter"]
    center = (
        _LAYOUT["center"][0] + rng.uniform(-jr, jr),
        _LAYOUT["center"][1] + rng.uniform(-jc, jc),
    )
    skull_axes = (
        rng.uniform(*_LAYOUT["skull_row_semi"]),
        rng.uniform(*_LAYOUT["skull_col_semi"]),
    )
    region_axes: dict[str, tuple[float, float]] = {}
    for region in REGIONS:
        spec = _LAYOUT[region]
        base = (rng.uniform(*spec["row_semi"]), rng.uniform(*spec["col_semi"]))
        area_factor = _DIAG_AREA_FACTOR[region][diagnosis] + rng.uniform(-0.06, 0.06)
        axis_factor = math.sqrt(area_factor)
        region_axes[region] = (base[0] * axis_factor, base[1] * axis_factor)
    amps = tuple(rng.uniform(0.02, 0.045) for _ in _TEXTURE_FREQS)
    jitters = tuple(rng.uniform(0.85, 1.15) for _ in _TEXTURE_FREQS)
    phases = tuple(rng.uniform(0.0, 2.0 * math.pi) for _ in _TEXTURE_FREQS)
    fold_phase = float(rng.uniform(0.0, 2.0 * math.pi))
    return PhantomSubject(
        subject_id=subject_id,
        identity_seed=int(seed),
        diagnosis=diagnosis,
        baseline_age=float(baseline_age),
        center=center,
        skull_axes=skull_axes,
        region_axes=region_axes,
        texture_amps=amps,
        texture_freq_jitter=jitters,
        texture_phases=phases,
        fold_phase=fold_phase,
    )


def ellipse_mask(
    shape: tuple[int, int],
    center: tuple[float, float],
    axes: tuple[float, float],
) -> np.ndarray:
    """Rasterize an ellipse so the pixel count equals round(pi*a*b).

    Pixels are ranked by elliptical radius and the closest round(pi*a*b)
    are taken, which pins the count to the analytic area within 0.5 px and
    makes counts monotone under axis scaling.  Ties break by row-major
    order, so the result is deterministic.
    """
    if axes[0] <= 0 or axes[1] <= 0:
        raise ValueError(f"ellipse axes must be positive, got {axes}")
    target = int(round(math.pi * axes[0] * axes[1]))
    mask = np.zeros(shape, dtype=bool)
    if target <= 0:
        return mask
    if target >= mask.size:
        raise ValueError("ellipse area exceeds image size")
    rows = np.arange(shape[0], dtype=np.float64)[:, None]
    cols = np.arange(shape[1], dtype=np.float64)[None, :]
    rho2 = ((rows - center[0]) / axes[0]) ** 2 + ((cols - center[1]) / axes[1]) ** 2
    order = np.argsort(rho2.ravel(), kind="stable")[:target]
    mask.ravel()[order] = True
    return mask


def _region_scale(region: str, diagnosis: str, age_gap: float, rates: ProgressionRates) -> float:
    if region == "ventricles":
        return math.sqrt(1.0 + rates.growth[diagnosis] * age_gap)
    area = 1.0 - rates.shrink[diagnosis] * age_gap
    if area <= 0.05:
        raise ValueError(
            f"shrink rate collapses {region} (area factor {area:.3f}) at gap {age_gap}"
        )
    return math.sqrt(area)


def _region_instances(
    subject: PhantomSubject, scale: float
) -> list[tuple[str, tuple[float, float], tuple[float, float]]]:
    """Mirrored (region, center, base axes) instances in pixel units."""
    out = []
    cr, cc = subject.center[0] * scale, subject.center[1] * scale
    for region in REGIONS:
        dr, dc = _LAYOUT[region]["offset"]
        a, b = subject.region_axes[region]
        for side in (-1.0, 1.0):
            out.append(
                (
                    region,
                    (cr + dr * scale, cc + side * dc * scale),
                    (a * scale, b * scale),
                )
            )
    return out


def render_phantom(
    subject: PhantomSubject,
    age: float,
    *,
    rates: ProgressionRates | None = None,
    image_size: int = 64,
) -> LongitudinalSample:
    """Render one visit of a subject at the given age.

    Returns the image in [0, 1], per-region boolean masks (left and right
    parts merged), and the analytic displacement field u with
    moving(x + u(x)) ~ fixed(x) mapping the baseline onto this visit;
    u is zero when age equals the baseline age.
    """
    if rates is None:
        rates = DEFAULT_RATES
    gap = float(age) - subject.baseline_age
    if gap < -1e-9:
        raise ValueError(
            f"age {age} precedes baseline age {subject.baseline_age} "
            f"for subject {subject.subject_id}"
        )
    gap = max(gap, 0.0)
    scale = image_size / _BASE_GRID
    shape = (image_size, image_size)
    rows = np.arange(image_size, dtype=np.float64)[:, None]
    cols = np.arange(image_size, dtype=np.float64)[None, :]

    cr, cc = subject.center[0] * scale, subject.center[1] * scale
    skull_a = subject.skull_axes[0] * scale
    skull_b = subject.skull_axes[1] * scale
    ring = _LAYOUT["ring_px"] * scale
    rho_outer = ((rows - cr) / skull_a) ** 2 + ((cols - cc) / skull_b) ** 2
    inner_a, inner_b = skull_a - ring, skull_b - ring
    rho_inner = ((rows - cr) / inner_a) ** 2 + ((cols - cc) / inner_b) ** 2

    texture = np.zeros(shape, dtype=np.float64)
    for amp, jit, phase, (fr, fc) in zip(
        subject.texture_amps,
        subject.texture_freq_jitter,
        subject.texture_phases,
        _TEXTURE_FREQS,
    ):
        arg = 2.0 * math.pi * jit * (fr * rows / image_size + fc * cols / image_size)
        texture += amp * np.sin(arg + phase)
    texture = np.clip(texture, -_TEXTURE_CLIP, _TEXTURE_CLIP)

    yn = (rows - cr) / inner_a
    xn = (cols - cc) / inner_b
    theta = np.arctan2(yn, xn)
    rho_n = np.sqrt(rho_inner)
    ramp = np.clip((rho_n - 0.78) / (1.0 - 0.78), 0.0, 1.0)
    fold = _FOLD_AMP * np.sin(_FOLD_CYCLES * theta + subject.fold_phase) * ramp

    image = np.zeros(shape, dtype=np.float64)
    inside = rho_inner <= 1.0
    image[inside] = INTENSITY["tissue"] + texture[inside] + fold[inside]
    image[(rho_outer <= 1.0) & ~inside] = INTENSITY["skull"]

    masks = {region: np.zeros(shape, dtype=bool) for region in REGIONS}
    displacement = np.zeros(shape + (2,), dtype=np.float64)
    for region, center, base_axes in _region_instances(subject, scale):
        k = _region_scale(region, subject.diagnosis, gap, rates)
        aged_axes = (base_axes[0] * k, base_axes[1] * k)
        part = ellipse_mask(shape, center, aged_axes)
        masks[region] |= part
        image[part] = INTENSITY[region]
        if gap > 0.0:
            dr = rows - center[0]
            dc = cols - center[1]
            rho = np.sqrt((dr / base_axes[0]) ** 2 + (dc / base_axes[1]) ** 2)
            dist = np.hypot(dr, dc)
            with np.errstate(invalid="ignore", divide="ignore"):
                cos_t = np.where(dist > 0, dc / np.maximum(dist, 1e-12), 1.0)
                sin_t = np.where(dist > 0, dr / np.maximum(dist, 1e-12), 0.0)
                r_dir = 1.0 / np.sqrt(
                    (sin_t / base_axes[0]) ** 2 + (cos_t / base_axes[1]) ** 2
                )
            plateau = _LAYOUT[region]["plateau"] * scale
            shell = _LAYOUT[region]["shell"] * scale
            d_px = (rho - 1.0) * r_dir
            w = np.clip((shell - d_px) / (shell - plateau), 0.0, 1.0)
            displacement[..., 0] += (k - 1.0) * dr * w
            displacement[..., 1] += (k - 1.0) * dc * w

    return LongitudinalSample(
        subject_id=subject.subject_id,
        diagnosis=subject.diagnosis,
        age=float(age),
        age_gap=gap,
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        masks=masks,
        displacement=displacement.astype(np.float32),
    )


def brain_mask(image: np.ndarray, threshold: float = 0.05) -> np.ndarray:
    """Pixels belonging to the head (tissue, skull, or any region)."""
    return np.asarray(image) > threshold


def segment_bands(
    image: np.ndarray,
    windows: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Segment regions by intensity band, optionally within spatial windows.

    Generated images blur region boundaries, sweeping edge pixels through
    intermediate bands; restricting each band to a window (typically the
    dilated ground-truth baseline mask) keeps halo pixels of bright regions
    from polluting darker bands elsewhere in the image.
    """
    image = np.asarray(image)
    out: dict[str, np.ndarray] = {}
    for region, (lo, hi) in BAND_EDGES.items():
        band = (image >= lo) & (image < hi)
        if windows is not None:
            if region not in windows:
                raise ValueError(f"windows missing region {region!r}")
            band &= windows[region].astype(bool)
        out[region] = band
    return out


def region_windows(
    masks: dict[str, np.ndarray], dilation_px: int = 3
) -> dict[str, np.ndarray]:
    """Dilate ground-truth masks into search windows for the band segmenter."""
    if dilation_px < 0:
        raise ValueError("dilation_px must be non-negative")
    return {
        region: ndimage.binary_dilation(mask, iterations=dilation_px)
        if dilation_px > 0
        else np.asarray(mask, dtype=bool)
        for region, mask in masks.items()
    }


@dataclass(frozen=True)
class CohortConfig:
    """Cohort composition and visit schedule parameters."""

    train_counts: tuple[int, int, int] = (24, 24, 24)
    test_counts: tuple[int, int, int] = (16, 12, 16)
    age_range: tuple[float, float] = (60.0, 88.0)
    gap_mean: float = 2.93
    gap_std: float = 1.35
    gap_range: tuple[float, float] = (0.5, 5.0)
    followups_per_subject: int = 1
    min_swap_pairs: int = 5
    swap_age_tolerance: float = 0.5
    swap_ad_gap_min: float = 2.0
    swap_cn_gap_max: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if any(c <= 0 for c in self.train_counts + self.test_counts):
            raise ValueError("subject counts must be positive")
        if self.age_range[0] >= self.age_range[1]:
            raise ValueError("age_range must be increasing")
        if self.followups_per_subject < 1:
            raise ValueError("followups_per_subject must be >= 1")
        if not 0.5 <= self.gap_range[0] <= self.gap_range[1] <= 5.0:
            raise ValueError("gap_range must lie within [0.5, 5.0]")


@dataclass(frozen=True)
class VisitRecord:
    subject_id: str
    split: str
    diagnosis: str
    age: float
    age_gap: float


@dataclass(frozen=True)
class SwapPair:
    pair_id: str
    ad_subject: str
    ad_age: float
    ad_gap: float
    cn_subject: str
    cn_age: float
    cn_gap: float


@dataclass(frozen=True)
class PhantomCohort:
    config: CohortConfig
    subjects: dict[str, PhantomSubject]
    visits: list[VisitRecord]
    swap_pairs: list[SwapPair]

    def split_of(self, subject_id: str) -> str:
        for visit in self.visits:
            if visit.subject_id == subject_id:
                return visit.split
        raise KeyError(subject_id)


def _draw_gap(rng: np.random.Generator, config: CohortConfig) -> float:
    lo, hi = config.gap_range
    gap = float(np.clip(rng.normal(config.gap_mean, config.gap_std), lo, hi))
    return float(np.clip(round(gap / 0.5) * 0.5, lo, hi))


def _draw_gap_below(rng: np.random.Generator, config: CohortConfig, cap: float) -> float:
    for _ in range(1000):
        gap = _draw_gap(rng, config)
        if gap < cap:
            return gap
    raise ValueError(f"gap distribution cannot produce values below {cap}")


def _draw_gap_at_least(rng: np.random.Generator, config: CohortConfig, floor: float) -> float:
    for _ in range(1000):
        gap = _draw_gap(rng, config)
        if gap >= floor:
            return gap
    raise ValueError(f"gap distribution cannot produce values >= {floor}")


def generate_cohort(config: CohortConfig | None = None) -> PhantomCohort:
    """Draw subjects, visit schedules, and latent-swap pairs.

    Swap pairs follow the selection rule: an AD subject whose follow-up gap
    is >= swap_ad_gap_min paired with a CN subject whose gap is below
    swap_cn_gap_max, baseline ages within swap_age_tolerance years.  Small
    test pools make that rule hard to satisfy by independent draws, so the
    test split is designed for it the way a real paired study would recruit:
    test CN/AD gap draws are stratified (70% of CN short, 70% of AD long)
    and 75% of test CN baseline ages are anchored within 0.5y of a test AD
    subject's age.  The train split uses plain independent draws.  Raises if
    fewer than min_swap_pairs can be matched.
    """
    if config is None:
        config = CohortConfig()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 0xC0407)))
    subjects: dict[str, PhantomSubject] = {}
    visits: list[VisitRecord] = []
    age_lo, age_hi = config.age_range
    n_grid = int(round((age_hi - age_lo) / 0.5))
    test_ad_ages: list[float] = []

    def draw_subject(split: str, diagnosis: str, index: int) -> PhantomSubject:
        sid = f"{split[:2]}-{diagnosis}-{index:03d}"
        if split == "test" and diagnosis == "CN" and test_ad_ages and rng.uniform() < 0.75:
            anchor = float(rng.choice(test_ad_ages))
            age = anchor + 0.5 * int(rng.integers(-1, 2))
            age = min(max(age, age_lo), age_hi)
        else:
            age = age_lo + 0.5 * int(rng.integers(0, n_grid + 1))
        if split == "test" and diagnosis == "AD":
            test_ad_ages.append(age)
        subject = make_subject(sid, diagnosis, age, seed=config.seed)
        subjects[sid] = subject
        return subject

    for split, counts in (("train", config.train_counts), ("test", config.test_counts)):
        # AD drawn before CN in the test split so CN ages can anchor to them
        order = DIAGNOSES if split == "train" else ("AD", "MCI", "CN")
        count_of = dict(zip(DIAGNOSES, counts))
        for diagnosis in order:
            for i in range(count_of[diagnosis]):
                subject = draw_subject(split, diagnosis, i)
                visits.append(
                    VisitRecord(subject.subject_id, split, diagnosis, subject.baseline_age, 0.0)
                )
                for _ in range(config.followups_per_subject):
                    if split == "test" and diagnosis == "CN" and rng.uniform() < 0.7:
                        gap = _draw_gap_below(rng, config, config.swap_cn_gap_max)
                    elif split == "test" and diagnosis == "AD" and rng.uniform() < 0.7:
                        gap = _draw_gap_at_least(rng, config, config.swap_ad_gap_min)
                    else:
                        gap = _draw_gap(rng, config)
                    visits.append(
                        VisitRecord(
                            subject.subject_id,
                            split,
                            diagnosis,
                            subject.baseline_age + gap,
                            gap,
                        )
                    )

    swap_pairs = _match_swap_pairs(subjects, visits, config)
    if len(swap_pairs) < config.min_swap_pairs:
        raise ValueError(
            f"only {len(swap_pairs)} swap pairs match the rule "
            f"(AD gap >= {config.swap_ad_gap_min}, CN gap < {config.swap_cn_gap_max}, "
            f"ages within {config.swap_age_tolerance}y); need {config.min_swap_pairs}. "
            "Increase test counts or relax the pairing rule."
        )
    return PhantomCohort(
        config=config, subjects=subjects, visits=visits, swap_pairs=swap_pairs
    )


def _match_swap_pairs(
    subjects: dict[str, PhantomSubject],
    visits: list[VisitRecord],
    config: CohortConfig,
) -> list[SwapPair]:
    def followup_gaps(sid: str) -> list[float]:
        return [v.age_gap for v in visits if v.subject_id == sid and v.age_gap > 0]

    ad_pool = []
    cn_pool = []
    for sid, subject in subjects.items():
        split = next(v.split for v in visits if v.subject_id == sid)
        if split != "test":
            continue
        gaps = followup_gaps(sid)
        if not gaps:
            continue
        if subject.diagnosis == "AD" and max(gaps) >= config.swap_ad_gap_min:
            ad_pool.append((sid, subject.baseline_age, max(gaps)))
        elif subject.diagnosis == "CN" and min(gaps) < config.swap_cn_gap_max:
            cn_pool.append((sid, subject.baseline_age, min(gaps)))

    # two-pointer matching over age-sorted pools maximizes the number of
    # pairs under the |age difference| <= tolerance constraint
    ad_pool.sort(key=lambda item: (item[1], item[0]))
    cn_pool.sort(key=lambda item: (item[1], item[0]))
    tol = config.swap_age_tolerance + 1e-9
    pairs: list[SwapPair] = []
    i = j = 0
    while i < len(ad_pool) and j < len(cn_pool):
        ad_id, ad_age, ad_gap = ad_pool[i]
        cn_id, cn_age, cn_gap = cn_pool[j]
        if abs(cn_age - ad_age) <= tol:
            pairs.append(
                SwapPair(
                    pair_id=f"pair-{len(pairs):02d}",
                    ad_subject=ad_id,
                    ad_age=ad_age,
                    ad_gap=ad_gap,
                    cn_subject=cn_id,
                    cn_age=cn_age,
                    cn_gap=cn_gap,
                )
            )
            i += 1
            j += 1
        elif cn_age < ad_age - tol:
            j += 1
        else:
            i += 1
    return pairs
