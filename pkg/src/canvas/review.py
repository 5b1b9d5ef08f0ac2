"""Human-review records, either-rater aggregation, oracle raters and the reward model.

Reward targets are the fraction of raters that flagged an image, and the
scorer is trained against that fraction directly with cross-entropy instead
of treating each rater's verdict as a separate example.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from canvas.errors import InvalidArgument
from canvas.rng import stream

log = logging.getLogger(__name__)


class Answer(str, enum.Enum):
    DEFECT = "DEFECT"
    NO_DEFECT = "NO_DEFECT"


class ReviewTask(str, enum.Enum):
    BACKGROUND = "background"
    ASPECT = "aspect"


QUESTIONS = {
    ReviewTask.BACKGROUND: ("Q_product", "Q_background"),
    ReviewTask.ASPECT: ("Q_human_eligibility", "Q_solid_background_eligibility", "Q_band_defect"),
}

RAW_TEMPLATE_TEXT = {
    "Q_product": "Does the main product show any defect compared with the original image?",
    "Q_background": "Does the rest of the image show any defect?",
    "Q_human_eligibility": "Are any humans or human body parts present in the original image?",
    "Q_solid_background_eligibility": "Does the original image have a white or solid-color background?",
    "Q_band_defect": "Do the generated top and bottom bands show visible artifacts or quality issues?",
}


@dataclass(frozen=True)
class RaterRecord:
    image_id: str
    rater_id: str
    task: ReviewTask
    answers: dict[str, Answer]

    def __post_init__(self):
        object.__setattr__(self, "task", ReviewTask(self.task))
        answers = {q: Answer(a) for q, a in self.answers.items()}
        if set(answers) != set(QUESTIONS[self.task]):
            raise InvalidArgument(
                f"answers {sorted(answers)} do not match the {self.task.value} template {QUESTIONS[self.task]}")
        object.__setattr__(self, "answers", answers)

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "rater_id": self.rater_id, "task": self.task.value,
                "answers": {q: a.value for q, a in self.answers.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "RaterRecord":
        return cls(d["image_id"], d["rater_id"], d["task"], d["answers"])


@dataclass(frozen=True)
class ReviewOutcome:
    image_id: str
    task: ReviewTask
    flags: dict[str, bool]
    overall_defective: bool


def aggregate_review(records: Sequence[RaterRecord], n_raters: int = 2) -> ReviewOutcome:
    """A question is flagged if any rater flags it; the image if any question is."""
    if len(records) != n_raters:
        raise InvalidArgument(f"expected exactly {n_raters} rater records, got {len(records)}")
    first = records[0]
    for r in records[1:]:
        if r.image_id != first.image_id:
            raise InvalidArgument("records refer to different images")
        if r.task != first.task or set(r.answers) != set(first.answers):
            raise InvalidArgument("records use different review templates")
    flags = {q: any(r.answers[q] is Answer.DEFECT for r in records) for q in QUESTIONS[first.task]}
    return ReviewOutcome(first.image_id, first.task, flags, any(flags.values()))


def group_records(records: Iterable[RaterRecord]) -> dict[str, list[RaterRecord]]:
    out: dict[str, list[RaterRecord]] = {}
    for r in records:
        out.setdefault(r.image_id, []).append(r)
    return out


@dataclass
class RatesReport:
    n: int
    per_question: dict[str, float]
    overall: float

    def to_json(self) -> dict:
        return {"n": self.n, "per_question": self.per_question, "overall": self.overall}


def check_rate_consistency(per_question: dict[str, float], overall: float, tol: float = 1e-9) -> None:
    """Overall no-defect can never exceed any single question's no-defect rate."""
    lo = min(per_question.values())
    if overall > lo + tol:
        raise InvalidArgument(f"overall no-defect rate {overall} exceeds min per-question rate {lo}")


def no_defect_rates(outcomes: Sequence[ReviewOutcome]) -> RatesReport:
    if not outcomes:
        raise InvalidArgument("no outcomes to summarise")
    questions = list(outcomes[0].flags)
    n = len(outcomes)
    per_q = {q: sum(not o.flags[q] for o in outcomes) / n for q in questions}
    overall = sum(not o.overall_defective for o in outcomes) / n
    check_rate_consistency(per_q, overall)
    return RatesReport(n, per_q, overall)


def read_records(path: str | Path) -> list[RaterRecord]:
    with open(path) as f:
        return [RaterRecord.from_json(json.loads(line)) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# Paired features
# ---------------------------------------------------------------------------

FEATURE_NAMES = (
    "known_mae", "boundary_energy", "bg_saturation_mean", "bg_saturation_std",
    "bg_luminance_std", "bg_luminance_mean", "bg_change", "known_fraction", "log_pixels",
)
N_FEATURES = len(FEATURE_NAMES)


def boundary_energy(image: np.ndarray, known: np.ndarray, band: int = 2) -> float:
    """Mean squared neighbour step over pairs near the known/generated boundary.

    A pair counts when at least one pixel is generated and both lie within
    ``band`` pixels of the known region.
    """
    known = known.astype(bool)
    if known.all() or not known.any():
        return 0.0
    dist = ndimage.distance_transform_edt(~known)
    near = dist <= band
    img = image.astype(np.float64)
    total, count = 0.0, 0
    for axis in (1, 2):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis], b[axis] = slice(None, -1), slice(1, None)
        d2 = ((img[tuple(a)] - img[tuple(b)]) ** 2).sum(axis=0)
        ka, kb = known[tuple(a[1:])], known[tuple(b[1:])]
        na, nb = near[tuple(a[1:])], near[tuple(b[1:])]
        valid = (~ka | ~kb) & na & nb
        total += float(d2[valid].sum())
        count += int(valid.sum())
    return total / count if count else 0.0


def reward_features(original: np.ndarray, generated: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Paired features of a generated image against its reference.

    ``original`` is the reference at generation resolution (white or masked
    outside the known region); ``mask`` marks the known region.
    """
    original = np.asarray(original, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if original.shape != generated.shape or original.shape[1:] != mask.shape:
        raise InvalidArgument(f"shape mismatch: {original.shape}, {generated.shape}, {mask.shape}")
    known = mask.astype(bool)
    unknown = ~known
    H, W = mask.shape
    mae = float(np.abs(generated - original)[:, known].mean()) if known.any() else 0.0
    if unknown.any():
        bg = generated[:, unknown]
        sat = bg.max(axis=0) - bg.min(axis=0)
        lum = bg.mean(axis=0)
        stats = [sat.mean(), sat.std(), lum.std(), lum.mean(),
                 float(np.abs(generated - original)[:, unknown].mean())]
    else:
        stats = [0.0] * 5
    return np.array([mae, boundary_energy(generated, known), *stats, known.mean(), math.log2(H * W) / 16.0])


# ---------------------------------------------------------------------------
# Oracle raters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RaterSpec:
    # calibrated so that about 95% of true catalog composites pass
    tau_product: float = 0.02
    tau_boundary: float = 0.3
    saturation_range: tuple[float, float] = (0.0, 0.5)
    solid_std: float = 0.01
    rho: float = 0.0

    def to_json(self) -> dict:
        return {"tau_product": self.tau_product, "tau_boundary": self.tau_boundary,
                "saturation_range": list(self.saturation_range), "solid_std": self.solid_std, "rho": self.rho}

    @classmethod
    def from_json(cls, d: dict) -> "RaterSpec":
        d = dict(d)
        if "saturation_range" in d:
            d["saturation_range"] = tuple(d["saturation_range"])
        return cls(**d)


def rule_answers(original: np.ndarray, generated: np.ndarray, mask: np.ndarray, task: ReviewTask,
                 spec: RaterSpec, human_present: bool = False) -> dict[str, bool]:
    """Noise-free defect flags."""
    f = reward_features(original, generated, mask)
    lo, hi = spec.saturation_range
    bg_bad = f[1] > spec.tau_boundary or not (lo <= f[2] <= hi)
    if ReviewTask(task) is ReviewTask.BACKGROUND:
        return {"Q_product": bool(f[0] > spec.tau_product), "Q_background": bool(bg_bad)}
    known = mask.astype(bool)
    band_lum = np.asarray(original, dtype=np.float64)[:, known].mean(axis=0) if known.any() else np.zeros(1)
    return {
        "Q_human_eligibility": bool(human_present),
        "Q_solid_background_eligibility": bool(band_lum.std() < spec.solid_std),
        "Q_band_defect": bool(bg_bad),
    }


def oracle_rater(original: np.ndarray, generated: np.ndarray, mask: np.ndarray, task: ReviewTask | str,
                 spec: RaterSpec, rng: np.random.Generator, image_id: str = "", rater_id: str = "oracle",
                 human_present: bool = False) -> RaterRecord:
    """Rule-based verdicts with each answer flipped with probability ``spec.rho``."""
    task = ReviewTask(task)
    truth = rule_answers(original, generated, mask, task, spec, human_present)
    flips = rng.random(len(truth)) < spec.rho
    answers = {q: Answer.DEFECT if (v != bool(flip)) else Answer.NO_DEFECT
               for (q, v), flip in zip(truth.items(), flips)}
    return RaterRecord(image_id, rater_id, task, answers)


def rate_pair(original, generated, mask, task, spec: RaterSpec, seed: int, image_id: str,
              n_raters: int = 2) -> list[RaterRecord]:
    """Independent oracle raters, each on its own (image, rater) stream."""
    return [oracle_rater(original, generated, mask, task, spec, stream(seed, "rater", image_id, r),
                         image_id, f"rater-{r}") for r in range(n_raters)]


def defect_fraction(records: Sequence[RaterRecord]) -> float:
    """Share of raters who flagged anything."""
    return sum(any(a is Answer.DEFECT for a in r.answers.values()) for r in records) / len(records)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

PRED_CLAMP = 1e-7


class ClampCounter:
    def __init__(self):
        self.count = 0


clamp_warnings = ClampCounter()


def aggregated_rater_loss(pred, target):
    """Cross-entropy of a defect probability against the rater defect fraction."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.any((target < 0) | (target > 1)):
        raise InvalidArgument("targets must lie in [0, 1]")
    if np.any((pred < 0) | (pred > 1)):
        raise InvalidArgument("predictions must lie in [0, 1]")
    clipped = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    n_clamped = int(np.sum(clipped != pred))
    if n_clamped:
        clamp_warnings.count += n_clamped
    out = -(target * np.log(clipped) + (1.0 - target) * np.log1p(-clipped))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Reward model
# ---------------------------------------------------------------------------

REWARD_ARCH = "canvas-reward-mlp-v1"


@dataclass(frozen=True)
class RewardExample:
    features: np.ndarray
    target: float

    def __post_init__(self):
        if not 0.0 <= self.target <= 1.0:
            raise InvalidArgument("target must lie in [0, 1]")


@dataclass
class RewardConfig:
    hidden: int = 16
    epochs: int = 1500
    lr: float = 0.03
    method: str = "adam"
    seed: int = 0
    weight_decay: float = 1e-4


@dataclass
class RewardParams:
    task: str
    mean: np.ndarray
    std: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    n_features: int = N_FEATURES
    calibration_warning: bool = False

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def arch_hash(self) -> bytes:
        desc = {"arch": REWARD_ARCH, "n_features": self.n_features, "hidden": int(self.b1.size)}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).digest()

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mean, self.std, self.w1.ravel(), self.b1, self.w2, self.b2])

    @classmethod
    def from_flat(cls, task: str, n_features: int, hidden: int, flat: np.ndarray) -> "RewardParams":
        sizes = [n_features, n_features, n_features * hidden, hidden, hidden, 1]
        parts = np.split(np.asarray(flat, dtype=np.float64), np.cumsum(sizes)[:-1])
        return cls(task, parts[0], parts[1], parts[2].reshape(n_features, hidden), parts[3], parts[4], parts[5],
                   n_features)


def _forward_reward(p: RewardParams, X: np.ndarray):
    xn = (X - p.mean) / p.std
    h = np.tanh(xn @ p.w1 + p.b1)
    logit = h @ p.w2 + p.b2[0]
    return xn, h, logit


def predict(p: RewardParams, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != p.n_features:
        raise InvalidArgument(f"expected {p.n_features} features, got {X.shape[1]}")
    return 1.0 / (1.0 + np.exp(-_forward_reward(p, X)[2]))


def _loss_grad(p: RewardParams, X: np.ndarray, y: np.ndarray, wd: float):
    xn, h, logit = _forward_reward(p, X)
    pred = 1.0 / (1.0 + np.exp(-logit))
    loss = float(np.mean(aggregated_rater_loss(pred, y)))
    n = len(y)
    d_logit = (pred - y) / n  # d(mean CE)/d logit
    g = {
        "w2": h.T @ d_logit + wd * p.w2,
        "b2": np.array([d_logit.sum()]),
    }
    dh = np.outer(d_logit, p.w2) * (1.0 - h * h)
    g["w1"] = xn.T @ dh + wd * p.w1
    g["b1"] = dh.sum(axis=0)
    return loss, g


def train_reward(examples: Sequence[RewardExample], config: RewardConfig | None = None,
                 task: str = "background", history: list | None = None) -> RewardParams:
    """Full-batch training of the scorer on mean aggregated rater loss."""
    config = config or RewardConfig()
    if not examples:
        raise InvalidArgument("no training examples")
    X = np.stack([np.asarray(e.features, dtype=np.float64) for e in examples])
    y = np.array([e.target for e in examples], dtype=np.float64)
    n_feat = X.shape[1]
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    rng = stream(config.seed, "reward-init", task)
    p = RewardParams(task, mean, std,
                     rng.normal(0, 1.0 / math.sqrt(n_feat), (n_feat, config.hidden)),
                     np.zeros(config.hidden), rng.normal(0, 1.0 / math.sqrt(config.hidden), config.hidden),
                     np.zeros(1), n_feat)
    if np.all(y >= 0.5) or np.all(y <= 0.5):
        p.calibration_warning = True
        log.warning("reward training data for %s has a single class; calibration is unreliable", task)
    m = {k: np.zeros_like(v) for k, v in p.arrays().items()}
    v = {k: np.zeros_like(a) for k, a in p.arrays().items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    for epoch in range(1, config.epochs + 1):
        loss, g = _loss_grad(p, X, y, config.weight_decay)
        if history is not None:
            history.append(loss)
        for k, arr in p.arrays().items():
            if config.method == "gd":
                arr -= config.lr * g[k]
            elif config.method == "adam":
                m[k] = b1 * m[k] + (1 - b1) * g[k]
                v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
                arr -= config.lr * (m[k] / (1 - b1**epoch)) / (np.sqrt(v[k] / (1 - b2**epoch)) + eps)
            else:
                raise InvalidArgument(f"unknown method {config.method!r}")
    if history is not None:
        history.append(_loss_grad(p, X, y, config.weight_decay)[0])
    return p


class RewardModel:
    """Defect-probability scorer; lower is better."""

    def __init__(self, params: RewardParams):
        self.params = params

    def score(self, original: np.ndarray, generated: np.ndarray, mask: np.ndarray) -> float:
        return float(predict(self.params, reward_features(original, generated, mask))[0])

    def score_candidate(self, original: np.ndarray, candidate, mask: np.ndarray) -> float:
        return self.score(original, candidate.image, mask)


class FunctionReward:
    """Reward model defined by an arbitrary function of the candidate (for rigging tests and sweeps)."""

    def __init__(self, fn: Callable[[object], float]):
        self.fn = fn

    def score_candidate(self, original, candidate, mask) -> float:
        return float(self.fn(candidate))


def save_reward(path: str | Path, p: RewardParams) -> None:
    from canvas.checkpoint import write_container

    meta = {"kind": "reward-model", "task": p.task, "n_features": p.n_features, "hidden": int(p.b1.size),
            "feature_names": list(FEATURE_NAMES), "calibration_warning": p.calibration_warning}
    write_container(path, p.arch_hash(), meta, [p.flat()])


def load_reward(path: str | Path) -> RewardParams:
    from canvas.checkpoint import read_container

    arch, meta, sections = read_container(path)
    if meta.get("kind") != "reward-model":
        raise InvalidArgument(f"not a reward checkpoint: {meta.get('kind')!r}")
    p = RewardParams.from_flat(meta["task"], meta["n_features"], meta["hidden"], sections[0])
    p.calibration_warning = bool(meta.get("calibration_warning", False))
    if p.arch_hash() != arch:
        raise InvalidArgument("reward architecture hash mismatch")
    return p
