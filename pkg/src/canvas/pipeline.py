"""Outpainting inference: eligibility, prompts, candidates, ranking, filtering,
compositing, harmonization and x3 super-resolution, plus the offline seed sweep."""

from __future__ import annotations

import enum
import math
import re
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from canvas.conditions import ConditionSet, tokenize
from canvas.datasets import (
    BACKGROUND_COLORS, ProductImage, Task, aspect_canvas_height, from_model_space, make_prompt,
    touches_edge, with_mask_channel,
)
from canvas.errors import InvalidArgument, NumericDivergence
from canvas.flow import euler_sample, make_schedule
from canvas.guidance import GuidanceConfig, TaskKind, guided_field, resolve_task_guidance
from canvas.model import ModelField, ModelParams
from canvas.rng import stream

PIPELINE_TASKS = (TaskKind.BACKGROUND_OUTPAINT, TaskKind.ASPECT_RATIO_OUTPAINT)


# ---------------------------------------------------------------------------
# Eligibility
# ---------------------------------------------------------------------------

class Reason(str, enum.Enum):
    OK = "OK"
    NOT_WHITE_BACKGROUND = "NOT_WHITE_BACKGROUND"
    HUMAN_PRESENT = "HUMAN_PRESENT"
    ASPECT_TOO_TALL = "ASPECT_TOO_TALL"
    SOLID_BACKGROUND = "SOLID_BACKGROUND"
    FAILURE_PRONE = "FAILURE_PRONE"


@dataclass(frozen=True)
class EligibilityVerdict:
    eligible: bool
    reason: Reason

    def __post_init__(self):
        object.__setattr__(self, "reason", Reason(self.reason))
        if self.eligible != (self.reason is Reason.OK):
            raise InvalidArgument("eligible must hold exactly when reason is OK")

    def to_json(self) -> dict:
        return {"eligible": self.eligible, "reason": self.reason.value}


def no_humans(image: np.ndarray) -> bool:
    """Default human detector: synthetic scenes never contain people."""
    return False


@dataclass(frozen=True)
class EligibilityConfig:
    near_white: int = 245
    white_fraction: float = 0.90
    solid_variance: float = 1e-4
    max_aspect: float = 1.4
    human_present: Callable[[np.ndarray], bool] = no_humans

    def to_json(self) -> dict:
        return {"near_white": self.near_white, "white_fraction": self.white_fraction,
                "solid_variance": self.solid_variance, "max_aspect": self.max_aspect}


def near_white_fraction(image: np.ndarray, mask: np.ndarray, level: int = 245) -> float:
    outside = ~mask.astype(bool)
    if not outside.any():
        return 0.0
    u8 = np.round(np.asarray(image, dtype=np.float64) * 255.0)
    return float(np.all(u8 >= level, axis=0)[outside].mean())


def background_variance(image: np.ndarray, mask: np.ndarray) -> float:
    """Mean per-channel variance over pixels outside the mask."""
    outside = ~mask.astype(bool)
    if not outside.any():
        return 0.0
    return float(np.asarray(image, dtype=np.float64)[:, outside].var(axis=1).mean())


def check_eligibility(p: ProductImage, task: TaskKind | str,
                      config: EligibilityConfig = EligibilityConfig()) -> EligibilityVerdict:
    task = TaskKind(task)
    if task is TaskKind.BACKGROUND_OUTPAINT:
        source = p.product_shot
    elif task is TaskKind.ASPECT_RATIO_OUTPAINT:
        source = p.image
    else:
        raise InvalidArgument(f"no eligibility rule for task {task.value}")
    if config.human_present(source):
        return EligibilityVerdict(False, Reason.HUMAN_PRESENT)
    if task is TaskKind.BACKGROUND_OUTPAINT:
        if near_white_fraction(source, p.mask, config.near_white) < config.white_fraction:
            return EligibilityVerdict(False, Reason.NOT_WHITE_BACKGROUND)
    else:
        H, W = p.mask.shape
        if H / W >= config.max_aspect:
            return EligibilityVerdict(False, Reason.ASPECT_TOO_TALL)
        if background_variance(source, p.mask) <= config.solid_variance:
            return EligibilityVerdict(False, Reason.SOLID_BACKGROUND)
    if touches_edge(p.mask):
        return EligibilityVerdict(False, Reason.FAILURE_PRONE)
    return EligibilityVerdict(True, Reason.OK)


# ---------------------------------------------------------------------------
# Metaprompting
# ---------------------------------------------------------------------------

# simplest to most elaborate
PROMPT_TIERS = ("solid", "gradient", "striped", "room")
_CAPTION = re.compile(r"^a (\w+) (\w+) on a ")


def product_tokens(caption: str) -> tuple[str, str]:
    """(colour, noun) of the product, from a catalog-style caption."""
    m = _CAPTION.match(caption.strip().lower())
    if m:
        return m.group(1), m.group(2)
    words = re.findall(r"[a-z0-9]+", caption.lower())
    return "", words[-1] if words else "product"


def prompt_bank_size() -> int:
    return len(PROMPT_TIERS) * len(BACKGROUND_COLORS)


def metaprompt(caption: str, k: int, rng: np.random.Generator) -> list[str]:
    """``k`` background descriptions without replacement, spreading across tiers first."""
    if k < 1:
        raise InvalidArgument("k must be at least 1")
    if k > prompt_bank_size():
        raise InvalidArgument(f"k={k} exceeds the prompt bank size {prompt_bank_size()}")
    colour, noun = product_tokens(caption)
    product = f"{colour} {noun}".strip()
    tiers = rng.permutation(len(PROMPT_TIERS))
    colours = [rng.permutation(len(BACKGROUND_COLORS)) for _ in PROMPT_TIERS]
    names = list(BACKGROUND_COLORS)
    out = []
    for i in range(k):
        tier = int(tiers[i % len(tiers)])
        bg = names[int(colours[tier][i // len(tiers)])]
        out.append(f"a {product} on a {bg} {PROMPT_TIERS[tier]} background")
    return out


# ---------------------------------------------------------------------------
# Placement and compositing
# ---------------------------------------------------------------------------

def bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """(top, bottom, left, right), inclusive."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise InvalidArgument("mask is empty")
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


@dataclass(frozen=True)
class Placement:
    """Where the source frame lands on the target canvas.

    ``dy``/``dx`` offset the source frame; the margins are the padding around
    the placed product's bounding box on each side of the target.
    """

    dy: int
    dx: int
    target_shape: tuple[int, int]
    top: int
    bottom: int
    left: int
    right: int

    def scaled(self, s: int, mask: np.ndarray) -> "Placement":
        """The same placement for a source rendered ``s`` times larger."""
        H, W = self.target_shape
        return place_offset(mask, (H * s, W * s), self.dy * s, self.dx * s)

    def place(self, arr: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Paste the source frame ``arr`` ((C,)H,W) onto a canvas of the target shape."""
        H, W = self.target_shape
        lead = arr.shape[:-2]
        h, w = arr.shape[-2:]
        out = np.full(lead + (H, W), fill, dtype=arr.dtype)
        y0, y1 = max(0, self.dy), min(H, self.dy + h)
        x0, x1 = max(0, self.dx), min(W, self.dx + w)
        if y1 > y0 and x1 > x0:
            out[..., y0:y1, x0:x1] = arr[..., y0 - self.dy:y1 - self.dy, x0 - self.dx:x1 - self.dx]
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["target_shape"] = list(self.target_shape)
        return d


def place_offset(mask: np.ndarray, target_shape: tuple[int, int], dy: int, dx: int) -> Placement:
    """Placement at the requested frame offset, clamped so the product stays inside."""
    H, W = target_shape
    t, b, l, r = bbox(mask)
    bh, bw = b - t + 1, r - l + 1
    if bh > H or bw > W:
        raise InvalidArgument(f"product {bh}x{bw} does not fit a {H}x{W} canvas")
    dy = int(np.clip(dy, -t, H - 1 - b))
    dx = int(np.clip(dx, -l, W - 1 - r))
    return Placement(dy, dx, (H, W), t + dy, H - 1 - (b + dy), l + dx, W - 1 - (r + dx))


def dynamic_placement(mask: np.ndarray, target_shape: tuple[int, int]) -> Placement:
    """Keep the product's relative centre from the source frame, then clamp."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    H, W = target_shape
    t, b, l, r = bbox(mask)
    cy, cx = (t + b + 1) / 2.0 / h, (l + r + 1) / 2.0 / w
    top = math.floor(cy * H - (b - t + 1) / 2.0 + 0.5)
    left = math.floor(cx * W - (r - l + 1) / 2.0 + 0.5)
    return place_offset(mask, target_shape, top - t, left - l)


def composite_cutout(generated: np.ndarray, original: np.ndarray, mask: np.ndarray,
                     placement: Placement | None = None) -> np.ndarray:
    """Original pixels under the (placed) mask, generated pixels elsewhere."""
    if placement is not None:
        if tuple(generated.shape[-2:]) != placement.target_shape:
            raise InvalidArgument("placement target does not match the generated canvas")
        t, b, l, r = bbox(mask) if mask.any() else (0, -1, 0, -1)
        H, W = placement.target_shape
        if mask.any() and (t + placement.dy < 0 or b + placement.dy >= H
                           or l + placement.dx < 0 or r + placement.dx >= W):
            raise InvalidArgument("placement puts the product outside the canvas")
        original = placement.place(original)
        mask = placement.place(np.asarray(mask).astype(np.uint8))
    if generated.shape != original.shape or generated.shape[-2:] != mask.shape:
        raise InvalidArgument(f"shape mismatch: {generated.shape}, {original.shape}, {mask.shape}")
    return np.where(mask.astype(bool)[None], original, generated).astype(generated.dtype)


def _normalized_extend(values: np.ndarray, weight: np.ndarray, sigma: float) -> np.ndarray:
    num = np.stack([ndimage.gaussian_filter(ch * weight, sigma, mode="nearest") for ch in values])
    den = ndimage.gaussian_filter(weight, sigma, mode="nearest")
    return num / np.maximum(den, 1e-12)[None]


def harmonize_boundary(generated: np.ndarray, masked_original: np.ndarray, mask: np.ndarray,
                       width: int = 4) -> np.ndarray:
    """Composite with a feathered colour correction around the mask boundary.

    The colour offset between original and generated pixels along the known
    side of the boundary is spread outward by normalized convolution at full
    and half resolution; generated pixels within ``width`` of the known region
    receive it with a weight falling linearly with distance. Known pixels are
    the original's, bit for bit.
    """
    if generated.shape != masked_original.shape or generated.shape[1:] != mask.shape:
        raise InvalidArgument("shapes do not match")
    known = np.asarray(mask).astype(bool)
    out = np.where(known[None], masked_original, generated).astype(generated.dtype)
    if known.all() or not known.any() or width <= 0:
        return out
    diff = (masked_original.astype(np.float64) - generated.astype(np.float64)) * known[None]
    wk = known.astype(np.float64)
    sigma = max(width / 2.0, 0.5)
    fine = _normalized_extend(diff, wk, sigma)
    H, W = known.shape
    ph, pw = H % 2, W % 2
    half = ((H + ph) // 2, 2, (W + pw) // 2, 2)
    d2 = np.pad(diff, ((0, 0), (0, ph), (0, pw)), mode="edge").reshape(len(diff), *half)
    k2 = np.pad(wk, ((0, ph), (0, pw)), mode="edge").reshape(half)
    ksum = k2.sum(axis=(1, 3))
    coarse_vals = d2.sum(axis=(2, 4)) / np.maximum(ksum, 1e-12)[None]
    coarse = _normalized_extend(coarse_vals, (ksum > 0).astype(np.float64), max(sigma / 2.0, 0.5))
    coarse = coarse.repeat(2, axis=1).repeat(2, axis=2)[:, :H, :W]
    offset = 0.5 * (fine + coarse)
    dist = ndimage.distance_transform_edt(~known)
    alpha = np.clip(1.0 - dist / (width + 1.0), 0.0, 1.0) * (~known)
    blended = generated.astype(np.float64) + alpha[None] * offset
    return np.where(known[None], out, np.clip(blended, 0.0, 1.0)).astype(generated.dtype)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Candidate:
    image: np.ndarray | None
    seed: int
    prompt: str
    prompt_index: int = 0
    reward: float | None = None
    raw: np.ndarray | None = None
    failed: str | None = None

    def to_json(self) -> dict:
        return {"seed": self.seed, "prompt": self.prompt, "prompt_index": self.prompt_index,
                "reward": self.reward, "failed": self.failed}


@dataclass(frozen=True)
class PipelineConfig:
    base_size: tuple[int, int] = (24, 16)
    n_candidates: int = 2
    steps: int = 20
    shift: float = 1.0
    sr_steps: int = 8
    sr_shift: float = 1.0
    sr_temperature: float = 0.0
    tuned_seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7)
    post_filter_threshold: float = 0.5
    post_filter_batch: int | None = None
    harmonize_width: int = 4
    negative_prompt: str = "blurry distorted seam artifacts"
    guidance: GuidanceConfig | None = None
    seed: int = 0
    superres: bool = True
    eligibility: EligibilityConfig = EligibilityConfig()

    def __post_init__(self):
        object.__setattr__(self, "base_size", tuple(int(v) for v in self.base_size))
        object.__setattr__(self, "tuned_seeds", tuple(int(s) for s in self.tuned_seeds))
        if self.n_candidates < 1 or self.steps < 1 or self.sr_steps < 1:
            raise InvalidArgument("n_candidates, steps and sr_steps must be positive")
        if not self.tuned_seeds:
            raise InvalidArgument("at least one tuned seed is required")
        if self.sr_temperature < 0:
            raise InvalidArgument("sr_temperature must be non-negative")
        if self.post_filter_batch is not None and self.post_filter_batch < self.n_candidates:
            raise InvalidArgument("post_filter_batch must be at least n_candidates")

    @property
    def filter_pool(self) -> int:
        return self.post_filter_batch or self.n_candidates

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in ("n_candidates", "steps", "shift", "sr_steps", "sr_shift",
                                           "sr_temperature", "post_filter_threshold", "post_filter_batch",
                                           "harmonize_width", "negative_prompt", "seed", "superres")}
        d["base_size"] = list(self.base_size)
        d["tuned_seeds"] = list(self.tuned_seeds)
        d["guidance"] = self.guidance.to_json() if self.guidance else None
        d["eligibility"] = self.eligibility.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed
        if unknown:
            raise InvalidArgument(f"unknown pipeline config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("guidance") is not None:
            d["guidance"] = GuidanceConfig.from_json(d["guidance"])
        if "eligibility" in d:
            el = d["eligibility"]
            bad = set(el) - {"near_white", "white_fraction", "solid_variance", "max_aspect"}
            if bad:
                raise InvalidArgument(f"unknown eligibility keys: {sorted(bad)}")
            d["eligibility"] = EligibilityConfig(**el)
        return cls(**d)


def init_noise(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    """Initial noise of a tuned seed; the same seed gives the same noise for every input."""
    return stream(seed, "init-noise", *shape).standard_normal(shape).astype(np.float32)


def _to_model(img: np.ndarray) -> np.ndarray:
    out = np.asarray(img, dtype=np.float32).copy()
    out[:3] = 2.0 * out[:3] - 1.0
    return out


@dataclass
class Job:
    """Everything needed to generate and judge candidates for one input."""

    task: TaskKind
    reference: np.ndarray       # conditioning image in image space, with mask channel
    masked_original: np.ndarray  # known pixels at generation resolution
    known: np.ndarray
    placement: Placement | None
    caption: str
    input_id: str


def prepare_job(p: ProductImage, task: TaskKind | str, config: PipelineConfig) -> Job:
    task = TaskKind(task)
    H, W = config.base_size
    if task is TaskKind.BACKGROUND_OUTPAINT:
        placement = dynamic_placement(p.mask, (H, W))
        shot = placement.place(p.product_shot, fill=1.0)
        known = placement.place(p.mask.astype(np.uint8))
        return Job(task, with_mask_channel(shot, known), shot, known, placement, p.caption, p.sample_id)
    h, w = p.mask.shape
    if w != W:
        raise InvalidArgument(f"aspect input width {w} does not match the canvas width {W}")
    Hc = aspect_canvas_height(w)
    top = (Hc - h) // 2
    placement = Placement(top, 0, (Hc, w), top, Hc - h - top, 0, 0)
    canvas = placement.place(p.image, fill=0.5)
    known = placement.place(np.ones((h, w), dtype=np.uint8))
    return Job(task, with_mask_channel(canvas, known), canvas, known, placement, p.caption, p.sample_id)


def _sample(params: ModelParams, cond: ConditionSet, z: np.ndarray, cfg: GuidanceConfig, steps: int,
            shift: float) -> tuple[np.ndarray, int]:
    field_ = guided_field(ModelField(params), cfg)
    x = euler_sample(field_, z, make_schedule(steps, shift), cond)
    return from_model_space(x), field_.base.eval_count  # backbone forward passes


def candidate_plan(job: Job, n: int, config: PipelineConfig) -> list[tuple[int, str, int]]:
    """(seed, prompt, prompt index) per candidate."""
    if job.task is TaskKind.BACKGROUND_OUTPAINT:
        prompts = metaprompt(job.caption, n, stream(config.seed, "metaprompt", job.input_id))
        seed = config.tuned_seeds[0]
        return [(seed, make_prompt(Task.BACKGROUND_OUTPAINT, pr), i) for i, pr in enumerate(prompts)]
    if n > len(config.tuned_seeds):
        raise InvalidArgument(f"{n} candidates need {n} distinct tuned seeds")
    seeds = config.tuned_seeds[:n]
    prompt = make_prompt(Task.ASPECT_RATIO, job.caption)
    return [(s, prompt, 0) for s in seeds]


def generate_candidates(p: ProductImage | Job, task: TaskKind | str, n: int, params: ModelParams,
                        config: PipelineConfig = PipelineConfig(),
                        plan: Sequence[tuple[int, str, int]] | None = None,
                        stats: dict | None = None) -> list[Candidate]:
    """Sample ``n`` candidates; each is composited and harmonized at base resolution.

    A candidate whose sampling diverges is returned with ``failed`` set.
    """
    if n < 1:
        raise InvalidArgument("n must be at least 1")
    task = TaskKind(task)
    job = p if isinstance(p, Job) else prepare_job(p, task, config)
    cfg = config.guidance or resolve_task_guidance(task)
    negative = tokenize(config.negative_prompt) if task is TaskKind.BACKGROUND_OUTPAINT else None
    ref = _to_model(job.reference)
    out = []
    for seed, prompt, idx in (plan or candidate_plan(job, n, config)):
        cond = ConditionSet(text=tokenize(prompt), negative_text=negative, images=(ref,))
        z = init_noise(seed, (3, *job.known.shape))
        try:
            raw, evals = _sample(params, cond, z, cfg, config.steps, config.shift)
        except NumericDivergence as e:
            out.append(Candidate(None, seed, prompt, idx, failed=f"numeric divergence at step {e.step}"))
            continue
        if stats is not None:
            stats["evals"] = stats.get("evals", 0) + evals
        image = harmonize_boundary(raw, job.masked_original, job.known, config.harmonize_width)
        out.append(Candidate(image, seed, prompt, idx, raw=raw))
    return out


def score_candidates(reward_model, job: Job, cands: Sequence[Candidate]) -> None:
    for c in cands:
        if c.failed is None:
            r = float(reward_model.score_candidate(job.masked_original, c, job.known))
            if not 0.0 <= r <= 1.0:
                raise InvalidArgument(f"reward {r} is outside [0, 1]")
            c.reward = r


def rank_candidates(reward_model, original, cands: Sequence[Candidate],
                    mask: np.ndarray | None = None) -> list[Candidate]:
    """Ascending defect probability; ties keep (seed, prompt index) order.

    Candidates without a reward are scored first when ``reward_model`` is given.
    """
    live = [c for c in cands if c.failed is None]
    if reward_model is not None:
        for c in live:
            if c.reward is None:
                c.reward = float(reward_model.score_candidate(original, c, mask))
    if any(c.reward is None for c in live):
        raise InvalidArgument("every candidate needs a reward before ranking")
    return sorted(live, key=lambda c: (c.reward, c.seed, c.prompt_index))


class Verdict(str, enum.Enum):
    KEEP = "KEEP"
    DROP = "DROP"


def post_filter(top: Candidate, threshold: float = 0.5) -> tuple[Verdict, str | None]:
    if top.reward is None:
        raise InvalidArgument("candidate has no reward")
    if top.reward > threshold:
        return Verdict.DROP, "POST_FILTER"
    return Verdict.KEEP, None


def upsample_nearest(image: np.ndarray, s: int = 3) -> np.ndarray:
    return image.repeat(s, axis=-2).repeat(s, axis=-1)


def superres_x3(image: np.ndarray, params: ModelParams, caption: str = "", steps: int = 8, shift: float = 1.0,
                seed: int = 0, temperature: float = 0.0) -> np.ndarray:
    """x3 upscaling with the super-resolution task, guidance disabled.

    ``temperature`` scales the initial noise. At 0 the sampler follows the
    mean trajectory, which trades sample detail for fidelity to the input.
    """
    C, h, w = image.shape
    prompt = make_prompt(Task.SUPER_RESOLUTION, caption)
    cond = ConditionSet(text=tokenize(prompt), images=(_to_model(image),))
    z = (np.float32(temperature) * init_noise(seed, (C, 3 * h, 3 * w))).astype(np.float32)
    return _sample(params, cond, z, resolve_task_guidance(TaskKind.SUPER_RESOLUTION), steps, shift)[0]


# ---------------------------------------------------------------------------
# Whole pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineManifest:
    input_id: str
    task: str
    verdict: EligibilityVerdict
    prompts: list[str] = field(default_factory=list)
    candidates: list[dict] = field(default_factory=list)
    selected: int | None = None
    dropped: str | None = None
    output: str | None = None
    placement: dict | None = None
    evals: int = 0
    errors: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if (self.selected is None) == (self.dropped is None):
            raise InvalidArgument("a manifest has either a selected candidate or a drop reason")

    def to_json(self, timings: bool = True) -> dict:
        d = {"input_id": self.input_id, "task": self.task, "verdict": self.verdict.to_json(),
             "prompts": self.prompts, "candidates": self.candidates, "selected": self.selected,
             "dropped": self.dropped, "output": self.output, "placement": self.placement,
             "evals": self.evals, "errors": self.errors}
        if timings:
            d["timings"] = self.timings
        return d


@dataclass
class PipelineResult:
    manifest: PipelineManifest
    image: np.ndarray | None = None       # final x3 output
    base_image: np.ndarray | None = None  # selected candidate at base resolution
    mask: np.ndarray | None = None        # known region of ``image``
    candidates: list[Candidate] = field(default_factory=list)


def _hires_source(p: ProductImage, task: TaskKind) -> tuple[np.ndarray, np.ndarray, str]:
    if p.hires is not None:
        hi = p.hires
    elif p.params is not None:
        hi = p.render(3)
    else:
        src = p.product_shot if task is TaskKind.BACKGROUND_OUTPAINT else p.image
        return upsample_nearest(src), upsample_nearest(p.mask), "nearest"
    src = hi.product_shot if task is TaskKind.BACKGROUND_OUTPAINT else hi.image
    return src, hi.mask, "render"


def run_pipeline(p: ProductImage, task: TaskKind | str, config: PipelineConfig, params: ModelParams,
                 reward_model, sr_params: ModelParams | None = None) -> PipelineResult:
    """Run one input end to end; failures are recorded rather than raised.

    ``sr_params`` is an optional dedicated super-resolution model; by default
    the generation model also performs the x3 step.
    """
    task = TaskKind(task)
    timings: dict[str, float] = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    verdict = check_eligibility(p, task, config.eligibility)
    lap("eligibility")
    if not verdict.eligible:
        return PipelineResult(PipelineManifest(p.sample_id, task.value, verdict, dropped=verdict.reason.value,
                                               timings=timings))
    man = dict(input_id=p.sample_id, task=task.value, verdict=verdict, timings=timings)
    try:
        job = prepare_job(p, task, config)
        plan = candidate_plan(job, config.filter_pool, config)
        stats: dict = {}
        cands = generate_candidates(job, task, len(plan), params, config, plan, stats)
        lap("generate")
        score_candidates(reward_model, job, cands)
        ranked = rank_candidates(None, job.masked_original, cands)
        lap("rank")
    except (InvalidArgument, NumericDivergence) as e:
        return PipelineResult(PipelineManifest(**man, dropped="ERROR", errors=[str(e)]))
    prompts = list(dict.fromkeys(c.prompt for c in cands))
    errors = [f"candidate {i}: {c.failed}" for i, c in enumerate(cands) if c.failed]
    common = dict(man, prompts=prompts, candidates=[c.to_json() for c in cands], errors=errors,
                  placement=job.placement.to_json() if job.placement else None, evals=stats.get("evals", 0))
    if not ranked:
        return PipelineResult(PipelineManifest(**common, dropped="ALL_FAILED"), candidates=cands)
    top = ranked[0]
    decision, reason = post_filter(top, config.post_filter_threshold)
    lap("post_filter")
    if decision is Verdict.DROP:
        return PipelineResult(PipelineManifest(**common, dropped=reason), candidates=cands)
    selected = cands.index(top)
    base = top.image
    result = PipelineResult(PipelineManifest(**common, selected=selected), base_image=base, mask=job.known,
                            candidates=cands)
    if not config.superres:
        result.image = base
        return result
    try:
        hi = superres_x3(base, sr_params or params, job.caption, config.sr_steps, config.sr_shift, top.seed,
                             config.sr_temperature)
    except NumericDivergence as e:
        result.manifest = PipelineManifest(**common, dropped="SUPERRES_DIVERGED",
                                           errors=errors + [f"super-resolution: {e}"])
        return result
    lap("superres")
    src, src_mask, how = _hires_source(p, task)
    if task is TaskKind.BACKGROUND_OUTPAINT:
        hp = job.placement.scaled(3, src_mask)
    else:
        src_mask = np.ones(src.shape[1:], dtype=np.uint8)
        pl = job.placement
        hp = Placement(3 * pl.dy, 0, (hi.shape[1], hi.shape[2]), 3 * pl.top, 3 * pl.bottom, 0, 0)
    result.image = composite_cutout(hi, src, src_mask, hp)
    result.mask = hp.place(src_mask.astype(np.uint8))
    result.manifest.placement = dict(common["placement"], hires=hp.to_json(), hires_source=how)
    lap("composite")
    return result


# ---------------------------------------------------------------------------
# Seed sweep
# ---------------------------------------------------------------------------

@dataclass
class SeedReport:
    entries: list[dict]   # seed, mean_reward, rank; best first
    n_inputs: int
    task: str

    def top_subset(self, fraction: float = 0.1) -> list[int]:
        k = max(1, math.ceil(fraction * len(self.entries)))
        return [e["seed"] for e in self.entries[:k]]

    def to_json(self) -> dict:
        return {"task": self.task, "n_inputs": self.n_inputs, "entries": self.entries}

    @classmethod
    def from_json(cls, d: dict) -> "SeedReport":
        return cls([dict(e) for e in d["entries"]], d["n_inputs"], d["task"])


def seed_sweep(inputs: Sequence[ProductImage], seeds: Sequence[int], task: TaskKind | str, params: ModelParams,
               reward_model, config: PipelineConfig = PipelineConfig()) -> SeedReport:
    """Rank seeds by mean defect probability of their outputs over all inputs."""
    if not inputs or not seeds:
        raise InvalidArgument("seed sweep needs inputs and seeds")
    task = TaskKind(task)
    totals = {int(s): 0.0 for s in seeds}
    if len(totals) != len(seeds):
        raise InvalidArgument("seeds must be distinct")
    for p in inputs:
        job = prepare_job(p, task, config)
        first = candidate_plan(job, 1, config)[0]
        plan = [(int(s), first[1], first[2]) for s in seeds]
        cands = generate_candidates(job, task, len(plan), params, config, plan)
        for c in cands:
            if c.failed is not None:
                totals[c.seed] += 1.0
            else:
                totals[c.seed] += float(reward_model.score_candidate(job.masked_original, c, job.known))
    means = sorted(((v / len(inputs), s) for s, v in totals.items()))
    return SeedReport([{"seed": s, "mean_reward": m, "rank": i + 1} for i, (m, s) in enumerate(means)],
                      len(inputs), task.value)
