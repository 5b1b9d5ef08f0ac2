"""Synthetic product imagery and the editing-task sample constructors.

Scenes are rendered from a small parameter record by evaluating colour
functions at pixel centres expressed in base-resolution units. Rendering the
same record at another scale, or over a taller row range, therefore agrees
exactly with the base rendering wherever the two overlap in base pixels.

Image-space grids are float32 (3, H, W) with values k/255; masks are uint8
(H, W) with values {0, 1}.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy import ndimage

from canvas.conditions import MAX_REFERENCES, ConditionSet, tokenize
from canvas.errors import InvalidArgument
from canvas.rng import stream

CAPTION_TEMPLATE = "a {color} {shape} on a {bg_color} {bg_family} background"
CAPTION_TEMPLATE_VERSION = "v1"

PRODUCT_COLORS = {
    "red": (200, 40, 40), "green": (40, 160, 60), "blue": (40, 70, 200), "yellow": (220, 190, 40),
    "purple": (130, 50, 160), "orange": (230, 120, 30), "teal": (30, 150, 150), "brown": (120, 70, 30),
    "black": (30, 30, 30), "pink": (220, 100, 160),
}
BACKGROUND_COLORS = {
    "beige": (225, 205, 170), "gray": (150, 150, 150), "sage": (160, 185, 150), "navy": (40, 50, 90),
    "terracotta": (190, 100, 70), "sky": (140, 180, 220), "cream": (240, 230, 200), "charcoal": (60, 60, 65),
    "mint": (170, 220, 200), "rose": (220, 170, 175),
}
SHAPES = ("ellipse", "box", "diamond")
BACKGROUND_FAMILIES = ("solid", "gradient", "striped", "room")
SR_FLAT_FRACTION = 0.25  # share of super-resolution pairs that are a single flat colour


class Task(str, enum.Enum):
    TEXT_TO_IMAGE = "text_to_image"
    BACKGROUND_OUTPAINT = "background_outpaint"
    ASPECT_RATIO = "aspect_ratio"
    SUPER_RESOLUTION = "super_resolution"
    KEYFRAME = "keyframe"
    PRODUCT_EXTRACTION = "product_extraction"
    SCENE_SYNTHESIS = "scene_synthesis"
    MULTI_VIEW = "multi_view"
    NEIGHBOR_EDIT = "neighbor_edit"


PREFIXES = {
    Task.TEXT_TO_IMAGE: "",
    Task.BACKGROUND_OUTPAINT: "Generate background for this product:",
    Task.ASPECT_RATIO: "Extend the top and bottom of the image",
    Task.SUPER_RESOLUTION: "Super resolution for this image",
    Task.KEYFRAME: "Show the next moment of this scene:",
    Task.PRODUCT_EXTRACTION: "Extract the product from this scene:",
    Task.SCENE_SYNTHESIS: "Place this product in a scene:",
    Task.MULTI_VIEW: "Show this product from another view:",
    Task.NEIGHBOR_EDIT: "Edit this image:",
}


def make_prompt(task: Task, text: str) -> str:
    prefix = PREFIXES[Task(task)]
    return f"{prefix} {text}" if prefix else text


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid k/255 in float32."""
    k = np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255)
    return (k.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def _rgb(c: tuple[int, int, int]) -> np.ndarray:
    return np.array(c, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# Product images
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProductSpec:
    height: int = 16
    width: int = 16
    shape: str | None = None
    color: str | None = None
    bg_family: str | None = None
    bg_color: str | None = None
    min_area: float = 0.05
    max_area: float = 0.60
    allow_edge_contact: bool = False


@dataclass(eq=False)
class ProductImage:
    """A lifestyle scene, its product-on-white counterpart and the product mask."""

    image: np.ndarray
    product_shot: np.ndarray
    mask: np.ndarray
    caption: str
    sample_id: str
    params: dict | None = None
    hires: "ProductImage | None" = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def render(self, scale: int = 1, row_offset: int = 0, height: int | None = None) -> "ProductImage":
        """Re-render from the parameter record (scale in whole multiples)."""
        if self.params is None:
            raise InvalidArgument("no parameter record to re-render from")
        scene, shot, mask = render_product_scene(self.params, scale, row_offset, height)
        return ProductImage(scene, shot, mask, self.caption, self.sample_id, self.params)

    def with_hires(self, scale: int = 3) -> "ProductImage":
        return replace(self, hires=self.render(scale))


def _product_mask(p: dict, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    du, dv = (u - p["cy"]) / p["ry"], (v - p["cx"]) / p["rx"]
    if p["shape"] == "ellipse":
        return du * du + dv * dv <= 1.0
    if p["shape"] == "box":
        return (np.abs(du) <= 1.0) & (np.abs(dv) <= 1.0)
    return np.abs(du) + np.abs(dv) <= 1.0


def _background(p: dict, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    a, b = _rgb(BACKGROUND_COLORS[p["bg_color"]]), _rgb(BACKGROUND_COLORS[p["bg_color2"]])
    fam = p["bg_family"]
    if fam == "solid":
        w = np.zeros_like(u)
    elif fam == "gradient":
        w = np.clip(u / p["H0"], 0.0, 1.0)
    elif fam == "striped":
        phase = (u * math.cos(p["angle"]) + v * math.sin(p["angle"])) / p["period"]
        w = 0.5 + 0.5 * np.sin(2.0 * math.pi * phase)
    else:  # room: wall above a horizon, a grained table below
        floor = u >= p["horizon"]
        grain = 0.5 + 0.5 * np.sin(v / 1.7 + 0.3 * u)
        w = np.where(floor, 0.85 + 0.15 * grain, 0.15 * np.clip(u / p["H0"], 0.0, 1.0))
    return (1.0 - w)[None] * a[:, None, None] + w[None] * b[:, None, None]


def render_product_scene(p: dict, scale: int = 1, row_offset: int = 0,
                         height: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rasterize (scene, product shot, mask) at ``scale``.

    ``row_offset``/``height`` select a row window in scaled pixels, which may
    extend above (negative offset) or below the base frame.
    """
    H = p["H0"] * scale if height is None else height
    W = p["W0"] * scale
    Y = np.arange(H, dtype=np.float64) + row_offset
    X = np.arange(W, dtype=np.float64)
    u = (Y + 0.5) / scale - 0.5
    v = (X + 0.5) / scale - 0.5
    uu, vv = np.meshgrid(u, v, indexing="ij")
    inside = _product_mask(p, uu, vv)
    base = _rgb(PRODUCT_COLORS[p["color"]])
    shade = np.clip(1.0 - 0.15 * (uu - (p["cy"] - p["ry"])) / (2.0 * p["ry"]), 0.85, 1.0)
    product = base[:, None, None] * shade[None]
    bg = _background(p, uu, vv)
    scene = quantize(np.where(inside[None], product, bg))
    shot = quantize(np.where(inside[None], product, 1.0))
    return scene, shot, inside.astype(np.uint8)


def caption_for(p: dict) -> str:
    return CAPTION_TEMPLATE.format(color=p["color"], shape=p["shape"], bg_color=p["bg_color"],
                                   bg_family=p["bg_family"])


def _draw_params(spec: ProductSpec, rng: np.random.Generator) -> dict:
    H, W = spec.height, spec.width
    pick = lambda options, fixed: fixed if fixed is not None else options[int(rng.integers(len(options)))]
    bg_names = list(BACKGROUND_COLORS)
    p = {
        "H0": H, "W0": W,
        "shape": pick(SHAPES, spec.shape),
        "color": pick(list(PRODUCT_COLORS), spec.color),
        "bg_family": pick(BACKGROUND_FAMILIES, spec.bg_family),
        "bg_color": pick(bg_names, spec.bg_color),
    }
    p["bg_color2"] = bg_names[(bg_names.index(p["bg_color"]) + 1 + int(rng.integers(len(bg_names) - 1)))
                              % len(bg_names)]
    p["ry"] = float(rng.uniform(0.12, 0.42) * H)
    p["rx"] = float(rng.uniform(0.12, 0.42) * W)
    lo_y, hi_y = p["ry"] + 1.0, H - 2.0 - p["ry"]
    lo_x, hi_x = p["rx"] + 1.0, W - 2.0 - p["rx"]
    p["cy"] = float(rng.uniform(lo_y, hi_y)) if hi_y > lo_y else (H - 1) / 2.0
    p["cx"] = float(rng.uniform(lo_x, hi_x)) if hi_x > lo_x else (W - 1) / 2.0
    p["period"] = float(rng.uniform(3.0, 7.0))
    p["angle"] = float(rng.uniform(0.0, math.pi))
    p["horizon"] = float(rng.uniform(0.55, 0.8) * H)
    return p


def touches_edge(mask: np.ndarray) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


def gen_product_image(spec: ProductSpec, rng: np.random.Generator, sample_id: str = "product") -> ProductImage:
    """Draw a product scene; degenerate draws are rejected and redrawn."""
    for _ in range(1000):
        p = _draw_params(spec, rng)
        scene, shot, mask = render_product_scene(p)
        frac = float(mask.mean())
        if not (spec.min_area <= frac <= spec.max_area):
            continue
        if not spec.allow_edge_contact and touches_edge(mask):
            continue
        return ProductImage(scene, shot, mask, caption_for(p), sample_id, p)
    raise InvalidArgument(f"could not draw a product within the area bounds for {spec}")


def catalog_item(seed: int, item: int, height: int = 16, width: int = 16,
                 scale_hires: int | None = None) -> ProductImage:
    """Item ``item`` of the deterministic synthetic catalog.

    The item's identity (``sample_id``) does not depend on the rendering size.
    """
    p = gen_product_image(ProductSpec(height, width), stream(seed, "catalog", item, height, width),
                          f"item-{item:06d}")
    return p.with_hires(scale_hires) if scale_hires else p


# ---------------------------------------------------------------------------
# Edit samples
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EditSample:
    task: Task
    inputs: ConditionSet
    target: np.ndarray
    prompt: str
    sample_id: str = ""
    metadata: dict = field(default_factory=dict)


def _conditions(prompt: str, refs: Sequence[np.ndarray]) -> ConditionSet:
    return ConditionSet(text=tokenize(prompt), images=tuple(refs))


def with_mask_channel(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.concatenate([image, mask[None].astype(np.float32)], axis=0)


def make_background_outpaint_sample(p: ProductImage) -> EditSample:
    prompt = make_prompt(Task.BACKGROUND_OUTPAINT, p.caption)
    ref = with_mask_channel(p.product_shot, p.mask)
    return EditSample(Task.BACKGROUND_OUTPAINT, _conditions(prompt, [ref]), p.image.copy(), prompt, p.sample_id)


def aspect_canvas_height(width: int) -> int:
    """3:2 height for ``width``; ceil so the canvas is never shorter than 3:2."""
    return int(math.ceil(1.5 * width))


def edge_fill(image: np.ndarray, height: int, top: int) -> np.ndarray:
    """Default band content: the image with its first/last rows replicated."""
    bottom = height - top - image.shape[1]
    return np.pad(image, ((0, 0), (top, bottom), (0, 0)), mode="edge")


def make_aspect_ratio_sample(image: np.ndarray, rng: np.random.Generator,
                             fill: Callable[[int, int], np.ndarray] | None = None,
                             caption: str = "", sample_id: str = "") -> EditSample:
    """Embed ``image`` in a 3:2 canvas with masked top and bottom bands.

    The band split (rows above the image) is uniform over all splits.
    ``fill(height, top)`` supplies ground truth for the full canvas and must
    agree with ``image`` on its rows; without it the bands are edge-filled.
    """
    C, H, W = image.shape
    if H / W >= 1.4:
        raise InvalidArgument(f"image height:width {H / W:.3f} is not below 1.4")
    Hc = aspect_canvas_height(W)
    masked = Hc - H
    top = int(rng.integers(masked + 1))
    target = (fill or (lambda h, t: edge_fill(image, h, t)))(Hc, top)
    if target.shape != (C, Hc, W) or not np.array_equal(target[:, top:top + H], image):
        raise InvalidArgument("fill content does not contain the image at the sampled offset")
    known = np.zeros((Hc, W), dtype=np.uint8)
    known[top:top + H] = 1
    canvas = np.full((C, Hc, W), 0.5, dtype=np.float32)
    canvas[:, top:top + H] = image
    prompt = make_prompt(Task.ASPECT_RATIO, caption)
    return EditSample(Task.ASPECT_RATIO, _conditions(prompt, [with_mask_channel(canvas, known)]),
                      target.astype(np.float32), prompt, sample_id,
                      {"top": top, "bottom": masked - top, "masked_rows": masked})


def degrade_x3(image: np.ndarray, rng: np.random.Generator, blur_sigma: float = 0.6,
               max_noise: float = 0.03) -> np.ndarray:
    """Box x3 downsample, Gaussian blur, additive noise, 8-bit quantization."""
    C, H, W = image.shape
    if H % 3 or W % 3:
        raise InvalidArgument(f"dimensions {H}x{W} are not divisible by 3")
    low = image.astype(np.float64).reshape(C, H // 3, 3, W // 3, 3).mean(axis=(2, 4))
    if blur_sigma > 0:
        low = np.stack([ndimage.gaussian_filter(ch, blur_sigma, mode="nearest") for ch in low])
    noise_sd = float(rng.uniform(0.0, max_noise))
    low = low + noise_sd * rng.standard_normal(low.shape)
    return quantize(low)


def make_superres_pair(image: np.ndarray, rng: np.random.Generator, caption: str = "", sample_id: str = "",
                       blur_sigma: float = 0.6, max_noise: float = 0.03) -> EditSample:
    low = degrade_x3(image, rng, blur_sigma, max_noise)
    prompt = make_prompt(Task.SUPER_RESOLUTION, caption)
    return EditSample(Task.SUPER_RESOLUTION, _conditions(prompt, [low]), image.astype(np.float32), prompt,
                      sample_id, {"low_shape": list(low.shape)})


def shift_image(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Content moves by (dy, dx); vacated pixels take the nearest edge value."""
    C, H, W = image.shape
    rows = np.clip(np.arange(H) - dy, 0, H - 1)
    cols = np.clip(np.arange(W) - dx, 0, W - 1)
    return image[:, rows][:, :, cols]


def make_keyframe_pair(image: np.ndarray | ProductImage, rng: np.random.Generator, max_shift: int = 2,
                       mode: str | None = None, sample_id: str = "") -> EditSample:
    """frame_t -> frame_{t+delta}: a camera pan or (for product scenes) an object move."""
    if mode is None:
        mode = "object" if isinstance(image, ProductImage) and image.params and rng.random() < 0.5 else "pan"
    dy = int(rng.integers(-max_shift, max_shift + 1)) if max_shift else 0
    dx = int(rng.integers(-max_shift, max_shift + 1)) if max_shift else 0
    delta = float(rng.uniform(2.0, 6.0))
    if mode == "object":
        if not isinstance(image, ProductImage) or image.params is None:
            raise InvalidArgument("object motion needs a renderable product scene")
        src = image.image
        moved = dict(image.params, cy=image.params["cy"] + dy, cx=image.params["cx"] + dx)
        tgt = render_product_scene(moved)[0]
        caption = f"the {image.params['shape']} moves {_direction(dy, dx)}"
    else:
        src = image.image if isinstance(image, ProductImage) else image
        tgt = shift_image(src, dy, dx)
        caption = f"the camera pans {_direction(dy, dx)}"
    prompt = make_prompt(Task.KEYFRAME, caption)
    return EditSample(Task.KEYFRAME, _conditions(prompt, [src]), tgt, prompt, sample_id,
                      {"dy": dy, "dx": dx, "delta_seconds": delta, "mode": mode,
                       "near_static": dy == 0 and dx == 0})


def _direction(dy: int, dx: int) -> str:
    parts = []
    if dy:
        parts.append(f"{'down' if dy > 0 else 'up'} {abs(dy)} pixels")
    if dx:
        parts.append(f"{'right' if dx > 0 else 'left'} {abs(dx)} pixels")
    return " and ".join(parts) or "nowhere"


def render_multi_scene(products: Sequence[ProductImage]) -> tuple[np.ndarray, np.ndarray, str]:
    """One scene holding every product (later products drawn over earlier ones)."""
    base = products[0].params
    if base is None or any(p.params is None for p in products):
        raise InvalidArgument("multi-product scenes need renderable products")
    scene = products[0].image.copy()
    union = products[0].mask.copy()
    for p in products[1:]:
        _, shot, mask = render_product_scene(dict(p.params, H0=base["H0"], W0=base["W0"]))
        scene = np.where(mask[None].astype(bool), shot, scene)
        union |= mask
    names = ", ".join(f"a {p.params['color']} {p.params['shape']}" for p in products)
    caption = f"{names} on a {base['bg_color']} {base['bg_family']} background"
    return scene, union, caption


class Direction(str, enum.Enum):
    EXTRACT = "extract"
    SYNTHESIZE = "synthesize"


def make_scene_pair(p: ProductImage | Sequence[ProductImage], direction: Direction | str) -> EditSample:
    direction = Direction(direction)
    products = [p] if isinstance(p, ProductImage) else list(p)
    if not 1 <= len(products) <= MAX_REFERENCES:
        raise InvalidArgument(f"scene pairs take 1 to {MAX_REFERENCES} products, got {len(products)}")
    if len(products) == 1:
        scene, caption = products[0].image, products[0].caption
    else:
        scene, _, caption = render_multi_scene(products)
    sid = "+".join(q.sample_id for q in products)
    if direction is Direction.EXTRACT:
        if len(products) != 1:
            raise InvalidArgument("product extraction takes a single product")
        prompt = make_prompt(Task.PRODUCT_EXTRACTION, caption)
        return EditSample(Task.PRODUCT_EXTRACTION, _conditions(prompt, [scene]), products[0].product_shot.copy(),
                          prompt, sid)
    prompt = make_prompt(Task.SCENE_SYNTHESIS, caption)
    return EditSample(Task.SCENE_SYNTHESIS, _conditions(prompt, [q.product_shot for q in products]),
                      scene.copy(), prompt, sid, {"n_products": len(products)})


def make_multi_view_pair(p: ProductImage, rng: np.random.Generator) -> EditSample:
    """The same product re-rendered with swapped extents and a nudge (a new 'view')."""
    if p.params is None:
        raise InvalidArgument("multi-view pairs need a renderable product")
    q = dict(p.params)
    q["ry"], q["rx"] = min(p.params["rx"] * q["H0"] / q["W0"], 0.45 * q["H0"]), \
        min(p.params["ry"] * q["W0"] / q["H0"], 0.45 * q["W0"])
    q["cy"] = float(np.clip(q["cy"] + rng.uniform(-1, 1), q["ry"] + 1, q["H0"] - 2 - q["ry"]))
    q["cx"] = float(np.clip(q["cx"] + rng.uniform(-1, 1), q["rx"] + 1, q["W0"] - 2 - q["rx"]))
    _, shot, _ = render_product_scene(q)
    prompt = make_prompt(Task.MULTI_VIEW, f"a {q['color']} {q['shape']}")
    return EditSample(Task.MULTI_VIEW, _conditions(prompt, [p.product_shot]), shot, prompt, p.sample_id)


def make_neighbor_pair(p: ProductImage, rng: np.random.Generator) -> EditSample:
    """(scene + instruction) -> related scene with a recoloured background."""
    if p.params is None:
        raise InvalidArgument("neighbor pairs need a renderable product")
    names = [n for n in BACKGROUND_COLORS if n != p.params["bg_color"]]
    new = names[int(rng.integers(len(names)))]
    q = dict(p.params, bg_color=new)
    scene, _, _ = render_product_scene(q)
    prompt = make_prompt(Task.NEIGHBOR_EDIT, f"make the background {new}")
    return EditSample(Task.NEIGHBOR_EDIT, _conditions(prompt, [p.image]), scene, prompt, p.sample_id)


# ---------------------------------------------------------------------------
# Similarity band filter
# ---------------------------------------------------------------------------

def toy_embed(image: np.ndarray) -> np.ndarray:
    """4x4 block-mean downsample, mean-centred and scaled to unit length."""
    img = np.asarray(image, dtype=np.float64)
    rows = np.array_split(np.arange(img.shape[1]), 4)
    cols = np.array_split(np.arange(img.shape[2]), 4)
    v = np.array([[img[:, r][:, :, c].mean(axis=(1, 2)) for c in cols] for r in rows]).ravel()
    v = v - v.mean()
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def similarity_band_filter(pairs: Iterable, embedder: Callable[[np.ndarray], np.ndarray] = toy_embed,
                           lo: float = 0.3, hi: float = 0.95) -> list:
    """Keep pairs whose first two members have cosine similarity in [lo, hi]."""
    if not (0.0 <= lo < hi <= 1.0):
        raise InvalidArgument("need 0 <= lo < hi <= 1")
    return [pair for pair in pairs if lo <= cosine(embedder(pair[0]), embedder(pair[1])) <= hi]


# ---------------------------------------------------------------------------
# Mixtures and opt-out
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureSpec:
    weights: tuple[tuple[str, float], ...]

    def __post_init__(self):
        w = tuple((str(k), float(v)) for k, v in (self.weights.items() if isinstance(self.weights, dict)
                                                  else self.weights))
        if any(v < 0 for _, v in w):
            raise InvalidArgument("mixture weights must be non-negative")
        if not w or sum(v for _, v in w) <= 0:
            raise InvalidArgument("mixture weights must have a positive sum")
        object.__setattr__(self, "weights", w)

    @property
    def probabilities(self) -> np.ndarray:
        v = np.array([x for _, x in self.weights])
        return v / v.sum()


def choose_dataset(spec: MixtureSpec, u: float) -> str:
    """Categorical choice for a uniform draw ``u``."""
    cdf = np.cumsum(spec.probabilities)
    j = int(np.searchsorted(cdf, u, side="right"))
    j = min(j, len(cdf) - 1)
    while spec.weights[j][1] == 0:  # float edge: never land on a zero-weight entry
        j -= 1
    return spec.weights[j][0]


def mixture_sampler(spec: MixtureSpec, seed: int,
                    generators: dict[str, Callable[[np.random.Generator, int], object]],
                    start: int = 0) -> Iterator[tuple[str, object]]:
    """Endless (dataset id, sample) stream; index k is a pure function of (seed, k)."""
    for name, _ in spec.weights:
        if name not in generators:
            raise InvalidArgument(f"no generator for dataset {name!r}")
    k = start
    while True:
        name = choose_dataset(spec, stream(seed, "mixture", k).random())
        yield name, generators[name](stream(seed, "sample", name, k), k)
        k += 1


class OptOutStream:
    """Drops excluded sample ids from a stream and keeps an audit trail."""

    def __init__(self, source: Iterable, optout: Iterable[str], key: Callable[[object], str] | None = None):
        self.source = source
        self.optout = frozenset(optout)
        self.key = key or (lambda s: s.sample_id)
        self.excluded: list[str] = []

    def __iter__(self):
        for item in self.source:
            sid = self.key(item)
            if sid in self.optout:
                self.excluded.append(sid)
                continue
            yield item

    def audit_records(self) -> list[dict]:
        return [{"event": "optout_audit", "excluded": len(self.excluded), "ids": sorted(set(self.excluded))}]


def apply_optout(source: Iterable, optout: Iterable[str], key: Callable[[object], str] | None = None) -> OptOutStream:
    return OptOutStream(source, optout, key)


# ---------------------------------------------------------------------------
# Training sources
# ---------------------------------------------------------------------------

def to_model_space(sample: EditSample) -> tuple[np.ndarray, ConditionSet]:
    """Map [0, 1] colour channels to [-1, 1]; mask channels pass through."""
    C = sample.target.shape[0]

    def conv(img):
        img = np.asarray(img, dtype=np.float32)
        out = img.copy()
        out[:C] = 2.0 * img[:C] - 1.0
        return out

    x0 = (2.0 * sample.target - 1.0).astype(np.float32)
    return x0, replace(sample.inputs, images=tuple(conv(im) for im in sample.inputs.images))


def from_model_space(x: np.ndarray) -> np.ndarray:
    return quantize((np.asarray(x, dtype=np.float64) + 1.0) / 2.0)


def _aspect_from_product(p: ProductImage, rng: np.random.Generator) -> EditSample:
    """Aspect sample whose bands are real scene content rendered above and below."""
    W = p.params["W0"]
    Hc = aspect_canvas_height(W)
    lo = max(1, int(math.ceil(0.5 * W)))
    hi = min(Hc - 1, int(math.ceil(1.4 * W)) - 1)
    Hv = int(rng.integers(lo, hi + 1))
    visible_top = int(rng.integers(0, p.params["H0"] - Hv + 1)) if Hv <= p.params["H0"] else 0
    image = render_product_scene(p.params, 1, visible_top, Hv)[0]

    def fill(h, top):
        return render_product_scene(p.params, 1, visible_top - top, h)[0]

    return make_aspect_ratio_sample(image, rng, fill, p.caption, p.sample_id)


def default_generators(height: int, width: int, catalog_seed: int = 0, catalog_size: int = 512):
    """Dataset id -> fn(rng, index) for every task, drawing products from the catalog."""

    def item(rng, h=height, w=width):
        return catalog_item(catalog_seed, int(rng.integers(catalog_size)), h, w)

    def t2i(rng, _):
        p = item(rng)
        prompt = make_prompt(Task.TEXT_TO_IMAGE, p.caption)
        return EditSample(Task.TEXT_TO_IMAGE, _conditions(prompt, []), p.image, prompt, p.sample_id)

    def superres(rng, _):
        # a stage-sized window of a x3 rendering, so the low-res input looks
        # like a base-resolution image
        p = item(rng)
        hi = p.render(3).image
        h3, w3 = 3 * max(1, height // 3), 3 * max(1, width // 3)
        y = int(rng.integers(hi.shape[1] - h3 + 1))
        x = int(rng.integers(hi.shape[2] - w3 + 1))
        window = hi[:, y:y + h3, x:x + w3]
        if rng.random() < SR_FLAT_FRACTION:
            # flat colour pairs teach the model that featureless input stays featureless
            window = np.broadcast_to(quantize(rng.random((3, 1, 1))), window.shape).copy()
        return make_superres_pair(window, rng, p.caption, p.sample_id)

    def aspect(rng, _):
        return _aspect_from_product(item(rng, height, width), rng)

    return {
        Task.TEXT_TO_IMAGE.value: t2i,
        Task.BACKGROUND_OUTPAINT.value: lambda rng, _: make_background_outpaint_sample(item(rng)),
        Task.ASPECT_RATIO.value: aspect,
        Task.SUPER_RESOLUTION.value: superres,
        Task.KEYFRAME.value: lambda rng, _: make_keyframe_pair(item(rng), rng),
        Task.PRODUCT_EXTRACTION.value: lambda rng, _: make_scene_pair(item(rng), Direction.EXTRACT),
        Task.SCENE_SYNTHESIS.value: lambda rng, _: make_scene_pair(
            [item(rng) for _ in range(1 + int(rng.integers(3)))], Direction.SYNTHESIZE),
        Task.MULTI_VIEW.value: lambda rng, _: make_multi_view_pair(item(rng), rng),
        Task.NEIGHBOR_EDIT.value: lambda rng, _: make_neighbor_pair(item(rng), rng),
    }


DEFAULT_MIXTURE = {t.value: 1.0 for t in Task}


class MixtureBatchSource:
    """Training batches drawn from the task mixture at the stage's resolution.

    Opted-out catalog items are redrawn (at the next attempt address) and
    recorded for the audit trail.
    """

    def __init__(self, mixture: dict[str, float] | None = None, optout: Iterable[str] = (),
                 catalog_size: int = 512, catalog_seed: int = 0, max_attempts: int = 64):
        self.mixture = dict(mixture or DEFAULT_MIXTURE)
        self.catalog_seed = catalog_seed
        self.optout = frozenset(optout)
        self.catalog_size = catalog_size
        self.max_attempts = max_attempts
        self.excluded: list[str] = []

    def batch(self, stage, step, size, seed):
        H, W = stage.resolution
        spec = MixtureSpec(tuple((stage.mixture or self.mixture).items()))
        gens = default_generators(H, W, self.catalog_seed, self.catalog_size)
        out = []
        for i in range(size):
            for attempt in range(self.max_attempts):
                idx = (stage.stage_id, step, i, attempt)
                name = choose_dataset(spec, stream(seed, "mixture", *idx).random())
                sample = gens[name](stream(seed, "sample", *idx), step)
                ids = set(sample.sample_id.split("+"))
                if ids & self.optout:
                    self.excluded.extend(sorted(ids & self.optout))
                    continue
                out.append(to_model_space(sample))
                break
            else:
                raise InvalidArgument("opt-out list excludes (nearly) every catalog item")
        return out

    def audit_records(self) -> list[dict]:
        return [{"event": "optout_audit", "excluded": len(self.excluded), "ids": sorted(set(self.excluded))}]


class TwoGaussiansSource:
    """2-D points from two class-conditional Gaussians, as (2, 1, 1) grids."""

    def __init__(self, separation: float = 2.0, sigma: float = 0.25):
        self.separation = separation
        self.sigma = sigma

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, ConditionSet]:
        k = int(rng.integers(2))
        centre = np.array([(2 * k - 1) * self.separation, 0.0])
        x = centre + self.sigma * rng.standard_normal(2)
        return x.reshape(2, 1, 1).astype(np.float32), ConditionSet(text=(k,))

    def batch(self, stage, step, size, seed):
        return [self.sample(stream(seed, "two-gaussians", stage.stage_id, step, i)) for i in range(size)]
