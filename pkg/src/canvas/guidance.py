"""Multi-condition classifier-free guidance.

Three ways of combining model predictions under a text condition and an
image condition, plus a std-matching rescale. ``e_uu`` drops both
conditions, ``e_ui`` keeps only the image, ``e_ti`` keeps both.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from canvas.conditions import ConditionSet
from canvas.errors import DegenerateInput, InvalidArgument
from canvas.flow import VelocityField, as_grid

STD_EPS = 1e-8


class Variant(str, enum.Enum):
    NONE = "none"
    SEQUENTIAL = "sequential"
    TEXT_DROP = "text_drop"
    FULL_DROP = "full_drop"


class TaskKind(str, enum.Enum):
    GENERAL_EDIT = "general_edit"
    BACKGROUND_OUTPAINT = "background_outpaint"
    ASPECT_RATIO_OUTPAINT = "aspect_ratio_outpaint"
    SUPER_RESOLUTION = "super_resolution"


# forward passes per guided evaluation
PASSES = {Variant.NONE: 1, Variant.TEXT_DROP: 2, Variant.FULL_DROP: 2, Variant.SEQUENTIAL: 3}


@dataclass(frozen=True)
class GuidanceConfig:
    variant: Variant = Variant.NONE
    scale: float = 1.0
    image_scale: float = 1.0
    text_scale: float = 1.0
    rescale: bool = False
    use_negative: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("scale", "image_scale", "text_scale"):
            if not np.isfinite(getattr(self, name)):
                raise InvalidArgument(f"{name} must be finite")
        if self.variant is Variant.NONE and self.rescale:
            raise InvalidArgument("rescale requires a guidance variant")

    @classmethod
    def none(cls) -> "GuidanceConfig":
        return cls()

    @classmethod
    def sequential(cls, image_scale: float, text_scale: float, **kw) -> "GuidanceConfig":
        return cls(Variant.SEQUENTIAL, image_scale=image_scale, text_scale=text_scale, **kw)

    @classmethod
    def text_drop(cls, scale: float, **kw) -> "GuidanceConfig":
        return cls(Variant.TEXT_DROP, scale=scale, **kw)

    @classmethod
    def full_drop(cls, scale: float, **kw) -> "GuidanceConfig":
        return cls(Variant.FULL_DROP, scale=scale, **kw)

    @property
    def passes(self) -> int:
        return PASSES[self.variant]

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "GuidanceConfig":
        allowed = {"variant", "scale", "image_scale", "text_scale", "rescale", "use_negative"}
        unknown = set(d) - allowed
        if unknown:
            raise InvalidArgument(f"unknown guidance keys: {sorted(unknown)}")
        return cls(**d)


def _pair(a, b):
    a, b = as_grid(a), as_grid(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def guide_sequential(e_uu, e_ui, e_ti, s_image: float, s_text: float) -> np.ndarray:
    e_uu, e_ui = _pair(e_uu, e_ui)
    _, e_ti = _pair(e_uu, e_ti)
    # weighted-sum form: collapse points (0,0) and (1,1) return an input exactly
    dt = e_uu.dtype.type
    return dt(1.0 - s_image) * e_uu + dt(s_image - s_text) * e_ui + dt(s_text) * e_ti


def guide_text_drop(e_ui, e_ti, s: float) -> np.ndarray:
    e_ui, e_ti = _pair(e_ui, e_ti)
    dt = e_ui.dtype.type
    return dt(1.0 - s) * e_ui + dt(s) * e_ti


def guide_full_drop(e_uu, e_ti, s: float) -> np.ndarray:
    e_uu, e_ti = _pair(e_uu, e_ti)
    dt = e_uu.dtype.type
    return dt(1.0 - s) * e_uu + dt(s) * e_ti


def rescale_cfg(x_cfg, e_cond) -> np.ndarray:
    """Scale the guided prediction so its global population std matches ``e_cond``."""
    x_cfg, e_cond = _pair(x_cfg, e_cond)
    sd_x = float(np.std(x_cfg, dtype=np.float64))
    if sd_x <= STD_EPS:
        raise DegenerateInput("guided prediction has (near-)zero standard deviation")
    sd_c = float(np.std(e_cond, dtype=np.float64))
    return (x_cfg * (sd_c / sd_x)).astype(x_cfg.dtype)


class GuidedField(VelocityField):
    """Wraps a conditional field and applies one guidance formulation.

    Dropped text becomes NULL, or the negative text when ``use_negative`` and
    the condition set carries one. Sequential guidance adds the image
    condition first, then text.
    """

    def __init__(self, base: VelocityField, cfg: GuidanceConfig):
        super().__init__()
        self.base = base
        self.cfg = cfg

    def _evaluate(self, z, t, c: ConditionSet | None):
        if c is None:
            c = ConditionSet()
        cfg = self.cfg
        if cfg.variant is Variant.NONE:
            return self.base.evaluate(z, t, c)

        uncond_text = c.unconditional_text(cfg.use_negative)
        e_ti = self.base.evaluate(z, t, c)
        if cfg.variant is Variant.TEXT_DROP:
            e_ui = self.base.evaluate(z, t, c.with_text(uncond_text))
            out = guide_text_drop(e_ui, e_ti, cfg.scale)
        elif cfg.variant is Variant.FULL_DROP:
            e_uu = self.base.evaluate(z, t, c.with_text(uncond_text).without_images())
            out = guide_full_drop(e_uu, e_ti, cfg.scale)
        else:
            e_ui = self.base.evaluate(z, t, c.with_text(uncond_text))
            e_uu = self.base.evaluate(z, t, c.with_text(uncond_text).without_images())
            out = guide_sequential(e_uu, e_ui, e_ti, cfg.image_scale, cfg.text_scale)
        # both flat: the ratio is undefined but there is nothing to rescale
        if cfg.rescale and not (np.std(out, dtype=np.float64) <= STD_EPS
                                and np.std(e_ti, dtype=np.float64) <= STD_EPS):
            out = rescale_cfg(out, e_ti)
        return out


def guided_field(base: VelocityField, cfg: GuidanceConfig) -> GuidedField:
    return GuidedField(base, cfg)


def resolve_task_guidance(task: TaskKind) -> GuidanceConfig:
    """Per-task guidance presets."""
    task = TaskKind(task)
    if task in (TaskKind.GENERAL_EDIT, TaskKind.BACKGROUND_OUTPAINT):
        return GuidanceConfig.text_drop(7.0, rescale=True, use_negative=True)
    if task is TaskKind.ASPECT_RATIO_OUTPAINT:
        return GuidanceConfig.full_drop(3.0, rescale=True, use_negative=False)
    return GuidanceConfig.none()
