"""Condition sets and the toy word tokenizer."""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from canvas.errors import InvalidArgument

MAX_REFERENCES = 8
VOCAB_SIZE = 512
# Reserved id one past the vocabulary; realized as a learned embedding row.
NULL_TOKEN = VOCAB_SIZE

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str, vocab_size: int = VOCAB_SIZE) -> tuple[int, ...]:
    """Lower-cased word hashing into ``[0, vocab_size)``; collisions are accepted."""
    return tuple(zlib.crc32(w.encode("utf-8")) % vocab_size for w in _WORD.findall(text.lower()))


@dataclass(frozen=True, eq=False)
class ConditionSet:
    """Text condition, optional negative text and up to eight reference grids.

    ``text=None`` is the dropped (NULL) condition and is distinct from an
    empty token tuple.
    """

    text: tuple[int, ...] | None = None
    negative_text: tuple[int, ...] | None = None
    images: tuple[np.ndarray, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.text is not None:
            object.__setattr__(self, "text", tuple(int(t) for t in self.text))
        if self.negative_text is not None:
            object.__setattr__(self, "negative_text", tuple(int(t) for t in self.negative_text))
        imgs = tuple(np.asarray(im) for im in self.images)
        if len(imgs) > MAX_REFERENCES:
            raise InvalidArgument(f"at most {MAX_REFERENCES} reference images, got {len(imgs)}")
        for im in imgs:
            if im.ndim != 3:
                raise InvalidArgument("reference images must be (channels, height, width)")
        object.__setattr__(self, "images", imgs)

    @classmethod
    def from_prompt(cls, prompt: str | None, images=(), negative: str | None = None) -> "ConditionSet":
        return cls(
            text=None if prompt is None else tokenize(prompt),
            negative_text=None if negative is None else tokenize(negative),
            images=tuple(images),
        )

    def with_text(self, text: tuple[int, ...] | None) -> "ConditionSet":
        return replace(self, text=text)

    def without_images(self) -> "ConditionSet":
        return replace(self, images=())

    def unconditional_text(self, use_negative: bool) -> tuple[int, ...] | None:
        """What the dropped text slot becomes under guidance."""
        if use_negative and self.negative_text is not None:
            return self.negative_text
        return None
