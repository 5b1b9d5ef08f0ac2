"""A small conditional velocity network with manual backpropagation.

Every pixel of the noisy latent is a token. A token's input vector is

    [z pixel | reference context | text vector | time features | position]

and a three-layer SiLU MLP F maps it to that pixel's velocity through the
preconditioning ``v = c_skip(t) z + c_out(t) F(c_in(t) z, ...)``, whose
coefficients are the exact field for data of standard deviation
``data_std``, so the network only learns the residual. The condition
sequence is the text tokens followed by every reference's pixel tokens in
list order; each latent token reads the 3x3 neighbourhood of the co-located
reference tokens (averaged over references), which is the only
cross-token interaction. Parameters do not depend on resolution, so a model
trained at 8x8 continues unchanged at 16x16.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from canvas.conditions import MAX_REFERENCES, NULL_TOKEN, VOCAB_SIZE, ConditionSet
from canvas.errors import InvalidArgument
from canvas.flow import VelocityField, fm_target, interpolate, sample_training_t
from canvas.rng import stream

ARCH_NAME = "canvas-token-mlp-v1"
PARAM_NAMES = ("embed", "w1", "b1", "w2", "b2", "w3", "b3")
_NEIGH = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
_POS_DIM = 6


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    embed_dim: int = 16
    hidden: int = 64
    time_freqs: int = 8
    vocab_size: int = VOCAB_SIZE
    data_std: float | None = 0.5

    @property
    def ref_channels(self) -> int:
        return self.channels + 1

    @property
    def ref_dim(self) -> int:
        # 3x3 neighbourhood, sub-pixel offset (2), reference count (1)
        return 9 * self.ref_channels + 3

    @property
    def time_dim(self) -> int:
        return 2 * self.time_freqs + 1

    @property
    def input_dim(self) -> int:
        return self.channels + self.ref_dim + self.embed_dim + self.time_dim + _POS_DIM

    def to_json(self) -> dict:
        return {"arch": ARCH_NAME, **asdict(self)}

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        arch = d.pop("arch", ARCH_NAME)
        if arch != ARCH_NAME:
            raise InvalidArgument(f"unknown architecture {arch!r}")
        return cls(**d)

    def arch_hash(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).digest()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "embed": (self.vocab_size + 1, self.embed_dim),
            "w1": (self.input_dim, self.hidden),
            "b1": (self.hidden,),
            "w2": (self.hidden, self.hidden),
            "b2": (self.hidden,),
            "w3": (self.hidden, self.channels),
            "b3": (self.channels,),
        }


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.arrays["w1"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_NAMES])

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray) -> "ModelParams":
        expected = sum(int(np.prod(shape)) for shape in config.shapes().values())
        if flat.size != expected:
            raise InvalidArgument(f"flat parameter vector has {flat.size} entries, expected {expected}")
        arrays, i = {}, 0
        for k, shape in config.shapes().items():
            n = int(np.prod(shape))
            arrays[k] = np.array(flat[i:i + n]).reshape(shape)
            i += n
        return cls(config, arrays)

    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def init_params(config: ModelConfig, seed: int = 0, zero_out: bool = True,
                dtype=np.float32) -> ModelParams:
    """He-style init; the output layer starts at zero unless ``zero_out=False``."""
    rng = stream(seed, "init")
    s = config.shapes()
    arrays = {
        "embed": rng.normal(0, 0.5, s["embed"]),
        "w1": rng.normal(0, 1.0 / np.sqrt(config.input_dim), s["w1"]),
        "b1": np.zeros(s["b1"]),
        "w2": rng.normal(0, 1.0 / np.sqrt(config.hidden), s["w2"]),
        "b2": np.zeros(s["b2"]),
        "w3": np.zeros(s["w3"]) if zero_out else rng.normal(0, 1.0 / np.sqrt(config.hidden), s["w3"]),
        "b3": np.zeros(s["b3"]),
    }
    return ModelParams(config, {k: v.astype(dtype) for k, v in arrays.items()})


# ---------------------------------------------------------------------------
# Condition encoding
# ---------------------------------------------------------------------------

@dataclass
class EncodedConditions:
    """Token sequence ``[text ids | reference pixel tokens ...]``.

    ``text_ids`` holds the single NULL id for a dropped text condition and is
    empty for an empty prompt. Each entry of ``image_tokens`` is an (h*w, C+1)
    array of pixel tokens in row-major order.
    """

    text_ids: np.ndarray
    image_tokens: list[np.ndarray] = field(default_factory=list)
    image_shapes: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.text_ids) + sum(len(t) for t in self.image_tokens)

    def sequence(self) -> list[tuple[str, object]]:
        seq: list[tuple[str, object]] = [
            ("null" if i == NULL_TOKEN else "text", int(i)) for i in self.text_ids
        ]
        for r, toks in enumerate(self.image_tokens):
            seq.extend(("image", (r, tok)) for tok in toks)
        return seq


def _pad_reference(img: np.ndarray, channels: int) -> np.ndarray:
    if img.shape[0] == channels:
        return np.concatenate([img, np.ones((1,) + img.shape[1:], img.dtype)], axis=0)
    if img.shape[0] == channels + 1:
        return img
    raise InvalidArgument(
        f"reference has {img.shape[0]} channels; expected {channels} or {channels + 1}")


def encode_conditions(c: ConditionSet, channels: int = 3, vocab_size: int = VOCAB_SIZE) -> EncodedConditions:
    if len(c.images) > MAX_REFERENCES:
        raise InvalidArgument(f"at most {MAX_REFERENCES} references")
    if c.text is None:
        text_ids = np.array([vocab_size], dtype=np.int64)
    else:
        text_ids = np.array(c.text, dtype=np.int64)
        if text_ids.size and (text_ids.min() < 0 or text_ids.max() >= vocab_size):
            raise InvalidArgument("token id outside vocabulary")
    toks, shapes = [], []
    for img in c.images:
        ref = _pad_reference(np.asarray(img), channels)
        shapes.append(ref.shape[1:])
        toks.append(ref.reshape(ref.shape[0], -1).T)
    return EncodedConditions(text_ids, toks, shapes)


# ---------------------------------------------------------------------------
# Resolution-dependent buffers
# ---------------------------------------------------------------------------

_POS_CACHE: dict[tuple[int, int], np.ndarray] = {}
_GATHER_CACHE: dict[tuple[int, int, int, int], tuple[np.ndarray, np.ndarray]] = {}


def position_features(h: int, w: int) -> np.ndarray:
    key = (h, w)
    if key not in _POS_CACHE:
        ys = np.zeros(h) if h == 1 else np.linspace(-1.0, 1.0, h)
        xs = np.zeros(w) if w == 1 else np.linspace(-1.0, 1.0, w)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        yy, xx = yy.ravel(), xx.ravel()
        _POS_CACHE[key] = np.stack(
            [yy, xx, np.sin(np.pi * yy), np.cos(np.pi * yy), np.sin(np.pi * xx), np.cos(np.pi * xx)], axis=1)
    return _POS_CACHE[key]


def _gather(h: int, w: int, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices into an edge-padded (h+2, w+2) reference for each target pixel."""
    key = (h, w, H, W)
    if key not in _GATHER_CACHE:
        if H % h or W % w:
            raise InvalidArgument(f"reference {h}x{w} does not tile target {H}x{W}")
        fy, fx = H // h, W // w
        Y, X = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        y, x = Y // fy + 1, X // fx + 1
        idx = np.stack([((y + dy) * (w + 2) + (x + dx)).ravel() for dy, dx in _NEIGH], axis=1)
        off = np.stack([((Y % fy + 0.5) / fy - 0.5).ravel(), ((X % fx + 0.5) / fx - 0.5).ravel()], axis=1)
        _GATHER_CACHE[key] = (idx, off)
    return _GATHER_CACHE[key]


def reference_features(enc: EncodedConditions, H: int, W: int, ref_channels: int) -> np.ndarray:
    n = H * W
    out = np.zeros((n, 9 * ref_channels + 3))
    if not enc.image_tokens:
        return out
    for toks, (h, w) in zip(enc.image_tokens, enc.image_shapes):
        grid = toks.T.reshape(ref_channels, h, w).astype(np.float64)
        padded = np.pad(grid, ((0, 0), (1, 1), (1, 1)), mode="edge").reshape(ref_channels, -1)
        idx, off = _gather(h, w, H, W)
        neigh = padded[:, idx]  # (Cr, n, 9)
        out[:, :9 * ref_channels] += neigh.transpose(1, 0, 2).reshape(n, -1)
        out[:, 9 * ref_channels:9 * ref_channels + 2] += off
    k = len(enc.image_tokens)
    out[:, :-1] /= k
    out[:, -1] = k / MAX_REFERENCES
    return out


def time_features(t: float, k: int) -> np.ndarray:
    freqs = np.pi * 2.0 ** np.linspace(0.0, 5.0, k)
    return np.concatenate([[t], np.sin(freqs * t), np.cos(freqs * t)])


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class _Context:
    """Per-(sample, condition) inputs that do not depend on parameters."""

    static: np.ndarray     # (N, C + ref_dim) minus z, i.e. ref features
    pos: np.ndarray
    text_ids: np.ndarray


def prepare_context(params: ModelParams, c: ConditionSet, H: int, W: int) -> _Context:
    cfg = params.config
    enc = encode_conditions(c, cfg.channels, cfg.vocab_size)
    ref = reference_features(enc, H, W, cfg.ref_channels)
    return _Context(ref.astype(params.dtype), position_features(H, W).astype(params.dtype), enc.text_ids)


def _text_vector(params: ModelParams, ids: np.ndarray) -> np.ndarray:
    emb = params.arrays["embed"]
    if ids.size == 0:
        return np.zeros(emb.shape[1], emb.dtype)
    return emb[ids].mean(axis=0)


def precondition(t: float, data_std: float | None) -> tuple[float, float, float]:
    """(c_in, c_skip, c_out) for rectified flow with N(0, data_std^2) data."""
    if data_std is None:
        return 1.0, 0.0, 1.0
    s2 = data_std * data_std
    var_z = (1.0 - t) ** 2 * s2 + t * t
    return 1.0 / np.sqrt(var_z), (t - (1.0 - t) * s2) / var_z, data_std / np.sqrt(var_z)


def _forward(params: ModelParams, z: np.ndarray, t: float, ctx: _Context):
    cfg = params.config
    a = params.arrays
    C, H, W = z.shape
    n = H * W
    dt = params.dtype
    text = _text_vector(params, ctx.text_ids)
    tf = time_features(t, cfg.time_freqs).astype(dt)
    c_in, c_skip, c_out = (dt.type(v) for v in precondition(t, cfg.data_std))
    zt = z.reshape(C, n).T.astype(dt)
    x = np.concatenate([
        c_in * zt,
        ctx.static,
        np.broadcast_to(text, (n, text.size)),
        np.broadcast_to(tf, (n, tf.size)),
        ctx.pos,
    ], axis=1)
    a1 = x @ a["w1"] + a["b1"]
    s1 = _sigmoid(a1)
    h1 = a1 * s1
    a2 = h1 @ a["w2"] + a["b2"]
    s2 = _sigmoid(a2)
    h2 = a2 * s2
    out = c_skip * zt + c_out * (h2 @ a["w3"] + a["b3"])
    cache = (x, a1, s1, h1, a2, s2, h2, c_out)
    return out.T.reshape(C, H, W), cache


def _backward(params: ModelParams, cache, d_out: np.ndarray, ctx: _Context) -> dict[str, np.ndarray]:
    """Gradient of ``sum(d_out * forward)`` w.r.t. every parameter block."""
    cfg = params.config
    a = params.arrays
    x, a1, s1, h1, a2, s2, h2, c_out = cache
    C = d_out.shape[0]
    g_out = c_out * d_out.reshape(C, -1).T
    g = {
        "w3": h2.T @ g_out,
        "b3": g_out.sum(axis=0),
    }
    dh2 = g_out @ a["w3"].T
    da2 = dh2 * (s2 * (1.0 + a2 * (1.0 - s2)))
    g["w2"] = h1.T @ da2
    g["b2"] = da2.sum(axis=0)
    dh1 = da2 @ a["w2"].T
    da1 = dh1 * (s1 * (1.0 + a1 * (1.0 - s1)))
    g["w1"] = x.T @ da1
    g["b1"] = da1.sum(axis=0)
    lo = cfg.channels + cfg.ref_dim
    d_text = da1 @ a["w1"][lo:lo + cfg.embed_dim].T
    d_text = d_text.sum(axis=0)
    g_embed = np.zeros_like(a["embed"])
    ids = ctx.text_ids
    if ids.size:
        np.add.at(g_embed, ids, d_text / ids.size)
    g["embed"] = g_embed
    return g


def forward(params: ModelParams, z, t: float, c: ConditionSet | None = None) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim != 3 or z.shape[0] != params.config.channels:
        raise InvalidArgument(f"latent shape {z.shape} incompatible with {params.config.channels} channels")
    ctx = prepare_context(params, c or ConditionSet(), z.shape[1], z.shape[2])
    out, _ = _forward(params, z, float(t), ctx)
    return out.astype(z.dtype) if z.dtype != params.dtype else out


# ---------------------------------------------------------------------------
# Flow-matching loss
# ---------------------------------------------------------------------------

Batch = Sequence[tuple[np.ndarray, ConditionSet]]


def draw_noise(batch: Batch, key: tuple, shift: float = 1.0) -> list[tuple[float, np.ndarray]]:
    """Per-sample (t, eps) from streams addressed by ``(*key, index)``."""
    draws = []
    for i, (x0, _) in enumerate(batch):
        rng = stream(*key, i)
        t = sample_training_t(rng, shift)
        eps = rng.standard_normal(np.shape(x0))
        draws.append((t, eps))
    return draws


def _sample_terms(params: ModelParams, x0, c, t, eps, need_grad: bool):
    dt = params.dtype
    x0 = np.asarray(x0, dtype=dt)
    eps = np.asarray(eps, dtype=dt)
    zt = interpolate(x0, eps, t).astype(dt) if dt == np.float32 else (1.0 - t) * x0 + t * eps
    target = fm_target(x0, eps).astype(dt) if dt == np.float32 else eps - x0
    ctx = prepare_context(params, c, x0.shape[1], x0.shape[2])
    pred, cache = _forward(params, zt, t, ctx)
    resid = pred - target
    loss = float(np.sum(resid.astype(np.float64) ** 2))
    if not need_grad:
        return loss, None
    return loss, _backward(params, cache, 2.0 * resid, ctx)


def tree_sum(items: list):
    """Pairwise reduction with fixed arity, so the summation order never varies."""
    if not items:
        raise InvalidArgument("nothing to reduce")
    while len(items) > 1:
        nxt = []
        for i in range(0, len(items) - 1, 2):
            a, b = items[i], items[i + 1]
            nxt.append({k: a[k] + b[k] for k in a} if isinstance(a, dict) else a + b)
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def fm_loss(params: ModelParams, batch: Batch, key: tuple = (0,), shift: float = 1.0,
            draws: list | None = None) -> float:
    """Mean over the batch of the squared velocity error."""
    if not batch:
        raise InvalidArgument("empty batch")
    draws = draws if draws is not None else draw_noise(batch, key, shift)
    losses = [_sample_terms(params, x0, c, t, eps, False)[0] for (x0, c), (t, eps) in zip(batch, draws)]
    return tree_sum(losses) / len(batch)


def loss_and_grad(params: ModelParams, batch: Batch, key: tuple = (0,), shift: float = 1.0,
                  draws: list | None = None) -> tuple[float, dict[str, np.ndarray]]:
    if not batch:
        raise InvalidArgument("empty batch")
    draws = draws if draws is not None else draw_noise(batch, key, shift)
    terms = [_sample_terms(params, x0, c, t, eps, True) for (x0, c), (t, eps) in zip(batch, draws)]
    n = len(batch)
    loss = tree_sum([l for l, _ in terms]) / n
    grads = tree_sum([g for _, g in terms])
    return loss, {k: (v / n).astype(params.dtype) for k, v in grads.items()}


def grad(params: ModelParams, batch: Batch, key: tuple = (0,), shift: float = 1.0) -> dict[str, np.ndarray]:
    return loss_and_grad(params, batch, key, shift)[1]


# ---------------------------------------------------------------------------
# As a velocity field
# ---------------------------------------------------------------------------

class ModelField(VelocityField):
    """Evaluates a parameter set; reference features are cached per condition."""

    def __init__(self, params: ModelParams):
        super().__init__()
        self.params = params
        self._cache: list[tuple[tuple, tuple, _Context]] = []

    def _context(self, c: ConditionSet, H: int, W: int) -> _Context:
        for imgs, key, ctx in self._cache:
            if key == (H, W, c.text) and len(imgs) == len(c.images) and all(
                    a is b for a, b in zip(imgs, c.images)):
                return ctx
        ctx = prepare_context(self.params, c, H, W)
        self._cache.append((c.images, (H, W, c.text), ctx))
        if len(self._cache) > 8:
            self._cache.pop(0)
        return ctx

    def _evaluate(self, z, t, c):
        c = c or ConditionSet()
        if z.ndim != 3 or z.shape[0] != self.params.config.channels:
            raise InvalidArgument(f"latent shape {z.shape} incompatible with model")
        out, _ = _forward(self.params, z, float(t), self._context(c, z.shape[1], z.shape[2]))
        return out.astype(z.dtype)
