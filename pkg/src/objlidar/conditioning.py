"""Text, box and timestep embeddings that condition the object denoiser."""
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MissingEmbeddingError, ValidationError

PROMPT_PREFIX = "An object from class"
TEXT_DIM = 64
FOURIER_FREQS = 8
SCENE_HALF_EXTENT = 50.0
SIZE_SCALE = 10.0

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class TextPrompt:
    category: str
    description: str
    rendered: str


def format_prompt(category, description=""):
    if not category:
        raise ValidationError("prompt category must be non-empty")
    description = description.strip()
    if description:
        rendered = f"{PROMPT_PREFIX} {category}, {description}."
    else:
        rendered = f"{PROMPT_PREFIX} {category}."
    return TextPrompt(category, description, rendered)


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tokenize(text):
    return [tok for tok in re.split(r"[^0-9a-z]+", text.lower()) if tok]


class HashTextEncoder:
    """Deterministic stand-in for a pretrained sentence encoder.

    Each token seeds its own normal vector through its FNV-1a hash; the
    sentence embedding is the L2-normalized mean over tokens.
    """

    def __init__(self, dim=TEXT_DIM):
        self.dim = dim

    def token_vector(self, token):
        rng = np.random.default_rng(fnv1a_64(token.encode("utf-8")))
        return rng.standard_normal(self.dim)

    def encode(self, prompt):
        text = prompt.rendered if isinstance(prompt, TextPrompt) else str(prompt)
        tokens = tokenize(text)
        if not tokens:
            raise ValidationError(f"prompt {text!r} has no tokens")
        vec = np.mean([self.token_vector(t) for t in tokens], axis=0)
        return vec / np.linalg.norm(vec)


class FileTextEncoder:
    """Looks up precomputed embeddings.

    File format: one ``<prompt>\\t<space separated floats>`` per line, UTF-8.
    """

    def __init__(self, table):
        self.table = dict(table)
        dims = {v.shape[0] for v in self.table.values()}
        if len(dims) > 1:
            raise ConfigError(f"inconsistent embedding dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    @classmethod
    def load(cls, path):
        table = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                try:
                    prompt, values = line.split("\t", 1)
                    table[prompt] = np.array([float(x) for x in values.split()])
                except ValueError as exc:
                    raise ValidationError(f"{path}:{lineno}: malformed embedding line") from exc
        return cls(table)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for prompt, vec in self.table.items():
                fh.write(prompt + "\t" + " ".join(repr(float(x)) for x in vec) + "\n")

    def encode(self, prompt):
        text = prompt.rendered if isinstance(prompt, TextPrompt) else str(prompt)
        try:
            return self.table[text].copy()
        except KeyError:
            raise MissingEmbeddingError(text) from None


def encode_text(prompt, encoder=None):
    return (encoder or HashTextEncoder()).encode(prompt)


def normalize_box(box, half_extent=SCENE_HALF_EXTENT, size_scale=SIZE_SCALE):
    """Box fields scaled to [-1, 1]: centre by the scene half-extent, size by a size constant, yaw by pi."""
    if not (half_extent > 0 and size_scale > 0):
        raise ConfigError("box normalization constants must be positive")
    vals = box.as_array() / np.array([half_extent] * 3 + [size_scale] * 3 + [math.pi])
    return np.clip(vals, -1.0, 1.0)


def fourier_embed(box, half_extent=SCENE_HALF_EXTENT, size_scale=SIZE_SCALE, n_freqs=FOURIER_FREQS):
    """``[sin(2^k pi p), cos(2^k pi p)]`` for each normalized box scalar ``p``, k = 0..n_freqs-1."""
    p = normalize_box(box, half_extent, size_scale)
    ang = np.pi * p[:, None] * (2.0 ** np.arange(n_freqs))[None, :]
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(-1)


def condition_input(prompt, box, encoder=None, n_freqs=FOURIER_FREQS):
    """Concatenated ``[f_B ; f_T]`` ready for :func:`combine_conditions`."""
    return np.concatenate([fourier_embed(box, n_freqs=n_freqs), encode_text(prompt, encoder)])


def combine_conditions(f_box, f_text, weight, bias):
    """Affine map of the concatenated box and text embeddings.

    Works on numpy arrays; the autograd-aware variant lives in
    :mod:`objlidar.nn.object_denoiser`.
    """
    x = np.concatenate([np.asarray(f_box), np.asarray(f_text)], axis=-1)
    weight = np.asarray(weight)
    if weight.shape != (np.shape(bias)[0], x.shape[-1]):
        raise ConfigError(f"weight {weight.shape} incompatible with input {x.shape[-1]} and bias {np.shape(bias)}")
    return x @ weight.T + bias


def timestep_embedding(t, dim):
    """Sinusoidal embedding; ``t`` may be a scalar or an array of timesteps."""
    if dim % 2:
        raise ConfigError(f"timestep embedding dimension must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(0, dim, 2) / dim)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out
