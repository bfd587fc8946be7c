"""Procedural arrow sprites, their prompt vocabulary and dataset generation.

Images are 16x16 RGB. A 7x7 arrow glyph sits at the centre (plus a jitter of
up to one pixel), drawn in one of six colours over a dark gray background.
Striped objects alternate image rows between the base colour and a lighter
tint. Identity is (colour, texture); action is the arrow's pose.

All randomness goes through ``numpy.random.default_rng`` (PCG64).
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.3, 0.3),
    "green": (0.3, 0.9, 0.3),
    "blue": (0.4, 0.55, 1.0),
    "yellow": (0.95, 0.9, 0.2),
    "magenta": (0.95, 0.4, 0.95),
    "cyan": (0.3, 0.9, 0.95),
}
TEXTURES = ("solid", "striped")
POSES = ("up", "right", "down", "left")
BACKGROUNDS = (0.05, 0.15, 0.25)
JITTERS = (-1, 0, 1)
SHAPE_WORD = "arrow"

IMAGE_SIZE = 16
GLYPH = 7
GLYPH_ORIGIN = (IMAGE_SIZE - GLYPH) // 2
TINT_MIX = 0.5

NULL_ID = 0
VOCAB: tuple[str, ...] = ("<null>", *COLORS, *TEXTURES, SHAPE_WORD, *POSES)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

_ARROW_UP = np.array(
    [
        [0, 0, 0, 1, 0, 0, 0],
        [0, 0, 1, 1, 1, 0, 0],
        [0, 1, 1, 1, 1, 1, 0],
        [1, 1, 1, 1, 1, 1, 1],
        [0, 0, 1, 1, 1, 0, 0],
        [0, 0, 1, 1, 1, 0, 0],
        [0, 0, 1, 1, 1, 0, 0],
    ],
    dtype=bool,
)


class PromptError(ValueError):
    pass


def glyph(pose: str) -> np.ndarray:
    """7x7 boolean arrow template pointing in ``pose``."""
    # np.rot90 turns counter-clockwise, so k quarter-turns clockwise is -k.
    return np.rot90(_ARROW_UP, k=-POSES.index(pose)).copy()


@dataclass(frozen=True)
class SceneSpec:
    color: str
    texture: str
    pose: str
    background: float
    jitter: tuple[int, int]

    def __post_init__(self) -> None:
        if (
            self.color not in COLORS
            or self.texture not in TEXTURES
            or self.pose not in POSES
            or self.background not in BACKGROUNDS
            or any(j not in JITTERS for j in self.jitter)
        ):
            raise ValueError(f"scene attribute out of domain: {self}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["jitter"] = list(self.jitter)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls(d["color"], d["texture"], d["pose"], d["background"], tuple(d["jitter"]))

    def with_pose(self, pose: str) -> "SceneSpec":
        return SceneSpec(self.color, self.texture, pose, self.background, self.jitter)

    def with_color(self, color: str) -> "SceneSpec":
        return SceneSpec(color, self.texture, self.pose, self.background, self.jitter)


def all_identities() -> list[tuple[str, str]]:
    return list(itertools.product(COLORS, TEXTURES))


def sample_scene(rng_seed: int | np.random.Generator) -> SceneSpec:
    """Uniform draw from the attribute product space."""
    rng = np.random.default_rng(rng_seed)
    colors = list(COLORS)
    return SceneSpec(
        color=colors[rng.integers(len(colors))],
        texture=TEXTURES[rng.integers(len(TEXTURES))],
        pose=POSES[rng.integers(len(POSES))],
        background=BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
        jitter=(int(JITTERS[rng.integers(3)]), int(JITTERS[rng.integers(3)])),
    )


def object_mask(s: SceneSpec) -> np.ndarray:
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    y0 = GLYPH_ORIGIN + s.jitter[0]
    x0 = GLYPH_ORIGIN + s.jitter[1]
    mask[y0 : y0 + GLYPH, x0 : x0 + GLYPH] = glyph(s.pose)
    return mask


def tint(color: str) -> np.ndarray:
    base = np.asarray(COLORS[color])
    return base + TINT_MIX * (1.0 - base)


def render_unit(s: SceneSpec) -> np.ndarray:
    """Render to float64 ``[16, 16, 3]`` in [0, 1]."""
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), s.background, dtype=np.float64)
    mask = object_mask(s)
    img[mask] = COLORS[s.color]
    if s.texture == "striped":
        rows = np.zeros_like(mask)
        rows[1::2] = True
        img[mask & rows] = tint(s.color)
    return img


def render_scene(s: SceneSpec) -> np.ndarray:
    """Render to float32 ``[16, 16, 3]`` in [-1, 1]."""
    return (render_unit(s) * 2.0 - 1.0).astype(np.float32)


@dataclass(frozen=True)
class PromptTokens:
    color: int
    texture: int
    shape: int
    pose: int

    def ids(self) -> list[int]:
        """Row order used by the embedding: null, colour, texture, shape, pose."""
        return [NULL_ID, self.color, self.texture, self.shape, self.pose]

    def words(self) -> list[str]:
        return [VOCAB[i] for i in (self.color, self.texture, self.shape, self.pose)]

    def text(self) -> str:
        return " ".join(self.words())

    def with_pose(self, pose: str) -> "PromptTokens":
        return PromptTokens(self.color, self.texture, self.shape, TOKEN_ID[pose])


NULL_PROMPT = PromptTokens(NULL_ID, NULL_ID, NULL_ID, NULL_ID)


def tokens_for(s: SceneSpec) -> PromptTokens:
    return PromptTokens(TOKEN_ID[s.color], TOKEN_ID[s.texture], TOKEN_ID[SHAPE_WORD], TOKEN_ID[s.pose])


def parse_prompt(text: str) -> PromptTokens:
    """Parse ``"<color> <texture> arrow <pose>"``; unknown or misplaced words are errors."""
    words = text.split()
    if len(words) != 4:
        raise PromptError(f"prompt needs 4 words (color texture arrow pose), got {text!r}")
    color, texture, shape, pose = words
    for word, domain, slot in (
        (color, COLORS, "color"),
        (texture, TEXTURES, "texture"),
        (shape, (SHAPE_WORD,), "shape"),
        (pose, POSES, "pose"),
    ):
        if word not in domain:
            raise PromptError(f"unknown {slot} word {word!r}")
    return PromptTokens(TOKEN_ID[color], TOKEN_ID[texture], TOKEN_ID[shape], TOKEN_ID[pose])


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    tokens: PromptTokens
    spec: SceneSpec


def gen_dataset(n: int, seed: int) -> list[Sample]:
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = sample_scene(rng)
        out.append(Sample(render_scene(s), tokens_for(s), s))
    return out
