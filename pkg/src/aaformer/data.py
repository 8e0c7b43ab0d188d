"""Procedural person-like images with known identities.

Each identity has a fixed color per body band (head, torso, legs, shoes) and a
"carried object" block at a stable place beside the body. Images add jitter,
noise, an optional horizontal flip and an optional occluder. Every pixel is a
pure function of (seed, identity, image index).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.70, 0.20],
        [0.15, 0.25, 0.90],
        [0.95, 0.85, 0.10],
        [0.60, 0.15, 0.75],
        [0.05, 0.75, 0.80],
        [0.95, 0.55, 0.10],
        [0.10, 0.10, 0.10],
    ]
)
# (top, bottom) as fractions of the body height
BODY_BANDS = ((0.0, 0.17), (0.17, 0.52), (0.52, 0.90), (0.90, 1.0))


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    num_identities: int = 8
    num_test_identities: int = 8
    images_per_identity: int = 8
    query_per_identity: int = 2
    height: int = 48
    width: int = 24
    channels: int = 3
    noise: float = 0.04
    jitter: int = 2
    flip_prob: float = 0.5
    occluder_prob: float = 0.2

    def validate(self) -> None:
        if self.num_identities < 2:
            raise DatasetError("need at least 2 training identities")
        if self.images_per_identity < 2:
            raise DatasetError("need at least 2 images per identity")
        if self.num_test_identities and not 1 <= self.query_per_identity < self.images_per_identity:
            raise DatasetError("query_per_identity must leave at least one gallery image")
        total = self.num_identities + self.num_test_identities
        if total > len(PALETTE) ** len(BODY_BANDS):
            raise DatasetError(f"at most {len(PALETTE) ** len(BODY_BANDS)} identities")
        if self.channels not in (1, 3):
            raise DatasetError("channels must be 1 or 3")
        if self.height < 16 or self.width < 8:
            raise DatasetError("images must be at least 16x8")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DatasetError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class IdentityRecipe:
    part_colors: np.ndarray  # [4, 3]
    object_color: np.ndarray  # [3]
    object_side: int  # 0 left of body, 1 right
    object_top: float  # fraction of height
    object_height: float


@lru_cache(maxsize=16)
def _color_codes(seed: int) -> np.ndarray:
    n_codes = len(PALETTE) ** len(BODY_BANDS)
    return np.random.default_rng([seed, 0]).permutation(n_codes)


def identity_recipe(seed: int, identity: int) -> IdentityRecipe:
    code = int(_color_codes(seed)[identity])
    digits = []
    for _ in BODY_BANDS:
        code, d = divmod(code, len(PALETTE))
        digits.append(d)
    rng = np.random.default_rng([seed, 1, identity])
    return IdentityRecipe(
        part_colors=PALETTE[digits],
        object_color=PALETTE[rng.integers(len(PALETTE))],
        object_side=int(rng.integers(2)),
        object_top=float(rng.uniform(0.25, 0.6)),
        object_height=float(rng.uniform(0.15, 0.3)),
    )


def render_image(spec: DatasetSpec, identity: int, index: int) -> np.ndarray:
    """Render one [H, W, C] image in [0, 1]."""
    H, W = spec.height, spec.width
    recipe = identity_recipe(spec.seed, identity)
    rng = np.random.default_rng([spec.seed, 2, identity, index])

    img = np.empty((H, W, 3))
    img[:] = 0.5 + rng.uniform(-0.08, 0.08)
    dy, dx = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
    top, bottom = int(0.06 * H) + dy, int(0.97 * H) + dy
    left, right = int(0.3 * W) + dx, int(0.7 * W) + dx
    body_h = bottom - top
    for color, (a, b) in zip(recipe.part_colors, BODY_BANDS):
        r0, r1 = top + int(round(a * body_h)), top + int(round(b * body_h))
        img[max(r0, 0):max(r1, 0), max(left, 0):right] = color

    ow = max(2, int(0.22 * W))
    o0 = top + int(recipe.object_top * body_h)
    o1 = o0 + max(2, int(recipe.object_height * H))
    if recipe.object_side == 0:
        c0, c1 = max(left - ow, 0), left
    else:
        c0, c1 = right, min(right + ow, W)
    img[max(o0, 0):o1, c0:c1] = recipe.object_color

    flip = rng.random() < spec.flip_prob
    occlude = rng.random() < spec.occluder_prob
    if occlude:
        oh, ow2 = rng.integers(H // 6, H // 3 + 1), rng.integers(W // 4, W // 2 + 1)
        y, x = rng.integers(0, H - oh + 1), rng.integers(0, W - ow2 + 1)
        img[y:y + oh, x:x + ow2] = rng.uniform(0.0, 1.0)
    img += rng.normal(0.0, spec.noise, size=img.shape)
    if flip:
        img = img[:, ::-1]
    img = np.clip(img, 0.0, 1.0)
    if spec.channels == 1:
        img = img.mean(axis=-1, keepdims=True)
    return np.ascontiguousarray(img)


@dataclass
class Split:
    images: np.ndarray  # [M, H, W, C]
    labels: np.ndarray  # [M] identity ids
    index: np.ndarray  # [M] image index within the identity

    def __len__(self) -> int:
        return len(self.labels)


class SyntheticDataset:
    """Training identities 0..n-1; held-out identities n..n+m-1 split into query and gallery."""

    def __init__(self, spec: DatasetSpec):
        spec.validate()
        self.spec = spec
        self.train = self._split(range(spec.num_identities), range(spec.images_per_identity))
        test_ids = range(spec.num_identities, spec.num_identities + spec.num_test_identities)
        self.query = self._split(test_ids, range(spec.query_per_identity))
        self.gallery = self._split(test_ids, range(spec.query_per_identity, spec.images_per_identity))

    def _split(self, ids, idxs) -> Split:
        ids, idxs = list(ids), list(idxs)
        shape = (0, self.spec.height, self.spec.width, self.spec.channels)
        if not ids or not idxs:
            return Split(np.zeros(shape), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        images = np.stack([render_image(self.spec, i, k) for i in ids for k in idxs])
        labels = np.array([i for i in ids for _ in idxs], dtype=np.int64)
        index = np.array([k for _ in ids for k in idxs], dtype=np.int64)
        return Split(images, labels, index)

    def by_identity(self) -> dict[int, np.ndarray]:
        """Training-set row indices grouped per identity."""
        return {int(i): np.flatnonzero(self.train.labels == i) for i in np.unique(self.train.labels)}


def generate_dataset(spec: DatasetSpec | None = None, **overrides) -> SyntheticDataset:
    spec = spec or DatasetSpec()
    if overrides:
        spec = DatasetSpec(**{**spec.to_dict(), **overrides})
    return SyntheticDataset(spec)
