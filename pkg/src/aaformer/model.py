"""The full network: patch embedding, token layout, stacked aligned layers, features."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .attention import (
    ASSIGNMENT_MODES,
    AttentionProjections,
    LayerParams,
    LayerTrace,
    TokenLayout,
    transformer_layer,
)
from .tensor import ParameterStore, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_h: int = 48
    image_w: int = 24
    channels: int = 3
    patch_size: int = 8
    stride: int = 8
    embed_dim: int = 64
    heads: int = 4
    layers: int = 4
    granularity_sets: tuple[int, ...] = (2, 3)
    epsilon: float = 0.05
    sinkhorn_iters: int = 3
    mlp_ratio: int = 4
    label_smoothing: float = 0.1
    triplet_margin: float = 0.3
    num_classes: int = 8
    assignment: str = "ot"
    rounding: str = "argmax"
    part_pos_embed: bool = False
    ln_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        self.granularity_sets = tuple(int(g) for g in self.granularity_sets)
        self.validate()

    def validate(self) -> None:
        I, s = self.patch_size, self.stride
        if not 0 < s <= I:
            raise ConfigError(f"stride must be in (0, patch_size], got {s}")
        if self.image_h < I or self.image_w < I:
            raise ConfigError("image smaller than one patch")
        if (self.image_h - I) % s or (self.image_w - I) % s:
            raise ConfigError(
                f"({self.image_h}-{I}) and ({self.image_w}-{I}) must both be divisible by stride {s}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not self.granularity_sets or any(g < 1 for g in self.granularity_sets):
            raise ConfigError("need at least one granularity set, each of positive size")
        if max(self.granularity_sets, default=0) > self.num_patches:
            raise ConfigError("a granularity set has more parts than there are patches")
        if self.assignment not in ASSIGNMENT_MODES:
            raise ConfigError(f"assignment must be one of {ASSIGNMENT_MODES}")
        if self.rounding not in ("argmax", "balanced"):
            raise ConfigError("rounding must be 'argmax' or 'balanced'")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.epsilon <= 0 or self.sinkhorn_iters < 1:
            raise ConfigError("epsilon must be > 0 and sinkhorn_iters >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        return (
            (self.image_h - self.patch_size) // self.stride + 1,
            (self.image_w - self.patch_size) // self.stride + 1,
        )

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def num_parts(self) -> int:
        return sum(self.granularity_sets)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout(self.granularity_sets, self.num_patches)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["granularity_sets"] = list(self.granularity_sets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def patchify(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """[..., H, W, C] -> [..., N, I*I*C], row-major over the patch grid.

    Each patch is flattened in (row, col, channel) order.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-3:] != (cfg.image_h, cfg.image_w, cfg.channels):
        raise ConfigError(f"image shape {image.shape[-3:]} does not match config")
    I, s = cfg.patch_size, cfg.stride
    win = sliding_window_view(image, (I, I), axis=(-3, -2))[..., ::s, ::s, :, :, :]
    # win: [..., rows, cols, C, I, I]
    win = np.moveaxis(win, -3, -1)
    rows, cols = cfg.grid
    return win.reshape(image.shape[:-3] + (rows * cols, I * I * cfg.channels))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParameterStore:
    """Truncated-normal weights (std cfg.init_std), zero biases, unit LN scales.

    Names are created in a fixed order so the draw sequence is reproducible.
    """
    D, P = cfg.embed_dim, cfg.num_parts
    H = cfg.mlp_ratio * D
    std = cfg.init_std
    store = ParameterStore()
    store.add("patch_embed.weight", _trunc_normal(rng, (cfg.patch_dim, D), std))
    store.add("patch_embed.bias", np.zeros(D))
    store.add("cls_token", _trunc_normal(rng, (1, D), std))
    store.add("part_tokens", _trunc_normal(rng, (P, D), std))
    n_pos = 1 + cfg.num_patches + (P if cfg.part_pos_embed else 0)
    store.add("pos_embed", _trunc_normal(rng, (n_pos, D), std))
    for i in range(cfg.layers):
        pre = f"blocks.{i:02d}."
        store.add(pre + "ln1.gamma", np.ones(D))
        store.add(pre + "ln1.beta", np.zeros(D))
        for w in ("w_q", "w_k", "w_v", "w_o"):
            store.add(pre + "attn." + w, _trunc_normal(rng, (D, D), std))
        store.add(pre + "attn.b_o", np.zeros(D))
        store.add(pre + "ln2.gamma", np.ones(D))
        store.add(pre + "ln2.beta", np.zeros(D))
        store.add(pre + "mlp.fc1_w", _trunc_normal(rng, (D, H), std))
        store.add(pre + "mlp.fc1_b", np.zeros(H))
        store.add(pre + "mlp.fc2_w", _trunc_normal(rng, (H, D), std))
        store.add(pre + "mlp.fc2_b", np.zeros(D))
    store.add("norm.gamma", np.ones(D))
    store.add("norm.beta", np.zeros(D))
    return store


def layer_params(store: ParameterStore, i: int, heads: int) -> LayerParams:
    pre = f"blocks.{i:02d}."
    g = lambda name: store[pre + name]  # noqa: E731
    return LayerParams(
        ln1_gamma=g("ln1.gamma"),
        ln1_beta=g("ln1.beta"),
        attn=AttentionProjections(
            g("attn.w_q"), g("attn.w_k"), g("attn.w_v"), g("attn.w_o"), heads, g("attn.b_o")
        ),
        ln2_gamma=g("ln2.gamma"),
        ln2_beta=g("ln2.beta"),
        fc1_w=g("mlp.fc1_w"),
        fc1_b=g("mlp.fc1_b"),
        fc2_w=g("mlp.fc2_w"),
        fc2_b=g("mlp.fc2_b"),
    )


@dataclass
class ModelOutput:
    cls: Tensor  # [..., D]
    part_tokens: Tensor  # [..., P, D]
    traces: list[LayerTrace | None] = field(default_factory=list)

    def descriptor(self) -> np.ndarray:
        return extract_descriptor(self)


def extract_descriptor(out: ModelOutput) -> np.ndarray:
    """concat(cls, part_1, ..., part_P) along the feature axis."""
    cls = out.cls.data
    parts = out.part_tokens.data
    flat = parts.reshape(parts.shape[:-2] + (-1,))
    return np.concatenate([cls, flat], axis=-1)


class AAformer:
    """Part-token vision transformer whose part attention follows online patch clustering.

    ``mode="MSA"`` runs plain self-attention in every layer (part tokens then
    see the whole sequence); ``"MAA"`` is the aligned network.
    """

    def __init__(self, cfg: ModelConfig, params: ParameterStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))

    def embed(self, images: np.ndarray) -> Tensor:
        cfg, p = self.cfg, self.params
        patches = Tensor(patchify(images, cfg))
        lead = patches.shape[:-2]
        D, P = cfg.embed_dim, cfg.num_parts
        x = patches @ p["patch_embed.weight"] + p["patch_embed.bias"]
        pos = p["pos_embed"]
        cls = p["cls_token"] + pos[0:1]
        parts = p["part_tokens"]
        if cfg.part_pos_embed:
            parts = parts + pos[1 + cfg.num_patches:]
        x = x + pos[1:1 + cfg.num_patches]
        head = T.concat([cls, parts], axis=0)
        head = T.broadcast_to(head, lead + (1 + P, D))
        return T.concat([head, x], axis=-2)

    def forward(self, images, mode: str = "MAA", fixed_assignments=None) -> ModelOutput:
        """Run the network on [..., H, W, C] images.

        ``fixed_assignments`` is an optional per-layer list of membership
        arrays ([..., h, P, N] bool) that replaces the clustering step; traces
        for such layers are None.
        """
        cfg = self.cfg
        z = self.embed(images)
        layout = cfg.layout
        traces = []
        for i in range(cfg.layers):
            fixed = None if fixed_assignments is None else fixed_assignments[i]
            z, trace = transformer_layer(
                z, layer_params(self.params, i, cfg.heads), mode, layout, cfg, fixed, cfg.ln_eps
            )
            traces.append(trace)
        z = T.layer_norm(z, self.params["norm.gamma"], self.params["norm.beta"], cfg.ln_eps)
        return ModelOutput(cls=z[..., 0, :], part_tokens=z[..., layout.part_slice, :], traces=traces)

    __call__ = forward

    def descriptors(self, images: np.ndarray, batch_size: int = 64, mode: str = "MAA") -> np.ndarray:
        out = []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(extract_descriptor(self.forward(images[start:start + batch_size], mode)))
        return np.concatenate(out, axis=0)
