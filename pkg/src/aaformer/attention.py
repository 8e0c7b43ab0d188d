"""Multi-head self-attention and the auto-aligned variant for part tokens."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .sinkhorn import (
    AssignmentMask,
    TransportPlan,
    entropic_transport,
    nearest_neighbor_assignment,
    repair_empty,
    round_assignment,
    stripe_assignment,
)
from .tensor import Tensor

ASSIGNMENT_MODES = ("ot", "nn", "stripes")


@dataclass
class AttentionProjections:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int
    b_o: Tensor | None = None

    def __post_init__(self):
        D = self.w_q.shape[0]
        if D % self.heads:
            raise T.DimensionError(f"embed dim {D} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[0] // self.heads


@dataclass(frozen=True)
class TokenLayout:
    """Sequence index map: 0 is CLS, then part tokens grouped by set, then patches."""

    granularity_sets: tuple[int, ...]
    num_patches: int

    @property
    def num_parts(self) -> int:
        return sum(self.granularity_sets)

    @property
    def length(self) -> int:
        return 1 + self.num_parts + self.num_patches

    @property
    def part_slice(self) -> slice:
        return slice(1, 1 + self.num_parts)

    @property
    def patch_slice(self) -> slice:
        return slice(1 + self.num_parts, self.length)

    def set_slices(self) -> list[slice]:
        """Slices into the part-token axis (0-based) for each granularity set."""
        out, start = [], 0
        for g in self.granularity_sets:
            out.append(slice(start, start + g))
            start += g
        return out


@dataclass
class LayerTrace:
    """What one auto-aligned layer decided, per granularity set.

    Arrays carry the layer input's leading axes followed by the head axis.
    ``part_weights`` holds each part token's attention over the patches
    ([..., h, P, N], zero outside its subset).
    """

    granularity_sets: tuple[int, ...]
    similarities: list[np.ndarray] = field(default_factory=list)
    plans: list[TransportPlan | None] = field(default_factory=list)
    masks: list[AssignmentMask] = field(default_factory=list)
    part_weights: np.ndarray | None = None

    @property
    def repairs(self) -> list[tuple[int, ...]]:
        """(set, leading index..., head, part) for every empty-subset repair."""
        return [(s,) + r for s, m in enumerate(self.masks) for r in m.repairs]

    def membership(self) -> np.ndarray:
        return np.concatenate([m.membership() for m in self.masks], axis=-2)


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, D = x.shape
    return x.reshape(*lead, L, heads, D // heads).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, L, d = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, L, h * d)


def _project_out(heads_out: Tensor, proj: AttentionProjections) -> Tensor:
    out = merge_heads(heads_out) @ proj.w_o
    return out if proj.b_o is None else out + proj.b_o


def _qkv(z: Tensor, proj: AttentionProjections) -> tuple[Tensor, Tensor, Tensor]:
    return (
        split_heads(z @ proj.w_q, proj.heads),
        split_heads(z @ proj.w_k, proj.heads),
        split_heads(z @ proj.w_v, proj.heads),
    )


def self_attention_heads(z: Tensor, proj: AttentionProjections) -> tuple[Tensor, Tensor]:
    """Per-head softmax(Q K^T / sqrt(d)) V over the full sequence, before W_O.

    Returns (head outputs [..., h, L, d], attention weights [..., h, L, L]).
    """
    q, k, v = _qkv(z, proj)
    scores = (q @ k.mT) * (1.0 / np.sqrt(proj.head_dim))
    w = T.softmax_rows(scores)
    return w @ v, w


def multi_head_self_attention(z: Tensor, proj: AttentionProjections) -> Tensor:
    if z.ndim < 2 or z.shape[-2] < 1:
        raise T.DimensionError(f"expected [..., L, D] input, got {z.shape}")
    heads_out, _ = self_attention_heads(z, proj)
    return _project_out(heads_out, proj)


def assign_patches(q_parts: np.ndarray, k_patches: np.ndarray, layout: TokenLayout, cfg) -> LayerTrace:
    """Cluster patch keys onto part-token queries, one independent problem per set.

    ``q_parts`` is [..., h, P, d], ``k_patches`` is [..., h, N, d]. The
    similarity is the raw inner product; epsilon absorbs its scale.
    """
    trace = LayerTrace(tuple(layout.granularity_sets))
    lead = k_patches.shape[:-2]
    N = k_patches.shape[-2]
    for sl in layout.set_slices():
        sim = q_parts[..., sl, :] @ np.swapaxes(k_patches, -1, -2)
        plan = None
        if cfg.assignment == "ot":
            plan = entropic_transport(sim, cfg.epsilon, cfg.sinkhorn_iters)
            mask = round_assignment(plan, cfg.rounding)
            mass = plan.values
        elif cfg.assignment == "nn":
            mask = nearest_neighbor_assignment(sim)
            mass = sim
        elif cfg.assignment == "stripes":
            mask = stripe_assignment(sl.stop - sl.start, N, lead)
            mass = np.zeros(sim.shape)
        else:
            raise ValueError(f"unknown assignment mode {cfg.assignment!r}")
        trace.similarities.append(sim)
        trace.plans.append(plan)
        trace.masks.append(repair_empty(mask, mass))
    return trace


def aligned_attention_heads(
    z: Tensor,
    proj: AttentionProjections,
    layout: TokenLayout,
    cfg,
    membership: np.ndarray | None = None,
) -> tuple[Tensor, LayerTrace | None]:
    """Head outputs (before W_O) with part-token rows restricted to their subsets.

    CLS and patch rows attend to the whole sequence. Part token p attends only
    to the patch keys in its subset. ``membership`` ([..., h, P, N] bool)
    bypasses the assignment step; the trace is then None.
    """
    if z.shape[-2] != layout.length:
        raise T.DimensionError(f"sequence length {z.shape[-2]} != layout length {layout.length}")
    q, k, v = _qkv(z, proj)
    scores = (q @ k.mT) * (1.0 / np.sqrt(proj.head_dim))

    trace = None
    if membership is None:
        trace = assign_patches(
            q.data[..., layout.part_slice, :], k.data[..., layout.patch_slice, :], layout, cfg
        )
        membership = trace.membership()
    mask = np.ones(scores.shape, dtype=bool)
    mask[..., layout.part_slice, :] = False
    mask[..., layout.part_slice, layout.patch_slice] = membership
    w = T.softmax_rows(scores, mask)
    if trace is not None:
        trace.part_weights = w.data[..., layout.part_slice, layout.patch_slice].copy()
    return w @ v, trace


def auto_aligned_attention(
    z: Tensor,
    proj: AttentionProjections,
    layout: TokenLayout,
    cfg,
    membership: np.ndarray | None = None,
) -> tuple[Tensor, LayerTrace | None]:
    heads_out, trace = aligned_attention_heads(z, proj, layout, cfg, membership)
    return _project_out(heads_out, proj), trace


@dataclass
class LayerParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: AttentionProjections
    ln2_gamma: Tensor
    ln2_beta: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


def mlp(x: Tensor, p: LayerParams) -> Tensor:
    return T.gelu(x @ p.fc1_w + p.fc1_b) @ p.fc2_w + p.fc2_b


def transformer_layer(
    z: Tensor,
    params: LayerParams,
    mode: str = "MAA",
    layout: TokenLayout | None = None,
    cfg=None,
    membership: np.ndarray | None = None,
    ln_eps: float = 1e-6,
) -> tuple[Tensor, LayerTrace | None]:
    """Pre-norm residual layer: z + Attn(LN(z)), then + MLP(LN(.))."""
    h = T.layer_norm(z, params.ln1_gamma, params.ln1_beta, ln_eps)
    trace = None
    if mode == "MSA":
        attn = multi_head_self_attention(h, params.attn)
    elif mode == "MAA":
        attn, trace = auto_aligned_attention(h, params.attn, layout, cfg, membership)
    else:
        raise ValueError(f"unknown layer mode {mode!r}")
    z = z + attn
    z = z + mlp(T.layer_norm(z, params.ln2_gamma, params.ln2_beta, ln_eps), params)
    return z, trace
