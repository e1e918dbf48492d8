"""Language-conditioned channel-selection fusion and contrastive alignment.

The mixer projects a pooled language vector to a per-channel selector,
multiplies it into the vision feature map, post-processes both the
selected and the plain vision path with searchable blocks and sums them:

    mixed = select_block(selector * f_v) + vision_block(f_v)

The selector is the raw linear projection (no squashing nonlinearity),
so scaling a selector channel scales the pre-block selected feature
exactly. With a zero language vector the selected path reduces to
select_block(bias * f_v).

The alignment head pairs an ROI-pooled visual embedding of the vision
path with the projected language embedding across a batch and applies a
symmetric cross entropy over the cosine-similarity logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mixtrack import autodiff as ad
from mixtrack.autodiff import Tensor

DEFAULT_ROI_GRID = 4


def identity_block(x):
    return x


@dataclass
class MixerParams:
    """Projection weights plus the two searched-block slots of one mixer.

    Slot order is fixed: slot 0 processes the selected (language-mixed)
    path, slot 1 the plain vision path. Each slot holds one callable per
    search-space candidate.
    """

    weight: Tensor
    bias: Tensor
    select_blocks: list
    vision_blocks: list
    channels: int
    name: str = "mixer"

    @property
    def rep_len(self):
        return self.weight.data.shape[0]


def make_mixer_params(rep_len, channels, rng=None, select_blocks=None, vision_blocks=None, name="mixer"):
    """Fresh mixer parameters: fan-in uniform weights, zero bias, identity blocks by default."""
    if rng is None:
        w = np.zeros((rep_len, channels))
    else:
        limit = np.sqrt(3.0 / rep_len)
        w = rng.uniform(-limit, limit, (rep_len, channels))
    return MixerParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(channels), requires_grad=True),
        select_blocks=list(select_blocks) if select_blocks else [identity_block],
        vision_blocks=list(vision_blocks) if vision_blocks else [identity_block],
        channels=channels,
        name=name,
    )


def _as_language_tensor(f_l):
    if isinstance(f_l, Tensor):
        return f_l
    vector = getattr(f_l, "vector", f_l)
    return Tensor(np.asarray(vector, dtype=np.float64))


def selector(f_l, p):
    """Aligned language embedding: Linear(f_l) of length C (also the e_l of alignment)."""
    v = _as_language_tensor(f_l)
    if v.data.shape != (p.rep_len,):
        raise ad.ShapeError(
            f"{p.name}: language representation has shape {v.data.shape}, "
            f"projection expects ({p.rep_len},)"
        )
    return ad.add(ad.vecmat(v, p.weight), p.bias)


def _check_fv(f_v, p):
    if f_v.data.ndim != 3 or f_v.data.shape[2] != p.channels:
        raise ad.ShapeError(
            f"{p.name}: vision feature has shape {f_v.data.shape}, expected H x W x {p.channels}"
        )


def mix(f_l, f_v, p, choice=(0, 0), return_vision_path=False):
    """Fused map: select_block(selector * f_v) + vision_block(f_v)."""
    f_v = f_v if isinstance(f_v, Tensor) else Tensor(f_v)
    _check_fv(f_v, p)
    sel = selector(f_l, p)
    selected = p.select_blocks[choice[0]](ad.hadamard_select(sel, f_v))
    vision = p.vision_blocks[choice[1]](f_v)
    out = ad.add(selected, vision)
    if return_vision_path:
        return out, vision
    return out


def mix_no_residual(f_l, f_v, p, choice=(0, 0)):
    """Ablation variant: the selected path only, no vision residual."""
    f_v = f_v if isinstance(f_v, Tensor) else Tensor(f_v)
    _check_fv(f_v, p)
    sel = selector(f_l, p)
    return p.select_blocks[choice[0]](ad.hadamard_select(sel, f_v))


def roi_embed(fmap, box, grid=DEFAULT_ROI_GRID):
    """Mean of a bilinear grid sampled inside a normalized [cx, cy, w, h] box.

    Accepts a Tensor (differentiable, returns a Tensor) or a plain array
    (returns an array).
    """
    if isinstance(fmap, Tensor):
        return ad.roi_pool(fmap, box, grid)
    with ad.no_grad():
        return ad.roi_pool(Tensor(np.asarray(fmap, dtype=np.float64)), box, grid).data


@dataclass
class ContrastiveBatch:
    """Row-aligned visual / language embedding groups; row i is a positive pair."""

    visual: Tensor
    language: Tensor

    def __post_init__(self):
        if self.visual.data.shape != self.language.data.shape or self.visual.data.ndim != 2:
            raise ad.ShapeError(
                f"contrastive batch shapes differ: {self.visual.data.shape} vs {self.language.data.shape}"
            )

    @property
    def size(self):
        return self.visual.data.shape[0]


def contrastive_loss(batch, temperature=1.0):
    """Symmetric cross entropy over cosine logits with diagonal labels.

    logits = cos(visual, language) / temperature; the loss averages the
    row-wise and column-wise cross entropies against labels 0..b-1.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = ad.scale(ad.cosine_similarity_matrix(batch.visual, batch.language), 1.0 / temperature)
    labels = list(range(batch.size))
    fwd = ad.softmax_cross_entropy_rows(logits, labels)
    bwd = ad.softmax_cross_entropy_rows(ad.transpose2d(logits), labels)
    return ad.scale(ad.add(fwd, bwd), 0.5)


BRANCHES = ("template", "search")


@dataclass(frozen=True)
class ContrastiveWiring:
    """Which (branch, stage) sites contribute an alignment term during training."""

    stage_flags: tuple
    branch_flags: dict
    weight: float = 0.1
    temperature: float = 1.0

    def sites(self):
        return [
            (branch, stage)
            for branch in BRANCHES
            if self.branch_flags.get(branch, False)
            for stage, on in enumerate(self.stage_flags)
            if on
        ]

    @property
    def active(self):
        return self.weight > 0 and len(self.sites()) > 0


def attach_contrastive(stage_mask, branch_mask, n_stages, weight=0.1, temperature=1.0):
    """Validate and freeze the alignment wiring against a stage layout."""
    stage_flags = tuple(bool(x) for x in stage_mask)
    if len(stage_flags) != n_stages:
        raise ValueError(f"stage mask has {len(stage_flags)} entries for a {n_stages}-stage backbone")
    unknown = set(branch_mask) - set(BRANCHES)
    if unknown:
        raise ValueError(f"unknown branches in mask: {sorted(unknown)}")
    return ContrastiveWiring(
        stage_flags=stage_flags,
        branch_flags={b: bool(branch_mask.get(b, False)) for b in BRANCHES},
        weight=float(weight),
        temperature=float(temperature),
    )


def default_wiring(n_stages, weight=0.1, temperature=1.0):
    """Alignment at the first backbone stage, both branches."""
    mask = [False] * n_stages
    mask[0] = True
    return attach_contrastive(mask, {"template": True, "search": True}, n_stages, weight, temperature)
