"""Two-branch weight-sharing supernet and architecture codes.

Both input streams (template and search) own a full backbone: a
stride-2 stem, four stages of searchable blocks, a channel mixer after
every stage, and an output projection; total stride is 8. Every
searchable slot holds all four block candidates; a path code picks one
candidate per slot, independently per branch, so asymmetric
template/search architectures arise by construction.

A path code serializes as
``T:<s1>|...|<sn>/M:<m1>|...|<mn>;S:<s1>|.../M:<...>`` with
comma-separated digits 0-3 per group, stages separated by ``|``.
Flattened slot order per branch: backbone stage by stage, then the
mixer pairs (selected-path block first, vision-path block second).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from mixtrack import autodiff as ad
from mixtrack import blocks as bl
from mixtrack import fusion
from mixtrack.autodiff import Tensor
from mixtrack.io import rng_stream

N_CHOICES = bl.N_KINDS


@dataclass(frozen=True)
class StageLayout:
    """Backbone geometry: stem width, per-stage block counts / channels / strides."""

    stem_channels: int
    stage_counts: tuple
    stage_channels: tuple
    stage_strides: tuple
    out_channels: int
    name: str = "custom"

    def __post_init__(self):
        n = len(self.stage_counts)
        if len(self.stage_channels) != n or len(self.stage_strides) != n:
            raise ValueError("stage counts, channels and strides must have equal length")

    def validate_tracking_geometry(self):
        """Backbone stride must be 8 for the matching pipeline."""
        if self.total_stride != 8:
            raise ValueError(f"backbone stride must be 8, got {self.total_stride}")

    @property
    def n_stages(self):
        return len(self.stage_counts)

    @property
    def total_stride(self):
        return 2 * int(np.prod(self.stage_strides))


DESK = StageLayout(16, (2, 2, 2, 2), (16, 32, 64, 128), (2, 2, 1, 1), 64, "desk")
PAPER = StageLayout(16, (3, 3, 7, 3), (64, 160, 320, 640), (2, 2, 1, 1), 256, "paper")
MINI = StageLayout(8, (1, 1), (8, 16), (2, 2), 16, "mini")

LAYOUTS = {"desk": DESK, "paper": PAPER, "mini": MINI}


def slots_per_branch(layout):
    """Backbone slots plus two mixer slots per stage."""
    return sum(layout.stage_counts) + 2 * layout.n_stages


@dataclass(frozen=True)
class BranchCode:
    backbone: tuple  # tuple of per-stage tuples
    mixers: tuple  # tuple of per-stage (select, vision) pairs

    def flatten(self):
        flat = [c for stage in self.backbone for c in stage]
        flat += [c for pair in self.mixers for c in pair]
        return tuple(flat)


@dataclass(frozen=True)
class ArchCode:
    template: BranchCode
    search: BranchCode

    def flatten(self):
        return self.template.flatten() + self.search.flatten()

    def is_symmetric(self):
        return self.template == self.search

    def to_text(self):
        return ";".join(
            f"{tag}:{_branch_text(branch)}"
            for tag, branch in (("T", self.template), ("S", self.search))
        )

    @classmethod
    def from_flat(cls, flat, layout):
        per = slots_per_branch(layout)
        flat = tuple(int(c) for c in flat)
        if len(flat) != 2 * per:
            raise ValueError(f"flat code has {len(flat)} slots, layout needs {2 * per}")
        if any(c < 0 or c >= N_CHOICES for c in flat):
            raise ValueError(f"code digits must lie in [0, {N_CHOICES})")
        return cls(_branch_from_flat(flat[:per], layout), _branch_from_flat(flat[per:], layout))

    @classmethod
    def from_text(cls, text, layout):
        halves = text.strip().split(";")
        if len(halves) != 2 or not halves[0].startswith("T:") or not halves[1].startswith("S:"):
            raise ValueError(f"malformed code string: expected 'T:...;S:...', got {text!r}")
        return cls(
            _branch_from_text(halves[0][2:], layout),
            _branch_from_text(halves[1][2:], layout),
        )


def _branch_text(branch):
    stages = "|".join(",".join(str(c) for c in stage) for stage in branch.backbone)
    mixers = "|".join(",".join(str(c) for c in pair) for pair in branch.mixers)
    return f"{stages}/M:{mixers}"


def _branch_from_flat(flat, layout):
    backbone = []
    i = 0
    for count in layout.stage_counts:
        backbone.append(tuple(flat[i : i + count]))
        i += count
    mixers = tuple((flat[i + 2 * s], flat[i + 2 * s + 1]) for s in range(layout.n_stages))
    return BranchCode(tuple(backbone), mixers)


def _parse_group(group, expected, what):
    try:
        digits = tuple(int(t) for t in group.split(","))
    except ValueError:
        raise ValueError(f"malformed code group {group!r} in {what}") from None
    if len(digits) != expected or any(d < 0 or d >= N_CHOICES for d in digits):
        raise ValueError(f"malformed code group {group!r} in {what}: need {expected} digits in [0, {N_CHOICES})")
    return digits


def _branch_from_text(text, layout):
    parts = text.split("/M:")
    if len(parts) != 2:
        raise ValueError(f"malformed branch code {text!r}: missing '/M:' separator")
    stage_groups = parts[0].split("|")
    mixer_groups = parts[1].split("|")
    if len(stage_groups) != layout.n_stages or len(mixer_groups) != layout.n_stages:
        raise ValueError(
            f"branch code {text!r} has {len(stage_groups)} stage / {len(mixer_groups)} mixer groups, "
            f"layout needs {layout.n_stages}"
        )
    backbone = tuple(
        _parse_group(g, layout.stage_counts[i], f"stage {i + 1}") for i, g in enumerate(stage_groups)
    )
    mixers = tuple(_parse_group(g, 2, f"mixer {i + 1}") for i, g in enumerate(mixer_groups))
    return BranchCode(backbone, tuple((a, b) for a, b in mixers))


def sample_path(layout, rng):
    """Uniform i.i.d. choice per slot, independently for both branches."""
    flat = rng.integers(0, N_CHOICES, size=2 * slots_per_branch(layout))
    return ArchCode.from_flat(flat, layout)


# ---------------------------------------------------------------------------
# networks


class BranchNet:
    """One backbone stream: stem, searchable stages, per-stage mixers, output conv."""

    def __init__(self, layout, rep_len, rng, name):
        self.layout = layout
        self.name = name
        self.stem = bl.Chain(
            [
                bl.Depthwise(3, 3, 2, rng),
                bl.Norm(3),
                bl.Pointwise(3, layout.stem_channels, rng),
                bl.Norm(layout.stem_channels),
                bl.Relu(),
            ]
        )
        self.stages = []
        c_prev = layout.stem_channels
        for count, c, stride in zip(layout.stage_counts, layout.stage_channels, layout.stage_strides):
            slots = [bl.make_candidates(c_prev, c, stride, rng)]
            slots += [bl.make_candidates(c, c, 1, rng) for _ in range(count - 1)]
            self.stages.append(slots)
            c_prev = c
        self.mixers = []
        for i, c in enumerate(layout.stage_channels):
            self.mixers.append(
                fusion.make_mixer_params(
                    rep_len,
                    c,
                    rng=rng,
                    select_blocks=bl.make_candidates(c, c, 1, rng),
                    vision_blocks=bl.make_candidates(c, c, 1, rng),
                    name=f"{name}/mixer{i + 1}",
                )
            )
        self.out = bl.Chain(
            [bl.Pointwise(layout.stage_channels[-1], layout.out_channels, rng), bl.Norm(layout.out_channels), bl.Relu()]
        )

    def forward(self, code, image, f_l, residual=True, collect_stages=(), box=None):
        """Run the branch along one path; optionally collect per-stage alignment pairs."""
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
        if x.data.ndim != 3 or x.data.shape[2] != 3:
            raise ad.ShapeError(f"{self.name}: expected an H x W x 3 image, got {x.data.shape}")
        x = self.stem(x)
        pairs = {}
        for i, slots in enumerate(self.stages):
            for j, candidates in enumerate(slots):
                x = candidates[code.backbone[i][j]](x)
            mixer = self.mixers[i]
            choice = code.mixers[i]
            want_pair = i in collect_stages
            if residual:
                if want_pair:
                    x, vision = fusion.mix(f_l, x, mixer, choice, return_vision_path=True)
                else:
                    x = fusion.mix(f_l, x, mixer, choice)
            else:
                if want_pair:
                    vision = mixer.vision_blocks[choice[1]](x)
                x = fusion.mix_no_residual(f_l, x, mixer, choice)
            if want_pair:
                if box is None:
                    raise ValueError(f"{self.name}: alignment collection needs a target box")
                pairs[i] = (ad.roi_pool(vision, box), fusion.selector(f_l, mixer))
        return self.out(x), pairs

    def params(self):
        yield from self.stem.params(f"{self.name}/stem")
        for i, slots in enumerate(self.stages):
            for j, candidates in enumerate(slots):
                for c, block in enumerate(candidates):
                    yield from block.params(f"{self.name}/stage{i + 1}/block{j}/cand{c}")
        for i, mixer in enumerate(self.mixers):
            prefix = f"{self.name}/mixer{i + 1}"
            yield f"{prefix}/proj_w", mixer.weight
            yield f"{prefix}/proj_b", mixer.bias
            for c, block in enumerate(mixer.select_blocks):
                yield from block.params(f"{prefix}/select/cand{c}")
            for c, block in enumerate(mixer.vision_blocks):
                yield from block.params(f"{prefix}/vision/cand{c}")
        yield from self.out.params(f"{self.name}/out")


class Supernet:
    """Shared-weight store for every candidate block in both branches."""

    def __init__(self, layout, rep_len, seed=0):
        layout.validate_tracking_geometry()
        self.layout = layout
        self.rep_len = rep_len
        self.seed = seed
        # both branches start from identical weights, mirroring the shared
        # pretrained-supernet initialization of the two-stream pipeline;
        # they diverge freely during training
        self.template = BranchNet(layout, rep_len, rng_stream(seed, "supernet-branch"), "template")
        self.search = BranchNet(layout, rep_len, rng_stream(seed, "supernet-branch"), "search")

    def _check_code(self, code):
        per = slots_per_branch(self.layout)
        flat = code.flatten()
        if len(flat) != 2 * per:
            raise ValueError(f"code has {len(flat)} slots, layout {self.layout.name!r} needs {2 * per}")

    def forward(self, code, template_img, search_img, f_l, residual=True, wiring=None, boxes=None):
        """Both branches along ``code``; returns (template map, search map, alignment pairs).

        ``wiring`` is a ContrastiveWiring; ``boxes`` maps branch name to the
        normalized target box used for ROI pooling at flagged stages.
        Alignment pairs come back keyed (branch, stage).
        """
        self._check_code(code)
        boxes = boxes or {}
        pairs = {}
        outs = {}
        for branch_name, net, img, branch_code in (
            ("template", self.template, template_img, code.template),
            ("search", self.search, search_img, code.search),
        ):
            collect = ()
            if wiring is not None and wiring.branch_flags.get(branch_name, False):
                collect = tuple(s for s, on in enumerate(wiring.stage_flags) if on)
            out, branch_pairs = net.forward(
                branch_code, img, f_l, residual=residual, collect_stages=collect, box=boxes.get(branch_name)
            )
            outs[branch_name] = out
            for stage, pair in branch_pairs.items():
                pairs[(branch_name, stage)] = pair
        return outs["template"], outs["search"], pairs

    def params(self):
        yield from self.template.params()
        yield from self.search.params()

    def param_count(self):
        return sum(t.data.size for _, t in self.params())

    def checksum(self, skip=()):
        """Stable digest of all parameters not matched by ``skip`` substrings."""
        import hashlib

        h = hashlib.sha256()
        for name, t in sorted(self.params()):
            if any(s in name for s in skip):
                continue
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


@dataclass
class Subnet:
    """A standalone network: one candidate per slot, copied out of a supernet."""

    net: Supernet
    code: ArchCode

    def forward(self, template_img, search_img, f_l, residual=True, wiring=None, boxes=None):
        zero = _zero_code(self.net.layout)
        return self.net.forward(zero, template_img, search_img, f_l, residual=residual, wiring=wiring, boxes=boxes)

    def params(self):
        yield from self.net.params()

    def param_count(self):
        return self.net.param_count()


def _zero_code(layout):
    return ArchCode.from_flat((0,) * (2 * slots_per_branch(layout)), layout)


def extract_subnet(net, code):
    """Copy only the selected candidates; forward equals the supernet's bit-exactly."""
    net._check_code(code)
    reduced = copy.copy(net)
    reduced.template = _reduce_branch(net.template, code.template)
    reduced.search = _reduce_branch(net.search, code.search)
    return Subnet(net=reduced, code=code)


def _reduce_branch(branch, branch_code):
    out = copy.copy(branch)
    out.stem = copy.deepcopy(branch.stem)
    out.stages = [
        [[copy.deepcopy(candidates[branch_code.backbone[i][j]])] for j, candidates in enumerate(slots)]
        for i, slots in enumerate(branch.stages)
    ]
    out.mixers = []
    for i, mixer in enumerate(branch.mixers):
        sel, vis = branch_code.mixers[i]
        out.mixers.append(
            fusion.MixerParams(
                weight=Tensor(mixer.weight.data.copy(), requires_grad=True),
                bias=Tensor(mixer.bias.data.copy(), requires_grad=True),
                select_blocks=[copy.deepcopy(mixer.select_blocks[sel])],
                vision_blocks=[copy.deepcopy(mixer.vision_blocks[vis])],
                channels=mixer.channels,
                name=mixer.name,
            )
        )
    out.out = copy.deepcopy(branch.out)
    return out
