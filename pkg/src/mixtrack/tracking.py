"""Matching head, task loss, SUC evaluation and the two training loops.

The head slides the template feature map over the search feature map
per channel (valid correlation), reduces channels to a score map with a
1 x 1 projection and regresses per-cell [l, t, r, b] box offsets with a
second 1 x 1 projection. The classification target is a Gaussian blob
centered at the ground-truth cell; the score loss is the centered
binary cross entropy (zero at an exact match), the offset loss a masked
L1 at positive cells.

Training follows the two-stage scheme: supernet training draws one
uniformly random path per iteration and updates only the parameters it
touched; retraining runs the same loop with a frozen path. Evaluations
run read-only and may be parallelized across sequences; training is
single-writer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from mixtrack import autodiff as ad
from mixtrack import fusion, metrics, supernet as sn, synth
from mixtrack import language as lang
from mixtrack.autodiff import Tensor
from mixtrack.io import rng_stream

BLOB_SIGMA = 1.0
POSITIVE_LEVEL = 0.5
MIN_BOX_EXTENT = 1.0 / 64.0


class MatchHead:
    """Correlation reducer + box offset regressor (always-active parameters)."""

    def __init__(self, channels, rng):
        self.channels = channels
        self.score_w = Tensor(np.full((channels, 1), 1.0 / channels), requires_grad=True)
        self.score_b = Tensor(np.zeros(1), requires_grad=True)
        self.box_w = Tensor(rng.uniform(-0.01, 0.01, (channels, 4)), requires_grad=True)
        self.box_b = Tensor(np.full(4, 0.1), requires_grad=True)

    def params(self):
        yield "head/score_w", self.score_w
        yield "head/score_b", self.score_b
        yield "head/box_w", self.box_w
        yield "head/box_b", self.box_b


@dataclass
class ResponseOutput:
    score: Tensor  # (h, w, 1) logits
    offsets: Tensor  # (h, w, 4) predicted [l, t, r, b], normalized units
    template_extent: tuple
    search_extent: tuple


def match_head(template_f, search_f, head, standardize=True):
    """Depthwise cross correlation followed by the two 1 x 1 projections.

    Both maps are whitened per channel first so the correlation responds
    to alignment rather than to feature magnitude drift between branches.
    """
    template_f = template_f if isinstance(template_f, Tensor) else Tensor(template_f)
    search_f = search_f if isinstance(search_f, Tensor) else Tensor(search_f)
    ht, wt, _ = template_f.data.shape
    if standardize:
        template_f = ad.channel_standardize(template_f)
        search_f = ad.channel_standardize(search_f)
    corr = ad.depthwise_xcorr(search_f, template_f)
    corr = ad.scale(corr, 1.0 / (ht * wt))
    score = ad.add_channel_bias(ad.pointwise_conv(corr, head.score_w), head.score_b)
    offsets = ad.add_channel_bias(ad.pointwise_conv(corr, head.box_w), head.box_b)
    return ResponseOutput(
        score=score,
        offsets=offsets,
        template_extent=(ht, wt),
        search_extent=search_f.data.shape[:2],
    )


def _cell_centers(response):
    """Normalized (x, y) centers of each correlation cell's template window."""
    hs, ws = response.search_extent
    ht, wt = response.template_extent
    h, w = response.score.data.shape[:2]
    ys = (np.arange(h) + (ht - 1) / 2 + 0.5) / hs
    xs = (np.arange(w) + (wt - 1) / 2 + 0.5) / ws
    return xs, ys


def make_targets(response, gt_box):
    """Gaussian blob score target, per-cell offset targets, positive mask."""
    xs, ys = _cell_centers(response)
    hs, ws = response.search_extent
    ht, wt = response.template_extent
    h, w = response.score.data.shape[:2]
    cx, cy, bw, bh = gt_box

    gx = np.clip(cx * ws - 0.5 - (wt - 1) / 2, 0, w - 1)
    gy = np.clip(cy * hs - 0.5 - (ht - 1) / 2, 0, h - 1)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    blob = np.exp(-((ii - gy) ** 2 + (jj - gx) ** 2) / (2 * BLOB_SIGMA**2))

    ccx, ccy = np.meshgrid(xs, ys)
    x1, y1, x2, y2 = metrics.to_corners(gt_box)
    offsets = np.stack([ccx - x1, ccy - y1, x2 - ccx, y2 - ccy], axis=-1)
    positives = blob >= POSITIVE_LEVEL
    return blob[..., None], offsets, positives


def task_loss(response, gt_box):
    """Score divergence plus masked offset L1; each term finite and >= 0."""
    blob, offsets, positives = make_targets(response, gt_box)
    cls = ad.score_map_divergence(response.score, Tensor(blob))
    reg = ad.masked_l1(response.offsets, Tensor(offsets), positives.astype(float))
    return ad.add(cls, reg)


def decode_box(response):
    """Box from the argmax cell's offsets, clamped into the unit square."""
    score = response.score.data[:, :, 0]
    i, j = np.unravel_index(int(np.argmax(score)), score.shape)
    xs, ys = _cell_centers(response)
    l, t, r, b = response.offsets.data[i, j]
    x1 = np.clip(xs[j] - l, 0.0, 1.0)
    y1 = np.clip(ys[i] - t, 0.0, 1.0)
    x2 = np.clip(xs[j] + r, 0.0, 1.0)
    y2 = np.clip(ys[i] + b, 0.0, 1.0)
    w = max(x2 - x1, MIN_BOX_EXTENT)
    h = max(y2 - y1, MIN_BOX_EXTENT)
    cx = np.clip((x1 + x2) / 2, w / 2, 1 - w / 2)
    cy = np.clip((y1 + y2) / 2, h / 2, 1 - h / 2)
    return (float(cx), float(cy), float(w), float(h))


# ---------------------------------------------------------------------------
# configuration and language resolution


LANGUAGE_MODES = ("annotated", "zero", "template", "attribute-default", "pseudo")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 300
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 1.0
    seed: int = 0
    annotation_kind: str = "attribute"  # or "sentence"
    missing_strategy: str = "attribute-default"  # zero | template | attribute-default
    language_off: bool = False  # vision-only baseline: language pinned to zero
    residual: bool = True
    contrastive_weight: float = 0.1
    contrastive_temperature: float = 1.0
    contrastive_stages: tuple | None = None  # default: stage 1 only
    contrastive_branches: tuple = ("template", "search")
    smoothing: float = 0.9


def rep_len_for(kind, d):
    if kind == "attribute":
        return 4 * d
    if kind == "sentence":
        return d
    raise ValueError(f"unknown annotation kind {kind!r}")


def build_wiring(cfg, layout):
    if cfg.language_off or cfg.contrastive_weight <= 0:
        return None
    stages = cfg.contrastive_stages
    mask = [False] * layout.n_stages
    for s in stages if stages is not None else (0,):
        mask[s] = True
    return fusion.attach_contrastive(
        mask,
        {b: True for b in cfg.contrastive_branches},
        layout.n_stages,
        weight=cfg.contrastive_weight,
        temperature=cfg.contrastive_temperature,
    )


def resolve_language(seq, mode, cfg, d, dictionary, seed):
    """Per-sequence language vector under a training strategy or eval mode."""
    rep_len = rep_len_for(cfg.annotation_kind, d)
    if mode == "pseudo":
        raise NotImplementedError("pseudo-language captioning is not implemented")
    if mode == "zero" or (mode == "annotated" and cfg.language_off):
        return lang.missing_language("zero", rep_len=rep_len)
    if mode == "template":
        crop, crop_box = seq.template()
        return lang.missing_language(
            "template", rep_len=rep_len, template_image=crop, box=crop_box, seed=seed
        )
    if mode == "attribute-default":
        if cfg.annotation_kind != "attribute":
            raise ValueError("attribute-default needs the attribute annotation kind")
        category = seq.attributes.major if seq.attributes is not None else None
        return lang.missing_language(
            "attribute-default", rep_len=rep_len, dictionary=dictionary, category=category
        )
    if mode == "annotated":
        if not seq.annotated:
            return resolve_language(seq, cfg.missing_strategy, cfg, d, dictionary, seed)
        if cfg.annotation_kind == "attribute":
            return lang.encode_attributes(seq.attributes, dictionary)
        return lang.encode_sentence(seq.sentence, d, dictionary.seed)
    raise ValueError(f"unknown language mode {mode!r}")


# ---------------------------------------------------------------------------
# model container and optimizer


@dataclass
class TrackModel:
    net: object  # Supernet or Subnet
    head: MatchHead
    d: int
    dictionary: lang.AttributeDictionary

    def params(self):
        yield from self.net.params()
        yield from self.head.params()

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        for name, t in sorted(self.params()):
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


def make_model(layout, d=8, seed=0, annotation_kind="attribute"):
    rep_len = rep_len_for(annotation_kind, d)
    net = sn.Supernet(layout, rep_len, seed=seed)
    head = MatchHead(layout.out_channels, rng_stream(seed, "head"))
    return TrackModel(net=net, head=head, d=d, dictionary=lang.AttributeDictionary(d=d, seed=seed))


class SGD:
    """Momentum SGD that only moves parameters touched in the current step.

    Gradients are rescaled to a global norm cap first; velocity state is
    kept per parameter name and only advances when that parameter was
    touched, so off-path supernet weights never drift.
    """

    def __init__(self, lr, momentum, clip_norm=1.0):
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {}

    def step(self, named_params):
        touched = [(name, p) for name, p in named_params if p.grad is not None]
        if self.clip_norm:
            total = np.sqrt(sum(float((p.grad**2).sum()) for _, p in touched))
            if total > self.clip_norm:
                factor = self.clip_norm / total
                for _, p in touched:
                    p.grad = p.grad * factor
        for name, p in touched:
            v = self.velocity.get(name)
            v = p.grad if v is None else self.momentum * v + p.grad
            self.velocity[name] = v
            p.data = p.data - self.lr * v
            p.grad = None


# ---------------------------------------------------------------------------
# training


def _language_table(dataset, cfg, model, mode="annotated"):
    return [
        resolve_language(seq, mode, cfg, model.d, model.dictionary, cfg.seed) for seq in dataset.sequences
    ]


def _forward_sample(model, code, seq, frame_idx, f_l, cfg, wiring):
    template_img, template_box = seq.template()
    search_img = seq.frames[frame_idx]
    gt_box = seq.boxes[frame_idx]
    net = model.net
    boxes = {"template": template_box, "search": gt_box}
    if isinstance(net, sn.Subnet):
        t_f, s_f, pairs = net.forward(
            template_img, search_img, f_l, residual=cfg.residual, wiring=wiring, boxes=boxes
        )
    else:
        t_f, s_f, pairs = net.forward(
            code, template_img, search_img, f_l, residual=cfg.residual, wiring=wiring, boxes=boxes
        )
    response = match_head(t_f, s_f, model.head)
    return task_loss(response, gt_box), pairs


def _train_loop(model, dataset, cfg, sample_code):
    """Shared engine behind supernet training and subnet retraining."""
    rng = rng_stream(cfg.seed, "train")
    opt = SGD(cfg.lr, cfg.momentum, cfg.clip_norm)
    wiring = build_wiring(cfg, model.net.layout if hasattr(model.net, "layout") else model.net.net.layout)
    languages = _language_table(dataset, cfg, model)
    n_seq = len(dataset.sequences)
    trace = []
    smoothed = None
    for it in range(cfg.iterations):
        code = sample_code(rng)
        # distinct sequences per batch keep the alignment pairs well-posed
        if cfg.batch_size <= n_seq:
            seq_ids = rng.choice(n_seq, size=cfg.batch_size, replace=False)
        else:
            seq_ids = rng.integers(0, n_seq, size=cfg.batch_size)
        frame_ids = rng.integers(1, synth.FRAMES_PER_SEQUENCE, size=cfg.batch_size)
        task_terms = []
        site_pairs = {}
        for s_id, f_id in zip(seq_ids, frame_ids):
            seq = dataset.sequences[int(s_id)]
            loss, pairs = _forward_sample(model, code, seq, int(f_id), languages[int(s_id)], cfg, wiring)
            task_terms.append(loss)
            for site, pair in pairs.items():
                site_pairs.setdefault(site, []).append(pair)

        total = ad.scale(_sum_terms(task_terms), 1.0 / len(task_terms))
        task_value = total.item()
        contrastive_value = 0.0
        if wiring is not None and wiring.active and cfg.batch_size > 1:
            align_terms = []
            for site, pairs in site_pairs.items():
                batch = fusion.ContrastiveBatch(
                    ad.stack_rows([ev for ev, _ in pairs]), ad.stack_rows([el for _, el in pairs])
                )
                align_terms.append(fusion.contrastive_loss(batch, wiring.temperature))
            if align_terms:
                align = _sum_terms(align_terms)
                contrastive_value = align.item()
                total = ad.add(total, ad.scale(align, wiring.weight))

        total.backward()
        opt.step(model.params())
        total_value = total.item()
        smoothed = total_value if smoothed is None else cfg.smoothing * smoothed + (1 - cfg.smoothing) * total_value
        trace.append(
            {
                "iteration": it,
                "total": total_value,
                "task": task_value,
                "contrastive": contrastive_value,
                "smoothed": smoothed,
            }
        )
    return trace


def _sum_terms(terms):
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def train_supernet(model, dataset, cfg):
    """Uniform-path supernet training; updates touch only the sampled path."""
    if not isinstance(model.net, sn.Supernet):
        raise ValueError("train_supernet expects a Supernet-backed model")
    layout = model.net.layout
    return _train_loop(model, dataset, cfg, lambda rng: sn.sample_path(layout, rng))


def retrain(model, dataset, cfg):
    """Fixed-path optimization of an extracted subnet."""
    if not isinstance(model.net, sn.Subnet):
        raise ValueError("retrain expects a Subnet-backed model (see extract_subnet)")
    return _train_loop(model, dataset, cfg, lambda rng: model.net.code)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, dataset, language_mode="annotated", cfg=None, code=None, predictor=None):
    """SUC over every non-initial frame of every sequence.

    ``language_mode`` follows the inference settings: annotated, zero,
    template, attribute-default, or pseudo (unimplemented stub).
    ``predictor`` overrides the whole pipeline with (seq, frame_idx) -> box,
    which keeps the metric plumbing testable in isolation.
    """
    if language_mode not in LANGUAGE_MODES:
        raise ValueError(f"unknown language mode {language_mode!r}")
    cfg = cfg or TrainConfig()
    ious = []
    distances = []
    with ad.no_grad():
        if predictor is None:
            languages = _language_table(dataset, cfg, model, mode=language_mode)
        for seq_idx, seq in enumerate(dataset.sequences):
            if predictor is not None:
                for t in range(1, len(seq.frames)):
                    box = predictor(seq, t)
                    ious.append(metrics.iou(box, seq.boxes[t]))
                    distances.append(metrics.center_distance(box, seq.boxes[t]))
                continue
            f_l = languages[seq_idx]
            net, t_code, s_code = _resolve_net(model.net, code)
            template_img, _ = seq.template()
            t_f, _ = net.template.forward(t_code, template_img, f_l, residual=cfg.residual)
            for t in range(1, len(seq.frames)):
                s_f, _ = net.search.forward(s_code, seq.frames[t], f_l, residual=cfg.residual)
                response = match_head(t_f, s_f, model.head)
                box = decode_box(response)
                ious.append(metrics.iou(box, seq.boxes[t]))
                distances.append(metrics.center_distance(box, seq.boxes[t]))
    curve = metrics.suc(ious)
    precision_proxy = float(np.mean(np.asarray(distances) <= 0.1))
    return curve, precision_proxy


def _resolve_net(net, code):
    if isinstance(net, sn.Subnet):
        zero = sn._zero_code(net.net.layout)
        return net.net, zero.template, zero.search
    if code is None:
        raise ValueError("evaluating a supernet needs an explicit path code")
    return net, code.template, code.search


def subnet_evaluator(model, val_dataset, language_mode="annotated", cfg=None):
    """Fitness function for the evolutionary search: code -> validation SUC."""
    layout = model.net.layout

    def fitness(flat_code):
        code = sn.ArchCode.from_flat(flat_code, layout)
        curve, _ = evaluate(model, val_dataset, language_mode=language_mode, cfg=cfg, code=code)
        return curve.suc

    return fitness
