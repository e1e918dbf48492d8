"""Synthetic tracking sequences with attribute-consistent distractors.

Scenes are 64 x 64 RGB images of flat-shaded shapes on a gray
background; the palette uses binary-exact values so golden files stay
compact and frames reproduce bit-identically. A sequence is 8 frames of
the same objects under per-object translation and mild target scale
drift. Hard mode always plants one distractor sharing the target's
shape (different color) and one sharing its color (different shape);
easy mode plants a single distractor differing in both.

Annotations follow the four-word scheme: major class = shape kind, root
class = "shape", color = palette name, initial position from the
frame-0 location on a thirds grid. A matching one-sentence description
is derived from the same words.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from mixtrack import io as mio
from mixtrack.language import AttributeAnnotation, SentenceAnnotation

IMAGE_SIZE = 64
TEMPLATE_SIZE = 32
FRAMES_PER_SEQUENCE = 8
ROOT_CLASS = "shape"

SHAPES = ("square", "disc", "triangle", "cross")
COLORS = {
    "red": (0.875, 0.125, 0.125),
    "green": (0.125, 0.75, 0.1875),
    "blue": (0.125, 0.25, 0.875),
    "yellow": (0.875, 0.875, 0.125),
    "magenta": (0.875, 0.125, 0.875),
    "cyan": (0.125, 0.875, 0.875),
}
BACKGROUND = 0.375

POSITIONS = ("upper-left", "upper-right", "lower-left", "lower-right", "center")


@dataclass
class SceneObject:
    shape: str
    color: str
    cx: float
    cy: float
    size: float
    vx: float = 0.0
    vy: float = 0.0

    def box(self):
        return (self.cx, self.cy, self.size, self.size)


@dataclass
class Sequence:
    seq_id: int
    frames: list  # (H, W, 3) float arrays
    boxes: list  # per-frame normalized [cx, cy, w, h] of the target
    objects_meta: list  # per-frame list of (shape, color, box) for every object
    attributes: AttributeAnnotation | None
    sentence: SentenceAnnotation | None
    seed: int

    @property
    def annotated(self):
        return self.attributes is not None

    def template(self):
        """32 x 32 crop of frame 0 around the target plus its box in crop coordinates."""
        return template_crop(self.frames[0], self.boxes[0])


@dataclass
class TrackingDataset:
    sequences: list
    mode: str
    coverage: float
    seed: int

    def __len__(self):
        return len(self.sequences)

    def annotated_count(self):
        return sum(1 for s in self.sequences if s.annotated)


def _mask(shape, cx, cy, size, px, py):
    if shape == "square":
        return (np.abs(px - cx) <= size / 2) & (np.abs(py - cy) <= size / 2)
    if shape == "disc":
        return (px - cx) ** 2 + (py - cy) ** 2 <= (size / 2) ** 2
    if shape == "triangle":
        top = cy - size / 2
        inside_y = (py >= top) & (py <= cy + size / 2)
        return inside_y & (np.abs(px - cx) <= (py - top) / 2)
    if shape == "cross":
        arm = size / 6
        horiz = (np.abs(py - cy) <= arm) & (np.abs(px - cx) <= size / 2)
        vert = (np.abs(px - cx) <= arm) & (np.abs(py - cy) <= size / 2)
        return horiz | vert
    raise ValueError(f"unknown shape {shape!r}")


def render(objects, size=IMAGE_SIZE):
    """Flat-shaded scene; later objects draw over earlier ones."""
    img = np.full((size, size, 3), BACKGROUND)
    coords = (np.arange(size) + 0.5) / size
    py, px = np.meshgrid(coords, coords, indexing="ij")
    for obj in objects:
        m = _mask(obj.shape, obj.cx, obj.cy, obj.size, px, py)
        img[m] = COLORS[obj.color]
    return img


def position_token(cx, cy):
    horiz = "left" if cx < 1 / 3 else ("right" if cx > 2 / 3 else None)
    vert = "upper" if cy < 1 / 3 else ("lower" if cy > 2 / 3 else None)
    if horiz and vert:
        return f"{vert}-{horiz}"
    return "center"


def _sentence_for(attributes):
    return SentenceAnnotation.from_text(
        f"the {attributes.color} {attributes.major} starting at the {attributes.position}"
    )


def _clamp_center(c, size, margin=0.01):
    lo = size / 2 + margin
    return float(np.clip(c, lo, 1.0 - lo))


def _place_away(rng, size, taken_boxes, tries=50):
    from mixtrack.metrics import iou

    for _ in range(tries):
        cx = _clamp_center(rng.uniform(0.15, 0.85), size)
        cy = _clamp_center(rng.uniform(0.15, 0.85), size)
        if all(iou((cx, cy, size, size), b) < 0.05 for b in taken_boxes):
            return cx, cy
    return cx, cy


def _step(obj, rng):
    obj.cx = _clamp_center(obj.cx + obj.vx, obj.size)
    obj.cy = _clamp_center(obj.cy + obj.vy, obj.size)
    if obj.cx <= obj.size / 2 + 0.011 or obj.cx >= 1 - obj.size / 2 - 0.011:
        obj.vx = -obj.vx
    if obj.cy <= obj.size / 2 + 0.011 or obj.cy >= 1 - obj.size / 2 - 0.011:
        obj.vy = -obj.vy


def generate_sequence(seq_id, mode, annotated, seed):
    """One deterministic sequence; hard mode plants attribute-confusable distractors."""
    rng = mio.rng_stream(seed, f"sequence-{seq_id}")
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    size = float(rng.uniform(0.16, 0.24))
    target = SceneObject(
        shape,
        color,
        _clamp_center(rng.uniform(0.25, 0.75), size),
        _clamp_center(rng.uniform(0.25, 0.75), size),
        size,
        vx=float(rng.uniform(-0.035, 0.035)),
        vy=float(rng.uniform(-0.035, 0.035)),
    )

    other_shapes = [s for s in SHAPES if s != shape]
    other_colors = [c for c in COLORS if c != color]
    distractors = []
    if mode == "hard":
        specs = [
            (shape, other_colors[rng.integers(len(other_colors))]),  # same shape, new color
            (other_shapes[rng.integers(len(other_shapes))], color),  # same color, new shape
            (other_shapes[rng.integers(len(other_shapes))], other_colors[rng.integers(len(other_colors))]),
        ]
    elif mode == "easy":
        specs = [(other_shapes[rng.integers(len(other_shapes))], other_colors[rng.integers(len(other_colors))])]
    else:
        raise ValueError(f"unknown difficulty mode {mode!r}")

    taken = [target.box()]
    for d_shape, d_color in specs:
        d_size = float(rng.uniform(0.14, 0.24))
        cx, cy = _place_away(rng, d_size, taken)
        obj = SceneObject(
            d_shape,
            d_color,
            cx,
            cy,
            d_size,
            vx=float(rng.uniform(-0.03, 0.03)),
            vy=float(rng.uniform(-0.03, 0.03)),
        )
        distractors.append(obj)
        taken.append(obj.box())

    frames, boxes, metas = [], [], []
    objects = distractors + [target]  # target drawn last, always visible
    for t in range(FRAMES_PER_SEQUENCE):
        if t > 0:
            for obj in distractors:
                _step(obj, rng)
            target.size = float(np.clip(target.size * rng.uniform(0.97, 1.03), 0.12, 0.3))
            _step(target, rng)
        frames.append(render(objects))
        boxes.append(target.box())
        metas.append([(o.shape, o.color, o.box()) for o in objects])

    attributes = sentence = None
    if annotated:
        attributes = AttributeAnnotation(shape, ROOT_CLASS, color, position_token(boxes[0][0], boxes[0][1]))
        sentence = _sentence_for(attributes)
    return Sequence(
        seq_id=seq_id,
        frames=frames,
        boxes=boxes,
        objects_meta=metas,
        attributes=attributes,
        sentence=sentence,
        seed=seed,
    )


def gen_dataset(n_sequences, mode="hard", language_coverage=1.0, seed=0):
    """Deterministic dataset; exactly floor(coverage * n) sequences carry annotations."""
    if n_sequences < 1:
        raise ValueError("need at least one sequence")
    if not (0.0 <= language_coverage <= 1.0):
        raise ValueError("language coverage must lie in [0, 1]")
    n_annotated = int(np.floor(language_coverage * n_sequences))
    picks = mio.rng_stream(seed, "annotation-picks").permutation(n_sequences)[:n_annotated]
    annotated = set(int(i) for i in picks)
    sequences = [generate_sequence(i, mode, i in annotated, seed) for i in range(n_sequences)]
    return TrackingDataset(sequences=sequences, mode=mode, coverage=language_coverage, seed=seed)


def template_crop(frame, box):
    """Crop a template-sized window around the target; returns (crop, box in crop coords)."""
    size = frame.shape[0]
    half = TEMPLATE_SIZE // 2
    cx_px = int(round(box[0] * size))
    cy_px = int(round(box[1] * size))
    x0 = int(np.clip(cx_px - half, 0, size - TEMPLATE_SIZE))
    y0 = int(np.clip(cy_px - half, 0, size - TEMPLATE_SIZE))
    crop = frame[y0 : y0 + TEMPLATE_SIZE, x0 : x0 + TEMPLATE_SIZE].copy()
    scale = size / TEMPLATE_SIZE
    crop_box = (
        float(np.clip((box[0] * size - x0) / TEMPLATE_SIZE, 0.0, 1.0)),
        float(np.clip((box[1] * size - y0) / TEMPLATE_SIZE, 0.0, 1.0)),
        float(min(box[2] * scale, 1.0)),
        float(min(box[3] * scale, 1.0)),
    )
    return crop, crop_box


# ---------------------------------------------------------------------------
# on-disk form: meta.json + records.jsonl + one golden-format file per frame


def save_dataset(dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    meta = {
        "n_sequences": len(dataset),
        "mode": dataset.mode,
        "coverage": dataset.coverage,
        "seed": dataset.seed,
        "image_size": IMAGE_SIZE,
        "frames_per_sequence": FRAMES_PER_SEQUENCE,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")
    with open(os.path.join(out_dir, "records.jsonl"), "w") as f:
        for seq in dataset.sequences:
            for t, (frame, box) in enumerate(zip(seq.frames, seq.boxes)):
                rel = f"images/seq{seq.seq_id:04d}_f{t}.fmap"
                mio.save_tensor(os.path.join(out_dir, rel), frame)
                record = {
                    "seq_id": seq.seq_id,
                    "frame_index": t,
                    "image_file": rel,
                    "box": [float(v) for v in box],
                    "objects": [
                        {"shape": s, "color": c, "box": [float(v) for v in b]} for s, c, b in seq.objects_meta[t]
                    ],
                }
                if seq.annotated:
                    record["attributes"] = list(seq.attributes.tokens())
                    record["sentence"] = " ".join(seq.sentence.tokens)
                f.write(json.dumps(record, sort_keys=True) + "\n")


def load_dataset(out_dir):
    with open(os.path.join(out_dir, "meta.json")) as f:
        meta = json.load(f)
    by_seq = {}
    with open(os.path.join(out_dir, "records.jsonl")) as f:
        for line in f:
            rec = json.loads(line)
            by_seq.setdefault(rec["seq_id"], []).append(rec)
    sequences = []
    for seq_id in sorted(by_seq):
        recs = sorted(by_seq[seq_id], key=lambda r: r["frame_index"])
        frames = [mio.load_tensor(os.path.join(out_dir, r["image_file"])) for r in recs]
        boxes = [tuple(r["box"]) for r in recs]
        metas = [[(o["shape"], o["color"], tuple(o["box"])) for o in r["objects"]] for r in recs]
        attributes = sentence = None
        if "attributes" in recs[0]:
            attributes = AttributeAnnotation(*recs[0]["attributes"])
            sentence = SentenceAnnotation.from_text(recs[0]["sentence"])
        sequences.append(
            Sequence(
                seq_id=seq_id,
                frames=frames,
                boxes=boxes,
                objects_meta=metas,
                attributes=attributes,
                sentence=sentence,
                seed=meta["seed"],
            )
        )
    return TrackingDataset(
        sequences=sequences, mode=meta["mode"], coverage=meta["coverage"], seed=meta["seed"]
    )
