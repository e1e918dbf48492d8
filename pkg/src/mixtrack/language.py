"""Language representations from sentence or attribute annotations.

A deterministic toy embedder stands in for a pretrained language model:
each token maps to a fixed unit vector derived from a stable hash of
(token, seed). Attribute annotations concatenate four dictionary lookups
into a 1 x 4d vector; sentence annotations average per-token rows plus
the two sentinel rows. Three strategies cover samples with no
annotation: an all-zero vector, a pooled template feature projected to
the language dimensionality, or the default attribute tuple.

Dictionary reads are safe to share across threads; inserting new tokens
is single-writer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from mixtrack.io import rng_stream, stable_hash

SENTINEL_TOKENS = ("[CLS]", "[SEP]")
DEFAULT_ATTRIBUTES = ("none", "object", "none", "none")

KIND_SENTENCE = "sentence"
KIND_ATTRIBUTE = "attribute"
KIND_ZERO = "zero"
KIND_TEMPLATE = "template-pooled"

_WORD_RE = re.compile(r"[a-z0-9\[\]\-]+")


def tokenize(text):
    """Lower-case whitespace split with punctuation stripped."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class AttributeAnnotation:
    """Four-word target description: major class, root class, color, initial position."""

    major: str
    root: str
    color: str
    position: str

    def __post_init__(self):
        for name, tok in zip(("major", "root", "color", "position"), self.tokens()):
            if not tok or tok != tok.lower() or " " in tok:
                raise ValueError(f"attribute {name!r} must be a non-empty lower-case word, got {tok!r}")

    def tokens(self):
        return (self.major, self.root, self.color, self.position)


@dataclass(frozen=True)
class SentenceAnnotation:
    tokens: tuple

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError("sentence annotation needs at least one token")
        if any(not t for t in self.tokens):
            raise ValueError("sentence tokens must be non-empty")
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @classmethod
    def from_text(cls, text):
        return cls(tuple(tokenize(text)))

    @property
    def n(self):
        return len(self.tokens)


@dataclass
class LanguageRepresentation:
    """A pooled language vector plus how it was produced."""

    vector: np.ndarray
    kind: str
    dim: int

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.kind == KIND_SENTENCE and self.vector.shape != (self.dim,):
            raise ValueError(f"sentence representation must have length d={self.dim}")
        if self.kind == KIND_ATTRIBUTE and self.vector.shape != (4 * self.dim,):
            raise ValueError(f"attribute representation must have length 4d={4 * self.dim}")
        if self.kind == KIND_ZERO and np.any(self.vector != 0.0):
            raise ValueError("zero representation must be all zeros")


def embed_token(token, d, seed):
    """Deterministic unit vector for a token: hash-seeded uniform then L2-normalized."""
    if not token:
        raise ValueError("embed_token: empty token")
    if d < 1:
        raise ValueError("embed_token: dimension must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([stable_hash(token, seed)]))
    v = rng.uniform(-1.0, 1.0, d)
    norm = np.linalg.norm(v)
    while norm == 0.0:  # astronomically unlikely; resample rather than divide by zero
        v = rng.uniform(-1.0, 1.0, d)
        norm = np.linalg.norm(v)
    return v / norm


@dataclass
class AttributeDictionary:
    """Shared token -> vector store; same token always yields the same vector."""

    d: int
    seed: int
    entries: dict = field(default_factory=dict)

    def lookup(self, token):
        if token not in self.entries:
            self.entries[token] = embed_token(token, self.d, self.seed)
        return self.entries[token]

    def save(self, path):
        with open(path, "w") as f:
            f.write(f"d={self.d} seed={self.seed}\n")
            for token in sorted(self.entries):
                vals = " ".join(f"{v:.17g}" for v in self.entries[token])
                f.write(f"{token} {vals}\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            header = f.readline().strip()
            m = re.fullmatch(r"d=(\d+) seed=(\d+)", header)
            if not m:
                raise ValueError(f"bad dictionary header: {header!r}")
            dict_ = cls(d=int(m.group(1)), seed=int(m.group(2)))
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                token, vals = parts[0], np.array([float(x) for x in parts[1:]])
                if vals.shape != (dict_.d,):
                    raise ValueError(f"entry for {token!r} has {vals.size} values, expected {dict_.d}")
                dict_.entries[token] = vals
        return dict_


def encode_sentence(sentence, d, seed, embed=embed_token):
    """Row mean of the (N+2) x d matrix of word rows plus the two sentinel rows.

    Rows are summed in sorted token order so the pooled vector depends only
    on the token multiset, making word-order invariance bit-exact.
    """
    tokens = sorted((SENTINEL_TOKENS[0],) + sentence.tokens + (SENTINEL_TOKENS[1],))
    rows = [embed(tok, d, seed) for tok in tokens]
    return LanguageRepresentation(np.mean(rows, axis=0), KIND_SENTENCE, d)


def encode_attributes(annotation, dictionary):
    """Concatenate the four attribute vectors on the channel dimension (d -> 4d)."""
    segs = [dictionary.lookup(tok) for tok in annotation.tokens()]
    return LanguageRepresentation(np.concatenate(segs), KIND_ATTRIBUTE, dictionary.d)


def missing_language(strategy, *, rep_len, dictionary=None, category=None, template_image=None, box=None, seed=0):
    """Build a language representation for an unannotated sample.

    strategy "zero": all-zero vector of the active length ``rep_len``.
    strategy "template": ROI-pool the template image inside ``box`` and
    project the pooled color vector to ``rep_len`` with a fixed seeded map.
    strategy "attribute-default": encode ("category-or-none", "object",
    "none", "none") with the shared dictionary.
    """
    if strategy == "zero":
        return LanguageRepresentation(np.zeros(rep_len), KIND_ZERO, rep_len)
    if strategy == "template":
        if template_image is None or box is None:
            raise ValueError("template strategy requires a template image and its target box")
        from mixtrack.fusion import roi_embed  # local import; fusion owns the pooling op

        pooled = roi_embed(template_image, box)
        proj = _template_projection(pooled.shape[0], rep_len, seed)
        return LanguageRepresentation(pooled @ proj, KIND_TEMPLATE, rep_len)
    if strategy == "attribute-default":
        if dictionary is None:
            raise ValueError("attribute-default strategy requires the shared dictionary")
        annotation = AttributeAnnotation(category or "none", "object", "none", "none")
        return encode_attributes(annotation, dictionary)
    raise ValueError(f"unknown missing-language strategy {strategy!r}")


def _template_projection(c_in, rep_len, seed):
    rng = rng_stream(seed, "template-language-projection")
    return rng.uniform(-1.0, 1.0, (c_in, rep_len)) / np.sqrt(c_in)
