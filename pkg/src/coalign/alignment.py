"""Toy image-text instances, the two alignment games played on them, and the alignment losses.

Token-level game: players are the ``L1`` patch tokens followed by the ``L2``
word tokens; the score is the cosine between the bag-of-embeddings image and
text vectors built from the unmasked tokens.

Semantics-level game: players are ``M`` region representations followed by
``N`` phrase representations; the score is the fine-grained similarity
``(p1 + p2) / 2`` of the alignment matrix restricted to the unmasked players.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from coalign.errors import ContractViolation, DegenerateInputError, InvalidArgument
from coalign.game import Coalition, GameEvaluator, all_subsets, masks_to_bool


@dataclass
class TokenSpace:
    """Patch grid embeddings (row-major, ``H*W`` rows) and word embeddings."""

    patches: np.ndarray
    words: np.ndarray
    H: int
    W: int

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=float)
        self.words = np.asarray(self.words, dtype=float)
        if self.patches.ndim != 2 or self.words.ndim != 2:
            raise ContractViolation("embeddings must be 2-d arrays")
        if self.patches.shape[0] != self.H * self.W:
            raise ContractViolation(f"expected {self.H * self.W} patches, got {self.patches.shape[0]}")
        if self.patches.shape[1] != self.words.shape[1]:
            raise ContractViolation("patch and word embeddings differ in dimension")
        if self.d < 2:
            raise ContractViolation("embedding dimension must be >= 2")
        if not (np.isfinite(self.patches).all() and np.isfinite(self.words).all()):
            raise ContractViolation("embeddings must be finite")

    @property
    def d(self) -> int:
        return self.patches.shape[1]

    @property
    def L1(self) -> int:
        return self.patches.shape[0]

    @property
    def L2(self) -> int:
        return self.words.shape[0]

    @property
    def n_players(self) -> int:
        return self.L1 + self.L2


@dataclass(frozen=True)
class Region:
    center: int
    box: tuple[int, int]  # (width, height) in patches
    members: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.members)


def make_region(center: int, width: int, height: int, H: int, W: int) -> Region:
    """The box of ``width x height`` patches around ``center``, clipped to the grid.

    Even sizes extend one patch further right/down than left/up.
    """
    if not 0 <= center < H * W:
        raise InvalidArgument(f"center {center} outside a {H}x{W} grid")
    if width < 1 or height < 1:
        raise InvalidArgument("box sides must be >= 1")
    r0, c0 = divmod(center, W)
    rows = range(max(0, r0 - (height - 1) // 2), min(H, r0 + height // 2 + 1))
    cols = range(max(0, c0 - (width - 1) // 2), min(W, c0 + width // 2 + 1))
    return Region(center, (width, height), tuple(r * W + c for r in rows for c in cols))


def region_from_rect(top: int, left: int, height: int, width: int, H: int, W: int) -> Region:
    if top < 0 or left < 0 or height < 1 or width < 1 or top + height > H or left + width > W:
        raise InvalidArgument(f"rect {(top, left, height, width)} does not fit a {H}x{W} grid")
    center = (top + (height - 1) // 2) * W + left + (width - 1) // 2
    return make_region(center, width, height, H, W)


@dataclass(frozen=True)
class RegionProposal:
    region: Region
    confidence: float


@dataclass(frozen=True)
class Phrase:
    start: int
    stop: int

    def __post_init__(self):
        if not 0 <= self.start < self.stop:
            raise InvalidArgument(f"bad phrase span [{self.start}, {self.stop})")

    @property
    def words(self) -> range:
        return range(self.start, self.stop)


# --- token-level game -------------------------------------------------------

def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def encode_many(space: TokenSpace, keep: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bag-of-embeddings encoder on boolean keep-rows over patches then words."""
    keep = np.asarray(keep, dtype=float)
    img = keep[:, : space.L1] @ space.patches
    txt = keep[:, space.L1 :] @ space.words
    return _normalize_rows(img), _normalize_rows(txt)


def encode(space: TokenSpace, mask: Coalition) -> tuple[np.ndarray, np.ndarray]:
    """Unit image and text vectors from the unmasked tokens (zero vector if none survive)."""
    if mask.n != space.n_players:
        raise ContractViolation(f"mask over {mask.n} players, space has {space.n_players}")
    img, txt = encode_many(space, mask.to_bool()[None, :])
    return img[0], txt[0]


def global_similarity_v1(space: TokenSpace, s: Coalition) -> float:
    img, txt = encode(space, s)
    return float(img @ txt)


TABLE_MAX_PLAYERS = 22


def _unit_table(x: np.ndarray) -> np.ndarray:
    k = len(x)
    masks, _ = all_subsets(range(k), k)
    return _normalize_rows(masks_to_bool(masks, k).astype(float) @ x)


def token_game(space: TokenSpace) -> GameEvaluator:
    """The global-similarity game over patches then words.

    Up to ``TABLE_MAX_PLAYERS`` players the full score table (image masks x
    text masks) is built on first use and later calls are lookups.
    """
    n, L1 = space.n_players, space.L1
    low = (1 << L1) - 1
    table: list[np.ndarray] = []
    lock = threading.Lock()

    def batch(masks):
        if n > TABLE_MAX_PLAYERS:
            img, txt = encode_many(space, masks_to_bool(masks, n))
            return (img * txt).sum(axis=1)
        with lock:
            if not table:
                table.append(_unit_table(space.patches) @ _unit_table(space.words).T)
        return table[0][masks & low, masks >> L1]

    return GameEvaluator(n, batch_fn=batch, name="token_v1")


# --- semantics-level game ---------------------------------------------------

def region_representation(space: TokenSpace, r: Region) -> np.ndarray:
    if not r.members or max(r.members) >= space.L1 or min(r.members) < 0:
        raise InvalidArgument("region members must be non-empty and inside the grid")
    return space.patches[list(r.members)].mean(axis=0)


def phrase_representation(space: TokenSpace, p: Phrase) -> np.ndarray:
    if p.stop > space.L2:
        raise InvalidArgument(f"phrase {p} runs past {space.L2} words")
    return space.words[p.start : p.stop].mean(axis=0)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


@dataclass
class AlignmentMatrix:
    raw: np.ndarray
    row_normalized: np.ndarray = field(init=False)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        self.row_normalized = softmax(self.raw, axis=1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape


def alignment_scores(region_reps: np.ndarray, phrase_reps: np.ndarray, cosine: bool = False) -> np.ndarray:
    hi, ht = np.asarray(region_reps, float), np.asarray(phrase_reps, float)
    if cosine:
        hi, ht = _normalize_rows(hi), _normalize_rows(ht)
    return hi @ ht.T


def alignment_matrix(region_reps, phrase_reps, cosine: bool = False) -> AlignmentMatrix:
    return AlignmentMatrix(alignment_scores(region_reps, phrase_reps, cosine))


def fine_grained_from_scores(a: np.ndarray) -> float:
    """``(p1 + p2) / 2``: mean row max of the row softmax and mean column max of the column softmax."""
    if a.size == 0:
        return 0.0
    p1 = softmax(a, axis=1).max(axis=1).mean()
    p2 = softmax(a, axis=0).max(axis=0).mean()
    return float((p1 + p2) / 2)


def fine_grained_similarity_v2(region_reps, phrase_reps, s: Coalition, cosine: bool = False) -> float:
    scores = alignment_scores(region_reps, phrase_reps, cosine)
    M, N = scores.shape
    if s.n != M + N:
        raise ContractViolation(f"coalition over {s.n} players, game has {M + N}")
    keep = s.to_bool()
    return fine_grained_from_scores(scores[np.ix_(keep[:M], keep[M:])])


def semantic_game(region_reps, phrase_reps, cosine: bool = False) -> GameEvaluator:
    scores = alignment_scores(region_reps, phrase_reps, cosine)
    M, N = scores.shape
    n = M + N

    def batch(masks):
        uniq, inverse = np.unique(np.asarray(masks, dtype=np.int64), return_inverse=True)
        keep = masks_to_bool(uniq, n)
        vals = np.array([fine_grained_from_scores(scores[np.ix_(k[:M], k[M:])]) for k in keep])
        return vals[inverse]

    return GameEvaluator(n, batch_fn=batch, name="semantic_v2")


# --- region proposals and phrases ------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class ProposalHead:
    """Linear map from a patch embedding to (width logit, height logit, confidence logit)."""

    weight: np.ndarray  # (3, d)
    bias: np.ndarray  # (3,)
    max_box: int

    @classmethod
    def zeros(cls, d: int, max_box: int) -> "ProposalHead":
        return cls(np.zeros((3, d)), np.zeros(3), max_box)

    @classmethod
    def random(cls, d: int, max_box: int, rng: np.random.Generator, scale: float = 0.5) -> "ProposalHead":
        return cls(rng.normal(scale=scale, size=(3, d)), rng.normal(scale=scale, size=3), max_box)

    def logits(self, patches: np.ndarray) -> np.ndarray:
        return patches @ self.weight.T + self.bias


def propose_regions(space: TokenSpace, head: ProposalHead, M: int) -> list[RegionProposal]:
    """Top-``M`` boxes by confidence, ties broken by ascending patch index."""
    if not 1 <= M <= space.L1:
        raise InvalidArgument(f"M must lie in [1, {space.L1}], got {M}")
    z = head.logits(space.patches)
    sizes = 1.0 + (head.max_box - 1) * _sigmoid(z[:, :2])
    conf = _sigmoid(z[:, 2])
    order = sorted(range(space.L1), key=lambda k: (-conf[k], k))[:M]
    out = []
    for k in order:
        width, height = (int(math.floor(v + 0.5)) for v in sizes[k])
        out.append(RegionProposal(make_region(k, width, height, space.H, space.W), float(conf[k])))
    return out


def tsa_head_gradient(
    space: TokenSpace, head: ProposalHead, proposals: Sequence[RegionProposal], labels: Sequence[float]
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the aggregation loss w.r.t. the head, labels held fixed.

    Box sizes are rounded to whole patches, so only the confidence row gets a gradient.
    """
    labels = np.asarray(labels, dtype=float)
    centers = [p.region.center for p in proposals]
    x = space.patches[centers]
    s = _sigmoid(head.logits(x)[:, 2])
    dz = (s - labels) / len(centers)
    dw = np.zeros_like(head.weight)
    db = np.zeros_like(head.bias)
    dw[2] = dz @ x
    db[2] = dz.sum()
    return dw, db


def extract_phrases(n_words: int, breakpoints: Sequence[int] = ()) -> list[Phrase]:
    """Contiguous spans cut at ``breakpoints``; stands in for a constituency parser."""
    bps = [int(b) for b in breakpoints]
    if n_words < 1:
        raise InvalidArgument("need at least one word")
    if any(b2 <= b1 for b1, b2 in zip(bps, bps[1:])):
        raise InvalidArgument(f"breakpoints must be strictly increasing: {bps}")
    if bps and (bps[0] < 1 or bps[-1] >= n_words):
        raise InvalidArgument(f"breakpoints must lie in [1, {n_words})")
    edges = [0] + bps + [n_words]
    return [Phrase(a, b) for a, b in zip(edges, edges[1:])]


# --- losses -----------------------------------------------------------------

def _cmc_parts(img, txt, tau):
    if tau <= 0:
        raise InvalidArgument("temperature must be > 0")
    img, txt = np.asarray(img, float), np.asarray(txt, float)
    if img.shape != txt.shape:
        raise InvalidArgument("image and text batches must match")
    logits = img @ txt.T / tau
    return img, txt, logits


def loss_cmc(img: np.ndarray, txt: np.ndarray, tau: float = 0.07) -> float:
    """Symmetric contrastive loss, both directions summed per pair, averaged over the batch."""
    _, _, z = _cmc_parts(img, txt, tau)
    diag = np.diag(z)
    i2t = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1) - diag
    t2i = np.log(np.exp(z - z.max(0, keepdims=True)).sum(0)) + z.max(0) - diag
    return float((i2t + t2i).mean())


def loss_cmc_grad(img, txt, tau: float = 0.07) -> tuple[np.ndarray, np.ndarray]:
    img, txt, z = _cmc_parts(img, txt, tau)
    B = len(z)
    eye = np.eye(B)
    dz = (softmax(z, axis=1) - eye + softmax(z, axis=0) - eye) / B
    return dz @ txt / tau, dz.T @ img / tau


def normalize_interactions(values, mode: str = "minmax") -> np.ndarray:
    """Map raw interactions to soft labels in [0, 1].

    ``minmax`` rescales the whole array; ``rowwise`` shifts each row of a
    matrix by its minimum and divides by the row sum, so rows sum to one
    (a constant row becomes uniform).
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise InvalidArgument("need at least one value")
    if mode == "minmax":
        lo, hi = v.min(), v.max()
        if hi == lo:
            raise DegenerateInputError("min-max normalization of a constant array")
        return (v - lo) / (hi - lo)
    if mode == "rowwise":
        rows = np.atleast_2d(v)
        shifted = rows - rows.min(axis=1, keepdims=True)
        sums = shifted.sum(axis=1, keepdims=True)
        out = np.where(sums > 0, shifted / np.where(sums > 0, sums, 1), 1.0 / rows.shape[1])
        return out.reshape(v.shape)
    raise InvalidArgument(f"unknown normalization mode {mode!r}")


def _check_tsa(conf, labels):
    s, y = np.asarray(conf, float), np.asarray(labels, float)
    if s.shape != y.shape:
        raise InvalidArgument("confidences and labels differ in length")
    if ((s <= 0) | (s >= 1)).any():
        raise ContractViolation("confidences must lie strictly inside (0, 1)")
    return s, y


def loss_tsa(confidences, labels) -> float:
    """Binary cross-entropy between proposal confidences and soft interaction labels."""
    s, y = _check_tsa(confidences, labels)
    return float(-(y * np.log(s) + (1 - y) * np.log1p(-s)).mean())


def loss_tsa_grad(confidences, labels) -> np.ndarray:
    s, y = _check_tsa(confidences, labels)
    return -(y / s - (1 - y) / (1 - s)) / len(s)


def loss_fsa(matrix: AlignmentMatrix, labels) -> float:
    """``-(1/MN) sum_ij label_ij log softmax_row(A)_ij``."""
    y = np.asarray(labels, dtype=float)
    if y.shape != matrix.shape:
        raise InvalidArgument(f"labels {y.shape} do not match matrix {matrix.shape}")
    return float(-(y * np.log(matrix.row_normalized)).mean())


def loss_fsa_grad(matrix: AlignmentMatrix, labels) -> np.ndarray:
    """Gradient of :func:`loss_fsa` w.r.t. the raw scores."""
    y = np.asarray(labels, dtype=float)
    if y.shape != matrix.shape:
        raise InvalidArgument(f"labels {y.shape} do not match matrix {matrix.shape}")
    return (matrix.row_normalized * y.sum(axis=1, keepdims=True) - y) / y.size


def compose_total_loss(cmc: float, tsa: float, fsa: float) -> float:
    return float(cmc + tsa + fsa)


# --- planted instances ------------------------------------------------------

Rect = tuple[int, int, int, int]  # top, left, height, width


@dataclass
class PlantedInstance:
    space: TokenSpace
    rects: list[Rect]
    spans: list[tuple[int, int]]
    regions: list[Region]
    phrases: list[Phrase]
    seed: int
    noise: float
    part_scale: float

    def token_game(self) -> GameEvaluator:
        return token_game(self.space)

    def chunked_phrases(self) -> list[Phrase]:
        """All words cut into phrases so that every planted span is one phrase."""
        cuts = sorted({b for span in self.spans for b in span if 0 < b < self.space.L2})
        return extract_phrases(self.space.L2, cuts)

    def planted_phrase_index(self, k: int, phrases: Sequence[Phrase]) -> int:
        return [(p.start, p.stop) for p in phrases].index(tuple(self.spans[k]))


def make_planted_instance(
    seed: int,
    H: int,
    W: int,
    L2: int,
    d: int,
    planted: Sequence[tuple[Rect, tuple[int, int]]],
    *,
    noise: float = 0.1,
    part_scale: float = 4.0,
) -> PlantedInstance:
    """A synthetic token space with known region-phrase correspondences.

    Every token gets isotropic Gaussian noise of expected norm ``noise``.  Each
    planted pair gets its own unit latent (latents mutually orthogonal), added
    to the region's patches and the phrase's words.  Region patches also get
    part offsets of size ``part_scale`` that are orthogonal to the latents and
    sum to zero over the region: a single patch looks little like the concept,
    the whole region does.
    """
    rng = np.random.default_rng(seed)
    if d < 2:
        raise InvalidArgument("d must be >= 2")
    if len(planted) > d:
        raise InvalidArgument("more planted pairs than embedding dimensions")
    patches = rng.normal(size=(H * W, d)) * noise / math.sqrt(d)
    words = rng.normal(size=(L2, d)) * noise / math.sqrt(d)
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    latents = basis[:, : len(planted)].T

    rects, spans, regions, phrases = [], [], [], []
    used_patches: set[int] = set()
    used_words: set[int] = set()
    for k, (rect, span) in enumerate(planted):
        region = region_from_rect(*rect, H, W)
        phrase = Phrase(*span)
        if phrase.stop > L2:
            raise InvalidArgument(f"span {span} runs past {L2} words")
        if used_patches & set(region.members):
            raise InvalidArgument(f"planted region {rect} overlaps an earlier one")
        if used_words & set(phrase.words):
            raise InvalidArgument(f"planted span {span} overlaps an earlier one")
        used_patches |= set(region.members)
        used_words |= set(phrase.words)

        members = list(region.members)
        offsets = rng.normal(size=(len(members), d))
        offsets -= offsets @ latents.T @ latents
        offsets -= offsets.mean(axis=0)
        scale = np.linalg.norm(offsets, axis=1).mean()
        if scale > 0:
            offsets *= part_scale / scale
        patches[members] += latents[k] + offsets
        words[list(phrase.words)] += latents[k]

        rects.append(tuple(int(v) for v in rect))
        spans.append((phrase.start, phrase.stop))
        regions.append(region)
        phrases.append(phrase)

    return PlantedInstance(
        TokenSpace(patches, words, H, W), rects, spans, regions, phrases, seed, noise, part_scale
    )


def random_layout(
    rng: np.random.Generator, H: int, W: int, L2: int, n_pairs: int = 2
) -> list[tuple[Rect, tuple[int, int]]]:
    """Non-overlapping two-patch boxes (alternating 1x2 / 2x1) paired with two-word spans.

    Spans are ``[3k, 3k+2)``, so consecutive phrases are separated by one word.
    """
    if L2 < 3 * n_pairs - 1:
        raise InvalidArgument(f"{L2} words cannot hold {n_pairs} separated two-word spans")
    layout, used = [], set()
    for k in range(n_pairs):
        h, w = (1, 2) if k % 2 == 0 else (2, 1)
        spots = [
            (t, l, h, w)
            for t in range(H - h + 1)
            for l in range(W - w + 1)
            if not used & set(region_from_rect(t, l, h, w, H, W).members)
        ]
        if not spots:
            raise InvalidArgument(f"a {H}x{W} grid has no room for {n_pairs} planted regions")
        rect = spots[int(rng.integers(len(spots)))]
        used |= set(region_from_rect(*rect, H, W).members)
        layout.append((rect, (3 * k, 3 * k + 2)))
    return layout


def random_region_like(
    region: Region, H: int, W: int, rng: np.random.Generator, exclude: Sequence[Region] = ()
) -> Region:
    """A box of the same shape at a uniformly random position, unequal to any in ``exclude``."""
    width, height = region.box
    taken = {r.members for r in exclude}
    spots = [
        region_from_rect(t, l, height, width, H, W)
        for t in range(H - height + 1)
        for l in range(W - width + 1)
    ]
    spots = [r for r in spots if r.members not in taken]
    if not spots:
        raise InvalidArgument("no free position for a size-matched region")
    return spots[int(rng.integers(len(spots)))]
