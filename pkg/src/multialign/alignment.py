"""Triplet sampling, hinge alignment losses and the training step."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .encoders import EmbeddingBundle

logger = logging.getLogger(__name__)

MODES = ("baseline", "local", "relation", "full")

MODE_CHANNELS = {
    "baseline": ("global",),
    "local": ("global", "local"),
    "relation": ("global", "relation"),
    "full": ("global", "local", "relation"),
}


@dataclass(frozen=True)
class Triplet:
    anchor: int  # batch position of the matched (image, text) pair
    neg_text: int  # batch position whose text is the mismatched text
    neg_image: int  # batch position whose image is the mismatched image


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    k: int = 3
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.margin < 0:
            raise ValueError(f"margin must be nonnegative, got {self.margin}")
        if self.k < 1:
            raise ValueError(f"K must be a positive integer, got {self.k}")
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise ValueError(f"weights must be three nonnegative numbers, got {self.weights}")

    @property
    def effective_weights(self) -> tuple[float, float, float]:
        wg, wl, wr = self.weights
        channels = MODE_CHANNELS[self.mode]
        return (
            wg,
            wl if "local" in channels else 0.0,
            wr if "relation" in channels else 0.0,
        )

    @property
    def channels(self) -> tuple[str, ...]:
        """Channels that must be encoded for this config's loss."""
        wg, wl, wr = self.effective_weights
        return tuple(c for c, w in zip(("global", "local", "relation"), (wg, wl, wr)) if w > 0)


NEGATIVE_STRATEGIES = ("uniform", "all")


def sample_triplets(
    batch: Sequence[tuple[int, int]],
    rng: np.random.Generator,
    matches: Mapping[int, set[int]] | None = None,
    strategy: str = "uniform",
) -> list[Triplet]:
    """Draw one mismatched text and one mismatched image per batch pair.

    ``batch`` lists (image id, text id) pairs. ``matches`` maps an image id
    to every text id that is a ground-truth match for it; without it only
    the pair itself counts as a match. Negatives come uniformly from the
    other batch members that are not ground-truth matches of the anchor.

    ``strategy="all"`` instead emits one triplet per valid in-batch negative.
    """
    if strategy not in NEGATIVE_STRATEGIES:
        raise ValueError(f"strategy must be one of {NEGATIVE_STRATEGIES}, got {strategy!r}")
    if len(batch) < 2:
        raise ValueError(f"triplet sampling needs a batch of at least 2 pairs, got {len(batch)}")

    def is_match(img_id, txt_id):
        if matches is None:
            return False
        return txt_id in matches.get(img_id, ())

    triplets = []
    for a, (img_a, txt_a) in enumerate(batch):
        text_pool = [j for j, (_, t) in enumerate(batch) if j != a and t != txt_a and not is_match(img_a, t)]
        image_pool = [j for j, (i, _) in enumerate(batch) if j != a and i != img_a and not is_match(i, txt_a)]
        if not text_pool or not image_pool:
            raise ValueError(f"batch position {a} has no valid negative; every other member matches it")
        if strategy == "all":
            triplets.extend(Triplet(a, t, image_pool[n % len(image_pool)]) for n, t in enumerate(text_pool))
        else:
            triplets.append(Triplet(a, int(rng.choice(text_pool)), int(rng.choice(image_pool))))
    return triplets


def knn_select(query, candidates, k: int) -> np.ndarray:
    """Indices of the ``k`` candidates with the largest dot product, best first.

    Ties go to the lower index; fewer than ``k`` candidates returns all.
    """
    cand = np.asarray(candidates.data if isinstance(candidates, Tensor) else candidates, dtype=np.float64)
    q = np.asarray(query.data if isinstance(query, Tensor) else query, dtype=np.float64)
    if cand.ndim != 2 or cand.shape[0] == 0:
        raise ValueError("knn_select: candidate set is empty")
    if k < 1:
        raise ValueError(f"knn_select: K must be >= 1, got {k}")
    scores = cand @ q
    top = np.argsort(-scores, kind="stable")[: min(k, cand.shape[0])]
    ad.note_branch(np.sort(top))
    return top


def _hinge(margin: float, pos: Tensor, neg: Tensor) -> Tensor:
    return ad.relu(neg - pos + margin)


def global_loss(triplets: Sequence[Triplet], images: Sequence[EmbeddingBundle], texts: Sequence[EmbeddingBundle], margin: float) -> Tensor:
    """Bidirectional hinge on global dot products, averaged over triplets."""
    if not triplets:
        raise ValueError("global_loss: no triplets")
    terms = []
    for t in triplets:
        gi, gt = images[t.anchor].global_vec, texts[t.anchor].global_vec
        pos = ad.dot(gi, gt)
        neg_t = ad.dot(gi, texts[t.neg_text].global_vec)
        neg_i = ad.dot(images[t.neg_image].global_vec, gt)
        terms.append(_hinge(margin, pos, neg_t) + _hinge(margin, pos, neg_i))
    return ad.mean(ad.stack(terms))


def _knn_mean(query: Tensor, candidates: Tensor, k: int) -> Tensor:
    idx = knn_select(query, candidates, k)
    return ad.mean(ad.matmul(candidates[idx], query))


def local_loss(text: EmbeddingBundle, pos_image: EmbeddingBundle, neg_image: EmbeddingBundle, margin: float, k: int) -> Tensor:
    """Hinge between the top-K region similarities of the matched and a mismatched image."""
    for img in (pos_image, neg_image):
        if img.locals is None or img.locals.shape[0] == 0:
            raise ValueError("local_loss: image bundle has no local vectors")
    q = text.locals[0]
    return _hinge(margin, _knn_mean(q, pos_image.locals, k), _knn_mean(q, neg_image.locals, k))


def relation_loss(text: EmbeddingBundle, pos_image: EmbeddingBundle, neg_image: EmbeddingBundle, margin: float, k: int) -> Tensor | None:
    """Same hinge over relation candidates; ``None`` when either image has none."""
    if not (pos_image.relation_enabled and neg_image.relation_enabled):
        return None
    q = text.relations[0]
    return _hinge(margin, _knn_mean(q, pos_image.relations, k), _knn_mean(q, neg_image.relations, k))


@dataclass
class LossBreakdown:
    total: float
    global_: float
    local: float
    relation: float
    relation_skipped: int = 0

    def as_dict(self) -> dict:
        return {"total": self.total, "global": self.global_, "local": self.local, "relation": self.relation}


def total_loss(
    triplets: Sequence[Triplet],
    images: Sequence[EmbeddingBundle],
    texts: Sequence[EmbeddingBundle],
    cfg: LossConfig,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the global loss and the mean local and relation hinges."""
    wg, wl, wr = cfg.effective_weights
    if wg == wl == wr == 0:
        raise ValueError("total_loss: all effective loss weights are zero")
    parts = []
    vals = {"global": 0.0, "local": 0.0, "relation": 0.0}
    skipped = 0
    if wg > 0:
        lg = global_loss(triplets, images, texts, cfg.margin)
        vals["global"] = lg.item()
        parts.append(lg * wg)
    if wl > 0:
        ll = ad.mean(ad.stack([
            local_loss(texts[t.anchor], images[t.anchor], images[t.neg_image], cfg.margin, cfg.k) for t in triplets
        ]))
        vals["local"] = ll.item()
        parts.append(ll * wl)
    if wr > 0:
        terms = []
        for t in triplets:
            term = relation_loss(texts[t.anchor], images[t.anchor], images[t.neg_image], cfg.margin, cfg.k)
            if term is None:
                skipped += 1
            else:
                terms.append(term)
        if terms:
            lr = ad.mean(ad.stack(terms))
            vals["relation"] = lr.item()
            parts.append(lr * wr)
    total = parts[0] if parts else ad.as_tensor(0.0)
    for p in parts[1:]:
        total = total + p
    return total, LossBreakdown(total.item(), vals["global"], vals["local"], vals["relation"], skipped)


# -- optimisation ---------------------------------------------------------------


@dataclass
class SGDState:
    """Optimizer state; ``kind`` is ``"sgd"`` (momentum) or ``"adam"``."""

    lr: float = 1e-3
    momentum: float = 0.9
    kind: str = "sgd"
    beta2: float = 0.999
    eps: float = 1e-8
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class NonFiniteLoss(FloatingPointError):
    pass


def sgd_update(params: Mapping[str, Tensor], state: SGDState) -> None:
    t = state.step + 1
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if state.kind == "adam":
            m = state.momentum * state.velocity.get(name, 0.0) + (1 - state.momentum) * g
            v = state.beta2 * state.second.get(name, 0.0) + (1 - state.beta2) * g * g
            state.velocity[name], state.second[name] = m, v
            m_hat = m / (1 - state.momentum**t)
            v_hat = v / (1 - state.beta2**t)
            p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            v = state.velocity.get(name)
            v = g.copy() if v is None else state.momentum * v + g
            state.velocity[name] = v
            p.data = p.data - state.lr * v


def train_step(loss_fn, params: Mapping[str, Tensor], state: SGDState, log: list | None = None) -> LossBreakdown:
    """One momentum-SGD update from ``loss_fn() -> (loss, breakdown)``.

    A non-finite loss raises :class:`NonFiniteLoss` before any parameter or
    optimizer state is touched.
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss, breakdown = loss_fn()
    if not math.isfinite(loss.item()):
        logger.error("non-finite loss at step %d; update skipped", state.step)
        raise NonFiniteLoss(f"loss is {loss.item()} at step {state.step}")
    ad.backprop(loss, tape)
    sgd_update(params, state)
    state.step += 1
    if log is not None:
        log.append({"step": state.step, **breakdown.as_dict(), "lr": state.lr})
    return breakdown
