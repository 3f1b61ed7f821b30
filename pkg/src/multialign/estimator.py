"""scikit-learn style estimator wrapping encoders, losses and retrieval."""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .alignment import LossConfig, MODE_CHANNELS, SGDState, sample_triplets, total_loss, train_step
from .encoders import (
    DEFAULT_ALPHABET,
    EmbeddingBundle,
    EncoderConfig,
    encode_images,
    encode_texts,
    init_params,
    make_text,
)
from .retrieval import RetrievalReport, evaluate_embeddings, similarity_matrix
from .validation import check_captions, check_images, check_matches, check_pairs, check_positive_int

logger = logging.getLogger(__name__)


def shuffled_batches(groups: Sequence, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle positions into batches; drop a trailing batch of one.

    Reshuffles (up to 100 times) until every batch spans two or more groups.
    """
    n = len(groups)
    for _ in range(100):
        order = rng.permutation(n)
        batches = [order[s : s + batch_size].tolist() for s in range(0, n, batch_size)]
        batches = [b for b in batches if len(b) >= 2]
        if all(len({groups[i] for i in b}) >= 2 for b in batches):
            return batches
    raise ValueError("cannot form batches spanning two distinct ground-truth groups")


class CrossMediaRetriever(BaseEstimator):
    """Multi-level image/text alignment model.

    ``fit`` takes aligned lists of images and captions (pair ``i`` is image
    ``i`` with caption ``i``) and trains all encoders jointly with the hinge
    losses selected by ``mode``. Scoring uses the fused similarity
    restricted to the same channels.
    """

    def __init__(
        self,
        alphabet: str = DEFAULT_ALPHABET,
        seq_len: int = 60,
        conv_layers=((8, 3), (8, 3), (16, 3)),
        pool_after=(False, False, False),
        hidden_dim: int = 32,
        attn_dim: int = 32,
        common_dim: int = 32,
        project_tanh: bool = False,
        share_text_trunk: bool = False,
        margin: float = 1.0,
        k: int = 3,
        loss_weights=(1.0, 1.0, 1.0),
        mode: str = "full",
        lr: float = 1e-3,
        momentum: float = 0.9,
        optimizer: str = "sgd",
        negatives: str = "uniform",
        batch_size: int = 16,
        epochs: int = 30,
        random_state: int = 0,
        workers: int = 1,
    ):
        self.alphabet = alphabet
        self.seq_len = seq_len
        self.conv_layers = conv_layers
        self.pool_after = pool_after
        self.hidden_dim = hidden_dim
        self.attn_dim = attn_dim
        self.common_dim = common_dim
        self.project_tanh = project_tanh
        self.share_text_trunk = share_text_trunk
        self.margin = margin
        self.k = k
        self.loss_weights = loss_weights
        self.mode = mode
        self.lr = lr
        self.momentum = momentum
        self.optimizer = optimizer
        self.negatives = negatives
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.workers = workers

    # -- configuration ----------------------------------------------------------

    def _encoder_config(self, feature_dim: int) -> EncoderConfig:
        return EncoderConfig(
            alphabet=self.alphabet,
            seq_len=self.seq_len,
            conv_layers=tuple(tuple(int(v) for v in layer) for layer in self.conv_layers),
            pool_after=tuple(bool(p) for p in self.pool_after),
            hidden_dim=self.hidden_dim,
            attn_dim=self.attn_dim,
            common_dim=self.common_dim,
            feature_dim=feature_dim,
            project_tanh=self.project_tanh,
            share_text_trunk=self.share_text_trunk,
        )

    def _loss_config(self, mode: str | None = None) -> LossConfig:
        return LossConfig(self.margin, self.k, tuple(float(w) for w in self.loss_weights), mode or self.mode)

    def initialize(self, feature_dim: int) -> "CrossMediaRetriever":
        """Draw fresh parameters without training."""
        check_positive_int(feature_dim, "feature_dim")
        self._loss_config()
        self.feature_dim_ = feature_dim
        self.encoder_config_ = self._encoder_config(feature_dim)
        self.params_ = init_params(self.encoder_config_, self.random_state)
        self.history_ = []
        self.best_params_ = None
        self.best_score_ = None
        self.n_steps_ = 0
        return self

    # -- training ------------------------------------------------------------------

    def fit(
        self,
        images,
        captions,
        matches=None,
        eval_set=None,
        callback: Callable[[dict], None] | None = None,
    ) -> "CrossMediaRetriever":
        """Train on aligned (image, caption) pairs.

        ``matches`` optionally lists, per image, every caption index that is a
        ground truth for it (defaults to the diagonal). ``eval_set`` is an
        ``(images, captions[, matches])`` tuple scored after each epoch; the
        best-scoring parameters are kept in ``best_params_``. ``callback``
        receives each step's log record.
        """
        images = check_images(images)
        captions = check_captions(captions)
        check_pairs(images, captions)
        gt = check_matches(matches, len(images), len(captions))
        check_positive_int(self.batch_size, "batch_size", 2)
        check_positive_int(self.epochs, "epochs", 0)
        self.initialize(images[0].global_feat.shape[0])
        cfg = self._loss_config()
        enc = self.encoder_config_
        texts = [make_text(c, enc) for c in captions]
        groups = [min(m) for m in gt]
        rng = np.random.default_rng([self.random_state, 1])
        state = SGDState(lr=self.lr, momentum=self.momentum, kind=self.optimizer)
        channels = cfg.channels

        for epoch in range(self.epochs):
            for batch in shuffled_batches(groups, self.batch_size, rng):
                pairs = [(i, i) for i in batch]
                local_matches = {i: gt[i] for i in batch}
                triplets = sample_triplets(pairs, rng, local_matches, self.negatives)

                def loss_fn(batch=batch, triplets=triplets):
                    img_b = encode_images([images[i] for i in batch], self.params_, enc, channels)
                    txt_b = encode_texts([texts[i] for i in batch], self.params_, enc, channels)
                    return total_loss(triplets, img_b, txt_b, cfg)

                train_step(loss_fn, self.params_, state, self.history_)
                self.history_[-1]["epoch"] = epoch
                if callback is not None:
                    callback(self.history_[-1])
            if eval_set is not None:
                score = self.score(*eval_set)
                logger.info("epoch %d validation R@1 %.4f", epoch, score)
                if self.best_score_ is None or score > self.best_score_:
                    self.best_score_ = score
                    self.best_params_ = copy.deepcopy(self.params_)
        self.n_steps_ = state.step
        return self

    # -- inference ----------------------------------------------------------------

    def encode_images(self, images, mode: str | None = None) -> list[EmbeddingBundle]:
        check_is_fitted(self, "params_")
        images = check_images(images, self.feature_dim_)
        return encode_images(images, self.params_, self.encoder_config_, MODE_CHANNELS[mode or self.mode])

    def encode_texts(self, captions, mode: str | None = None, chunk: int = 256) -> list[EmbeddingBundle]:
        check_is_fitted(self, "params_")
        captions = check_captions(captions)
        out = []
        for s in range(0, len(captions), chunk):
            out.extend(encode_texts(captions[s : s + chunk], self.params_, self.encoder_config_, MODE_CHANNELS[mode or self.mode]))
        return out

    def transform(self, images) -> np.ndarray:
        """Common-space global image embeddings, one row per image."""
        return np.stack([b.global_vec.data for b in self.encode_images(images, "full")])

    def similarity(self, images, captions, mode: str | None = None) -> np.ndarray:
        mode = mode or self.mode
        img_b = self.encode_images(images, mode)
        txt_b = self.encode_texts(captions, mode)
        if self.workers <= 1 or len(img_b) < 2:
            return similarity_matrix(img_b, txt_b, self.k, mode)
        chunks = np.array_split(np.arange(len(img_b)), self.workers)
        with ThreadPoolExecutor(self.workers) as pool:
            parts = pool.map(lambda idx: similarity_matrix([img_b[i] for i in idx], txt_b, self.k, mode), chunks)
            return np.concatenate(list(parts), axis=0)

    def predict(self, images, captions) -> np.ndarray:
        """Index of the best-matching caption for every image."""
        return np.argmax(self.similarity(images, captions), axis=1)

    def evaluate(self, images, captions, matches=None, mode: str | None = None) -> tuple[RetrievalReport, RetrievalReport]:
        """Recall@{1,5,10} reports for image annotation and image retrieval."""
        mode = mode or self.mode
        images = check_images(images, getattr(self, "feature_dim_", None))
        captions = check_captions(captions)
        gt = check_matches(matches, len(images), len(captions))
        return evaluate_embeddings(self.encode_images(images, mode), self.encode_texts(captions, mode), gt, self.k, mode)

    def score(self, images, captions, matches=None) -> float:
        """Mean R@1 over both retrieval directions."""
        i2t, t2i = self.evaluate(images, captions, matches)
        return 0.5 * (i2t.recall_at[1] + t2i.recall_at[1])

    # -- persistence --------------------------------------------------------------

    def save(self, path, params=None, extra: dict | None = None) -> None:
        check_is_fitted(self, "params_")
        config = {"estimator": _jsonable(self.get_params()), "feature_dim": self.feature_dim_}
        if extra:
            config.update(extra)
        ad.save_checkpoint(path, params if params is not None else self.params_, config)

    @classmethod
    def load(cls, path) -> "CrossMediaRetriever":
        params, config = ad.load_checkpoint(path)
        if not config or "estimator" not in config:
            raise ValueError(f"{path}: checkpoint carries no estimator config")
        est = cls(**_from_jsonable(config["estimator"]))
        est.initialize(int(config["feature_dim"]))
        missing = set(est.params_) - set(params)
        unknown = set(params) - set(est.params_)
        if missing or unknown:
            raise ValueError(f"{path}: parameter names differ (missing {sorted(missing)}, unknown {sorted(unknown)})")
        for name, t in params.items():
            if t.shape != est.params_[name].shape:
                raise ValueError(f"{path}: {name} has shape {t.shape}, expected {est.params_[name].shape}")
        est.params_ = {name: params[name] for name in est.params_}
        return est


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = [list(x) if isinstance(x, tuple) else x for x in v]
        out[k] = v
    return out


def _from_jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        out[k] = v
    return out
