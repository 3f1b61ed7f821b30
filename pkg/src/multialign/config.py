"""Run configuration: one flat JSON document plus named presets."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .alignment import MODES, NEGATIVE_STRATEGIES
from .encoders import DEFAULT_ALPHABET, EncoderConfig

SEED_ENV = "CRAN_SEED"


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a training or evaluation run.

    Defaults are the desk preset. ``paper`` swaps in the full-size encoder
    constants (sequence length 201, conv widths 384/512/2048, a 2048-d
    recurrent state and a 1024-d common space).
    """

    # encoder
    alphabet: str = DEFAULT_ALPHABET
    seq_len: int = 60
    conv_layers: tuple = ((8, 3), (8, 3), (16, 3))
    pool_after: tuple = (False, False, False)
    hidden_dim: int = 32
    attn_dim: int = 32
    common_dim: int = 32
    project_tanh: bool = False
    share_text_trunk: bool = False
    # loss
    margin: float = 1.0
    k: int = 3
    loss_weights: tuple = (1.0, 1.0, 1.0)
    mode: str = "full"
    negatives: str = "uniform"
    # optimisation
    optimizer: str = "adam"
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    # evaluation
    workers: int = 1
    train_split: str = "train"
    val_split: str = "val"
    eval_split: str = "test"
    # gradient check: entries sampled per parameter tensor (0 = all)
    gradcheck_entries: int = 6
    gradcheck_tolerance: float = 1e-4
    # paths
    dataset: str | None = None
    checkpoint: str | None = None
    report: str | None = None
    log: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.negatives not in NEGATIVE_STRATEGIES:
            raise ValueError(f"negatives must be one of {NEGATIVE_STRATEGIES}, got {self.negatives!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.margin < 0 or self.lr < 0:
            raise ValueError("margin and lr must be nonnegative")
        for name in ("k", "batch_size", "hidden_dim", "attn_dim", "common_dim", "seq_len", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        # coerce JSON lists back to tuples so configs compare and hash cleanly
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in layer) for layer in self.conv_layers))
        object.__setattr__(self, "pool_after", tuple(bool(p) for p in self.pool_after))
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if len(self.loss_weights) != 3:
            raise ValueError("loss_weights needs three entries (global, local, relation)")
        self.encoder(1)  # validates conv/pool shapes and the alphabet

    def encoder(self, feature_dim: int) -> EncoderConfig:
        return EncoderConfig(
            alphabet=self.alphabet,
            seq_len=self.seq_len,
            conv_layers=self.conv_layers,
            pool_after=self.pool_after,
            hidden_dim=self.hidden_dim,
            attn_dim=self.attn_dim,
            common_dim=self.common_dim,
            feature_dim=feature_dim,
            project_tanh=self.project_tanh,
            share_text_trunk=self.share_text_trunk,
        )

    def estimator_params(self) -> dict:
        """Keyword arguments for :class:`~multialign.estimator.CrossMediaRetriever`."""
        keys = (
            "alphabet", "seq_len", "conv_layers", "pool_after", "hidden_dim", "attn_dim", "common_dim",
            "project_tanh", "share_text_trunk", "margin", "k", "loss_weights", "mode", "negatives",
            "optimizer", "lr", "momentum", "batch_size", "epochs", "workers",
        )
        out = {key: getattr(self, key) for key in keys}
        out["random_state"] = self.seed
        return out

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def with_overrides(self, **overrides) -> "RunConfig":
        _reject_unknown(overrides)
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


PRESETS: dict[str, dict] = {
    "desk": {},
    "paper": {
        "seq_len": 201,
        "conv_layers": ((384, 4), (512, 4), (2048, 4)),
        "pool_after": (True, True, False),
        "hidden_dim": 2048,
        "attn_dim": 2048,
        "common_dim": 1024,
        "optimizer": "sgd",
        "lr": 1e-3,
        "batch_size": 16,
    },
}


def _reject_unknown(doc: dict) -> None:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")


def load_config(path=None, preset: str = "desk", overrides: dict | None = None, env=None) -> RunConfig:
    """Preset, then JSON file, then explicit overrides, then ``CRAN_SEED``."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    doc = dict(PRESETS[preset])
    if path is not None:
        try:
            file_doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(file_doc, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        _reject_unknown(file_doc)
        doc.update(file_doc)
    if overrides:
        _reject_unknown(overrides)
        doc.update({k: v for k, v in overrides.items() if v is not None})
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            doc["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ValueError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return RunConfig(**doc)
