"""Paired image/caption datasets: JSONL storage, a synthetic generator, batching.

File layout: the first line is a header object (dims, counts, meta); each
following line is one record ``{id, split, global, regions, caption,
gt_links}``. ``gt_links`` lists the ids of records whose image matches this
record's caption and always contains the record's own id.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .encoders import ImageInstance

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1

OBJECTS = (
    "cat", "dog", "car", "tree", "cup", "hat", "box", "sun",
    "bird", "fish", "ball", "lamp", "book", "shoe", "bed", "key",
)
RELATIONS = ("on", "under", "near", "behind")


class DatasetError(ValueError):
    pass


@dataclass
class Record:
    id: str
    image: ImageInstance
    caption: str
    gt_links: list[str]
    split: str = "train"


@dataclass
class Dataset:
    records: list[Record]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._validate()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def feature_dim(self) -> int:
        return int(self.records[0].image.global_feat.shape[0])

    def indices(self, split: str | None) -> list[int]:
        if split is None or split == "all":
            return list(range(len(self.records)))
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return [i for i, r in enumerate(self.records) if r.split == split]

    def subset(self, split: str | None) -> list[Record]:
        return [self.records[i] for i in self.indices(split)]

    def image_matches(self, idx: Sequence[int]) -> list[set[int]]:
        """For each position in ``idx``, positions whose caption matches its image."""
        pos = {self.records[i].id: p for p, i in enumerate(idx)}
        out: list[set[int]] = [set() for _ in idx]
        for p_txt, i in enumerate(idx):
            for link in self.records[i].gt_links:
                if link in pos:
                    out[pos[link]].add(p_txt)
        return out

    def group_of(self, i: int) -> str:
        """Canonical ground-truth group label of a record (its smallest linked id)."""
        return min(self.records[i].gt_links)

    def _validate(self) -> None:
        if not self.records:
            raise DatasetError("dataset has no records")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("record ids are not unique")
        known = set(ids)
        dim = self.records[0].image.global_feat.shape
        for i, r in enumerate(self.records):
            if r.image.global_feat.ndim != 1 or r.image.global_feat.shape != dim:
                raise DatasetError(f"record {i} ({r.id}): global feature shape {r.image.global_feat.shape}, expected {dim}")
            if r.image.regions.shape[1] != dim[0]:
                raise DatasetError(f"record {i} ({r.id}): region dim {r.image.regions.shape[1]}, expected {dim[0]}")
            if r.split not in SPLITS:
                raise DatasetError(f"record {i} ({r.id}): unknown split {r.split!r}")
            if not r.gt_links:
                raise DatasetError(f"record {i} ({r.id}): no ground-truth links")
            for link in r.gt_links:
                if link not in known:
                    raise DatasetError(f"record {i} ({r.id}): dangling link {link!r}")


# -- file format ----------------------------------------------------------------


def save_dataset(ds: Dataset, path, sidecar: bool = False) -> None:
    """Write ``ds`` as JSON Lines.

    With ``sidecar=True`` the features go to ``<path>.bin`` as little-endian
    float32 instead, and each record stores its float offset and region count.
    """
    path = Path(path)
    counts = {s: len(ds.indices(s)) for s in SPLITS}
    header = {
        "format": "multialign-pairs",
        "version": FORMAT_VERSION,
        "num_pairs": len(ds),
        "feature_dim": ds.feature_dim,
        "splits": counts,
        "meta": ds.meta,
    }
    blobs, offset = [], 0
    if sidecar:
        header["sidecar"] = path.name + ".bin"
        header["sidecar_dtype"] = SIDECAR_DTYPE
    lines = [json.dumps(header, sort_keys=True)]
    for r in ds.records:
        obj = {"id": r.id, "split": r.split, "caption": r.caption, "gt_links": list(r.gt_links)}
        if sidecar:
            flat = np.concatenate([r.image.global_feat, r.image.regions.ravel()]).astype(SIDECAR_DTYPE)
            obj.update(offset=offset, num_regions=int(r.image.regions.shape[0]))
            blobs.append(flat)
            offset += flat.size
        else:
            obj.update({"global": r.image.global_feat.tolist(), "regions": r.image.regions.tolist()})
        lines.append(json.dumps(obj, sort_keys=True))
    if sidecar:
        path.with_name(header["sidecar"]).write_bytes(np.concatenate(blobs).tobytes() if blobs else b"")
    path.write_text("\n".join(lines) + "\n")


_REQUIRED = ("id", "caption", "gt_links")
SIDECAR_DTYPE = "<f4"


def _sidecar_features(obj, n, blob, dim):
    try:
        start, m = int(obj["offset"]), int(obj["num_regions"])
    except (KeyError, TypeError, ValueError):
        raise DatasetError(f"record {n}: sidecar records need integer 'offset' and 'num_regions'") from None
    end = start + dim * (m + 1)
    if start < 0 or m < 1 or end > blob.size:
        raise DatasetError(f"record {n}: sidecar span [{start}, {end}) outside file of {blob.size} floats")
    flat = blob[start:end].astype(np.float64)
    return flat[:dim], flat[dim:].reshape(m, dim)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: header is not JSON ({exc})") from None
    dim = header.get("feature_dim")
    blob = None
    if header.get("sidecar"):
        if dim is None:
            raise DatasetError(f"{path}: a sidecar dataset needs 'feature_dim' in the header")
        side = path.with_name(header["sidecar"])
        if not side.exists():
            raise DatasetError(f"{path}: sidecar {side.name} not found")
        blob = np.frombuffer(side.read_bytes(), dtype=header.get("sidecar_dtype", SIDECAR_DTYPE))
    records = []
    for n, line in enumerate(lines[1:]):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"record {n}: not JSON ({exc})") from None
        missing = [k for k in _REQUIRED if k not in obj]
        if missing:
            raise DatasetError(f"record {n}: missing field(s) {missing}")
        if blob is not None and "global" not in obj:
            glob, regions = _sidecar_features(obj, n, blob, dim)
        else:
            if "global" not in obj or "regions" not in obj:
                raise DatasetError(f"record {n}: missing field(s) ['global', 'regions']")
            glob = np.asarray(obj["global"], dtype=np.float64)
            try:
                regions = np.asarray(obj["regions"], dtype=np.float64)
            except ValueError:
                raise DatasetError(f"record {n}: regions have mixed dimensions") from None
        if regions.ndim != 2 or regions.shape[0] < 1:
            raise DatasetError(f"record {n}: regions must be a non-empty list of vectors")
        if dim is not None and (glob.shape != (dim,) or regions.shape[1] != dim):
            raise DatasetError(f"record {n}: feature dim {glob.shape}/{regions.shape[1]} does not match header dim {dim}")
        records.append(Record(
            id=str(obj["id"]),
            image=ImageInstance(glob, regions),
            caption=str(obj["caption"]),
            gt_links=[str(x) for x in obj["gt_links"]],
            split=obj.get("split", "train"),
        ))
    return Dataset(records, header.get("meta", {}))


# -- synthetic generator ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_pairs: int = 250
    feature_dim: int = 32
    num_regions: int = 5
    objects: tuple[str, ...] = OBJECTS
    relations: tuple[str, ...] = RELATIONS
    noise_sigma: float = 0.1
    seed: int = 7
    split: tuple[float, float, float] = (0.8, 0.0, 0.2)

    def validate(self) -> None:
        if self.num_pairs < 1:
            raise DatasetError(f"num_pairs must be >= 1, got {self.num_pairs}")
        if self.noise_sigma < 0:
            raise DatasetError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.num_regions < 2:
            raise DatasetError(f"num_regions must be >= 2, got {self.num_regions}")
        if len(self.objects) < self.num_regions:
            raise DatasetError(f"need at least {self.num_regions} object words, got {len(self.objects)}")
        if not self.relations:
            raise DatasetError("need at least one relation word")
        if len(set(self.objects) | set(self.relations)) != len(self.objects) + len(self.relations):
            raise DatasetError("object and relation words must be distinct")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or sum(self.split) <= 0:
            raise DatasetError(f"split fractions invalid: {self.split}")
        if self.feature_dim < 1:
            raise DatasetError(f"feature_dim must be >= 1, got {self.feature_dim}")


def prototypes(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Object, relation-subject and relation-object prototype vectors.

    They are mutually orthogonal when ``feature_dim`` has room for all of
    them, otherwise random directions; either way each has norm
    ``sqrt(feature_dim)`` so entries are unit-variance next to the noise.
    """
    rng = np.random.default_rng([spec.seed, 1])
    n_obj, n_rel = len(spec.objects), len(spec.relations)
    total = n_obj + 2 * n_rel
    if spec.feature_dim >= total:
        q, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, total)))
        basis = q.T
    else:
        basis = rng.standard_normal((total, spec.feature_dim))
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    basis = basis * np.sqrt(spec.feature_dim)
    return basis[:n_obj], basis[n_obj : n_obj + n_rel], basis[n_obj + n_rel :]


def caption_for(objs: Sequence[str], rel: str) -> str:
    """``"<a> <rel> <b> with <c> <d> ..."``; the relation links the first two objects."""
    head = f"{objs[0]} {rel} {objs[1]}"
    rest = " ".join(objs[2:])
    return f"{head} with {rest}" if rest else head


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Planted-concept pairs.

    Each pair draws distinct objects (one per region) and a relation between
    the first two. Region ``j`` is its object prototype; the two related
    regions also carry relation-subject/object prototypes. Regions are
    shuffled, noised, and averaged (plus noise) into the global feature.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    obj_p, subj_p, objr_p = prototypes(spec)
    n = spec.num_regions
    seen: set[tuple] = set()
    tuples = []
    attempts = 0
    while len(tuples) < spec.num_pairs:
        attempts += 1
        if attempts > 100 * spec.num_pairs:
            raise DatasetError("could not draw enough distinct concept tuples; add vocabulary or regions")
        objs = tuple(int(o) for o in rng.choice(len(spec.objects), size=n, replace=False))
        rel = int(rng.integers(len(spec.relations)))
        key = (objs[0], rel, objs[1], frozenset(objs[2:]))
        if key in seen:
            continue
        seen.add(key)
        tuples.append((objs, rel))

    fractions = np.asarray(spec.split, dtype=float) / sum(spec.split)
    n_train = int(round(fractions[0] * spec.num_pairs))
    n_val = int(round(fractions[1] * spec.num_pairs))
    split_of = ["train"] * n_train + ["val"] * n_val + ["test"] * (spec.num_pairs - n_train - n_val)

    records = []
    for p, (objs, rel) in enumerate(tuples):
        regions = obj_p[list(objs)].copy()
        regions[0] += subj_p[rel]
        regions[1] += objr_p[rel]
        order = rng.permutation(n)
        regions = regions[order] + spec.noise_sigma * rng.standard_normal(regions.shape)
        glob = regions.mean(axis=0) + spec.noise_sigma * rng.standard_normal(spec.feature_dim)
        rid = f"p{p:05d}"
        records.append(Record(
            id=rid,
            image=ImageInstance(glob, regions),
            caption=caption_for([spec.objects[o] for o in objs], spec.relations[rel]),
            gt_links=[rid],
            split=split_of[p],
        ))
    meta = {"generator": "synthetic", **{k: v for k, v in asdict(spec).items()}}
    meta["objects"] = list(spec.objects)
    meta["relations"] = list(spec.relations)
    meta["split"] = list(spec.split)
    return Dataset(records, meta)


def decode_image(image: ImageInstance, spec: SyntheticSpec) -> tuple[frozenset[str], str]:
    """Nearest-prototype decoding of an image's planted objects and relation."""
    obj_p, subj_p, _ = prototypes(spec)
    objs = frozenset(spec.objects[int(np.argmax(obj_p @ r))] for r in image.regions)
    rel_scores = (subj_p @ image.regions.T).max(axis=1)
    return objs, spec.relations[int(np.argmax(rel_scores))]


def decode_caption(caption: str, spec: SyntheticSpec) -> tuple[frozenset[str], str]:
    words = caption.split()
    return frozenset(w for w in words if w in spec.objects), next(w for w in words if w in spec.relations)


# -- batching ---------------------------------------------------------------------


def batch_iter(ds: Dataset, split: str, batch_size: int, seed: int, epoch: int = 0) -> Iterator[list[int]]:
    """Shuffled batches of record indices for one epoch.

    A trailing batch smaller than two is dropped. A batch whose members all
    share one ground-truth group is reshuffled (up to 100 tries).
    """
    idx = ds.indices(split)
    if not idx:
        raise DatasetError(f"split {split!r} is empty")
    if batch_size < 2:
        raise DatasetError(f"batch_size must be >= 2, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    for _ in range(100):
        order = [idx[i] for i in rng.permutation(len(idx))]
        batches = [order[s : s + batch_size] for s in range(0, len(order), batch_size)]
        batches = [b for b in batches if len(b) >= 2]
        if all(len({ds.group_of(i) for i in b}) >= 2 for b in batches):
            break
    else:
        raise DatasetError(f"split {split!r} cannot form batches with two distinct ground-truth groups")
    yield from batches
