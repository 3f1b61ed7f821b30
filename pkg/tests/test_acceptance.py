"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The planted-retrieval and ablation criteria train the desk preset end to end
and take several minutes on one core. Run just this file with
``pytest tests/test_acceptance.py -v -s`` to watch the verdict lines.
"""

import json
import time
from functools import lru_cache

import numpy as np
import pytest

from multialign import autodiff as ad
from multialign.alignment import LossConfig, Triplet, knn_select, total_loss
from multialign.cli import gradcheck, main
from multialign.config import RunConfig
from multialign.data import SyntheticSpec, decode_caption, decode_image, generate_synthetic
from multialign.encoders import EmbeddingBundle, attention_pool, build_relations, encode_chars
from multialign.estimator import CrossMediaRetriever
from multialign.retrieval import evaluate_embeddings, rank

PLANTED = SyntheticSpec(num_pairs=250, feature_dim=32, num_regions=5, noise_sigma=0.1, seed=7)
ABLATION_SEEDS = (0, 1, 2, 3, 4)


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail}")


@lru_cache(maxsize=None)
def planted():
    ds = generate_synthetic(PLANTED)
    tr, te = ds.subset("train"), ds.subset("test")
    return ([r.image for r in tr], [r.caption for r in tr]), ([r.image for r in te], [r.caption for r in te])


@lru_cache(maxsize=None)
def trained(mode, seed):
    """Test-split R@1 (image->text, text->image) and wall time for one desk run."""
    (Xi, Xc), (Ti, Tc) = planted()
    cfg = RunConfig(mode=mode, seed=seed)
    t0 = time.perf_counter()
    est = CrossMediaRetriever(**cfg.estimator_params()).fit(Xi, Xc)
    i2t, t2i = est.evaluate(Ti, Tc)
    return i2t.recall_at[1], t2i.recall_at[1], time.perf_counter() - t0


# -- 1 ---------------------------------------------------------------------------------------


def test_c1_gradient_correctness(capsys):
    t0 = time.perf_counter()
    report = gradcheck(RunConfig())
    elapsed = time.perf_counter() - t0
    groups = {p.name for p in report.params}
    ok = report.passed and report.max_rel_error < 1e-4 and elapsed < 60
    verdict(capsys, 1, "gradient check", ok, f"max rel err {report.max_rel_error:.2e} over {len(groups)} tensors in {elapsed:.1f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------------------


def _random_bundle(r, dim, kind):
    if kind == "image":
        n = int(r.integers(1, 7))
        rel = r.standard_normal((n * (n - 1), dim)) if n > 1 else None
        return EmbeddingBundle(ad.Tensor(r.standard_normal(dim)), ad.Tensor(r.standard_normal((n, dim))), None if rel is None else ad.Tensor(rel))
    return EmbeddingBundle(ad.Tensor(r.standard_normal(dim)), ad.Tensor(r.standard_normal((1, dim))), ad.Tensor(r.standard_normal((1, dim))))


def _brute_score(img, txt, k):
    """Scalar-loop similarity: global dot plus full-sort top-K means."""
    def topk_mean(cands, q):
        dots = sorted((sum(a * b for a, b in zip(row, q)) for row in cands), reverse=True)[:k]
        return sum(dots) / len(dots)

    s = sum(a * b for a, b in zip(img.global_vec.data, txt.global_vec.data))
    s += topk_mean(img.locals.data, txt.locals.data[0])
    if img.relations is not None:
        s += topk_mean(img.relations.data, txt.relations.data[0])
    return s


def test_c2_oracle_equivalence(capsys):
    r = np.random.default_rng(2024)
    rank_bad = knn_bad = 0
    for case in range(1000):
        dim, n, k = int(r.integers(2, 6)), int(r.integers(1, 12)), int(r.integers(1, 5))
        direction = "image_to_text" if case % 2 else "text_to_image"
        q_kind, g_kind = ("image", "text") if direction == "image_to_text" else ("text", "image")
        q = _random_bundle(r, dim, q_kind)
        gallery = [_random_bundle(r, dim, g_kind) for _ in range(n)]
        pairs = [(q, g) if q_kind == "image" else (g, q) for g in gallery]
        sims = np.array([[_brute_score(i, t, k) for i, t in pairs]])
        expected = np.argsort(-sims[0], kind="stable")
        if rank(q, gallery, direction, k=k).tolist() != expected.tolist():
            rank_bad += 1
    for _ in range(1000):
        n, dim, k = int(r.integers(1, 30)), int(r.integers(1, 6)), int(r.integers(1, 8))
        # small integer grid forces frequent ties
        cands = r.integers(-3, 4, size=(n, dim)).astype(float)
        q = r.integers(-3, 4, size=dim).astype(float)
        scores = [float(sum(c * x for c, x in zip(row, q))) for row in cands]
        full = sorted(range(n), key=lambda i: (-scores[i], i))
        if knn_select(q, cands, k).tolist() != full[:k]:
            knn_bad += 1
    ok = rank_bad == 0 and knn_bad == 0
    verdict(capsys, 2, "oracle equivalence", ok, f"rank mismatches {rank_bad}/1000, knn mismatches {knn_bad}/1000")
    assert ok


# -- 3 ---------------------------------------------------------------------------------------


def test_c3_structural_constants(capsys):
    r = np.random.default_rng(3)
    checks = {}
    checks["20 relations from 5 regions"] = build_relations(r.standard_normal((5, 32))).shape == (20, 64)
    short, long_ = encode_chars("a cat", length=60), encode_chars("x" * 500, length=60)
    checks["truncate/pad to L"] = short.shape[1] == long_.shape[1] == 60 and short[:, 5:].sum() == 0
    sums = []
    for _ in range(200):
        m, h, a = int(r.integers(1, 60)), int(r.integers(1, 16)), int(r.integers(1, 16))
        _, w = attention_pool(ad.Tensor(r.standard_normal((m, h)) * 5), ad.Tensor(r.standard_normal((h, a))), ad.Tensor(r.standard_normal(a) * 5))
        sums.append(abs(w.data.sum() - 1.0))
    checks["attention sums to 1"] = max(sums) <= 1e-6
    losses = []
    for _ in range(200):
        imgs = [_random_bundle(r, 4, "image") for _ in range(3)]
        txts = [_random_bundle(r, 4, "text") for _ in range(3)]
        trip = [Triplet(0, 1, 2), Triplet(1, 2, 0), Triplet(2, 0, 1)]
        _, br = total_loss(trip, imgs, txts, LossConfig(margin=float(r.uniform(0, 2))))
        losses += [br.global_, br.local, br.relation]
    checks["hinges nonnegative"] = min(losses) >= 0
    # matched pairs far ahead of every mismatch: each hinge is exactly zero
    eye = np.eye(3) * 100
    imgs = [EmbeddingBundle(ad.Tensor(eye[i]), ad.Tensor(np.tile(eye[i], (5, 1))), ad.Tensor(np.tile(eye[i], (20, 1)))) for i in range(3)]
    txts = [EmbeddingBundle(ad.Tensor(eye[i]), ad.Tensor(eye[i][None]), ad.Tensor(eye[i][None])) for i in range(3)]
    loss, _ = total_loss([Triplet(0, 1, 2), Triplet(1, 2, 0), Triplet(2, 0, 1)], imgs, txts, LossConfig())
    checks["exact zero when margin satisfied"] = loss.item() == 0.0
    failed = [name for name, ok in checks.items() if not ok]
    verdict(capsys, 3, "structural constants", not failed, "all hold" if not failed else f"failed: {failed}")
    assert not failed


# -- 4 ---------------------------------------------------------------------------------------


def test_c4_planted_retrieval(capsys):
    # pre-run oracle: at zero noise the decoded concepts separate every pair
    clean = generate_synthetic(SyntheticSpec(num_pairs=250, noise_sigma=0.0, seed=7))
    separable = all(decode_image(rec.image, PLANTED) == decode_caption(rec.caption, PLANTED) for rec in clean.records)
    i2t, t2i, elapsed = trained("full", RunConfig().seed)
    ok = separable and i2t >= 0.8 and t2i >= 0.8 and elapsed < 600
    verdict(capsys, 4, "planted retrieval", ok, f"test R@1 i2t {i2t:.2f}, t2i {t2i:.2f} (need 0.80), {elapsed:.0f}s, oracle separable {separable}")
    assert ok


# -- 5 ---------------------------------------------------------------------------------------


def test_c5_ablation_trend(capsys):
    means = {}
    for mode in ("baseline", "local", "relation", "full"):
        scores = [trained(mode, s)[:2] for s in ABLATION_SEEDS]
        means[mode] = float(np.mean(scores))
    base = means["baseline"]
    ok = all(means[m] >= base for m in ("local", "relation", "full"))
    detail = ", ".join(f"{m} {v:.3f}" for m, v in means.items())
    verdict(capsys, 5, "ablation trend", ok, f"mean R@1 over {len(ABLATION_SEEDS)} seeds: {detail}")
    assert ok


# -- 6 ---------------------------------------------------------------------------------------


def test_c6_determinism(capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("CRAN_SEED", raising=False)
    assert main(["gen-data", "--pairs", "60", "--seed", "7", "--out", "d.jsonl"]) == 0
    outputs = []
    for run in ("a", "b"):
        assert main(["train", "--data", "d.jsonl", "--epochs", "3", "--seed", "5", "--checkpoint", f"{run}/m.json", "--log", f"{run}/log.jsonl"]) == 0
        assert main(["eval", "--checkpoint", f"{run}/m.json", "--data", "d.jsonl", "--report", f"{run}/r.json"]) == 0
        files = {}
        for name in ("m.json", "m.best.json", "log.jsonl", "r.json"):
            # the run directory itself appears in the stored config; normalise it
            files[name] = (tmp_path / run / name).read_text().replace(f"{run}/", "RUN/")
        outputs.append(files)
    same = [name for name in outputs[0] if outputs[0][name] == outputs[1][name]]
    ok = len(same) == len(outputs[0])
    verdict(capsys, 6, "determinism", ok, f"{len(same)}/{len(outputs[0])} artifacts byte-identical across two runs")
    assert ok


# -- 7 ---------------------------------------------------------------------------------------


def test_c7_recall_monotone(capsys):
    r = np.random.default_rng(77)
    reports = 0
    violations = 0
    for _ in range(300):
        n_img, dim = int(r.integers(1, 30)), int(r.integers(1, 6))
        per = int(r.integers(1, 4))
        imgs = [_random_bundle(r, dim, "image") for _ in range(n_img)]
        txts = [_random_bundle(r, dim, "text") for _ in range(n_img * per)]
        gt = [set(range(i * per, (i + 1) * per)) for i in range(n_img)]
        mode = ("baseline", "local", "relation", "full")[int(r.integers(4))]
        for rep in evaluate_embeddings(imgs, txts, gt, k=int(r.integers(1, 5)), mode=mode):
            reports += 1
            rec = rep.recall_at
            violations += not (rec[1] <= rec[5] <= rec[10])
            doc = json.loads(json.dumps(rep.to_json()))
            violations += not (doc["R@1"] <= doc["R@5"] <= doc["R@10"])
    ok = violations == 0
    verdict(capsys, 7, "recall monotone", ok, f"{violations} violations in {reports} randomized reports")
    assert ok
