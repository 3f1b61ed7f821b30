import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multialign.autodiff import Tensor
from multialign.encoders import EmbeddingBundle
from multialign.retrieval import (
    RetrievalReport,
    cross_media_similarity,
    evaluate_embeddings,
    format_table,
    rank,
    rank_scores,
    recall_at_k,
    similarity_matrix,
    write_report,
    write_similarity_csv,
)


def img_bundle(r, dim=4, n=5):
    regions = r.standard_normal((n, dim))
    rel = r.standard_normal((n * (n - 1), dim)) if n >= 2 else None
    return EmbeddingBundle(Tensor(r.standard_normal(dim)), Tensor(regions), None if rel is None else Tensor(rel))


def txt_bundle(r, dim=4):
    return EmbeddingBundle(Tensor(r.standard_normal(dim)), Tensor(r.standard_normal((1, dim))), Tensor(r.standard_normal((1, dim))))


def brute_similarity(img, txt, k, mode):
    """Independent oracle: sort every dot product and average the top-K by hand."""
    g = float(np.sum(img.global_vec.data * txt.global_vec.data))
    score = g
    if mode in ("local", "full"):
        dots = sorted((float(np.sum(row * txt.locals.data[0])) for row in img.locals.data), reverse=True)
        score += sum(dots[:k]) / len(dots[:k])
    if mode in ("relation", "full") and img.relations is not None and len(img.relations.data):
        dots = sorted((float(np.sum(row * txt.relations.data[0])) for row in img.relations.data), reverse=True)
        score += sum(dots[:k]) / len(dots[:k])
    return score


# -- similarity ------------------------------------------------------------------------------


def test_zero_bundles_score_zero():
    z = EmbeddingBundle(Tensor(np.zeros(3)), Tensor(np.zeros((5, 3))), Tensor(np.zeros((20, 3))))
    t = EmbeddingBundle(Tensor(np.zeros(3)), Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))))
    assert cross_media_similarity(z, t) == 0.0


def test_single_region_uses_global_and_local_only(rng):
    img, txt = img_bundle(rng, n=1), txt_bundle(rng)
    expected = float(img.global_vec.data @ txt.global_vec.data + img.locals.data[0] @ txt.locals.data[0])
    assert cross_media_similarity(img, txt, 3, "full") == pytest.approx(expected)


@pytest.mark.parametrize("mode", ["baseline", "local", "relation", "full"])
def test_similarity_matches_brute_force(mode, rng):
    for _ in range(20):
        img, txt = img_bundle(rng), txt_bundle(rng)
        assert cross_media_similarity(img, txt, 3, mode) == pytest.approx(brute_similarity(img, txt, 3, mode), abs=1e-12)


def test_baseline_is_global_dot_only(rng):
    img, txt = img_bundle(rng), txt_bundle(rng)
    assert cross_media_similarity(img, txt, 3, "baseline") == pytest.approx(float(img.global_vec.data @ txt.global_vec.data))


def test_similarity_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        cross_media_similarity(img_bundle(rng, dim=4), txt_bundle(rng, dim=3))


def test_matrix_matches_pairwise(rng):
    imgs = [img_bundle(rng) for _ in range(4)] + [img_bundle(rng, n=1)]
    txts = [txt_bundle(rng) for _ in range(6)]
    for mode in ("baseline", "local", "relation", "full"):
        sim = similarity_matrix(imgs, txts, 3, mode)
        for i, im in enumerate(imgs):
            for j, t in enumerate(txts):
                assert sim[i, j] == pytest.approx(cross_media_similarity(im, t, 3, mode), abs=1e-12)


# -- ranking ------------------------------------------------------------------------------------


def test_gallery_of_one(rng):
    assert rank(img_bundle(rng), [txt_bundle(rng)]).tolist() == [0]


def test_empty_gallery_rejected(rng):
    with pytest.raises(ValueError):
        rank(img_bundle(rng), [])


def test_bad_direction_rejected(rng):
    with pytest.raises(ValueError):
        rank(img_bundle(rng), [txt_bundle(rng)], direction="sideways")


def test_duplicated_best_item_takes_first_two_ranks(rng):
    q = img_bundle(rng)
    gallery = [txt_bundle(rng) for _ in range(5)]
    best = int(rank(q, gallery)[0])
    gallery.append(gallery[best])
    order = rank(q, gallery).tolist()
    assert order[:2] == [best, 5]


def test_rank_agrees_with_brute_force_on_100_bundles():
    r = np.random.default_rng(5)
    gallery = [txt_bundle(r) for _ in range(100)]
    for _ in range(5):
        q = img_bundle(r)
        scores = [brute_similarity(q, t, 3, "full") for t in gallery]
        expected = sorted(range(100), key=lambda j: (-scores[j], j))
        assert rank(q, gallery).tolist() == expected


def test_text_to_image_direction(rng):
    q = txt_bundle(rng)
    gallery = [img_bundle(rng) for _ in range(10)]
    scores = [brute_similarity(g, q, 3, "full") for g in gallery]
    assert rank(q, gallery, "text_to_image").tolist() == sorted(range(10), key=lambda j: (-scores[j], j))


# integer scores keep the transformed values distinct in floating point
@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=30))
def test_rank_is_permutation_and_invariant_to_increasing_maps(scores):
    s = np.array(scores, dtype=float)
    order = rank_scores(s)
    assert sorted(order.tolist()) == list(range(len(s)))
    np.testing.assert_array_equal(order, rank_scores(np.arctan(s) * 3 + 7))


# -- recall -------------------------------------------------------------------------------------------


def test_recall_examples():
    assert recall_at_k([1, 1, 1], 1) == 1.0
    assert [recall_at_k([3], k) for k in (1, 5, 10)] == [0.0, 1.0, 1.0]
    assert recall_at_k([2, 7, 12], 5) == pytest.approx(1 / 3)


def test_recall_rejects_bad_k_and_ranks():
    with pytest.raises(ValueError):
        recall_at_k([1], 0)
    with pytest.raises(ValueError):
        recall_at_k([], 1)
    with pytest.raises(ValueError):
        recall_at_k([0], 1)


@given(st.lists(st.integers(1, 60), min_size=1, max_size=50))
def test_recall_monotone_and_saturates(ranks):
    vals = [recall_at_k(ranks, k) for k in range(1, 62)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert recall_at_k(ranks, max(ranks)) == 1.0


# -- evaluation -----------------------------------------------------------------------------------------


def test_planted_identity_alignment_is_perfect():
    r = np.random.default_rng(2)
    n, dim = 30, 8
    imgs, txts = [], []
    for _ in range(n):
        g = r.standard_normal(dim)
        g /= np.linalg.norm(g)  # equal norms: a vector's best dot partner is itself
        regions = r.standard_normal((5, dim))
        rel = r.standard_normal((20, dim))
        imgs.append(EmbeddingBundle(Tensor(g), Tensor(regions), Tensor(rel)))
        # text embeddings are scaled copies of the image's own vectors
        txts.append(EmbeddingBundle(Tensor(10 * g), Tensor(regions[:1] * 10), Tensor(rel[:1] * 10)))
    i2t, t2i = evaluate_embeddings(imgs, txts, [{i} for i in range(n)], 3, "baseline")
    assert i2t.recall_at[1] == 1.0 and t2i.recall_at[1] == 1.0


def test_evaluate_both_directions_and_multi_gt(rng):
    imgs = [img_bundle(rng) for _ in range(3)]
    txts = [txt_bundle(rng) for _ in range(6)]
    gt = [{0, 1}, {2, 3}, {4, 5}]
    i2t, t2i = evaluate_embeddings(imgs, txts, gt)
    sim = similarity_matrix(imgs, txts)
    for i, targets in enumerate(gt):
        order = sorted(range(6), key=lambda j: (-sim[i, j], j))
        assert i2t.ranks[i] == 1 + min(order.index(t) for t in targets)
    assert t2i.num_queries == 6 and i2t.num_queries == 3


@given(st.integers(0, 10_000), st.integers(2, 25))
def test_reports_monotone(seed, n):
    r = np.random.default_rng(seed)
    imgs = [img_bundle(r) for _ in range(n)]
    txts = [txt_bundle(r) for _ in range(n)]
    for report in evaluate_embeddings(imgs, txts, [{i} for i in range(n)]):
        assert report.recall_at[1] <= report.recall_at[5] <= report.recall_at[10]


def test_report_files(tmp_path, rng):
    imgs = [img_bundle(rng) for _ in range(4)]
    txts = [txt_bundle(rng) for _ in range(4)]
    i2t, t2i = evaluate_embeddings(imgs, txts, [{i} for i in range(4)], mode="local")
    write_report(tmp_path / "r.json", [i2t, t2i], {"seed": 1})
    doc = json.loads((tmp_path / "r.json").read_text())
    first = doc["reports"][0]
    assert set(first) >= {"direction", "R@1", "R@5", "R@10", "num_queries", "mode"}
    assert first["mode"] == "local" and doc["config"] == {"seed": 1}
    sim = similarity_matrix(imgs, txts)
    write_similarity_csv(tmp_path / "s.csv", sim)
    rows = (tmp_path / "s.csv").read_text().strip().splitlines()
    assert len(rows) == 5 and float(rows[1].split(",")[1]) == sim[0, 0]


def test_table_layout():
    rep = RetrievalReport("image_to_text", [1, 2], {1: 0.5, 5: 1.0, 10: 1.0})
    table = format_table(rep, RetrievalReport("text_to_image", [1, 1], {1: 1.0, 5: 1.0, 10: 1.0}))
    lines = table.splitlines()
    assert "Image annotation" in lines[0] and "Image retrieval" in lines[0]
    assert lines[1].count("R@1") == 4 and lines[1].count("R@10") == 2
    assert "0.500" in lines[2]
