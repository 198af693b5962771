import numpy as np
import pytest

from mipreid.dataset import SynthSpec, generate_dataset
from mipreid.errors import EmptyGalleryError, NoPositiveError, ZeroNormError
from mipreid.evaluator import (
    Direction,
    Protocol,
    average_precision,
    build_gallery,
    compute_metrics,
    evaluate_all,
    evaluate_features,
    headline_rank1,
    rank_queries,
    write_results,
)
from mipreid.mpl import IR, VIS

from oracles import metrics_bruteforce, random_retrieval_instance, ranking_bruteforce


@pytest.fixture(scope="module")
def gallery_ds():
    return generate_dataset(SynthSpec(num_train_ids=1, num_test_ids=10, images_per_id_per_modality=20))


class TestGallery:
    def test_single_shot_one_per_id(self, gallery_ds):
        g = build_gallery(gallery_ds, Protocol.SINGLE_SHOT, Direction.IR_TO_VIS, np.random.default_rng(0))
        assert len(g) == 10
        assert (gallery_ds.modalities[g] == VIS).all()
        assert sorted(gallery_ds.identities[g]) == sorted(gallery_ds.test_ids)

    def test_multi_shot_ten_per_id(self, gallery_ds):
        g = build_gallery(gallery_ds, Protocol.MULTI_SHOT, Direction.VIS_TO_IR, np.random.default_rng(0))
        assert len(g) == len(set(g)) == 100
        assert (gallery_ds.modalities[g] == IR).all()

    def test_multi_shot_clamps(self):
        ds = generate_dataset(SynthSpec(num_train_ids=1, num_test_ids=1, images_per_id_per_modality=3))
        g = build_gallery(ds, Protocol.MULTI_SHOT, Direction.IR_TO_VIS, np.random.default_rng(0))
        assert len(g) == 3

    def test_empty(self, gallery_ds):
        with pytest.raises(EmptyGalleryError):
            build_gallery(gallery_ds, Protocol.SINGLE_SHOT, Direction.IR_TO_VIS, np.random.default_rng(0), ids=[999])


class TestRanking:
    def test_self_first(self):
        q = np.array([[1.0, 0.0]])
        assert rank_queries(q, np.array([[0.0, 1.0], [1.0, 0.0]])).tolist() == [[1, 0]]

    def test_scale_invariance(self, rng):
        q, g = rng.standard_normal((5, 8)), rng.standard_normal((7, 8))
        np.testing.assert_array_equal(rank_queries(q, g), rank_queries(3.7 * q, 0.01 * g))

    def test_matches_bruteforce(self, rng):
        q, g = rng.standard_normal((5, 8)), rng.standard_normal((9, 8))
        np.testing.assert_array_equal(rank_queries(q, g), ranking_bruteforce(q, g))

    def test_ties_break_by_gallery_index(self):
        g = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [2.0, 0.0]])
        assert rank_queries(np.array([[1.0, 0.0]]), g).tolist() == [[0, 2, 3, 1]]

    def test_zero_norm(self):
        with pytest.raises(ZeroNormError):
            rank_queries(np.zeros((1, 3)), np.ones((2, 3)))


class TestMetrics:
    def test_perfect(self):
        ranked = np.array([[0, 1, 2], [1, 0, 2]])
        res = compute_metrics(ranked, [5, 6], [5, 6, 7])
        assert res.rank1 == 1.0 and res.map == 1.0

    def test_positives_at_one_and_three(self):
        assert average_precision(np.array([True, False, True, False])) == pytest.approx((1 + 2 / 3) / 2)
        res = compute_metrics(np.array([[0, 1, 2, 3]]), [1], [1, 2, 1, 3])
        assert res.map == pytest.approx(0.8333, abs=1e-4)

    def test_positive_second_of_two(self):
        res = compute_metrics(np.array([[0, 1]]), [4], [3, 4])
        assert res.rank1 == 0.0 and res.map == 0.5

    def test_no_positive(self):
        with pytest.raises(NoPositiveError):
            compute_metrics(np.array([[0, 1]]), [9], [3, 4])

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_bruteforce_oracle(self, seed):
        q, g, qids, gids = random_retrieval_instance(np.random.default_rng(seed))
        res = compute_metrics(rank_queries(q, g), qids, gids)
        assert (res.rank1, res.map) == pytest.approx(metrics_bruteforce(q, g, qids, gids), abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_gallery_permutation_invariance(self, seed):
        rng = np.random.default_rng(100 + seed)
        q, g, qids, gids = random_retrieval_instance(rng)
        base = compute_metrics(rank_queries(q, g), qids, gids)
        perm = rng.permutation(len(g))
        moved = compute_metrics(rank_queries(q, g[perm]), qids, gids[perm])
        assert moved.rank1 == pytest.approx(base.rank1) and moved.map == pytest.approx(base.map)


def _oracle_features(ds):
    # identity one-hot plus modality offset: perfect retrieval
    feats = np.zeros((len(ds), ds.identities.max() + 2))
    feats[np.arange(len(ds)), ds.identities] = 1.0
    feats[:, -1] = 0.1 * ds.modalities
    return feats


def test_oracle_features_score_perfectly(gallery_ds):
    summaries = evaluate_all(gallery_ds, _oracle_features(gallery_ds), draws=3)
    assert len(summaries) == 4
    for s in summaries:
        assert s.rank1 == 1.0 and s.map == pytest.approx(1.0)
    assert headline_rank1(summaries) == 1.0


def test_random_features_near_chance(gallery_ds, rng):
    feats = rng.standard_normal((len(gallery_ds), 16))
    s = evaluate_features(gallery_ds, feats, Protocol.SINGLE_SHOT, Direction.IR_TO_VIS, draws=10)
    assert 0.0 <= s.rank1 <= 0.3
    assert len(s.draws) == 10


def test_seeded_draws_reproducible(gallery_ds, rng):
    feats = rng.standard_normal((len(gallery_ds), 16))
    a = evaluate_features(gallery_ds, feats, Protocol.SINGLE_SHOT, Direction.VIS_TO_IR, seed=4)
    b = evaluate_features(gallery_ds, feats, Protocol.SINGLE_SHOT, Direction.VIS_TO_IR, seed=4)
    assert (a.rank1, a.map) == (b.rank1, b.map)


def test_multi_shot_map_bounded(gallery_ds, rng):
    feats = rng.standard_normal((len(gallery_ds), 16))
    s = evaluate_features(gallery_ds, feats, Protocol.MULTI_SHOT, Direction.IR_TO_VIS, draws=2)
    assert 0.0 < s.map <= 1.0


def test_write_results(tmp_path, gallery_ds):
    summaries = evaluate_all(gallery_ds, _oracle_features(gallery_ds), draws=1)
    write_results(summaries, tmp_path / "results.csv", tmp_path / "results.txt")
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert lines[0] == "protocol,direction,rank1,map,seed" and len(lines) == 5
    kv = dict(line.split("=") for line in (tmp_path / "results.txt").read_text().splitlines())
    assert float(kv["single_shot.ir_to_vis.rank1"]) == 1.0
