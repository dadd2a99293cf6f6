"""k-means, VLAD aggregation, normalization, and codebook serialization."""

import numpy as np
import pytest

from multirate.encoding import (Codebook, encode_groups, kmeans_fit, late_fuse,
                                load_codebook, pca_fit, save_codebook,
                                vlad_encode)
from multirate.errors import DataError
from multirate.recurrent import MgruConfig
from multirate.rng import RngState

from oracles import brute_force_vlad


class TestKmeans:
    def test_two_point_clusters_found_exactly(self):
        x = np.array([[0.0], [0.0], [10.0], [10.0]])
        cb = kmeans_fit(x, 2, rng=RngState(0))
        assert sorted(cb.centers.ravel().tolist()) == [0.0, 10.0]

    def test_single_center_is_the_mean(self):
        x = RngState(1).uniform((20, 3), -1, 1)
        cb = kmeans_fit(x, 1, rng=RngState(0))
        np.testing.assert_allclose(cb.centers[0], x.mean(axis=0), rtol=1e-9)

    def test_sse_non_increasing_over_lloyd_iterations(self):
        rng = RngState(2)
        blobs = np.concatenate([rng.normal((40, 4), mean=m) for m in (-3, 0, 3)])

        def sse(iters, seed):
            cb = kmeans_fit(blobs, 5, iters=iters, rng=RngState(seed))
            d2 = ((blobs[:, None, :] - cb.centers[None]) ** 2).sum(axis=2)
            return d2.min(axis=1).sum()

        for seed in range(10):
            values = [sse(i, seed) for i in range(1, 6)]
            assert all(a >= b - 1e-9 for a, b in zip(values, values[1:]))

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            kmeans_fit(np.ones((2, 3)), 5, rng=RngState(0))

    def test_deterministic_given_seed(self):
        x = RngState(3).uniform((50, 4))
        a = kmeans_fit(x, 4, rng=RngState(7)).centers
        b = kmeans_fit(x, 4, rng=RngState(7)).centers
        np.testing.assert_array_equal(a, b)


class TestPca:
    def test_projection_rows_orthonormal(self):
        x = RngState(4).normal((60, 6))
        _, proj = pca_fit(x, 3)
        np.testing.assert_allclose(proj @ proj.T, np.eye(3), atol=1e-9)

    def test_disabled_when_not_reducing(self):
        x = RngState(5).uniform((30, 4))
        cb = kmeans_fit(x, 2, rng=RngState(0), pca_dim=4)
        assert cb.pca_proj is None


class TestVlad:
    def test_residual_sum_single_center(self):
        cb = Codebook(np.zeros((1, 2)))
        out = vlad_encode(np.array([[1.0, 0.0], [0.0, 1.0]]), cb)
        # pre-normalization residual is (1, 1); after SSR and l2 both equal
        expected = np.array([1.0, 1.0])
        expected = expected / np.linalg.norm(expected)
        np.testing.assert_allclose(out.values, expected, atol=1e-9)

    def test_ssr_is_signed_square_root(self):
        v = np.array([4.0, -9.0])
        np.testing.assert_allclose(np.sign(v) * np.sqrt(np.abs(v)), [2.0, -3.0])

    def test_matches_brute_force_on_random_instances(self):
        rng = RngState(11)
        for trial in range(20):
            n = int(rng.integers(1, 101))
            d = int(rng.integers(1, 9))
            k = int(rng.integers(1, 9))
            x = rng.uniform((n, d), -2, 2)
            centers = rng.uniform((k, d), -2, 2)
            cb = Codebook(centers.astype(np.float64))
            got = vlad_encode(x, cb).values
            want = brute_force_vlad(x, centers)
            assert np.max(np.abs(got - want)) < 1e-6

    def test_full_pipeline_unit_norm(self):
        rng = RngState(12)
        for _ in range(5):
            x = rng.uniform((30, 4), -1, 1)
            cb = kmeans_fit(x, 3, rng=RngState(1))
            out = vlad_encode(x, cb)
            assert abs(np.linalg.norm(out.values) - 1.0) < 1e-6
            assert out.normalizations == ("ssr", "intra", "l2")

    def test_row_permutation_invariance(self):
        rng = RngState(13)
        x = rng.uniform((40, 3), -1, 1)
        cb = kmeans_fit(x, 4, rng=RngState(2))
        base = vlad_encode(x, cb).values
        perm = vlad_encode(x[rng.permutation(40)], cb).values
        np.testing.assert_allclose(base, perm, atol=1e-9)

    def test_points_on_centers_give_zero_vector(self):
        centers = np.array([[1.0, 0.0], [0.0, 1.0]])
        cb = Codebook(centers)
        out = vlad_encode(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]), cb)
        assert np.all(out.values == 0.0)

    def test_empty_input_is_flagged_zero(self):
        cb = Codebook(np.zeros((2, 3)))
        out = vlad_encode(np.empty((0, 3)), cb)
        assert out.empty and np.all(out.values == 0.0)
        assert np.linalg.norm(out.values) == 0.0


class TestGroups:
    def test_k1_equals_whole_state_encoding(self):
        cfg = MgruConfig((4,), (1,))
        states = RngState(14).uniform((20, 4), -1, 1)
        cb = kmeans_fit(states, 3, rng=RngState(3))
        grouped = encode_groups(states, cfg, [cb])
        np.testing.assert_array_equal(grouped[0].values, vlad_encode(states, cb).values)

    def test_equal_groups_output_shapes(self):
        cfg = MgruConfig((2, 2, 2), (1, 3, 6))
        states = RngState(15).uniform((20, 6), -1, 1)
        books = [kmeans_fit(states[:, i:i + 2], 4, rng=RngState(i)) for i in (0, 2, 4)]
        outs = encode_groups(states, cfg, books)
        assert len(outs) == 3
        assert all(o.values.shape == (2 * 4,) for o in outs)

    def test_zeroing_one_group_changes_only_its_vector(self):
        cfg = MgruConfig((2, 2, 2), (1, 3, 6))
        rng = RngState(16)
        states = rng.uniform((25, 6), -1, 1)
        books = [kmeans_fit(states[:, o:o + 2], 3, rng=RngState(o)) for o in (0, 2, 4)]
        base = encode_groups(states, cfg, books)
        altered = states.copy()
        altered[:, 2:4] = 0.0
        changed = encode_groups(altered, cfg, books)
        np.testing.assert_array_equal(base[0].values, changed[0].values)
        assert not np.array_equal(base[1].values, changed[1].values)
        np.testing.assert_array_equal(base[2].values, changed[2].values)

    def test_codebook_count_mismatch_rejected(self):
        cfg = MgruConfig((2, 2), (1, 2))
        with pytest.raises(ValueError):
            encode_groups(np.zeros((5, 4)), cfg, [Codebook(np.zeros((2, 2)))])


class TestLateFusion:
    def test_identical_vectors_unchanged(self):
        v = np.array([0.2, 0.8, -0.1])
        np.testing.assert_array_equal(late_fuse([v, v, v]), v)

    def test_two_vector_average(self):
        np.testing.assert_allclose(late_fuse([np.array([1.0, 0.0]),
                                              np.array([0.0, 1.0])]),
                                   [0.5, 0.5])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            late_fuse([])

    def test_fused_argmax_tracks_group_majority(self):
        rng = RngState(17)
        agree = 0
        trials = 200
        for _ in range(trials):
            true = int(rng.integers(0, 4))
            groups = []
            for _ in range(3):
                scores = rng.normal((4,), std=0.3)
                scores[true] += 1.0
                groups.append(scores)
            fused_arg = int(np.argmax(late_fuse(groups)))
            votes = [int(np.argmax(g)) for g in groups]
            majority = max(set(votes), key=votes.count)
            agree += fused_arg == majority
        assert agree / trials >= 0.9


class TestCodebookIO:
    def test_round_trip_without_pca(self, tmp_path):
        cb = Codebook(RngState(18).uniform((4, 3), -1, 1))
        path = tmp_path / "book.vcbk"
        save_codebook(path, cb)
        loaded = load_codebook(path)
        np.testing.assert_allclose(loaded.centers, cb.centers, atol=1e-7)
        assert loaded.pca_proj is None

    def test_round_trip_with_pca(self, tmp_path):
        x = RngState(19).normal((50, 6))
        cb = kmeans_fit(x, 3, rng=RngState(4), pca_dim=2)
        assert cb.pca_proj is not None
        path = tmp_path / "book.vcbk"
        save_codebook(path, cb)
        loaded = load_codebook(path)
        np.testing.assert_allclose(loaded.pca_proj, cb.pca_proj, atol=1e-7)
        np.testing.assert_allclose(loaded.pca_mean, cb.pca_mean, atol=1e-7)
        # encodings agree after the f32 round trip
        q = RngState(20).normal((10, 6))
        a = vlad_encode(q, cb).values
        b = vlad_encode(q, loaded).values
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.vcbk"
        path.write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(DataError):
            load_codebook(path)
