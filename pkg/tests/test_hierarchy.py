"""Partition tables and centroid representations."""
import numpy as np
import pytest

from himpc.hierarchy import (
    PartitionTable,
    build_hierarchy,
    build_hierarchy_batch,
    builtin_partitions,
    load_partitions,
    register_partitions,
    save_partitions,
)


class TestBuiltinTables:
    @pytest.mark.parametrize("j", [14, 20, 25])
    def test_group_counts(self, j):
        t1, t2, t3 = builtin_partitions(j)
        assert (t1.n_groups, t2.n_groups, t3.n_groups) == (j, 10, 5)

    @pytest.mark.parametrize("j", [14, 20, 25])
    def test_disjoint_cover(self, j):
        for table in builtin_partitions(j):
            flat = [idx for group in table.groups for idx in group]
            assert sorted(flat) == list(range(j))

    def test_level1_is_singletons(self):
        t1 = builtin_partitions(25)[0]
        assert all(len(g) == 1 for g in t1.groups)
        assert [g[0] for g in t1.groups] == list(range(25))

    def test_unsupported_j_raises(self):
        with pytest.raises(ValueError, match="J=13"):
            builtin_partitions(13)

    def test_register_custom_table(self):
        levels = [
            [[0], [1], [2], [3]],
            [[0], [1], [2], [3]][:2] + [[2, 3]],
            [[0, 1], [2, 3]],
        ]
        # level 2 here has 3 groups; table validity only needs cover+disjoint
        register_partitions(4, levels)
        t1, t2, t3 = builtin_partitions(4)
        assert t1.n_groups == 4 and t2.n_groups == 3 and t3.n_groups == 2

    def test_table_file_round_trip(self, tmp_path):
        tables = builtin_partitions(20)
        path = tmp_path / "partitions.json"
        save_partitions(path, 20, tables)
        loaded = load_partitions(path)
        assert loaded == tables

    def test_overlapping_groups_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            register_partitions(3, [[[0], [1], [2]], [[0, 1], [1, 2]], [[0, 1, 2]]])


class TestBuildHierarchy:
    def test_toy_centroids(self):
        frames = np.array(
            [[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 6.0]]]
        )
        tables = (
            PartitionTable(1, ((0,), (1,), (2,), (3,))),
            PartitionTable(2, ((0, 1), (2, 3))),
            PartitionTable(3, ((0, 1, 2, 3),)),
        )
        reps = build_hierarchy(frames, tables).level_reps
        np.testing.assert_allclose(reps[1][0], [1.0, 0.0, 0.0, 0.0, 2.0, 3.0])

    def test_level1_lossless(self):
        rng = np.random.default_rng(0)
        frames = rng.normal(size=(6, 20, 3))
        reps = build_hierarchy(frames, builtin_partitions(20)).level_reps
        np.testing.assert_array_equal(reps[0], frames.reshape(6, 60))
        np.testing.assert_array_equal(reps[0].reshape(6, 20, 3), frames)

    def test_within_group_permutation_invariance(self):
        rng = np.random.default_rng(1)
        frames = rng.normal(size=(3, 20, 3))
        tables = builtin_partitions(20)
        baseline = build_hierarchy(frames, tables).level_reps
        group = tables[2].groups[1]
        permuted = frames.copy()
        permuted[:, list(group), :] = frames[:, list(group)[::-1], :]
        shuffled = build_hierarchy(permuted, tables).level_reps
        np.testing.assert_allclose(shuffled[2], baseline[2], atol=1e-15)

    def test_scaling_linearity(self):
        rng = np.random.default_rng(2)
        frames = rng.normal(size=(4, 14, 3))
        tables = builtin_partitions(14)
        base = build_hierarchy(frames, tables).level_reps
        scaled = build_hierarchy(2.5 * frames, tables).level_reps
        for a, b in zip(base, scaled):
            np.testing.assert_allclose(b, 2.5 * a, atol=1e-12)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(3)
        frames = rng.normal(size=(4, 25, 3))
        shift = np.array([0.3, -1.2, 2.0])
        tables = builtin_partitions(25)
        base = build_hierarchy(frames, tables).level_reps
        moved = build_hierarchy(frames + shift, tables).level_reps
        for table, a, b in zip(tables, base, moved):
            tiled = np.tile(shift, table.n_groups)
            np.testing.assert_allclose(b, a + tiled, atol=1e-12)

    def test_joint_count_mismatch(self):
        with pytest.raises(ValueError, match="covers"):
            build_hierarchy(np.zeros((2, 19, 3)), builtin_partitions(20))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(4)
        batch = rng.normal(size=(5, 6, 20, 3))
        tables = builtin_partitions(20)
        reps = build_hierarchy_batch(batch, tables)
        for i in range(5):
            single = build_hierarchy(batch[i], tables).level_reps
            for k in range(3):
                np.testing.assert_array_equal(reps[k][i], single[k])
