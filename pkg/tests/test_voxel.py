import numpy as np
import pytest

from skelmesh.voxel import (
    SubVolume, VoxelGrid, dilate, downsample, iou, load_voxb, partition,
    save_voxb, stitch, upsample_replicate, voxelize,
)

BBOX = ([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])


def random_grid(rng, dims=(8, 8, 8)):
    return VoxelGrid(rng.random(dims), *BBOX)


class TestVoxelize:
    def test_single_point_one_voxel(self):
        # point at the center of cell (1,2,3) of a 4^3 grid
        lo, hi = np.array(BBOX[0]), np.array(BBOX[1])
        cell = (hi - lo) / 4
        p = lo + (np.array([1, 2, 3]) + 0.5) * cell
        g = voxelize(p[None, :], (4, 4, 4), *BBOX)
        assert g.occupied_count() == 1
        assert g.values[1, 2, 3] == 1.0

    def test_empty_cloud(self):
        g = voxelize(np.zeros((0, 3)), (4, 4, 4), *BBOX)
        assert g.occupied_count() == 0

    def test_diagonal_sixteen_cells(self):
        t = np.linspace(-1, 1, 100)
        pts = np.stack([t, t, t], axis=1)
        g = voxelize(pts, (16, 16, 16), *BBOX)
        assert g.occupied_count() == 16
        occ = np.argwhere(g.values == 1.0)
        assert np.all(occ[:, 0] == occ[:, 1]) and np.all(occ[:, 1] == occ[:, 2])

    def test_bbox_max_clamped(self):
        g = voxelize(np.array([[1.0, 1.0, 1.0]]), (4, 4, 4), *BBOX)
        assert g.values[3, 3, 3] == 1.0

    def test_point_outside_reports_index(self):
        pts = np.array([[0, 0, 0], [5.0, 0, 0]])
        with pytest.raises(ValueError, match="1"):
            voxelize(pts, (4, 4, 4), *BBOX)

    def test_occupied_at_most_cloud_size(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pts = rng.uniform(-1, 1, size=(rng.integers(1, 50), 3))
            g = voxelize(pts, (8, 8, 8), *BBOX)
            assert g.occupied_count() <= len(pts)


class TestDilate:
    def test_interior_point_27(self):
        v = np.zeros((5, 5, 5))
        v[2, 2, 2] = 1.0
        g = dilate(VoxelGrid(v, *BBOX), 1)
        assert g.occupied_count() == 27

    def test_radius_zero_identity(self):
        rng = np.random.default_rng(1)
        v = (rng.random((6, 6, 6)) > 0.5).astype(float)
        g = VoxelGrid(v, *BBOX)
        assert np.array_equal(dilate(g, 0).values, v)

    def test_plane_to_slab(self):
        v = np.zeros((8, 8, 8))
        v[4, :, :] = 1.0
        g = dilate(VoxelGrid(v, *BBOX), 1)
        assert g.occupied_count() == 3 * 64

    def test_extensive_and_monotone(self):
        rng = np.random.default_rng(2)
        v = (rng.random((8, 8, 8)) > 0.8).astype(float)
        g = VoxelGrid(v, *BBOX)
        prev = g
        for r in range(3):
            cur = dilate(g, r)
            assert np.all(cur.values >= v)
            assert np.all(cur.values >= prev.values)
            prev = cur

    def test_nonbinary_rejected(self):
        with pytest.raises(ValueError):
            dilate(VoxelGrid(np.full((4, 4, 4), 0.5), *BBOX), 1)


class TestDownsample:
    def test_all_ones(self):
        g = downsample(VoxelGrid(np.ones((8, 8, 8)), *BBOX), 2)
        assert g.dims == (4, 4, 4)
        assert np.all(g.values == 1.0)

    def test_single_voxel_survives(self):
        v = np.zeros((8, 8, 8))
        v[3, 5, 7] = 1.0
        g = downsample(VoxelGrid(v, *BBOX), 2)
        assert g.occupied_count() == 1
        assert g.values[1, 2, 3] == 1.0

    def test_matches_block_max_oracle(self):
        rng = np.random.default_rng(3)
        v = rng.random((16, 16, 16))
        g = downsample(VoxelGrid(v, *BBOX), 4)
        want = np.zeros((4, 4, 4))
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    want[i, j, k] = v[4 * i:4 * i + 4, 4 * j:4 * j + 4, 4 * k:4 * k + 4].max()
        assert np.array_equal(g.values, want)

    def test_occupancy_never_lost(self):
        rng = np.random.default_rng(4)
        v = (rng.random((8, 8, 8)) > 0.7).astype(float)
        g = VoxelGrid(v, *BBOX)
        up = upsample_replicate(downsample(g, 2), 2)
        assert np.all(up.values >= v)

    def test_indivisible_error(self):
        with pytest.raises(ValueError):
            downsample(VoxelGrid(np.ones((6, 6, 6)), *BBOX), 4)


class TestPartitionStitch:
    def test_single_cover(self):
        g = VoxelGrid(np.random.default_rng(5).random((64, 64, 64)), *BBOX)
        parts = partition(g, 64, 64)
        assert len(parts) == 1
        assert parts[0].origin == (0, 0, 0)

    def test_overlapped_offsets(self):
        g = VoxelGrid(np.zeros((128, 128, 128)), *BBOX)
        parts = partition(g, 64, 32)
        assert len(parts) == 27
        offs = sorted({p.origin[0] for p in parts})
        assert offs == [0, 32, 64]

    def test_clamped_final_offset(self):
        g = VoxelGrid(np.zeros((96, 96, 96)), *BBOX)
        parts = partition(g, 64, 64)
        assert len(parts) == 8
        offs = sorted({p.origin[0] for p in parts})
        assert offs == [0, 32]

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            dims = tuple(rng.choice([8, 12, 16]) for _ in range(3))
            g = VoxelGrid(rng.random(dims), *BBOX)
            crop = 8
            stride = int(rng.choice([4, 8]))
            parts = partition(g, crop, stride)
            back = stitch(parts, g.dims, g.bbox_min, g.bbox_max)
            assert np.array_equal(back.values, g.values)

    def test_mean_blend(self):
        a = SubVolume(VoxelGrid(np.zeros((4, 4, 4)), *BBOX), (0, 0, 0))
        b = SubVolume(VoxelGrid(np.ones((4, 4, 4)), *BBOX), (0, 0, 0))
        out = stitch([a, b], (4, 4, 4), *BBOX)
        assert np.all(out.values == 0.5)

    def test_stitch_matches_accumulate_oracle(self):
        rng = np.random.default_rng(7)
        dims = (10, 10, 10)
        parts = []
        acc = np.zeros(dims)
        cnt = np.zeros(dims)
        for _ in range(6):
            o = tuple(rng.integers(0, 5, size=3))
            v = rng.random((5, 5, 5))
            parts.append(SubVolume(VoxelGrid(v, *BBOX), o))
            acc[o[0]:o[0] + 5, o[1]:o[1] + 5, o[2]:o[2] + 5] += v
            cnt[o[0]:o[0] + 5, o[1]:o[1] + 5, o[2]:o[2] + 5] += 1
        if np.any(cnt == 0):
            with pytest.raises(ValueError):
                stitch(parts, dims, *BBOX)
        else:
            out = stitch(parts, dims, *BBOX)
            assert np.allclose(out.values, acc / cnt)

    def test_uncovered_error(self):
        p = SubVolume(VoxelGrid(np.ones((4, 4, 4)), *BBOX), (0, 0, 0))
        with pytest.raises(ValueError):
            stitch([p], (8, 8, 8), *BBOX)

    def test_part_exceeds_dims(self):
        p = SubVolume(VoxelGrid(np.ones((4, 4, 4)), *BBOX), (6, 0, 0))
        with pytest.raises(ValueError):
            stitch([p], (8, 8, 8), *BBOX)

    def test_order_independent(self):
        rng = np.random.default_rng(8)
        g = VoxelGrid(rng.random((16, 16, 16)), *BBOX)
        parts = partition(g, 8, 4)
        fwd = stitch(parts, g.dims, g.bbox_min, g.bbox_max)
        rev = stitch(parts[::-1], g.dims, g.bbox_min, g.bbox_max)
        assert np.array_equal(fwd.values, rev.values)

    def test_crop_too_large(self):
        g = VoxelGrid(np.zeros((8, 8, 8)), *BBOX)
        with pytest.raises(ValueError):
            partition(g, 16, 8)


class TestIou:
    def test_self_is_one(self):
        rng = np.random.default_rng(9)
        g = VoxelGrid((rng.random((8, 8, 8)) > 0.5).astype(float), *BBOX)
        assert iou(g, g) == 1.0

    def test_disjoint_zero(self):
        a = np.zeros((4, 4, 4)); a[0, 0, 0] = 1
        b = np.zeros((4, 4, 4)); b[3, 3, 3] = 1
        assert iou(VoxelGrid(a, *BBOX), VoxelGrid(b, *BBOX)) == 0.0

    def test_half_overlap_bars(self):
        # two 8-voxel bars overlapping in 4 voxels: 4 / 12 by set counting
        a = np.zeros((16, 4, 4)); a[0:8, 0, 0] = 1
        b = np.zeros((16, 4, 4)); b[4:12, 0, 0] = 1
        got = iou(VoxelGrid(a, *BBOX), VoxelGrid(b, *BBOX))
        inter = np.count_nonzero((a > 0) & (b > 0))
        union = np.count_nonzero((a > 0) | (b > 0))
        assert got == pytest.approx(inter / union) == pytest.approx(4 / 12)

    def test_both_empty_defined_one(self):
        z = VoxelGrid(np.zeros((4, 4, 4)), *BBOX)
        assert iou(z, z) == 1.0

    def test_dims_mismatch(self):
        with pytest.raises(ValueError):
            iou(VoxelGrid(np.zeros((4, 4, 4)), *BBOX), VoxelGrid(np.zeros((8, 8, 8)), *BBOX))

    def test_range(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            a = random_grid(rng)
            b = random_grid(rng)
            v = iou(a, b)
            assert 0.0 <= v <= 1.0


class TestVoxb:
    def test_binary_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        g = VoxelGrid((rng.random((5, 6, 7)) > 0.5).astype(float), [-1, -2, -3], [1, 2, 3])
        p = tmp_path / "g.voxb"
        save_voxb(p, g)
        back = load_voxb(p)
        assert back.dims == g.dims
        assert np.array_equal(back.values, g.values)
        assert np.allclose(back.bbox_min, g.bbox_min)
        # binary payload is 1 byte per voxel
        expected = 4 + 16 + 24 + 1 + 5 * 6 * 7
        assert p.stat().st_size == expected

    def test_real_roundtrip(self, tmp_path):
        rng = np.random.default_rng(12)
        g = random_grid(rng, (4, 5, 6))
        p = tmp_path / "g.voxb"
        save_voxb(p, g)
        back = load_voxb(p)
        assert np.allclose(back.values, g.values, atol=1e-6)  # f32 payload

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.voxb"
        p.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ValueError):
            load_voxb(p)

    def test_x_fastest_order(self, tmp_path):
        v = np.zeros((2, 2, 2))
        v[1, 0, 0] = 1.0  # second byte in x-fastest order
        p = tmp_path / "o.voxb"
        save_voxb(p, VoxelGrid(v, *BBOX))
        payload = p.read_bytes()[45:]
        assert payload[0] == 0 and payload[1] == 1
