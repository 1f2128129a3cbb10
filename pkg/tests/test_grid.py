import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nuseg import grid, volio
from nuseg.errors import DimensionError, DomainError, FormatError, UnsupportedDtypeError


def _vol(values, shape=None):
    a = np.asarray(values, dtype=np.float64)
    return a.reshape(shape or (1, 1, a.size))


class TestGridShape:
    def test_voxel_count(self):
        assert grid.GridShape.of((2, 3, 4)).n == 24
        assert grid.GridShape.of(64).n == 262144

    @pytest.mark.parametrize("bad", [(0, 1, 1), (1, 2), (1, -1, 3)])
    def test_rejects_bad_extents(self, bad):
        with pytest.raises(DimensionError):
            grid.GridShape.of(bad)


class TestHadamard:
    def test_values(self):
        np.testing.assert_array_equal(grid.hadamard(_vol([1, 2]), _vol([3, 4])), _vol([3, 8]))

    def test_identity_and_absorbing(self):
        a = np.random.default_rng(0).normal(size=(3, 4, 5))
        np.testing.assert_array_equal(grid.hadamard(a, np.ones_like(a)), a)
        np.testing.assert_array_equal(grid.hadamard(a, np.zeros_like(a)), 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            grid.hadamard(np.ones((1, 2, 2)), np.ones((1, 2, 3)))


class TestReduceSum:
    def test_examples(self):
        assert grid.reduce_sum(_vol([1, 2, 3])) == 6.0
        assert grid.reduce_sum(np.zeros((4, 4, 4))) == 0.0
        assert grid.reduce_sum(np.ones((64, 64, 64))) == 262144.0

    def test_commutative_bit_identical(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.normal(size=(2, 5, 6, 7))
            assert grid.reduce_sum(grid.hadamard(a, b)) == grid.reduce_sum(grid.hadamard(b, a))


class TestBinarize:
    def test_strict_threshold(self):
        np.testing.assert_array_equal(grid.binarize(_vol([0.4, 0.6]), 0.5), _vol([0, 1]))
        assert grid.binarize(np.full((2, 2, 2), 0.5)).sum() == 0

    def test_idempotent(self):
        p = np.random.default_rng(2).random((4, 4, 4))
        once = grid.binarize(p, 0.5)
        np.testing.assert_array_equal(grid.binarize(once.astype(float), 0.5), once)

    def test_domain(self):
        with pytest.raises(DomainError):
            grid.binarize(_vol([0.2, 1.5]))


GROUP = grid.augmentation_group()


class TestAugmentation:
    def test_group_has_48_distinct_elements(self):
        a = np.arange(2 * 3 * 4).reshape(2, 3, 4)
        outs = {(op.apply(a).shape, op.apply(a).tobytes()) for op in GROUP}
        assert len(GROUP) == 48 and len(outs) == 48

    def test_generators_are_in_group(self):
        gens = [grid.AugmentOp.mirror(i) for i in range(3)] + [grid.AugmentOp.rot90(i) for i in range(3)]
        for g in gens:
            assert g in GROUP

    def test_generators_generate_everything(self):
        gens = [grid.AugmentOp.mirror(i) for i in range(3)] + [grid.AugmentOp.rot90(i) for i in range(3)]
        reached = {grid.AugmentOp.identity()}
        frontier = list(reached)
        while frontier:
            nxt = []
            for op in frontier:
                for g in gens:
                    c = op.then(g)
                    if c not in reached:
                        reached.add(c)
                        nxt.append(c)
            frontier = nxt
        assert reached == set(GROUP)

    def test_rot90_matches_numpy(self):
        a = np.random.default_rng(3).normal(size=(4, 4, 4))
        for axis in range(3):
            plane = tuple(i for i in range(3) if i != axis)
            np.testing.assert_array_equal(grid.augment(a, grid.AugmentOp.rot90(axis)), np.rot90(a, 1, plane))

    def test_small_orders(self):
        a = np.random.default_rng(4).normal(size=(5, 5, 5))
        m = grid.AugmentOp.mirror(1)
        np.testing.assert_array_equal(grid.augment(grid.augment(a, m), m), a)
        r = grid.AugmentOp.rot90(0)
        b = a
        for _ in range(4):
            b = grid.augment(b, r)
        np.testing.assert_array_equal(b, a)
        np.testing.assert_array_equal(grid.augment(a, grid.AugmentOp.identity()), a)

    @pytest.mark.parametrize("op", GROUP, ids=str)
    def test_inverse_round_trip_and_sum(self, op):
        a = np.random.default_rng(5).normal(size=(3, 4, 5))
        out = grid.augment(a, op)
        assert sorted(out.ravel()) == sorted(a.ravel())
        assert grid.reduce_sum(out) == pytest.approx(grid.reduce_sum(a), rel=0, abs=1e-12)
        np.testing.assert_array_equal(grid.augment(out, op.inverse()), a)

    def test_cubic_sum_exact(self):
        # same shape + permuted voxels: exact float sum is permutation-stable only up to
        # rounding, so check on integer-valued data where it is exact
        a = np.random.default_rng(6).integers(0, 100, size=(6, 6, 6)).astype(float)
        for op in GROUP:
            assert grid.reduce_sum(grid.augment(a, op)) == grid.reduce_sum(a)

    def test_parse_round_trip(self):
        for op in GROUP:
            assert grid.AugmentOp.parse(str(op)) == op


class TestVolumeFormat:
    def test_round_trip_float_and_mask(self, tmp_path):
        rng = np.random.default_rng(7)
        f = rng.normal(size=(2, 3, 4)).astype(np.float32).astype(np.float64)
        m = (rng.random((2, 3, 4)) > 0.5).astype(np.uint8)
        volio.write_volume(tmp_path / "f.nuseg", f, meta={"image_id": "i", "annotator_id": "", "kind": "x"})
        volio.write_volume(tmp_path / "m.nuseg", m)
        np.testing.assert_array_equal(volio.read_volume(tmp_path / "f.nuseg"), f)
        np.testing.assert_array_equal(volio.read_volume(tmp_path / "m.nuseg"), m)
        assert volio.read_sidecar(tmp_path / "f.nuseg")["kind"] == "x"

    def test_header_layout(self):
        data = volio.encode_volume(np.zeros((1, 2, 3), np.uint8), volio.U8)
        assert data[:6] == b"NUSEG1"
        assert data[6] == 1
        assert data[7:19] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert len(data) == 19 + 6

    def test_truncated_payload_names_file(self, tmp_path):
        path = volio.write_volume(tmp_path / "t.nuseg", np.ones((2, 2, 2)))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError, match="t.nuseg"):
            volio.read_volume(path)

    def test_foreign_dtype(self, tmp_path):
        path = volio.write_volume(tmp_path / "d.nuseg", np.ones((1, 1, 1)))
        raw = bytearray(path.read_bytes())
        raw[6] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedDtypeError):
            volio.read_volume(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.nuseg"
        path.write_bytes(b"NOTVOL" + bytes(13))
        with pytest.raises(FormatError, match="magic"):
            volio.read_volume(path)

    def test_missing_sidecar(self, tmp_path):
        path = volio.write_volume(tmp_path / "s.nuseg", np.ones((1, 1, 1)))
        with pytest.raises(FormatError, match="sidecar"):
            volio.read_sidecar(path)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 47), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_binarize_commutes_with_augmentation(k, d, h, w, seed):
    op = GROUP[k]
    p = np.random.default_rng(seed).random((d, h, w))
    np.testing.assert_array_equal(grid.binarize(grid.augment(p, op)), grid.augment(grid.binarize(p), op))
