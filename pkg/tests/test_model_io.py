import numpy as np
import pytest

from deltacomp.errors import IntegrityError, UsageError
from deltacomp.model_io import (
    ModelCheckpoint,
    extract_delta,
    load_checkpoint,
    restore,
    save_checkpoint,
    total_size,
)
from deltacomp.numerics import Rng, gaussian_matrix


@pytest.fixture
def backbone():
    rng = Rng(4)
    return ModelCheckpoint.from_tensors(
        {
            "layers.0.w": gaussian_matrix(rng, 16, 24),
            "layers.0.bias": gaussian_matrix(rng, 7, 1)[:, 0],
            "layers.1.w": gaussian_matrix(rng, 24, 16),
        }
    )


@pytest.fixture
def aligned(backbone):
    rng = Rng(5)
    shifted = {
        name: t + 0.05 * gaussian_matrix(rng, *(t.shape if t.ndim == 2 else (t.shape[0], 1))).reshape(t.shape)
        for name, t in backbone.tensors.items()
    }
    return ModelCheckpoint.from_tensors(shifted)


class TestExtractDelta:
    def test_identical_checkpoints_give_zero(self, backbone):
        d = extract_delta(backbone, backbone)
        assert all(np.all(t == 0) for t in d.tensors.values())

    def test_elementwise_difference(self):
        b = ModelCheckpoint.from_tensors({"w": np.array([[1.0, 2.0]], dtype=np.float32)})
        a = ModelCheckpoint.from_tensors({"w": np.array([[3.0, 2.0]], dtype=np.float32)})
        d = extract_delta(a, b)
        assert np.array_equal(d.tensors["w"], [[2.0, 0.0]])
        assert d.backbone_checksum == b.checksum

    def test_roundtrip_identity(self, backbone, aligned):
        d = extract_delta(aligned, backbone)
        again = restore(backbone, d)
        for name in backbone.tensors:
            assert np.array_equal(again.tensors[name], aligned.tensors[name])

    def test_name_set_mismatch_lists_names(self, backbone):
        other = ModelCheckpoint.from_tensors({"odd": np.ones((2, 2), dtype=np.float32)})
        with pytest.raises(UsageError, match="odd"):
            extract_delta(other, backbone)

    def test_shape_mismatch_names_tensor(self, backbone):
        tensors = dict(backbone.tensors)
        tensors["layers.0.w"] = np.ones((2, 2), dtype=np.float32)
        other = ModelCheckpoint.from_tensors(tensors)
        with pytest.raises(UsageError, match="layers.0.w"):
            extract_delta(other, backbone)


class TestRestore:
    def test_zero_delta_reproduces_backbone(self, backbone):
        d = extract_delta(backbone, backbone)
        out = restore(backbone, d)
        for name in backbone.tensors:
            assert np.array_equal(out.tensors[name], backbone.tensors[name])
        assert out.checksum == backbone.checksum

    def test_checksum_gate(self, backbone, aligned):
        d = extract_delta(aligned, backbone)
        with pytest.raises(IntegrityError) as exc:
            restore(aligned, d)
        assert exc.value.code == "CHECKSUM_MISMATCH"

    def test_force_overrides_gate(self, backbone, aligned):
        d = extract_delta(aligned, backbone)
        assert restore(aligned, d, force=True) is not None


class TestTotalSize:
    def test_no_deltas(self):
        assert total_size(0, 13.0, 1 / 16) == 13.0

    def test_alpha_n_equals_one(self):
        assert total_size(16, 13.0, 1 / 16) == 26.0

    def test_four_models(self):
        assert total_size(4, 13.0, 1 / 16) == 16.25

    def test_affine_in_n(self):
        m, alpha = 7.0, 0.03
        sizes = [total_size(n, m, alpha) for n in range(5)]
        steps = np.diff(sizes)
        assert np.allclose(steps, alpha * m)
        assert sizes[0] == m


class TestCheckpointFormat:
    def test_save_load_byte_identical(self, backbone, tmp_path):
        p1, p2 = tmp_path / "a.dckp", tmp_path / "b.dckp"
        save_checkpoint(backbone, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_order_and_vec_flag_preserved(self, backbone, tmp_path):
        p = tmp_path / "c.dckp"
        save_checkpoint(backbone, p)
        loaded = load_checkpoint(p)
        assert list(loaded.tensors) == list(backbone.tensors)
        assert loaded.tensors["layers.0.bias"].ndim == 1

    def test_prologue_layout(self, backbone, tmp_path):
        p = tmp_path / "d.dckp"
        save_checkpoint(backbone, p)
        blob = p.read_bytes()
        assert blob[:4] == b"DCKP"
        assert int.from_bytes(blob[4:8], "little") == 1
        header_len = int.from_bytes(blob[8:16], "little")
        import json

        header = json.loads(blob[16 : 16 + header_len])
        assert header["checksum"] == str(backbone.checksum)
        offsets = [row["offset"] for row in header["tensors"]]
        assert all(off % 64 == 0 for off in offsets)

    def test_bad_magic(self, backbone, tmp_path):
        p = tmp_path / "e.dckp"
        save_checkpoint(backbone, p)
        blob = bytearray(p.read_bytes())
        blob[:4] = b"XXXX"
        p.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError) as exc:
            load_checkpoint(p)
        assert exc.value.code == "MAGIC_MISMATCH"

    def test_truncated(self, backbone, tmp_path):
        p = tmp_path / "f.dckp"
        save_checkpoint(backbone, p)
        p.write_bytes(p.read_bytes()[:60])
        with pytest.raises(IntegrityError) as exc:
            load_checkpoint(p)
        assert exc.value.code == "TRUNCATED"

    def test_payload_corruption_detected(self, backbone, tmp_path):
        p = tmp_path / "g.dckp"
        save_checkpoint(backbone, p)
        blob = bytearray(p.read_bytes())
        blob[-1] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError) as exc:
            load_checkpoint(p)
        assert exc.value.code == "CHECKSUM_MISMATCH"

    def test_duplicate_names_rejected(self):
        pairs = [("w", np.ones((1, 1), dtype=np.float32)),
                 ("w", np.ones((1, 1), dtype=np.float32))]
        with pytest.raises(UsageError, match="duplicate"):
            ModelCheckpoint.from_tensors(pairs)
