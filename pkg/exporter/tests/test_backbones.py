import numpy as np
import pytest

from entity_forge_exporter.backbones import (
    BackboneUnavailableError,
    PatchStatsBackbone,
    load_backbone,
)


def checkerboard(size=64, block=8):
    img = np.zeros((size, size, 3), dtype=np.uint8)
    for r in range(0, size, block):
        for c in range(0, size, block):
            if (r // block + c // block) % 2 == 0:
                img[r:r + block, c:c + block] = (255, 40, 10)
            else:
                img[r:r + block, c:c + block] = (10, 200, 255)
    return img


class TestPatchStats:
    def test_output_shape_and_dtype(self):
        feats = PatchStatsBackbone().extract(checkerboard())
        assert feats.shape == (8, 8, 8)
        assert feats.dtype == np.float32

    def test_deterministic(self):
        img = checkerboard()
        backbone = PatchStatsBackbone()
        assert np.array_equal(backbone.extract(img), backbone.extract(img))

    def test_unit_norm_features(self):
        feats = PatchStatsBackbone().extract(checkerboard())
        norms = np.linalg.norm(feats, axis=2)
        assert np.allclose(norms, 1.0, atol=1e-6)

    def test_distinct_colors_distinct_features(self):
        feats = PatchStatsBackbone().extract(checkerboard())
        a, b = feats[0, 0], feats[0, 1]
        assert float(np.dot(a, b)) < 0.9

    def test_rejects_unaligned_dims(self):
        with pytest.raises(ValueError):
            PatchStatsBackbone().extract(np.zeros((10, 10, 3), dtype=np.uint8))

    def test_unknown_backbone_name(self):
        with pytest.raises(ValueError):
            load_backbone("resnet")

    def test_dino_unavailable_offline(self):
        # weights cannot be fetched in this environment; the error must be
        # actionable rather than a raw download traceback
        with pytest.raises(BackboneUnavailableError, match="patchstats"):
            load_backbone("dino_vitb8")
