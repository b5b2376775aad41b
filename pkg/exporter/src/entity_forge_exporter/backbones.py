"""Patch-feature backbones.

``dino_vitb8`` is the default: a self-distilled ViT with 8-px patches
pulled from torch hub, final-layer patch tokens. ``patchstats`` is a
deterministic, dependency-light fallback (per-patch color statistics and
gradient energy) used for offline runs and tests; it needs no weights
and produces the same file contract.
"""

from __future__ import annotations

import numpy as np


class BackboneUnavailableError(RuntimeError):
    pass


class PatchStatsBackbone:
    """Per-patch channel means/stds plus mean |dx|, |dy|, L2-normalized."""

    name = "patchstats"
    channels = 8

    def __init__(self, patch_px: int = 8):
        self.patch_px = patch_px

    def extract(self, image_rgb: np.ndarray) -> np.ndarray:
        ps = self.patch_px
        img = np.asarray(image_rgb, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("expected an (H, W, 3) image array")
        h, w = img.shape[:2]
        if h % ps or w % ps:
            raise ValueError(f"image dims {h}x{w} not divisible by {ps}")
        hp, wp = h // ps, w // ps
        img = img / 255.0

        patches = img.reshape(hp, ps, wp, ps, 3)
        means = patches.mean(axis=(1, 3))
        stds = patches.std(axis=(1, 3))
        dx = np.abs(np.diff(img, axis=1)).sum(axis=2)
        dy = np.abs(np.diff(img, axis=0)).sum(axis=2)
        dx = np.pad(dx, ((0, 0), (0, 1)))
        dy = np.pad(dy, ((0, 1), (0, 0)))
        gx = dx.reshape(hp, ps, wp, ps).mean(axis=(1, 3))
        gy = dy.reshape(hp, ps, wp, ps).mean(axis=(1, 3))

        feats = np.concatenate([means, stds, gx[..., None], gy[..., None]],
                               axis=2)
        norms = np.linalg.norm(feats, axis=2, keepdims=True)
        feats = np.where(norms > 0, feats / np.maximum(norms, 1e-12), 0.0)
        return feats.astype(np.float32)


class DinoVitB8Backbone:
    """Self-supervised ViT-B with 8-px patches; final-layer patch tokens."""

    name = "dino_vitb8"
    channels = 768

    def __init__(self, patch_px: int = 8):
        if patch_px != 8:
            raise ValueError("dino_vitb8 has a fixed 8-px patch size")
        self.patch_px = 8
        try:
            import torch
            self._torch = torch
            self._model = torch.hub.load("facebookresearch/dino:main",
                                         "dino_vitb8")
        except Exception as exc:
            raise BackboneUnavailableError(
                f"cannot load dino_vitb8 weights ({exc}); use --backbone "
                f"patchstats for an offline run") from exc
        self._model.eval()

    def extract(self, image_rgb: np.ndarray) -> np.ndarray:
        torch = self._torch
        img = np.asarray(image_rgb, dtype=np.float32) / 255.0
        mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
        std = np.array([0.229, 0.224, 0.225], dtype=np.float32)
        x = torch.from_numpy(((img - mean) / std).transpose(2, 0, 1))[None]
        h, w = img.shape[:2]
        with torch.no_grad():
            tokens = self._model.get_intermediate_layers(x, n=1)[0]
        patch_tokens = tokens[0, 1:, :]  # drop the class token
        hp, wp = h // 8, w // 8
        return patch_tokens.reshape(hp, wp, -1).numpy().astype(np.float32)


BACKBONES = {
    PatchStatsBackbone.name: PatchStatsBackbone,
    DinoVitB8Backbone.name: DinoVitB8Backbone,
}
DEFAULT_BACKBONE = DinoVitB8Backbone.name


def load_backbone(name: str, patch_px: int = 8):
    try:
        cls = BACKBONES[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; "
                         f"choices: {sorted(BACKBONES)}") from None
    return cls(patch_px=patch_px)
