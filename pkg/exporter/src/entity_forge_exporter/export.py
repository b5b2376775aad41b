"""Feature export over image batches, and crop-request answering.

Both operations speak only the pipeline's file formats: SFG1 grids, the
JSONL manifest, and the crop request/response exchange.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backbones import DEFAULT_BACKBONE, load_backbone
from .sfg import write_sfg

LOCAL_CROP_PX = 256  # crops are resized to this before the second pass
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ExportJob:
    image_paths: list = field(default_factory=list)
    backbone: str = DEFAULT_BACKBONE
    working_size_px: int = 1024
    out_dir: str = "features"

    def __post_init__(self):
        patch = 8
        if self.working_size_px % patch:
            raise ValueError("working size must be divisible by the patch size")


def _load_resized(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        if rgb.size != (size, size):
            rgb = rgb.resize((size, size), Image.BILINEAR)
        return np.asarray(rgb)


def export_features(job: ExportJob) -> list[dict]:
    """One SFG1 per decodable image plus a manifest; returns the records."""
    backbone = load_backbone(job.backbone)
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for path in map(Path, job.image_paths):
        try:
            with Image.open(path) as img:
                original_w, original_h = img.size
            pixels = _load_resized(path, job.working_size_px)
        except Exception as exc:
            print(f"warning: skipping {path}: {exc}")
            continue
        feats = backbone.extract(pixels)
        sfg_path = out / f"{path.stem}.sfg"
        write_sfg(sfg_path, feats, patch_stride_px=backbone.patch_px)
        records.append({
            "image_id": path.stem,
            "feature_path": str(sfg_path),
            "original_height_px": original_h,
            "original_width_px": original_w,
            "working_size_px": job.working_size_px,
        })
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n"
                                for r in records))
    return records


def _find_image(image_dir: Path, image_id: str) -> Path | None:
    for ext in IMAGE_EXTENSIONS:
        cand = image_dir / f"{image_id}{ext}"
        if cand.exists():
            return cand
    return None


def answer_crops(request_file: str | Path, image_dir: str | Path,
                 out_dir: str | Path, backbone_name: str = DEFAULT_BACKBONE,
                 working_size_px: int = 1024) -> tuple[int, list[dict]]:
    """Answer each crop request with a 32x32xC SFG1 named <request_id>.sfg.

    Window coordinates are in the pipeline's working space, so the source
    image is resized to the working size before cropping. Unknown images
    and out-of-bounds windows become entries in errors.jsonl; a duplicate
    request_id overwrites the earlier response with a warning.
    """
    backbone = load_backbone(backbone_name)
    image_dir = Path(image_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    errors: list[dict] = []
    seen: set[str] = set()
    answered = 0
    cache: dict[str, np.ndarray] = {}

    for line in Path(request_file).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        request_id = req["request_id"]
        window = req["window"]
        if request_id in seen:
            print(f"warning: duplicate request id {request_id}, overwriting")
        seen.add(request_id)

        image_id = req["image_id"]
        source = _find_image(image_dir, image_id)
        if source is None:
            errors.append({"request_id": request_id,
                           "error": f"unknown image_id {image_id!r}"})
            continue
        x, y, side = window["x"], window["y"], window["side"]
        if x < 0 or y < 0 or side < 1 or x + side > working_size_px \
                or y + side > working_size_px:
            errors.append({"request_id": request_id,
                           "error": f"window {window} outside working bounds"})
            continue
        if image_id not in cache:
            cache[image_id] = _load_resized(source, working_size_px)
        crop = cache[image_id][y:y + side, x:x + side]
        crop = np.asarray(Image.fromarray(crop).resize(
            (LOCAL_CROP_PX, LOCAL_CROP_PX), Image.BILINEAR))
        feats = backbone.extract(crop)
        write_sfg(out / f"{request_id}.sfg", feats,
                  patch_stride_px=backbone.patch_px)
        answered += 1

    if errors:
        (out / "errors.jsonl").write_text(
            "".join(json.dumps(e, sort_keys=True) + "\n" for e in errors))
    return answered, errors
