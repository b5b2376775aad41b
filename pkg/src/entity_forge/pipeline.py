"""End-to-end batch engine: manifest in, per-image pseudo-label JSON out.

Per image the stages run sequentially (cluster, pool, local re-cluster,
refine gate, hierarchy); across images a worker pool fans out. No state
is shared between images, and every output file is written atomically
(temp file + rename), so results are byte-identical for a fixed config
and input regardless of worker count.
"""

from __future__ import annotations

import colorsys
import dataclasses
import hashlib
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import (
    FormatError,
    ImageRecord,
    PseudoLabel,
    decode_rle,
    labels_from_json,
    labels_to_json,
    read_feature_grid,
    read_manifest,
)
from .region_cluster import ThresholdSchedule, agglomerate, build_graph
from .candidate_pool import NmsConfig, mask_nms, mix_snapshots
from .local_recluster import (
    FEATURE_MODE_PROXY,
    PendingCropError,
    SmallSelector,
    assemble_initial_labels,
    crop_request,
    local_features,
    make_window,
    recluster_window,
    select_small,
    write_crop_requests,
)
from .refine_gate import RefineConfig, gate
from .hierarchy import CoverageConfig, build_forest
from .self_correct import DynamicThresholdParams, EmaConfig
from .evalkit import EvalConfig, EvalResult, average_recall

WORKERS_ENV = "ENTITY_FORGE_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    schedule: ThresholdSchedule = ThresholdSchedule()
    nms: NmsConfig = NmsConfig()
    small: SmallSelector = SmallSelector()
    refine: RefineConfig = RefineConfig()
    coverage: CoverageConfig = CoverageConfig()
    dynamic: DynamicThresholdParams = DynamicThresholdParams()
    ema: EmaConfig = EmaConfig()
    eval: EvalConfig = EvalConfig()
    workers: int = 1
    working_size_px: int = 1024
    local_size_px: int = 256

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.working_size_px < 1 or self.local_size_px < 1:
            raise ConfigError("sizes must be positive")


@dataclass
class RunReport:
    per_image: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def masks_per_image_mean(self) -> float:
        if not self.per_image:
            return 0.0
        return sum(r["mask_count"] for r in self.per_image) / len(self.per_image)

    def to_dict(self) -> dict:
        return {
            "per_image": self.per_image,
            "failures": self.failures,
            "aggregate": {
                "images_ok": len(self.per_image),
                "images_failed": len(self.failures),
                "masks_per_image_mean": self.masks_per_image_mean,
                "wall_seconds": self.wall_seconds,
            },
        }


# ---------------------------------------------------------------------------
# Config file parsing: flat "section.key = value" lines
# ---------------------------------------------------------------------------

def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def parse_config(text: str) -> PipelineConfig:
    values: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        values[key] = val

    def pop(key, default=None):
        return values.pop(key, default)

    try:
        cfg = PipelineConfig(
            schedule=ThresholdSchedule(
                _parse_floats(pop("schedule.thresholds", "0.6 0.5 0.4 0.3 0.2 0.1"))),
            nms=NmsConfig(
                iou_threshold=float(pop("nms.iou_threshold", "0.9")),
                ordering=pop("nms.ordering", "area_desc")),
            small=SmallSelector(
                small_fraction=float(pop("small.fraction", repr(1.0 / 1024.0)))),
            refine=RefineConfig(
                refiner=pop("refine.refiner", "builtin_morph"),
                iou_keep_threshold=float(pop("refine.iou_keep_threshold", "0.5")),
                external_dir=pop("refine.external_dir")),
            coverage=CoverageConfig(
                cover_fraction=float(pop("coverage.cover_fraction", "0.9"))),
            dynamic=DynamicThresholdParams(
                theta_small=float(pop("dynamic.theta_small", "0.3")),
                theta_large=float(pop("dynamic.theta_large", "0.7")),
                gamma=float(pop("dynamic.gamma", "200"))),
            ema=EmaConfig(momentum=float(pop("ema.momentum", "0.9995"))),
            eval=EvalConfig(
                max_predictions=int(pop("eval.max_predictions", "1000"))),
            workers=int(pop(
                "workers", os.environ.get(WORKERS_ENV, "1"))),
            working_size_px=int(pop("working_size_px", "1024")),
            local_size_px=int(pop("local_size_px", "256")),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if values:
        raise ConfigError(f"unknown config keys: {sorted(values)}")
    if os.environ.get(WORKERS_ENV):
        cfg = dataclasses.replace(cfg, workers=int(os.environ[WORKERS_ENV]))
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# explore
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, data: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def explore_image(record: ImageRecord, config: PipelineConfig,
                  feature_mode: str = FEATURE_MODE_PROXY,
                  response_dir: str | None = None) -> dict:
    """All pipeline stages for one image; returns labels + stage stats."""
    timings: dict[str, float] = {}
    counts: dict[str, int] = {}

    t0 = time.perf_counter()
    grid = read_feature_grid(record.feature_path)
    size = record.working_size_px
    if (grid.height_patches * grid.patch_stride_px != size
            or grid.width_patches * grid.patch_stride_px != size):
        raise FormatError(
            f"{record.feature_path}: grid {grid.height_patches}x"
            f"{grid.width_patches} at stride {grid.patch_stride_px} does not "
            f"tile a {size}px working image")
    if config.working_size_px != size:
        raise ConfigError(
            f"manifest working size {size} != configured {config.working_size_px}")
    if config.local_size_px % grid.patch_stride_px:
        raise ConfigError(
            f"local size {config.local_size_px} not divisible by patch "
            f"stride {grid.patch_stride_px}")
    timings["read"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    snapshots = agglomerate(build_graph(grid), config.schedule)
    timings["cluster"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pool = mix_snapshots(snapshots, record)
    counts["pool"] = len(pool)
    candidates = mask_nms(pool, config.nms)
    counts["after_nms"] = len(candidates)
    timings["pool"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    small, large = select_small(candidates, config.small, record)
    counts["small"] = len(small)
    target_side = config.local_size_px // grid.patch_stride_px
    survivors: list[PseudoLabel] = []
    for idx, lab in enumerate(small):
        window = make_window(lab, record, source_label_index=idx,
                             target_grid_side=target_side)
        local_grid = local_features(window, grid, feature_mode,
                                    image_id=record.image_id,
                                    response_dir=response_dir)
        survivors.extend(recluster_window(window, local_grid, config.schedule,
                                          record, config.nms))
    initial = assemble_initial_labels(large, survivors, config.nms)
    counts["initial"] = len(initial)
    timings["local"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    refined = gate(initial, config.refine, image_id=record.image_id)
    counts["after_gate"] = len(refined)
    timings["refine"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    forest = build_forest(refined, config.coverage)
    timings["hierarchy"] = time.perf_counter() - t0

    payload = labels_to_json(record.image_id, refined, list(forest.parent))
    return {
        "image_id": record.image_id,
        "labels_json": payload,
        "mask_count": len(refined),
        "counts": counts,
        "stage_seconds": timings,
    }


def _explore_worker(args) -> tuple[str, dict | None, str | None]:
    record, config, feature_mode, response_dir = args
    try:
        return record.image_id, explore_image(record, config, feature_mode,
                                              response_dir), None
    except PendingCropError as exc:
        return record.image_id, None, f"pending crop: {json.dumps(exc.request)}"
    except Exception as exc:  # per-image isolation
        return record.image_id, None, f"{type(exc).__name__}: {exc}"


def run_explore(manifest_path: str | Path, config: PipelineConfig,
                out_dir: str | Path, feature_mode: str = FEATURE_MODE_PROXY,
                response_dir: str | None = None) -> RunReport:
    started = time.perf_counter()
    records = read_manifest(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    report = RunReport()
    jobs = [(rec, config, feature_mode, response_dir) for rec in records]
    if config.workers == 1 or len(jobs) <= 1:
        results = map(_explore_worker, jobs)
    else:
        executor = ProcessPoolExecutor(max_workers=config.workers)
        results = executor.map(_explore_worker, jobs)

    for image_id, result, error in results:
        if error is not None:
            report.failures.append({"image_id": image_id, "error": error})
            continue
        _atomic_write(out / f"{image_id}.json", result.pop("labels_json"))
        report.per_image.append(result)

    if config.workers > 1 and len(jobs) > 1:
        executor.shutdown()
    report.wall_seconds = time.perf_counter() - started
    return report


def emit_crop_requests(manifest_path: str | Path, config: PipelineConfig,
                       out_path: str | Path) -> int:
    """First pass of the exporter-mode barrier: list every crop the
    pipeline will need, without touching local features."""
    requests = []
    for record in read_manifest(manifest_path):
        grid = read_feature_grid(record.feature_path)
        snapshots = agglomerate(build_graph(grid), config.schedule)
        candidates = mask_nms(mix_snapshots(snapshots, record), config.nms)
        small, _ = select_small(candidates, config.small, record)
        target_side = config.local_size_px // grid.patch_stride_px
        for idx, lab in enumerate(small):
            window = make_window(lab, record, source_label_index=idx,
                                 target_grid_side=target_side)
            requests.append(crop_request(record.image_id, window))
    # identical windows collapse to one request
    unique = {r["request_id"]: r for r in requests}
    write_crop_requests(out_path, [unique[k] for k in sorted(unique)])
    return len(unique)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _read_label_dir(path: str | Path) -> dict[str, list[PseudoLabel]]:
    out: dict[str, list[PseudoLabel]] = {}
    for file in sorted(Path(path).glob("*.json")):
        image_id, labels, _ = labels_from_json(file.read_text())
        if image_id in out:
            raise FormatError(f"duplicate image_id {image_id!r} in {path}")
        out[image_id] = labels
    return out


def run_eval(pred_dir: str | Path, gt_dir: str | Path,
             cfg: EvalConfig = EvalConfig()) -> tuple[EvalResult, dict]:
    preds = _read_label_dir(pred_dir)
    gts = _read_label_dir(gt_dir)
    result = average_recall(preds, gts, cfg)
    per_image = {image_id: {"gt": len(gts[image_id]),
                            "pred": len(preds.get(image_id, []))}
                 for image_id in sorted(gts)}
    return result, per_image


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def _mask_outline(dense: np.ndarray) -> np.ndarray:
    interior = dense.copy()
    interior[1:, :] &= dense[:-1, :]
    interior[:-1, :] &= dense[1:, :]
    interior[:, 1:] &= dense[:, :-1]
    interior[:, :-1] &= dense[:, 1:]
    return dense & ~interior


def _label_color(image_id: str, index: int) -> tuple[float, float, float]:
    digest = hashlib.md5(image_id.encode()).digest()
    base = int.from_bytes(digest[:4], "big") / 2 ** 32
    hue = (base + index * 0.6180339887498949) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.65, 1.0)


def render_overlays(image_dir: str | Path, labels_dir: str | Path,
                    out_dir: str | Path) -> int:
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for file in sorted(Path(labels_dir).glob("*.json")):
        image_id, labels, parents = labels_from_json(file.read_text())
        source = None
        for ext in (".png", ".jpg", ".jpeg"):
            cand = Path(image_dir) / f"{image_id}{ext}"
            if cand.exists():
                source = cand
                break
        if source is None:
            print(f"warning: no image for {image_id!r}, skipped")
            continue
        img = Image.open(source).convert("RGB")
        if labels:
            size = (labels[0].mask.width_px, labels[0].mask.height_px)
            if img.size != size:
                img = img.resize(size, Image.BILINEAR)
            canvas = np.asarray(img, dtype=np.float64)
            for idx, lab in enumerate(labels):
                dense = decode_rle(lab.mask)
                rgb = np.array(_label_color(image_id, idx)) * 255.0
                canvas[dense] = 0.5 * canvas[dense] + 0.5 * rgb
                if parents[idx] is None:
                    canvas[_mask_outline(dense)] = 0.4 * rgb
            img = Image.fromarray(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
        img.save(out / f"{image_id}.png")
        written += 1
    return written
