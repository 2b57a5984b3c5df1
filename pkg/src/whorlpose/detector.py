"""
Whorl pose detections and the backends that produce them.

A whorl is a single-class pose instance with three ordered keypoints:
0 = left branch tip, 1 = whorl center on the stem, 2 = right branch tip.
All coordinates are normalized to the image width/height, y growing downward.

Backends implement ``detect(SectionImage) -> list[RawDetection]``:

- FixtureDetector: detections read from a predictions JSON file
- TensorFixtureDetector: raw (14, N) exported model tensors stored per image
- OracleDetector: synthetic-tree ground truth projected into the image
- OnnxDetector: live session over an exported pose model (optional dependency)
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Protocol, Sequence

import numpy as np

from .projection import ImageMeta, SectionImage

if TYPE_CHECKING:
    from .synthgen import SynthGroundTruth

log = logging.getLogger(__name__)

N_KEYPOINTS = 3
TENSOR_ROWS = 5 + 3 * N_KEYPOINTS  # box(4) + score + 3 x (x, y, conf)
ORACLE_BOX_PAD = 0.02


class PredictionsSchemaError(ValueError):
    pass


def _clamp01(v: float) -> float:
    return min(1.0, max(0.0, float(v)))


@dataclass(frozen=True)
class RawDetection:
    """One whorl detection in normalized image coordinates.

    Coordinates are clamped to [0, 1] and the two tips are put in canonical
    order (keypoint 0 is the tip with the smaller x) on construction.
    """

    bbox_norm: tuple[float, float, float, float]
    score: float
    keypoints: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        if len(self.bbox_norm) != 4:
            raise ValueError(f"bbox needs 4 values, got {len(self.bbox_norm)}")
        if len(self.keypoints) != N_KEYPOINTS:
            raise ValueError(f"expected exactly {N_KEYPOINTS} keypoints, got {len(self.keypoints)}")
        kps = []
        for kp in self.keypoints:
            if len(kp) != 3:
                raise ValueError("each keypoint needs (x, y, score)")
            kps.append(tuple(_clamp01(v) for v in kp))
        if kps[0][0] > kps[2][0]:
            kps[0], kps[2] = kps[2], kps[0]
        object.__setattr__(self, "keypoints", tuple(kps))
        object.__setattr__(self, "bbox_norm", tuple(_clamp01(v) for v in self.bbox_norm))
        object.__setattr__(self, "score", _clamp01(self.score))

    def to_json(self) -> dict:
        return {"bbox": list(self.bbox_norm), "score": self.score,
                "keypoints": [list(k) for k in self.keypoints]}


class DetectorPort(Protocol):
    def detect(self, image: SectionImage) -> list[RawDetection]: ...


@dataclass
class DecoderConfig:
    score_threshold: float = 0.25
    nms_iou_threshold: float = 0.7
    kp_score_threshold: float = 0.3
    # set when the exported model emits logits instead of sigmoid scores
    scores_are_logits: bool = False

    def __post_init__(self):
        for name in ("score_threshold", "nms_iou_threshold", "kp_score_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


# ------------------------------------------------------- predictions file

def _parse_detection(obj, where: str) -> RawDetection:
    if not isinstance(obj, dict):
        raise PredictionsSchemaError(f"{where}: expected an object")
    for key in ("bbox", "score", "keypoints"):
        if key not in obj:
            raise PredictionsSchemaError(f"{where}: missing field {key!r}")
    bbox, score, kps = obj["bbox"], obj["score"], obj["keypoints"]
    if not isinstance(bbox, list) or len(bbox) != 4 or not all(isinstance(v, (int, float)) for v in bbox):
        raise PredictionsSchemaError(f"{where}.bbox: expected 4 numbers")
    if not isinstance(score, (int, float)) or isinstance(score, bool):
        raise PredictionsSchemaError(f"{where}.score: expected a number")
    if not isinstance(kps, list):
        raise PredictionsSchemaError(f"{where}.keypoints: expected a list")
    if len(kps) != N_KEYPOINTS:
        raise PredictionsSchemaError(f"{where}.keypoints: expected {N_KEYPOINTS} keypoints, got {len(kps)}")
    for j, kp in enumerate(kps):
        if not isinstance(kp, list) or len(kp) != 3 or not all(isinstance(v, (int, float)) for v in kp):
            raise PredictionsSchemaError(f"{where}.keypoints[{j}]: expected [x, y, c]")
    return RawDetection(tuple(bbox), float(score), tuple(tuple(k) for k in kps))


def parse_predictions(doc) -> dict[str, list[RawDetection]]:
    if not isinstance(doc, dict):
        raise PredictionsSchemaError("top level must map image name -> list of detections")
    out = {}
    for name, dets in doc.items():
        if not isinstance(dets, list):
            raise PredictionsSchemaError(f"{name}: expected a list of detections")
        out[name] = [_parse_detection(d, f"{name}[{i}]") for i, d in enumerate(dets)]
    return out


def load_predictions_file(path) -> dict[str, list[RawDetection]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise PredictionsSchemaError(f"{path}: invalid JSON ({e})") from e
    return parse_predictions(doc)


def write_predictions_file(preds: dict[str, Sequence[RawDetection]], path) -> Path:
    path = Path(path)
    doc = {name: [d.to_json() for d in dets] for name, dets in sorted(preds.items())}
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


# ------------------------------------------------------------ raw tensors

def read_tensor_file(path) -> np.ndarray:
    """Read a '(rows, N)' little-endian float32 tensor stored column-major."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: tensor file shorter than its 8-byte header")
    rows, n = struct.unpack_from("<II", raw, 0)
    expected = 8 + 4 * rows * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for ({rows},{n}), got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=8, count=rows * n)
    return flat.reshape((rows, n), order="F").astype(np.float64)


def write_tensor_file(tensor: np.ndarray, path) -> Path:
    t = np.asarray(tensor, dtype="<f4")
    if t.ndim != 2:
        raise ValueError("tensor must be 2-D")
    path = Path(path)
    path.write_bytes(struct.pack("<II", *t.shape) + t.ravel(order="F").tobytes())
    return path


def _sort_key(d: RawDetection):
    return (-d.score, d.bbox_norm[1], d.bbox_norm[0])


def decode_pose_tensor(raw: np.ndarray, meta: ImageMeta, cfg: DecoderConfig | None = None) -> list[RawDetection]:
    """Decode a single-class, 3-keypoint pose export of shape (14, N).

    Rows 0-3: box center/size in pixels, row 4: score, rows 5-13: three
    (x_px, y_px, score) keypoint triplets. Returns detections at or above the
    score threshold sorted by score descending. No NMS is applied.
    """
    cfg = cfg or DecoderConfig()
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 3 and raw.shape[0] == 1:
        raw = raw[0]
    if raw.ndim != 2 or raw.shape[0] != TENSOR_ROWS:
        raise ValueError(f"expected a ({TENSOR_ROWS}, N) tensor, got shape {raw.shape}")
    if not np.isfinite(raw).all():
        raise ValueError("tensor contains non-finite values")

    scores = raw[4]
    kp_scores = raw[7::3]
    if cfg.scores_are_logits:
        scores = 1.0 / (1.0 + np.exp(-scores))
        kp_scores = 1.0 / (1.0 + np.exp(-kp_scores))
    w, h = float(meta.width_px), float(meta.height_px)
    out = []
    for j in np.flatnonzero(scores >= cfg.score_threshold):
        col = raw[:, j]
        bbox = (col[0] / w, col[1] / h, col[2] / w, col[3] / h)
        kps = tuple((col[5 + 3 * k] / w, col[6 + 3 * k] / h, kp_scores[k, j]) for k in range(N_KEYPOINTS))
        out.append(RawDetection(bbox, scores[j], kps))
    out.sort(key=_sort_key)
    return out


def iou(a, b) -> float:
    """IoU of two center-format (xc, yc, w, h) boxes."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    # areas from the same corners as the intersection, so identical boxes give exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def nms(dets: Sequence[RawDetection], iou_threshold: float) -> list[RawDetection]:
    order = sorted(dets, key=_sort_key)
    keep: list[RawDetection] = []
    for d in order:
        if all(iou(d.bbox_norm, k.bbox_norm) <= iou_threshold for k in keep):
            keep.append(d)
    return keep


# ---------------------------------------------------------------- oracle

def oracle_detect(truth: "SynthGroundTruth", meta: ImageMeta, noise_sigma_m: float = 0.0,
                  seed: int = 0) -> list[RawDetection]:
    """Project ground-truth whorls falling inside the image window into detections.

    The image x-window is centered on the stem axis, so each whorl center maps
    to the window center and each tip to center + its in-plane offset
    foreshortened by the angle between the branch plane and the view.
    Keypoints can be perturbed by isotropic Gaussian noise (metres).
    """
    if noise_sigma_m < 0:
        raise ValueError("noise_sigma_m must be >= 0")
    rng = np.random.default_rng(
        [int(seed), zlib.crc32(meta.tree_id.encode()), int(round(meta.view_angle_deg * 1000)), meta.section_index])
    xc = 0.5 * (meta.x_min + meta.x_max)
    out = []
    for w in truth.whorls:
        if not meta.z_min <= w.z_m <= meta.z_max:
            continue
        foreshorten = math.cos(math.radians(w.azimuth_deg - meta.view_angle_deg))
        world = np.array([
            [xc + (w.tip1[0] - w.center_x) * foreshorten, w.tip1[1]],
            [xc, w.z_m],
            [xc + (w.tip2[0] - w.center_x) * foreshorten, w.tip2[1]],
        ])
        if noise_sigma_m > 0:
            world = world + rng.normal(0.0, noise_sigma_m, size=world.shape)
        xn, yn = meta.world_to_normalized(world[:, 0], world[:, 1])
        # out-of-frame keypoints are reported clamped with zero visibility
        vis = ((xn >= 0) & (xn <= 1) & (yn >= 0) & (yn <= 1)).astype(float)
        xn, yn = np.clip(xn, 0, 1), np.clip(yn, 0, 1)
        x0, x1 = max(0.0, xn.min() - ORACLE_BOX_PAD), min(1.0, xn.max() + ORACLE_BOX_PAD)
        y0, y1 = max(0.0, yn.min() - ORACLE_BOX_PAD), min(1.0, yn.max() + ORACLE_BOX_PAD)
        bbox = ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)
        kps = tuple((float(xn[k]), float(yn[k]), float(vis[k])) for k in range(3))
        out.append(RawDetection(bbox, 1.0, kps))
    return out


# -------------------------------------------------------------- backends

@dataclass
class FixtureDetector:
    """Serves pre-computed detections keyed by image file name."""

    predictions: dict[str, list[RawDetection]]

    @classmethod
    def from_file(cls, path) -> "FixtureDetector":
        return cls(load_predictions_file(path))

    def detect(self, image: SectionImage) -> list[RawDetection]:
        return list(self.predictions.get(image.name, []))


@dataclass
class TensorFixtureDetector:
    """Decodes stored raw model tensors, one <image stem>.bin per image."""

    directory: Path
    cfg: DecoderConfig = field(default_factory=DecoderConfig)

    def detect(self, image: SectionImage) -> list[RawDetection]:
        p = Path(self.directory) / (Path(image.name).stem + ".bin")
        if not p.exists():
            return []
        return nms(decode_pose_tensor(read_tensor_file(p), image.meta, self.cfg), self.cfg.nms_iou_threshold)


class OracleDetector:
    """Ground-truth detections for synthetic trees, looked up by tree id."""

    def __init__(self, truths: dict | None = None, truth_dir=None,
                 noise_sigma_m: float = 0.0, seed: int = 0):
        self.truths = dict(truths or {})
        self.truth_dir = Path(truth_dir) if truth_dir else None
        self.noise_sigma_m = noise_sigma_m
        self.seed = seed

    def _truth(self, tree_id: str):
        if tree_id not in self.truths and self.truth_dir is not None:
            from .synthgen import read_truth, truth_path

            p = truth_path(self.truth_dir, tree_id)
            self.truths[tree_id] = read_truth(p) if p.exists() else None
        return self.truths.get(tree_id)

    def detect(self, image: SectionImage) -> list[RawDetection]:
        truth = self._truth(image.meta.tree_id)
        if truth is None:
            log.warning("oracle: no ground truth for tree %s", image.meta.tree_id)
            return []
        return oracle_detect(truth, image.meta, self.noise_sigma_m, self.seed)


class OnnxDetector:
    """Runs an exported pose model; the session is created lazily per process.

    The image is composited over white, resized to the model input size and
    fed as a float32 NCHW tensor in [0, 1]. Pixel outputs are rescaled back to
    the section image size before decoding.
    """

    def __init__(self, model_path, cfg: DecoderConfig | None = None, session=None):
        self.model_path = Path(model_path) if model_path else None
        self.cfg = cfg or DecoderConfig()
        self._session = session

    @property
    def session(self):
        if self._session is None:
            try:
                import onnxruntime as ort
            except ImportError as e:
                raise RuntimeError("the onnx backend needs onnxruntime (pip install onnxruntime)") from e
            self._session = ort.InferenceSession(str(self.model_path), providers=["CPUExecutionProvider"])
        return self._session

    def _input_size(self, image: SectionImage) -> tuple[int, int]:
        shape = self.session.get_inputs()[0].shape
        h, w = shape[2], shape[3]
        if not isinstance(h, int) or not isinstance(w, int):
            return image.meta.height_px, image.meta.width_px
        return h, w

    def detect(self, image: SectionImage) -> list[RawDetection]:
        from PIL import Image

        h, w = self._input_size(image)
        rgb = image.composite()
        if (h, w) != rgb.shape[:2]:
            rgb = np.asarray(Image.fromarray(rgb).resize((w, h), Image.BILINEAR))
        blob = (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]
        inp = self.session.get_inputs()[0].name
        raw = np.asarray(self.session.run(None, {inp: blob})[0], dtype=np.float64)
        raw = rescale_tensor(raw, (h, w), (image.meta.height_px, image.meta.width_px))
        return nms(decode_pose_tensor(raw, image.meta, self.cfg), self.cfg.nms_iou_threshold)


def rescale_tensor(raw: np.ndarray, model_hw: tuple[int, int], image_hw: tuple[int, int]) -> np.ndarray:
    """Map pixel rows of a pose tensor from model input size to image size."""
    raw = np.array(raw, dtype=np.float64)
    if raw.ndim == 3:
        raw = raw[0]
    sx = image_hw[1] / model_hw[1]
    sy = image_hw[0] / model_hw[0]
    raw[[0, 2]] *= sx
    raw[[1, 3]] *= sy
    for k in range(N_KEYPOINTS):
        raw[5 + 3 * k] *= sx
        raw[6 + 3 * k] *= sy
    return raw


@dataclass
class DetectorSpec:
    """Picklable recipe for building a backend inside each worker."""

    kind: str  # fixture | oracle | onnx
    path: str | None = None  # predictions JSON, tensor dir or model file
    truth_dir: str | None = None
    noise_sigma_m: float = 0.0
    seed: int = 0
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def build(self) -> DetectorPort:
        if self.kind == "fixture":
            if self.path is None:
                raise ValueError("fixture detector needs a predictions file or tensor directory")
            p = Path(self.path)
            if p.is_dir():
                return TensorFixtureDetector(p, self.decoder)
            return FixtureDetector.from_file(p)
        if self.kind == "oracle":
            if self.truth_dir is None:
                raise ValueError("oracle detector needs a ground-truth directory")
            return OracleDetector(truth_dir=self.truth_dir, noise_sigma_m=self.noise_sigma_m, seed=self.seed)
        if self.kind == "onnx":
            if self.path is None:
                raise ValueError("onnx detector needs a model path")
            return OnnxDetector(self.path, self.decoder)
        raise ValueError(f"unknown detector backend {self.kind!r}")
