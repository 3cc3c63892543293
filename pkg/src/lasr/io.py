"""Measurement sets, preprocessing, frame selection and file formats.

Directory layout::

    frames/%05d.png   colour frames
    masks/%05d.png    object masks, foreground > 127
    flow_fw/%05d.flo  flow from frame t to t+1 (absent for the last frame)
    flow_bw/%05d.flo  flow from frame t to t-1 (absent for the first frame)
    conf/%05d.png     optional flow confidence, value / 255
    meta.json         crop metadata per frame
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from lasr.errors import FormatError, InputError, ParameterError

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
CROP_FACTOR = 1.2
CROP_SIZE = 256
FLOW_SKIP_THRESHOLD = 0.05


@dataclass
class MeasurementSet:
    images: np.ndarray                  # T x H x W x 3 in [0, 1]
    masks: np.ndarray                   # T x H x W bool
    flow_fw: np.ndarray                 # T x H x W x 2, entry t maps t -> t+1
    flow_bw: np.ndarray | None = None   # T x H x W x 2, entry t maps t -> t-1
    confidence: np.ndarray | None = None
    crops: list = field(default_factory=list)
    frame_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray(self.masks).astype(bool)
        self.flow_fw = np.asarray(self.flow_fw, dtype=np.float64)
        if self.flow_bw is not None:
            self.flow_bw = np.asarray(self.flow_bw, dtype=np.float64)
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if not self.frame_ids:
            self.frame_ids = list(range(len(self.images)))
        if not self.crops:
            H, W = self.size
            self.crops = [{"center": [(W - 1) / 2.0, (H - 1) / 2.0], "scale": 1.0} for _ in range(len(self.images))]

    @property
    def num_frames(self) -> int:
        return len(self.images)

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:3])

    def validate(self, expected_size: tuple[int, int] | None = None) -> None:
        T = self.num_frames
        H, W = self.size
        if expected_size is not None and (H, W) != tuple(expected_size):
            raise InputError(f"frames are {H}x{W}, expected {expected_size}")
        if self.masks.shape != (T, H, W) or self.flow_fw.shape != (T, H, W, 2):
            raise InputError("mask / flow shapes do not match the frames")
        for t in range(T):
            if not self.masks[t].any():
                raise InputError(f"frame {t} has an empty silhouette")
        for t in range(T - 1):
            if not np.isfinite(self.flow_fw[t][self.masks[t]]).all():
                raise InputError(f"forward flow of frame {t} is not finite inside the silhouette")

    def resized(self, size: int) -> "MeasurementSet":
        """Downsample to size x size for optimisation; flows are rescaled."""
        H, W = self.size
        if (H, W) == (size, size):
            return self
        s = size / W
        imgs = np.stack([cv2.resize(im, (size, size), interpolation=cv2.INTER_AREA) for im in self.images])
        soft = np.stack([cv2.resize(m.astype(np.float64), (size, size), interpolation=cv2.INTER_AREA)
                         for m in self.masks])

        def masked(field_, masks):
            out = []
            for f, m in zip(field_, masks):
                m = m.astype(np.float64)
                num = cv2.resize(f * m[..., None] if f.ndim == 3 else f * m, (size, size), interpolation=cv2.INTER_AREA)
                den = cv2.resize(m, (size, size), interpolation=cv2.INTER_AREA)
                den = den[..., None] if num.ndim == 3 else den
                out.append(np.where(den > 1e-9, num / np.maximum(den, 1e-9), 0.0))
            return np.stack(out)

        fw = masked(self.flow_fw, self.masks) * s
        bw = masked(self.flow_bw, self.masks) * s if self.flow_bw is not None else None
        conf = masked(self.confidence, self.masks) if self.confidence is not None else None
        crops = [dict(c, working_scale=s) for c in self.crops]
        return MeasurementSet(imgs, soft > 0.5, fw, bw, conf, crops, list(self.frame_ids))


# ---------------------------------------------------------------------------
# .flo

def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ParameterError("flow must be H x W x 2")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(flow.tobytes(order="C"))


def read_flo(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    magic, w, h = struct.unpack("<fii", data[:12])
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid .flo size {w}x{h}")
    n = 2 * w * h * 4
    if len(data) - 12 != n:
        raise FormatError(f"{path}: payload has {len(data) - 12} bytes, expected {n}")
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w, 2).copy()


# ---------------------------------------------------------------------------
# PNG helpers

def write_png(path, img: np.ndarray) -> None:
    arr = np.asarray(img, dtype=np.float64)
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except Exception as exc:  # noqa: BLE001
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as exc:  # noqa: BLE001
        raise FormatError(f"cannot read mask {path}: {exc}") from exc
    return arr > 127


# ---------------------------------------------------------------------------
# flow utilities

def warp_flow(flow_a: np.ndarray, flow_b: np.ndarray) -> np.ndarray:
    """Compose two flows: follow flow_a, then flow_b sampled bilinearly."""
    H, W = flow_a.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float32)
    mx = (xs + flow_a[..., 0]).astype(np.float32)
    my = (ys + flow_a[..., 1]).astype(np.float32)
    fb = cv2.remap(flow_b.astype(np.float32), mx, my, interpolation=cv2.INTER_LINEAR,
                   borderMode=cv2.BORDER_REPLICATE)
    return flow_a + fb.astype(np.float64)


def clip_magnitude(flow: np.ndarray, mask: np.ndarray) -> float:
    """Mean in-mask flow length in [-1, 1]-normalised image coordinates."""
    H, W = flow.shape[:2]
    scaled = flow * np.array([2.0 / W, 2.0 / H])
    mag = np.linalg.norm(scaled, axis=-1)
    return float(mag[mask].mean()) if mask.any() else 0.0


def select_frames(flows, masks, threshold: float = FLOW_SKIP_THRESHOLD) -> list[int]:
    """Greedy frame skipping on flow magnitude.

    ``flows[i]`` is the flow from frame i back to frame i-1 (``flows[0]`` is
    ignored) and ``masks[i]`` the silhouette of frame i. Frame j is kept when
    the composed flow from j back to the last kept frame has mean in-mask
    clip-space magnitude >= threshold.
    """
    T = len(masks)
    if T < 2:
        raise InputError("need at least two frames")
    kept = [0]
    acc = None
    for j in range(1, T):
        f = np.asarray(flows[j], dtype=np.float64)
        acc = f if acc is None else warp_flow(f, acc)
        if clip_magnitude(acc, np.asarray(masks[j], dtype=bool)) >= threshold:
            kept.append(j)
            acc = None
    if len(kept) < 2:
        raise InputError("fewer than two frames retained by flow-magnitude frame selection")
    return kept


# ---------------------------------------------------------------------------
# preprocessing

def _crop_transform(mask: np.ndarray, size: int, factor: float):
    ys, xs = np.nonzero(mask)
    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    center = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
    side = factor * max(x1 - x0 + 1, y1 - y0 + 1)
    scale = size / side
    # output pixel centre u maps to source x = center + (u - (size-1)/2) / scale
    A = np.array([[scale, 0.0, (size - 1) / 2.0 - scale * center[0]],
                  [0.0, scale, (size - 1) / 2.0 - scale * center[1]]])
    return A, center, scale


def _warp(img, A, size, interp):
    return cv2.warpAffine(np.asarray(img, dtype=np.float32), A, (size, size), flags=interp,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def preprocess(frames, masks, flows_fw, flows_bw=None, confidence=None, size: int = CROP_SIZE,
               crop_factor: float = CROP_FACTOR) -> tuple[MeasurementSet, list[dict]]:
    """Crop each frame around its mask and resize to size x size.

    Flow vectors are re-expressed in the cropped pixel frames of both
    endpoints. Frames with empty masks are dropped and reported.
    """
    T = len(frames)
    report = []
    keep = [t for t in range(T) if np.asarray(masks[t]).any()]
    for t in range(T):
        if t not in keep:
            report.append({"frame": t, "status": "rejected", "reason": "empty mask"})
    if not keep:
        raise InputError("all masks are empty")
    tf = {t: _crop_transform(np.asarray(masks[t], bool), size, crop_factor) for t in keep}
    imgs, ms, fws, bws, confs, crops = [], [], [], [], [], []

    def reexpress(flow, ta, tb):
        Aa, Ab = tf[ta][0], tf[tb][0]
        H, W = flow.shape[:2]
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        src = np.stack([xs, ys], -1)
        dst = src + flow
        pa = src @ Aa[:, :2].T + Aa[:, 2]
        pb = dst @ Ab[:, :2].T + Ab[:, 2]
        return _warp(pb - pa, Aa, size, cv2.INTER_LINEAR).astype(np.float64)

    for i, t in enumerate(keep):
        A, center, scale = tf[t]
        img = np.asarray(frames[t], dtype=np.float64)
        imgs.append(np.clip(_warp(img, A, size, cv2.INTER_LINEAR), 0, 1).astype(np.float64))
        ms.append(_warp(np.asarray(masks[t], np.float64), A, size, cv2.INTER_LINEAR) > 0.5)
        nxt = keep[i + 1] if i + 1 < len(keep) else None
        prv = keep[i - 1] if i > 0 else None
        if nxt is not None and flows_fw is not None and flows_fw[t] is not None:
            f = np.asarray(flows_fw[t], dtype=np.float64)
            for s in range(t + 1, nxt):
                f = warp_flow(f, np.asarray(flows_fw[s], dtype=np.float64))
            fws.append(reexpress(f, t, nxt))
        else:
            fws.append(np.zeros((size, size, 2)))
        if flows_bw is not None:
            if prv is not None and flows_bw[t] is not None:
                f = np.asarray(flows_bw[t], dtype=np.float64)
                for s in range(t - 1, prv, -1):
                    f = warp_flow(f, np.asarray(flows_bw[s], dtype=np.float64))
                bws.append(reexpress(f, t, prv))
            else:
                bws.append(np.zeros((size, size, 2)))
        if confidence is not None:
            confs.append(_warp(np.asarray(confidence[t], np.float64), A, size, cv2.INTER_LINEAR).astype(np.float64))
        crops.append({"center": center.tolist(), "scale": float(scale), "source_frame": t})
        report.append({"frame": t, "status": "kept"})
    ms_set = MeasurementSet(np.stack(imgs), np.stack(ms), np.stack(fws),
                            np.stack(bws) if flows_bw is not None else None,
                            np.stack(confs) if confidence is not None else None,
                            crops, keep)
    report.sort(key=lambda r: r["frame"])
    return ms_set, report


def uncrop_points(points: np.ndarray, crop: dict, size: int = CROP_SIZE) -> np.ndarray:
    """Map cropped-frame pixel coordinates back to the source frame."""
    c = np.asarray(crop["center"])
    return (np.asarray(points) - (size - 1) / 2.0) / crop["scale"] + c


# ---------------------------------------------------------------------------
# directories

def save_measurements(ms: MeasurementSet, root) -> None:
    root = Path(root)
    for sub in ("frames", "masks", "flow_fw", "flow_bw", "conf"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    T = ms.num_frames
    for t in range(T):
        write_png(root / "frames" / f"{t:05d}.png", ms.images[t])
        write_png(root / "masks" / f"{t:05d}.png", ms.masks[t].astype(np.float64))
        if t < T - 1:
            write_flo(root / "flow_fw" / f"{t:05d}.flo", ms.flow_fw[t])
        if ms.flow_bw is not None and t > 0:
            write_flo(root / "flow_bw" / f"{t:05d}.flo", ms.flow_bw[t])
        if ms.confidence is not None:
            write_png(root / "conf" / f"{t:05d}.png", np.clip(ms.confidence[t], 0, 1))
    meta = {"crops": ms.crops, "frame_ids": [int(i) for i in ms.frame_ids]}
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_measurements(root) -> MeasurementSet:
    root = Path(root)
    frame_files = sorted((root / "frames").glob("*.png"))
    if len(frame_files) < 2:
        raise InputError(f"{root}: need at least two frames under frames/")
    imgs, masks, fws, bws, confs = [], [], [], [], []
    have_bw = (root / "flow_bw").is_dir() and any((root / "flow_bw").glob("*.flo"))
    have_conf = (root / "conf").is_dir() and any((root / "conf").glob("*.png"))
    T = len(frame_files)
    for t, fpath in enumerate(frame_files):
        name = fpath.stem
        img = read_png(fpath)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        imgs.append(img[..., :3])
        mpath = root / "masks" / f"{name}.png"
        if not mpath.exists():
            raise InputError(f"missing mask {mpath}")
        masks.append(read_mask(mpath))
        H, W = img.shape[:2]
        fw = root / "flow_fw" / f"{name}.flo"
        if t < T - 1:
            if not fw.exists():
                raise InputError(f"missing forward flow {fw}")
            fws.append(read_flo(fw).astype(np.float64))
        else:
            fws.append(np.zeros((H, W, 2)))
        if have_bw:
            bw = root / "flow_bw" / f"{name}.flo"
            bws.append(read_flo(bw).astype(np.float64) if t > 0 and bw.exists() else np.zeros((H, W, 2)))
        if have_conf:
            cp = root / "conf" / f"{name}.png"
            confs.append(read_png(cp) if cp.exists() else np.ones((H, W)))
    meta_path = root / "meta.json"
    crops, ids = [], []
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        crops, ids = meta.get("crops", []), meta.get("frame_ids", [])
    ms = MeasurementSet(np.stack(imgs), np.stack(masks), np.stack(fws),
                        np.stack(bws) if have_bw else None,
                        np.stack(confs) if have_conf else None, crops, ids)
    ms.validate()
    return ms
