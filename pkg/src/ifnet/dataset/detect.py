"""Harris corner detection and the plain-text keypoint import format."""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from ..errors import ImageTooSmall, MalformedImport

PATCH_SIDE = 64


@dataclass
class DetectorConfig:
    sigma: float = 1.0  # Gaussian integration scale of the structure tensor
    k: float = 0.04
    nms_radius: float = 3.0
    rel_threshold: float = 0.1  # fraction of the frame's peak response
    top_k: int = 500
    border: int = PATCH_SIDE // 2  # detections closer to the edge are dropped
    margin: int = 0


def harris_response(frame, sigma=1.0, k=0.04):
    img = np.asarray(frame, dtype=np.float64)
    ix = ndi.sobel(img, axis=1)
    iy = ndi.sobel(img, axis=0)
    a = ndi.gaussian_filter(ix * ix, sigma)
    b = ndi.gaussian_filter(iy * iy, sigma)
    c = ndi.gaussian_filter(ix * iy, sigma)
    return a * b - c * c - k * (a + b) ** 2


def detect_keypoints(frame, config=None):
    """List of (x, y, score), strongest first, after greedy non-maximum suppression."""
    cfg = config or DetectorConfig()
    frame = np.asarray(frame)
    need = PATCH_SIDE + 2 * cfg.margin
    if frame.ndim != 2 or frame.shape[0] < need or frame.shape[1] < need:
        raise ImageTooSmall(f"frame {frame.shape} smaller than {need}x{need}")
    resp = harris_response(frame, cfg.sigma, cfg.k)
    peak = resp.max()
    if peak <= 1e-12:
        return []
    r = int(np.ceil(cfg.nms_radius))
    local_max = resp == ndi.maximum_filter(resp, size=2 * r + 1, mode="constant", cval=-np.inf)
    mask = local_max & (resp > cfg.rel_threshold * peak) & (resp > 1e-12)
    b = cfg.border
    if b:
        mask[:b, :] = False
        mask[-b:, :] = False
        mask[:, :b] = False
        mask[:, -b:] = False
    ys, xs = np.nonzero(mask)
    scores = resp[ys, xs]
    order = np.argsort(-scores, kind="stable")
    kept = []
    for idx in order:
        x, y = float(xs[idx]), float(ys[idx])
        if all((x - kx) ** 2 + (y - ky) ** 2 > cfg.nms_radius ** 2 for kx, ky, _ in kept):
            kept.append((x, y, float(scores[idx])))
            if len(kept) >= cfg.top_k:
                break
    return kept


def read_keypoints(path):
    """Parse ``frame_id x y score`` rows into {frame_id: [(x, y, score), ...]}."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 4:
                raise MalformedImport(f"{path}:{lineno}: expected 'frame_id x y score', got {text!r}")
            try:
                frame_id = int(parts[0])
                x, y, score = (float(p) for p in parts[1:])
            except ValueError as exc:
                raise MalformedImport(f"{path}:{lineno}: {exc}") from exc
            out.setdefault(frame_id, []).append((x, y, score))
    return out


def write_keypoints(path, keypoints):
    with open(path, "w") as fh:
        for frame_id in sorted(keypoints):
            for x, y, score in keypoints[frame_id]:
                fh.write(f"{frame_id} {x!r} {y!r} {score!r}\n")
