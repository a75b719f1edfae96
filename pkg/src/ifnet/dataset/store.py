"""Fixed-camera correspondence stores: grouping, patch extraction, disk layout."""
import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from ..errors import CorruptManifest, InvalidParams, MissingPatchFile, OutOfBounds
from .detect import PATCH_SIDE, DetectorConfig, detect_keypoints

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("track_id", "scene_id", "frame_id", "x", "y", "patch_path")


@dataclass
class Patch:
    intensities: np.ndarray  # (side, side) reals in [0, 1]
    scene_id: str = ""
    frame_id: int = 0
    x: float = 0.0
    y: float = 0.0


@dataclass
class KeypointTrack:
    track_id: int
    scene_id: str
    x: float  # canonical position (the seeding detection)
    y: float
    frame_ids: list = field(default_factory=list)
    positions: list = field(default_factory=list)  # per-member detection (x, y)
    patches: np.ndarray = None  # (n, 64, 64) uint8

    def __len__(self):
        return len(self.frame_ids)


@dataclass
class CorrespondenceStore:
    tracks: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def n_patches(self):
        return sum(len(t) for t in self.tracks)

    def manifest(self):
        """Per-scene (track count, patch count)."""
        out = {}
        for t in self.tracks:
            nt, npch = out.get(t.scene_id, (0, 0))
            out[t.scene_id] = (nt + 1, npch + len(t))
        return out

    def split(self, n_first):
        """Two stores: the first n_first tracks and the rest."""
        return (CorrespondenceStore(self.tracks[:n_first], dict(self.provenance)),
                CorrespondenceStore(self.tracks[n_first:], dict(self.provenance)))

    def equals(self, other):
        if self.provenance != other.provenance or len(self.tracks) != len(other.tracks):
            return False
        for a, b in zip(self.tracks, other.tracks):
            if (a.track_id, a.scene_id, a.x, a.y) != (b.track_id, b.scene_id, b.x, b.y):
                return False
            if list(a.frame_ids) != list(b.frame_ids):
                return False
            if [tuple(p) for p in a.positions] != [tuple(p) for p in b.positions]:
                return False
            if not np.array_equal(a.patches, b.patches):
                return False
        return True


# --- grouping and extraction ---------------------------------------------------

def group_by_position(frame_keypoints, tolerance_px=2.0):
    """Greedy clustering of detections from one fixed camera.

    ``frame_keypoints`` is an iterable of (frame_id, [(x, y, score), ...]).
    Detections are visited in frame order and, within a frame, by descending
    score. Each joins the nearest track whose canonical position is within
    ``tolerance_px`` and that has no member from the same frame yet; otherwise
    it seeds a new track. Tracks with fewer than two members are discarded.
    Returns KeypointTrack objects without patches, with provisional ids.
    """
    tol = float(tolerance_px)
    cell = max(tol, 1e-9)
    grid = {}
    tracks = []
    for frame_id, dets in sorted(frame_keypoints, key=lambda item: item[0]):
        for x, y, _score in sorted(dets, key=lambda d: -d[2]):
            gx, gy = int(np.floor(x / cell)), int(np.floor(y / cell))
            best, best_d = None, None
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for t in grid.get((gx + dx, gy + dy), ()):
                        if t.frame_ids[-1] == frame_id:
                            continue
                        d = np.hypot(t.x - x, t.y - y)
                        if d <= tol and (best_d is None or d < best_d
                                         or (d == best_d and t.track_id < best.track_id)):
                            best, best_d = t, d
            if best is None:
                best = KeypointTrack(len(tracks), "", float(x), float(y))
                tracks.append(best)
                grid.setdefault((gx, gy), []).append(best)
            best.frame_ids.append(frame_id)
            best.positions.append((float(x), float(y)))
    return [t for t in tracks if len(t) >= 2]


def _window(center, side):
    cx, cy = int(round(center[0])), int(round(center[1]))
    return cx - side // 2, cy - side // 2


def extract_patch(frame, center, side=PATCH_SIDE):
    """side x side crop around the rounded center, intensities scaled to [0, 1]."""
    frame = np.asarray(frame)
    x0, y0 = _window(center, side)
    h, w = frame.shape
    if x0 < 0 or y0 < 0 or x0 + side > w or y0 + side > h:
        raise OutOfBounds(f"{side}x{side} window at ({x0}, {y0}) leaves {w}x{h} frame")
    crop = frame[y0:y0 + side, x0:x0 + side]
    if np.issubdtype(crop.dtype, np.integer):
        vals = crop.astype(np.float64) / 255.0
    else:
        vals = np.clip(crop.astype(np.float64), 0.0, 1.0)
    return Patch(vals, x=float(center[0]), y=float(center[1]))


def to_uint8(intensities):
    return np.clip(np.round(np.asarray(intensities) * 255.0), 0, 255).astype(np.uint8)


def subsample_frames(n_frames, frames_per_scene):
    """Uniform temporal subsample; depends only on the sequence length."""
    if n_frames <= frames_per_scene:
        return np.arange(n_frames)
    return np.unique(np.round(np.linspace(0, n_frames - 1, frames_per_scene)).astype(int))


def build_store(scenes, detector=None, tolerance=2.0, frames_per_scene=200, keypoints=None):
    """Detect, group and cut patches for each fixed-camera scene.

    ``scenes`` is a list of (scene_id, frames) with frames a sequence of 2-D
    intensity images. ``keypoints`` optionally maps scene_id to imported
    {frame_id: [(x, y, score), ...]} and bypasses the built-in detector.
    """
    detector = detector or DetectorConfig()
    tracks = []
    frames_used = {}
    for scene_id, frames in scenes:
        if len(frames) < 2:
            raise InvalidParams(f"scene {scene_id!r} has {len(frames)} frame(s); need >= 2")
        keep = subsample_frames(len(frames), frames_per_scene)
        frames_used[scene_id] = len(keep)
        imported = (keypoints or {}).get(scene_id)
        per_frame = []
        for f in keep:
            f = int(f)
            dets = imported.get(f, []) if imported is not None else detect_keypoints(frames[f], detector)
            per_frame.append((f, dets))
        for t in group_by_position(per_frame, tolerance):
            try:
                cut = [extract_patch(frames[f], pos) for f, pos in zip(t.frame_ids, t.positions)]
            except OutOfBounds:
                log.debug("scene %s: dropping track at (%.1f, %.1f), window leaves frame",
                          scene_id, t.x, t.y)
                continue
            t.scene_id = str(scene_id)
            t.track_id = len(tracks)
            t.patches = np.stack([to_uint8(p.intensities) for p in cut])
            tracks.append(t)
    provenance = {
        "detector": "import" if keypoints else "harris",
        "tolerance": repr(float(tolerance)),
        "frames_per_scene": str(frames_per_scene),
        "scenes": str(len(scenes)),
    }
    return CorrespondenceStore(tracks, provenance)


# --- disk layout ----------------------------------------------------------------

def save_store(store, path):
    os.makedirs(os.path.join(path, "patches"), exist_ok=True)
    with open(os.path.join(path, "manifest.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for t in store.tracks:
            tdir = os.path.join(path, "patches", str(t.track_id))
            os.makedirs(tdir, exist_ok=True)
            for frame_id, (x, y), patch in zip(t.frame_ids, t.positions, t.patches):
                rel = f"patches/{t.track_id}/{frame_id}.pgm"
                Image.fromarray(patch).save(os.path.join(path, rel), format="PPM")
                w.writerow([t.track_id, t.scene_id, frame_id, repr(x), repr(y), rel])
    with open(os.path.join(path, "provenance.txt"), "w") as fh:
        for k in sorted(store.provenance):
            fh.write(f"{k}={store.provenance[k]}\n")


def load_store(path):
    manifest = os.path.join(path, "manifest.tsv")
    if not os.path.exists(manifest):
        raise CorruptManifest(f"{manifest} not found")
    tracks = []
    by_id = {}
    with open(manifest, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != MANIFEST_COLUMNS:
        raise CorruptManifest(f"{manifest}: header must be {'/'.join(MANIFEST_COLUMNS)}")
    patch_lists = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(MANIFEST_COLUMNS):
            raise CorruptManifest(f"{manifest}:{lineno}: expected 6 columns, got {len(row)}")
        try:
            tid, scene, frame_id = int(row[0]), row[1], int(row[2])
            x, y = float(row[3]), float(row[4])
        except ValueError as exc:
            raise CorruptManifest(f"{manifest}:{lineno}: {exc}") from exc
        t = by_id.get(tid)
        if t is None:
            t = KeypointTrack(tid, scene, x, y)
            by_id[tid] = t
            tracks.append(t)
            patch_lists[tid] = []
        elif tracks[-1] is not t or t.scene_id != scene:
            raise CorruptManifest(f"{manifest}:{lineno}: duplicate track_id {tid}")
        if frame_id in t.frame_ids:
            raise CorruptManifest(f"{manifest}:{lineno}: track {tid} repeats frame {frame_id}")
        full = os.path.join(path, row[5])
        if not os.path.exists(full):
            raise MissingPatchFile(full)
        with Image.open(full) as im:
            arr = np.array(im)
        if arr.shape != (PATCH_SIDE, PATCH_SIDE) or arr.dtype != np.uint8:
            raise CorruptManifest(f"{full}: expected {PATCH_SIDE}x{PATCH_SIDE} 8-bit patch")
        t.frame_ids.append(frame_id)
        t.positions.append((x, y))
        patch_lists[tid].append(arr)
    for t in tracks:
        if len(t) < 2:
            raise CorruptManifest(f"{manifest}: track {t.track_id} has a single member")
        t.patches = np.stack(patch_lists[t.track_id])
    provenance = {}
    prov_path = os.path.join(path, "provenance.txt")
    if os.path.exists(prov_path):
        with open(prov_path) as fh:
            for line in fh:
                if "=" in line:
                    k, v = line.rstrip("\n").split("=", 1)
                    provenance[k] = v
    return CorrespondenceStore(tracks, provenance)
