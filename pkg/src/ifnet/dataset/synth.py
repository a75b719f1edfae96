"""Procedural desk-scale stores and fixed-camera sequences."""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from ..errors import InvalidParams
from .detect import PATCH_SIDE
from .store import CorrespondenceStore, KeypointTrack, to_uint8

MODES = ("geometry", "illumination", "both")
CANVAS = 96


@dataclass
class SynthParams:
    rotation_deg: float = 20.0
    scale_range: tuple = (0.85, 1.15)
    shift_px: float = 3.0
    gain_range: tuple = (0.4, 1.6)
    bias_range: tuple = (-0.15, 0.15)
    gamma_range: tuple = (0.4, 2.5)
    shading: float = 0.8  # strength of a linear illumination gradient across the patch
    night_prob: float = 0.5  # chance of a dark tone curve with a local light spot
    noise_std: float = 0.02

    @classmethod
    def identity(cls):
        return cls(0.0, (1.0, 1.0), 0.0, (1.0, 1.0), (0.0, 0.0), (1.0, 1.0), 0.0, 0.0, 0.0)


def render_texture(rng, size=CANVAS):
    """Random smooth texture with blobs and edges, values in [0, 1]."""
    noise = ndi.gaussian_filter(rng.normal(size=(size, size)), rng.uniform(1.5, 3.5))
    img = 0.5 + 0.25 * noise / (noise.std() + 1e-9)
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    for _ in range(rng.integers(3, 7)):
        cx, cy = rng.uniform(10, size - 10, size=2)
        r = rng.uniform(3, 12)
        amp = rng.uniform(-0.6, 0.6)
        img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
    for _ in range(rng.integers(1, 4)):
        theta = rng.uniform(0, np.pi)
        off = rng.uniform(-20, 20)
        side = (np.cos(theta) * (xx - size / 2) + np.sin(theta) * (yy - size / 2)) > off
        img += rng.uniform(-0.3, 0.3) * side
    return np.clip(img, 0.0, 1.0)


def _geometric_view(canvas, rng, p):
    theta = np.deg2rad(rng.uniform(-p.rotation_deg, p.rotation_deg))
    s = rng.uniform(*p.scale_range)
    shift = rng.uniform(-p.shift_px, p.shift_px, size=2)
    c, si = np.cos(theta), np.sin(theta)
    # output coords -> input coords
    mat = np.array([[c, -si], [si, c]]) / s
    center = np.array([CANVAS / 2 - 0.5, CANVAS / 2 - 0.5])
    offset = center + shift - mat @ center
    return ndi.affine_transform(canvas, mat, offset=offset, order=1, mode="reflect")


def _crop(canvas):
    o = (CANVAS - PATCH_SIDE) // 2
    return canvas[o:o + PATCH_SIDE, o:o + PATCH_SIDE]


def _photometric(patch, rng, p):
    x = patch
    lo, hi = p.gamma_range
    gamma = np.exp(rng.uniform(np.log(lo), np.log(hi)))
    x = np.power(np.clip(x, 0, 1), gamma)
    if p.shading:
        u = np.linspace(-1, 1, PATCH_SIDE)
        a, b = rng.uniform(-1, 1, size=2) * p.shading
        x = x * np.clip(1 + 0.5 * (a * u[None, :] + b * u[:, None]), 0.05, None)
    if p.night_prob and rng.random() < p.night_prob:
        yy, xx = np.mgrid[:PATCH_SIDE, :PATCH_SIDE]
        cx, cy = rng.uniform(0, PATCH_SIDE, size=2)
        spot = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * rng.uniform(8, 20) ** 2))
        x = 0.25 * x ** 2 + 0.5 * spot * x
    x = x * rng.uniform(*p.gain_range) + rng.uniform(*p.bias_range)
    if p.noise_std:
        x = x + rng.normal(scale=p.noise_std, size=x.shape)
    return np.clip(x, 0.0, 1.0)


def synth_store(seed, n_tracks, n_views, mode="both", params=None, first_id=0):
    """Deterministic store of n_tracks x n_views rendered patches."""
    if n_tracks < 2 or n_views < 2:
        raise InvalidParams(f"need n_tracks >= 2 and n_views >= 2, got {n_tracks}, {n_views}")
    if mode not in MODES:
        raise InvalidParams(f"mode must be one of {MODES}, got {mode!r}")
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    tracks = []
    centre = (PATCH_SIDE / 2, PATCH_SIDE / 2)
    for i in range(n_tracks):
        canvas = render_texture(rng)
        views = []
        for _ in range(n_views):
            img = _geometric_view(canvas, rng, p) if mode in ("geometry", "both") else canvas
            img = _crop(img)
            if mode in ("illumination", "both"):
                img = _photometric(img, rng, p)
            views.append(to_uint8(img))
        tracks.append(KeypointTrack(first_id + i, f"synth-{mode}", *centre,
                                    frame_ids=list(range(n_views)),
                                    positions=[centre] * n_views,
                                    patches=np.stack(views)))
    provenance = {"detector": "synthetic", "mode": mode, "seed": str(seed),
                  "frame_count": str(n_views)}
    return CorrespondenceStore(tracks, provenance)


def synth_sequence(seed, n_frames, positions, shape=(256, 256), ramp=(0.3, 1.0),
                   blob_sigma=1.0, noise_std=0.0):
    """Fixed-camera frames with a bright point feature planted at each (x, y).

    Global brightness follows a linear ramp over the sequence; the background
    is a faint smooth texture that stays below the detector threshold.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    base = 0.02 * ndi.gaussian_filter(rng.normal(size=shape), 6.0)
    for x, y in positions:
        base += np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * blob_sigma ** 2))
    base = np.clip(base, 0, 1)
    frames = []
    for g in np.linspace(ramp[0], ramp[1], n_frames):
        f = g * base + 0.05
        if noise_std:
            f = f + rng.normal(scale=noise_std, size=shape)
        frames.append(np.clip(f, 0, 1))
    return frames
