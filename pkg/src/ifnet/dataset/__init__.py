from .detect import DetectorConfig, detect_keypoints, harris_response, read_keypoints, write_keypoints
from .store import (CorrespondenceStore, KeypointTrack, Patch, build_store, extract_patch,
                    group_by_position, load_store, save_store, subsample_frames)
from .synth import SynthParams, synth_sequence, synth_store

__all__ = [
    "CorrespondenceStore", "DetectorConfig", "KeypointTrack", "Patch", "SynthParams",
    "build_store", "detect_keypoints", "extract_patch", "group_by_position", "harris_response",
    "load_store", "read_keypoints", "save_store", "subsample_frames", "synth_sequence",
    "synth_store", "write_keypoints",
]
