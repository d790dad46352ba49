"""Run configuration and per-camera settings files.

Two YAML-subset files drive a run:

config file     selects the dataset (top-level ``DATASET`` section whose
                ``type`` names a per-dataset section), carries a
                ``GLOBAL_PARAMETERS`` override block, ``SYSTEM_STATE``
                (reload a saved session) and ``SAVE_TRAJECTORY``.
settings file   flat dotted keys with the calibration and per-run knobs:
                Camera.fx/fy/cx/cy, Camera.k1..k3/p1/p2, Camera.width/
                height/fps, Camera.bf, DepthMapFactor,
                KeyFrame.useFovCentersBasedGeneration,
                KeyFrame.maxFovCentersDistance.  An optional Camera.Tbc
                (16 row-major values) gives the body-to-camera extrinsic
                for body-frame ground truth.

Settings files in the wild start with an OpenCV ``%YAML:1.0`` directive
line; it is stripped before parsing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import yaml

from .camera import SENSOR_MONO, SENSOR_RGBD, SENSOR_STEREO, CameraModel
from .geometry import SE3

KITTI_DATASET = "KITTI_DATASET"
TUM_DATASET = "TUM_DATASET"
EUROC_DATASET = "EUROC_DATASET"
VIDEO_DATASET = "VIDEO_DATASET"
FOLDER_DATASET = "FOLDER_DATASET"

DATASET_TYPES = (KITTI_DATASET, TUM_DATASET, EUROC_DATASET,
                 VIDEO_DATASET, FOLDER_DATASET)

# sensor suites each dataset family can provide
VALID_SENSORS = {
    KITTI_DATASET: (SENSOR_MONO, SENSOR_STEREO),
    TUM_DATASET: (SENSOR_MONO, SENSOR_RGBD),
    EUROC_DATASET: (SENSOR_MONO, SENSOR_STEREO),
    VIDEO_DATASET: (SENSOR_MONO,),
    FOLDER_DATASET: (SENSOR_MONO,),
}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    type: str
    sensor_type: str = SENSOR_MONO
    base_path: str = "."
    name: str = ""
    settings_path: str = ""
    groundtruth_file: str = ""
    fps: Optional[float] = None     # video/folder timestamp base
    glob: str = "*.png"             # folder datasets

    def __post_init__(self):
        if self.type not in DATASET_TYPES:
            raise ConfigError(f"unsupported dataset type '{self.type}'")
        if self.sensor_type not in VALID_SENSORS[self.type]:
            raise ConfigError(
                f"{self.type} does not support sensor_type '{self.sensor_type}'")


def _parse_yaml_subset(path: str) -> Dict:
    with open(path) as f:
        text = f.read()
    # OpenCV settings files open with a %YAML directive PyYAML rejects
    lines = [ln for ln in text.splitlines() if not ln.startswith("%YAML")]
    data = yaml.safe_load("\n".join(lines))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return data


def load_settings(path: str) -> Dict:
    """Flat dotted-key settings mapping (calibration and run knobs)."""
    if not os.path.exists(path):
        raise ConfigError(f"settings file not found: {path}")
    return _parse_yaml_subset(path)


def camera_from_settings(settings: Dict, sensor_type: str = SENSOR_MONO) -> CameraModel:
    def need(key):
        if key not in settings:
            raise ConfigError(f"settings missing required key '{key}'")
        return settings[key]

    dist = np.array([settings.get(f"Camera.{k}", 0.0)
                     for k in ("k1", "k2", "p1", "p2", "k3")], dtype=float)
    return CameraModel(
        fx=float(need("Camera.fx")), fy=float(need("Camera.fy")),
        cx=float(need("Camera.cx")), cy=float(need("Camera.cy")),
        width=int(need("Camera.width")), height=int(need("Camera.height")),
        dist=dist,
        bf=float(settings.get("Camera.bf", 0.0)),
        depth_scale=float(settings.get("DepthMapFactor", 1.0)),
        sensor_kind=sensor_type,
    )


def camera_fps(settings: Dict, default: float = 30.0) -> float:
    return float(settings.get("Camera.fps", default))


def body_to_camera_from_settings(settings: Dict) -> SE3:
    """Body-to-camera extrinsic T_bc from 'Camera.Tbc' (16 row-major values)."""
    if "Camera.Tbc" not in settings:
        raise ConfigError("settings missing 'Camera.Tbc' "
                          "(required for body-frame ground truth)")
    vals = np.asarray(settings["Camera.Tbc"], dtype=float).reshape(4, 4)
    return SE3.from_matrix(vals)


@dataclass
class SlamConfig:
    """Parsed run configuration (see module docstring for the layout)."""

    path: str
    raw: Dict
    dataset: DatasetConfig
    settings: Dict = field(default_factory=dict)
    global_parameters: Dict = field(default_factory=dict)
    system_state: Dict = field(default_factory=dict)
    save_trajectory: Dict = field(default_factory=dict)

    def camera(self) -> CameraModel:
        return camera_from_settings(self.settings, self.dataset.sensor_type)


def load_config(path: str) -> SlamConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    raw = _parse_yaml_subset(path)
    selector = raw.get("DATASET")
    if not isinstance(selector, dict) or "type" not in selector:
        raise ConfigError(f"{path}: DATASET section with a 'type' key is required")
    section_name = selector["type"]
    section = raw.get(section_name)
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: missing dataset section '{section_name}'")
    base_dir = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        if not p:
            return p
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    dataset = DatasetConfig(
        type=section_name,
        sensor_type=section.get("sensor_type", SENSOR_MONO),
        base_path=resolve(section.get("base_path", ".")),
        name=str(section.get("name", "")),
        settings_path=resolve(section.get("settings", "")),
        groundtruth_file=section.get("groundtruth_file", ""),
        fps=section.get("fps"),
        glob=section.get("glob", "*.png"),
    )
    settings = load_settings(dataset.settings_path) if dataset.settings_path else {}
    return SlamConfig(
        path=path,
        raw=raw,
        dataset=dataset,
        settings=settings,
        global_parameters=raw.get("GLOBAL_PARAMETERS") or {},
        system_state=raw.get("SYSTEM_STATE") or {},
        save_trajectory=raw.get("SAVE_TRAJECTORY") or {},
    )
