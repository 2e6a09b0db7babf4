"""Topometric route map: keyframe recording and the on-disk route format.

A route directory holds ``manifest.json`` plus one binary PGM per keyframe
(``000000.pgm``, ``000001.pgm``, ...). Only raw pixels are stored; processed
images are recomputed from them whenever a route is loaded or re-parameterised.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from tandem.imaging import (
    PGMFormatError,
    ProcessedImage,
    RawImage,
    ReferenceBank,
    area_weights,
    grey_u8,
    preprocess,
    read_pgm,
    write_pgm,
)
from tandem.se2 import Pose2, wrap_angle

FORMAT_VERSION = "tandem-route/1"
MANIFEST = "manifest.json"

# Absorbs accumulated float error when comparing against the thresholds.
THRESHOLD_SLACK = 1e-9

_PGM_NAME = re.compile(r"^\d{6}\.pgm$")


class RouteError(Exception):
    pass


class RouteIOError(RouteError, OSError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = Path(path)


class FormatError(RouteError):
    pass


class MissingImage(RouteError):
    pass


class VersionError(RouteError):
    pass


class IncompatibleFov(RouteError):
    pass


@dataclass(frozen=True)
class RecordingParams:
    tau_d: float = 0.3
    tau_alpha: float = math.radians(15.0)
    image_width: int = 115
    image_height: int = 44
    patch_size: int = 9
    fov: float = math.radians(75.0)
    search_px: int = 75

    def __post_init__(self):
        for name in ("tau_d", "tau_alpha", "fov"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("image_width", "image_height", "patch_size", "search_px"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.search_px >= self.image_width:
            raise ValueError(f"search_px {self.search_px} must be below image_width {self.image_width}")

    def with_resolution(self, width: int, height: int) -> RecordingParams:
        """Same recording at another processed size; the search range scales with width."""
        search = max(1, min(width - 1, round(self.search_px * width / self.image_width)))
        return replace(self, image_width=width, image_height=height, search_px=search)


@dataclass(frozen=True, eq=False)
class Keyframe:
    pose: Pose2
    raw: RawImage
    processed: ProcessedImage


@dataclass(frozen=True, eq=False)
class Route:
    keyframes: tuple[Keyframe, ...]
    params: RecordingParams

    def __post_init__(self):
        object.__setattr__(self, "keyframes", tuple(self.keyframes))
        if len(self.keyframes) < 2:
            raise FormatError(f"a route needs at least 2 keyframes, got {len(self.keyframes)}")

    @classmethod
    def from_raw(cls, poses, images, params: RecordingParams) -> Route:
        kfs = [
            Keyframe(p, im, preprocess(im, params.image_width, params.image_height, params.patch_size))
            for p, im in zip(poses, images)
        ]
        return cls(tuple(kfs), params)

    def __len__(self) -> int:
        return len(self.keyframes)

    def pose(self, i: int) -> Pose2:
        return self.keyframes[i].pose

    def processed(self, i: int) -> ProcessedImage:
        return self.keyframes[i].processed

    @property
    def poses(self) -> list[Pose2]:
        return [kf.pose for kf in self.keyframes]

    @cached_property
    def images(self) -> np.ndarray:
        """(N, height, width) stack of processed images."""
        return np.stack([kf.processed.data for kf in self.keyframes])

    @cached_property
    def bank(self) -> ReferenceBank:
        return ReferenceBank(self.images)

    @cached_property
    def arc_lengths(self) -> np.ndarray:
        xy = np.array([[p.x, p.y] for p in self.poses])
        return np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])

    def reprocess(self, params: RecordingParams) -> Route:
        """Rebuild processed images from the stored raw pixels under new parameters."""
        return Route.from_raw(self.poses, [kf.raw for kf in self.keyframes], params)

    def same_as(self, other: Route, pose_tol: float = 1e-9) -> bool:
        if len(self) != len(other) or self.params != other.params:
            return False
        for a, b in zip(self.keyframes, other.keyframes):
            if any(abs(u - v) > pose_tol for u, v in zip(a.pose.as_tuple(), b.pose.as_tuple())):
                return False
            if a.raw != b.raw:
                return False
        return True


class KeyframeRecorder:
    """Appends a keyframe whenever displacement from the last one exceeds a threshold."""

    def __init__(self, params: RecordingParams):
        self.params = params
        self.poses: list[Pose2] = []
        self.images: list[RawImage] = []

    @property
    def last_pose(self) -> Pose2 | None:
        return self.poses[-1] if self.poses else None

    def should_record(self, pose: Pose2) -> bool:
        last = self.last_pose
        if last is None:
            return True
        moved = last.distance_to(pose) > self.params.tau_d + THRESHOLD_SLACK
        turned = abs(wrap_angle(pose.theta - last.theta)) > self.params.tau_alpha + THRESHOLD_SLACK
        return moved or turned

    def update(self, pose: Pose2, image: RawImage) -> Keyframe | None:
        if not self.should_record(pose):
            return None
        return self._append(pose, image)

    def finish(self, pose: Pose2, image: RawImage, min_separation: float = 1e-3) -> Keyframe | None:
        """Force a final keyframe at the stop pose unless one already sits there."""
        last = self.last_pose
        if last is not None and last.distance_to(pose) < min_separation and (
            abs(wrap_angle(pose.theta - last.theta)) < math.radians(1.0)
        ):
            return None
        return self._append(pose, image)

    def _append(self, pose: Pose2, image: RawImage) -> Keyframe:
        p = self.params
        kf = Keyframe(pose, image, preprocess(image, p.image_width, p.image_height, p.patch_size))
        self.poses.append(pose)
        self.images.append(image)
        return kf

    def route(self) -> Route:
        return Route.from_raw(self.poses, self.images, self.params)


# -- persistence ------------------------------------------------------------


def _image_name(i: int) -> str:
    return f"{i:06d}.pgm"


def manifest_dict(route: Route) -> dict:
    p = route.params
    return {
        "version": FORMAT_VERSION,
        "tau_d": p.tau_d,
        "tau_alpha": p.tau_alpha,
        "image_width": p.image_width,
        "image_height": p.image_height,
        "patch_size": p.patch_size,
        "fov_rad": p.fov,
        "ncc_search_px": p.search_px,
        "keyframes": [
            {"index": i, "x": kf.pose.x, "y": kf.pose.y, "theta": kf.pose.theta, "image": _image_name(i)}
            for i, kf in enumerate(route.keyframes)
        ],
    }


def save_route(route: Route, directory: str | os.PathLike) -> Path:
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        keep = set()
        for i, kf in enumerate(route.keyframes):
            name = _image_name(i)
            write_pgm(out / name, grey_u8(kf.raw))
            keep.add(name)
        for stale in out.iterdir():
            if _PGM_NAME.match(stale.name) and stale.name not in keep:
                stale.unlink()
        tmp = out / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(manifest_dict(route), indent=1))
        tmp.replace(out / MANIFEST)
    except OSError as exc:
        raise RouteIOError(exc.filename or out, exc.strerror or str(exc)) from exc
    return out


def _params_from_manifest(m: dict) -> RecordingParams:
    try:
        return RecordingParams(
            tau_d=float(m["tau_d"]),
            tau_alpha=float(m["tau_alpha"]),
            image_width=int(m["image_width"]),
            image_height=int(m["image_height"]),
            patch_size=int(m["patch_size"]),
            fov=float(m["fov_rad"]),
            search_px=int(m["ncc_search_px"]),
        )
    except KeyError as exc:
        raise FormatError(f"manifest missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad manifest parameters: {exc}") from None


def load_route(directory: str | os.PathLike) -> Route:
    root = Path(directory)
    path = root / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: no manifest") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise RouteIOError(path, exc.strerror or str(exc)) from exc
    if not isinstance(manifest, dict):
        raise FormatError(f"{path}: manifest must be an object")
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported route version {version!r}")
    params = _params_from_manifest(manifest)

    entries = manifest.get("keyframes")
    if not isinstance(entries, list):
        raise FormatError(f"{path}: keyframes must be a list")
    poses, images = [], []
    shape = None
    for i, entry in enumerate(entries):
        try:
            if int(entry["index"]) != i:
                raise FormatError(f"{path}: keyframe {i} has index {entry['index']}")
            pose = Pose2(float(entry["x"]), float(entry["y"]), float(entry["theta"]))
            name = str(entry["image"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad keyframe entry {i}: {exc}") from None
        img_path = root / name
        if not img_path.is_file():
            raise MissingImage(f"{img_path}: referenced by keyframe {i} but not found")
        try:
            px = read_pgm(img_path)
        except PGMFormatError as exc:
            raise FormatError(str(exc)) from None
        if shape is None:
            shape = px.shape
            if shape[1] < params.image_width or shape[0] < params.image_height:
                raise FormatError(
                    f"{img_path}: {shape[1]}x{shape[0]} is smaller than the processed size "
                    f"{params.image_width}x{params.image_height}"
                )
        elif px.shape != shape:
            raise FormatError(f"{img_path}: size {px.shape[::-1]} differs from keyframe 0 {shape[::-1]}")
        poses.append(pose)
        images.append(RawImage(px))
    if len(poses) < 2:
        raise FormatError(f"{path}: a route needs at least 2 keyframes")
    return Route.from_raw(poses, images, params)


def resample_u8(px: np.ndarray, width: int, height: int) -> np.ndarray:
    if px.shape == (height, width):
        return px.copy()
    out = area_weights(px.shape[0], height) @ px.astype(np.float64) @ area_weights(px.shape[1], width).T
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def crop_to_fov(route: Route, target_fov: float, raw_width: int, raw_height: int) -> Route:
    """Centre-crop every raw keyframe to ``target_fov`` and resample to the target camera size.

    Assumes equiangular columns, so the retained width is proportional to the
    FOV ratio. Processed size and search range are kept; FOV is rewritten.
    """
    src_fov = route.params.fov
    if target_fov > src_fov + 1e-12:
        raise IncompatibleFov(
            f"target FOV {math.degrees(target_fov):.2f} deg exceeds source {math.degrees(src_fov):.2f} deg"
        )
    images = []
    for kf in route.keyframes:
        px = grey_u8(kf.raw)
        w = px.shape[1]
        keep = min(w, max(1, round(w * target_fov / src_fov)))
        start = (w - keep) // 2
        images.append(RawImage(resample_u8(px[:, start : start + keep], raw_width, raw_height)))
    params = replace(route.params, fov=target_fov)
    return Route.from_raw(route.poses, images, params)
