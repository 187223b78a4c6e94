"""Scene loading (pose manifest + images) and procedural toy scenes.

The manifest is a JSON document in the common "transforms" layout:
``camera_angle_x`` plus ``frames```, each frame holding ``file_path`` and a
4x4 ``transform_matrix`` (camera-to-world, camera looking down -z). Optional
top-level keys: ``near``, ``far``. Images are 8-bit P6 PPM (written and read)
or PNG (read only); pixel values normalize to [0, 1].

Toy scenes are rendered from an analytic density/color field with the same
compositing rule the trainer uses, so the ground truth is consistent with
what a perfectly fitted field would predict.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SceneLoadError
from .renderer import Camera, composite, pixel_to_ray

DEFAULT_NEAR = 0.5
DEFAULT_FAR = 2.7
CAMERA_RADIUS = 1.6
SCENE_CENTER = np.array([0.5, 0.5, 0.5])


@dataclass
class Scene:
    camera: Camera
    views: list  # [(pose (4,4), image (H, W, 3) float in [0,1])]
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def validate(self):
        if not self.views:
            raise SceneLoadError("empty scene: no training views")
        for i, (pose, img) in enumerate(self.views):
            rot = pose[:3, :3]
            if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-4:
                raise SceneLoadError(f"view {i}: rotation is not orthonormal")
            if img.shape != (self.camera.height, self.camera.width, 3):
                raise SceneLoadError(
                    f"view {i}: image shape {img.shape} does not match camera "
                    f"{self.camera.height}x{self.camera.width}")


def write_ppm(path, image: np.ndarray):
    """8-bit binary P6. Input floats in [0,1] are rounded to 255 levels."""
    img8 = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img8.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise SceneLoadError(f"{path}: not a P6 PPM")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    raw = data[pos:pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise SceneLoadError(f"{path}: truncated pixel payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / maxval


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return arr
    raise SceneLoadError(f"{path}: unsupported image format")


def load_manifest(path) -> Scene:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise SceneLoadError(f"cannot open manifest: {e}") from e
    except json.JSONDecodeError as e:
        raise SceneLoadError(f"manifest is not valid JSON: {e}") from e
    if "camera_angle_x" not in doc:
        raise SceneLoadError("manifest missing camera_angle_x")
    frames = doc.get("frames", [])
    if not frames:
        raise SceneLoadError("empty scene: manifest has no frames")
    views = []
    for i, frame in enumerate(frames):
        if "file_path" not in frame or "transform_matrix" not in frame:
            raise SceneLoadError(f"frame {i}: missing file_path or transform_matrix")
        img_path = path.parent / frame["file_path"]
        if not img_path.exists():
            raise SceneLoadError(f"frame {i}: image not found: {img_path}")
        image = read_image(img_path)
        pose = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if pose.shape != (4, 4):
            raise SceneLoadError(f"frame {i}: transform_matrix must be 4x4")
        views.append((pose, image))
    h, w = views[0][1].shape[:2]
    focal = 0.5 * w / np.tan(0.5 * float(doc["camera_angle_x"]))
    scene = Scene(Camera(w, h, focal), views,
                  near=float(doc.get("near", DEFAULT_NEAR)),
                  far=float(doc.get("far", DEFAULT_FAR)))
    scene.validate()
    return scene


def save_scene(scene: Scene, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (pose, image) in enumerate(scene.views):
        name = f"r_{i}.ppm"
        write_ppm(out_dir / name, image)
        frames.append({"file_path": name, "transform_matrix": pose.tolist()})
    angle_x = 2.0 * np.arctan(0.5 * scene.camera.width / scene.camera.focal)
    doc = {"camera_angle_x": float(angle_x), "near": scene.near, "far": scene.far,
           "frames": frames}
    with open(out_dir / "transforms.json", "w") as fh:
        json.dump(doc, fh, indent=1)
    return out_dir / "transforms.json"


@dataclass
class SphereShape:
    center: np.ndarray
    radius: float
    color: np.ndarray
    density: float


@dataclass
class BoxShape:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    density: float


def field_eval(shapes, points: np.ndarray):
    """Analytic (sigma, color) of the shape list; overlaps add densities and
    blend colors density-weighted."""
    points = np.atleast_2d(points)
    n = points.shape[0]
    sigma = np.zeros(n)
    weighted = np.zeros((n, 3))
    for s in shapes:
        if isinstance(s, SphereShape):
            inside = np.sum((points - s.center) ** 2, axis=1) <= s.radius**2
        else:
            inside = np.all((points >= s.lo) & (points <= s.hi), axis=1)
        sigma += np.where(inside, s.density, 0.0)
        weighted += np.where(inside[:, None], s.density * np.asarray(s.color)[None, :], 0.0)
    color = np.zeros((n, 3))
    hit = sigma > 0
    color[hit] = weighted[hit] / sigma[hit, None]
    return sigma, color


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose, camera looking down -z at the target."""
    eye = np.asarray(eye, dtype=np.float64)
    zc = eye - np.asarray(target, dtype=np.float64)
    zc /= np.linalg.norm(zc)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, zc)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    xc = np.cross(up, zc)
    xc /= np.linalg.norm(xc)
    yc = np.cross(zc, xc)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = xc, yc, zc, eye
    return pose


def render_analytic_view(shapes, camera: Camera, pose: np.ndarray, near: float,
                         far: float, n_samples: int = 256) -> np.ndarray:
    """Ground-truth image by midpoint ray-marching of the analytic field."""
    px, py = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    origins, dirs = pixel_to_ray(camera, pose, px.ravel(), py.ravel())
    edges = np.linspace(near, far, n_samples + 1)
    t = 0.5 * (edges[:-1] + edges[1:])
    n_rays = origins.shape[0]
    sigma = np.empty((n_rays, n_samples))
    color = np.empty((n_rays, n_samples, 3))
    chunk = 2048
    for lo in range(0, n_rays, chunk):
        hi = min(lo + chunk, n_rays)
        pts = origins[lo:hi, None, :] + t[None, :, None] * dirs[lo:hi, None, :]
        s, c = field_eval(shapes, pts.reshape(-1, 3))
        sigma[lo:hi] = s.reshape(hi - lo, n_samples)
        color[lo:hi] = c.reshape(hi - lo, n_samples, 3)
    img, _ = composite(sigma, color, np.broadcast_to(t, (n_rays, n_samples)), far)
    return img.reshape(camera.height, camera.width, 3)


def generate_toy_scene(shapes, n_views: int = 8, image_size: int = 64, seed: int = 0,
                       near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR,
                       gt_samples: int = 256, camera_angle_x: float = 0.9) -> Scene:
    """Procedural scene with analytic ground truth.

    Cameras sit on a sphere of radius CAMERA_RADIUS around the scene center,
    azimuth evenly spread with seeded jitter, elevation seeded. Images are
    quantized to 8-bit levels so that save/load round-trips are exact.
    """
    if not shapes:
        raise ValueError("shape list must be non-empty")
    if n_views < 1:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(seed)
    focal = 0.5 * image_size / np.tan(0.5 * camera_angle_x)
    camera = Camera(image_size, image_size, focal)
    views = []
    for k in range(n_views):
        az = 2.0 * np.pi * k / n_views + rng.uniform(-0.1, 0.1)
        el = rng.uniform(-0.5, 0.5)
        eye = SCENE_CENTER + CAMERA_RADIUS * np.array([
            np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        pose = look_at(eye, SCENE_CENTER)
        img = render_analytic_view(shapes, camera, pose, near, far, gt_samples)
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        views.append((pose, img))
    scene = Scene(camera, views, near=near, far=far)
    scene.validate()
    return scene


TOY_PRESETS = {
    "sphere": [SphereShape(np.array([0.5, 0.5, 0.5]), 0.3,
                           np.array([0.9, 0.25, 0.2]), 40.0)],
    "two_spheres": [
        SphereShape(np.array([0.35, 0.45, 0.5]), 0.2, np.array([0.9, 0.3, 0.2]), 40.0),
        SphereShape(np.array([0.68, 0.6, 0.55]), 0.16, np.array([0.2, 0.4, 0.9]), 40.0),
    ],
    "sphere_box": [
        SphereShape(np.array([0.42, 0.45, 0.55]), 0.2, np.array([0.9, 0.3, 0.2]), 40.0),
        BoxShape(np.array([0.55, 0.55, 0.25]), np.array([0.85, 0.85, 0.55]),
                 np.array([0.25, 0.8, 0.35]), 30.0),
    ],
}


def resolve_scene(source: str, n_views: int = 8, image_size: int = 64,
                  seed: int = 0) -> Scene:
    """CLI entry: 'toy:<preset>' generates procedurally, anything else loads a manifest."""
    if source.startswith("toy:"):
        name = source[4:]
        if name not in TOY_PRESETS:
            raise SceneLoadError(
                f"unknown toy preset {name!r}; available: {sorted(TOY_PRESETS)}")
        return generate_toy_scene(TOY_PRESETS[name], n_views=n_views,
                                  image_size=image_size, seed=seed)
    return load_manifest(source)
