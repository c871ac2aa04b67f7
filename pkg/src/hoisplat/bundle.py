"""Scene-bundle directory format and the remaining file codecs.

A bundle is a directory with a versioned manifest naming every part: body
file, canonical splats (PLY), meshes (OBJ), images (PNG), prompts, camera,
and the pose/transform state. Loaders validate every invariant on the way in
and fail with the offending manifest key.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .bodyfile import load_body, save_body
from .camera import Camera
from .errors import FormatError, ValidationError
from .losses import LossWeights
from .meshes import TriMesh, load_obj, save_obj
from .optimizer import OptimConfig, OptimTargets
from .scene import GaussianSet, HumanState, ObjectState, Scene

BUNDLE_FORMAT = "hoisplat-bundle"
BUNDLE_VERSION = "1.0"
CONFIG_FORMAT = "hoisplat-config"
CONFIG_VERSION = "1"

MANIFEST_KEYS = (
    "body",
    "human_gaussians",
    "object_gaussians",
    "object_mesh",
    "human_base_mesh",
    "background",
    "input_image",
    "human_mask",
    "object_mask",
    "prompts",
    "camera",
    "state",
)


# ---------------------------------------------------------------------------
# PNG helpers (rgb 8-bit; masks 8-bit with >=128 = foreground; 16-bit payloads
# for alpha/depth renders with the documented scaling)


def save_png_rgb(image: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def load_png_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def save_png_mask(mask: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(mask, dtype=float), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def load_png_mask(path) -> np.ndarray:
    """Binary mask per the bundle convention: pixel >= 128 is foreground."""
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(float)


ALPHA_SCALE_16 = 65535.0
DEPTH_MM_MAX = 65535.0  # depth stored in millimeters; +inf saturates


def save_png_alpha16(alpha: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(alpha, dtype=float), 0.0, 1.0)
    Image.fromarray((arr * ALPHA_SCALE_16 + 0.5).astype(np.uint16)).save(path)


def load_png_alpha16(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=float) / ALPHA_SCALE_16


def save_png_depth16(depth: np.ndarray, path) -> None:
    mm = np.asarray(depth, dtype=float) * 1000.0
    mm = np.where(np.isfinite(mm), np.clip(mm, 0.0, DEPTH_MM_MAX), DEPTH_MM_MAX)
    Image.fromarray((mm + 0.5).astype(np.uint16)).save(path)


def load_png_depth16(path) -> np.ndarray:
    with Image.open(path) as im:
        mm = np.asarray(im, dtype=float)
    out = mm / 1000.0
    return np.where(mm >= DEPTH_MM_MAX, np.inf, out)


# ---------------------------------------------------------------------------
# Gaussian PLY

_GAUSS_PROPS = [
    "x", "y", "z",
    "rot_w", "rot_x", "rot_y", "rot_z",
    "scale_x", "scale_y", "scale_z",
    "opacity",
    "red", "green", "blue",
]


def save_gaussians_ply(gaussians: GaussianSet, path) -> None:
    n = len(gaussians)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _GAUSS_PROPS]
    header += ["end_header"]
    data = np.concatenate(
        [
            gaussians.positions,
            gaussians.rotations,
            gaussians.scales,
            np.asarray(gaussians.opacities)[:, None],
            gaussians.colors,
        ],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def load_gaussians_ply(path) -> GaussianSet:
    """Loads splats, renormalizing quaternions and clamping opacities with a
    warning when the stored values drifted."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    if len(header) < 2 or "binary_little_endian" not in header[1]:
        raise FormatError(f"{path}: gaussian PLY must be binary_little_endian")
    props = []
    n = 0
    for line in header[2:]:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            if parts[1] != "float":
                raise FormatError(f"{path}: unsupported property type {parts[1]!r}")
            props.append(parts[2])
    if props != _GAUSS_PROPS:
        raise FormatError(f"{path}: unknown property layout {props}; expected {_GAUSS_PROPS}")
    body = raw[end + len(b"end_header\n"):]
    expected = 4 * len(_GAUSS_PROPS) * n
    if len(body) < expected:
        raise FormatError(f"{path}: truncated payload ({len(body)} bytes, expected {expected})")
    data = np.frombuffer(body[:expected], dtype="<f4").reshape(n, len(_GAUSS_PROPS)).astype(float)
    if n == 0:
        return GaussianSet(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3))
        )
    rot = data[:, 3:7]
    norms = np.linalg.norm(rot, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        warnings.warn(f"{path}: {int(np.sum(np.abs(norms - 1.0) > 1e-6))} quaternions re-normalized on load")
    if np.any(norms < 1e-12):
        raise FormatError(f"{path}: zero-norm quaternion in file")
    rot = rot / norms[:, None]
    opac = data[:, 10]
    if np.any((opac < 0) | (opac > 1)):
        warnings.warn(f"{path}: opacities clamped to [0, 1] on load")
        opac = np.clip(opac, 0.0, 1.0)
    scales = data[:, 7:10]
    if np.any(scales <= 0):
        raise FormatError(f"{path}: non-positive scales in file")
    return GaussianSet(
        positions=data[:, 0:3],
        rotations=rot,
        scales=scales,
        opacities=opac,
        colors=np.clip(data[:, 11:14], 0.0, 1.0),
    )


# ---------------------------------------------------------------------------
# Camera / state / prompts JSON


def _camera_to_doc(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": cam.rotation.tolist(), "translation": cam.translation.tolist(),
        "width": cam.width, "height": cam.height,
    }


def _camera_from_doc(doc: dict) -> Camera:
    try:
        return Camera(
            fx=float(doc["fx"]), fy=float(doc["fy"]), cx=float(doc["cx"]), cy=float(doc["cy"]),
            rotation=np.array(doc["rotation"], dtype=float),
            translation=np.array(doc["translation"], dtype=float),
            width=int(doc["width"]), height=int(doc["height"]),
        )
    except KeyError as e:
        raise FormatError(f"camera file missing key {e}") from None


def _load_json(path, what: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{what} ({path}): invalid JSON ({e})") from None


# ---------------------------------------------------------------------------
# Bundle save / load


@dataclass
class LoadedBundle:
    scene: Scene
    targets: OptimTargets
    human_base_mesh: TriMesh
    object_mesh: TriMesh
    gt_contact: np.ndarray | None
    root: Path


def save_scene_bundle(
    directory,
    scene: Scene,
    targets: OptimTargets,
    human_base_mesh: TriMesh,
    object_mesh: TriMesh,
    gt_contact: np.ndarray | None = None,
) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    files = {
        "body": "body.json",
        "human_gaussians": "human_gaussians.ply",
        "object_gaussians": "object_gaussians.ply",
        "object_mesh": "object_mesh.obj",
        "human_base_mesh": "human_base_mesh.obj",
        "background": "background.png",
        "input_image": "input.png",
        "human_mask": "mask_human.png",
        "object_mask": "mask_object.png",
        "prompts": "prompts.json",
        "camera": "camera.json",
        "state": "state.json",
    }
    save_body(scene.body, root / files["body"])
    save_gaussians_ply(scene.human.attr, root / files["human_gaussians"])
    save_gaussians_ply(scene.object.attr, root / files["object_gaussians"])
    save_obj(object_mesh, root / files["object_mesh"])
    save_obj(human_base_mesh, root / files["human_base_mesh"])
    save_png_rgb(scene.background, root / files["background"])
    save_png_rgb(targets.input_image, root / files["input_image"])
    save_png_mask(targets.human_mask, root / files["human_mask"])
    save_png_mask(targets.object_mask, root / files["object_mask"])
    with open(root / files["prompts"], "w") as fh:
        json.dump({"holistic": scene.holistic_prompt, "contact": list(scene.contact_prompt)}, fh, indent=1)
    with open(root / files["camera"], "w") as fh:
        json.dump(_camera_to_doc(scene.front_camera), fh, indent=1)
    with open(root / files["state"], "w") as fh:
        json.dump(
            {
                "pose": scene.human.pose.tolist(),
                "shape": scene.human.shape.tolist(),
                "object": {
                    "rotation": scene.object.rotation.tolist(),
                    "translation": scene.object.translation.tolist(),
                    "scale": scene.object.scale,
                },
            },
            fh,
            indent=1,
        )
    if gt_contact is not None:
        files["gt_contact"] = "gt_contact.json"
        with open(root / files["gt_contact"], "w") as fh:
            json.dump({"contact": np.asarray(gt_contact, dtype=bool).tolist()}, fh)
    manifest = {"format": BUNDLE_FORMAT, "version": BUNDLE_VERSION, "files": files}
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return root


def load_scene_bundle(directory) -> LoadedBundle:
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"{root}: no manifest.json (not a scene bundle)")
    manifest = _load_json(manifest_path, "manifest")
    if manifest.get("format") != BUNDLE_FORMAT:
        raise FormatError(f"{root}: manifest format is {manifest.get('format')!r}, expected {BUNDLE_FORMAT!r}")
    major = str(manifest.get("version", "0")).split(".")[0]
    if int(major) > int(BUNDLE_VERSION.split(".")[0]):
        raise FormatError(f"{root}: bundle version {manifest.get('version')} is newer than supported {BUNDLE_VERSION}")
    files = manifest.get("files", {})
    for key in MANIFEST_KEYS:
        if key not in files:
            raise ValidationError(f"{root}: manifest missing required key {key!r}")
        if not (root / files[key]).exists():
            raise ValidationError(f"{root}: file for manifest key {key!r} not found ({files[key]})")

    body = load_body(root / files["body"])
    human_attr = load_gaussians_ply(root / files["human_gaussians"])
    object_attr = load_gaussians_ply(root / files["object_gaussians"])
    object_mesh = load_obj(root / files["object_mesh"])
    base_mesh = load_obj(root / files["human_base_mesh"])
    background = load_png_rgb(root / files["background"])
    input_image = load_png_rgb(root / files["input_image"])
    human_mask = load_png_mask(root / files["human_mask"])
    object_mask = load_png_mask(root / files["object_mask"])
    prompts = _load_json(root / files["prompts"], "prompts")
    camera = _camera_from_doc(_load_json(root / files["camera"], "camera"))
    state = _load_json(root / files["state"], "state")

    try:
        human = HumanState(
            pose=np.array(state["pose"], dtype=float),
            shape=np.array(state["shape"], dtype=float),
            attr=human_attr,
        )
        obj = ObjectState(
            rotation=np.array(state["object"]["rotation"], dtype=float),
            translation=np.array(state["object"]["translation"], dtype=float),
            scale=float(state["object"]["scale"]),
            attr=object_attr,
        )
    except KeyError as e:
        raise FormatError(f"{root}: state file missing key {e}") from None

    scene = Scene(
        body=body,
        human=human,
        object=obj,
        background=background,
        front_camera=camera,
        holistic_prompt=str(prompts.get("holistic", "")),
        contact_prompt=tuple(prompts.get("contact", [])),
    )
    targets = OptimTargets(input_image=input_image, human_mask=human_mask, object_mask=object_mask)
    gt_contact = None
    if "gt_contact" in files and (root / files["gt_contact"]).exists():
        gt_contact = np.array(_load_json(root / files["gt_contact"], "gt_contact")["contact"], dtype=bool)
    if body.vertex_weights is not None and len(base_mesh.vertices) != body.vertex_weights.shape[0]:
        raise ValidationError(
            f"{root}: base mesh has {len(base_mesh.vertices)} vertices but the body's "
            f"vertex table expects {body.vertex_weights.shape[0]}"
        )
    return LoadedBundle(
        scene=scene,
        targets=targets,
        human_base_mesh=base_mesh,
        object_mesh=object_mesh,
        gt_contact=gt_contact,
        root=root,
    )


# ---------------------------------------------------------------------------
# Config file


def default_config_doc() -> dict:
    optim = asdict(OptimConfig())
    optim = {k: (list(v) if isinstance(v, tuple) else v) for k, v in optim.items()}
    return {
        "format": CONFIG_FORMAT,
        "version": CONFIG_VERSION,
        "optim": optim,
        "weights": asdict(LossWeights()),
    }


def save_config(path, config: OptimConfig | None = None, weights: LossWeights | None = None) -> None:
    doc = default_config_doc()
    if config is not None:
        doc["optim"] = {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()
        }
    if weights is not None:
        doc["weights"] = asdict(weights)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_config(path) -> tuple[OptimConfig, LossWeights]:
    """Strict loader: unknown keys are errors; missing keys take defaults."""
    doc = _load_json(path, "config")
    if doc.get("format") != CONFIG_FORMAT:
        raise FormatError(f"{path}: not a {CONFIG_FORMAT} document")
    if str(doc.get("version")) != CONFIG_VERSION:
        raise FormatError(f"{path}: unsupported config version {doc.get('version')}")
    unknown_top = set(doc) - {"format", "version", "optim", "weights"}
    if unknown_top:
        raise ValidationError(f"{path}: unknown top-level keys {sorted(unknown_top)}")
    optim_fields = {f.name: f for f in fields(OptimConfig)}
    optim_doc = doc.get("optim", {})
    unknown = set(optim_doc) - set(optim_fields)
    if unknown:
        raise ValidationError(f"{path}: unknown optim keys {sorted(unknown)}")
    kwargs = {}
    for name, value in optim_doc.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    config = OptimConfig(**kwargs)
    weight_fields = {f.name for f in fields(LossWeights)}
    weights_doc = doc.get("weights", {})
    unknown_w = set(weights_doc) - weight_fields
    if unknown_w:
        raise ValidationError(f"{path}: unknown weight keys {sorted(unknown_w)}")
    weights = LossWeights(**weights_doc)
    return config, weights
