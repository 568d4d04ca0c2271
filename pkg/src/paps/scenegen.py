"""Synthetic layered-occlusion scenes with exact amodal ground truth.

Scenes are composed of flat-colored shapes pasted back-to-front over a
banded background of stuff classes. Every instance keeps its full (amodal)
footprint; the visible (inmodal) part is what remains after removing the
footprints of all instances in front of it.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"APSC"
FORMAT_VERSION = 1
MANIFEST_VERSION = "1.0"
SHAPES = ("rectangle", "ellipse", "triangle")


class SceneGenerationError(RuntimeError):
    """Raised when a scene satisfying the config cannot be produced."""


class SceneFormatError(ValueError):
    """Raised for malformed or truncated scene files.

    ``field`` names the record field that could not be parsed.
    """

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class SceneValidationError(ValueError):
    """Raised when a scene violates one of the ground-truth invariants."""


@dataclass
class InstanceGT:
    instance_id: int
    class_id: int  # global semantic id, in [n_stuff, n_stuff + n_thing)
    amodal_mask: np.ndarray
    inmodal_mask: np.ndarray
    depth_rank: int  # 0 = frontmost
    occluded_flag: bool

    @property
    def fully_occluded(self) -> bool:
        return not self.inmodal_mask.any()


@dataclass
class AmodalScene:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    semantic_map: np.ndarray  # H x W, uint16
    instances: list[InstanceGT]

    @property
    def height(self) -> int:
        return int(self.semantic_map.shape[0])

    @property
    def width(self) -> int:
        return int(self.semantic_map.shape[1])

    @property
    def visible_instances(self) -> list[InstanceGT]:
        """Instances with at least one visible pixel."""
        return [inst for inst in self.instances if not inst.fully_occluded]

    def instance(self, instance_id: int) -> InstanceGT:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)

    def validate(self) -> None:
        """Check every invariant; raise SceneValidationError on the first miss."""
        h, w = self.height, self.width
        if self.image.shape != (h, w, 3):
            raise SceneValidationError(f"image shape {self.image.shape} != {(h, w, 3)}")
        ranks = [inst.depth_rank for inst in self.instances]
        if len(set(ranks)) != len(ranks):
            raise SceneValidationError("depth_rank values are not unique")
        ids = [inst.instance_id for inst in self.instances]
        if len(set(ids)) != len(ids) or any(i <= 0 for i in ids):
            raise SceneValidationError("instance ids must be unique positive integers")
        covered = np.zeros((h, w), dtype=bool)
        for inst in self.instances:
            if inst.amodal_mask.shape != (h, w) or inst.inmodal_mask.shape != (h, w):
                raise SceneValidationError(f"instance {inst.instance_id}: mask shape mismatch")
            if (inst.inmodal_mask & ~inst.amodal_mask).any():
                raise SceneValidationError(
                    f"instance {inst.instance_id}: inmodal mask is not a subset of amodal mask"
                )
            hidden = bool((inst.amodal_mask & ~inst.inmodal_mask).any())
            if hidden != bool(inst.occluded_flag):
                raise SceneValidationError(
                    f"instance {inst.instance_id}: occluded_flag disagrees with masks"
                )
            if (covered & inst.inmodal_mask).any():
                raise SceneValidationError(
                    f"instance {inst.instance_id}: inmodal mask overlaps another instance"
                )
            covered |= inst.inmodal_mask
            if (self.semantic_map[inst.inmodal_mask] != inst.class_id).any():
                raise SceneValidationError(
                    f"instance {inst.instance_id}: semantic_map disagrees on inmodal pixels"
                )

    def equals(self, other: "AmodalScene") -> bool:
        if not (
            np.array_equal(self.image, other.image)
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.semantic_map, other.semantic_map)
            and len(self.instances) == len(other.instances)
        ):
            return False
        for a, b in zip(self.instances, other.instances):
            if (a.instance_id, a.class_id, a.depth_rank, bool(a.occluded_flag)) != (
                b.instance_id,
                b.class_id,
                b.depth_rank,
                bool(b.occluded_flag),
            ):
                return False
            if not (
                np.array_equal(a.amodal_mask, b.amodal_mask)
                and np.array_equal(a.inmodal_mask, b.inmodal_mask)
            ):
                return False
        return True


@dataclass
class SceneGenConfig:
    height: int = 64
    width: int = 64
    n_stuff: int = 4
    n_thing: int = 3
    min_instances: int = 2
    max_instances: int = 6
    shapes: tuple[str, ...] = SHAPES
    # Thing class k is drawn with shapes[k % len(shapes)] when True.
    class_shapes: bool = True
    min_size: int = 10
    max_size: int = 28
    min_area: int = 24
    min_visible_fraction: float = 0.0
    min_center_distance: float = 0.0
    max_occlusion_depth: int | None = None
    noise_std: float = 0.03
    max_retries: int = 200

    def validate(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ValueError("height and width must be >= 32")
        if self.n_stuff < 1:
            raise ValueError("at least one stuff class is required")
        if self.n_thing < 1:
            raise ValueError("at least one thing class is required")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ValueError("instance count range is invalid")
        if self.max_instances > 65535:
            raise ValueError("too many instances for the on-disk format")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ValueError(f"unknown shapes: {sorted(unknown)}")
        if self.min_size < 2 or self.max_size < self.min_size:
            raise ValueError("shape size range is invalid")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneGenConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in names}
        if "shapes" in kwargs:
            kwargs["shapes"] = tuple(kwargs["shapes"])
        return cls(**kwargs)


@dataclass
class ShapeSpec:
    """One explicit shape, used to compose hand-made scenes."""

    kind: str
    class_id: int
    center: tuple[float, float]  # (y, x)
    size: tuple[float, float]  # (height, width)
    depth_rank: int
    angle: float = 0.0
    color: tuple[float, float, float] | None = None


def thing_color(class_index: int, n_thing: int) -> np.ndarray:
    hue = (class_index + 0.5) / max(n_thing, 1)
    return _hsv_to_rgb(hue, 0.85, 0.9)


def stuff_color(class_index: int, n_stuff: int) -> np.ndarray:
    hue = (class_index + 0.25) / max(n_stuff, 1)
    # muted next to the thing palette, but with well separated hue and brightness
    return _hsv_to_rgb(hue, 0.5, 0.3 + 0.1 * (class_index % 4))


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float32)


def rasterize(spec: ShapeSpec, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy += 0.5
    xx += 0.5
    cy, cx = spec.center
    hh, ww = spec.size[0] / 2.0, spec.size[1] / 2.0
    c, s = math.cos(spec.angle), math.sin(spec.angle)
    # coordinates in the shape frame
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if spec.kind == "rectangle":
        return (np.abs(u) <= ww) & (np.abs(v) <= hh)
    if spec.kind == "ellipse":
        return (u / ww) ** 2 + (v / hh) ** 2 <= 1.0
    if spec.kind == "triangle":
        # apex at the top, base at the bottom
        t = (v + hh) / (2.0 * hh)
        return (t >= 0.0) & (t <= 1.0) & (np.abs(u) <= ww * t)
    raise ValueError(f"unknown shape kind {spec.kind!r}")


def compose_scene(
    shapes: Sequence[ShapeSpec],
    stuff_map: np.ndarray,
    n_stuff: int,
    n_thing: int,
    rng: np.random.Generator | None = None,
    noise_std: float = 0.0,
) -> AmodalScene:
    """Paste shapes back-to-front over a stuff layout and derive all masks."""
    h, w = stuff_map.shape
    image = np.zeros((h, w, 3), dtype=np.float32)
    for k in range(n_stuff):
        image[stuff_map == k] = stuff_color(k, n_stuff)
    semantic = stuff_map.astype(np.uint16).copy()

    amodals = [rasterize(s, h, w) for s in shapes]
    order = sorted(range(len(shapes)), key=lambda i: shapes[i].depth_rank, reverse=True)
    for i in order:
        spec = shapes[i]
        color = spec.color
        if color is None:
            color = thing_color(spec.class_id - n_stuff, n_thing)
        image[amodals[i]] = np.asarray(color, dtype=np.float32)
        semantic[amodals[i]] = spec.class_id

    instances = []
    for i, spec in enumerate(shapes):
        front = np.zeros((h, w), dtype=bool)
        for j, other in enumerate(shapes):
            if other.depth_rank < spec.depth_rank:
                front |= amodals[j]
        amodal = amodals[i]
        inmodal = amodal & ~front
        instances.append(
            InstanceGT(
                instance_id=i + 1,
                class_id=int(spec.class_id),
                amodal_mask=amodal,
                inmodal_mask=inmodal,
                depth_rank=int(spec.depth_rank),
                occluded_flag=bool((amodal & front).any()),
            )
        )
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        image = image + rng.normal(0.0, noise_std, size=image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return AmodalScene(image=image, semantic_map=semantic, instances=instances)


def _stuff_layout(rng: np.random.Generator, h: int, w: int, n_stuff: int) -> np.ndarray:
    """Horizontal bands of stuff classes, optionally split by one vertical cut."""
    n_bands = int(rng.integers(1, min(3, n_stuff) + 1))
    classes = rng.permutation(n_stuff)
    cuts = np.sort(rng.integers(h // 5, h - h // 5, size=n_bands - 1))
    layout = np.empty((h, w), dtype=np.int64)
    edges = [0, *cuts.tolist(), h]
    for b in range(n_bands):
        layout[edges[b] : edges[b + 1]] = classes[b]
    if n_stuff > n_bands and rng.random() < 0.5:
        col = int(rng.integers(w // 4, w - w // 4))
        row = int(edges[-2]) if n_bands > 1 else 0
        layout[row:, col:] = classes[n_bands]
    return layout


def _mass_center(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([ys.mean(), xs.mean()])


def _occlusion_depth(scene: AmodalScene) -> int:
    from paps.ordering import assign_layers, build_occlusion_graph

    if not scene.instances:
        return 0
    layers, _ = assign_layers(build_occlusion_graph(scene), n_max=len(scene.instances) + 1)
    return max(layers.values()) + 1


def _acceptable(scene: AmodalScene, config: SceneGenConfig) -> bool:
    centers = []
    for inst in scene.instances:
        area = int(inst.amodal_mask.sum())
        if area < config.min_area:
            return False
        if inst.inmodal_mask.sum() < config.min_visible_fraction * area:
            return False
        if inst.inmodal_mask.any():
            centers.append(_mass_center(inst.inmodal_mask))
    if config.min_center_distance > 0:
        for a in range(len(centers)):
            for b in range(a + 1, len(centers)):
                if np.linalg.norm(centers[a] - centers[b]) < config.min_center_distance:
                    return False
    if config.max_occlusion_depth is not None:
        if _occlusion_depth(scene) > config.max_occlusion_depth:
            return False
    return True


def generate_scene(config: SceneGenConfig, rng_seed: int) -> AmodalScene:
    """Generate one scene; the result depends only on ``(config, rng_seed)``."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    h, w = config.height, config.width
    n = int(rng.integers(config.min_instances, config.max_instances + 1))
    for _ in range(config.max_retries):
        layout = _stuff_layout(rng, h, w, config.n_stuff)
        ranks = rng.permutation(n)
        shapes = []
        for i in range(n):
            thing = int(rng.integers(config.n_thing))
            if config.class_shapes:
                kind = config.shapes[thing % len(config.shapes)]
            else:
                kind = config.shapes[int(rng.integers(len(config.shapes)))]
            size = rng.uniform(config.min_size, config.max_size, size=2)
            center = (rng.uniform(0.1 * h, 0.9 * h), rng.uniform(0.1 * w, 0.9 * w))
            angle = float(rng.uniform(-0.35, 0.35)) if kind != "ellipse" else 0.0
            shade = float(rng.uniform(0.8, 1.0))
            color = thing_color(thing, config.n_thing) * shade
            shapes.append(
                ShapeSpec(
                    kind=kind,
                    class_id=config.n_stuff + thing,
                    center=(float(center[0]), float(center[1])),
                    size=(float(size[0]), float(size[1])),
                    depth_rank=int(ranks[i]),
                    angle=angle,
                    color=tuple(color.tolist()),
                )
            )
        scene = compose_scene(
            shapes, layout, config.n_stuff, config.n_thing, rng=rng, noise_std=config.noise_std
        )
        if _acceptable(scene, config):
            return scene
    raise SceneGenerationError(
        f"could not place {n} instances within {config.max_retries} retries"
    )


@dataclass
class DenseTargets:
    """Per-pixel regression/classification targets derived from a scene."""

    center_heatmap: np.ndarray  # H x W
    inmodal_offsets: np.ndarray  # 2 x H x W, (dy, dx)
    offset_mask: np.ndarray  # H x W bool, inmodal thing pixels
    occlusion_map: np.ndarray  # H x W, 1 where some hidden amodal part lies
    centers: dict[int, np.ndarray]  # instance id -> fractional inmodal mass center
    amodal_centers: dict[int, np.ndarray]
    amodal_center_offsets: dict[int, np.ndarray]
    center_occluded: dict[int, bool]
    skipped: list[int] = field(default_factory=list)  # fully occluded instance ids


def mass_center(mask: np.ndarray) -> np.ndarray:
    """Arithmetic mean of (y, x) pixel coordinates of a non-empty mask."""
    if not mask.any():
        raise ValueError("mass center of an empty mask is undefined")
    return _mass_center(mask)


def derive_dense_targets(scene: AmodalScene, sigma: float = 8.0) -> DenseTargets:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = scene.height, scene.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    heatmap = np.zeros((h, w), dtype=np.float64)
    offsets = np.zeros((2, h, w), dtype=np.float64)
    offset_mask = np.zeros((h, w), dtype=bool)
    occlusion = np.zeros((h, w), dtype=np.float64)
    centers, amodal_centers, aco, flags, skipped = {}, {}, {}, {}, []
    for inst in scene.instances:
        occlusion[inst.amodal_mask & ~inst.inmodal_mask] = 1.0
        if inst.fully_occluded:
            skipped.append(inst.instance_id)
            continue
        c = mass_center(inst.inmodal_mask)
        a = mass_center(inst.amodal_mask)
        cy, cx = np.round(c)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        np.maximum(heatmap, g, out=heatmap)
        m = inst.inmodal_mask
        offsets[0][m] = c[0] - yy[m]
        offsets[1][m] = c[1] - xx[m]
        offset_mask |= m
        centers[inst.instance_id] = c
        amodal_centers[inst.instance_id] = a
        aco[inst.instance_id] = a - c
        flags[inst.instance_id] = bool(inst.occluded_flag)
    return DenseTargets(
        center_heatmap=heatmap.astype(np.float32),
        inmodal_offsets=offsets.astype(np.float32),
        offset_mask=offset_mask,
        occlusion_map=occlusion.astype(np.float32),
        centers=centers,
        amodal_centers=amodal_centers,
        amodal_center_offsets=aco,
        center_occluded=flags,
        skipped=skipped,
    )


# --- on-disk format -------------------------------------------------------


def rle_encode(mask: np.ndarray) -> np.ndarray:
    """Runs of ones in the row-major flattened mask as (start, length) pairs."""
    flat = np.concatenate([[0], mask.reshape(-1).astype(np.int8), [0]])
    diff = np.diff(flat)
    starts = np.nonzero(diff == 1)[0]
    ends = np.nonzero(diff == -1)[0]
    return np.stack([starts, ends - starts], axis=1).astype("<u4")


def rle_decode(runs: np.ndarray, height: int, width: int) -> np.ndarray:
    flat = np.zeros(height * width, dtype=bool)
    for start, length in runs:
        if start + length > flat.size:
            raise ValueError("run exceeds mask bounds")
        flat[start : start + length] = True
    return flat.reshape(height, width)


def _pack_rle(mask: np.ndarray) -> bytes:
    runs = rle_encode(mask)
    return struct.pack("<I", len(runs)) + runs.tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, name: str) -> bytes:
        if self.pos + n > len(self.data):
            raise SceneFormatError(name, "file truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, name: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, name))

    def array(self, dtype: str, count: int, name: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, name), dtype=dtype, count=count)

    def rle(self, h: int, w: int, name: str) -> np.ndarray:
        (n_runs,) = self.unpack("<I", f"{name}.n_runs")
        runs = self.array("<u4", 2 * n_runs, f"{name}.runs").reshape(-1, 2).astype(np.int64)
        try:
            return rle_decode(runs, h, w)
        except ValueError as exc:
            raise SceneFormatError(name, str(exc)) from None


def encode_scene(scene: AmodalScene) -> bytes:
    h, w = scene.height, scene.width
    parts = [
        MAGIC,
        struct.pack("<HHHH", FORMAT_VERSION, h, w, len(scene.instances)),
        np.ascontiguousarray(scene.image, dtype="<f4").tobytes(),
        np.ascontiguousarray(scene.semantic_map, dtype="<u2").tobytes(),
    ]
    for inst in scene.instances:
        parts.append(
            struct.pack(
                "<HHHB",
                inst.instance_id,
                inst.class_id,
                inst.depth_rank,
                int(bool(inst.occluded_flag)),
            )
        )
        parts.append(_pack_rle(inst.inmodal_mask))
        parts.append(_pack_rle(inst.amodal_mask))
    return b"".join(parts)


def decode_scene(data: bytes, validate: bool = True) -> AmodalScene:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise SceneFormatError("magic", "not an APSC scene file")
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise SceneFormatError("version", f"unsupported version {version}")
    h, w, n = r.unpack("<HHH", "header")
    image = r.array("<f4", h * w * 3, "image").reshape(h, w, 3).astype(np.float32)
    semantic = r.array("<u2", h * w, "semantic_map").reshape(h, w).astype(np.uint16)
    instances = []
    for k in range(n):
        iid, cls, depth, flag = r.unpack("<HHHB", f"instances[{k}].header")
        inmodal = r.rle(h, w, f"instances[{k}].inmodal_mask")
        amodal = r.rle(h, w, f"instances[{k}].amodal_mask")
        instances.append(InstanceGT(iid, cls, amodal, inmodal, depth, bool(flag)))
    if r.pos != len(data):
        raise SceneFormatError("trailer", f"{len(data) - r.pos} unexpected trailing bytes")
    scene = AmodalScene(image=image, semantic_map=semantic, instances=instances)
    if validate:
        scene.validate()
    return scene


def write_scene(scene: AmodalScene, path) -> None:
    Path(path).write_bytes(encode_scene(scene))


def read_scene(path, validate: bool = True) -> AmodalScene:
    return decode_scene(Path(path).read_bytes(), validate=validate)


@dataclass
class DatasetManifest:
    version: str
    class_names: list[str]
    n_stuff: int
    n_thing: int
    scene_files: list[str]
    seed: int
    generator: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def validate(self) -> None:
        if len(self.class_names) != self.n_stuff + self.n_thing:
            raise SceneValidationError("class_names length must equal n_stuff + n_thing")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SceneFormatError("manifest", str(exc)) from None
        for name in ("version", "class_names", "n_stuff", "n_thing", "scene_files", "seed"):
            if name not in data:
                raise SceneFormatError(name, "missing from manifest")
        names = {f.name for f in dataclasses.fields(cls)}
        manifest = cls(**{k: v for k, v in data.items() if k in names})
        manifest.validate()
        return manifest


def default_class_names(n_stuff: int, n_thing: int) -> list[str]:
    return [f"stuff_{i}" for i in range(n_stuff)] + [f"thing_{i}" for i in range(n_thing)]


def write_dataset(
    out_dir, config: SceneGenConfig, num_scenes: int, seed: int
) -> DatasetManifest:
    """Generate ``num_scenes`` scenes into ``out_dir`` with a manifest.

    Scene ``i`` is generated from seed ``seed * 1_000_003 + i`` so any scene
    can be regenerated on its own.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files, fully_occluded = [], 0
    for i in range(num_scenes):
        scene = generate_scene(config, scene_seed(seed, i))
        fully_occluded += sum(inst.fully_occluded for inst in scene.instances)
        name = f"scene_{i:05d}.apsc"
        write_scene(scene, out / name)
        files.append(name)
    gen = dataclasses.asdict(config)
    gen["shapes"] = list(config.shapes)
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        class_names=default_class_names(config.n_stuff, config.n_thing),
        n_stuff=config.n_stuff,
        n_thing=config.n_thing,
        scene_files=files,
        seed=seed,
        generator=gen,
        stats={"fully_occluded_instances": fully_occluded},
    )
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def scene_seed(seed: int, index: int) -> int:
    return seed * 1_000_003 + index


def read_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    return DatasetManifest.from_json(path.read_text())


def load_dataset(data_dir) -> tuple[DatasetManifest, list[AmodalScene]]:
    manifest = read_manifest(data_dir)
    scenes = [read_scene(Path(data_dir) / f) for f in manifest.scene_files]
    return manifest, scenes
