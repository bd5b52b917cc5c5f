"""Depth map containers, PNG codecs, synthetic scenes and manifests.

Depth maps follow the common automotive convention: 16-bit grayscale
PNG where meters = raw / 256 and raw value 0 marks an invalid pixel.
Synthetic scenes are analytic (ground plane, back wall, a few boxes and
spheres) so ground-truth depth is exact by construction and every test
against it can be closed-form.
"""

from __future__ import annotations

import io
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError, DimensionError, FormatError, NumericError
from .rng import stream

DEPTH_SCALE = 256.0  # raw PNG units per meter
RAW_MAX = 65535


@dataclass
class DepthMap:
    """Dense or sparse depth in meters with a validity mask.

    meters is [H,W] float; invalid pixels hold exactly 0.  Values must
    be finite and non-negative.
    """

    meters: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.meters = np.ascontiguousarray(np.asarray(self.meters, dtype=np.float64))
        self.valid = np.ascontiguousarray(np.asarray(self.valid, dtype=bool))
        if self.meters.ndim != 2:
            raise DimensionError(f"DepthMap: meters must be 2-D, got {self.meters.shape}")
        if self.valid.shape != self.meters.shape:
            raise DimensionError(
                f"DepthMap: valid shape {self.valid.shape} != meters shape {self.meters.shape}")
        if not np.all(np.isfinite(self.meters)):
            raise NumericError("DepthMap: non-finite depth value")
        if np.any(self.meters < 0.0):
            raise NumericError("DepthMap: negative depth value")
        self.meters = np.where(self.valid, self.meters, 0.0)

    @property
    def height(self) -> int:
        return self.meters.shape[0]

    @property
    def width(self) -> int:
        return self.meters.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @staticmethod
    def dense(meters: np.ndarray) -> "DepthMap":
        meters = np.asarray(meters, dtype=np.float64)
        return DepthMap(meters=meters, valid=np.ones(meters.shape, dtype=bool))


@dataclass
class SceneSample:
    id: str
    image: np.ndarray  # [3,H,W] float64 in [0,1]
    sparse: DepthMap
    dense_gt: DepthMap

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DimensionError(f"SceneSample: image must be [3,H,W], got {self.image.shape}")
        hw = self.image.shape[1:]
        if (self.sparse.height, self.sparse.width) != hw or (self.dense_gt.height, self.dense_gt.width) != hw:
            raise DimensionError(f"SceneSample '{self.id}': image/depth dims disagree")


@dataclass(frozen=True)
class EncodeReport:
    clamped_high: int       # pixels clipped to the 16-bit ceiling
    collapsed_invalid: int  # valid pixels that rounded to raw 0


# -- 16-bit depth PNG ---------------------------------------------------------


def decode_depth_png(data: bytes) -> DepthMap:
    """Parse a 16-bit grayscale PNG into meters; raw 0 means invalid."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except UnidentifiedImageError:
        raise FormatError("not a decodable image") from None
    if img.format != "PNG":
        raise FormatError(f"expected PNG, got {img.format}")
    if img.mode not in ("I", "I;16", "I;16B"):
        raise FormatError(f"expected 16-bit grayscale PNG, got mode '{img.mode}'")
    raw = np.asarray(img, dtype=np.int64)
    if raw.min() < 0 or raw.max() > RAW_MAX:
        raise FormatError("raw depth outside 16-bit range")
    return DepthMap(meters=raw / DEPTH_SCALE, valid=raw > 0)


def encode_depth_png_with_report(depth: DepthMap) -> tuple[bytes, EncodeReport]:
    """Encode meters to 16-bit PNG; values above the ceiling clamp to 65535."""
    raw = np.rint(depth.meters * DEPTH_SCALE).astype(np.int64)
    clamped = int(np.count_nonzero(raw > RAW_MAX))
    raw = np.clip(raw, 0, RAW_MAX)
    raw[~depth.valid] = 0
    collapsed = int(np.count_nonzero(depth.valid & (raw == 0)))
    img = Image.fromarray(raw.astype("<u2"))  # uint16 infers mode I;16
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue(), EncodeReport(clamped_high=clamped, collapsed_invalid=collapsed)


def encode_depth_png(depth: DepthMap) -> bytes:
    data, report = encode_depth_png_with_report(depth)
    if report.clamped_high:
        warnings.warn(f"encode_depth_png: {report.clamped_high} pixels clamped to 16-bit max")
    return data


# -- 8-bit RGB image PNG ------------------------------------------------------


def decode_image_png(data: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except UnidentifiedImageError:
        raise FormatError("not a decodable image") from None
    if img.mode != "RGB":
        raise FormatError(f"expected 8-bit RGB PNG, got mode '{img.mode}'")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def encode_image_png(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"encode_image_png: need [3,H,W], got {image.shape}")
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


# -- synthetic scenes ---------------------------------------------------------

DEPTH_MIN_SYNTH = 0.5
DEPTH_MAX_SYNTH = 10.0


def _ray_grid(height: int, width: int):
    f = 0.8 * min(height, width)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    u, v = np.meshgrid(np.arange(width), np.arange(height))
    dx = (u - cx) / f
    dy = (v - cy) / f
    return dx, dy


def _ground_depth(dx: np.ndarray, dy: np.ndarray, cam_height: float) -> np.ndarray:
    # camera looks +z, y points down; plane y = cam_height
    with np.errstate(divide="ignore"):
        t = np.where(dy > 1e-9, cam_height / np.maximum(dy, 1e-9), np.inf)
    return t


def synth_scene(seed: int, size: tuple[int, int] = (64, 64), *,
                n_objects: int | None = None,
                sparse_pattern: str = "uniform(0.05)") -> SceneSample:
    """Procedural scene: ground plane, back wall and a few convex objects.

    Depth is exact analytic z-distance clamped to [0.5, 10] m; the image
    is a Lambertian shading of the same geometry.  Fully deterministic
    per (seed, size, arguments).
    """
    height, width = size
    rng = stream(seed, "synth")
    dx, dy = _ray_grid(height, width)

    cam_height = float(rng.uniform(1.0, 1.6))
    wall_z = float(rng.uniform(7.0, 9.5))
    n = int(rng.integers(2, 6)) if n_objects is None else int(n_objects)

    depth = np.minimum(_ground_depth(dx, dy, cam_height), wall_z)
    # material id per pixel: 0 wall, 1 ground, 2+i object i
    material = np.where(_ground_depth(dx, dy, cam_height) <= wall_z, 1, 0)
    normals = np.zeros((height, width, 3))
    normals[material == 0] = (0.0, 0.0, -1.0)
    normals[material == 1] = (0.0, -1.0, 0.0)

    albedos = [np.array([0.55, 0.55, 0.6]), np.array([0.45, 0.4, 0.35])]
    for i in range(n):
        shape_kind = rng.choice(["sphere", "box"])
        albedos.append(rng.uniform(0.2, 0.9, size=3))
        ox = float(rng.uniform(-2.0, 2.0))
        oz = float(rng.uniform(2.5, 7.0))
        if shape_kind == "sphere":
            r = float(rng.uniform(0.3, 0.9))
            center = np.array([ox, cam_height - r, oz])
            # |t*d - c|^2 = r^2 with d = (dx,dy,1); depth is t itself
            dd = dx * dx + dy * dy + 1.0
            dc = dx * center[0] + dy * center[1] + center[2]
            disc = dc * dc - dd * (center @ center - r * r)
            hit = disc > 0.0
            t = np.where(hit, (dc - np.sqrt(np.maximum(disc, 0.0))) / dd, np.inf)
            t = np.where(t > 1e-6, t, np.inf)
            closer = t < depth
            if np.any(closer):
                px = t * dx
                py = t * dy
                nrm = np.stack([px - center[0], py - center[1], t - center[2]], axis=-1) / r
                normals[closer] = nrm[closer]
                depth = np.where(closer, t, depth)
                material = np.where(closer, 2 + i, material)
        else:
            hx, hy, hz = (float(rng.uniform(0.25, 0.8)) for _ in range(3))
            center = np.array([ox, cam_height - hy, oz])
            lo = center - (hx, hy, hz)
            hi = center + (hx, hy, hz)
            t_near = np.full((height, width), -np.inf)
            t_far = np.full((height, width), np.inf)
            axis_id = np.zeros((height, width), dtype=np.int64)
            for ax, d_ax in enumerate((dx, dy, np.ones_like(dx))):
                with np.errstate(divide="ignore", invalid="ignore"):
                    t1 = np.where(np.abs(d_ax) > 1e-12, lo[ax] / d_ax, -np.inf)
                    t2 = np.where(np.abs(d_ax) > 1e-12, hi[ax] / d_ax, np.inf)
                t_lo, t_hi = np.minimum(t1, t2), np.maximum(t1, t2)
                axis_id = np.where(t_lo > t_near, ax, axis_id)
                t_near = np.maximum(t_near, t_lo)
                t_far = np.minimum(t_far, t_hi)
            hit = (t_near <= t_far) & (t_near > 1e-6)
            t = np.where(hit, t_near, np.inf)
            closer = t < depth
            if np.any(closer):
                for ax, d_ax in enumerate((dx, dy, np.ones_like(dx))):
                    face = closer & (axis_id == ax)
                    sign = np.where(d_ax > 0, -1.0, 1.0)
                    normals[face] = 0.0
                    normals[..., ax][face] = sign[face]
                depth = np.where(closer, t, depth)
                material = np.where(closer, 2 + i, material)

    depth = np.clip(depth, DEPTH_MIN_SYNTH, DEPTH_MAX_SYNTH)

    light = np.array([0.4, -0.8, -0.45])
    light = light / np.linalg.norm(light)
    lam = np.clip(-(normals @ light), 0.0, 1.0)
    shade = 0.25 + 0.75 * lam
    albedo_map = np.stack([albedos[m] for m in material.reshape(-1)]).reshape(height, width, 3)
    image = np.ascontiguousarray((albedo_map * shade[..., None]).transpose(2, 0, 1))
    image = np.clip(image, 0.0, 1.0)

    dense = DepthMap.dense(depth)
    sparse = sparsify(dense, sparse_pattern, seed)
    return SceneSample(id=f"scene{seed:05d}", image=image, sparse=sparse, dense_gt=dense)


# -- sparsification -----------------------------------------------------------

_PATTERN_RE = re.compile(r"^(uniform|scanlines)\(([-+0-9.eE]+)\)$")


def sparsify(dense: DepthMap, pattern: str, seed: int) -> DepthMap:
    """Subsample a dense map: 'uniform(p)' Bernoulli or 'scanlines(n)' rows.

    The output's valid set is always a subset of the input's.
    """
    m = _PATTERN_RE.match(pattern.strip())
    if not m:
        raise DataError(f"unknown sparsity pattern '{pattern}'")
    kind, arg = m.group(1), float(m.group(2))
    rng = stream(seed, "sparsify", kind)
    if kind == "uniform":
        if not 0.0 <= arg <= 1.0:
            raise DataError(f"uniform(p): p must be in [0,1], got {arg}")
        keep = rng.random(dense.meters.shape) < arg
    else:
        rows = int(arg)
        if rows < 1 or rows > dense.height:
            raise DataError(f"scanlines(n): n must be in [1,{dense.height}], got {rows}")
        phase = int(rng.integers(0, max(1, dense.height // rows)))
        idx = (phase + np.rint(np.linspace(0, dense.height - dense.height / rows, rows))).astype(int)
        keep = np.zeros(dense.meters.shape, dtype=bool)
        keep[np.clip(idx, 0, dense.height - 1)] = True
    valid = keep & dense.valid
    return DepthMap(meters=np.where(valid, dense.meters, 0.0), valid=valid)


def nearest_valid_fill(sparse: DepthMap) -> DepthMap:
    """Densify by copying each pixel's nearest (euclidean) valid value."""
    if sparse.n_valid == 0:
        raise DataError("nearest_valid_fill: no valid pixels")
    _, (iy, ix) = ndimage.distance_transform_edt(~sparse.valid, return_indices=True)
    return DepthMap.dense(sparse.meters[iy, ix])


# -- manifests ----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    sparse_path: str
    gt_path: str


@dataclass
class Manifest:
    root: Path
    entries: list[ManifestEntry]

    def __len__(self):
        return len(self.entries)


def write_manifest(path: Path | str, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    lines = ["# id\timage\tsparse\tgt"]
    for e in entries:
        lines.append(f"{e.id}\t{e.image_path}\t{e.sparse_path}\t{e.gt_path}")
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path: Path | str) -> Manifest:
    """Parse the tab-separated manifest and verify every referenced file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        entry = ManifestEntry(*parts)
        if entry.id in seen:
            raise DataError(f"{path}:{lineno}: duplicate sample id '{entry.id}'")
        seen.add(entry.id)
        for rel in (entry.image_path, entry.sparse_path, entry.gt_path):
            if not (path.parent / rel).is_file():
                raise DataError(f"{path}:{lineno}: missing file '{rel}'")
        entries.append(entry)
    return Manifest(root=path.parent, entries=entries)


def load_sample(manifest: Manifest, entry: ManifestEntry) -> SceneSample:
    image = decode_image_png((manifest.root / entry.image_path).read_bytes())
    sparse = decode_depth_png((manifest.root / entry.sparse_path).read_bytes())
    gt = decode_depth_png((manifest.root / entry.gt_path).read_bytes())
    try:
        return SceneSample(id=entry.id, image=image, sparse=sparse, dense_gt=gt)
    except DimensionError as e:
        raise DataError(f"sample '{entry.id}': {e}") from None


def iterate(manifest: Manifest, batch: int, seed: int):
    """Yield shuffled batches of loaded samples; order is fixed by seed.

    All samples in a manifest must share dimensions, so batches never
    need padding.
    """
    if batch < 1:
        raise DataError(f"batch must be >= 1, got {batch}")
    if not manifest.entries:
        raise DataError("manifest has no entries")
    order = stream(seed, "iterate").permutation(len(manifest.entries))
    dims: tuple[int, int] | None = None
    chunk: list[SceneSample] = []
    for idx in order:
        sample = load_sample(manifest, manifest.entries[int(idx)])
        hw = (sample.dense_gt.height, sample.dense_gt.width)
        if dims is None:
            dims = hw
        elif hw != dims:
            raise DataError(f"sample '{sample.id}' dims {hw} != manifest dims {dims}")
        chunk.append(sample)
        if len(chunk) == batch:
            yield chunk
            chunk = []
    if chunk:
        yield chunk
