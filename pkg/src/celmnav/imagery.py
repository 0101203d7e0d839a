"""Procedural small-body imagery with exact geometric ground truth.

The renderer ray-casts a triaxial ellipsoid and shades it with a Lambertian
law. Craters and boulders are signed radial perturbations of the surface; they
enter the shading through the surface normal (bump mapping), so the silhouette
stays the analytic ellipsoid limb and the centre of figure stays exact.

Frames
------
W   inertial, body-centred; X towards the Sun's projection on the equator,
    Z along the spin axis.
AS  body-fixed; rotation of W about Z by the body's spin phase.
CAM +Z along the boresight, +X right and +Y down in the image.
UV  pixel coordinates, origin at the top-left pixel centre; ``image[v, u]``.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation

from .labels import LabelSet, LabelStrategy
from .preprocess import EmptyBlobError, blob_analysis

log = logging.getLogger(__name__)

RHO_RANGE = (5.0, 30.0)
AZ_RANGE = (-90.0, 90.0)
EL_RANGE = (-45.0, 45.0)
PAPER_SPLITS = (7500, 5000, 5000)
DESK_SPLITS = (600, 200, 200)


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class CameraModel:
    fov_deg: float = 10.0
    sensor_px: int = 1024

    @property
    def focal_px(self) -> float:
        return (self.sensor_px / 2) / np.tan(np.deg2rad(self.fov_deg) / 2)

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.sensor_px / 2, self.sensor_px / 2], dtype=float)

    @property
    def K(self) -> np.ndarray:
        f = self.focal_px
        c = self.sensor_px / 2
        return np.array([[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def project(self, p_cam) -> np.ndarray:
        """Pinhole projection of a CAM-frame point to UV pixels."""
        p = np.asarray(p_cam, dtype=float)
        uvw = self.K @ p
        return uvw[:2] / uvw[2]


@dataclass(frozen=True)
class SurfaceFeature:
    """Crater (negative depth) or boulder (positive height) on the surface.

    ``direction`` is a unit vector in the AS frame, ``radius`` an angular
    radius in radians and ``amplitude`` a fraction of the local radius.
    """

    direction: tuple[float, float, float]
    radius: float
    amplitude: float

    @property
    def is_crater(self) -> bool:
        return self.amplitude < 0


@dataclass(frozen=True)
class BodyModel:
    name: str
    semi_axes: tuple[float, float, float]
    features: tuple[SurfaceFeature, ...] = ()
    albedo: float = 0.9
    phase0_deg: float = 0.0

    def __post_init__(self):
        if min(self.semi_axes) <= 0:
            raise ValueError("semi-axes must be strictly positive")
        if not 0 < self.albedo <= 1:
            raise ValueError("albedo must lie in (0, 1]")
        for f in self.features:
            if abs(f.amplitude) >= 1:
                raise ValueError("feature amplitude must stay below the local radius")

    @property
    def craters(self) -> list[SurfaceFeature]:
        return [f for f in self.features if f.is_crater]

    @property
    def boulders(self) -> list[SurfaceFeature]:
        return [f for f in self.features if not f.is_crater]

    @property
    def spin_axis(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])

    def scaled_to_fov(self, camera: CameraModel, rho: float = 5.0, fill: float = 0.9) -> "BodyModel":
        """Uniformly rescale so the largest apparent diameter at ``rho`` is ``fill`` * FOV."""
        target = rho * np.sin(np.deg2rad(fill * camera.fov_deg) / 2)
        s = target / max(self.semi_axes)
        return replace(self, semi_axes=tuple(float(a * s) for a in self.semi_axes))

    def apparent_diameter_deg(self, rho: float) -> float:
        return float(np.rad2deg(2 * np.arcsin(max(self.semi_axes) / rho)))

    @cached_property
    def _bump_map(self) -> np.ndarray:
        return _bump_gradient_map(self.features)


# Procedural stand-ins for the four small bodies: a near-spheroidal binary
# primary, an elongated bilobed comet, a large irregular asteroid and a
# strongly elongated comet.
_BODY_SHAPES = {
    "D": ((1.0, 0.98, 0.85), 25, 20),
    "H": ((2.3, 0.9, 0.85), 20, 40),
    "L": ((1.3, 1.0, 0.75), 45, 15),
    "P": ((1.6, 1.15, 0.9), 30, 35),
    "sphere": ((1.0, 1.0, 1.0), 0, 0),
}


def make_body(name: str, seed: int = 0, camera: CameraModel | None = None, features: bool = True) -> BodyModel:
    """Procedural body by name (``D``, ``H``, ``L``, ``P`` or ``sphere``), FOV-scaled."""
    if name not in _BODY_SHAPES:
        raise ValueError(f"unknown body {name!r}; choose from {sorted(_BODY_SHAPES)}")
    axes, n_craters, n_boulders = _BODY_SHAPES[name]
    rng = np.random.default_rng(seed)
    feats = []
    if features:
        for _ in range(n_craters):
            d = _random_unit(rng)
            feats.append(SurfaceFeature(tuple(d), float(rng.uniform(0.06, 0.35)), -float(rng.uniform(0.01, 0.05))))
        for _ in range(n_boulders):
            d = _random_unit(rng)
            feats.append(SurfaceFeature(tuple(d), float(rng.uniform(0.02, 0.06)), float(rng.uniform(0.003, 0.012))))
    body = BodyModel(name=name, semi_axes=axes, features=tuple(feats))
    return body.scaled_to_fov(camera or CameraModel())


def ellipsoid_body(semi_axes, camera: CameraModel | None = None, name: str = "ellipsoid", scale: bool = True) -> BodyModel:
    body = BodyModel(name=name, semi_axes=tuple(float(a) for a in semi_axes))
    return body.scaled_to_fov(camera or CameraModel()) if scale else body


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


_MAP_LAT = 256
_MAP_LON = 512


def _grid_dirs(n_lat=_MAP_LAT, n_lon=_MAP_LON) -> np.ndarray:
    lat = np.linspace(-np.pi / 2, np.pi / 2, n_lat)
    lon = np.linspace(-np.pi, np.pi, n_lon, endpoint=False)
    lon, lat = np.meshgrid(lon, lat)
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def _bump_gradient_map(features) -> np.ndarray:
    """Surface gradient of the relative height field on a lat/lon grid, shape (lat, lon, 3)."""
    u = _grid_dirs()
    grad = np.zeros_like(u)
    for f in features:
        c = np.asarray(f.direction, dtype=float)
        diff = u - c
        chord = np.linalg.norm(diff, axis=-1)
        s = chord / f.radius
        amp = abs(f.amplitude)
        if f.is_crater:
            # parabolic bowl plus a raised rim
            dh = np.where(s < 1, 2 * amp * s, 0.0)
            rim = (s >= 1) & (s < 1.6)
            dh = np.where(rim, 0.3 * amp * np.pi / 0.6 * np.cos(np.pi * (s - 1) / 0.6), dh)
        else:
            dh = np.where(s < 3, -2 * amp * s * np.exp(-s * s), 0.0)
        dh = dh / f.radius
        tangent = diff - np.sum(diff * u, axis=-1, keepdims=True) * u
        tnorm = np.linalg.norm(tangent, axis=-1, keepdims=True)
        tangent = np.divide(tangent, tnorm, out=np.zeros_like(tangent), where=tnorm > 1e-12)
        grad += dh[..., None] * tangent
    return grad


def _lookup_gradient(bump: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    lat = np.arcsin(np.clip(dirs[:, 2], -1, 1))
    lon = np.arctan2(dirs[:, 1], dirs[:, 0])
    rows = (lat + np.pi / 2) / np.pi * (bump.shape[0] - 1)
    cols = (lon + np.pi) / (2 * np.pi) * bump.shape[1]
    out = np.empty((dirs.shape[0], 3))
    for k in range(3):
        out[:, k] = map_coordinates(bump[..., k], [rows, cols], order=1, mode="grid-wrap")
    return out


@dataclass
class ViewpointSample:
    rho: float
    az_deg: float
    el_deg: float
    sun: tuple[float, float, float] = (1.0, 0.0, 0.0)
    spin_deg: float = 0.0
    frame: str = "W"
    index: int = 0
    split: str = ""

    def __post_init__(self):
        if not RHO_RANGE[0] <= self.rho <= RHO_RANGE[1]:
            raise ValueError(f"range {self.rho} km outside {RHO_RANGE}")
        if not AZ_RANGE[0] <= self.az_deg <= AZ_RANGE[1]:
            raise ValueError(f"azimuth {self.az_deg} outside {AZ_RANGE}")
        if not EL_RANGE[0] <= self.el_deg <= EL_RANGE[1]:
            raise ValueError(f"elevation {self.el_deg} outside {EL_RANGE}")

    @property
    def position_w(self) -> np.ndarray:
        from .navmetrics import spherical_to_cartesian

        return spherical_to_cartesian(self.az_deg, self.el_deg, self.rho)


@dataclass
class GroundTruth:
    position_w: np.ndarray
    position_as: np.ndarray
    sph_w: np.ndarray
    sph_as: np.ndarray
    cob: np.ndarray
    cof: np.ndarray
    rho: float
    q_cam_to_w: np.ndarray
    spin_deg: float = 0.0

    @property
    def delta(self) -> np.ndarray:
        return self.cof - self.cob

    @property
    def rotation_cam_to_w(self) -> Rotation:
        """Quaternion stored scalar-last (x, y, z, w)."""
        return Rotation.from_quat(self.q_cam_to_w)

    def labels(self, strategy: LabelStrategy) -> LabelSet:
        """S0 labels for a labeling strategy."""
        if strategy is LabelStrategy.DR:
            values = [*self.delta, self.rho]
        elif strategy is LabelStrategy.AS_SPH:
            values = self.sph_as
        elif strategy is LabelStrategy.AS_CART:
            values = self.position_as
        elif strategy is LabelStrategy.W_SPH:
            values = self.sph_w
        else:
            values = self.position_w
        return LabelSet(strategy, values, cob=self.cob, cof=self.cof)

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        kw = {}
        for k in cls.__dataclass_fields__:
            v = d[k]
            kw[k] = np.asarray(v, dtype=float) if isinstance(v, list) else float(v)
        return cls(**kw)


def rot_z(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def camera_axes(position_w: np.ndarray) -> np.ndarray:
    """Rotation matrix CAM->W for a camera at ``position_w`` aimed at the origin.

    Image "up" (-Y_cam) is the W-frame Z axis projected on the image plane.
    """
    z = -position_w / np.linalg.norm(position_w)
    up = np.array([0.0, 0.0, 1.0])
    up_t = up - (up @ z) * z
    n = np.linalg.norm(up_t)
    if n < 1e-9:
        raise RenderError("boresight parallel to the spin axis; camera roll undefined")
    y = -up_t / n
    x = np.cross(y, z)
    return np.column_stack([x, y, z])


def _spherical(p: np.ndarray) -> np.ndarray:
    r = float(np.linalg.norm(p))
    return np.array([np.rad2deg(np.arctan2(p[1], p[0])), np.rad2deg(np.arcsin(p[2] / r)), r])


def brightness_centroid(image: np.ndarray) -> np.ndarray:
    """Intensity-weighted centroid (u, v) over all pixels."""
    total = image.sum()
    if total <= 0:
        raise RenderError("image is black; nothing to centroid")
    v, u = np.indices(image.shape)
    return np.array([(u * image).sum() / total, (v * image).sum() / total])


def render(body: BodyModel, camera: CameraModel, view: ViewpointSample, sun=None) -> tuple[np.ndarray, GroundTruth]:
    """Render one 8-bit-quantized grayscale image (floats in [0, 1]) with ground truth."""
    sun_w = np.asarray(view.sun if sun is None else sun, dtype=float)
    sun_w = sun_w / np.linalg.norm(sun_w)
    pos_w = view.position_w
    spin = body.phase0_deg + view.spin_deg
    w_to_as = rot_z(-spin)
    pos_as = w_to_as @ pos_w
    r_cw = camera_axes(pos_w)

    n = camera.sensor_px
    image = np.zeros((n, n), dtype=float)

    # only cast rays inside the projected bounding sphere
    a_max = max(body.semi_axes)
    rho = float(np.linalg.norm(pos_w))
    if a_max >= rho:
        raise RenderError("camera inside the body's bounding sphere")
    r_px = camera.focal_px * np.tan(np.arcsin(a_max / rho)) + 2
    cu, cv = camera.principal_point
    u0, u1 = max(0, int(np.floor(cu - r_px))), min(n - 1, int(np.ceil(cu + r_px)))
    v0, v1 = max(0, int(np.floor(cv - r_px))), min(n - 1, int(np.ceil(cv + r_px)))
    if u0 > u1 or v0 > v1:
        raise RenderError("body projects outside the sensor")

    vv, uu = np.mgrid[v0 : v1 + 1, u0 : u1 + 1]
    uv1 = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=0).astype(float)
    rays_cam = camera.K_inv @ uv1
    rays_cam /= np.linalg.norm(rays_cam, axis=0)
    rays_as = (w_to_as @ r_cw @ rays_cam).T

    axes = np.asarray(body.semi_axes, dtype=float)
    o = pos_as / axes
    d = rays_as / axes
    qa = np.sum(d * d, axis=1)
    qb = 2 * d @ o
    qc = o @ o - 1
    disc = qb * qb - 4 * qa * qc
    hit = disc > 0
    if not hit.any():
        raise RenderError("no ray hits the body; check scaling and pointing")
    t = (-qb[hit] - np.sqrt(disc[hit])) / (2 * qa[hit])
    p = pos_as + t[:, None] * rays_as[hit]

    normal = p / axes**2
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    if body.features:
        dirs = p / np.linalg.norm(p, axis=1, keepdims=True)
        normal = normal - _lookup_gradient(body._bump_map, dirs)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)

    sun_as = w_to_as @ sun_w
    shade = body.albedo * np.clip(normal @ sun_as, 0.0, None)
    patch = np.zeros(uu.size)
    patch[hit] = shade
    image[v0 : v1 + 1, u0 : u1 + 1] = patch.reshape(uu.shape)
    image = np.round(image * 255.0) / 255.0
    if image.max() <= 0:
        raise RenderError("body fully unlit from this viewpoint")
    try:
        blob = blob_analysis(image)
    except EmptyBlobError as exc:
        raise RenderError(str(exc)) from exc

    cof = camera.project(r_cw.T @ (-pos_w))
    # CoB is defined exactly as the preprocessing blob analysis measures it, so
    # delta labels and on-board reconstruction share one reference point
    truth = GroundTruth(
        position_w=pos_w,
        position_as=pos_as,
        sph_w=_spherical(pos_w),
        sph_as=_spherical(pos_as),
        cob=blob.cob,
        cof=cof,
        rho=rho,
        q_cam_to_w=Rotation.from_matrix(r_cw).as_quat(),
        spin_deg=float(spin),
    )
    return image, truth


def sample_cloud(n: int, seed: int, sun=(1.0, 0.0, 0.0), spin: bool = True) -> list[ViewpointSample]:
    """Seeded uniform draws of range, azimuth and elevation in W.

    With ``spin`` each viewpoint also gets a uniform body spin phase, so the
    AS and W frames differ from image to image.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    rho = rng.uniform(*RHO_RANGE, size=n)
    az = rng.uniform(*AZ_RANGE, size=n)
    el = rng.uniform(*EL_RANGE, size=n)
    phase = rng.uniform(0.0, 360.0, size=n) if spin else np.zeros(n)
    sun = tuple(float(s) for s in sun)
    return [
        ViewpointSample(float(rho[i]), float(az[i]), float(el[i]), sun=sun, spin_deg=float(phase[i]), index=i)
        for i in range(n)
    ]


def split_cloud(cloud: list[ViewpointSample], sizes=PAPER_SPLITS) -> tuple[list, list, list]:
    """Partition a cloud into consecutive train/val/test blocks and tag each sample."""
    if sum(sizes) > len(cloud):
        raise ValueError(f"split sizes {sizes} exceed cloud size {len(cloud)}")
    out = []
    start = 0
    for name, size in zip(("train", "val", "test"), sizes):
        part = cloud[start : start + size]
        for v in part:
            v.split = name
        out.append(part)
        start += size
    return tuple(out)


def dataset_id(body_name: str, strategy: LabelStrategy) -> str:
    return f"{body_name}{strategy.index}"


@dataclass
class DatasetManifest:
    dataset_id: str
    body: str
    strategy: LabelStrategy
    path: Path
    records: list[dict] = field(default_factory=list)

    def truths(self) -> list[GroundTruth]:
        return [GroundTruth.from_dict(r["truth"]) for r in self.records]

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def image(self, record: dict) -> np.ndarray:
        return read_png(self.path.parent / record["image"])


def write_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def write_f32(path, image: np.ndarray) -> None:
    np.asarray(image, dtype="<f4").tofile(path)


def build_dataset(
    body: BodyModel,
    cloud: list[ViewpointSample],
    strategy,
    out_dir,
    camera: CameraModel | None = None,
    seed: int = 0,
    image_format: str = "png",
) -> DatasetManifest | list[DatasetManifest]:
    """Render every viewpoint once and write one JSON-lines manifest per strategy.

    ``strategy`` may be a single strategy or a list; the images are shared.
    On any failure the files written so far are removed.
    """
    camera = camera or CameraModel()
    strategies = [strategy] if isinstance(strategy, (LabelStrategy, str)) else list(strategy)
    strategies = [LabelStrategy.parse(s) if isinstance(s, str) else s for s in strategies]
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    created_dir = not img_dir.exists()
    img_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    manifests = [
        DatasetManifest(dataset_id(body.name, s), body.name, s, out_dir / f"{dataset_id(body.name, s)}.jsonl")
        for s in strategies
    ]
    try:
        for view in cloud:
            image, truth = render(body, camera, view)
            name = f"{view.index:05d}.{'png' if image_format == 'png' else 'f32'}"
            path = img_dir / name
            if image_format == "png":
                write_png(path, image)
            else:
                write_f32(path, image)
            written.append(path)
            for m in manifests:
                m.records.append(
                    {
                        "index": view.index,
                        "image": f"images/{name}",
                        "split": view.split,
                        "strategy": m.strategy.value,
                        "seed": seed,
                        "view": {"rho": view.rho, "az_deg": view.az_deg, "el_deg": view.el_deg,
                                 "spin_deg": view.spin_deg, "sun": list(view.sun)},
                        "labels": truth.labels(m.strategy).values.tolist(),
                        "truth": truth.to_dict(),
                    }
                )
        for m in manifests:
            with open(m.path, "w") as fh:
                for r in m.records:
                    fh.write(json.dumps(r) + "\n")
            written.append(m.path)
        meta = {"body": asdict(body), "camera": asdict(camera), "seed": seed, "n": len(cloud),
                "datasets": [m.dataset_id for m in manifests]}
        (out_dir / "dataset.json").write_text(json.dumps(meta, indent=1))
    except BaseException:
        log.error("dataset build failed; removing %d partial files", len(written))
        for p in written:
            p.unlink(missing_ok=True)
        if created_dir:
            shutil.rmtree(img_dir, ignore_errors=True)
        raise
    return manifests[0] if len(manifests) == 1 else manifests


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not records:
        raise ValueError(f"empty manifest {path}")
    strategy = LabelStrategy.parse(records[0]["strategy"])
    body = path.stem[:-1] if path.stem[-1].isdigit() else path.stem
    return DatasetManifest(path.stem, body, strategy, path, records)


def load_dataset_meta(directory) -> tuple[BodyModel, CameraModel]:
    meta = json.loads((Path(directory) / "dataset.json").read_text())
    b = meta["body"]
    feats = tuple(SurfaceFeature(tuple(f["direction"]), f["radius"], f["amplitude"]) for f in b["features"])
    body = BodyModel(b["name"], tuple(b["semi_axes"]), feats, b["albedo"], b["phase0_deg"])
    return body, CameraModel(**meta["camera"])
