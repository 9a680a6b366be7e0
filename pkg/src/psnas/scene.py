"""Synthetic Lambertian scenes, rendering, GBR transforms and the least-squares solver."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VIEW = np.array([0.0, 0.0, 1.0])
INTENSITY_RANGE = (0.2, 2.0)


@dataclass
class ObjectScene:
    normals: np.ndarray  # [3,H,W], unit on mask
    albedo: np.ndarray  # [H,W]
    mask: np.ndarray  # [H,W] bool

    @property
    def resolution(self) -> tuple[int, int]:
        return self.mask.shape

    def validate(self, atol: float = 1e-6) -> None:
        n = self.normals[:, self.mask]
        if not np.allclose(np.linalg.norm(n, axis=0), 1.0, atol=atol):
            raise ValueError("normals must be unit length on the mask")
        if (n[2] <= 0).any():
            raise ValueError("normals must face the viewer on the mask")
        rho = self.albedo[self.mask]
        if (rho <= 0).any() or (rho > 1).any():
            raise ValueError("albedo must lie in (0, 1]")


@dataclass
class LightSet:
    directions: np.ndarray  # [n,3] unit, z >= 0
    intensities: np.ndarray  # [n]

    def __len__(self) -> int:
        return self.directions.shape[0]

    @property
    def scaled(self) -> np.ndarray:
        """Directions scaled by their intensities, [n,3]."""
        return self.directions * self.intensities[:, None]

    def subset(self, idx) -> "LightSet":
        return LightSet(self.directions[idx], self.intensities[idx])

    def validate(self, atol: float = 1e-9) -> None:
        if not np.allclose(np.linalg.norm(self.directions, axis=1), 1.0, atol=atol):
            raise ValueError("light directions must be unit length")
        if (self.directions[:, 2] < 0).any():
            raise ValueError("light directions must lie in the upper hemisphere")
        lo, hi = INTENSITY_RANGE
        if (self.intensities < lo - atol).any() or (self.intensities > hi + atol).any():
            raise ValueError(f"light intensities must lie in [{lo}, {hi}]")


@dataclass(frozen=True)
class GbrParams:
    mu: float
    nu: float
    lam: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [self.mu, self.nu, self.lam]])


@dataclass
class NoiseSpec:
    sigma: float = 0.0
    shadow_clamp: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise sigma must be >= 0")


@dataclass
class PSObservation:
    images: np.ndarray  # [n,1,H,W]
    mask: np.ndarray  # [H,W] bool
    lights: LightSet | None = None
    scene: ObjectScene | None = None

    @property
    def num_images(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "PSObservation":
        lights = self.lights.subset(idx) if self.lights is not None else None
        return PSObservation(self.images[idx], self.mask, lights, self.scene)


@dataclass
class NormalMap:
    normals: np.ndarray  # [3,H,W]
    mask: np.ndarray  # [H,W] bool


# ---------------------------------------------------------------- rendering

def render(scene: ObjectScene, lights: LightSet, noise: NoiseSpec | None = None,
           rng: np.random.Generator | None = None) -> PSObservation:
    """Lambertian image stack ``max(0, rho n.l) e + E``, clamped at 0, zero off-mask."""
    noise = noise or NoiseSpec()
    scaled_normals = scene.normals * scene.albedo[None]
    shading = np.einsum("nc,chw->nhw", lights.directions, scaled_normals)
    if noise.shadow_clamp:
        shading = np.maximum(shading, 0.0)
    images = shading * lights.intensities[:, None, None]
    if noise.sigma > 0:
        if rng is None:
            raise ValueError("a noise sigma needs an rng")
        images = images + rng.normal(0.0, noise.sigma, images.shape)
    images = np.maximum(images, 0.0) * scene.mask[None]
    return PSObservation(images[:, None], scene.mask.copy(), lights, scene)


def apply_gbr(scene: ObjectScene, lights: LightSet, g: GbrParams) -> tuple[ObjectScene, LightSet]:
    """Map scaled normals by G^-T and scaled lights by G; images are unchanged."""
    if g.lam == 0:
        raise ValueError("GBR lambda must be non-zero")
    G = g.matrix
    scaled = np.einsum("ij,jhw->ihw", np.linalg.inv(G).T, scene.normals * scene.albedo[None])
    albedo = np.linalg.norm(scaled, axis=0)
    mask = scene.mask & (scaled[2] > 0)
    safe = np.where(albedo > 0, albedo, 1.0)
    normals = np.where(mask[None], scaled / safe[None], 0.0)
    albedo = np.where(mask, albedo, 0.0)
    s = lights.scaled @ G.T
    e = np.linalg.norm(s, axis=1)
    return ObjectScene(normals, albedo, mask), LightSet(s / e[:, None], e)


# ------------------------------------------------------------------ lights

def direction_from_angles(phi, theta) -> np.ndarray:
    """Azimuth in [0, pi], elevation in [-pi/2, pi/2] -> upper-hemisphere unit vectors."""
    phi, theta = np.asarray(phi, float), np.asarray(theta, float)
    return np.stack([np.cos(theta) * np.cos(phi), np.sin(theta), np.cos(theta) * np.sin(phi)],
                    axis=-1)


def angles_from_direction(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, float)
    phi = np.arctan2(np.maximum(d[..., 2], 0.0), d[..., 0])
    theta = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))
    return phi, theta


def sample_upper_hemisphere(count: int, rng: np.random.Generator) -> LightSet:
    if count < 1:
        raise ValueError("need at least one light")
    phi = rng.uniform(0.0, np.pi, count)
    theta = rng.uniform(-np.pi / 2, np.pi / 2, count)
    d = direction_from_angles(phi, theta)
    d[:, 2] = np.maximum(d[:, 2], 0.0)
    e = rng.uniform(*INTENSITY_RANGE, count)
    return LightSet(d, e)


# ------------------------------------------------------------ augmentation

NUM_DIHEDRAL = 8


def _dihedral_spatial(arr: np.ndarray, k: int) -> np.ndarray:
    if k & 4:
        arr = np.swapaxes(arr, -1, -2)
    if k & 1:
        arr = arr[..., ::-1]
    if k & 2:
        arr = arr[..., ::-1, :]
    return np.ascontiguousarray(arr)


def _dihedral_vectors(v: np.ndarray, k: int, axis: int) -> np.ndarray:
    v = np.moveaxis(np.array(v, dtype=float), axis, 0)
    if k & 4:
        v[[0, 1]] = -v[[1, 0]]
    if k & 1:
        v[0] = -v[0]
    if k & 2:
        v[1] = -v[1]
    return np.moveaxis(v, 0, axis)


def dihedral(obs: PSObservation, k: int) -> PSObservation:
    """One of the eight flips/transposes of the image plane, applied consistently.

    Bit 0 mirrors x, bit 1 mirrors y, bit 2 transposes (x, y) -> (-y, -x);
    normals and light directions are transformed with the pixels, so the
    result is again a valid rendering of a (transformed) scene.
    """
    if not 0 <= k < NUM_DIHEDRAL:
        raise ValueError(f"dihedral index must be in [0, {NUM_DIHEDRAL})")
    lights = scene = None
    if obs.lights is not None:
        lights = LightSet(_dihedral_vectors(obs.lights.directions, k, 1), obs.lights.intensities)
    if obs.scene is not None:
        s = obs.scene
        scene = ObjectScene(_dihedral_spatial(_dihedral_vectors(s.normals, k, 0), k),
                            _dihedral_spatial(s.albedo, k), _dihedral_spatial(s.mask, k))
    return PSObservation(_dihedral_spatial(obs.images, k), _dihedral_spatial(obs.mask, k),
                         lights, scene)


# ------------------------------------------------------------------ scenes

def pixel_grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates in [-1, 1]; x to the right, y up."""
    c = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    return np.meshgrid(c, -c)


def bump_field(x, y, centers, amplitudes, widths):
    """Sum of Gaussian bumps ``a exp(-|p - c|^2 / s^2)`` and its analytic gradient."""
    z = np.zeros_like(x)
    dzdx = np.zeros_like(x)
    dzdy = np.zeros_like(x)
    for (cx, cy), a, s in zip(centers, amplitudes, widths):
        b = a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / s ** 2)
        z += b
        dzdx += b * (-2.0 * (x - cx) / s ** 2)
        dzdy += b * (-2.0 * (y - cy) / s ** 2)
    return z, dzdx, dzdy


def normals_from_gradient(dzdx: np.ndarray, dzdy: np.ndarray) -> np.ndarray:
    n = np.stack([-dzdx, -dzdy, np.ones_like(dzdx)])
    return n / np.linalg.norm(n, axis=0, keepdims=True)


@dataclass
class BlobConfig:
    amplitude: tuple[float, float] = (0.3, 0.7)
    width: tuple[float, float] = (0.3, 0.6)
    center_spread: float = 0.45
    mask_fraction: float = 0.2  # of the peak height
    min_mask_pixels: float = 0.1  # fraction of the image
    albedo_regions: tuple[int, int] = (2, 5)
    albedo: tuple[float, float] = (0.3, 1.0)
    max_retries: int = 10


def generate_blob_scene(resolution: int, blob_count: int, rng: np.random.Generator,
                        config: BlobConfig | None = None) -> ObjectScene:
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    cfg = config or BlobConfig()
    x, y = pixel_grid(resolution)
    for _ in range(cfg.max_retries):
        sub = np.random.default_rng(rng.integers(2 ** 63))
        centers = sub.uniform(-cfg.center_spread, cfg.center_spread, (blob_count, 2))
        amps = sub.uniform(*cfg.amplitude, blob_count)
        widths = sub.uniform(*cfg.width, blob_count)
        z, dzdx, dzdy = bump_field(x, y, centers, amps, widths)
        mask = z > cfg.mask_fraction * z.max()
        if mask.mean() < cfg.min_mask_pixels:
            continue
        normals = normals_from_gradient(dzdx, dzdy) * mask[None]
        k = sub.integers(cfg.albedo_regions[0], cfg.albedo_regions[1] + 1)
        seeds = sub.uniform(-1, 1, (k, 2))
        values = sub.uniform(*cfg.albedo, k)
        region = np.argmin((x[None] - seeds[:, 0, None, None]) ** 2
                           + (y[None] - seeds[:, 1, None, None]) ** 2, axis=0)
        albedo = values[region] * mask
        return ObjectScene(normals, albedo, mask)
    raise RuntimeError(f"could not generate a non-degenerate mask in {cfg.max_retries} tries")


# -------------------------------------------------------- least squares

class RankDeficientLighting(ValueError):
    pass


def woodham_solve(obs: PSObservation, lights: LightSet, discard_shadows: bool = True,
                  cond_limit: float = 1e8) -> tuple[NormalMap, np.ndarray]:
    """Per-pixel least squares for albedo-scaled normals given calibrated lights.

    With ``discard_shadows`` zero-valued observations are treated as attached
    shadows and left out of that pixel's system; pixels left with a singular
    system are removed from the returned mask.
    """
    S = lights.scaled  # [n,3]
    n = S.shape[0]
    sv = np.linalg.svd(S, compute_uv=False) if n else np.zeros(0)
    if n < 3 or sv[-1] <= sv[0] / cond_limit:
        report = ", ".join(f"{v:.3g}" for v in sv)
        raise RankDeficientLighting(
            f"lighting matrix has rank < 3 ({n} lights, singular values [{report}])")
    mask = obs.mask
    I = obs.images[:, 0][:, mask]  # [n,m]
    if discard_shadows:
        w = (I > 0).astype(float)
        A = np.einsum("nm,ni,nj->mij", w, S, S)
        b = np.einsum("nm,nm,ni->mi", w, I, S)
        ok = w.sum(axis=0) >= 3
        ok &= np.linalg.cond(np.where(ok[:, None, None], A, np.eye(3))) < cond_limit
        A[~ok] = np.eye(3)
        nbar = np.linalg.solve(A, b[..., None])[..., 0].T  # [3,m]
    else:
        nbar, *_ = np.linalg.lstsq(S, I, rcond=None)
        ok = np.ones(I.shape[1], bool)
    albedo_m = np.linalg.norm(nbar, axis=0)
    ok &= albedo_m > 0
    normals = np.zeros((3,) + mask.shape)
    albedo = np.zeros(mask.shape)
    idx = np.flatnonzero(mask)[ok]
    normals.reshape(3, -1)[:, idx] = nbar[:, ok] / albedo_m[ok]
    albedo.reshape(-1)[idx] = albedo_m[ok]
    solved = np.zeros(mask.shape, bool)
    solved.reshape(-1)[idx] = True
    return NormalMap(normals, solved), albedo


# ------------------------------------------------------- dataset container

ARRAYS = ("images", "normals", "mask", "lights", "intensities", "albedo")


class ContainerError(ValueError):
    pass


def _write_array(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def write_scene(directory: Path, obs: PSObservation, extra: dict | None = None) -> None:
    """One scene directory: raw little-endian float32 arrays plus ``scene.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {"images": obs.images[:, 0], "mask": obs.mask.astype(np.float32)}
    if obs.lights is not None:
        arrays["lights"] = obs.lights.directions
        arrays["intensities"] = obs.lights.intensities
    if obs.scene is not None:
        arrays["normals"] = obs.scene.normals
        arrays["albedo"] = obs.scene.albedo
    shapes = {}
    for name, arr in arrays.items():
        _write_array(directory / f"{name}.f32", arr)
        shapes[name] = list(arr.shape)
    meta = {"format": "psnas-scene", "version": 1, "dtype": "<f4", "arrays": shapes}
    meta.update(extra or {})
    (directory / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_scene(directory: Path) -> PSObservation:
    directory = Path(directory)
    meta_path = directory / "scene.json"
    if not meta_path.is_file():
        raise ContainerError(f"{directory}: missing scene.json")
    try:
        meta = json.loads(meta_path.read_text())
        shapes = {k: tuple(v) for k, v in meta["arrays"].items()}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ContainerError(f"{meta_path}: malformed metadata ({exc})") from None
    for required in ("images", "mask"):
        if required not in shapes or not (directory / f"{required}.f32").is_file():
            raise ContainerError(f"{directory}: missing {required} array")

    def load(name):
        path = directory / f"{name}.f32"
        data = np.fromfile(path, dtype="<f4")
        if data.size != int(np.prod(shapes[name])):
            raise ContainerError(f"{path}: {data.size} values, expected shape {shapes[name]}")
        return data.reshape(shapes[name]).astype(np.float64)

    images = load("images")
    mask = load("mask") > 0.5
    if images.ndim != 3 or images.shape[1:] != mask.shape:
        raise ContainerError(f"{directory}: images {images.shape} do not match mask {mask.shape}")
    lights = scene = None
    if "lights" in shapes and (directory / "lights.f32").is_file():
        lights = LightSet(load("lights"), load("intensities"))
    if "normals" in shapes and (directory / "normals.f32").is_file():
        albedo = load("albedo") if "albedo" in shapes else mask.astype(float)
        scene = ObjectScene(load("normals"), albedo, mask)
    return PSObservation(images[:, None], mask, lights, scene)


@dataclass
class Dataset:
    root: Path
    manifest: dict = field(default_factory=dict)

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        path = root / "manifest.json"
        if not path.is_file():
            raise ContainerError(f"{root}: not a dataset (no manifest.json)")
        return cls(root, json.loads(path.read_text()))

    def scene_ids(self, split: str) -> list[str]:
        splits = self.manifest.get("splits", {})
        if split not in splits:
            raise ContainerError(f"dataset has no split {split!r} (have {sorted(splits)})")
        return list(splits[split])

    def load(self, scene_id: str) -> PSObservation:
        return read_scene(self.root / "scenes" / scene_id)

    def load_split(self, split: str) -> list[PSObservation]:
        return [self.load(s) for s in self.scene_ids(split)]
