"""Procedural generation of labeled deformed / non-deformed can images.

Two visual domains are produced from the same object geometry:

* ``X_synthetic`` — the object on an exactly black background.
* ``Y_real`` — a real-style proxy: the object composited over one of eight
  procedural background textures with a lighting gradient and mild sensor
  noise.

The renderer is a deterministic 2-D stand-in for a full 3-D pipeline: the
can silhouette is a rounded box in a signed-distance field, large-scale
deformation comes from a smooth 4x4 control-grid warp of the sampling
coordinates, and surface roughness from band-limited noise added to the
distance field near the contour.  ``export_renderer_script`` emits the
scene parameters as a human-readable script for an external 3-D renderer;
this package never executes it.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.interpolate import RegularGridInterpolator

LABEL_DEFORMED = "deformed"
LABEL_NONDEFORMED = "nondeformed"
DOMAIN_X = "X_synthetic"
DOMAIN_Y = "Y_real"
DOMAIN_CONVERTED = "X_to_Y"

# Azimuth bands (degrees) for the four stochastic camera placements.
CAMERA_THETA_BANDS = {
    1: (20.0, 70.0),
    2: (110.0, 160.0),
    3: (200.0, 250.0),
    4: (290.0, 340.0),
}
PHI_RANGE = (50.0, 70.0)
R_RANGE = (0.3, 0.45)

N_LATTICE_WEIGHTS = 16  # 4x4 control grid
N_BACKGROUND_TEXTURES = 8

# Default sampling ranges for the deformed class (amplitudes are unitless
# interpolation weights in [0, 1]; the magnitude they map to is fixed by the
# renderer).  Exposed so experiments can tighten or widen the class gap.
DEFORM_LATTICE_RANGE = (0.25, 1.0)
DEFORM_NOISE_RANGE = (0.3, 1.0)


@dataclass(frozen=True)
class CameraPose:
    """Spherical camera placement: azimuth/elevation in degrees, radius in meters."""

    theta: float
    phi: float
    r: float
    camera_index: int = 0

    def validate(self):
        in_band = any(lo <= self.theta <= hi for lo, hi in CAMERA_THETA_BANDS.values())
        if not in_band:
            raise ValueError(f"theta={self.theta} outside all camera bands")
        if not PHI_RANGE[0] <= self.phi <= PHI_RANGE[1]:
            raise ValueError(f"phi={self.phi} outside {PHI_RANGE}")
        if not R_RANGE[0] <= self.r <= R_RANGE[1]:
            raise ValueError(f"r={self.r} outside {R_RANGE}")


@dataclass(frozen=True)
class DeformationParams:
    """Shape-key style deformation weights plus the per-image noise seed.

    ``lattice_weights`` drive the 16 control points of the smooth warp,
    ``surface_noise_amp`` the hard surface displacement, ``tab_open`` the
    tab shape key (varies in both classes).  All weights are clamped to
    [0, 1].  The non-deformed class must have zero lattice weights and zero
    surface noise.
    """

    lattice_weights: tuple = (0.0,) * N_LATTICE_WEIGHTS
    surface_noise_amp: float = 0.0
    tab_open: float = 0.0
    seed: int = 0

    def __post_init__(self):
        clamped = tuple(min(1.0, max(0.0, float(w))) for w in self.lattice_weights)
        object.__setattr__(self, "lattice_weights", clamped)
        object.__setattr__(self, "surface_noise_amp", min(1.0, max(0.0, float(self.surface_noise_amp))))
        object.__setattr__(self, "tab_open", min(1.0, max(0.0, float(self.tab_open))))

    @property
    def is_deformed(self):
        return any(w > 0 for w in self.lattice_weights) or self.surface_noise_amp > 0

    @property
    def label(self):
        return LABEL_DEFORMED if self.is_deformed else LABEL_NONDEFORMED

    def to_dict(self):
        return {
            "lattice_weights": list(self.lattice_weights),
            "surface_noise_amp": self.surface_noise_amp,
            "tab_open": self.tab_open,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            lattice_weights=tuple(d["lattice_weights"]),
            surface_noise_amp=d["surface_noise_amp"],
            tab_open=d["tab_open"],
            seed=int(d["seed"]),
        )


@dataclass
class LabeledImage:
    """H x W x 3 float image in [-1, 1] plus class label and domain tag."""

    pixels: np.ndarray
    label: str
    domain: str
    id: str

    def validate(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < -1.0 or hi > 1.0:
            raise ValueError(f"pixel range [{lo}, {hi}] exceeds [-1, 1]")


@dataclass
class ManifestEntry:
    id: str
    file: str
    label: str
    domain: str
    params: DeformationParams
    pose: CameraPose

    def to_dict(self):
        return {
            "id": self.id,
            "file": self.file,
            "label": self.label,
            "domain": self.domain,
            "params": self.params.to_dict(),
            "pose": {
                "theta": self.pose.theta,
                "phi": self.pose.phi,
                "r": self.pose.r,
                "camera_index": self.pose.camera_index,
            },
        }

    @classmethod
    def from_dict(cls, d):
        pose = CameraPose(
            theta=d["pose"]["theta"],
            phi=d["pose"]["phi"],
            r=d["pose"]["r"],
            camera_index=int(d["pose"].get("camera_index", 0)),
        )
        return cls(
            id=d["id"],
            file=d["file"],
            label=d["label"],
            domain=d["domain"],
            params=DeformationParams.from_dict(d["params"]),
            pose=pose,
        )


@dataclass
class DatasetManifest:
    """Index of one generated dataset; JSON on disk next to the images."""

    entries: list = field(default_factory=list)
    generator_seed: int = 0
    image_size: int = 64
    root: str = ""  # directory the entry file paths are relative to

    def class_counts(self):
        counts = {LABEL_DEFORMED: 0, LABEL_NONDEFORMED: 0}
        for e in self.entries:
            counts[e.label] = counts.get(e.label, 0) + 1
        return counts

    def validate(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in manifest")

    def to_json(self):
        payload = {
            "generator_seed": int(self.generator_seed),
            "image_size": int(self.image_size),
            "class_counts": self.class_counts(),
            "entries": [e.to_dict() for e in self.entries],
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    def save(self, path):
        self.validate()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        manifest = cls(
            entries=[ManifestEntry.from_dict(d) for d in payload["entries"]],
            generator_seed=int(payload["generator_seed"]),
            image_size=int(payload["image_size"]),
            root=os.path.dirname(os.path.abspath(path)),
        )
        recorded = payload.get("class_counts")
        if recorded is not None and recorded != manifest.class_counts():
            raise ValueError(f"manifest class counts {recorded} inconsistent with entries")
        return manifest

    def image_path(self, entry):
        return os.path.join(self.root, entry.file)


def sample_camera_pose(rng, camera_index):
    """Uniform pose inside the given camera's azimuth band."""
    if camera_index not in CAMERA_THETA_BANDS:
        raise ValueError(f"camera_index must be in {sorted(CAMERA_THETA_BANDS)}, got {camera_index}")
    lo, hi = CAMERA_THETA_BANDS[camera_index]
    return CameraPose(
        theta=float(rng.uniform(lo, hi)),
        phi=float(rng.uniform(*PHI_RANGE)),
        r=float(rng.uniform(*R_RANGE)),
        camera_index=camera_index,
    )


def sample_deformation(rng, deformed, seed=None):
    """Draw deformation weights for one image of the requested class."""
    if seed is None:
        seed = int(rng.integers(0, 2**63 - 1))
    tab_open = float(rng.uniform(0.0, 1.0))
    if deformed:
        weights = tuple(rng.uniform(*DEFORM_LATTICE_RANGE, size=N_LATTICE_WEIGHTS).tolist())
        noise = float(rng.uniform(*DEFORM_NOISE_RANGE))
    else:
        weights = (0.0,) * N_LATTICE_WEIGHTS
        noise = 0.0
    return DeformationParams(lattice_weights=weights, surface_noise_amp=noise, tab_open=tab_open, seed=seed)


def _warp_field(params, rng, w0, h0, xs, ys):
    """Smooth displacement field from the 4x4 control grid (zero when all weights are zero)."""
    dirs = rng.uniform(-1.0, 1.0, size=(N_LATTICE_WEIGHTS, 2))
    norms = np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-9)
    dirs = dirs / norms
    weights = np.asarray(params.lattice_weights, dtype=np.float64)
    if not np.any(weights):
        return np.zeros_like(xs), np.zeros_like(ys)
    amp = 0.38 * w0
    vecs = (weights[:, None] * amp * dirs).reshape(4, 4, 2)
    gx = np.linspace(-1.6 * w0, 1.6 * w0, 4)
    gy = np.linspace(-1.3 * h0, 1.3 * h0, 4)
    pts = np.stack(
        [np.clip(ys, gy[0], gy[-1]).ravel(), np.clip(xs, gx[0], gx[-1]).ravel()], axis=-1
    )
    interp_x = RegularGridInterpolator((gy, gx), vecs[:, :, 0], method="cubic")
    interp_y = RegularGridInterpolator((gy, gx), vecs[:, :, 1], method="cubic")
    dx = interp_x(pts).reshape(xs.shape)
    dy = interp_y(pts).reshape(ys.shape)
    return dx, dy


def _contour_noise(rng, xs, ys):
    """Band-limited high-frequency field in [-1, 1] for surface roughness."""
    n = np.zeros_like(xs)
    amps = rng.uniform(0.5, 1.0, size=6)
    amps = amps / amps.sum()
    for k in range(6):
        freq = rng.uniform(30.0, 80.0)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        n += amps[k] * np.sin(freq * (np.cos(ang) * xs + np.sin(ang) * ys) + phase)
    return n


def _background_texture(idx, rng, xs, ys):
    """One of eight procedural textures, values in [0, 1]."""
    g1, g2 = sorted(rng.uniform(0.15, 0.95, size=2).tolist())
    if idx == 0:  # checkerboard
        s = int(rng.integers(4, 9))
        base = ((np.floor((xs + 1) / 2 * s) + np.floor((ys + 1) / 2 * s)) % 2)
    elif idx == 1:  # horizontal gradient
        base = (xs + 1) / 2
    elif idx == 2:  # diagonal gradient with ripple
        base = np.clip((xs + ys + 2) / 4 + 0.08 * np.sin(9 * xs), 0, 1)
    elif idx == 3:  # low-frequency blotches
        base = _low_freq_noise(rng, xs, ys)
    elif idx == 4:  # wood-grain stripes
        base = 0.5 + 0.5 * np.sin(11 * xs + 0.9 * np.sin(3.0 * ys) + rng.uniform(0, 6))
    elif idx == 5:  # radial gradient
        cx, cy = rng.uniform(-0.6, 0.6, size=2)
        base = np.clip(np.hypot(xs - cx, ys - cy) / 2.0, 0, 1)
    elif idx == 6:  # checker + blotch mix
        s = int(rng.integers(3, 7))
        check = ((np.floor((xs + 1) / 2 * s) + np.floor((ys + 1) / 2 * s)) % 2)
        base = 0.5 * check + 0.5 * _low_freq_noise(rng, xs, ys)
    else:  # two-tone split with soft edge and blotches
        ang = rng.uniform(0, 2 * math.pi)
        edge = np.tanh(4.0 * (np.cos(ang) * xs + np.sin(ang) * ys))
        base = 0.5 + 0.35 * edge + 0.15 * (_low_freq_noise(rng, xs, ys) - 0.5)
    base = np.clip(base, 0.0, 1.0)
    return g1 + (g2 - g1) * base


def _low_freq_noise(rng, xs, ys):
    n = np.zeros_like(xs)
    for _ in range(5):
        fx, fy = rng.uniform(1.5, 6.0, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        n += np.sin(fx * xs + fy * ys + phase)
    n = (n - n.min()) / max(n.max() - n.min(), 1e-9)
    return n


def _render_arrays(params, pose, domain, size):
    """Core renderer; returns (pixels HxWx3 float32 in [-1,1], object mask HxW bool).

    Geometry consumes only the geometry RNG stream so the object mask is
    identical across domains for the same (params, pose, size).
    """
    if size < 32:
        raise ValueError(f"image size must be >= 32, got {size}")
    if domain not in (DOMAIN_X, DOMAIN_Y):
        raise ValueError(f"unknown domain {domain!r}")

    geo_rng = np.random.default_rng(np.random.SeedSequence([params.seed & (2**63 - 1), 0]))
    bg_rng = np.random.default_rng(np.random.SeedSequence([params.seed & (2**63 - 1), 1]))

    coords = np.linspace(-1.0, 1.0, size)
    xs, ys = np.meshgrid(coords, coords)

    scale = 0.36 / pose.r
    w0 = 0.23 * scale
    phi_t = (pose.phi - PHI_RANGE[0]) / (PHI_RANGE[1] - PHI_RANGE[0])
    h0 = 0.52 * scale * (1.0 - 0.12 * phi_t)

    dx, dy = _warp_field(params, geo_rng, w0, h0, xs, ys)
    xw = xs + dx
    yw = ys + dy

    # rounded-box signed distance of the can silhouette
    ax = np.abs(xw) - w0
    ay = np.abs(yw) - h0
    outside = np.hypot(np.maximum(ax, 0.0), np.maximum(ay, 0.0))
    inside = np.minimum(np.maximum(ax, ay), 0.0)
    sdf = outside + inside - 0.03 * scale

    noise = _contour_noise(geo_rng, xs, ys)
    envelope = np.exp(-((sdf / (0.05 * scale)) ** 2))
    sdf = sdf + params.surface_noise_amp * 0.035 * scale * noise * envelope
    mask = sdf < 0.0

    # shading in [0, 1]; vertical metallic bands + label band + tab mark
    u = np.clip(xw / w0, -1.0, 1.0)
    yn = np.clip(yw / h0, -1.0, 1.0)
    theta_rad = math.radians(pose.theta)
    metal = 0.30 + 0.48 * np.abs(np.cos(1.9 * u + 0.4)) ** 2.5
    img = np.empty((size, size, 3), dtype=np.float64)
    for c, tint in enumerate((0.92, 0.94, 0.97)):
        img[:, :, c] = metal * tint

    band = (yn > -0.15) & (yn < 0.45)
    stripe = 0.5 + 0.5 * np.sin(10.0 * u + 2.0 * theta_rad)
    label_shade = 0.72 + 0.28 * stripe
    for c, base in enumerate((0.80, 0.18, 0.20)):
        img[:, :, c] = np.where(band, base * label_shade * (0.6 + 0.4 * metal), img[:, :, c])

    rim = yn < -0.82
    img[rim] = np.minimum(img[rim] * 1.18, 1.0)

    # tab shape key: dark ellipse near the can top, both classes
    e_top = 0.25 + 0.5 * phi_t
    tab = ((xw / (0.30 * w0)) ** 2 + ((yw + 0.70 * h0) / (0.16 * h0 * e_top + 1e-9)) ** 2) < 1.0
    img[tab] *= 1.0 - 0.55 * params.tab_open

    img *= (1.0 - 0.10 * yn)[:, :, None]  # vertical lighting falloff
    img = np.clip(img, 0.0, 1.0)

    if domain == DOMAIN_X:
        out = np.where(mask[:, :, None], img, 0.0)
    else:
        texture_id = int(bg_rng.integers(N_BACKGROUND_TEXTURES))
        bg = _background_texture(texture_id, bg_rng, xs, ys)
        bg3 = np.repeat(bg[:, :, None], 3, axis=2)
        bg3 *= bg_rng.uniform(0.9, 1.1, size=3)[None, None, :]
        out = np.where(mask[:, :, None], img, np.clip(bg3, 0.0, 1.0))
        gx, gy_ = bg_rng.uniform(-1.0, 1.0, size=2)
        norm = max(math.hypot(gx, gy_), 1e-9)
        light = 1.0 + 0.18 * (gx / norm * xs + gy_ / norm * ys)
        out = out * light[:, :, None]
        out = out + bg_rng.normal(0.0, 0.02, size=out.shape)

    pixels = np.clip(out * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)
    return pixels, mask


def render_procedural(params, pose, domain, size=64, image_id=None):
    """Render one labeled image; deterministic in (params.seed, pose, domain, size)."""
    pixels, _ = _render_arrays(params, pose, domain, size)
    if image_id is None:
        image_id = f"img-{params.seed & (2**63 - 1):016x}"
    return LabeledImage(pixels=pixels, label=params.label, domain=domain, id=image_id)


def object_mask(params, pose, size=64):
    """Boolean object/background separation for the same geometry the renderer draws."""
    _, mask = _render_arrays(params, pose, DOMAIN_X, size)
    return mask


def encode_png(pixels):
    """[-1, 1] float -> 8-bit PNG bytes mapping -1 -> 0 and 1 -> 255."""
    u8 = np.clip(np.round((pixels.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return Image.fromarray(u8, mode="RGB")


def decode_png(path):
    """8-bit PNG -> float32 pixels in [-1, 1]."""
    with Image.open(path) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.float32)
    return u8 / 127.5 - 1.0


def generate_dataset(n_per_class, domain, seed, out_dir, size=64):
    """Write n_per_class images of each class plus a manifest.json under out_dir.

    Exact class balance; byte-identical output for equal (seed, arguments).
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)

    manifest = DatasetManifest(generator_seed=seed, image_size=size, root=os.path.abspath(out_dir))
    for class_idx, deformed in enumerate((True, False)):
        tag = "d" if deformed else "n"
        for i in range(n_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), class_idx, i]))
            camera_index = int(rng.integers(1, 5))
            pose = sample_camera_pose(rng, camera_index)
            params = sample_deformation(rng, deformed)
            image_id = f"{domain}-{seed & 0xFFFFFFFF:08x}-{tag}{i:05d}"
            image = render_procedural(params, pose, domain, size=size, image_id=image_id)
            rel = os.path.join("images", f"{image_id}.png")
            encode_png(image.pixels).save(os.path.join(out_dir, rel))
            manifest.entries.append(
                ManifestEntry(id=image_id, file=rel, label=image.label, domain=domain, params=params, pose=pose)
            )
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def _env_rotation(params):
    """Deterministic environment-lighting rotation directive for the scene script."""
    rng = np.random.default_rng(np.random.SeedSequence([params.seed & (2**63 - 1), 2]))
    return float(rng.uniform(0.0, 360.0))


def export_renderer_script(manifest, out_path):
    """Emit a plain-text scene script (one directive per line) for an external renderer.

    Floats are printed with repr-fidelity so a parser can recover the exact
    deformation parameters.
    """
    lines = [
        "# procedural can scene script, format v1",
        f"# entries={len(manifest.entries)} image_size={manifest.image_size}",
    ]
    for e in manifest.entries:
        weights = ",".join(f"{w:.17g}" for w in e.params.lattice_weights)
        lines.append(f"scene id={e.id} label={e.label} domain={e.domain}")
        lines.append(
            "camera index={} theta_deg={:.17g} phi_deg={:.17g} r_m={:.17g}".format(
                e.pose.camera_index, e.pose.theta, e.pose.phi, e.pose.r
            )
        )
        lines.append(f"lattice weights={weights}")
        lines.append(f"displace stucci strength={e.params.surface_noise_amp:.17g}")
        lines.append(f"shapekey name=tab_open value={e.params.tab_open:.17g}")
        lines.append(f"deform seed={int(e.params.seed)}")
        lines.append(f"environment hdri_rotation_deg={_env_rotation(e.params):.17g}")
        lines.append(f"render file={e.file} size={manifest.image_size}")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    return out_path
