"""Synthetic paired degradations (haze, motion blur, snow), procedural clean
images, dataset I/O and patch extraction.

Images are float64 numpy arrays of shape (H, W, 3) in [0, 1]; files are 8-bit
RGB PNGs under <root>/{degraded,clean}/NNNN.png with a line-oriented manifest.
"""

import shlex
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

KINDS = ("haze", "motion_blur", "snow")
MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class DegradationSpec:
    """Degradation family plus the parameter ranges sampled per image.

    A (spec, seed) pair fully determines the degraded output.
    """

    kind: str = "haze"
    # haze: I = J*t + A*(1-t) with t = exp(-beta*d) over a smooth depth field d
    airlight_range: tuple = (0.7, 1.0)
    beta_range: tuple = (0.6, 1.4)
    depth_smoothness: float = 8.0
    # motion blur: normalized line kernel, odd length, uniform angle
    blur_length_range: tuple = (3, 13)
    # snow: soft elliptical flakes, alpha-composited
    snow_density: float = 2e-3
    snow_size_range: tuple = (1.5, 4.0)
    snow_opacity: float = 0.85

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        lo, hi = self.airlight_range
        if not (0.7 <= lo <= hi <= 1.0):
            raise ValueError(f"airlight range must sit inside [0.7, 1.0], got {self.airlight_range}")
        blo, bhi = self.beta_range
        if not (0.0 < blo <= bhi):
            raise ValueError(f"beta range must be positive, got {self.beta_range}")
        llo, lhi = self.blur_length_range
        if not (3 <= llo <= lhi <= 21) or llo % 2 == 0 or lhi % 2 == 0:
            raise ValueError(f"blur lengths must be odd within [3, 21], got {self.blur_length_range}")
        if self.snow_density < 0:
            raise ValueError(f"snow density must be >= 0, got {self.snow_density}")
        if not (0.0 <= self.snow_opacity <= 1.0):
            raise ValueError(f"snow opacity must lie in [0, 1], got {self.snow_opacity}")
        if self.depth_smoothness <= 0:
            raise ValueError(f"depth smoothness must be > 0, got {self.depth_smoothness}")


# ---------------------------------------------------------------------------
# image I/O


def read_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def write_image(path, arr):
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# procedural clean sources


def generate_clean_image(size, rng):
    """Procedural clean image: oriented gradient, a few soft shapes, light texture."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)

    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy + 1.0) / 2.0
    color_a = rng.uniform(0.1, 0.9, size=3)
    color_b = rng.uniform(0.1, 0.9, size=3)
    img = ramp[..., None] * color_a + (1.0 - ramp[..., None]) * color_b

    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(0.08, 0.3, size=2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            ry, rx = rng.uniform(0.05, 0.25, size=2)
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[mask] = 0.65 * color + 0.35 * img[mask]

    texture = rng.standard_normal((h, w, 3))
    texture = ndimage.gaussian_filter(texture, sigma=(1.5, 1.5, 0), mode="reflect")
    img = img + 0.03 * texture
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# haze


def random_depth_field(size, rng, smoothness):
    """Smooth random field scaled to [0, 1]."""
    field = rng.standard_normal(size)
    field = ndimage.gaussian_filter(field, smoothness, mode="reflect")
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.full(size, 0.5)
    return (field - lo) / (hi - lo)


def apply_haze(clean, depth, airlight, beta):
    """Atmospheric scattering: I = J*t + A*(1-t), t = exp(-beta*depth)."""
    t = np.exp(-beta * depth)[..., None]
    airlight = np.asarray(airlight, dtype=np.float64).reshape(1, 1, 3)
    return clean * t + airlight * (1.0 - t)


def synth_haze(clean, spec, seed):
    spec.validate()
    rng = np.random.default_rng(seed)
    depth = random_depth_field(clean.shape[:2], rng, spec.depth_smoothness)
    beta = rng.uniform(*spec.beta_range)
    airlight = rng.uniform(spec.airlight_range[0], spec.airlight_range[1], size=3)
    return np.clip(apply_haze(clean, depth, airlight, beta), 0.0, 1.0)


# ---------------------------------------------------------------------------
# motion blur


def line_kernel(length, angle):
    """Normalized line PSF: unit-spaced taps along the angle, bilinearly splatted."""
    if length < 1 or length % 2 == 0:
        raise ValueError(f"kernel length must be odd and positive, got {length}")
    if length == 1:
        return np.ones((1, 1))
    half = length // 2
    kernel = np.zeros((length, length))
    for i in range(-half, half + 1):
        y = half + i * np.sin(angle)
        x = half + i * np.cos(angle)
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < length and 0 <= xx < length and wy * wx > 0:
                    kernel[yy, xx] += wy * wx
    return kernel / kernel.sum()


def apply_motion_blur(clean, kernel):
    out = np.empty_like(clean)
    for ch in range(clean.shape[2]):
        out[..., ch] = ndimage.convolve(clean[..., ch], kernel, mode="reflect")
    return out


def synth_motion_blur(clean, spec, seed):
    spec.validate()
    rng = np.random.default_rng(seed)
    lo, hi = spec.blur_length_range
    length = int(rng.choice(np.arange(lo, hi + 1, 2)))
    angle = rng.uniform(0, np.pi)
    return np.clip(apply_motion_blur(clean, line_kernel(length, angle)), 0.0, 1.0)


# ---------------------------------------------------------------------------
# snow


def synth_snow(clean, spec, seed):
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = clean.shape[:2]
    out = clean.copy()
    n_flakes = int(round(spec.snow_density * h * w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(n_flakes):
        cy = rng.uniform(0, h - 1)
        cx = rng.uniform(0, w - 1)
        ry = rng.uniform(*spec.snow_size_range)
        rx = ry * rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, np.pi)
        color = rng.uniform(0.9, 1.0)
        dy, dx = yy - cy, xx - cx
        u = np.cos(theta) * dx + np.sin(theta) * dy
        v = -np.sin(theta) * dx + np.cos(theta) * dy
        dist = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
        # soft edge over the outer 40 % of the radius; exactly 1 at the core
        mask = np.clip((1.0 - dist) / 0.4, 0.0, 1.0)
        alpha = (spec.snow_opacity * mask)[..., None]
        out = out * (1.0 - alpha) + color * alpha
    return np.clip(out, 0.0, 1.0)


SYNTH_FNS = {"haze": synth_haze, "motion_blur": synth_motion_blur, "snow": synth_snow}


def degrade(clean, spec, seed):
    return SYNTH_FNS[spec.kind](clean, spec, seed)


# ---------------------------------------------------------------------------
# dataset


def _spec_to_tokens(spec):
    return {
        "kind": spec.kind,
        "airlight_range": f"{spec.airlight_range[0]},{spec.airlight_range[1]}",
        "beta_range": f"{spec.beta_range[0]},{spec.beta_range[1]}",
        "depth_smoothness": str(spec.depth_smoothness),
        "blur_length_range": f"{spec.blur_length_range[0]},{spec.blur_length_range[1]}",
        "snow_density": str(spec.snow_density),
        "snow_size_range": f"{spec.snow_size_range[0]},{spec.snow_size_range[1]}",
        "snow_opacity": str(spec.snow_opacity),
    }


def _spec_from_tokens(tokens):
    def pair(text, cast):
        a, b = text.split(",")
        return (cast(a), cast(b))

    return DegradationSpec(
        kind=tokens["kind"],
        airlight_range=pair(tokens["airlight_range"], float),
        beta_range=pair(tokens["beta_range"], float),
        depth_smoothness=float(tokens["depth_smoothness"]),
        blur_length_range=pair(tokens["blur_length_range"], int),
        snow_density=float(tokens["snow_density"]),
        snow_size_range=pair(tokens["snow_size_range"], float),
        snow_opacity=float(tokens["snow_opacity"]),
    )


def _format_record(record_type, fields):
    tokens = " ".join(f"{k}={shlex.quote(str(v))}" for k, v in fields.items())
    return f"{record_type} {tokens}"


def _parse_record(line):
    parts = shlex.split(line)
    fields = dict(part.split("=", 1) for part in parts[1:])
    return parts[0], fields


def make_dataset(clean_dir, spec, out_dir, count, seed, size=(64, 64)):
    """Write paired degraded/clean PNGs plus a manifest; returns the manifest path.

    Clean sources come from clean_dir when given, otherwise they are generated
    procedurally. Per-image seeds derive from the master seed, so regeneration
    with the same arguments is file-identical.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "degraded").mkdir(parents=True, exist_ok=True)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)

    source_paths = None
    if clean_dir is not None:
        source_paths = sorted(Path(clean_dir).glob("*.png"))
        if not source_paths:
            raise OSError(f"no .png images found in {clean_dir}")

    master = np.random.default_rng(seed)
    image_seeds = master.integers(0, 2**31 - 1, size=count)

    lines = [_format_record("spec", {**_spec_to_tokens(spec), "seed": seed, "count": count})]
    for i in range(count):
        img_seed = int(image_seeds[i])
        if source_paths is None:
            clean = generate_clean_image(size, np.random.default_rng([img_seed, 0]))
        else:
            clean = read_image(source_paths[i % len(source_paths)])
        degraded = degrade(clean, spec, img_seed)
        clean_rel = f"clean/{i:04d}.png"
        degraded_rel = f"degraded/{i:04d}.png"
        write_image(out_dir / clean_rel, clean)
        write_image(out_dir / degraded_rel, degraded)
        lines.append(
            _format_record(
                "pair",
                {"index": i, "seed": img_seed, "degraded": degraded_rel, "clean": clean_rel},
            )
        )

    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_manifest(root):
    """Parse a dataset manifest; returns (spec, pair records)."""
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise OSError(f"no manifest found at {manifest}")
    spec = None
    pairs = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        record_type, fields = _parse_record(line)
        if record_type == "spec":
            spec = _spec_from_tokens(fields)
        elif record_type == "pair":
            pairs.append(
                {
                    "index": int(fields["index"]),
                    "seed": int(fields["seed"]),
                    "degraded": root / fields["degraded"],
                    "clean": root / fields["clean"],
                }
            )
    if spec is None:
        raise OSError(f"manifest {manifest} has no spec record")
    return spec, pairs


def load_pairs(root):
    """Load all (degraded, clean) image pairs of a dataset into memory."""
    _, records = load_manifest(root)
    return [(read_image(r["degraded"]), read_image(r["clean"])) for r in records]


def extract_patches(pair, patch=256, hflip_prob=0.5, seed=0):
    """Aligned random crop plus an optional shared horizontal flip.

    The same window and the same flip decision apply to both images of the
    pair, keeping the supervision pixel-aligned.
    """
    degraded, clean = pair
    h, w = degraded.shape[:2]
    if degraded.shape[:2] != clean.shape[:2]:
        raise ValueError(f"pair size mismatch: {degraded.shape[:2]} vs {clean.shape[:2]}")
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds image size {h}x{w}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - patch + 1))
    left = int(rng.integers(0, w - patch + 1))
    deg = degraded[top : top + patch, left : left + patch]
    cln = clean[top : top + patch, left : left + patch]
    if hflip_prob > 0 and rng.random() < hflip_prob:
        deg = deg[:, ::-1]
        cln = cln[:, ::-1]
    return np.ascontiguousarray(deg), np.ascontiguousarray(cln)
