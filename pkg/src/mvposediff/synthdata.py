"""Procedural multi-view figure dataset.

Each record is one identity (fixed clothing attributes) rendered in four
views. Every view has its own pose, and view ``k`` uses view transform ``k``.
Figures are flat-shaded capsules, so the part-label map is exact.

Pose map channel layout, float form:
    0: part label / NUM_PARTS (0 = background)
    1: position along the segment, 0 at the joint, 1 at the tip
    2: signed offset across the segment, remapped from [-1, 1] to [0, 1]

The PNG form stores ``round(255 * channel)`` for every channel. To
dequantize, divide by 255. The part label is recovered exactly as
``round(png[..., 0] * NUM_PARTS / 255)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

NUM_PARTS = 7
NUM_VIEWS = 4
DEFAULT_RESOLUTION = (64, 48)
MANIFEST_VERSION = 1

PART_NAMES = ("torso", "head", "left_arm", "right_arm", "left_leg", "right_leg", "pelvis")
# pose_params index -> (lo, hi) in radians. Arms: 0 hangs down, pi/2 is horizontal.
JOINT_LIMITS = (
    (-0.35, 0.35),   # torso lean
    (-0.5, 0.5),     # head tilt
    (-0.5, 2.6),     # left arm abduction
    (-0.5, 2.6),     # right arm abduction
    (-0.3, 0.8),     # left leg abduction
    (-0.3, 0.8),     # right leg abduction
    (-0.25, 0.25),   # pelvis tilt
)
# ranges used when sampling poses for the dataset (subset of the limits)
_SAMPLE_RANGES = (
    (-0.15, 0.15),
    (-0.3, 0.3),
    (0.0, 2.2),
    (0.0, 2.2),
    (0.0, 0.5),
    (0.0, 0.5),
    (-0.1, 0.1),
)

COLORS = {
    "red": (0.86, 0.12, 0.12),
    "green": (0.13, 0.62, 0.22),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.93, 0.82, 0.10),
    "orange": (0.95, 0.50, 0.08),
    "purple": (0.50, 0.18, 0.65),
    "pink": (0.96, 0.52, 0.72),
    "black": (0.08, 0.08, 0.08),
    "brown": (0.48, 0.30, 0.14),
    "teal": (0.05, 0.55, 0.55),
}
PATTERNS = ("solid", "striped")
BACKGROUND = (1.0, 1.0, 1.0)
SKIN = (0.87, 0.70, 0.55)
STRIPE_SHADE = 0.5
N_STRIPES = 6

# view transforms: (mirror, rotation in radians, scale)
VIEW_TRANSFORMS = (
    (False, 0.0, 1.0),
    (True, 0.0, 1.0),
    (False, 0.15, 1.0),
    (False, 0.0, 0.85),
)


@dataclass(frozen=True)
class AttributeSet:
    torso_color: str
    legs_color: str
    pattern: str = "solid"

    def __post_init__(self):
        for name in (self.torso_color, self.legs_color):
            if name not in COLORS:
                raise ValueError(f"unknown color {name!r}; vocabulary is {sorted(COLORS)}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")

    def to_text(self) -> str:
        return f"the person wears a {self.pattern} {self.torso_color} shirt and {self.legs_color} pants"

    @classmethod
    def from_text(cls, text: str) -> "AttributeSet":
        words = text.split()
        if len(words) != 10 or words[:4] != ["the", "person", "wears", "a"]:
            raise ValueError(f"not a canonical attribute string: {text!r}")
        return cls(torso_color=words[5], legs_color=words[8], pattern=words[4])


@dataclass(frozen=True)
class FigureSpec:
    identity_id: int
    appearance: AttributeSet
    pose_params: tuple[float, ...] = (0.0,) * NUM_PARTS
    view_id: int = 0

    def validate(self) -> None:
        if len(self.pose_params) != NUM_PARTS:
            raise ValueError(f"pose_params must have {NUM_PARTS} angles, got {len(self.pose_params)}")
        for i, (a, (lo, hi)) in enumerate(zip(self.pose_params, JOINT_LIMITS)):
            if not (math.isfinite(a) and lo <= a <= hi):
                raise ValueError(
                    f"joint {i} ({PART_NAMES[i]}) angle {a!r} outside limits [{lo}, {hi}]"
                )
        if self.view_id not in range(NUM_VIEWS):
            raise ValueError(f"view_id must be in 0..3, got {self.view_id}")


@dataclass
class SampleRecord:
    images: list[np.ndarray]
    pose_maps: list[np.ndarray]
    text: str
    identity_id: int
    attributes: AttributeSet | None = None
    pose_params: list[tuple[float, ...]] = field(default_factory=list)


def _rot(v: np.ndarray, a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _skeleton(pose: Sequence[float]) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Segments (start, end, radius) in figure units, y pointing down, hip at origin.

    Returned in part-label order (label = index + 1).
    """
    torso_a, head_a, larm_a, rarm_a, lleg_a, rleg_a, pelvis_a = pose
    down = np.array([0.0, 1.0])
    hip = np.zeros(2)
    up = _rot(-down, torso_a)
    neck = hip + 0.45 * up
    head_dir = _rot(up, head_a)
    head0 = neck + 0.10 * head_dir
    head1 = head0 + 0.06 * head_dir
    across = _rot(np.array([1.0, 0.0]), torso_a)
    # figure's left side is image-left (negative x)
    lshoulder = neck - 0.05 * up - 0.11 * across
    rshoulder = neck - 0.05 * up + 0.11 * across
    larm_end = lshoulder + 0.36 * _rot(_rot(down, torso_a), larm_a)
    rarm_end = rshoulder + 0.36 * _rot(_rot(down, torso_a), -rarm_a)
    side = _rot(np.array([1.0, 0.0]), pelvis_a)
    lhip = hip - 0.06 * side
    rhip = hip + 0.06 * side
    lleg_end = lhip + 0.48 * _rot(down, lleg_a)
    rleg_end = rhip + 0.48 * _rot(down, -rleg_a)
    return [
        (hip, neck, 0.095),
        (head0, head1, 0.085),
        (lshoulder, larm_end, 0.045),
        (rshoulder, rarm_end, 0.045),
        (lhip, lleg_end, 0.055),
        (rhip, rleg_end, 0.055),
        (lhip, rhip, 0.07),
    ]


# later entries are painted over earlier ones
_DRAW_ORDER = (4, 5, 6, 0, 2, 3, 1)


def render_figure(spec: FigureSpec, resolution: tuple[int, int] = DEFAULT_RESOLUTION):
    """Rasterize a figure; returns ``(image, pose_map)``, both H x W x 3 float32 in [0, 1]."""
    H, W = resolution
    if H < 16 or W < 16:
        raise ValueError(f"resolution must be at least 16x16, got {H}x{W}")
    spec.validate()
    mirror, rot, scale = VIEW_TRANSFORMS[spec.view_id]
    px = 0.70 * H * scale
    origin = np.array([W / 2.0, 0.55 * H])

    segs = []
    for a, b, r in _skeleton(spec.pose_params):
        a, b = _rot(a, rot), _rot(b, rot)
        if mirror:
            a, b = a * [-1.0, 1.0], b * [-1.0, 1.0]
        segs.append((origin + px * a, origin + px * b, px * r))

    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    label = np.zeros((H, W), dtype=np.int64)
    u_map = np.zeros((H, W))
    v_map = np.zeros((H, W))
    for k in _DRAW_ORDER:
        a, b, r = segs[k]
        d = b - a
        L2 = float(d @ d)
        t = ((xs - a[0]) * d[0] + (ys - a[1]) * d[1]) / L2
        tc = np.clip(t, 0.0, 1.0)
        dx = xs - (a[0] + tc * d[0])
        dy = ys - (a[1] + tc * d[1])
        inside = dx * dx + dy * dy <= r * r
        # signed offset relative to the segment's left-hand normal
        perp = ((xs - a[0]) * -d[1] + (ys - a[1]) * d[0]) / math.sqrt(L2)
        label[inside] = k + 1
        u_map[inside] = tc[inside]
        v_map[inside] = np.clip(perp[inside] / r, -1.0, 1.0) * 0.5 + 0.5

    shirt = np.array(COLORS[spec.appearance.torso_color])
    pants = np.array(COLORS[spec.appearance.legs_color])
    palette = np.array([BACKGROUND, shirt, SKIN, shirt, shirt, pants, pants, pants])
    image = palette[label]
    if spec.appearance.pattern == "striped":
        band = np.floor(u_map * N_STRIPES).astype(np.int64) % 2 == 1
        stripe = (label == 1) & band
        image[stripe] = shirt * STRIPE_SHADE

    pose_map = np.stack([label / NUM_PARTS, u_map, v_map], axis=-1)
    pose_map[label == 0] = 0.0
    return image.astype(np.float32), pose_map.astype(np.float32)


def pose_labels(pose_map: np.ndarray) -> np.ndarray:
    """Integer part labels from a float pose map (either freshly rendered or dequantized)."""
    return np.rint(pose_map[..., 0] * NUM_PARTS).astype(np.int64)


def quantize(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def dequantize(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / 255.0


def record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def sample_attributes(rng: np.random.Generator) -> AttributeSet:
    names = sorted(COLORS)
    return AttributeSet(
        torso_color=names[rng.integers(len(names))],
        legs_color=names[rng.integers(len(names))],
        pattern=PATTERNS[rng.integers(len(PATTERNS))],
    )


def sample_pose(rng: np.random.Generator) -> tuple[float, ...]:
    return tuple(float(rng.uniform(lo, hi)) for lo, hi in _SAMPLE_RANGES)


def make_record(seed: int, index: int, resolution=DEFAULT_RESOLUTION) -> SampleRecord:
    rng = record_rng(seed, index)
    attrs = sample_attributes(rng)
    poses = [sample_pose(rng) for _ in range(NUM_VIEWS)]
    images, pose_maps = [], []
    for view, pose in enumerate(poses):
        img, pm = render_figure(FigureSpec(index, attrs, pose, view), resolution)
        images.append(img)
        pose_maps.append(pm)
    return SampleRecord(images, pose_maps, attrs.to_text(), index, attrs, poses)


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(quantize(arr), mode="RGB").save(path, format="PNG")


def _write_record(args):
    seed, index, resolution, out_dir = args
    rec = make_record(seed, index, resolution)
    rec_dir = Path(out_dir) / f"rec_{index:05d}"
    rec_dir.mkdir(parents=True, exist_ok=True)
    for k in range(NUM_VIEWS):
        _write_png(rec_dir / f"view{k}.png", rec.images[k])
        _write_png(rec_dir / f"pose{k}.png", rec.pose_maps[k])
    (rec_dir / "text.txt").write_text(rec.text + "\n")
    return {
        "index": index,
        "dir": rec_dir.name,
        "identity_id": rec.identity_id,
        "attributes": asdict(rec.attributes),
        "pose_params": [list(p) for p in rec.pose_params],
        "text": rec.text,
    }


def generate_dataset(
    n_identities: int,
    seed: int,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    out_dir: str | Path = "data",
    workers: int = 1,
) -> dict:
    """Write ``n_identities`` records plus ``manifest.json``; returns the manifest."""
    if n_identities < 1:
        raise ValueError("n_identities must be >= 1")
    H, W = resolution
    if H < 16 or W < 16:
        raise ValueError(f"resolution must be at least 16x16, got {H}x{W}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(seed, i, (H, W), str(out_dir)) for i in range(n_identities)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_write_record, jobs))
    else:
        entries = [_write_record(j) for j in jobs]
    params = {"n_identities": n_identities, "seed": seed, "resolution": [H, W],
              "version": MANIFEST_VERSION}
    manifest = {
        "config_hash": hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:12],
        "version": MANIFEST_VERSION,
        "seed": seed,
        "resolution": [H, W],
        "num_parts": NUM_PARTS,
        "pose_dequantization": "float = png / 255; label = round(png[...,0] * num_parts / 255)",
        "records": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return dequantize(np.asarray(im.convert("RGB")))


def load_dataset(root: str | Path) -> tuple[dict, list[SampleRecord]]:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(mpath.read_text())
    records = []
    for e in manifest["records"]:
        d = root / e["dir"]
        records.append(
            SampleRecord(
                images=[_read_png(d / f"view{k}.png") for k in range(NUM_VIEWS)],
                pose_maps=[_read_png(d / f"pose{k}.png") for k in range(NUM_VIEWS)],
                text=(d / "text.txt").read_text().strip(),
                identity_id=e["identity_id"],
                attributes=AttributeSet(**e["attributes"]),
                pose_params=[tuple(p) for p in e["pose_params"]],
            )
        )
    return manifest, records
