"""Synthetic polarized video: Malus-law rendering, dataset layout, septuplet sampling.

Two scene kinds are rendered. ``rotation``: six annular polarizer sectors on a
ring whose transmission axes start at 0, 30, ..., 150 degrees and turn with the
ring. ``translation``: straight polarizer stripes whose axes follow their own
direction, sliding across the frame at a constant velocity. The background is
an unpolarized screen.

Angles follow the image convention x to the right and y up, so a positive
angular velocity turns the ring counter-clockwise on screen.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import optics

log = logging.getLogger(__name__)

KINDS = ("rotation", "translation")
SEPTUPLET = 7
TARGET_INDEX = 3
MANIFEST = "manifest"
# Test share of clips, mirroring an 816 / 198 train / test division.
PUBLISHED_TEST_FRACTION = 198 / (816 + 198)


class DatasetError(OSError):
    """Missing or unreadable dataset files, reported with the offending path."""


@dataclass(frozen=True)
class Stripe:
    """A straight polarizer strip; its transmission axis is its own direction."""

    y: float
    x: float
    length: float
    width: float
    angle_deg: float


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "rotation"
    height: int = 48
    width: int = 48
    frames: int = 19
    background: float = 0.4  # screen level c; every analyzer channel reads c / 2
    source: float = 0.85  # transmitted source intensity behind each polarizer
    floor: float = 0.1  # unpolarized share of the transmitted light
    noise: float = 0.0
    supersample: int = 4
    seed: int = 0
    # rotation
    center: tuple[float, float] | None = None  # (row, col); frame center when None
    inner_radius: float = 9.0
    outer_radius: float = 19.0
    half_width_deg: float = 22.0
    phase_deg: float = 0.0  # where the ring sits on screen; axes still start at 0, 30, ..., 150
    angular_velocity_deg: float = 4.0
    # translation
    stripes: tuple[Stripe, ...] = ()
    velocity: tuple[float, float] = (0.0, 1.0)  # (rows, cols) per frame

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"scene kind must be one of {KINDS}, got {self.kind!r}")
        if self.frames < SEPTUPLET:
            raise ValueError(f"a clip needs at least {SEPTUPLET} frames, got {self.frames}")
        if self.height < 2 or self.width < 2 or self.supersample < 1:
            raise ValueError("extents must be at least 2 and supersampling at least 1")
        if not 0.0 <= self.floor <= 1.0 or self.noise < 0:
            raise ValueError("floor must lie in [0, 1] and noise must be nonnegative")
        motion = (self.angular_velocity_deg, self.phase_deg) + tuple(self.velocity)
        if not all(np.isfinite(v) for v in motion):
            raise ValueError("velocities must be finite")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("center") is not None:
            d["center"] = tuple(d["center"])
        if "velocity" in d:
            d["velocity"] = tuple(d["velocity"])
        d["stripes"] = tuple(Stripe(**s) if isinstance(s, dict) else s for s in d.get("stripes", ()))
        return cls(**d)

    def element_angles_deg(self, frame_index: float) -> np.ndarray:
        """Transmission axis of every element at a frame, in degrees mod 180."""
        if self.kind == "rotation":
            return np.mod(np.arange(6) * 30.0 + self.angular_velocity_deg * frame_index, 180.0)
        return np.mod(np.array([s.angle_deg for s in self.stripes], dtype=float), 180.0)


# -- rendering ---------------------------------------------------------------------

def _sample_grid(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Subpixel sample positions (row, col) in pixel units, shape (H*s, W*s)."""
    s = spec.supersample
    rows = (np.arange(spec.height * s) + 0.5) / s
    cols = (np.arange(spec.width * s) + 0.5) / s
    return np.meshgrid(rows, cols, indexing="ij")


def _labels(spec: SceneSpec, frame_index: float) -> np.ndarray:
    """Element index covering every subpixel sample, -1 for background."""
    r, c = _sample_grid(spec)
    labels = np.full(r.shape, -1, dtype=int)
    if spec.kind == "rotation":
        cy, cx = spec.center if spec.center is not None else (spec.height / 2, spec.width / 2)
        up, right = -(r - cy), c - cx
        radius = np.hypot(up, right)
        bearing = np.degrees(np.arctan2(up, right))
        turn = spec.phase_deg + spec.angular_velocity_deg * frame_index
        on_ring = (radius >= spec.inner_radius) & (radius <= spec.outer_radius)
        for k in range(6):
            delta = np.mod(bearing - (turn + 60.0 * k) + 180.0, 360.0) - 180.0
            labels[on_ring & (np.abs(delta) <= spec.half_width_deg)] = k
        return labels
    dy, dx = spec.velocity
    for k, st in enumerate(spec.stripes):
        a = np.radians(st.angle_deg)
        # Offsets from the stripe center in the x-right / y-up frame.
        up = -(r - (st.y + dy * frame_index))
        right = c - (st.x + dx * frame_index)
        along = right * np.cos(a) + up * np.sin(a)
        across = -right * np.sin(a) + up * np.cos(a)
        labels[(np.abs(along) <= st.length / 2) & (np.abs(across) <= st.width / 2)] = k
    return labels


def _block_mean(a: np.ndarray, s: int) -> np.ndarray:
    h, w = a.shape[-2] // s, a.shape[-1] // s
    return a.reshape(a.shape[:-2] + (h, s, w, s)).mean(axis=(-3, -1))


def element_coverage(spec: SceneSpec, frame_index: float) -> np.ndarray:
    """(n_elements + 1, H, W) area fractions; the last plane is the background."""
    labels = _labels(spec, frame_index)
    n = 6 if spec.kind == "rotation" else len(spec.stripes)
    planes = [(labels == k) for k in range(n)] + [labels == -1]
    return _block_mean(np.stack(planes).astype(float), spec.supersample)


def render_frame(spec: SceneSpec, frame_index: int) -> np.ndarray:
    """Noise-free Malus rendering plus optional Gaussian noise, as a (4, H, W) quad in [0, 1]."""
    labels = _labels(spec, frame_index)
    analyzers = np.radians(optics.ANGLES_DEG)
    phis = np.radians(spec.element_angles_deg(frame_index))
    # Per-element channel values, with the background appended as the last row.
    malus = np.cos(analyzers[None, :] - phis[:, None]) ** 2
    values = spec.source * ((1 - spec.floor) * malus + spec.floor / 2)
    values = np.vstack([values, np.full((1, 4), spec.background / 2)])
    sub = np.moveaxis(values[labels], -1, 0)  # labels of -1 pick the background row
    quad = _block_mean(sub, spec.supersample)
    if spec.noise > 0:
        rng = np.random.default_rng([spec.seed, int(frame_index)])
        quad = quad + rng.normal(0.0, spec.noise, quad.shape)
    return np.clip(quad, 0.0, 1.0)


def render_mosaic(spec: SceneSpec, frame_index: int) -> np.ndarray:
    return np.clip(optics.mosaic(render_frame(spec, frame_index)), 0.0, 1.0)


# -- dataset generation -------------------------------------------------------------

def random_scene(kind: str, rng: np.random.Generator, height: int = 48, width: int = 48,
                 frames: int = 19, noise: float = 0.005, floor: float = 0.1, seed: int = 0) -> SceneSpec:
    """Draw one clip's scene parameters."""
    common = dict(kind=kind, height=height, width=width, frames=frames, noise=noise, floor=floor,
                  seed=seed, background=float(rng.uniform(0.25, 0.5)),
                  source=float(rng.uniform(0.6, 0.95)))
    size = min(height, width)
    if kind == "rotation":
        outer = float(rng.uniform(0.36, 0.46) * size)
        speed = float(rng.uniform(2.0, 6.0)) * rng.choice([-1.0, 1.0])
        return SceneSpec(
            **common,
            center=(height / 2 + float(rng.uniform(-2, 2)), width / 2 + float(rng.uniform(-2, 2))),
            outer_radius=outer,
            inner_radius=outer * float(rng.uniform(0.45, 0.6)),
            half_width_deg=float(rng.uniform(18.0, 25.0)),
            phase_deg=float(rng.uniform(0.0, 360.0)),
            angular_velocity_deg=speed,
        )
    heading = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.5, 1.5)
    velocity = (float(speed * np.sin(heading)), float(speed * np.cos(heading)))
    stripes = []
    for _ in range(int(rng.integers(3, 6))):
        # Start stripes upstream so the drift keeps them in view for most of the clip.
        y = rng.uniform(0, height) - velocity[0] * frames / 2
        x = rng.uniform(0, width) - velocity[1] * frames / 2
        stripes.append(Stripe(float(y), float(x), float(rng.uniform(0.5, 1.0) * size),
                              float(rng.uniform(3.0, 7.0)), float(rng.uniform(0.0, 180.0))))
    return SceneSpec(**common, stripes=tuple(stripes), velocity=velocity)


def split_clips(n: int, test_fraction: float, val_fraction: float) -> list[str]:
    """Deterministic split labels for n clips of one kind: test first, then validation."""
    n_test = int(round(n * test_fraction))
    n_val = int(round((n - n_test) * val_fraction))
    return ["test"] * n_test + ["val"] * n_val + ["train"] * (n - n_test - n_val)


@dataclass(frozen=True)
class DataConfig:
    clips: int = 20  # per scene kind
    kinds: tuple[str, ...] = KINDS
    height: int = 48
    width: int = 48
    frames: int = 19
    noise: float = 0.005
    floor: float = 0.1
    test_fraction: float = PUBLISHED_TEST_FRACTION
    val_fraction: float = 0.1
    storage: str = "mosaic"  # or "quad": one 16-bit PNG per analyzer angle

    def __post_init__(self):
        if self.clips < 1:
            raise ValueError("clips must be at least 1")
        if self.storage not in ("mosaic", "quad"):
            raise ValueError(f"storage must be 'mosaic' or 'quad', got {self.storage!r}")
        if not (0 <= self.test_fraction < 1 and 0 <= self.val_fraction < 1):
            raise ValueError("split fractions must lie in [0, 1)")
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown scene kind {k!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown data keys: {sorted(unknown)}")
        d = dict(d)
        if "kinds" in d:
            d["kinds"] = tuple(d["kinds"])
        return cls(**d)


def _write_frame(clip_dir: Path, t: int, quad: np.ndarray, storage: str) -> None:
    if storage == "mosaic":
        optics.write_png16(clip_dir / f"{t:04d}_mosaic.png", optics.mosaic(quad))
    else:
        for k, angle in enumerate(optics.ANGLES_DEG):
            optics.write_png16(clip_dir / f"{t:04d}_{angle}.png", quad[k])


def make_dataset(root: str | Path, cfg: DataConfig = DataConfig(), seed: int = 0,
                 specs: list[SceneSpec] | None = None) -> Path:
    """Render clips to ``root`` and write the manifest. Deterministic given (cfg, seed, specs)."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {root}: {exc}") from exc
    entries = []
    if specs is None:
        specs, splits = [], []
        for kind_index, kind in enumerate(cfg.kinds):
            labels = split_clips(cfg.clips, cfg.test_fraction, cfg.val_fraction)
            for i in range(cfg.clips):
                rng = np.random.default_rng([seed, kind_index, i])
                clip_seed = int(rng.integers(0, 2**63 - 1))
                specs.append(random_scene(kind, rng, cfg.height, cfg.width, cfg.frames,
                                          cfg.noise, cfg.floor, clip_seed))
                splits.append(labels[i])
    else:
        splits = split_clips(len(specs), cfg.test_fraction, cfg.val_fraction)
    for idx, (spec, split) in enumerate(zip(specs, splits)):
        clip_id = f"{spec.kind}_{idx:03d}"
        clip_dir = root / clip_id
        try:
            clip_dir.mkdir(exist_ok=True)
            for t in range(spec.frames):
                _write_frame(clip_dir, t, render_frame(spec, t), cfg.storage)
        except OSError as exc:
            raise DatasetError(f"failed writing clip {clip_dir}: {exc}") from exc
        entries.append({"id": clip_id, "kind": spec.kind, "frames": spec.frames,
                        "split": split, "spec": spec.to_dict()})
    manifest = {"seed": seed, "storage": cfg.storage, "data": cfg.to_dict(), "clips": entries}
    try:
        (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetError(f"failed writing manifest {root / MANIFEST}: {exc}") from exc
    log.info("wrote %d clips to %s", len(entries), root)
    return root


def dataset_checksum(root: str | Path) -> str:
    """SHA-256 over the manifest and every clip file (relative path and bytes, sorted).

    Other files in the directory, such as a run sidecar recording where the data
    was written, are not part of the dataset and do not enter the hash.
    """
    root = Path(root)
    clips = {c["id"] for c in json.loads((root / MANIFEST).read_text())["clips"]}
    h = hashlib.sha256()
    files = [root / MANIFEST] + [p for c in clips for p in (root / c).rglob("*") if p.is_file()]
    for path in sorted(files):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


# -- reading and sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class Augment:
    hflip: bool = False
    vflip: bool = False
    tflip: bool = False
    naive: bool = False  # flip pixels only, leaving the analyzer channels in place

    @classmethod
    def draw(cls, rng: np.random.Generator, naive: bool = False) -> "Augment":
        h, v, t = (bool(b) for b in rng.integers(0, 2, size=3))
        return cls(h, v, t, naive)


@dataclass
class Septuplet:
    """Seven frames (7, C, h, w); index 3 is the interpolation target."""

    frames: np.ndarray
    clip: str = ""
    start: int = 0

    @property
    def inputs(self) -> np.ndarray:
        return np.delete(self.frames, TARGET_INDEX, axis=0)

    @property
    def target(self) -> np.ndarray:
        return self.frames[TARGET_INDEX]


class Dataset:
    """Read-only view of a generated dataset, caching decoded clips."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        path = self.root / MANIFEST
        try:
            self.manifest = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        self.storage = self.manifest.get("storage", "mosaic")
        self.clips = {c["id"]: c for c in self.manifest["clips"]}
        self._cache: dict[str, np.ndarray] = {}

    def clip_ids(self, split: str | None = None) -> list[str]:
        return [c["id"] for c in self.manifest["clips"] if split is None or c["split"] == split]

    def septuplet_index(self, split: str | None = None, stride: int = 1) -> list[tuple[str, int]]:
        """Every (clip, start) window of seven frames, in manifest order."""
        return [(cid, s) for cid in self.clip_ids(split)
                for s in range(0, self.clips[cid]["frames"] - SEPTUPLET + 1, stride)]

    def spec(self, clip: str) -> SceneSpec:
        return SceneSpec.from_dict(self.clips[clip]["spec"])

    def _frame_paths(self, clip: str, t: int) -> list[Path]:
        d = self.root / clip
        if self.storage == "mosaic":
            return [d / f"{t:04d}_mosaic.png"]
        return [d / f"{t:04d}_{a}.png" for a in optics.ANGLES_DEG]

    def raw_clip(self, clip: str) -> np.ndarray:
        """Stored frames: (F, 2H, 2W) mosaics or (F, 4, H, W) quads."""
        if clip not in self._cache:
            if clip not in self.clips:
                raise DatasetError(f"clip {clip!r} is not listed in {self.root / MANIFEST}")
            frames = []
            for t in range(self.clips[clip]["frames"]):
                paths = self._frame_paths(clip, t)
                try:
                    planes = [optics.read_png16(p) for p in paths]
                except (OSError, optics.FormatError) as exc:
                    raise DatasetError(f"cannot read frame {t} of clip {clip}: {exc}") from exc
                frames.append(planes[0] if self.storage == "mosaic" else np.stack(planes))
            self._cache[clip] = np.stack(frames)
        return self._cache[clip]

    def quads(self, clip: str) -> np.ndarray:
        raw = self.raw_clip(clip)
        return optics.demosaic(raw).astype(np.float32) if self.storage == "mosaic" else raw


def to_layout(quads: np.ndarray, layout: str) -> np.ndarray:
    """(..., 4, H, W) quads -> network-space frames of the given layout."""
    if layout == "quad":
        return quads
    if layout == "mosaic":
        return optics.mosaic(quads)[..., None, :, :].astype(quads.dtype)
    if layout == "rgb":
        intensity = 0.5 * optics.stokes_from_quad(quads).s0
        return np.repeat(intensity[..., None, :, :], 3, axis=-3).astype(quads.dtype)
    raise ValueError(f"unknown layout {layout!r}")


def flip_quads(q: np.ndarray, hflip: bool, vflip: bool, naive: bool = False) -> np.ndarray:
    """Mirror (..., 4, H, W) quads. A mirror maps an analyzer angle theta to
    180 - theta, which exchanges the 45 and 135 degree channels unless ``naive``."""
    if hflip:
        q = q[..., :, ::-1]
    if vflip:
        q = q[..., ::-1, :]
    if not naive and hflip != vflip:
        q = q[..., [0, 3, 2, 1], :, :]
    return np.ascontiguousarray(q)


def sample_septuplet(dataset: Dataset, clip: str, start: int, crop: int | None = None,
                     augment: Augment = Augment(), seed: int | None = None,
                     layout: str = "quad", offset: tuple[int, int] | None = None) -> Septuplet:
    """Seven frames from ``start`` with one shared crop and joint augmentation.

    ``crop`` is measured in mosaic pixels (even); the quad window is half of it.
    Without ``offset`` the crop position is drawn from ``seed``.
    """
    meta = dataset.clips.get(clip)
    if meta is None:
        raise DatasetError(f"clip {clip!r} not in dataset {dataset.root}")
    if start < 0 or start + SEPTUPLET > meta["frames"]:
        raise IndexError(f"septuplet start {start} out of range for clip {clip} with {meta['frames']} frames")
    stored_mosaic = dataset.storage == "mosaic"
    raw = dataset.raw_clip(clip)[start:start + SEPTUPLET]
    full_h, full_w = (raw.shape[-2], raw.shape[-1]) if stored_mosaic else (2 * raw.shape[-2], 2 * raw.shape[-1])
    if crop is None:
        top = left = 0
        ch, cw = full_h, full_w
    else:
        if crop % 2 or crop <= 0 or crop > min(full_h, full_w):
            raise ValueError(f"crop must be even and fit in {full_h}x{full_w}, got {crop}")
        ch = cw = crop
        if offset is None:
            rng = np.random.default_rng(seed)
            top = 2 * int(rng.integers(0, (full_h - crop) // 2 + 1))
            left = 2 * int(rng.integers(0, (full_w - crop) // 2 + 1))
        else:
            top, left = offset
            if top % 2 or left % 2 or top + crop > full_h or left + crop > full_w:
                raise ValueError(f"crop offset {offset} must be even and keep the window inside the frame")
    flipped = augment.hflip or augment.vflip
    if layout == "mosaic" and stored_mosaic and not flipped:
        frames = raw[..., top:top + ch, left:left + cw][:, None]
    else:
        # Demosaic on the whole frame so the crop border sees its true neighbours.
        quads = optics.demosaic(raw) if stored_mosaic else raw
        quads = quads[..., top // 2:(top + ch) // 2, left // 2:(left + cw) // 2]
        quads = flip_quads(quads, augment.hflip, augment.vflip, augment.naive)
        frames = to_layout(quads, layout)
    if augment.tflip:
        frames = frames[::-1]
    return Septuplet(np.ascontiguousarray(frames, dtype=np.float32), clip, start)
