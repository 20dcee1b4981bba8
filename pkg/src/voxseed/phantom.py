"""Synthetic two-lobe phantom volumes and dataset assembly.

Each case is a union of radially deformed spheres split by a planar gap,
rendered as bright-on-dark intensities with a one-voxel blurred boundary,
additive Gaussian noise, and optional dark planar streak artifacts.  The mask
is always the exact noiseless geometry.  Case generation is deterministic:
case i of a dataset draws everything from a stream spawned off (seed, i).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter, uniform_filter

from .errors import InvalidSpecError
from .volume import Mask3D, Volume3D, load_mask, load_volume, save_mask, save_volume

_JITTER_ATTEMPTS = 25


@dataclass
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    lobes: tuple = (((15.5, 15.5, 15.5), 6.0),)
    delta: float = 0.0
    gap_width: float = 0.0
    gap_normal: tuple = None
    mu_f: float = 1.0
    mu_b: float = 0.0
    noise_sigma: float = 0.0
    artifact: tuple = None  # (ray_count, darkening)
    artifact_thickness: float = 1.5

    def validate(self):
        if len(self.dims) != 3 or any(d < 4 for d in self.dims):
            raise InvalidSpecError(f"dims must be three counts >= 4, got {self.dims}")
        if any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise InvalidSpecError(f"spacing must be positive, got {self.spacing}")
        if not self.lobes:
            raise InvalidSpecError("at least one lobe required")
        if not 0.0 <= self.delta <= 0.5:
            raise InvalidSpecError(f"deformation amplitude must lie in [0, 0.5], got {self.delta}")
        if not np.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise InvalidSpecError(f"noise sigma must be finite and >= 0, got {self.noise_sigma}")
        if self.gap_width < 0:
            raise InvalidSpecError(f"gap width must be >= 0, got {self.gap_width}")
        for center, r0 in self.lobes:
            if r0 <= 0:
                raise InvalidSpecError(f"lobe radius must be positive, got {r0}")
            reach = r0 * (1.0 + self.delta)
            for c, d in zip(center, self.dims):
                if c - reach < 0 or c + reach > d - 1:
                    raise InvalidSpecError(
                        f"lobe at {center} with reach {reach:.2f} exceeds dims {self.dims}")
        if self.artifact is not None:
            rays, dark = self.artifact
            if rays < 1 or not 0.0 <= dark <= 1.0:
                raise InvalidSpecError(f"artifact must be (rays >= 1, darkening in [0,1]), "
                                       f"got {self.artifact}")
        return self

    def to_dict(self):
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "lobes": [{"center": list(c), "r0": float(r)} for c, r in self.lobes],
            "delta": self.delta,
            "gap_width": self.gap_width,
            "gap_normal": None if self.gap_normal is None else list(self.gap_normal),
            "mu_f": self.mu_f,
            "mu_b": self.mu_b,
            "noise_sigma": self.noise_sigma,
            "artifact": None if self.artifact is None else list(self.artifact),
            "artifact_thickness": self.artifact_thickness,
        }

    @classmethod
    def from_dict(cls, rec):
        return cls(
            dims=tuple(rec["dims"]),
            spacing=tuple(rec["spacing"]),
            lobes=tuple((tuple(l["center"]), l["r0"]) for l in rec["lobes"]),
            delta=rec["delta"],
            gap_width=rec["gap_width"],
            gap_normal=None if rec.get("gap_normal") is None else tuple(rec["gap_normal"]),
            mu_f=rec["mu_f"],
            mu_b=rec["mu_b"],
            noise_sigma=rec["noise_sigma"],
            artifact=None if rec["artifact"] is None else tuple(rec["artifact"]),
            artifact_thickness=rec.get("artifact_thickness", 1.5),
        ).validate()


def _geometry_mask(spec: PhantomSpec, centers):
    grids = np.indices(spec.dims, dtype=np.float64)
    mask = np.zeros(spec.dims, bool)
    for (center, r0) in zip(centers, [r for _, r in spec.lobes]):
        dx = grids[0] - center[0]
        dy = grids[1] - center[1]
        dz = grids[2] - center[2]
        rho = np.sqrt(dx * dx + dy * dy + dz * dz)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_theta = np.where(rho > 0, dz / np.maximum(rho, 1e-12), 1.0)
        theta = np.arccos(np.clip(cos_theta, -1.0, 1.0))
        phi = np.arctan2(dy, dx)
        radius = r0 * (1.0 + spec.delta * np.sin(3.0 * theta) * np.sin(2.0 * phi))
        mask |= rho <= radius
    if spec.gap_width > 0 and len(centers) >= 2:
        c1 = np.asarray(centers[0], np.float64)
        c2 = np.asarray(centers[1], np.float64)
        axis = c2 - c1
        norm = np.linalg.norm(axis)
        if spec.gap_normal is not None:
            normal = np.asarray(spec.gap_normal, np.float64)
            normal = normal / np.linalg.norm(normal)
        elif norm > 1e-9:
            normal = axis / norm
        else:
            raise InvalidSpecError("gap requires distinct lobe centers or an explicit normal")
        mid = 0.5 * (c1 + c2)
        proj = ((grids[0] - mid[0]) * normal[0] + (grids[1] - mid[1]) * normal[1]
                + (grids[2] - mid[2]) * normal[2])
        mask &= np.abs(proj) > spec.gap_width / 2.0
    return mask


def generate_phantom(spec: PhantomSpec, rng):
    """Render (Volume3D, Mask3D) for one case, deterministically per stream."""
    spec.validate()
    centers = [np.asarray(c, np.float64) for c, _ in spec.lobes]
    mask = _geometry_mask(spec, centers)
    attempt = 0
    while mask.all() or not mask.any():
        attempt += 1
        if attempt > _JITTER_ATTEMPTS:
            raise InvalidSpecError("phantom stayed single-class after center jitter retries")
        jittered = [c + rng.uniform(-1.0, 1.0, size=3) for c in centers]
        mask = _geometry_mask(spec, jittered)

    vol = np.where(mask, spec.mu_f, spec.mu_b).astype(np.float64)
    blurred = uniform_filter(vol, size=3, mode="nearest")
    shell = maximum_filter(mask, size=3) != minimum_filter(mask, size=3)
    vol = np.where(shell, blurred, vol)
    if spec.noise_sigma > 0:
        vol = vol + rng.standard_normal(spec.dims) * spec.noise_sigma
    if spec.artifact is not None:
        rays, darkening = spec.artifact
        apex = np.array([rng.uniform(0, d - 1) for d in spec.dims])
        grids = np.indices(spec.dims, dtype=np.float64)
        for _ in range(int(rays)):
            v = rng.standard_normal(3)
            v /= np.linalg.norm(v)
            proj = ((grids[0] - apex[0]) * v[0] + (grids[1] - apex[1]) * v[1]
                    + (grids[2] - apex[2]) * v[2])
            slab = np.abs(proj) <= spec.artifact_thickness / 2.0
            vol = np.where(slab, vol * darkening, vol)
    return (Volume3D(vol.astype(np.float32), spec.spacing).validate(),
            Mask3D(mask.astype(np.uint8), spec.spacing).validate())


@dataclass
class SpecRanges:
    """Uniform sampling ranges for dataset-level phantom variation."""

    dims: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    r0: tuple = (4.5, 7.0)
    delta: tuple = (0.0, 0.3)
    gap: tuple = (1.0, 2.5)
    noise_sigma: tuple = (0.05, 0.15)
    artifact_prob: float = 0.3
    ray_count: tuple = (2, 4)
    darkening: tuple = (0.5, 0.8)
    center_jitter: float = 2.0

    def to_dict(self):
        rec = {}
        for name in ("dims", "spacing", "r0", "delta", "gap", "noise_sigma",
                     "ray_count", "darkening"):
            rec[name] = list(getattr(self, name))
        rec["artifact_prob"] = self.artifact_prob
        rec["center_jitter"] = self.center_jitter
        return rec

    @classmethod
    def from_dict(cls, rec):
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in rec.items()}
        return cls(**kw)


def sample_case_spec(ranges: SpecRanges, rng) -> PhantomSpec:
    """Draw one case's phantom parameters; a fixed draw order keeps streams
    reproducible across runs."""
    dims = np.asarray(ranges.dims, np.float64)
    mid = (dims - 1) / 2.0 + rng.uniform(-ranges.center_jitter, ranges.center_jitter, 3)
    u = rng.standard_normal(3)
    u /= np.linalg.norm(u)
    r1 = rng.uniform(*ranges.r0)
    r2 = rng.uniform(*ranges.r0)
    delta = rng.uniform(*ranges.delta)
    gap = rng.uniform(*ranges.gap)
    reach = max(r1, r2) * (1.0 + delta)
    slack = min(min(m, d - 1 - m) for m, d in zip(mid, dims))
    h_lo = gap / 2.0 + 1.5
    h_hi = max(slack - reach - 0.5, h_lo + 0.5)
    h = rng.uniform(h_lo, h_hi)
    # keep both lobes inside the volume: cap the separation, then the radii
    h = min(h, max(0.5, slack - reach - 0.5))
    allowed = slack - 0.5 - h
    if allowed < 1.0:
        raise InvalidSpecError(f"dims {ranges.dims} leave no room for two lobes")
    if reach > allowed:
        scale = allowed / reach
        r1 *= scale
        r2 *= scale
    c1 = tuple(mid - h * u)
    c2 = tuple(mid + h * u)
    sigma = rng.uniform(*ranges.noise_sigma)
    artifact = None
    if rng.random() < ranges.artifact_prob:
        rays = int(rng.integers(ranges.ray_count[0], ranges.ray_count[1] + 1))
        dark = rng.uniform(*ranges.darkening)
        artifact = (rays, dark)
    return PhantomSpec(
        dims=tuple(ranges.dims), spacing=tuple(ranges.spacing),
        lobes=((c1, r1), (c2, r2)), delta=delta, gap_width=gap,
        noise_sigma=sigma, artifact=artifact,
    ).validate()


def case_stream(seed, index):
    """Independent per-case random stream derived from the dataset seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def realize_case(ranges: SpecRanges, seed, index):
    """Sample and render case `index`; returns (spec, volume, mask)."""
    rng = case_stream(seed, index)
    spec = sample_case_spec(ranges, rng)
    vol, mask = generate_phantom(spec, rng)
    return spec, vol, mask


@dataclass
class DatasetSplit:
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)


def _case_table(n_total, n_labeled, n_val, n_test):
    if n_total < 1 or n_val < 1 or n_test < 1 or n_labeled < 1:
        raise ValueError("all split counts must be >= 1")
    if n_labeled > n_total:
        raise ValueError(f"labeled count {n_labeled} exceeds training total {n_total}")
    table = []
    idx = 0
    for i in range(n_total):
        table.append((idx, "train", i < n_labeled))
        idx += 1
    for _ in range(n_val):
        table.append((idx, "validation", True))
        idx += 1
    for _ in range(n_test):
        table.append((idx, "test", True))
        idx += 1
    return table


def make_dataset(n_total, n_labeled, n_val, n_test, ranges: SpecRanges, seed) -> DatasetSplit:
    """Generate every case and split it into labeled/unlabeled/val/test pools.

    The first n_labeled training cases keep their masks; the remaining
    training masks are discarded into the unlabeled pool.
    """
    split = DatasetSplit()
    for index, segment, labeled in _case_table(n_total, n_labeled, n_val, n_test):
        _, vol, mask = realize_case(ranges, seed, index)
        if segment == "train":
            if labeled:
                split.labeled.append((vol, mask))
            else:
                split.unlabeled.append(vol)
        elif segment == "validation":
            split.validation.append((vol, mask))
        else:
            split.test.append((vol, mask))
    return split


def write_dataset(out_dir, n_total, n_labeled, n_val, n_test, ranges: SpecRanges, seed):
    """Render all cases to VV1 files plus a manifest.json; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for index, segment, labeled in _case_table(n_total, n_labeled, n_val, n_test):
        spec, vol, mask = realize_case(ranges, seed, index)
        cid = f"case_{index:03d}"
        vol_name = f"{cid}_vol.vv1"
        mask_name = f"{cid}_mask.vv1"
        save_volume(out / vol_name, vol)
        save_mask(out / mask_name, mask)
        cases.append({
            "id": cid, "split": segment, "labeled": bool(labeled),
            "seed_index": index, "spec": spec.to_dict(),
            "vol": vol_name, "mask": mask_name,
        })
    manifest = {
        "seed": int(seed),
        "counts": {"train": n_total, "labeled": n_labeled,
                   "validation": n_val, "test": n_test},
        "ranges": ranges.to_dict(),
        "cases": cases,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_dataset(manifest_path) -> DatasetSplit:
    """Read a written dataset back; unlabeled training masks stay on disk."""
    path = Path(manifest_path)
    root = path.parent
    with open(path) as fh:
        manifest = json.load(fh)
    split = DatasetSplit()
    for rec in manifest["cases"]:
        vol = load_volume(root / rec["vol"])
        if rec["split"] == "train":
            if rec["labeled"]:
                split.labeled.append((vol, load_mask(root / rec["mask"])))
            else:
                split.unlabeled.append(vol)
        elif rec["split"] == "validation":
            split.validation.append((vol, load_mask(root / rec["mask"])))
        else:
            split.test.append((vol, load_mask(root / rec["mask"])))
    return split
