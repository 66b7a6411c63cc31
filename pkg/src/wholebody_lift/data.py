"""Datasets: internal JSON format, H3WB conversion, synthetic skeletons, batching.

Internal on-disk format, one JSON document per split::

    {
      "<sample_id>": {
        "joints_2d": [[x, y], ...],        # 133 rows, pixels
        "joints_3d": [[x, y, z], ...],     # 133 rows, millimetres (optional)
        "subject": "S1",                   # optional
        "camera": {...}                    # optional, synthetic data only
      },
      ...
    }

A dataset directory may also hold ``meta.json`` with ``image_size`` and other
run metadata; it is never read as samples.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from wholebody_lift.features import DEFAULT_IMAGE_SIZE, FeatureError, PoseSample, assemble_input, pelvis_center
from wholebody_lift.skeleton import SkeletonTopology, flip_permutation

log = logging.getLogger(__name__)

META_FILE = "meta.json"
_SUBJECT_RE = re.compile(r"^S\d+$")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    name: str
    subjects: Optional[frozenset] = None
    require_3d: bool = True


H3WB_TRAIN = SplitSpec("train", frozenset({"S1", "S5", "S6", "S7"}))
H3WB_TEST = SplitSpec("test", frozenset({"S8"}))
ANY_SPLIT = SplitSpec("any")


@dataclass
class Dataset:
    samples: list[PoseSample]
    split_tag: str
    subjects: tuple[str, ...] = ()
    image_size: tuple[float, float] = DEFAULT_IMAGE_SIZE
    metadata: dict = field(default_factory=dict)
    # (sample_id, reason) for every document entry that failed validation
    rejected: list[tuple[str, str]] = field(default_factory=list)
    scanned: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def has_3d(self) -> bool:
        return all(s.joints_3d_gt is not None for s in self.samples)

    def joints_2d(self) -> np.ndarray:
        return np.stack([s.joints_2d for s in self.samples])

    def joints_3d(self) -> np.ndarray:
        if not self.has_3d:
            raise DataError(f"dataset '{self.split_tag}' has samples without 3D ground truth")
        return np.stack([s.joints_3d_gt for s in self.samples])

    def inputs(self, topo: SkeletonTopology) -> np.ndarray:
        return assemble_input(self.joints_2d(), topo, self.image_size)

    def targets(self, topo: SkeletonTopology) -> np.ndarray:
        """Pelvis-centred 3D ground truth in millimetres."""
        return pelvis_center(self.joints_3d(), topo)


# ---------------------------------------------------------------------------
# reading / writing the internal format
# ---------------------------------------------------------------------------


def _sample_from_entry(sid: str, entry: dict, num_joints: int, require_3d: bool) -> PoseSample:
    if not isinstance(entry, dict) or "joints_2d" not in entry:
        raise DataError(f"sample {sid!r}: malformed entry (missing 'joints_2d')")
    j2 = np.asarray(entry["joints_2d"], dtype=np.float64)
    if j2.ndim != 2 or j2.shape[1] != 2:
        raise DataError(f"sample {sid!r}: joints_2d must be rows of [x, y], got shape {j2.shape}")
    if j2.shape[0] != num_joints:
        raise DataError(f"sample {sid!r}: has {j2.shape[0]} keypoints, expected {num_joints}")
    j3 = entry.get("joints_3d")
    if j3 is None:
        if require_3d:
            raise DataError(f"sample {sid!r}: missing joints_3d in a split that requires 3D")
    else:
        j3 = np.asarray(j3, dtype=np.float64)
        if j3.shape != (num_joints, 3):
            raise DataError(f"sample {sid!r}: joints_3d has shape {j3.shape}, expected ({num_joints}, 3)")
    subject = entry.get("subject") or _infer_subject(sid)
    try:
        return PoseSample(j2, j3, sample_id=sid, subject_id=subject)
    except FeatureError as e:
        raise DataError(str(e)) from e


def _infer_subject(sample_id: str) -> str:
    for part in re.split(r"[/_.\-]", sample_id):
        if _SUBJECT_RE.match(part):
            return part
    return ""


def _document_paths(path: Path) -> list[Path]:
    if path.is_dir():
        docs = sorted(p for p in path.glob("*.json") if p.name != META_FILE)
        if not docs:
            raise DataError(f"no dataset documents in {path}")
        return docs
    if path.is_file():
        return [path]
    raise FileNotFoundError(f"dataset path {path} does not exist")


def _read_meta(path: Path) -> dict:
    meta_path = (path if path.is_dir() else path.parent) / META_FILE
    if meta_path.is_file():
        return json.loads(meta_path.read_text())
    return {}


def load_dataset(
    path: str | Path,
    split: SplitSpec = ANY_SPLIT,
    num_joints: int = 133,
    strict: bool = True,
) -> Dataset:
    """Read internal-format documents under ``path`` (file or directory).

    With ``strict`` any invalid sample raises :class:`DataError`; otherwise it is
    recorded in ``Dataset.rejected`` and loading continues.
    """
    path = Path(path)
    meta = _read_meta(path)
    samples, rejected, scanned, skipped = [], [], 0, 0
    for doc_path in _document_paths(path):
        try:
            doc = json.loads(doc_path.read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"{doc_path}: not valid JSON ({e})") from e
        if not isinstance(doc, dict):
            raise DataError(f"{doc_path}: top level must be a map of sample id -> entry")
        for sid, entry in doc.items():
            subject = (entry.get("subject") if isinstance(entry, dict) else None) or _infer_subject(sid)
            if split.subjects is not None and subject not in split.subjects:
                skipped += 1
                continue
            scanned += 1
            try:
                samples.append(_sample_from_entry(sid, entry, num_joints, split.require_3d))
            except DataError as e:
                if strict:
                    raise
                rejected.append((sid, str(e)))
    if not samples:
        raise DataError(f"no usable samples for split '{split.name}' under {path}")
    subjects = tuple(sorted({s.subject_id for s in samples if s.subject_id}))
    log.info(
        "loaded %d samples for split '%s' (%d rejected, %d outside split subjects) from %s",
        len(samples), split.name, len(rejected), skipped, path,
    )
    for sid, reason in rejected:
        log.warning("rejected %s: %s", sid, reason)
    image_size = tuple(meta.get("image_size", DEFAULT_IMAGE_SIZE))
    return Dataset(samples, split.name, subjects, image_size, meta, rejected, scanned)


def load_h3wb(path: str | Path, split: SplitSpec = H3WB_TRAIN, strict: bool = True) -> Dataset:
    """Load converted H3WB documents, keeping only the subjects in ``split``."""
    return load_dataset(path, split, strict=strict)


def _entry(sample: PoseSample, extra: Optional[dict] = None) -> dict:
    entry = {"joints_2d": sample.joints_2d.tolist()}
    if sample.joints_3d_gt is not None:
        entry["joints_3d"] = sample.joints_3d_gt.tolist()
    if sample.subject_id:
        entry["subject"] = sample.subject_id
    if extra:
        entry.update(extra)
    return entry


def save_dataset(ds: Dataset, out_dir: str | Path, extras: Optional[dict] = None) -> Path:
    """Write ``<split_tag>.json`` and ``meta.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extras = extras or {}
    doc = {s.sample_id: _entry(s, extras.get(s.sample_id)) for s in ds.samples}
    doc_path = out_dir / f"{ds.split_tag}.json"
    doc_path.write_text(json.dumps(doc))
    meta = {"split": ds.split_tag, "image_size": list(ds.image_size), "num_samples": len(ds), **ds.metadata}
    (out_dir / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return doc_path


# ---------------------------------------------------------------------------
# upstream H3WB conversion
# ---------------------------------------------------------------------------


def _parse_keypoints(kp, dims: int) -> np.ndarray:
    axes = "xyz"[:dims]
    if isinstance(kp, dict):
        rows = [kp[k] for k in sorted(kp, key=lambda k: int(k))]
    else:
        rows = list(kp)
    out = []
    for r in rows:
        if isinstance(r, dict):
            out.append([float(r[a]) for a in axes])
        else:
            out.append([float(v) for v in list(r)[:dims]])
    return np.asarray(out, dtype=np.float64)


def _walk_h3wb(node, keys: tuple[str, ...]):
    if isinstance(node, dict):
        if "keypoints_2d" in node:
            yield keys, node
            return
        for k, v in node.items():
            yield from _walk_h3wb(v, keys + (str(k),))


def convert_h3wb(in_dir: str | Path, out_dir: str | Path, units_3d: str = "mm") -> list[Path]:
    """Convert upstream H3WB annotation files into the internal format.

    Every nested record carrying ``keypoints_2d`` (and optionally
    ``keypoints_3d``) becomes one sample. Keypoints may be lists of rows or maps
    from joint index to ``{"x", "y"[, "z"]}``. The sample id joins the nesting
    keys with ``/``; a key shaped like ``S<n>`` becomes the subject.
    """
    scale = {"mm": 1.0, "m": 1000.0}.get(units_3d)
    if scale is None:
        raise DataError(f"units_3d must be 'mm' or 'm', got {units_3d!r}")
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"input directory {in_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for src in sorted(in_dir.glob("*.json")):
        raw = json.loads(src.read_text())
        doc = {}
        for keys, rec in _walk_h3wb(raw, ()):
            sid = "/".join(keys)
            entry = {"joints_2d": _parse_keypoints(rec["keypoints_2d"], 2).tolist()}
            if "keypoints_3d" in rec:
                entry["joints_3d"] = (_parse_keypoints(rec["keypoints_3d"], 3) * scale).tolist()
            subject = next((k for k in keys if _SUBJECT_RE.match(k)), None)
            if subject is None and "subject" in rec:
                subject = str(rec["subject"])
                if subject.isdigit():
                    subject = f"S{subject}"
            if subject:
                entry["subject"] = subject
            doc[sid] = entry
        if not doc:
            log.warning("%s: no records with keypoints_2d, skipped", src)
            continue
        dst = out_dir / src.name
        dst.write_text(json.dumps(doc))
        log.info("converted %d records %s -> %s", len(doc), src, dst)
        written.append(dst)
    if not written:
        raise DataError(f"no convertible H3WB documents in {in_dir}")
    return written


# ---------------------------------------------------------------------------
# synthetic skeletons
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraSpec:
    focal: float = 1145.0
    width: float = 1000.0
    height: float = 1000.0
    min_depth: float = 3500.0
    max_depth: float = 5500.0
    lateral: float = 300.0
    near: float = 200.0

    @classmethod
    def parse(cls, text: str | None) -> "CameraSpec":
        """Parse ``"focal=1145,width=1000,..."``; empty or None gives defaults."""
        if not text:
            return cls()
        kwargs = {}
        for item in text.split(","):
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in cls.__dataclass_fields__ or not value:
                raise ValueError(f"bad camera field {item!r}; known: {sorted(cls.__dataclass_fields__)}")
            kwargs[key] = float(value)
        return cls(**kwargs)

    @property
    def center(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0


def project(points_cam: np.ndarray, focal: Sequence[float], center: Sequence[float]) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) to pixels (..., 2)."""
    points_cam = np.asarray(points_cam, dtype=np.float64)
    z = points_cam[..., 2:3]
    return points_cam[..., :2] / z * np.asarray(focal, dtype=np.float64) + np.asarray(center, dtype=np.float64)


def _template(topo: SkeletonTopology) -> np.ndarray:
    """Rest pose in millimetres, camera axes (x right, y down, z away), facing the camera.

    Subject-left joints sit at +x. Built for the shipped COCO-WholeBody layout.
    """
    t = np.zeros((topo.num_joints, 3))
    body = {
        0: (0, -640, -95), 1: (32, -675, -75), 3: (75, -660, 0), 5: (180, -500, 0),
        7: (200, -230, 10), 9: (210, 20, -10), 11: (100, 0, 0), 13: (100, 420, -10),
        15: (100, 840, 20), 17: (80, 900, -150), 18: (130, 900, -130), 19: (100, 900, 50),
    }
    mirror = {1: 2, 3: 4, 5: 6, 7: 8, 9: 10, 11: 12, 13: 14, 15: 16, 17: 20, 18: 21, 19: 22}
    for i, p in body.items():
        t[i] = p
        if i in mirror:
            t[mirror[i]] = (-p[0], p[1], p[2])

    face = np.zeros((68, 3))
    for i in range(17):
        th = math.pi * i / 16
        face[i] = (-70 * math.cos(th), -670 + 95 * math.sin(th), -60 - 30 * math.sin(th))
    for k in range(5):
        face[17 + k] = (-55 + 11 * k, -705 - 5 * math.sin(math.pi * k / 4), -95)
        face[26 - k] = (55 - 11 * k, -705 - 5 * math.sin(math.pi * k / 4), -95)
    for k in range(4):
        face[27 + k] = (0, -690 + 12 * k, -100 - 8 * k)
    for k in range(5):
        x = -20 + 10 * k
        face[31 + k] = (x, -640, -100 + abs(x) * 0.5)
    right_eye = [(-47, -680), (-38, -686), (-28, -686), (-19, -680), (-28, -675), (-38, -675)]
    left_eye = [(19, -680), (28, -686), (38, -686), (47, -680), (38, -675), (28, -675)]
    for k, (x, y) in enumerate(right_eye + left_eye):
        face[36 + k] = (x, y, -85)
    outer = [(-28, -610), (-18, -616), (-8, -619), (0, -618), (8, -619), (18, -616), (28, -610),
             (18, -602), (8, -599), (0, -598), (-8, -599), (-18, -602)]
    inner = [(-20, -610), (-8, -613), (0, -613), (8, -613), (20, -610), (8, -606), (0, -606), (-8, -606)]
    for k, (x, y) in enumerate(outer + inner):
        face[48 + k] = (x, y, -95)
    flo, fhi = topo.part_ranges["face"]
    t[flo:fhi] = face

    hand = np.zeros((21, 3))
    hand[0] = (0, 15, 0)
    thumb = [(5, 35, -25), (5, 60, -45), (5, 80, -55), (5, 100, -60)]
    for k, p in enumerate(thumb):
        hand[1 + k] = p
    bases = {5: (85, -25), 9: (88, -8), 13: (85, 9), 17: (78, 25)}
    segs = {5: (40, 25, 20), 9: (45, 28, 22), 13: (42, 26, 20), 17: (32, 20, 18)}
    for base, (y0, z0) in bases.items():
        y = 15 + y0
        hand[base] = (0, y, z0)
        for j, s in enumerate(segs[base]):
            y += s
            hand[base + 1 + j] = (0, y, z0)
    (llo, lhi), (rlo, rhi) = topo.hand_blocks
    lw, rw = topo.parent[llo], topo.parent[rlo]
    t[llo:lhi] = t[lw] + hand
    t[rlo:rhi] = t[rw] + hand * np.array([-1.0, 1.0, 1.0])

    # exact left/right symmetry so flip(template) == template
    flipped = t * np.array([-1.0, 1.0, 1.0])
    t = 0.5 * (t + flipped[flip_permutation(topo)])
    return t


def _max_bend_degrees(topo: SkeletonTopology) -> np.ndarray:
    """Largest rotation of each joint's bone about its parent (coarse anatomical priors)."""
    a = np.zeros(topo.num_joints)
    a[[5, 6, 11, 12]] = 5.0       # torso
    a[[7, 8]] = 70.0              # upper arm about the shoulder
    a[[9, 10]] = 70.0             # forearm about the elbow
    a[[13, 14]] = 40.0            # thigh about the hip
    a[[15, 16]] = 45.0            # shin about the knee
    a[17:23] = 10.0               # feet
    a[topo.part_slice("face")] = 2.0
    a[topo.part_slice("hands")] = 20.0
    a[[topo.left_wrist_kp, topo.right_wrist_kp]] = 30.0
    return a


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def _euler_yxz(yaw: float, pitch: float, roll: float) -> np.ndarray:
    return (
        _rotation(np.array([0.0, 1.0, 0.0]), yaw)
        @ _rotation(np.array([1.0, 0.0, 0.0]), pitch)
        @ _rotation(np.array([0.0, 0.0, 1.0]), roll)
    )


def _topological_order(topo: SkeletonTopology) -> list[int]:
    return sorted(range(topo.num_joints), key=topo.depth)


def bone_length_table(topo: SkeletonTopology) -> np.ndarray:
    """Per-joint distance to parent (mm) used by the synthetic generator."""
    t = _template(topo)
    return np.linalg.norm(t - t[topo.parent_array], axis=-1)


def _sample_pose(rng: np.random.Generator, topo: SkeletonTopology, template, order, max_bend) -> np.ndarray:
    parent = topo.parent
    offsets = template - template[topo.parent_array]
    root = order[0]
    glob = {root: _euler_yxz(rng.uniform(-math.pi / 2, math.pi / 2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2))}
    pos = np.zeros_like(template)
    for j in order[1:]:
        p = parent[j]
        local = _rotation(rng.normal(size=3), math.radians(rng.uniform(0.0, max_bend[j])))
        glob[j] = glob[p] @ local
        pos[j] = pos[p] + glob[j] @ offsets[j]
    return pelvis_center(pos, topo)


def synthesize(
    n: int,
    seed: int,
    camera: CameraSpec | None = None,
    topo: SkeletonTopology | None = None,
    max_retries: int = 100,
) -> tuple[Dataset, dict]:
    """Generate ``n`` kinematically consistent poses and their projections.

    Returns the dataset and a per-sample ``{"camera": ...}`` extras map holding
    the focal length, principal point and the translation that takes the
    pelvis-centred 3D pose into the camera frame.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if topo is None:
        from wholebody_lift.skeleton import default_topology

        topo = default_topology()
    camera = camera or CameraSpec()
    rng = np.random.default_rng(seed)
    template = _template(topo)
    order = _topological_order(topo)
    max_bend = _max_bend_degrees(topo)
    focal = (camera.focal, camera.focal)
    center = camera.center
    samples, extras = [], {}
    width = len(str(n - 1))
    for i in range(n):
        for _ in range(max_retries):
            pose = _sample_pose(rng, topo, template, order, max_bend)
            t = np.array([
                rng.uniform(-camera.lateral, camera.lateral),
                rng.uniform(-camera.lateral, camera.lateral),
                rng.uniform(camera.min_depth, camera.max_depth),
            ])
            cam_pts = pose + t
            if np.all(cam_pts[:, 2] > camera.near):
                break
        else:
            raise DataError(f"sample {i}: no valid camera placement after {max_retries} attempts")
        sid = f"synth_{seed}_{i:0{width}d}"
        samples.append(PoseSample(project(cam_pts, focal, center), pose, sample_id=sid, subject_id="synthetic"))
        extras[sid] = {"camera": {"focal": list(focal), "center": list(center), "translation": t.tolist()}}
    meta = {
        "generator": "synthetic-skeleton/v1",
        "seed": seed,
        "topology_version": topo.version,
        "camera_spec": camera.__dict__,
    }
    ds = Dataset(samples, "synthetic", ("synthetic",), (camera.width, camera.height), meta, [], n)
    return ds, extras


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


class Batch(NamedTuple):
    inputs: np.ndarray     # (B, J, 3) x, y, d
    targets: np.ndarray    # (B, J, 3) pelvis-centred mm, or empty when absent
    indices: np.ndarray    # positions in the dataset


def batch_order(num_samples: int, shuffle_seed: Optional[int]) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(num_samples)
    return np.random.default_rng(shuffle_seed).permutation(num_samples)


def batches(
    ds: Dataset,
    batch_size: int,
    shuffle_seed: Optional[int],
    topo: SkeletonTopology,
    inputs: Optional[np.ndarray] = None,
    targets: Optional[np.ndarray] = None,
) -> Iterator[Batch]:
    """Yield batches in a seed-determined order; the last batch may be short.

    ``inputs``/``targets`` may be passed precomputed to avoid reassembly every epoch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(ds) == 0:
        raise DataError("cannot batch an empty dataset")
    if inputs is None:
        inputs = ds.inputs(topo)
    if targets is None:
        targets = ds.targets(topo) if ds.has_3d else np.empty((len(ds), 0, 3))
    order = batch_order(len(ds), shuffle_seed)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(inputs[idx], targets[idx] if targets.size else targets[:0], idx)
