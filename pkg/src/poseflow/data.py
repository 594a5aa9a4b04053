"""Pose datasets, synthetic pose generation, batching and checkpoints.

Dataset file (little-endian)::

    magic          8 bytes   b"POSE6D\\x00\\x01"
    joint_count    uint32
    float_width    uint32    always 32
    record_count   uint64
    source         uint8     0 = synthetic, 1 = imported
    joint names    joint_count x (uint16 byte length, UTF-8 bytes)
    payload        record_count x 6*joint_count float32, flat pose layout

Checkpoint file::

    magic          8 bytes   b"POSEFLOW"
    header_length  uint64
    header         UTF-8 JSON: hyperparameters, metadata, crc32 of payload
    payload        all parameters, concatenated, in the model dtype
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import rotation
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    FormatError,
    HyperparameterMismatchError,
    NonOrthonormalError,
    RecordLengthError,
    TruncatedPayloadError,
)
from .flow import FlowModel

DATASET_MAGIC = b"POSE6D\x00\x01"
CHECKPOINT_MAGIC = b"POSEFLOW"
ORTHO_TOL = 1e-4
SOURCES = ("synthetic", "imported")


@dataclass
class PoseDataset:
    """Orthonormal poses, shape ``(n, 6 * n_joints)`` float32, flat layout."""

    poses: np.ndarray
    joint_names: list[str]
    source: str = "synthetic"

    def __post_init__(self):
        self.poses = np.ascontiguousarray(self.poses, dtype=np.float32)
        if self.poses.ndim != 2 or self.poses.shape[1] != 6 * len(self.joint_names):
            raise RecordLengthError(
                f"record length {self.poses.shape[-1]} does not match "
                f"{len(self.joint_names)} joints"
            )
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    def __len__(self):
        return self.poses.shape[0]

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def dim(self) -> int:
        return self.poses.shape[1]

    def subset(self, idx) -> PoseDataset:
        return PoseDataset(self.poses[idx], list(self.joint_names), self.source)


def default_joint_names(n: int = rotation.N_JOINTS) -> list[str]:
    return [f"joint_{i:02d}" for i in range(n)]


def check_orthonormal(poses, n_joints, tol=ORTHO_TOL):
    j = rotation.transpose_to_joints(np.asarray(poses, dtype=np.float64), n_joints)
    b1, b2 = j[..., :3], j[..., 3:]
    err = np.maximum.reduce([
        np.abs(np.linalg.norm(b1, axis=-1) - 1.0),
        np.abs(np.linalg.norm(b2, axis=-1) - 1.0),
        np.abs(np.sum(b1 * b2, axis=-1)),
    ])
    bad = np.nonzero(np.any(err > tol, axis=-1))[0]
    if bad.size:
        raise NonOrthonormalError(
            f"record {int(bad[0])} is not orthonormal (deviation {err[bad[0]].max():.3g})"
        )


# ----------------------------------------------------------------------------
# Synthetic stand-in data
# ----------------------------------------------------------------------------

@dataclass
class MixtureComponent:
    weight: float
    mean: np.ndarray  # rotation vector, radians
    std: np.ndarray  # per-axis

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(3)


@dataclass
class SyntheticGeneratorSpec:
    """Independent per-joint Gaussian mixtures in rotation-vector space.

    Keep ``|mean| + 4 std`` well below pi: the density is defined on
    rotation vectors, and draws that wrap past pi come back with a
    different rotation vector.
    """

    joints: list[list[MixtureComponent]]
    seed: int = 0
    joint_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.joint_names:
            self.joint_names = default_joint_names(len(self.joints))
        if len(self.joint_names) != len(self.joints):
            raise ConfigError("joint_names and joints differ in length")
        for j, comps in enumerate(self.joints):
            if not comps:
                raise ConfigError(f"joint {j} has no mixture components")
            w = np.array([c.weight for c in comps])
            if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError(f"joint {j}: weights must be positive and sum to 1")
            if any(np.any(c.std <= 0) for c in comps):
                raise ConfigError(f"joint {j}: stds must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticGeneratorSpec:
        _reject_unknown(d, {"seed", "joint_names", "joints"}, "generator spec")
        if "joints" not in d:
            raise ConfigError("generator spec needs 'joints'")
        joints = []
        for comps in d["joints"]:
            row = []
            for c in comps:
                _reject_unknown(c, {"weight", "mean", "std"}, "mixture component")
                try:
                    row.append(MixtureComponent(float(c["weight"]), c["mean"], c["std"]))
                except (KeyError, ValueError) as e:
                    raise ConfigError(f"bad mixture component {c}: {e}") from None
            joints.append(row)
        return cls(joints, int(d.get("seed", 0)), list(d.get("joint_names", [])))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "joint_names": list(self.joint_names),
            "joints": [
                [{"weight": c.weight, "mean": c.mean.tolist(), "std": c.std.tolist()} for c in comps]
                for comps in self.joints
            ],
        }

    @classmethod
    def load(cls, path) -> SyntheticGeneratorSpec:
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def _reject_unknown(d, allowed, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {what}: {sorted(unknown)}")


def default_synthetic_spec(seed: int = 0, n_joints: int = rotation.N_JOINTS) -> SyntheticGeneratorSpec:
    """A desk-scale stand-in for a motion-capture pose corpus.

    Each joint gets one to three components with means up to about one
    radian and axis stds between 0.08 and 0.3.
    """
    rng = np.random.default_rng([seed, 7919])
    joints = []
    for _ in range(n_joints):
        n_comp = int(rng.integers(1, 4))
        w = rng.dirichlet(np.full(n_comp, 4.0))
        comps = []
        for wi in w:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            mean = direction * rng.uniform(0.0, 1.0)
            std = rng.uniform(0.08, 0.3, size=3)
            comps.append(MixtureComponent(float(wi), mean, std))
        # make the weights sum to exactly one in float arithmetic
        total = sum(c.weight for c in comps)
        for c in comps:
            c.weight /= total
        comps[-1].weight = 1.0 - sum(c.weight for c in comps[:-1])
        joints.append(comps)
    return SyntheticGeneratorSpec(joints, seed)


def sample_synthetic_rotvecs(spec: SyntheticGeneratorSpec, n: int):
    """Per-joint rotation vectors ``(n, n_joints, 3)`` and component labels."""
    rng = np.random.default_rng(spec.seed)
    rv = np.empty((n, len(spec.joints), 3))
    labels = np.empty((n, len(spec.joints)), dtype=np.int64)
    for j, comps in enumerate(spec.joints):
        w = np.array([c.weight for c in comps])
        lab = rng.choice(len(comps), size=n, p=w)
        eps = rng.standard_normal((n, 3))
        means = np.stack([c.mean for c in comps])
        stds = np.stack([c.std for c in comps])
        rv[:, j] = means[lab] + stds[lab] * eps
        labels[:, j] = lab
    return rv, labels


def generate_synthetic(spec: SyntheticGeneratorSpec, n: int) -> PoseDataset:
    rv, _ = sample_synthetic_rotvecs(spec, n)
    six = rotation.sixd_from_rotvec(rv)
    poses = rotation.transpose_to_flat(six, None)
    return PoseDataset(poses.astype(np.float32), list(spec.joint_names), "synthetic")


def rotvec_mixture_logdensity(spec: SyntheticGeneratorSpec, rotvecs) -> np.ndarray:
    """Sum over joints of the mixture log-density at ``(..., n_joints, 3)`` rotation vectors."""
    rv = np.asarray(rotvecs, dtype=np.float64)
    total = np.zeros(rv.shape[:-2])
    for j, comps in enumerate(spec.joints):
        terms = []
        for c in comps:
            u = (rv[..., j, :] - c.mean) / c.std
            terms.append(
                np.log(c.weight)
                - 0.5 * np.sum(u * u, axis=-1)
                - np.sum(np.log(c.std))
                - 1.5 * np.log(2.0 * np.pi)
            )
        total += logsumexp(np.stack(terms), axis=0)
    return total


def synthetic_logdensity(spec: SyntheticGeneratorSpec, pose) -> np.ndarray:
    """Ground-truth log-density of poses, measured in rotation-vector space."""
    joints = rotation.transpose_to_joints(np.asarray(pose, dtype=np.float64), len(spec.joints))
    return rotvec_mixture_logdensity(spec, rotation.rotvec_from_6d(joints))


# ----------------------------------------------------------------------------
# Dataset files
# ----------------------------------------------------------------------------

def save_dataset(ds: PoseDataset, path):
    header = bytearray(DATASET_MAGIC)
    header += struct.pack("<IIQB", ds.n_joints, 32, len(ds), SOURCES.index(ds.source))
    for name in ds.joint_names:
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw)) + raw
    with open(path, "wb") as f:
        f.write(bytes(header))
        f.write(ds.poses.astype("<f4").tobytes())


def load_dataset(path, validate: bool = True) -> PoseDataset:
    buf = Path(path).read_bytes()
    if buf[:8] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: not a pose dataset (bad magic)")
    fixed = struct.calcsize("<IIQB")
    if len(buf) < 8 + fixed:
        raise TruncatedPayloadError("truncated header")
    n_joints, width, n_rec, source = struct.unpack_from("<IIQB", buf, 8)
    if width != 32:
        raise FormatError(f"unsupported float width {width}")
    if source >= len(SOURCES):
        raise FormatError(f"unknown source tag {source}")
    off = 8 + fixed
    names = []
    for _ in range(n_joints):
        if off + 2 > len(buf):
            raise TruncatedPayloadError("truncated joint name table")
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        if off + ln > len(buf):
            raise TruncatedPayloadError("truncated joint name table")
        names.append(buf[off:off + ln].decode("utf-8"))
        off += ln
    expected = n_rec * 6 * n_joints * 4
    have = len(buf) - off
    if have < expected:
        raise TruncatedPayloadError()
    if have > expected:
        raise FormatError(f"{have - expected} trailing bytes after payload")
    poses = np.frombuffer(buf, dtype="<f4", count=n_rec * 6 * n_joints, offset=off)
    poses = poses.reshape(n_rec, 6 * n_joints).astype(np.float32)
    if validate:
        check_orthonormal(poses, n_joints)
    return PoseDataset(poses, names, SOURCES[source])


def load_csv(path, joint_names=None, validate: bool = True) -> PoseDataset:
    """One pose per line, comma-separated, flat layout.  Lines starting with '#' are skipped."""
    names = list(joint_names) if joint_names else default_joint_names()
    width = 6 * len(names)
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = line.split(",")
            if len(cells) != width:
                raise RecordLengthError(
                    f"{path}:{lineno}: record length {len(cells)}, expected {width}"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    poses = np.array(rows, dtype=np.float64).reshape(-1, width)
    if validate:
        check_orthonormal(poses, len(names))
    return PoseDataset(poses.astype(np.float32), names, "imported")


def save_csv(ds: PoseDataset, path):
    np.savetxt(path, ds.poses, delimiter=",", fmt="%.9g")


# ----------------------------------------------------------------------------
# Splitting and batching
# ----------------------------------------------------------------------------

def split(ds: PoseDataset, validation_fraction: float, seed: int):
    """Shuffle with ``seed``, then cut off ``round(n * fraction)`` validation poses."""
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError("validation_fraction must lie in (0, 1)")
    n = len(ds)
    n_val = int(round(n * validation_fraction))
    if n_val == 0 or n_val == n:
        raise ValueError(f"split of {n} poses at {validation_fraction} leaves an empty side")
    perm = np.random.default_rng([seed, 1]).permutation(n)
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


def batches(ds, batch_size: int, augment: rotation.AugmentParams | None = None,
            rng: np.random.Generator | None = None, shuffle: bool = True):
    """Yield float64 batches of poses.

    With ``rng`` and ``shuffle`` the order is a fresh permutation.  With
    ``augment`` every joint of every emitted pose is replaced by an inverse
    Gram-Schmidt draw from ``rng``, so repeated passes see fresh noise.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if augment is not None and rng is None:
        raise ValueError("augmentation needs an rng")
    poses = ds.poses if isinstance(ds, PoseDataset) else np.asarray(ds)
    n_joints = ds.n_joints if isinstance(ds, PoseDataset) else None
    n = poses.shape[0]
    order = rng.permutation(n) if (shuffle and rng is not None) else np.arange(n)
    for start in range(0, n, batch_size):
        b = poses[order[start:start + batch_size]].astype(np.float64)
        if augment is not None:
            b = rotation.augment_pose(b, augment, rng, n_joints)
        yield b


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: FlowModel
    metadata: dict = field(default_factory=dict)

    @property
    def augment(self) -> rotation.AugmentParams | None:
        a = self.metadata.get("augment")
        return None if a is None else rotation.AugmentParams(a["k"], a["sigma"])


def _model_payload(model: FlowModel) -> bytes:
    dt = model.dtype.newbyteorder("<")
    return b"".join(np.ascontiguousarray(p, dtype=dt).tobytes() for p in model.params())


def save_checkpoint(ckpt: Checkpoint, path):
    payload = _model_payload(ckpt.model)
    header = {
        "format": 1,
        "hyperparameters": ckpt.model.hyperparameters(),
        "metadata": ckpt.metadata,
        "param_shapes": [list(p.shape) for p in ckpt.model.params()],
        "crc32": zlib.crc32(payload),
        "payload_bytes": len(payload),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        f.write(payload)


def load_checkpoint(path, expected: dict | None = None) -> Checkpoint:
    """Read a checkpoint; ``expected`` hyperparameters must match when given."""
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a flow checkpoint (bad magic)")
    if len(buf) < 16:
        raise TruncatedPayloadError("truncated header")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable checkpoint header ({e})") from None
    payload = buf[16 + hlen:]
    if len(payload) < header["payload_bytes"]:
        raise TruncatedPayloadError()
    if len(payload) > header["payload_bytes"]:
        raise FormatError("trailing bytes after checkpoint payload")
    if zlib.crc32(payload) != header["crc32"]:
        raise ChecksumError(f"{path}: parameter block checksum mismatch")

    hp = header["hyperparameters"]
    if expected is not None:
        diff = {k: (hp.get(k), v) for k, v in expected.items() if hp.get(k) != v}
        if diff:
            raise HyperparameterMismatchError(f"checkpoint hyperparameters differ: {diff}")
    model = FlowModel.create(hp["dim"], hp["n_layers"], tuple(hp["hidden"]), dtype=hp["dtype"])
    for layer in model.layers:
        layer.net.negative_slope = hp["negative_slope"]
        layer.net.s_max = hp["s_max"]
    dt = model.dtype.newbyteorder("<")
    off = 0
    for p, shape in zip(model.params(), header["param_shapes"]):
        if list(p.shape) != shape:
            raise HyperparameterMismatchError(f"parameter shape {shape} != {list(p.shape)}")
        count = int(np.prod(shape))
        p[...] = np.frombuffer(payload, dtype=dt, count=count, offset=off).reshape(shape)
        off += count * dt.itemsize
    return Checkpoint(model, header["metadata"])
