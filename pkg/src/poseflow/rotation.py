"""6D rotation math.

A 6D rotation is stored as a float array whose last axis has length 6:
``[..., 0:3]`` is the first basis vector ``b1`` and ``[..., 3:6]`` the
second, ``b2``.  These are the first two columns of the rotation matrix.
All functions broadcast over leading axes.

A pose vector packs the per-joint 6D rotations of ``n`` joints into a flat
array of length ``6 * n``: the first half holds every joint's first vector
(joint ``j`` at ``[3j, 3j + 3)``), the second half every joint's second
vector (joint ``j`` at ``[3n + 3j, 3n + 3j + 3)``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotationError, ShapeError

N_JOINTS = 21
POSE_DIM = 6 * N_JOINTS

DEGENERATE_TOL = 1e-9


@dataclass(frozen=True)
class AugmentParams:
    """Noise level of the inverse Gram-Schmidt augmentation.

    ``k`` is the Gamma shape of the two scale factors (the scale is fixed
    to ``1 / k`` so their mean is 1) and ``sigma`` the standard deviation
    of the shear coefficient.
    """

    k: float = 100.0
    sigma: float = 0.1

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"Gamma shape k must be positive, got {self.k}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")

    @property
    def theta(self) -> float:
        return 1.0 / self.k


def _check6(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (6,):
        raise ShapeError(f"expected trailing axis of length 6, got shape {x.shape}")
    return x


def gram_schmidt(raw) -> np.ndarray:
    """Orthonormalize 6D vectors.

    ``b1 = a1 / |a1|`` and ``b2`` is ``a2`` with its ``b1`` component removed,
    normalized.  Raises :class:`DegenerateRotationError` when either norm
    falls below ``1e-9``.
    """
    raw = _check6(raw)
    a1, a2 = raw[..., :3], raw[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < DEGENERATE_TOL):
        raise DegenerateRotationError()
    b1 = a1 / n1
    r2 = a2 - np.sum(a2 * b1, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(r2, axis=-1, keepdims=True)
    if np.any(n2 < DEGENERATE_TOL):
        raise DegenerateRotationError()
    return np.concatenate([b1, r2 / n2], axis=-1)


def sample_gamma(rng: np.random.Generator, k: float, size, theta: float = 1.0) -> np.ndarray:
    """Gamma(k, theta) variates by the Marsaglia-Tsang squeeze method.

    Shapes below one use the ``Gamma(k + 1) * U**(1/k)`` boost.  Candidates
    are drawn in fixed-size rounds, so the stream consumed from ``rng`` is a
    deterministic function of the seed.
    """
    size = (size,) if np.isscalar(size) else tuple(size)
    n = int(np.prod(size, dtype=np.int64))
    boost = k < 1.0
    kk = k + 1.0 if boost else k
    d = kk - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)

    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        m = todo.size
        x = rng.standard_normal(m)
        u = rng.random(m)
        v = (1.0 + c * x) ** 3
        ok = v > 0
        vs = np.where(ok, v, 1.0)
        accept = ok & (
            (u < 1.0 - 0.0331 * x**4)
            | (np.log(u) < 0.5 * x * x + d * (1.0 - vs + np.log(vs)))
        )
        out[todo[accept]] = d * vs[accept]
        todo = todo[~accept]
    if boost:
        out *= rng.random(n) ** (1.0 / k)
    return (out * theta).reshape(size)


def inverse_gram_schmidt(r, params: AugmentParams, rng: np.random.Generator | None) -> np.ndarray:
    """Draw non-orthonormal 6D vectors that Gram-Schmidt maps back to ``r``.

    ``a1 = rho1 * b1`` and ``a2 = rho2 * b2 + alpha * a1`` with
    ``rho ~ Gamma(k, 1/k)`` and ``alpha ~ N(0, sigma^2)``, independently for
    every 6D entry.  ``rng=None`` is the zero-noise source
    (``rho = 1``, ``alpha = 0``) and returns a copy of ``r``.
    """
    r = _check6(r)
    if rng is None:
        return r.copy()
    lead = r.shape[:-1]
    rho = sample_gamma(rng, params.k, lead + (2,), params.theta)
    # Gamma draws can underflow for tiny k; resample those entries.
    bad = rho <= DEGENERATE_TOL
    while np.any(bad):
        rho[bad] = sample_gamma(rng, params.k, int(bad.sum()), params.theta)
        bad = rho <= DEGENERATE_TOL
    alpha = params.sigma * rng.standard_normal(lead + (1,))
    a1 = rho[..., :1] * r[..., :3]
    a2 = rho[..., 1:] * r[..., 3:] + alpha * a1
    return np.concatenate([a1, a2], axis=-1)


def rotmat_from_6d(r) -> np.ndarray:
    """3x3 rotation matrices with columns ``b1``, ``b2``, ``b1 x b2``."""
    r = _check6(r)
    b1, b2 = r[..., :3], r[..., 3:]
    return np.stack([b1, b2, np.cross(b1, b2)], axis=-1)


def sixd_from_rotmat(mat) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    return np.concatenate([mat[..., :, 0], mat[..., :, 1]], axis=-1)


def _skew(v: np.ndarray) -> np.ndarray:
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [np.stack([z, -w, y], -1), np.stack([w, z, -x], -1), np.stack([-y, x, z], -1)], -2
    )


def rotmat_from_rotvec(rotvec) -> np.ndarray:
    """Rodrigues' formula, with a Taylor expansion near zero angle."""
    v = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    sin_term = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    cos_term = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(th)) / th**2)
    K = _skew(v)
    return np.eye(3) + sin_term * K + cos_term * (K @ K)


def rotvec_from_rotmat(mat) -> np.ndarray:
    """Axis-angle vectors with angle in ``[0, pi]``.

    Goes through a unit quaternion (Shepperd's method) with non-negative
    scalar part.  At exactly ``pi`` both axis signs are valid; the one whose
    first nonzero component is positive is returned.
    """
    R = np.asarray(mat, dtype=np.float64)
    lead = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    tr = np.trace(R, axis1=1, axis2=2)
    diag = np.diagonal(R, axis1=1, axis2=2)
    choice = np.argmax(np.concatenate([diag, tr[:, None]], axis=1), axis=1)

    q = np.empty((R.shape[0], 4))  # x, y, z, w
    m = choice == 3
    q[m, 3] = 1.0 + tr[m]
    q[m, 0] = R[m, 2, 1] - R[m, 1, 2]
    q[m, 1] = R[m, 0, 2] - R[m, 2, 0]
    q[m, 2] = R[m, 1, 0] - R[m, 0, 1]
    for i in range(3):
        m = choice == i
        j, k = (i + 1) % 3, (i + 2) % 3
        q[m, i] = 1.0 - tr[m] + 2.0 * R[m, i, i]
        q[m, j] = R[m, j, i] + R[m, i, j]
        q[m, k] = R[m, k, i] + R[m, i, k]
        q[m, 3] = R[m, k, j] - R[m, j, k]
    q /= np.linalg.norm(q, axis=1, keepdims=True)

    q[q[:, 3] < 0] *= -1.0
    # Angle exactly pi: pick the axis whose first nonzero entry is positive.
    half_turn = q[:, 3] == 0.0
    if np.any(half_turn):
        xyz = q[half_turn, :3]
        first = np.argmax(xyz != 0.0, axis=1)
        sign = np.sign(xyz[np.arange(len(xyz)), first])
        q[half_turn, :3] = xyz * sign[:, None]

    vn = np.linalg.norm(q[:, :3], axis=1)
    angle = 2.0 * np.arctan2(vn, q[:, 3])
    small = vn < 1e-12
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, vn))
    return (q[:, :3] * scale[:, None]).reshape(lead + (3,))


def rotvec_from_6d(r) -> np.ndarray:
    return rotvec_from_rotmat(rotmat_from_6d(r))


def sixd_from_rotvec(rotvec) -> np.ndarray:
    return sixd_from_rotmat(rotmat_from_rotvec(rotvec))


def transpose_to_flat(joints, n_joints: int | None = N_JOINTS) -> np.ndarray:
    """Pack ``(..., n_joints, 6)`` per-joint entries into ``(..., 6 * n_joints)``.

    Pass ``n_joints=None`` to accept any joint count.
    """
    joints = np.asarray(joints)
    if joints.ndim < 2 or joints.shape[-1] != 6:
        raise ShapeError(f"expected (..., n_joints, 6) array, got shape {joints.shape}")
    if n_joints is not None and joints.shape[-2] != n_joints:
        raise ShapeError(f"expected {n_joints} joints, got {joints.shape[-2]}")
    lead = joints.shape[:-2]
    first = joints[..., :, :3].reshape(lead + (-1,))
    second = joints[..., :, 3:].reshape(lead + (-1,))
    return np.concatenate([first, second], axis=-1)


def transpose_to_joints(flat, n_joints: int | None = N_JOINTS) -> np.ndarray:
    """Inverse of :func:`transpose_to_flat`: ``(..., 6n)`` to ``(..., n, 6)``."""
    flat = np.asarray(flat)
    length = flat.shape[-1] if flat.ndim else 0
    if n_joints is None:
        if length == 0 or length % 6:
            raise ShapeError(f"pose length {length} is not a positive multiple of 6")
        n_joints = length // 6
    if length != 6 * n_joints:
        raise ShapeError(f"expected pose length {6 * n_joints}, got {length}")
    lead = flat.shape[:-1]
    half = 3 * n_joints
    first = flat[..., :half].reshape(lead + (n_joints, 3))
    second = flat[..., half:].reshape(lead + (n_joints, 3))
    return np.concatenate([first, second], axis=-1)


def orthonormalize_pose(flat, n_joints: int | None = N_JOINTS) -> np.ndarray:
    """Gram-Schmidt every joint of pose vectors, keeping the flat layout."""
    joints = transpose_to_joints(flat, n_joints)
    return transpose_to_flat(gram_schmidt(joints), None)


def augment_pose(flat, params: AugmentParams, rng, n_joints: int | None = N_JOINTS) -> np.ndarray:
    """Inverse Gram-Schmidt applied independently to every joint of pose vectors."""
    joints = transpose_to_joints(flat, n_joints)
    return transpose_to_flat(inverse_gram_schmidt(joints, params, rng), None)
