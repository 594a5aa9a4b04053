"""
6D rotations and inverse Gram-Schmidt augmentation
==================================================

A rotation is stored as the first two columns of its matrix.  Gram-Schmidt
maps any non-degenerate 6-vector back onto a rotation, and the randomized
inverse spreads each rotation into a cloud of 6-vectors with that image.
"""

import numpy as np

from poseflow import data, rotation

rng = np.random.default_rng(0)

# A rotation of 90 degrees about z, as a rotation vector and as 6D.
r6 = rotation.sixd_from_rotvec(np.array([0.0, 0.0, np.pi / 2]))
print("6D of a quarter turn about z:", np.round(r6, 6))
print("its matrix:\n", np.round(rotation.rotmat_from_6d(r6), 6))

# Gram-Schmidt cleans up an arbitrary 6-vector.
messy = np.array([2.0, 0.1, 0.0, 0.3, 1.5, 0.2])
clean = rotation.gram_schmidt(messy)
R = rotation.rotmat_from_6d(clean)
print("\northonormalized:", np.round(clean, 4))
print("R^T R - I max:", np.abs(R.T @ R - np.eye(3)).max(), " det:", np.linalg.det(R))

# Parallel columns have no defined image.
try:
    rotation.gram_schmidt(np.array([1.0, 0, 0, 2.0, 0, 0]))
except ValueError as e:
    print("parallel columns ->", e)

# Augmentation: rescale b1 by a Gamma radius, mix some of it into b2.
params = rotation.AugmentParams(k=100, sigma=0.1)
cloud = rotation.inverse_gram_schmidt(np.tile(clean, (5000, 1)), params, rng)
print("\naugmented cloud spread per coordinate:", np.round(cloud.std(axis=0), 3))
print("every member maps back:", np.abs(rotation.gram_schmidt(cloud) - clean).max())

rho = np.linalg.norm(cloud[:, :3], axis=1)
print(f"radius of b1: mean {rho.mean():.4f}, std {rho.std():.4f}  (Gamma with k=100, mean 1)")

# Without an rng the inverse is the identity, which is handy for debugging.
assert np.array_equal(rotation.inverse_gram_schmidt(clean, params, None), clean)

# Whole poses: 21 joints in the transposed 126-vector layout.
pose = data.generate_synthetic(data.default_synthetic_spec(0), 1).poses[0].astype(np.float64)
joints = rotation.transpose_to_joints(pose, 21)
print("\njoint 0 as 6D:", np.round(joints[0], 4))
print("same numbers in the flat vector:", np.round(np.r_[pose[0:3], pose[63:66]], 4))
noisy = rotation.augment_pose(pose, params, rng)
print("augmented pose re-orthonormalizes to the original:",
      np.abs(rotation.orthonormalize_pose(noisy) - pose).max() < 1e-5)
