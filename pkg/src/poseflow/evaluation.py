"""Comparing a trained prior with its data.

All densities are natural-log values from :func:`poseflow.flow.log_prob`.

CSV schemas written here:

* density histogram: ``bin_left,bin_right,model_raw,model_ortho,data``
  (normalized histogram heights, Freedman-Diaconis bins on the pooled sample)
* marginals: ``source,x,y,z`` with ``source`` in ``model``/``data`` and the
  rotation vector in radians
* ablation scatter: ``model,raw_logprob,ortho_logprob,reference`` where
  ``reference`` is the ``y = x`` diagonal evaluated at ``raw_logprob``
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from . import flow, rotation
from .data import PoseDataset
from .training import TrainConfig, TrainReport, train

DIAGONAL_SLACK = 1e-6


@dataclass
class KsResult:
    statistic: float
    n_a: int
    n_b: int


def ks_two_sample(a, b) -> KsResult:
    """Largest gap between the empirical CDFs of ``a`` and ``b``.

    Both CDFs are evaluated (right-continuous) at every pooled value, so
    ties across the samples are handled exactly.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("KS statistic needs two non-empty samples")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return KsResult(float(np.max(np.abs(cdf_a - cdf_b))), int(a.size), int(b.size))


@dataclass
class DensitySample:
    """Per-sample densities of raw model samples and of their orthonormalized versions."""

    raw_logprob: np.ndarray
    ortho_logprob: np.ndarray
    source: str = "model"

    def fraction_above_diagonal(self, slack: float = DIAGONAL_SLACK) -> float:
        return float(np.mean(self.ortho_logprob >= self.raw_logprob - slack))


def _poses(ds):
    return ds.poses if isinstance(ds, PoseDataset) else np.asarray(ds)


def model_densities(model, n: int, rng, n_joints: int | None) -> tuple[np.ndarray, DensitySample]:
    """Sample ``n`` poses and score them raw and orthonormalized.

    ``n_joints=None`` marks data that is not made of 6D rotations; the
    orthonormalized column then repeats the raw one.
    """
    x, raw = flow.sample(model, n, rng)
    if n_joints is None:
        return x, DensitySample(raw, raw.copy())
    ortho_x = rotation.orthonormalize_pose(x.astype(np.float64), n_joints)
    ortho = flow.log_prob(model, ortho_x).log_prob
    return x, DensitySample(raw, ortho)


@dataclass
class DensityComparison:
    ks_raw: KsResult
    ks_ortho: KsResult
    model: DensitySample
    data_logprob: np.ndarray

    def summary(self) -> dict:
        return {
            "n_model": self.ks_raw.n_a,
            "n_data": self.ks_raw.n_b,
            "ks_raw": self.ks_raw.statistic,
            "ks_orthonormalized": self.ks_ortho.statistic,
            "units": "nats",
        }


def density_comparison(model, ds, n: int = 10_000, seed: int = 0) -> DensityComparison:
    """Distribution-of-densities comparison between prior samples and data.

    Draws ``n`` prior samples (density attached by the forward pass) and
    ``n`` distinct data poses, scores the orthonormalized samples and the
    data with the same :func:`flow.log_prob`, and reports the KS statistic of
    raw-vs-data and orthonormalized-vs-data densities.
    """
    poses = _poses(ds)
    if n > poses.shape[0]:
        raise ValueError(f"n={n} exceeds dataset size {poses.shape[0]}")
    n_joints = ds.n_joints if isinstance(ds, PoseDataset) else None
    rng = np.random.default_rng([seed, 10])
    _, dens = model_densities(model, n, rng, n_joints)
    idx = rng.choice(poses.shape[0], size=n, replace=False)
    data_lp = flow.log_prob(model, poses[idx].astype(np.float64)).log_prob
    return DensityComparison(
        ks_two_sample(dens.raw_logprob, data_lp),
        ks_two_sample(dens.ortho_logprob, data_lp),
        dens,
        data_lp,
    )


def density_histogram(cmp: DensityComparison):
    """Normalized histograms over Freedman-Diaconis bins of the pooled densities."""
    cols = [cmp.model.raw_logprob, cmp.model.ortho_logprob, cmp.data_logprob]
    edges = np.histogram_bin_edges(np.concatenate(cols), bins="fd")
    heights = [np.histogram(c, bins=edges, density=True)[0] for c in cols]
    return edges, heights


def write_density_histogram(cmp: DensityComparison, path):
    edges, heights = density_histogram(cmp)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_left", "bin_right", "model_raw", "model_ortho", "data"])
        for i in range(len(edges) - 1):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1]))]
                       + [repr(float(h[i])) for h in heights])


def marginal_export(model, ds: PoseDataset, joint: int, n: int, seed: int = 0):
    """Rotation vectors of one joint for ``n`` prior samples and ``n`` data poses.

    Returns a list of ``(source, x, y, z)`` rows, model rows first.
    """
    if not 0 <= joint < ds.n_joints:
        raise ValueError(f"joint index {joint} out of range for {ds.n_joints} joints")
    if n > len(ds):
        raise ValueError(f"n={n} exceeds dataset size {len(ds)}")
    rng = np.random.default_rng([seed, 11])
    x, _ = flow.sample(model, n, rng)
    model_j = rotation.transpose_to_joints(x.astype(np.float64), ds.n_joints)[:, joint]
    idx = rng.choice(len(ds), size=n, replace=False)
    data_j = rotation.transpose_to_joints(ds.poses[idx].astype(np.float64), ds.n_joints)[:, joint]
    rows = []
    for source, six in (("model", model_j), ("data", data_j)):
        rv = rotation.rotvec_from_6d(rotation.gram_schmidt(six))
        rows += [(source, *map(float, v)) for v in rv]
    return rows


def write_marginals(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source", "x", "y", "z"])
        for source, x, y, z in rows:
            w.writerow([source, repr(x), repr(y), repr(z)])


@dataclass
class AblationResult:
    augmented: DensitySample
    raw_trained: DensitySample
    augmented_report: TrainReport
    raw_report: TrainReport

    def summary(self) -> dict:
        return {
            "n": int(self.augmented.raw_logprob.size),
            "diagonal_slack": DIAGONAL_SLACK,
            "augmented_fraction_above_diagonal": self.augmented.fraction_above_diagonal(),
            "raw_trained_fraction_above_diagonal": self.raw_trained.fraction_above_diagonal(),
            "augmented_best_val_nll": self.augmented_report.best_val_loss,
            "raw_trained_best_val_nll": self.raw_report.best_val_loss,
            "units": "nats",
        }


def ablation_run(ds: PoseDataset, cfg_base: TrainConfig, n: int = 10_000, seed: int = 0,
                 models: dict | None = None) -> AblationResult:
    """Train with and without inverse Gram-Schmidt augmentation and compare.

    The two runs share the configuration, data split, initialization, batch
    order and evaluation seed; only the augmentation flag differs.  Trained
    checkpoints are stored into ``models`` (keys ``augmented``/``raw``) when
    a dict is passed.
    """
    out = {}
    for key, flag in (("augmented", True), ("raw", False)):
        cfg = replace(cfg_base, use_augmentation=flag, checkpoint_path=None)
        ckpt, report = train(ds, cfg)
        rng = np.random.default_rng([seed, 12])
        _, dens = model_densities(ckpt.model, n, rng, ds.n_joints)
        dens.source = key
        out[key] = (dens, report)
        if models is not None:
            models[key] = ckpt
    return AblationResult(out["augmented"][0], out["raw"][0], out["augmented"][1], out["raw"][1])


def write_ablation(result: AblationResult, csv_path, summary_path=None):
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "raw_logprob", "ortho_logprob", "reference"])
        for dens in (result.augmented, result.raw_trained):
            for r, o in zip(dens.raw_logprob, dens.ortho_logprob):
                w.writerow([dens.source, repr(float(r)), repr(float(o)), repr(float(r))])
    if summary_path is not None:
        with open(summary_path, "w") as f:
            json.dump(result.summary(), f, indent=2)
