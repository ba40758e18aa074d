"""Coarse registration: closed-form fits, FPFH + RANSAC, and photometric candidate search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, DegenerateError, NoSolutionError, RankError
from .flow import log_prob
from .lie import Transform, euler_xyz
from .pointcloud import PointCloud

FPFH_BINS = 11
AGGREGATES = ("median", "mean")
_TIE_EPS = 1e-9


# ---------------------------------------------------------------------------
# closed-form fit

def kabsch_fit(src, dst, with_scale=False):
    """Least-squares rigid (or similarity) map taking ``src`` onto ``dst``."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ConfigurationError("src and dst must both be (N, 3) with equal N")
    if len(src) < 3:
        raise RankError("need at least 3 point pairs")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-12 * sv[0]:
        raise RankError("source points are collinear or coincident")
    U, S, Vt = np.linalg.svd(b.T @ a)
    D = np.ones(3)
    D[2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = (U * D) @ Vt
    s = 1.0
    if with_scale:
        s = float((S * D).sum() / (a * a).sum())
    t = mu_d - s * R @ mu_s
    return Transform(R, t, s)


def _batched_kabsch(src, dst):
    """Rigid fits for a stack of 3-point samples, shapes (B, 3, 3)."""
    a = src - src.mean(axis=1, keepdims=True)
    b = dst - dst.mean(axis=1, keepdims=True)
    H = np.einsum("bki,bkj->bij", b, a)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U @ Vt))
    d[d == 0] = 1.0
    U[:, :, 2] *= d[:, None]
    R = U @ Vt
    t = dst.mean(axis=1) - np.einsum("bij,bj->bi", R, src.mean(axis=1))
    return R, t


# ---------------------------------------------------------------------------
# normals and descriptors

def estimate_normals(cloud, k_neighbors=16):
    """PCA normals from ``k`` nearest neighbours, oriented away from the centroid."""
    n = len(cloud)
    if k_neighbors < 3 or n <= k_neighbors:
        raise ConfigurationError(f"need cloud size > k >= 3, got size {n} and k {k_neighbors}")
    pts = cloud.positions
    _, idx = cKDTree(pts).query(pts, k=k_neighbors + 1)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.einsum("ni,ni->n", normals, pts - pts.mean(axis=0)) < 0
    normals[flip] *= -1.0
    return PointCloud(pts, cloud.colors, normals)


def _pair_features(p1, n1, p2, n2):
    """Darboux-frame angles (theta, alpha, phi) for directed pairs, vectorised."""
    dp = p2 - p1
    dist = np.linalg.norm(dp, axis=1)
    ok = dist > 0
    safe = np.where(ok, dist, 1.0)
    a1 = np.einsum("ni,ni->n", n1, dp) / safe
    a2 = np.einsum("ni,ni->n", n2, dp) / safe
    # near-ties (e.g. chords of a sphere) keep the given order so that the
    # choice does not hinge on rounding noise
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1)) + _TIE_EPS
    u = np.where(swap[:, None], n2, n1)
    other = np.where(swap[:, None], n1, n2)
    dp = np.where(swap[:, None], -dp, dp)
    phi = np.where(swap, -a2, a1)
    v = np.cross(dp, u)
    vn = np.linalg.norm(v, axis=1)
    ok &= vn > 0
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("ni,ni->n", v, other)
    theta = np.arctan2(np.einsum("ni,ni->n", w, other), np.einsum("ni,ni->n", u, other))
    return theta, alpha, phi, ok


def _bin(values, lo, hi):
    b = np.floor(FPFH_BINS * (values - lo) / (hi - lo)).astype(int)
    return np.clip(b, 0, FPFH_BINS - 1)


def compute_fpfh(cloud, radius):
    """33-bin FPFH descriptors (three 11-bin angle histograms) within ``radius``."""
    if cloud.normals is None:
        raise ConfigurationError("FPFH needs normals; call estimate_normals first")
    if radius <= 0:
        raise ConfigurationError("radius must be positive")
    pts, nrm = cloud.positions, cloud.normals
    n = len(pts)
    hist_len = 3 * FPFH_BINS
    if n == 0:
        return np.zeros((0, hist_len))
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((n, hist_len))
    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    theta, alpha, phi, ok = _pair_features(pts[i], nrm[i], pts[j], nrm[j])
    i, j = i[ok], j[ok]
    theta, alpha, phi = theta[ok], alpha[ok], phi[ok]
    counts = np.bincount(i, minlength=n).astype(float)
    incr = 100.0 / np.maximum(counts, 1.0)
    spfh = np.zeros((n, hist_len))
    for part, b in enumerate((_bin(theta, -np.pi, np.pi), _bin(alpha, -1.0, 1.0), _bin(phi, -1.0, 1.0))):
        np.add.at(spfh, (i, part * FPFH_BINS + b), incr[i])
    dist = np.linalg.norm(pts[i] - pts[j], axis=1)
    weighted = np.zeros((n, hist_len))
    np.add.at(weighted, i, spfh[j] / dist[:, None])
    fpfh = np.zeros_like(weighted)
    for part in range(3):
        sl = slice(part * FPFH_BINS, (part + 1) * FPFH_BINS)
        tot = weighted[:, sl].sum(axis=1, keepdims=True)
        fpfh[:, sl] = np.where(tot > 0, weighted[:, sl] * 100.0 / np.where(tot > 0, tot, 1.0), 0.0)
    fpfh += spfh
    fpfh[counts == 0] = 0.0
    return fpfh


# ---------------------------------------------------------------------------
# RANSAC

@dataclass(frozen=True)
class RansacConfig:
    n_iterations: int = 20000
    inlier_dist: float = 0.1
    edge_ratio: float = 0.9
    mutual: bool = True
    refine_rounds: int = 3
    score_subset: int = 1000
    with_scale: bool = False
    seed: int = 0

    def validate(self):
        if self.n_iterations < 1:
            raise ConfigurationError("n_iterations must be >= 1")
        if self.inlier_dist <= 0:
            raise ConfigurationError("inlier_dist must be positive")
        if not 0.0 <= self.edge_ratio < 1.0:
            raise ConfigurationError("edge_ratio must lie in [0, 1)")
        return self


def descriptor_correspondences(desc_src, desc_dst, mutual=True):
    """Index pairs of nearest descriptors, optionally kept only when mutual."""
    fwd = cKDTree(desc_dst).query(desc_src)[1]
    src_idx = np.arange(len(desc_src))
    if mutual:
        back = cKDTree(desc_src).query(desc_dst)[1]
        keep = back[fwd] == src_idx
        if keep.sum() >= 3:
            return src_idx[keep], fwd[keep]
    return src_idx, fwd


def ransac_register(src, desc_src, dst, desc_dst, config=None, rng=None):
    """FPFH-correspondence RANSAC. Returns ``(Transform, inlier_count)``.

    ``src`` and ``dst`` are point clouds (or (N, 3) arrays); descriptors are
    row-aligned with them.
    """
    cfg = (config or RansacConfig()).validate()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    ps = src.positions if isinstance(src, PointCloud) else np.asarray(src, float)
    pd = dst.positions if isinstance(dst, PointCloud) else np.asarray(dst, float)
    if len(ps) == 0 or len(pd) == 0:
        raise NoSolutionError("both clouds must be non-empty")
    ci, cj = descriptor_correspondences(np.asarray(desc_src), np.asarray(desc_dst), cfg.mutual)
    if len(ci) < 3:
        raise NoSolutionError("fewer than 3 descriptor correspondences")
    a, b = ps[ci], pd[cj]
    m = len(ci)
    # hypotheses are scored on a fixed subset of correspondences; the
    # winner is then refit against all of them
    sub = np.sort(rng.choice(m, cfg.score_subset, replace=False)) if m > cfg.score_subset else np.arange(m)
    a_s, b_s = a[sub], b[sub]

    best_count, best = -1, None
    chunk = 1024
    done = 0
    while done < cfg.n_iterations:
        nb = min(chunk, cfg.n_iterations - done)
        done += nb
        idx = np.stack([rng.choice(m, size=3, replace=False) for _ in range(nb)]) if m < 8 else \
            _distinct_triples(rng, m, nb)
        sa, sb = a[idx], b[idx]
        if cfg.edge_ratio > 0:
            ea = np.linalg.norm(sa - np.roll(sa, 1, axis=1), axis=2)
            eb = np.linalg.norm(sb - np.roll(sb, 1, axis=1), axis=2)
            good = np.all((ea >= cfg.edge_ratio * eb) & (eb >= cfg.edge_ratio * ea), axis=1)
            good &= np.all(ea > 1e-9, axis=1)
            sa, sb = sa[good], sb[good]
            if len(sa) == 0:
                continue
        R, t = _batched_kabsch(sa, sb)
        moved = np.einsum("bij,nj->bni", R, a_s) + t[:, None, :]
        err = np.linalg.norm(moved - b_s[None], axis=2)
        counts = (err < cfg.inlier_dist).sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best = int(counts[k]), (R[k], t[k])
    if best is None or best_count < 3:
        raise NoSolutionError(f"best hypothesis has {max(best_count, 0)} inliers, need >= 3")

    T = Transform(best[0], best[1])
    inliers = np.linalg.norm(T.apply(a) - b, axis=1) < cfg.inlier_dist
    for _ in range(cfg.refine_rounds):
        try:
            T = kabsch_fit(a[inliers], b[inliers], with_scale=cfg.with_scale)
        except RankError:
            break
        new = np.linalg.norm(T.apply(a) - b, axis=1) < cfg.inlier_dist
        if new.sum() < 3 or np.array_equal(new, inliers):
            inliers = new if new.sum() >= 3 else inliers
            break
        inliers = new
    return T, int(inliers.sum())


def _distinct_triples(rng, m, nb):
    idx = rng.integers(0, m, size=(nb, 3))
    # redraw the rare rows with repeated indices
    bad = (idx[:, 0] == idx[:, 1]) | (idx[:, 1] == idx[:, 2]) | (idx[:, 0] == idx[:, 2])
    while bad.any():
        idx[bad] = rng.integers(0, m, size=(int(bad.sum()), 3))
        bad = (idx[:, 0] == idx[:, 1]) | (idx[:, 1] == idx[:, 2]) | (idx[:, 0] == idx[:, 2])
    return idx


@dataclass(frozen=True)
class PointCloudInitConfig:
    """Parameters of the point-cloud route (normals, FPFH radius, RANSAC)."""

    voxel: float = 0.04
    k_neighbors: int = 16
    fpfh_radius_voxels: float = 5.0
    inlier_voxels: float = 3.0
    max_points: int = 4000
    ransac_iterations: int = 20000


def downsample_voxel(cloud, voxel):
    """One point per occupied voxel (the first in input order)."""
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return cloud.subset(np.sort(first))


def pointcloud_init(cloud_a, cloud_b, config=None, rng=None):
    """FPFH + RANSAC estimate of the map taking cloud A onto cloud B.

    Returns ``(Transform, info)`` with inlier counts for diagnostics.
    """
    cfg = config or PointCloudInitConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    feats = []
    for cloud in (cloud_a, cloud_b):
        c = downsample_voxel(cloud, cfg.voxel)
        if len(c) > cfg.max_points:
            c = c.subset(np.sort(rng.choice(len(c), cfg.max_points, replace=False)))
        if len(c) <= cfg.k_neighbors:
            raise NoSolutionError(f"point cloud too small after downsampling ({len(c)} points)")
        c = estimate_normals(c, cfg.k_neighbors)
        feats.append((c, compute_fpfh(c, cfg.fpfh_radius_voxels * cfg.voxel)))
    (ca, fa), (cb, fb) = feats
    rc = RansacConfig(n_iterations=cfg.ransac_iterations, inlier_dist=cfg.inlier_voxels * cfg.voxel)
    T, count = ransac_register(ca, fa, cb, fb, rc, rng=rng)
    return T, {"inliers": count, "n_src": len(ca), "n_dst": len(cb),
               "inlier_ratio": count / max(min(len(ca), len(cb)), 1)}


# ---------------------------------------------------------------------------
# photometric candidate search

@dataclass(frozen=True)
class TransformPrior:
    """Per-axis rotation range (degrees) and per-component translation range."""

    rotation_deg: tuple = (0.0, 45.0)
    translation: tuple = (-0.25, 0.25)

    def validate(self):
        lo, hi = self.rotation_deg
        if not (0.0 <= lo <= hi < 180.0):
            raise ConfigurationError("rotation range must satisfy 0 <= lo <= hi < 180 degrees")
        tlo, thi = self.translation
        if not (np.isfinite(tlo) and np.isfinite(thi) and tlo <= thi):
            raise ConfigurationError("translation range must be finite with lo <= hi")
        return self


def draw_transform(prior, rng):
    """Rotations uniform per axis (composed X then Y then Z) and uniform translation."""
    prior.validate()
    angles = np.deg2rad(rng.uniform(*prior.rotation_deg, size=3))
    t = rng.uniform(*prior.translation, size=3)
    return Transform(euler_xyz(angles), t)


def camera_oriented_points(view, n_points, rng, mask_quantile=None):
    """Subsample a view's surface points ``(x, d)``, restricted to its mask when given."""
    pts = view.surface_points()
    ok = np.all(np.isfinite(pts), axis=1)
    if mask_quantile is not None:
        ok &= view.mask(mask_quantile).ravel()
    idx = np.flatnonzero(ok)
    if len(idx) > n_points:
        idx = np.sort(rng.choice(idx, n_points, replace=False))
    return pts[idx]


def score_transforms(candidates, point_sets, vf_b, aggregate="median"):
    """Per-candidate aggregate over cameras of summed VF log-likelihoods.

    Returns ``(scores[n_candidates], per_camera[n_candidates, n_cameras])``.
    """
    if aggregate not in AGGREGATES:
        raise ConfigurationError(f"aggregate must be one of {AGGREGATES}")
    sizes = [len(p) for p in point_sets]
    allp = np.vstack(point_sets)
    owner = np.repeat(np.arange(len(point_sets)), sizes)
    per_cam = np.empty((len(candidates), len(point_sets)))
    for k, T in enumerate(candidates):
        x = T.apply(allp[:, :3])
        d = allp[:, 3:] @ T.rotation.T
        with np.errstate(all="ignore"):
            lp = log_prob(vf_b, np.hstack([x, d]))
        lp = np.where(np.isnan(lp), -np.inf, lp)
        per_cam[k] = np.bincount(owner, weights=lp, minlength=len(point_sets))
    agg = np.median if aggregate == "median" else np.mean
    return agg(per_cam, axis=1), per_cam


def photometric_init(views_a, vf_b, n_transforms=25, rng=None, candidates=None, prior=None,
                     aggregate="median", points_per_camera=256, mask_quantile=0.3,
                     return_scores=False):
    """Pick the candidate transform under which A's view points score best in B's VF.

    ``views_a`` are rendered novel views of scene A (see
    :func:`viewshed.render_viewshed_map` with ``return_view=True``). When
    ``candidates`` is None, ``n_transforms`` are drawn from ``prior``.
    Ties resolve to the lowest candidate index.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if candidates is None:
        if n_transforms < 1:
            raise ConfigurationError("n_transforms must be >= 1")
        prior = prior or TransformPrior()
        candidates = [draw_transform(prior, rng) for _ in range(n_transforms)]
    candidates = list(candidates)
    if not candidates:
        raise ConfigurationError("need at least one candidate transform")
    point_sets = [camera_oriented_points(v, points_per_camera, rng, mask_quantile) for v in views_a]
    point_sets = [p for p in point_sets if len(p)]
    if not point_sets:
        raise DegenerateError("no camera yields valid surface points")
    if len(candidates) == 1:
        best = 0
        scores = np.zeros(1)
    else:
        scores, _ = score_transforms(candidates, point_sets, vf_b, aggregate)
        best = int(np.argmax(np.where(np.isnan(scores), -np.inf, scores)))
    if return_scores:
        return candidates[best], scores, candidates
    return candidates[best]
