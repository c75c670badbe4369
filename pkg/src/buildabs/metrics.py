"""Evaluation: rigid alignment, point-cloud distances and mesh statistics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import AllEmptyBalls, EmptyCloud, TooFewPoints
from .geometry import PointCloud, PolyMesh, estimate_normals, sample_surface, triangulate_fan
from .rng import make_rng


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """self after first."""
        return RigidTransform(self.rotation @ first.rotation, self.rotation @ first.translation + self.translation)


def _points(x) -> np.ndarray:
    return x.positions if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


def resample(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly n points: random subset when larger, cyclic repetition when smaller."""
    m = len(points)
    if m == n:
        return points
    if m > n:
        return points[np.sort(rng.choice(m, size=n, replace=False))]
    return points[np.arange(n) % m]


def _pair(a, b, n_samples: int | None, seed: int, tag: str):
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloud("metric needs two non-empty clouds")
    if n_samples is not None:
        # one index stream for both sides: identical inputs give identical subsets
        pa = resample(pa, n_samples, make_rng(seed, tag))
        pb = resample(pb, n_samples, make_rng(seed, tag))
    return pa, pb


def chamfer_l1(a, b, n_samples: int | None = 16384, seed: int = 0) -> float:
    """Sum of the two mean directed nearest-neighbour L1 distances."""
    pa, pb = _pair(a, b, n_samples, seed, "cd")
    dab, _ = cKDTree(pb).query(pa, p=1)
    dba, _ = cKDTree(pa).query(pb, p=1)
    return float(dab.mean() + dba.mean())


def fscore(a, b, d: float = 0.05, n_samples: int | None = 16384, seed: int = 0) -> float:
    if not d > 0:
        raise ValueError("distance threshold must be positive")
    pa, pb = _pair(a, b, n_samples, seed, "fscore")
    dab, _ = cKDTree(pb).query(pa)
    dba, _ = cKDTree(pa).query(pb)
    precision = float(np.mean(dab < d))
    recall = float(np.mean(dba < d))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def uniformity(a, r: float = 0.05, k: int = 100, seed: int = 0) -> float:
    """Normalised variance of ball counts around k query points drawn from ``a``."""
    pa = _points(a)
    if r < 0:
        raise ValueError(f"radius must be non-negative, got {r}")
    if len(pa) < k:
        raise TooFewPoints(f"uniformity needs at least {k} points, got {len(pa)}")
    queries = pa[make_rng(seed, "uniformity").choice(len(pa), size=k, replace=False)]
    counts = cKDTree(pa).query_ball_point(queries, r, return_length=True).astype(np.float64)
    mean = counts.mean()
    if mean == 0:
        raise AllEmptyBalls("every query ball is empty")
    return float(np.mean(((counts - mean) / mean) ** 2))


def _emd_exact(pa: np.ndarray, pb: np.ndarray) -> float:
    cost = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(pa))


def emd(a, b, n_match: int = 512, seed: int = 0, rounds: int = 4) -> float:
    """Exact minimum-cost bijection between ``n_match``-point resamples.

    Averaged over ``rounds`` independent resamples when either cloud is
    larger than ``n_match``; otherwise a single exact matching.
    """
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloud("metric needs two non-empty clouds")
    if max(len(pa), len(pb)) <= n_match:
        rounds = 1
    vals = []
    for i in range(rounds):
        sa = resample(pa, n_match, make_rng(seed, "emd", i))
        sb = resample(pb, n_match, make_rng(seed, "emd", i))
        vals.append(_emd_exact(sa, sb))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# alignment


def _orthonormalize(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _pca_frame(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    c = pts - pts.mean(axis=0)
    cov = c.T @ c / len(pts)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if vals[0] <= 1e-12 or vals[1] <= 1e-9 * vals[0]:
        return None
    if np.linalg.det(vecs) < 0:
        vecs[:, 2] *= -1
    return vals, vecs


def _rms(pts: np.ndarray, tree: cKDTree) -> float:
    d, _ = tree.query(pts)
    return float(np.sqrt(np.mean(d**2)))


def _kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cd - r @ cs)


def _small_rotation(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-15:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * kx @ kx


def _plane_step(src: np.ndarray, dst: np.ndarray, nrm: np.ndarray) -> RigidTransform | None:
    a = np.hstack([np.cross(src, nrm), nrm])
    b = ((dst - src) * nrm).sum(axis=1)
    ata = a.T @ a
    if np.linalg.cond(ata) > 1e12:
        return None
    x = np.linalg.solve(ata, a.T @ b)
    return RigidTransform(_small_rotation(x[:3]), x[3:])


def icp(
    source: np.ndarray,
    target: np.ndarray,
    init: RigidTransform,
    target_normals: np.ndarray | None = None,
    threshold: float | None = None,
    max_iter: int = 50,
    tol: float = 1e-7,
) -> tuple[RigidTransform, float]:
    """Point-to-plane ICP that falls back to point-to-point when a plane step
    does not lower the RMS. Returns the best transform seen and its RMS."""
    tree = cKDTree(target)
    best = init
    best_rms = _rms(init.apply(source), tree)
    current, cur_rms = best, best_rms
    use_plane = target_normals is not None
    for _ in range(max_iter):
        moved = current.apply(source)
        d, j = tree.query(moved)
        keep = d <= threshold if threshold is not None else np.ones(len(d), bool)
        if keep.sum() < 3:
            keep = np.ones(len(d), bool)
        step = None
        if use_plane:
            step = _plane_step(moved[keep], target[j[keep]], target_normals[j[keep]])
            if step is not None:
                cand = step.compose(current)
                cand_rms = _rms(cand.apply(source), tree)
                if cand_rms >= cur_rms:
                    step = None
        if step is None:
            use_plane = False
            step = _kabsch(moved[keep], target[j[keep]])
        current = step.compose(current)
        rms = _rms(current.apply(source), tree)
        improvement = cur_rms - rms
        cur_rms = rms
        if rms < best_rms:
            best, best_rms = current, rms
        if abs(improvement) < tol:
            break
    return best, best_rms


def align_pca_icp(source, target, icp_threshold_frac: float = 0.05, max_iter: int = 50, tol: float = 1e-7):
    """Rigid alignment of ``source`` onto ``target``: PCA frame match, then ICP.

    PCA leaves each principal axis sign-ambiguous; of the four right-handed
    sign choices the one with the lowest nearest-neighbour RMS seeds ICP.
    Degenerate (near-collinear or tiny) clouds start from the identity and
    use point-to-point ICP only. Returns (transform, aligned cloud).
    """
    src, dst = _points(source), _points(target)
    if len(src) == 0 or len(dst) == 0:
        raise EmptyCloud("alignment needs two non-empty clouds")
    tree = cKDTree(dst)
    fs = _pca_frame(src) if len(src) >= 4 else None
    fd = _pca_frame(dst) if len(dst) >= 4 else None
    diag = float(np.linalg.norm(np.ptp(dst, axis=0)))
    threshold = max(icp_threshold_frac * diag, 1e-12)
    if fs is None or fd is None:
        init = RigidTransform(np.eye(3), dst.mean(axis=0) - src.mean(axis=0))
        if _rms(src, tree) <= _rms(init.apply(src), tree):
            init = RigidTransform.identity()
        tf, _ = icp(src, dst, init, None, threshold, max_iter, tol)
    else:
        cs, cd = src.mean(axis=0), dst.mean(axis=0)
        candidates = []
        for signs in ([1, 1, 1], [-1, -1, 1], [-1, 1, -1], [1, -1, -1]):
            r = _orthonormalize(fd[1] @ np.diag(signs) @ fs[1].T)
            cand = RigidTransform(r, cd - r @ cs)
            candidates.append((_rms(cand.apply(src), tree), cand))
        candidates.append((_rms(src, tree), RigidTransform.identity()))
        init = min(candidates, key=lambda c: c[0])[1]
        normals = None
        if len(dst) >= 3:
            normals = estimate_normals(PointCloud(dst), k=min(30, len(dst) - 1)).normals
        tf, _ = icp(src, dst, init, normals, threshold, max_iter, tol)
    out = PointCloud(tf.apply(src), None if not isinstance(source, PointCloud) or source.normals is None else source.normals @ tf.rotation.T)
    return tf, out


def rotation_angle_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# --------------------------------------------------------------------------
# mesh statistics


def mesh_stats(mesh: PolyMesh, normal_tol: float = 1e-3, offset_tol: float = 1e-3) -> dict:
    """Vertex, face and distinct-plane counts.

    Faces count as given; planes are gathered over the fan triangulation,
    with degenerate triangles skipped.
    """
    tri, _ = triangulate_fan(mesh)
    v = tri.vertices
    planes: list[tuple[np.ndarray, float]] = []
    for f in tri.faces:
        a, b, c = v[list(f)]
        n = np.cross(b - a, c - a)
        ln = np.linalg.norm(n)
        if not np.isfinite(ln) or ln < 1e-12:
            continue
        n = n / ln
        d = float(n @ a)
        for n2, d2 in planes:
            dot = float(n @ n2)
            if abs(dot) >= 1.0 - normal_tol and abs(d - math.copysign(1.0, dot) * d2) <= offset_tol:
                break
        else:
            planes.append((n, d))
    return {"v_count": mesh.n_vertices, "f_count": mesh.n_faces, "p_count": len(planes)}


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalConfig:
    n_samples: int = 16384
    fscore_d: float = 0.05
    uniformity_r: float = 0.05
    uniformity_k: int = 100
    emd_match: int = 512
    emd_rounds: int = 4
    normal_tol: float = 1e-3
    offset_tol: float = 1e-3
    align: bool = True
    seed: int = 0


@dataclass
class InstanceMetrics:
    id: str
    cd: float | None = None
    fscore: float | None = None
    uniformity: float | None = None
    emd: float | None = None
    v: int | None = None
    f: int | None = None
    p: int | None = None
    success: bool = True
    reasons: list = field(default_factory=list)


_AGG_KEYS = ("cd", "fscore", "uniformity", "emd", "v", "f", "p")


@dataclass
class MetricsReport:
    instances: list
    aggregate: dict

    @classmethod
    def from_instances(cls, instances: list[InstanceMetrics]) -> "MetricsReport":
        ordered = sorted(instances, key=lambda r: r.id)
        agg = {}
        for key in _AGG_KEYS:
            vals = [getattr(r, key) for r in ordered if r.success and getattr(r, key) is not None]
            agg[f"{key}_mean"] = float(np.mean(vals)) if vals else None
        failures = sum(not r.success for r in ordered)
        agg["fr"] = failures / len(ordered) if ordered else 0.0
        return cls(ordered, agg)

    def to_dict(self) -> dict:
        return {"instances": [asdict(r) for r in self.instances], "aggregate": dict(self.aggregate)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls([InstanceMetrics(**r) for r in d["instances"]], dict(d["aggregate"]))

    def summary_table(self) -> str:
        head = f"{'id':<16}{'#V':>6}{'#F':>6}{'#P':>6}{'CD':>10}{'F':>8}{'U':>8}{'EMD':>9}  ok"
        rows = [head, "-" * len(head)]

        def fmt(x, spec):
            return format(x, spec) if x is not None else "-".rjust(int(spec.rstrip("df").split(".")[0]))

        for r in self.instances:
            rows.append(
                f"{r.id:<16}{fmt(r.v, '6d')}{fmt(r.f, '6d')}{fmt(r.p, '6d')}"
                f"{fmt(r.cd, '10.4f')}{fmt(r.fscore, '8.3f')}{fmt(r.uniformity, '8.3f')}{fmt(r.emd, '9.4f')}"
                f"  {'y' if r.success else 'n'}"
            )
        a = self.aggregate
        rows.append("-" * len(head))
        rows.append(
            f"{'mean':<16}{fmt(a['v_mean'], '6.1f')}{fmt(a['f_mean'], '6.1f')}{fmt(a['p_mean'], '6.1f')}"
            f"{fmt(a['cd_mean'], '10.4f')}{fmt(a['fscore_mean'], '8.3f')}{fmt(a['uniformity_mean'], '8.3f')}"
            f"{fmt(a['emd_mean'], '9.4f')}  FR={100 * a['fr']:.0f}%"
        )
        return "\n".join(rows)


def evaluate_instance(
    iid: str, prediction, ground_truth, cfg: EvalConfig, success: bool = True, reasons=()
) -> InstanceMetrics:
    """Metrics for one prediction. Meshes are surface-sampled first; mesh
    predictions also get #V/#F/#P. Any exception marks the instance failed."""
    rec = InstanceMetrics(iid, success=success, reasons=list(reasons))
    try:
        if isinstance(prediction, PolyMesh):
            stats = mesh_stats(prediction, cfg.normal_tol, cfg.offset_tol)
            rec.v, rec.f, rec.p = stats["v_count"], stats["f_count"], stats["p_count"]
            if not np.all(np.isfinite(prediction.vertices)):
                rec.success = False
                if "NaNFace" not in rec.reasons:
                    rec.reasons.append("NaNFace")
                return rec
            pred = sample_surface(prediction, cfg.n_samples, cfg.seed)
        else:
            pred = prediction
        gt = sample_surface(ground_truth, cfg.n_samples, cfg.seed) if isinstance(ground_truth, PolyMesh) else ground_truth
        if cfg.align:
            _, pred = align_pca_icp(pred, gt)
        rec.cd = chamfer_l1(pred, gt, cfg.n_samples, cfg.seed)
        rec.fscore = fscore(pred, gt, cfg.fscore_d, cfg.n_samples, cfg.seed)
        rec.emd = emd(pred, gt, cfg.emd_match, cfg.seed, cfg.emd_rounds)
        rec.uniformity = uniformity(pred, cfg.uniformity_r, min(cfg.uniformity_k, len(pred)), cfg.seed)
    except Exception as exc:  # recorded, never aborts a batch
        rec.success = False
        rec.reasons.append(f"{type(exc).__name__}: {exc}")
    return rec


def evaluate_report(pairs, cfg: EvalConfig | None = None) -> MetricsReport:
    """``pairs``: iterable of dicts with keys id, prediction, ground_truth and
    optionally success / reasons (from generation-time validation)."""
    cfg = cfg or EvalConfig()
    pairs = list(pairs)
    if not pairs:
        raise ValueError("nothing to evaluate")
    recs = [
        evaluate_instance(
            p["id"], p["prediction"], p["ground_truth"], cfg, p.get("success", True), p.get("reasons", ())
        )
        for p in pairs
    ]
    return MetricsReport.from_instances(recs)
