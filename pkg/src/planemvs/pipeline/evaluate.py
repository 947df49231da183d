"""Depth-domain completeness / accuracy / F1 against synthetic ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..depthmap import DepthNormalMap

# relative tolerances mirroring a 0.5/1/2/5 cm ladder at desk scale
TOLERANCE_LADDER = (0.005, 0.01, 0.02, 0.05)


def f1_score(accuracy: float, completeness: float) -> float:
    s = accuracy + completeness
    return 2.0 * accuracy * completeness / s if s > 0 else 0.0


@dataclass
class EvalReport:
    """Metrics at one relative depth tolerance.

    Attributes:
        completeness: ground-truth-visible pixels recovered within tolerance,
            over all ground-truth-visible pixels.
        accuracy: recovered pixels within tolerance over all recovered pixels.
        f1: harmonic mean of the two.
        tol: relative depth tolerance.
        visible: number of ground-truth-visible pixels.
        recovered: number of recovered pixels.
        correct: recovered pixels within tolerance.
        timings: stage name -> wall seconds.
    """

    completeness: float
    accuracy: float
    f1: float
    tol: float
    visible: int = 0
    recovered: int = 0
    correct: int = 0
    timings: dict = field(default_factory=dict)

    def to_text(self, prefix: str = "") -> str:
        """One ``name=value`` line per metric."""
        rows = [
            ("completeness", self.completeness),
            ("accuracy", self.accuracy),
            ("f1", self.f1),
            ("tol", self.tol),
            ("visible", self.visible),
            ("recovered", self.recovered),
            ("correct", self.correct),
        ]
        rows += [(f"time_{k}", v) for k, v in self.timings.items()]
        return "".join(f"{prefix}{k}={_fmt(v)}\n" for k, v in rows)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def _report(visible, recovered, comp_hits, acc_hits, tol) -> EvalReport:
    completeness = comp_hits / visible if visible else 0.0
    accuracy = acc_hits / recovered if recovered else 0.0
    return EvalReport(
        completeness, accuracy, f1_score(accuracy, completeness), tol,
        int(visible), int(recovered), int(acc_hits),
    )


def evaluate_depth_maps(maps: dict, gt_depth: dict, tol: float = 0.01) -> EvalReport:
    """Pool per-pixel metrics over every image that has ground truth.

    Args:
        maps: image id -> :class:`DepthNormalMap`.
        gt_depth: image id -> ``(H, W)`` depth with NaN where no surface is seen.
        tol: relative depth tolerance ``|d - d_gt| / d_gt``.

    Recovered pixels where the ground truth sees nothing count as wrong.
    """
    visible = recovered = comp = acc = 0
    for image_id, gt in gt_depth.items():
        vis = np.isfinite(gt)
        visible += int(vis.sum())
        m: DepthNormalMap | None = maps.get(image_id)
        if m is None:
            continue
        rec = m.valid
        recovered += int(rec.sum())
        with np.errstate(invalid="ignore"):
            close = vis & rec & (np.abs(m.depth - gt) < tol * gt)
        hits = int(close.sum())
        comp += hits
        acc += hits
    return _report(visible, recovered, comp, acc, tol)


def evaluate_cloud(
    positions: np.ndarray, cams: dict, gt_depth: dict, tol: float = 0.01
) -> EvalReport:
    """Depth-domain scoring of a world-space point cloud.

    Each point is projected into every ground-truth view; it lands on the
    rounded pixel. A point is accurate when some view sees it there within
    ``tol`` of the ground-truth depth; a ground-truth pixel is complete when
    an accurate point lands on it.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    accurate = np.zeros(len(positions), dtype=bool)
    visible = comp = 0
    for image_id, gt in gt_depth.items():
        cam = cams[image_id]
        vis = np.isfinite(gt)
        visible += int(vis.sum())
        if len(positions) == 0:
            continue
        Xc = positions @ cam.R.T + cam.t
        z = Xc[:, 2]
        h, w = gt.shape
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.floor(cam.fx * Xc[:, 0] / z + cam.cx + 0.5)
            v = np.floor(cam.fy * Xc[:, 1] / z + cam.cy + 0.5)
        ok = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        idx = np.flatnonzero(ok)
        ui, vi = u[idx].astype(np.int64), v[idx].astype(np.int64)
        g = gt[vi, ui]
        with np.errstate(invalid="ignore"):
            close = np.isfinite(g) & (np.abs(z[idx] - g) < tol * g)
        accurate[idx[close]] = True
        covered = np.zeros(gt.shape, dtype=bool)
        covered[vi[close], ui[close]] = True
        comp += int((covered & vis).sum())
    return _report(visible, len(positions), comp, int(accurate.sum()), tol)


__all__ = [
    "EvalReport", "evaluate_depth_maps", "evaluate_cloud", "f1_score", "parse_report",
    "TOLERANCE_LADDER",
]
