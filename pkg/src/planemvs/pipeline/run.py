"""Full reconstruction pipeline: selection through fusion, with evaluation.

Stages run in a fixed order; each is wrapped so that a failure surfaces as a
:class:`~planemvs.errors.StageError` carrying the stage name. Per-image work
(estimation, filtering, inference) can be spread over a process pool; fusion
runs after all images are done.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..consistency import filter_map
from ..errors import FileMissing, NoNeighbors, StageError
from ..fusion import FusedCloud, fuse
from ..matcher import estimate_depth_map
from ..phi import infer_planes_for_image
from ..scene_io import (
    load_gray,
    parse_sparse_model,
    read_depth_map,
    write_depth_map,
    write_ply,
)
from ..view_selection import select_neighbors
from .config import PipelineConfig, dump_config
from .evaluate import EvalReport, evaluate_cloud, evaluate_depth_maps
from .synthetic import load_ground_truth

logger = logging.getLogger(__name__)

# pipeline step -> logged operation name
ALGORITHM_STEPS = (
    ("rank source views, keep the best", "select_neighbors"),
    ("draw initial planes", "initialize"),
    ("checkerboard propagation and refinement", "propagate_refine"),
    ("cross-view consistency filter", "filter"),
    ("reload filtered map", "load_filtered"),
    ("line-fit hypotheses for holes", "generate_hypotheses"),
    ("score hypotheses by matching cost", "hypothesis_costs"),
    ("halve hypothesis grid", "downsample"),
    ("build and decode MRF", "decode"),
    ("pick hypotheses from decoded labels", "select_hypotheses"),
    ("normals for filled pixels", "recompute_normals"),
    ("consistency filter after inference", "filter_phi"),
    ("merge maps into a cloud", "fuse"),
)


@dataclass(frozen=True)
class LogEntry:
    stage: str
    step: str
    image_id: int | None = None


@dataclass
class Inputs:
    model: object
    images: dict
    cams: dict
    gt_depth: dict | None


@dataclass
class RunResult:
    maps: dict
    cloud: FusedCloud
    report: EvalReport | None = None
    cloud_report: EvalReport | None = None
    timings: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    neighbors: dict = field(default_factory=dict)
    ply_path: Path | None = None


@contextmanager
def stage(name: str, timings: dict | None = None):
    """Tag any failure inside the block with the stage name."""
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def image_seed(seed: int, image_id: int) -> int:
    """Per-image seed independent of scheduling order."""
    return int(np.random.SeedSequence([int(seed), int(image_id)]).generate_state(1)[0])


def load_inputs(cfg: PipelineConfig) -> Inputs:
    if cfg.input_dir is None:
        raise FileMissing("no input directory given")
    root = Path(cfg.input_dir)
    if not root.is_dir():
        raise FileMissing(f"input directory not found: {root}")
    model = parse_sparse_model(root / "sparse")
    gt = None if cfg.half_scale else load_ground_truth(root, model)
    if cfg.half_scale:
        model = model.scaled(0.5)
    images = {}
    for image_id, rec in sorted(model.images.items()):
        path = root / "images" / rec.name
        if not path.is_file():
            raise FileMissing(f"image file not found: {path}")
        images[image_id] = load_gray(path, cfg.half_scale)
    cams = {i: model.camera(i) for i in sorted(model.images)}
    return Inputs(model, images, cams, gt)


def _map_dir(cfg: PipelineConfig, stage_name: str) -> Path | None:
    if cfg.output_dir is None:
        return None
    path = Path(cfg.output_dir) / "depth_maps" / stage_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _persist(cfg: PipelineConfig, stage_name: str, maps: dict) -> None:
    path = _map_dir(cfg, stage_name)
    if path is None:
        return
    for image_id, m in maps.items():
        write_depth_map(m, path / f"{image_id}.phim")


def _estimate_job(args):
    image_id, neighbors, model, images, match_cfg, seed = args
    events: list = []
    dmap = estimate_depth_map(
        image_id, neighbors, model, images, match_cfg, seed, events=events
    )
    return image_id, dmap, events


def _phi_job(args):
    image_id, filtered, neighbors, model, images, match_cfg, phi_cfg = args
    events: list = []
    out = infer_planes_for_image(
        image_id, filtered, neighbors, model, images, match_cfg, phi_cfg, events=events
    )
    return image_id, out, events


def _map_jobs(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


def _compact_events(events: list) -> list:
    # repeated iteration markers collapse into one log entry
    out = []
    for e in events:
        if not out or out[-1] != e:
            out.append(e)
    return out


@dataclass
class Upstream:
    inputs: Inputs
    neighbors: dict
    raw: dict
    filtered: dict
    timings: dict
    log: list


def run_upstream(cfg: PipelineConfig, inputs: Inputs | None = None) -> Upstream:
    """Selection, initialization, estimation and first filtering."""
    timings: dict = {}
    log: list = []
    with stage("load", timings):
        if inputs is None:
            inputs = load_inputs(cfg)
    model, images, cams = inputs.model, inputs.images, inputs.cams
    with stage("selection", timings):
        neighbors = {}
        for image_id in sorted(model.images):
            try:
                neighbors[image_id] = select_neighbors(model, image_id, cfg=cfg.selection)
            except NoNeighbors:
                logger.warning("image %d has no usable neighbors; skipped", image_id)
                continue
            log.append(LogEntry("selection", "select_neighbors", image_id))
        if not neighbors:
            raise NoNeighbors("no image has a usable neighbor")
    with stage("estimation", timings):
        jobs = [
            (i, nb, model, images, cfg.match, image_seed(cfg.seed, i))
            for i, nb in neighbors.items()
        ]
        raw = {}
        for image_id, dmap, events in _map_jobs(_estimate_job, jobs, cfg.workers):
            raw[image_id] = dmap
            log.extend(LogEntry("estimation", e, image_id) for e in _compact_events(events))
        _persist(cfg, "estimated", raw)
    with stage("filter", timings):
        filtered = {}
        for image_id, nb in neighbors.items():
            filtered[image_id] = filter_map(image_id, raw, cams, cfg.consistency, nb)
            log.append(LogEntry("filter", "filter", image_id))
        _persist(cfg, "filtered", filtered)
    return Upstream(inputs, neighbors, raw, filtered, timings, log)


def run_downstream(
    cfg: PipelineConfig, up: Upstream, phi_enabled: bool | None = None
) -> RunResult:
    """Optional inference + refiltering, then fusion, output and evaluation."""
    phi_enabled = cfg.phi_enabled if phi_enabled is None else phi_enabled
    timings = dict(up.timings)
    log = list(up.log)
    inputs, neighbors = up.inputs, up.neighbors
    maps = up.filtered
    if phi_enabled:
        with stage("phi", timings):
            src_dir = _map_dir(cfg, "filtered")
            jobs = []
            for image_id, nb in neighbors.items():
                filtered = maps[image_id]
                if src_dir is not None and (src_dir / f"{image_id}.phim").is_file():
                    filtered = read_depth_map(src_dir / f"{image_id}.phim")
                log.append(LogEntry("phi", "load_filtered", image_id))
                jobs.append(
                    (image_id, filtered, nb, inputs.model, inputs.images, cfg.match, cfg.phi)
                )
            filled = {}
            for image_id, out, events in _map_jobs(_phi_job, jobs, cfg.workers):
                filled[image_id] = out
                log.extend(LogEntry("phi", e, image_id) for e in events)
            _persist(cfg, "phi", filled)
        with stage("phi_filter", timings):
            maps = {}
            for image_id, nb in neighbors.items():
                maps[image_id] = filter_map(image_id, filled, inputs.cams, cfg.consistency, nb)
                log.append(LogEntry("phi_filter", "filter_phi", image_id))
            _persist(cfg, "phi_filtered", maps)
    with stage("fusion", timings):
        ordered = [(i, maps[i]) for i in sorted(maps)]
        cloud = fuse(ordered, inputs.cams, inputs.images, cfg.fusion_rel_tol)
        log.append(LogEntry("fusion", "fuse"))
        ply_path = None
        if cfg.output_dir is not None:
            ply_path = Path(cfg.output_dir) / "fused.ply"
            write_ply(cloud.to_point_cloud(), ply_path)
    result = RunResult(maps, cloud, timings=timings, log=log, neighbors=neighbors,
                       ply_path=ply_path)
    if inputs.gt_depth is not None:
        with stage("evaluate", timings):
            result.report = evaluate_depth_maps(maps, inputs.gt_depth, cfg.eval_tol)
            result.cloud_report = evaluate_cloud(
                cloud.positions, inputs.cams, inputs.gt_depth, cfg.eval_tol
            )
            result.report.timings = dict(timings)
    if cfg.output_dir is not None:
        _write_outputs(cfg, result)
    return result


def _write_outputs(cfg: PipelineConfig, result: RunResult) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    (out / "execution.log").write_text(
        "".join(
            f"{e.stage} {e.step}" + ("" if e.image_id is None else f" {e.image_id}") + "\n"
            for e in result.log
        )
    )
    lines = [f"points={len(result.cloud)}\n"]
    if result.report is None:
        lines += [f"time_{k}={v!r}\n" for k, v in result.timings.items()]
    else:
        lines.append(result.report.to_text())
        lines.append(result.cloud_report.to_text("cloud_"))
    (out / "report.txt").write_text("".join(lines))


def run(cfg: PipelineConfig, inputs: Inputs | None = None) -> RunResult:
    """Run every stage of the pipeline.

    Raises:
        StageError: any stage failed; ``.stage`` names it and ``.cause`` holds
            the original exception.
    """
    if cfg.output_dir is not None:
        try:
            Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StageError("output", exc) from exc
    up = run_upstream(cfg, inputs)
    return run_downstream(cfg, up)


def ablate(cfg: PipelineConfig, inputs: Inputs | None = None) -> dict[str, RunResult]:
    """Run the shared upstream stages once, then downstream with and without inference."""
    up = run_upstream(cfg, inputs)
    results = {}
    for name, enabled in (("phi_off", False), ("phi_on", True)):
        sub = cfg if cfg.output_dir is None else replace(
            cfg, output_dir=Path(cfg.output_dir) / name
        )
        if cfg.output_dir is not None:
            # downstream stages reload the shared filtered maps
            _persist(sub, "filtered", up.filtered)
        results[name] = run_downstream(sub, up, enabled)
    return results


def traceability(log: list) -> dict[str, int]:
    """Count how often each pipeline operation appears in a run log."""
    counts = {op: 0 for _, op in ALGORITHM_STEPS}
    for entry in log:
        if entry.step in counts:
            counts[entry.step] += 1
    return counts


__all__ = [
    "ALGORITHM_STEPS", "LogEntry", "Inputs", "RunResult", "Upstream", "run",
    "run_upstream", "run_downstream", "ablate", "load_inputs", "stage", "image_seed",
    "traceability",
]
