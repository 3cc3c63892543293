"""Synthetic benchmark runs shared by the acceptance suite and scripts/.

Results are cached as JSON keyed by a hash of the package sources, the
scenario and the config, so re-running the suite is cheap until the code
changes.  Set ``LASR_ACCEPTANCE_FRESH=1`` to ignore the cache.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

from lasr.config import PipelineConfig, ablation
from lasr.eval import chamfer_after_icp
from lasr.mesh import Mesh
from lasr.pipeline import Reconstructor, export_result
from lasr.synth import make_articulated_scene, make_rigid_scene

PACKAGE_DIR = Path(__file__).resolve().parent
DEFAULT_CACHE = PACKAGE_DIR.parents[1] / ".acceptance_cache"

# rigid S0 benchmark: 15 frames, 90 degree orbit, 256 px measurements.
# Per-frame tables go through an 8-feature temporal basis; free per-frame
# poses settle into a depth-flattened, under-rotated solution.
RIGID_CONFIG = dict(bones=[0], steps_per_epoch=15, temporal_basis=8)
ARTICULATED_CONFIG = dict(steps_per_epoch=15, temporal_basis=8)
EVAL_SAMPLES = 10_000


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(PACKAGE_DIR.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _key(name: str, payload: dict) -> str:
    blob = json.dumps({"name": name, "payload": payload, "src": source_hash()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cached(name: str, payload: dict, compute, cache_dir=None) -> dict:
    """Return ``compute()``'s JSON result, reusing a cached copy when inputs are unchanged."""
    cache = Path(cache_dir or os.environ.get("LASR_ACCEPTANCE_CACHE", DEFAULT_CACHE))
    path = cache / f"{name}-{_key(name, payload)}.json"
    if path.exists() and os.environ.get("LASR_ACCEPTANCE_FRESH") != "1":
        return json.loads(path.read_text())
    result = compute()
    cache.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result, indent=1, default=float))
    return result


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run(data, cfg: PipelineConfig, out_dir: Path | None):
    t0 = time.time()
    rec = Reconstructor(data, cfg, out_dir).run(log_every=50)
    res = rec.result()
    return rec, res, time.time() - t0


def mean_frame_chamfer(res, gt, samples: int = EVAL_SAMPLES) -> float:
    """Mean over frames of Chamfer-after-ICP between posed predicted and ground-truth meshes."""
    vals = [chamfer_after_icp(Mesh(v, res.faces), Mesh(g, gt.mesh.faces), samples=samples, seed=t)
            for t, (v, g) in enumerate(zip(res.camera_vertices, gt.camera_vertices))]
    return float(np.mean(vals))


def rigid_run(out_dir=None, config: dict | None = None, seed: int = 0) -> dict:
    """S0 reconstruction of the rigid blob scene; Chamfer of the rest shape."""
    cfg = PipelineConfig.from_dict({**PipelineConfig().to_dict(), **RIGID_CONFIG, **(config or {}), "seed": seed})
    data, gt = make_rigid_scene(seed=seed)
    out = Path(out_dir) if out_dir is not None else None
    rec, res, secs = _run(data, cfg, out)
    result = {"chamfer": chamfer_after_icp(res.mesh, gt.mesh, samples=EVAL_SAMPLES), "seconds": secs,
              "steps": rec.global_step, "config": cfg.to_dict()}
    if out is not None:
        export_result(res, out, data.size[1])
        files = sorted(out.glob("stage_*.npz")) + [out / "rest.obj"] + sorted((out / "frames").glob("*.obj"))
        result["digests"] = {p.relative_to(out).as_posix(): _digest(p) for p in files}
    return result


def articulated_run(variant: str = "full", config: dict | None = None, seed: int = 0,
                    s0_only: bool = False) -> dict:
    """Quadruped reconstruction under one ablation variant (or the rigid stage alone)."""
    base = PipelineConfig.from_dict({**PipelineConfig().to_dict(), **ARTICULATED_CONFIG, **(config or {}),
                                     "seed": seed})
    cfg = ablation(base, variant)
    if s0_only:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), "bones": [0]})
    data, gt = make_articulated_scene(seed=seed)
    rec, res, secs = _run(data, cfg, None)
    return {"chamfer": mean_frame_chamfer(res, gt), "seconds": secs, "steps": rec.global_step,
            "vertices": res.mesh.num_vertices, "bones": res.report["bones"], "config": cfg.to_dict()}
