"""Command-line entry points: synth, reconstruct, eval."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from lasr.errors import DivergenceError, FormatError, InputError, LasrError, ParameterError, UsageError

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3
log = logging.getLogger("lasr")


def _threads(value) -> None:
    n = value if value is not None else os.environ.get("LASR_THREADS")
    if n is not None:
        n = int(n)
        if n < 1:
            raise UsageError("--threads must be positive")
        torch.set_num_threads(n)


def cmd_synth(args) -> int:
    from lasr.io import save_measurements
    from lasr.synth import make_articulated_scene, make_rigid_scene, save_ground_truth

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    if args.frames < 2:
        raise UsageError("--frames must be at least 2")
    make = make_rigid_scene if args.scene == "rigid" else make_articulated_scene
    ms, gt = make(T=args.frames, seed=args.seed, size=args.size)
    save_measurements(ms, out)
    save_ground_truth(gt, out / "gt", args.size, seed=args.seed)
    print(f"wrote {args.scene} scene with {args.frames} frames to {out}")
    return EXIT_OK


def _overrides(args) -> dict:
    o = {"seed": args.seed, "working_size": args.working_size, "steps_per_epoch": args.steps_per_epoch}
    if args.stage == "s0":
        o["bones"] = [0]
    return o


def cmd_reconstruct(args) -> int:
    from lasr.config import load_config
    from lasr.io import load_measurements
    from lasr.pipeline import Reconstructor, export_result

    data = load_measurements(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        history = None
        loss_csv = out / "losses.csv"
        if loss_csv.exists():
            import csv
            with open(loss_csv) as fh:
                history = [{k: (v if k == "stage" else float(v) if v != "" else 0.0) for k, v in r.items()}
                           for r in csv.DictReader(fh)]
                for r in history:
                    r["step"] = int(r["step"])
        rec = Reconstructor.resume(args.resume, data, out, history)
    else:
        cfg = load_config(args.config, _overrides(args))
        rec = Reconstructor(data, cfg, out)
    (out / "config.json").write_text(json.dumps(rec.cfg.to_dict(), indent=1))
    rec.run(max_steps=args.max_steps)
    rec.write_losses(out / "losses.csv")
    if not rec.finished():
        path = out / "interrupted.npz"
        rec.save(path)
        print(f"stopped after {rec.global_step} steps; resume with --resume {path}")
        return EXIT_OK
    res = rec.result()
    export_result(res, out, data.size[1])
    final = rec.stage_reports[-1]["final_losses"] if rec.stage_reports else {}
    print(json.dumps({"unknowns": res.report["unknowns_model"], "vertices": res.report["vertices"],
                      "bones": res.report["bones"], "final_losses": final}, indent=1))
    return EXIT_OK


def _obj_frames(root: Path) -> dict[str, Path]:
    d = root / "frames" if (root / "frames").is_dir() else root
    files = {p.name: p for p in sorted(d.glob("*.obj"))}
    if not files:
        raise InputError(f"no OBJ files in {d}")
    return files


def _cameras(root: Path):
    from lasr.camera import Intrinsics
    p = root / "cameras.json"
    if not p.exists():
        return None, None
    d = json.loads(p.read_text())
    return d["image_size"], [Intrinsics(torch.tensor(c["focal"]), torch.tensor(c["principal_point"]))
                             for c in d["frames"]]


def cmd_eval(args) -> int:
    from lasr.eval import FrameRecon, chamfer_after_icp, pck_transfer, read_keypoints, write_metrics_csv
    from lasr.mesh import load_obj
    from lasr.renderer import RasterConfig, render

    pred_root, gt_root = Path(args.pred), Path(args.gt)
    pred, gt = _obj_frames(pred_root), _obj_frames(gt_root)
    missing = sorted(set(pred) - set(gt))
    if missing:
        raise InputError(f"ground-truth frame missing for {missing[0]}")
    extra = sorted(set(gt) - set(pred))
    if extra:
        raise InputError(f"predicted frame missing for {extra[0]}")
    names = sorted(pred)
    rows = []
    pm = {n: load_obj(pred[n]) for n in names}
    gm = {n: load_obj(gt[n]) for n in names}
    for t, n in enumerate(names):
        rows.append({"frame": Path(n).stem, "chamfer": chamfer_after_icp(pm[n], gm[n], samples=args.samples,
                                                                          seed=args.seed)})
    if args.keypoints:
        pts, vis = read_keypoints(args.keypoints)
        size, p_cams = _cameras(pred_root)
        g_size, g_cams = _cameras(gt_root)
        if p_cams is None:
            raise InputError(f"{pred_root}/cameras.json is needed for keypoint transfer")
        if len(pts) != len(names) or len(p_cams) != len(names):
            raise InputError("keypoint / camera / mesh frame counts differ")
        recons = [FrameRecon(pm[n].vertices, pm[n].faces, p_cams[t]) for t, n in enumerate(names)]
        cams, size_ref = (g_cams, g_size) if g_cams is not None else (p_cams, size)
        ref = gm if g_cams is not None else pm
        cfg = RasterConfig((size_ref, size_ref), sigma=1e-5, gamma=1e-5)
        areas = []
        with torch.no_grad():
            for t, n in enumerate(names):
                s = render(torch.as_tensor(ref[n].vertices), ref[n].faces, cams[t], cfg).silhouette
                areas.append(float((s > 0.5).sum()))
        T = len(names)
        for j in range(T):
            r = pck_transfer(recons, pts, vis, areas, (size, size), pairs=[(i, j) for i in range(T) if i != j])
            rows[j]["pck"] = r["pck"]
        overall = pck_transfer(recons, pts, vis, areas, (size, size))
    mean = {"frame": "mean", "chamfer": float(np.mean([r["chamfer"] for r in rows]))}
    if args.keypoints:
        mean["pck"] = overall["pck"]
    rows.append(mean)
    write_metrics_csv(args.out if args.out else sys.stdout, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lasr", description="Articulated shape reconstruction from video.")
    p.add_argument("--threads", type=int, default=None, help="cap torch worker threads (env LASR_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic scene with ground truth")
    s.add_argument("--scene", choices=("rigid", "quadruped"), default="rigid")
    s.add_argument("--out", required=True, help="output measurement directory")
    s.add_argument("--frames", type=int, default=15)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=256, help="image size in pixels")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("reconstruct", help="fit a model to a measurement directory")
    r.add_argument("--data", required=True)
    r.add_argument("--config", default=None, help="YAML config file")
    r.add_argument("--out", required=True)
    r.add_argument("--stage", choices=("s0", "full"), default="full")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--working-size", type=int, default=None, help="optimisation resolution")
    r.add_argument("--steps-per-epoch", type=int, default=None)
    r.add_argument("--max-steps", type=int, default=None, help="stop early and write a resumable checkpoint")
    r.add_argument("--resume", default=None, help="checkpoint to continue from")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="Chamfer-after-ICP and PCK-T of predicted meshes")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--keypoints", default=None)
    e.add_argument("--out", default=None, help="CSV path (default: stdout)")
    e.add_argument("--samples", type=int, default=10_000)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _threads(args.threads)
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: optimisation diverged: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, default=str), file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, FormatError, ParameterError, UsageError, LasrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
