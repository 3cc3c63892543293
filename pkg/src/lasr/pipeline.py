"""Coarse-to-fine reconstruction: rigid stage, then remesh / re-seed bones / refine."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.cluster import KMeans

from lasr.camera import Intrinsics
from lasr.config import PipelineConfig, StageConfig
from lasr.errors import DegenerateGeometryError, DivergenceError, InputError, ParameterError
from lasr.io import MeasurementSet
from lasr.losses import (FrameTarget, arap_loss, canonicalization_loss, least_motion_loss,
                         reconstruction_loss, shape_smoothness, symmetry_losses)
from lasr.mesh import Mesh, make_icosphere, save_obj
from lasr.optim import (QUATERNION, UNIT, UNIT_INTERVAL, AdamState, ParamRegistry, TemporalBasis,
                        adam_step, load_checkpoint, sample_batch, save_checkpoint, steps_per_epoch)
from lasr.remesh import remesh
from lasr.renderer import RasterConfig, render
from lasr.skinning import BonePose, FreeSkinning, SkinningModel, lbs_object, parameter_count, skin_weights

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["stage", "step", "total", "silhouette", "flow", "texture", "pyramid", "shape", "arap",
                "least", "symm_shape", "symm_bone", "can"]
PER_FRAME = ("root_q", "root_t", "bone_q", "bone_t")


def init_bones(vertices, count: int, seed: int = 0) -> SkinningModel:
    """Gaussian bones at k-means++ centres of the rest vertices.

    Every precision starts isotropic with radius equal to the mean distance
    from a centre to its nearest other centre.
    """
    v = np.asarray(vertices, dtype=np.float64)
    if count < 1:
        raise ParameterError("need at least one bone")
    if count > len(v):
        raise ParameterError(f"{count} bones for {len(v)} vertices")
    km = KMeans(n_clusters=count, init="k-means++", n_init=1, max_iter=100, random_state=seed).fit(v)
    centers = km.cluster_centers_
    if count == 1:
        radius = 0.5 * float(np.linalg.norm(v.max(0) - v.min(0)))
    else:
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        radius = float(d.min(1).mean())
    return SkinningModel.isotropic(centers, max(radius, 1e-3))


@dataclass
class Result:
    mesh: Mesh                     # rest shape with colours
    faces: np.ndarray
    skinning: object | None        # SkinningModel / FreeSkinning / None
    object_vertices: list          # per frame, object frame
    camera_vertices: list          # per frame, working camera frame
    intrinsics: list               # per frame, working resolution
    working_size: int
    report: dict = field(default_factory=dict)

    def intrinsics_at(self, size: int) -> list[Intrinsics]:
        """Intrinsics rescaled to a ``size`` x ``size`` image (pixel centres at integers)."""
        s = size / self.working_size
        return [Intrinsics(K.focal.detach() * s, (K.principal_point.detach() + 0.5) * s - 0.5)
                for K in self.intrinsics]


class Reconstructor:
    """Stateful optimiser over the stage schedule; can checkpoint and resume mid-stage."""

    def __init__(self, data: MeasurementSet, config: PipelineConfig | None = None, out_dir=None):
        self.cfg = config or PipelineConfig()
        data.validate()
        if data.num_frames < 2:
            raise InputError("need at least two frames")
        self.data = data.resized(self.cfg.working_size)
        self.T = self.data.num_frames
        self.out_dir = Path(out_dir) if out_dir is not None else None
        size = self.cfg.working_size
        self.raster = RasterConfig((size, size), sigma=self.cfg.sigma, gamma=self.cfg.gamma)
        self._build_targets()
        init = make_icosphere(self._init_level())
        self.stages = self.cfg.stages(init.num_vertices)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.stage_index = 0
        self.step_in_stage = 0
        self.global_step = 0
        self.history: list[dict] = []
        self.stage_reports: list[dict] = []
        self._stage_start = time.time()
        self.faces = init.faces
        self.registry = ParamRegistry()
        self.adam = AdamState()
        self._init_frames()
        self._set_geometry(init.vertices * self.cfg.init_radius, np.full_like(init.vertices, 0.5))
        self._set_bones(self.stages[0].bones)
        self._configure_stage()

    # -- setup -------------------------------------------------------------

    def _init_level(self) -> int:
        if self.cfg.coarse_to_fine:
            return self.cfg.init_subdivisions
        # single stage: start at roughly the resolution the schedule would end at
        n0 = 10 * 4 ** self.cfg.init_subdivisions + 2
        final = min(self.cfg.vertex_cap, n0 * self.cfg.vertex_growth ** (len(self.cfg.bones) - 1))
        level = self.cfg.init_subdivisions
        while abs(10 * 4 ** (level + 1) + 2 - final) < abs(10 * 4 ** level + 2 - final):
            level += 1
        return level

    def _build_targets(self) -> None:
        d = self.data
        as_t = lambda a: None if a is None else torch.as_tensor(a, dtype=torch.float64)  # noqa: E731
        self.fw_targets, self.bw_targets = [], []
        for t in range(self.T):
            conf = as_t(d.confidence[t]) if d.confidence is not None else None
            img, mask = as_t(d.images[t]), as_t(d.masks[t].astype(np.float64))
            self.fw_targets.append(FrameTarget(img, mask, as_t(d.flow_fw[t]), conf))
            bw = as_t(d.flow_bw[t]) if d.flow_bw is not None else None
            self.bw_targets.append(FrameTarget(img, mask, bw, conf))

    def _init_frames(self) -> None:
        T, size, reg = self.T, self.cfg.working_size, self.registry
        lr = self.cfg.lr
        root_lr = self.cfg.root_lr or lr
        reg.add("root_q", torch.tensor([1.0, 0, 0, 0]).repeat(T, 1), root_lr, QUATERNION)
        reg.add("root_t", torch.tensor([0.0, 0.0, self.cfg.init_depth]).repeat(T, 1), root_lr)
        reg.add("log_focal", torch.full((T,), math.log(self.cfg.init_focal * size)), root_lr)
        reg.add("principal", torch.full((2,), (size - 1) / 2.0), lr,
                frozen=not self.cfg.optimize_principal_point)
        reg.add("normal", torch.tensor([1.0, 0.0, 0.0]), lr, UNIT)
        K = self.cfg.temporal_basis
        if K > 0:
            self.basis = TemporalBasis(T, K)
        else:
            self.basis = None

    def _set_geometry(self, vertices, colors) -> None:
        self.registry.add("rest", torch.as_tensor(vertices), self.cfg.lr)
        self.registry.add("colors", torch.as_tensor(colors), self.cfg.lr, UNIT_INTERVAL)

    def _set_bones(self, B: int) -> None:
        reg, lr, T = self.registry, self.cfg.lr, self.T
        for name in ("bone_q", "bone_t", "centers", "precision", "logits"):
            reg.blocks.pop(name, None)
        reg.add("bone_q", torch.tensor([1.0, 0, 0, 0]).repeat(T, B, 1), lr, QUATERNION)
        reg.add("bone_t", torch.zeros(T, B, 3), lr)
        if B > 0:
            rest = reg["rest"].detach().numpy()
            if self.cfg.skinning == "gmm":
                model = init_bones(rest, B, seed=self.cfg.seed + self.stage_index)
                reg.add("centers", model.centers, lr)
                reg.add("precision", model.precision_raw, lr)
            else:
                # free weights start from the same Gaussian assignment
                model = init_bones(rest, B, seed=self.cfg.seed + self.stage_index)
                reg.add("logits", model.log_densities(torch.as_tensor(rest)).detach(), lr)
        if self.basis is not None:
            for name in PER_FRAME:
                base = reg[name]
                reg.add(name + "_coef", torch.zeros(self.basis.K, base[0].numel()), reg.blocks[name].lr)
                reg.freeze(name)

    def _configure_stage(self) -> None:
        # the symmetry plane is fixed during the rigid stage
        self.registry.freeze("normal", frozen=self.stages[self.stage_index].bones == 0)

    @property
    def stage(self) -> StageConfig:
        return self.stages[self.stage_index]

    @property
    def steps_per_epoch(self) -> int:
        return self.cfg.steps_per_epoch or steps_per_epoch(self.T, self.cfg.batch)

    def stage_steps(self, k: int | None = None) -> int:
        return self.stages[self.stage_index if k is None else k].epochs * self.steps_per_epoch

    # -- model evaluation --------------------------------------------------

    def _table(self, name):
        x = self.registry[name]
        if self.basis is not None:
            x = self.basis.expand(x, self.registry[name + "_coef"])
        return x

    def skinning_model(self):
        reg = self.registry
        if "centers" in reg:
            return SkinningModel(reg["centers"], reg["precision"])
        if "logits" in reg:
            return FreeSkinning(reg["logits"])
        return None

    def intrinsics(self, t: int) -> Intrinsics:
        return Intrinsics(torch.exp(self.registry["log_focal"][t]), self.registry["principal"])

    def _posers(self):
        rest = self.registry["rest"]
        model = self.skinning_model()
        W = skin_weights(model, rest) if model is not None else None
        root_q, root_t = self._table("root_q"), self._table("root_t")
        bone_q, bone_t = self._table("bone_q"), self._table("bone_t")
        if self.basis is not None:
            root_q = root_q / torch.linalg.norm(root_q, dim=-1, keepdim=True)
            bone_q = bone_q / torch.linalg.norm(bone_q, dim=-1, keepdim=True)
        cache: dict = {}

        def pose(t):
            if t not in cache:
                if W is None:
                    vo = rest
                else:
                    vo = lbs_object(rest, W, BonePose(bone_q[t], bone_t[t]))
                vc = BonePose(root_q[t], root_t[t]).apply(vo)
                cache[t] = (vo, vc)
            return cache[t]

        return pose

    def loss(self, pairs, seed: int):
        """Total objective for a batch of frame pairs and the per-term breakdown."""
        w = self.cfg.weights
        reg = self.registry
        pose = self._posers()
        faces = self.faces
        colors = reg["colors"]
        B = self.stage.bones
        recon = 0.0
        terms = {k: 0.0 for k in ("silhouette", "flow", "texture", "pyramid", "arap", "least")}
        for t, t1 in pairs:
            vo_t, vc_t = pose(t)
            vo_1, vc_1 = pose(t1)
            K_t, K_1 = self.intrinsics(t), self.intrinsics(t1)
            need_flow = w.beta2 > 0
            renders = [render(vc_t, faces, K_t, self.raster, colors, vc_1 if need_flow else None, K_1)]
            targets = [self.fw_targets[t]]
            if self.cfg.use_backward_flow and self.data.flow_bw is not None:
                renders.append(render(vc_1, faces, K_1, self.raster, colors, vc_t if need_flow else None, K_t))
                targets.append(self.bw_targets[t1])
            else:
                renders.append(render(vc_1, faces, K_1, self.raster, colors))
                targets.append(FrameTarget(self.fw_targets[t1].image, self.fw_targets[t1].silhouette))
            total, parts = reconstruction_loss(renders, targets, w)
            if B > 0:
                arap = arap_loss(vo_t, vo_1, faces)
                least = 0.5 * (least_motion_loss(vo_t, reg["rest"]) + least_motion_loss(vo_1, reg["rest"]))
                total = total + w.w_arap * arap + w.w_least * least
                parts = dict(parts, arap=arap, least=least)
            recon = recon + total / len(pairs)
            for k, v in parts.items():
                terms[k] = terms[k] + v / len(pairs)
        mesh = Mesh(reg["rest"].detach().numpy(), faces)
        shape = shape_smoothness(mesh, reg["rest"])
        centers = reg["centers"] if "centers" in reg else None
        if w.w_symm_shape > 0 or w.w_symm_bone > 0:
            symm_s, symm_b = symmetry_losses(mesh, reg["normal"], centers, reg["rest"],
                                             samples=w.symmetry_samples, seed=seed)
        else:
            symm_s = symm_b = reg["rest"].new_zeros(())
        can = canonicalization_loss(reg["normal"]) if B > 0 else reg["rest"].new_zeros(())
        total = (recon + w.w_shape * shape + w.w_symm_shape * symm_s + w.w_symm_bone * symm_b
                 + w.w_can * can)
        terms.update(shape=shape, symm_shape=symm_s, symm_bone=symm_b, can=can)
        return total, terms

    # -- optimisation ------------------------------------------------------

    def step(self) -> dict:
        pairs = sample_batch(self.T, self.cfg.batch, self.rng)
        self.registry.zero_grad()
        try:
            total, terms = self.loss(pairs, seed=self.cfg.seed * 1_000_003 + self.global_step)
        except DegenerateGeometryError as exc:
            # the optimiser drove the shape to a degenerate state (collapsed or overflowed)
            raise DivergenceError(f"degenerate geometry at step {self.global_step}: {exc}",
                                  {"stage": self.stage.name, "step": self.global_step}) from exc
        row = {"stage": self.stage.name, "step": self.global_step, "total": float(total.detach())}
        row.update({k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in terms.items()})
        if not math.isfinite(row["total"]):
            raise DivergenceError("non-finite objective", row)
        total.backward()
        adam_step(self.registry, self.adam, lr_scale=self.lr_scale())
        self.global_step += 1
        self.step_in_stage += 1
        self.history.append(row)
        return row

    def lr_scale(self) -> float:
        """Cosine decay from 1 to ``lr_final`` over the current stage."""
        f = self.cfg.lr_final
        k = self.step_in_stage / max(self.stage_steps() - 1, 1)
        return f + (1 - f) * 0.5 * (1 + math.cos(math.pi * min(k, 1.0)))

    def finished(self) -> bool:
        return self.stage_index >= len(self.stages) - 1 and self.step_in_stage >= self.stage_steps()

    def run(self, max_steps: int | None = None, log_every: int = 25) -> "Reconstructor":
        """Optimise until the schedule ends or ``max_steps`` more steps were taken."""
        done = 0
        while not self.finished():
            if self.step_in_stage >= self.stage_steps():
                self._finish_stage()
                self._advance()
                continue
            if max_steps is not None and done >= max_steps:
                return self
            row = self.step()
            done += 1
            if log_every and self.step_in_stage % log_every == 0:
                log.info("%s step %d/%d loss %.5f sil %.4f flow %.4f", row["stage"], self.step_in_stage,
                         self.stage_steps(), row["total"], row["silhouette"], row["flow"])
        self._finish_stage()
        return self

    def _finish_stage(self) -> None:
        if self.stage_reports and self.stage_reports[-1]["stage"] == self.stage.name:
            return
        rows = [r for r in self.history if r["stage"] == self.stage.name]
        last = rows[-min(len(rows), self.steps_per_epoch):] if rows else []
        rep = {
            "stage": self.stage.name, "bones": self.stage.bones, "vertices": int(len(self.registry["rest"])),
            "faces": int(len(self.faces)), "steps": self.step_in_stage,
            "unknowns": self.registry.num_unknowns(), "seconds": round(time.time() - self._stage_start, 2),
            "final_losses": {k: float(np.mean([r[k] for r in last])) for k in LOSS_COLUMNS[2:]} if last else {},
        }
        self.stage_reports.append(rep)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.save(self.out_dir / f"stage_{self.stage_index}_{self.stage.name}.npz")
            self.write_losses(self.out_dir / "losses.csv")

    def _advance(self) -> None:
        nxt = self.stages[self.stage_index + 1]
        rest = self.registry["rest"].detach().numpy()
        colors = self.registry["colors"].detach().numpy()
        current = Mesh(rest, self.faces, colors)
        if nxt.target_vertices is not None:
            new = remesh(current, nxt.target_vertices, self.cfg.remesh_grid)
        else:
            new = current
        self.stage_index += 1
        self.step_in_stage = 0
        self.faces = new.faces
        self._set_geometry(new.vertices, new.colors)
        self._set_bones(nxt.bones)
        self._configure_stage()
        # moments of resized blocks are meaningless after remeshing
        self.adam = AdamState()
        self._stage_start = time.time()

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "config": self.cfg.to_dict(), "stage_index": self.stage_index, "step_in_stage": self.step_in_stage,
            "global_step": self.global_step, "rng": self.rng.bit_generator.state,
            # wall-clock times are left out so identical runs give identical bytes
            "stage_reports": [{k: v for k, v in r.items() if k != "seconds"} for r in self.stage_reports],
            "num_frames": self.T,
        }
        save_checkpoint(path, self.registry, self.adam, meta, extra={"faces": self.faces.astype("<i8")})

    @classmethod
    def resume(cls, path, data: MeasurementSet, out_dir=None, history=None) -> "Reconstructor":
        reg, adam, meta, extra = load_checkpoint(path, with_extra=True)
        cfg = PipelineConfig.from_dict(meta["config"])
        self = cls(data, cfg, out_dir)
        if meta["num_frames"] != self.T:
            raise InputError(f"checkpoint has {meta['num_frames']} frames, data has {self.T}")
        self.registry = reg
        self.adam = adam or AdamState()
        self.faces = extra["faces"].astype(np.int64)
        self.stage_index = meta["stage_index"]
        self.step_in_stage = meta["step_in_stage"]
        self.global_step = meta["global_step"]
        self.rng.bit_generator.state = meta["rng"]
        self.stage_reports = meta["stage_reports"]
        if history is not None:
            self.history = [r for r in history if r["step"] < self.global_step]
        return self

    def write_losses(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
            wr.writeheader()
            for r in self.history:
                wr.writerow({k: r.get(k, "") for k in LOSS_COLUMNS})

    # -- outputs -----------------------------------------------------------

    def result(self) -> Result:
        with torch.no_grad():
            pose = self._posers()
            obj, cam = [], []
            for t in range(self.T):
                vo, vc = pose(t)
                obj.append(vo.numpy().copy())
                cam.append(vc.numpy().copy())
            intr = [Intrinsics(K.focal.detach().clone(), K.principal_point.detach().clone())
                    for K in (self.intrinsics(t) for t in range(self.T))]
        reg = self.registry
        model = self.skinning_model()
        if isinstance(model, SkinningModel):
            model = model.detach()
        elif isinstance(model, FreeSkinning):
            model = FreeSkinning(model.logits.detach().clone())
        mesh = Mesh(reg["rest"].detach().numpy().copy(), self.faces, reg["colors"].detach().numpy().copy())
        N, B = mesh.num_vertices, self.stage.bones
        report = {
            "stages": self.stage_reports, "steps": self.global_step,
            "vertices": N, "bones": B, "frames": self.T,
            "unknowns_registry": reg.num_unknowns(),
            "unknowns_model": parameter_count(N, B, self.T),
            "nonfinite_gradients": self.adam.nonfinite_total,
        }
        return Result(mesh, self.faces, model, obj, cam, intr, self.cfg.working_size, report)


def export_result(result: Result, out_dir, measurement_size: int | None = None) -> None:
    """Rest mesh, per-frame camera-frame meshes, cameras and report."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    save_obj(result.mesh, out / "rest.obj")
    for t, v in enumerate(result.camera_vertices):
        save_obj(result.mesh, out / "frames" / f"{t:05d}.obj", vertices=v)
    size = measurement_size or result.working_size
    cams = [{"focal": float(K.focal), "principal_point": [float(x) for x in K.principal_point]}
            for K in result.intrinsics_at(size)]
    (out / "cameras.json").write_text(json.dumps({"image_size": size, "frames": cams}, indent=1))
    (out / "report.json").write_text(json.dumps(result.report, indent=1, default=float))


def run_full(data: MeasurementSet, config: PipelineConfig | None = None, out_dir=None) -> Result:
    """Run the whole schedule; with ``out_dir`` also write checkpoints, losses and meshes."""
    rec = Reconstructor(data, config, out_dir).run()
    res = rec.result()
    if out_dir is not None:
        rec.write_losses(Path(out_dir) / "losses.csv")
        export_result(res, out_dir, data.size[1])
    return res
