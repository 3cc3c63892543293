"""Parameter registry, Adam, frame-pair sampling and checkpoints."""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from lasr.errors import DivergenceError, FormatError, ParameterError

CHECKPOINT_VERSION = 1
DEFAULT_LR = 5e-3

# post-step projections
FREE, QUATERNION, UNIT, UNIT_INTERVAL = "free", "quaternion", "unit", "unit_interval"


@dataclass
class ParamBlock:
    name: str
    value: torch.Tensor
    lr: float = DEFAULT_LR
    frozen: bool = False
    kind: str = FREE

    def __post_init__(self):
        self.value = torch.as_tensor(self.value, dtype=torch.float64).detach().clone().requires_grad_(True)

    @property
    def dof(self) -> int:
        """Degrees of freedom; a unit quaternion has three."""
        n = self.value.numel()
        if self.kind == QUATERNION:
            return n // 4 * 3
        return n


class ParamRegistry:
    """Named parameter blocks with learning-rate groups and freeze flags."""

    def __init__(self):
        self.blocks: dict[str, ParamBlock] = {}

    def add(self, name, value, lr=DEFAULT_LR, kind=FREE, frozen=False) -> ParamBlock:
        block = ParamBlock(name, value, lr=lr, kind=kind, frozen=frozen)
        self.blocks[name] = block
        return block

    def __getitem__(self, name) -> torch.Tensor:
        return self.blocks[name].value

    def __contains__(self, name) -> bool:
        return name in self.blocks

    def set(self, name, value) -> None:
        blk = self.blocks[name]
        blk.value = torch.as_tensor(value, dtype=torch.float64).detach().clone().requires_grad_(True)

    def freeze(self, *names, frozen=True) -> None:
        for n in names:
            if n in self.blocks:
                self.blocks[n].frozen = frozen

    def trainable(self) -> list[ParamBlock]:
        return [b for b in self.blocks.values() if not b.frozen]

    def num_scalars(self, trainable_only=False) -> int:
        blocks = self.trainable() if trainable_only else self.blocks.values()
        return sum(b.value.numel() for b in blocks)

    def num_unknowns(self, trainable_only=False) -> int:
        blocks = self.trainable() if trainable_only else self.blocks.values()
        return sum(b.dof for b in blocks)

    def zero_grad(self) -> None:
        for b in self.blocks.values():
            b.value.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: b.value.detach().numpy().astype("<f8") for n, b in self.blocks.items()}


@dataclass
class AdamState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    bad_steps: int = 0
    nonfinite_total: int = 0


def _project(block: ParamBlock) -> None:
    with torch.no_grad():
        x = block.value
        if block.kind == QUATERNION:
            x.copy_(x / torch.linalg.norm(x, dim=-1, keepdim=True))
        elif block.kind == UNIT:
            x.copy_(x / torch.linalg.norm(x))
        elif block.kind == UNIT_INTERVAL:
            x.clamp_(0.0, 1.0)


def adam_step(registry: ParamRegistry, state: AdamState, gradients: dict | None = None,
              max_bad_fraction: float = 0.1, patience: int = 3, lr_scale: float = 1.0) -> AdamState:
    """One Adam update of every trainable block, then per-kind projections.

    Gradients default to each block's ``.grad``. Non-finite gradient entries
    are zeroed and counted; ``patience`` consecutive steps with more than
    ``max_bad_fraction`` non-finite entries raise DivergenceError.
    ``lr_scale`` multiplies every block's learning rate (for schedules).
    """
    b1, b2 = state.betas
    grads = {}
    bad = total = 0
    for blk in registry.trainable():
        g = gradients.get(blk.name) if gradients is not None else blk.value.grad
        g = torch.zeros_like(blk.value) if g is None else torch.as_tensor(g, dtype=torch.float64).clone()
        finite = torch.isfinite(g)
        bad += int((~finite).sum())
        total += g.numel()
        grads[blk.name] = torch.where(finite, g, torch.zeros_like(g))
    state.nonfinite_total += bad
    if total and bad / total > max_bad_fraction:
        state.bad_steps += 1
        if state.bad_steps >= patience:
            raise DivergenceError("persistent non-finite gradients",
                                  {"step": state.step, "nonfinite": bad, "total": total})
    else:
        state.bad_steps = 0
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    with torch.no_grad():
        for blk in registry.trainable():
            g = grads[blk.name]
            m = state.m.get(blk.name)
            v = state.v.get(blk.name)
            if m is None or m.shape != g.shape:
                m = torch.zeros_like(g)
                v = torch.zeros_like(g)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            state.m[blk.name], state.v[blk.name] = m, v
            blk.value -= lr_scale * blk.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps)
            _project(blk)
    return state


def sample_batch(T: int, batch: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Uniformly drawn consecutive frame pairs (t, t+1), with repetition."""
    if T < 2:
        raise ParameterError("need at least two frames to sample pairs")
    ts = rng.integers(0, T - 1, size=batch)
    return [(int(t), int(t) + 1) for t in ts]


def steps_per_epoch(T: int, batch: int) -> int:
    return max(1, math.ceil((T - 1) / batch))


class TemporalBasis:
    """Per-frame vectors expressed as base + A phi(t), phi = (1, sin, cos, ...) of the frame index.

    Optional smooth alternative to a free per-frame table: the learnable
    block is the coefficient matrix A (K x D).
    """

    def __init__(self, num_frames: int, num_features: int = 8):
        self.T = num_frames
        self.K = num_features
        t = torch.arange(num_frames, dtype=torch.float64) / max(num_frames - 1, 1)
        feats = [torch.ones_like(t)]  # constant offset
        k = 1
        while len(feats) < num_features:
            feats.append(torch.sin(math.pi * k * t))
            feats.append(torch.cos(math.pi * k * t))
            k += 1
        self.phi = torch.stack(feats[:num_features], dim=1)  # T x K

    def expand(self, base: torch.Tensor, coeffs: torch.Tensor) -> torch.Tensor:
        flat = base.reshape(self.T, -1) + self.phi @ coeffs
        return flat.reshape(base.shape)


# ---------------------------------------------------------------------------
# checkpoints: npz with explicit little-endian float64 / int64 arrays

def save_checkpoint(path, registry: ParamRegistry, state: AdamState | None = None, meta: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write parameters, Adam moments, JSON metadata and extra arrays (e.g. faces)."""
    arrays = {f"extra/{k}": np.asarray(v) for k, v in (extra or {}).items()}
    for name, arr in registry.state_arrays().items():
        arrays[f"param/{name}"] = arr
    info = {"version": CHECKPOINT_VERSION, "blocks": {}, "meta": meta or {}}
    for name, blk in registry.blocks.items():
        info["blocks"][name] = {"lr": blk.lr, "frozen": blk.frozen, "kind": blk.kind}
    if state is not None:
        info["adam"] = {"betas": list(state.betas), "eps": state.eps, "step": state.step,
                        "bad_steps": state.bad_steps, "nonfinite_total": state.nonfinite_total}
        for name in state.m:
            arrays[f"adam_m/{name}"] = state.m[name].numpy().astype("<f8")
            arrays[f"adam_v/{name}"] = state.v[name].numpy().astype("<f8")
    arrays["info"] = np.frombuffer(json.dumps(info, sort_keys=True).encode(), dtype=np.uint8)
    _write_npz(Path(path), arrays)


def _write_npz(path: Path, arrays: dict) -> None:
    # fixed zip timestamps so identical state gives identical bytes
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            zi = zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(zi, buf.getvalue())


def load_checkpoint(path, with_extra: bool = False):
    """Return (registry, adam_state, meta), plus the extra arrays if ``with_extra``."""
    try:
        data = np.load(path, allow_pickle=False)
        info = json.loads(bytes(data["info"]).decode())
    except Exception as exc:  # noqa: BLE001 - any decode failure is a format error
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if info.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {info.get('version')}")
    reg = ParamRegistry()
    for name, spec in info["blocks"].items():
        reg.add(name, torch.as_tensor(data[f"param/{name}"].astype(np.float64)),
                lr=spec["lr"], kind=spec["kind"], frozen=spec["frozen"])
    state = None
    if "adam" in info:
        a = info["adam"]
        state = AdamState(betas=tuple(a["betas"]), eps=a["eps"], step=a["step"],
                          bad_steps=a["bad_steps"], nonfinite_total=a["nonfinite_total"])
        for key in data.files:
            if key.startswith("adam_m/"):
                n = key[len("adam_m/"):]
                state.m[n] = torch.as_tensor(data[key].astype(np.float64))
                state.v[n] = torch.as_tensor(data[f"adam_v/{n}"].astype(np.float64))
    if with_extra:
        extra = {k[len("extra/"):]: data[k] for k in data.files if k.startswith("extra/")}
        return reg, state, info["meta"], extra
    return reg, state, info["meta"]
