"""Source preparation, pose edits and ablation grids on the toy world.

Shared by the command line and the acceptance suite so both measure the
same thing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .denoiser import Denoiser
from .kvinv import (
    CPAttnConfig,
    DiffTrace,
    EditConfig,
    KVParams,
    TuneConfig,
    TuneReport,
    edit,
    invert_trace,
    sample,
    tune_all,
)
from .numerics import mse_loss
from .persistence import places_from_text
from .scheduler import NoiseSchedule
from .toyworld import (
    POSES,
    SceneSpec,
    identity_preserved,
    identity_score,
    pose_classify,
    psnr,
    render_scene,
    sample_scene,
    tokens_for,
)
from .toyworld.train import embed_prompt, null_embedding

# Identity features live in [0, 1]^4, so no two objects are further apart
# than 2. A missing object counts as that far when scores are averaged.
MAX_IDENTITY_DISTANCE = 2.0

# Evaluation scenes are drawn from seeds far from anything a training run uses.
EVAL_SEED_BASE = 1_000_000


@dataclass
class SourceCase:
    spec: SceneSpec
    image: torch.Tensor
    trace: DiffTrace
    psi: KVParams
    report: TuneReport
    untuned: torch.Tensor

    @property
    def tuned_psnr(self) -> float:
        return psnr(self.image.numpy(), self.report.reconstruction.numpy())

    @property
    def untuned_mse(self) -> float:
        return float(mse_loss(self.untuned, self.image))


def eval_scene(index: int) -> SceneSpec:
    return sample_scene(EVAL_SEED_BASE + index)


def edit_target(spec: SceneSpec, index: int) -> str:
    """A pose different from the source, cycling through the other three."""
    others = [p for p in POSES if p != spec.pose]
    return others[index % len(others)]


def prepare_case(
    spec: SceneSpec,
    model: Denoiser,
    sched: NoiseSchedule,
    tune_cfg: TuneConfig = TuneConfig(),
    image: torch.Tensor | None = None,
) -> SourceCase:
    """Invert, tune psi, and also reconstruct without psi for comparison."""
    z0 = torch.from_numpy(render_scene(spec)) if image is None else image
    c_s = embed_prompt(model, tokens_for(spec))
    c_u = null_embedding(model)
    trace = invert_trace(z0, c_s, c_u, model, sched, tune_cfg.inversion_guidance)
    psi, report = tune_all(trace, tune_cfg, model, sched)
    untuned = sample(trace.latents[-1], c_s, c_u, model, sched, tune_cfg.guidance)
    return SourceCase(spec, z0, trace, psi, report, untuned)


def edit_metrics(spec: SceneSpec, source, edited, target_pose: str | None = None) -> dict:
    pose, pose_score = pose_classify(edited)
    score = identity_score(source, edited)
    out = {
        "pose": pose,
        "pose_score": pose_score,
        "identity_score": score if math.isfinite(score) else None,
        "object_found": math.isfinite(score),
        "identity_preserved": identity_preserved(spec, source, edited),
        "psnr": psnr(source, edited),
    }
    if target_pose is not None:
        out["target_pose"] = target_pose
        out["pose_ok"] = pose == target_pose
    return out


def run_edit(
    case: SourceCase,
    target_pose: str,
    model: Denoiser,
    sched: NoiseSchedule,
    cpattn: CPAttnConfig = CPAttnConfig(),
    guidance: float = 7.5,
) -> tuple[np.ndarray, dict]:
    c_t = embed_prompt(model, tokens_for(case.spec.with_pose(target_pose)))
    cfg = EditConfig(c_t, null_embedding(model), guidance, cpattn)
    out = edit(case.trace, case.psi, cfg, model, sched).numpy()
    return out, edit_metrics(case.spec, case.image.numpy(), out, target_pose)


def capped_identity(score: float | None) -> float:
    return MAX_IDENTITY_DISTANCE if score is None else min(score, MAX_IDENTITY_DISTANCE)


def ablation_cells(mode: str, grid: Sequence[str], places: str = "decoder", start_fraction: float = 0.4):
    """``(label, CPAttnConfig)`` per grid value; ``steps`` varies start_fraction, ``places`` the blocks."""
    if mode == "steps":
        fixed = places_from_text(places)
        return [(f"start_fraction={float(g):g}", CPAttnConfig(fixed, float(g))) for g in grid]
    if mode == "places":
        return [(f"places={g}", CPAttnConfig(places_from_text(g), start_fraction)) for g in grid]
    raise ValueError(f"unknown ablation mode {mode!r}; use steps or places")


@dataclass
class CellSummary:
    cell: str
    pose_ok: float
    identity_score: float
    psnr: float
    no_object: int

    def row(self) -> dict:
        return {"cell": self.cell, "pose_ok": self.pose_ok, "identity_score": self.identity_score, "psnr": self.psnr}


def summarize(cell: str, metrics: Sequence[dict]) -> CellSummary:
    finite_psnr = [m["psnr"] for m in metrics if math.isfinite(m["psnr"])]
    return CellSummary(
        cell,
        float(np.mean([m["pose_ok"] for m in metrics])),
        float(np.mean([capped_identity(m["identity_score"]) for m in metrics])),
        float(np.mean(finite_psnr)) if finite_psnr else math.inf,
        sum(not m["object_found"] for m in metrics),
    )


def run_ablation(
    cells: Sequence[tuple[str, CPAttnConfig]],
    count: int,
    model: Denoiser,
    sched: NoiseSchedule,
    tune_cfg: TuneConfig = TuneConfig(),
    guidance: float = 7.5,
    first_index: int = 0,
    on_edit=None,
) -> tuple[list[CellSummary], list[dict]]:
    """Tune each source once and edit it under every cell.

    ``on_edit(cell_index, source_index, case, image)`` is called per edit,
    e.g. to write images. Returns per-cell summaries and per-edit rows.
    """
    details: list[dict] = []
    per_cell: list[list[dict]] = [[] for _ in cells]
    for i in range(first_index, first_index + count):
        spec = eval_scene(i)
        case = prepare_case(spec, model, sched, tune_cfg)
        target = edit_target(spec, i)
        for k, (label, cp) in enumerate(cells):
            img, m = run_edit(case, target, model, sched, cp, guidance)
            per_cell[k].append(m)
            details.append({"cell": label, "source": i, **m})
            if on_edit is not None:
                on_edit(k, i, case, img)
    return [summarize(label, ms) for (label, _), ms in zip(cells, per_cell)], details

