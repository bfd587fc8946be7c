"""``kvedit`` command line.

Every subcommand validates its flags before doing any work, writes outputs
under temporary names and renames them only on success. Failures print one
JSON line to stderr and exit 1 (bad input) or 2 (internal failure).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import math
import os
import shutil
import sys
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from . import experiments
from .denoiser import Denoiser
from .gradcheck import run_suite
from .kvinv import CPAttnConfig, DivergenceError, EditConfig, KVConfigError, TuneConfig, edit, invert_trace, sample, tune_all
from .numerics import configure_determinism
from .persistence import (
    FormatError,
    load_checkpoint,
    load_psi,
    places_from_text,
    read_image,
    save_checkpoint,
    save_psi,
    to_uint8,
    write_image,
)
from .scheduler import NoiseSchedule, make_schedule
from .toyworld import VOCAB, PromptError, gen_dataset, parse_prompt, pose_classify, pose_scores, psnr
from .toyworld.metrics import MASK_THRESHOLD, NoObjectError, identity_features, identity_score, object_pixels
from .toyworld.train import (
    LOSS_WEIGHTINGS,
    TrainConfig,
    TrainingError,
    embed_prompt,
    init_model,
    null_embedding,
    train_denoiser,
)
from .toyworld.world import Sample

log = logging.getLogger("kvedit")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    """Bad flags, missing files, malformed inputs."""


USER_ERRORS = (UserError, PromptError, FormatError, KVConfigError, FileNotFoundError, IsADirectoryError, NotADirectoryError)


def _fail(code: int, kind: str, message: str) -> int:
    line = json.dumps({"status": "error", "exit": code, "kind": kind, "message": message}, sort_keys=True)
    print(line.replace("\n", " "), file=sys.stderr)
    return code


# -- flag types: reject, never clamp ------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not (math.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not (math.isfinite(v) and v >= 0):
        raise argparse.ArgumentTypeError(f"must be a non-negative finite number, got {text}")
    return v


def _guidance(text: str) -> float:
    v = float(text)
    if not (math.isfinite(v) and v >= 1):
        raise argparse.ArgumentTypeError(f"guidance scale must be >= 1, got {text}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _places(text: str):
    try:
        return places_from_text(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _prompt(text: str):
    try:
        return parse_prompt(text)
    except PromptError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which means internal error here
        sys.exit(_fail(EXIT_USER, "UsageError", f"{self.prog}: {message}"))


# -- atomic outputs --------------------------------------------------------------


class Staging:
    """Collects outputs under temporary names; ``commit`` renames them all."""

    def __init__(self) -> None:
        self.files: list[tuple[Path, Path]] = []
        self.dirs: list[tuple[Path, Path]] = []

    def file(self, final: str | Path) -> Path:
        final = Path(final)
        tmp = final.with_name(f".{final.stem}.partial{final.suffix}")
        self.files.append((final, tmp))
        return tmp

    def directory(self, final: str | Path) -> Path:
        final = Path(final)
        if final.exists() and (not final.is_dir() or any(final.iterdir())):
            raise UserError(f"output directory {final} exists and is not empty")
        tmp = final.with_name(f".{final.name}.partial")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        self.dirs.append((final, tmp))
        return tmp

    def commit(self) -> None:
        for final, tmp in self.files:
            os.replace(tmp, final)
        for final, tmp in self.dirs:
            if final.exists():
                final.rmdir()
            os.replace(tmp, final)

    def discard(self) -> None:
        for _, tmp in self.files:
            tmp.unlink(missing_ok=True)
        for _, tmp in self.dirs:
            shutil.rmtree(tmp, ignore_errors=True)


@contextlib.contextmanager
def staged() -> Iterator[Staging]:
    st = Staging()
    try:
        yield st
    except BaseException:
        st.discard()
        raise
    st.commit()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _jsonable(x: float | None) -> float | None:
    return None if x is None or not math.isfinite(x) else x


# -- shared loading ----------------------------------------------------------------


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"no such file: {p}")
    return p


def _out_parent(path: str) -> Path:
    p = Path(path)
    if not p.parent.is_dir():
        raise UserError(f"output directory {p.parent} does not exist")
    return p


def _load_model(path: str, steps: int | None = None) -> tuple[Denoiser, NoiseSchedule, dict]:
    model, sched, header = load_checkpoint(_existing(path))
    if steps is not None and steps != len(sched.ddim_steps):
        sched = make_schedule(sched.T_train, steps, sched.beta_start, sched.beta_end)
    return model, sched, header


def _load_source(path: str) -> torch.Tensor:
    img = read_image(_existing(path))
    if img.shape != (16, 16, 3):
        raise UserError(f"{path}: expected a 16x16 RGB image, got {img.shape}")
    return torch.from_numpy(img)


def _pixel_digest(img) -> str:
    return hashlib.sha256(to_uint8(np.asarray(img)).tobytes()).hexdigest()


# -- subcommands -------------------------------------------------------------------


def cmd_gen_data(args) -> dict:
    with staged() as st:
        root = st.directory(args.out)
        (root / "images").mkdir()
        with open(root / "manifest.jsonl", "w") as fh:
            for i, s in enumerate(gen_dataset(args.count, args.seed)):
                name = f"images/{i:06d}.png"
                write_image(root / name, s.image)
                row = {"file": name, "prompt": s.tokens.text(), "scene": s.spec.to_json()}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return {"out": str(args.out), "count": args.count}


def _read_dataset(root: Path) -> list[Sample]:
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise UserError(f"{root} has no manifest.jsonl; create it with gen-data")
    data = []
    for n, line in enumerate(manifest.read_text().splitlines(), 1):
        try:
            row = json.loads(line)
            img = read_image(_existing(str(root / row["file"])))
            tokens = parse_prompt(row["prompt"])
        except (KeyError, json.JSONDecodeError) as exc:
            raise UserError(f"{manifest}:{n}: malformed entry ({exc})") from None
        # Training sees images and prompt tokens only; scene labels stay in the manifest.
        data.append(Sample(img, tokens, None))
    if not data:
        raise UserError(f"{manifest} is empty")
    return data


def cmd_train(args) -> dict:
    out = _out_parent(args.out)
    data = _read_dataset(Path(args.data))
    sched = make_schedule()
    model = init_model(args.seed, sched)
    cfg = TrainConfig(
        epochs=args.epochs, batch=args.batch, lr=args.lr, seed=args.seed, loss_weighting=args.loss_weighting
    )
    result = train_denoiser(data, model, sched, cfg)
    extra = {"train_config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}, "dataset_size": len(data)}
    with staged() as st:
        checksum = save_checkpoint(st.file(out), model, sched, list(VOCAB), args.seed, result.summary(), extra)
    return {"out": str(out), "checksum": checksum, "loss": result.summary()}


def cmd_sample(args) -> dict:
    out = _out_parent(args.out)
    model, sched, _ = _load_model(args.model, args.steps)
    z_T = torch.randn(16, 16, 3, generator=torch.Generator().manual_seed(args.seed))
    img = sample(z_T, embed_prompt(model, args.prompt), null_embedding(model), model, sched, args.cfg)
    with staged() as st:
        write_image(st.file(out), img.numpy())
    pose, score = pose_classify(img.numpy())
    return {"out": str(out), "prompt": args.prompt.text(), "pose": pose, "pose_score": score, "guidance": args.cfg}


def cmd_tune(args) -> dict:
    out = _out_parent(args.out)
    report_dir = Path(args.report_dir) if args.report_dir else out.parent
    if not report_dir.is_dir():
        raise UserError(f"report directory {report_dir} does not exist")
    tune_cfg = TuneConfig(
        eta=args.eta, max_iters=args.iters, tol=args.tol, guidance=args.cfg, inversion_guidance=args.inversion_cfg
    )
    z0 = _load_source(args.image)
    model, sched, _ = _load_model(args.model, args.steps)
    c_s = embed_prompt(model, args.prompt)
    c_u = null_embedding(model)
    trace = invert_trace(z0, c_s, c_u, model, sched, tune_cfg.inversion_guidance)
    psi, report = tune_all(trace, tune_cfg, model, sched)
    untuned = sample(trace.latents[-1], c_s, c_u, model, sched, args.cfg)
    final = {s.step: s.final_loss for s in report.steps}
    src = {"source_prompt": args.prompt.text(), "source_digest": _pixel_digest(z0.numpy())}
    summary = {
        "tune_config": tune_cfg.to_json(),
        "guidance": args.cfg,
        "source_prompt": args.prompt.text(),
        "recon_mse": report.recon_mse,
        "untuned_recon_mse": float(((untuned - z0) ** 2).mean()),
        "recon_psnr": _jsonable(psnr(z0.numpy(), report.reconstruction.numpy())),
        "untuned_recon_psnr": _jsonable(psnr(z0.numpy(), untuned.numpy())),
        "steps": [s.to_json() for s in report.steps],
    }
    with staged() as st:
        save_psi(st.file(out), psi, model, tune_cfg, None, final, src)
        write_image(st.file(report_dir / "reconstruction.png"), report.reconstruction.numpy())
        _write_json(st.file(report_dir / "report.json"), summary)
    return {"out": str(out), "recon_mse": report.recon_mse, "recon_psnr": summary["recon_psnr"]}


def cmd_edit(args) -> dict:
    out = _out_parent(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_suffix(".json")
    cpattn = CPAttnConfig(args.places, args.start_fraction)
    z0 = _load_source(args.image)
    model, sched, _ = _load_model(args.model)
    psi, header = load_psi(_existing(args.psi), model)
    if tuple(header["ddim_steps"]) != sched.ddim_steps:
        sched = make_schedule(sched.T_train, len(header["ddim_steps"]), sched.beta_start, sched.beta_end)
    if header.get("source_digest") not in (None, _pixel_digest(z0.numpy())):
        raise UserError(f"{args.image} is not the image {args.psi} was tuned on")
    inv_guidance = header["tune_config"]["inversion_guidance"]
    c_s = embed_prompt(model, parse_prompt(header["source_prompt"]))
    c_u = null_embedding(model)
    trace = invert_trace(z0, c_s, c_u, model, sched, inv_guidance)
    cfg = EditConfig(embed_prompt(model, args.target_prompt), c_u, args.cfg, cpattn)
    img = edit(trace, psi, cfg, model, sched).numpy()
    pose, pose_score = pose_classify(img)
    score = identity_score(z0.numpy(), img)
    target_pose = args.target_prompt.words()[-1]
    metrics = {
        "guidance": args.cfg,
        "cpattn": cpattn.to_json(),
        "source_prompt": header["source_prompt"],
        "target_prompt": args.target_prompt.text(),
        "pose": pose,
        "pose_score": pose_score,
        "pose_ok": pose == target_pose,
        "identity_score": _jsonable(score),
        "object_found": math.isfinite(score),
        "psnr": _jsonable(psnr(z0.numpy(), img)),
    }
    with staged() as st:
        write_image(st.file(out), img)
        _write_json(st.file(metrics_path), metrics)
    return {"out": str(out), "metrics": str(metrics_path), **{k: metrics[k] for k in ("pose", "identity_score", "psnr")}}


def cmd_ablate(args) -> dict:
    tune_cfg = TuneConfig(
        eta=args.eta, max_iters=args.iters, tol=args.tol, guidance=args.cfg, inversion_guidance=args.inversion_cfg
    )
    grid = [g.strip() for g in args.grid.split(";" if args.mode == "places" else ",") if g.strip()] if args.grid else None
    if grid is None:
        grid = ["0.1", "0.5", "0.9"] if args.mode == "steps" else ["encoder", "middle", "decoder", "all"]
    try:
        if args.mode == "steps":
            for g in grid:
                _fraction(g)
        cells = experiments.ablation_cells(args.mode, grid, args.places, args.start_fraction)
    except (argparse.ArgumentTypeError, ValueError) as exc:
        raise UserError(f"bad --grid: {exc}") from None
    model, sched, _ = _load_model(args.model, args.steps)
    with staged() as st:
        root = st.directory(args.out)
        for k in range(len(cells)):
            (root / f"cell{k}").mkdir()
        (root / "sources").mkdir()

        def save(k, i, case, img):
            write_image(root / f"cell{k}" / f"{i:04d}.png", img)
            if k == 0:
                write_image(root / "sources" / f"{i:04d}.png", case.image.numpy())

        summaries, details = experiments.run_ablation(
            cells, args.count, model, sched, tune_cfg, args.cfg, args.first, save
        )
        with open(root / "results.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["cell", "pose_ok", "identity_score", "psnr"], lineterminator="\r\n")
            w.writeheader()
            for s in summaries:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in s.row().items()})
        with open(root / "details.csv", "w", newline="") as fh:
            cols = ["cell", "source", "target_pose", "pose", "pose_ok", "identity_score", "identity_preserved", "psnr"]
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\r\n")
            w.writeheader()
            w.writerows(details)
        _write_json(
            root / "cells.json",
            {
                "mode": args.mode,
                "cells": [{"label": label, **cp.to_json()} for label, cp in cells],
                "no_object": {s.cell: s.no_object for s in summaries},
                "tune_config": tune_cfg.to_json(),
                "guidance": args.cfg,
            },
        )
    return {"out": str(args.out), "cells": [s.row() for s in summaries]}


def cmd_metrics(args) -> dict:
    src = read_image(_existing(args.source))
    edited = read_image(_existing(args.edited))
    if src.shape != edited.shape:
        raise UserError(f"image shapes differ: {src.shape} vs {edited.shape}")
    pose, score = pose_classify(edited)
    ident = identity_score(src, edited)
    out = {
        "pose": pose,
        "pose_score": score,
        "pose_scores": pose_scores(edited),
        "identity_score": _jsonable(ident),
        "object_found": math.isfinite(ident),
        "psnr": _jsonable(psnr(src, edited)),
    }
    for name, img in (("source", src), ("edited", edited)):
        try:
            f = identity_features(img)
            out[f"{name}_features"] = {"mean_color": list(f.mean_color), "stripe_contrast": f.stripe_contrast}
        except NoObjectError:
            out[f"{name}_features"] = None
        if args.mask:
            out[f"{name}_mask"] = ["".join("#" if v else "." for v in row) for row in object_pixels(img)]
    if args.mask:
        out["mask_threshold"] = MASK_THRESHOLD
    return out


def cmd_grad_check(args) -> dict:
    model, sched, _ = _load_model(args.model)
    errors = run_suite(model, sched, samples_per_tensor=args.samples, seed=args.seed)
    worst = max(errors, key=errors.get)
    result = {
        "max_relative_error": errors[worst],
        "worst": worst,
        "threshold": args.threshold,
        "passed": errors[worst] < args.threshold,
        "weights_max": max(v for k, v in errors.items() if k.startswith("weights/")),
        "psi_max": max(v for k, v in errors.items() if k.startswith("psi/")),
        "errors": errors,
    }
    if not result["passed"]:
        raise GradientCheckFailed(f"max relative error {errors[worst]:.3e} at {worst} exceeds {args.threshold:g}")
    return result


class GradientCheckFailed(RuntimeError):
    pass


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kvedit", description="KV inversion for pose edits on a toy diffusion model")
    p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a labelled toy dataset")
    g.add_argument("--count", type=_positive_int, required=True)
    g.add_argument("--seed", type=_nonneg_int, required=True)
    g.add_argument("--out", required=True, help="output directory (must not exist or be empty)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=_positive_int, required=True)
    t.add_argument("--seed", type=_nonneg_int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=_positive_float, default=TrainConfig.lr)
    t.add_argument("--batch", type=_positive_int, default=TrainConfig.batch)
    t.add_argument("--loss-weighting", choices=LOSS_WEIGHTINGS, default=TrainConfig.loss_weighting)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="guided DDIM sampling from a prompt")
    s.add_argument("--model", required=True)
    s.add_argument("--prompt", type=_prompt, required=True, help='e.g. "red striped arrow up"')
    s.add_argument("--steps", type=_positive_int, default=50)
    s.add_argument("--cfg", type=_guidance, default=7.5)
    s.add_argument("--seed", type=_nonneg_int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    tu = sub.add_parser("tune", help="invert an image and tune KV parameters")
    tu.add_argument("--model", required=True)
    tu.add_argument("--image", required=True)
    tu.add_argument("--prompt", type=_prompt, required=True, help="prompt describing the source image")
    tu.add_argument("--out", required=True, help="psi file")
    tu.add_argument("--eta", type=_positive_float, default=TuneConfig.eta)
    tu.add_argument("--iters", type=_nonneg_int, default=TuneConfig.max_iters)
    tu.add_argument("--tol", type=_nonneg_float, default=TuneConfig.tol)
    tu.add_argument("--cfg", type=_guidance, default=7.5)
    tu.add_argument(
        "--inversion-cfg", type=_guidance, default=TuneConfig.inversion_guidance, help="guidance of the DDIM inversion"
    )
    tu.add_argument("--steps", type=_positive_int, default=50)
    tu.add_argument("--report-dir", help="where reconstruction.png and report.json go (default: next to --out)")
    tu.set_defaults(func=cmd_tune)

    e = sub.add_parser("edit", help="edit a tuned image with a target prompt")
    e.add_argument("--model", required=True)
    e.add_argument("--image", required=True)
    e.add_argument("--psi", required=True)
    e.add_argument("--target-prompt", type=_prompt, required=True)
    e.add_argument("--places", type=_places, default=_places("decoder"), help="comma list of encoder,middle,decoder or all")
    e.add_argument("--start-fraction", type=_fraction, default=0.4)
    e.add_argument("--cfg", type=_guidance, default=7.5)
    e.add_argument("--out", required=True)
    e.add_argument("--metrics", help="metrics JSON path (default: --out with .json suffix)")
    e.set_defaults(func=cmd_edit)

    a = sub.add_parser("ablate", help="grid over CP-attn start fraction or places")
    a.add_argument("--model", required=True)
    a.add_argument("--mode", choices=["steps", "places"], required=True)
    a.add_argument(
        "--grid",
        help='steps: comma list of start fractions (default "0.1,0.5,0.9"); '
        'places: semicolon list of place sets (default "encoder;middle;decoder;all")',
    )
    a.add_argument("--count", type=_positive_int, default=10, help="number of source images")
    a.add_argument("--first", type=_nonneg_int, default=0, help="index of the first evaluation scene")
    a.add_argument("--places", default="decoder", help="fixed places for --mode steps")
    a.add_argument("--start-fraction", type=_fraction, default=0.4, help="fixed start fraction for --mode places")
    a.add_argument("--eta", type=_positive_float, default=TuneConfig.eta)
    a.add_argument("--iters", type=_nonneg_int, default=TuneConfig.max_iters)
    a.add_argument("--tol", type=_nonneg_float, default=TuneConfig.tol)
    a.add_argument("--cfg", type=_guidance, default=7.5)
    a.add_argument(
        "--inversion-cfg", type=_guidance, default=TuneConfig.inversion_guidance, help="guidance of the DDIM inversion"
    )
    a.add_argument("--steps", type=_positive_int, default=50)
    a.add_argument("--out", required=True, help="output directory (must not exist or be empty)")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("metrics", help="pose, identity and PSNR of an edit against its source")
    m.add_argument("--source", required=True)
    m.add_argument("--edited", required=True)
    m.add_argument("--mask", action="store_true", help="include the object masks")
    m.set_defaults(func=cmd_metrics)

    gc = sub.add_parser("grad-check", help="finite-difference audit of denoiser and psi gradients")
    gc.add_argument("--model", required=True)
    gc.add_argument("--samples", type=_positive_int, default=6, help="probed entries per tensor")
    gc.add_argument("--seed", type=_nonneg_int, default=0)
    gc.add_argument("--threshold", type=_positive_float, default=1e-4)
    gc.set_defaults(func=cmd_grad_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    configure_determinism()
    try:
        result = args.func(args)
    except USER_ERRORS as exc:
        return _fail(EXIT_USER, type(exc).__name__, str(exc))
    except (DivergenceError, TrainingError, GradientCheckFailed) as exc:
        return _fail(EXIT_INTERNAL, type(exc).__name__, str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.debug("internal error", exc_info=True)
        return _fail(EXIT_INTERNAL, type(exc).__name__, str(exc))
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
