"""Single-file containers for model checkpoints and tuned KV parameters, plus image IO.

Container layout (all integers little-endian uint32)::

    magic (8 bytes) | header length | header JSON (UTF-8)
    | tensor count | blocks...

    block = name length | name (UTF-8) | rank | extents[rank] | float32 LE data

The header JSON is written with sorted keys and compact separators so a
load/save cycle reproduces it byte for byte.
"""
from __future__ import annotations

import hashlib
import io
import json
import re
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .denoiser import BlockPlace, Denoiser, DenoiserConfig
from .kvinv import KVEntry, KVParams, SCALARS, CPAttnConfig, TuneConfig
from .scheduler import NoiseSchedule, make_schedule

CKPT_MAGIC = b"KVCKPT\x00\x01"
PSI_MAGIC = b"KVPSI\x00\x00\x01"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """File is not one of ours or is malformed."""


class VersionMismatchError(FormatError):
    pass


class ChecksumMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


def dump_header(header: Mapping) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def encode_tensors(tensors: Mapping[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_tensors(data: bytes) -> dict[str, torch.Tensor]:
    r = _Reader(data)
    out: dict[str, torch.Tensor] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after tensor blocks")
    return out


def write_container(path: str | Path, magic: bytes, header: Mapping, tensors: Mapping[str, torch.Tensor]) -> None:
    head = dump_header(header)
    body = encode_tensors(tensors)
    Path(path).write_bytes(magic + struct.pack("<I", len(head)) + head + body)


def read_container(path: str | Path, magic: bytes) -> tuple[dict, bytes, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[: len(magic)] != magic:
        if len(data) < len(magic):
            raise TruncatedPayloadError(f"{path}: shorter than the file magic")
        raise FormatError(f"{path}: wrong file magic")
    r = _Reader(data)
    r.pos = len(magic)
    raw_header = r.take(r.u32())
    header = json.loads(raw_header)
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    payload = data[r.pos :]
    return header, raw_header, decode_tensors(payload)


def model_tensors(model: Denoiser) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items()}


def model_checksum(model: Denoiser) -> str:
    return hashlib.sha256(encode_tensors(model_tensors(model))).hexdigest()


def save_checkpoint(
    path: str | Path,
    model: Denoiser,
    sched: NoiseSchedule,
    vocab: list[str],
    seed: int,
    loss_summary: Mapping | None = None,
    extra: Mapping | None = None,
) -> str:
    """Write the model; returns its payload checksum."""
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "denoiser": model.cfg.to_json(),
        "schedule": sched.params(),
        "vocab": list(vocab),
        "seed": seed,
        "loss_summary": dict(loss_summary or {}),
        **dict(extra or {}),
    }
    write_container(path, CKPT_MAGIC, header, model_tensors(model))
    return model_checksum(model)


def load_checkpoint(path: str | Path) -> tuple[Denoiser, NoiseSchedule, dict]:
    header, _, tensors = read_container(path, CKPT_MAGIC)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a model checkpoint")
    cfg = DenoiserConfig.from_json(header["denoiser"])
    sp = header["schedule"]
    sched = make_schedule(sp["T_train"], sp["ddim_count"], sp["beta_start"], sp["beta_end"])
    model = Denoiser(cfg, alpha_bar=sched.alpha_bar)
    expected = set(model.state_dict())
    if set(tensors) != expected:
        raise FormatError(f"{path}: tensor names differ from the model layout")
    model.load_state_dict(tensors)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, sched, header


def psi_tensors(psi: KVParams) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    for (site, step), entry in sorted(psi.entries.items()):
        for name, t in entry.named().items():
            out[f"{site}/{step}/{name}"] = t
        if (site, step) in psi.cache:
            K, V = psi.cache[(site, step)]
            out[f"{site}/{step}/cache_K"] = K
            out[f"{site}/{step}/cache_V"] = V
    return out


def save_psi(
    path: str | Path,
    psi: KVParams,
    model: Denoiser,
    tune_cfg: TuneConfig | None = None,
    cpattn: CPAttnConfig | None = None,
    step_losses: Mapping[int, float] | None = None,
    extra: Mapping | None = None,
) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "psi",
        "model_checksum": model_checksum(model),
        "sites": list(psi.sites),
        "ddim_steps": list(psi.steps),
        "tune_config": tune_cfg.to_json() if tune_cfg else None,
        "cpattn": cpattn.to_json() if cpattn else None,
        "final_losses": {str(k): v for k, v in (step_losses or {}).items()},
        **dict(extra or {}),
    }
    write_container(path, PSI_MAGIC, header, psi_tensors(psi))


def load_psi(path: str | Path, model: Denoiser | None = None) -> tuple[KVParams, dict]:
    """Load psi; when ``model`` is given its checksum must match the one recorded at tuning."""
    header, _, tensors = read_container(path, PSI_MAGIC)
    if header.get("kind") != "psi":
        raise FormatError(f"{path}: not a psi file")
    if model is not None and header["model_checksum"] != model_checksum(model):
        raise ChecksumMismatchError(f"{path}: tuned against a different model")
    sites = tuple(header["sites"])
    steps = tuple(header["ddim_steps"])
    entries = {}
    cache = {}
    for site in sites:
        for step in steps:
            key = f"{site}/{step}/"
            try:
                entries[(site, step)] = KVEntry(*(tensors[key + n] for n in ("K_hat", "V_hat", *SCALARS)))
            except KeyError as exc:
                raise FormatError(f"{path}: missing tensor {exc.args[0]}") from None
            if key + "cache_K" in tensors:
                cache[(site, step)] = (tensors[key + "cache_K"], tensors[key + "cache_V"])
    if len(tensors) != 6 * len(entries) + 2 * len(cache):
        raise FormatError(f"{path}: orphan tensors outside the site x step grid")
    return KVParams(sites, steps, entries, cache), header


def to_uint8(img) -> np.ndarray:
    """[-1, 1] float image to uint8 via ``round((x + 1) / 2 * 255)``."""
    a = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint((a + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(a: np.ndarray) -> np.ndarray:
    return (a.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def write_image(path: str | Path, img) -> None:
    """PNG by default; ``.ppm`` writes binary P6 without Pillow."""
    path = Path(path)
    data = to_uint8(img)
    if path.suffix.lower() == ".ppm":
        h, w, _ = data.shape
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())
        return
    from PIL import Image

    Image.fromarray(data, mode="RGB").save(path, format="PNG", optimize=False)


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        raw = path.read_bytes()
        m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", raw)
        if m is None:
            raise FormatError(f"{path}: unsupported PPM")
        w, h = int(m.group(1)), int(m.group(2))
        pix = np.frombuffer(raw[m.end() : m.end() + w * h * 3], dtype=np.uint8)
        if pix.size != w * h * 3:
            raise TruncatedPayloadError(f"{path}: PPM pixel data truncated")
        return from_uint8(pix.reshape(h, w, 3))
    from PIL import Image

    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def places_from_text(text: str) -> frozenset[BlockPlace]:
    if text == "all":
        return frozenset(BlockPlace)
    try:
        return frozenset(BlockPlace(p.strip()) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ValueError(f"unknown place in {text!r}; use encoder, middle, decoder or all") from exc
