"""Binary checkpoint container and model (de)serialization.

Layout (all integers little-endian):

    bytes 0-3   magic "TMOE"
    u32         version (currently 1)
    u32         header byte length, then that many UTF-8 bytes of
                key=value lines (LF-terminated): variant, dims, seed,
                leaf ordering, placement statistics
    u32         number of parameter blocks
    per block:  u16 name length, name UTF-8,
                u64 payload byte length, u32 CRC32 of the payload,
                payload (float64 little-endian values)

Saving is deterministic: fixed key order, fixed block order, no timestamps,
so equal models produce byte-identical files.
"""
from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np

from .cascade import CascadeModel, build_cascade_model
from .errors import DataError
from .moe import ModelDims
from .pose import PoseModel, make_pose_model

MAGIC = b"TMOE"
VERSION = 1
LEAF_ORDER = "left-to-right"

_DIMS_KEYS = ("landmarks", "patch_size", "features_per_landmark", "image_size",
              "reg_hidden", "reg_experts", "reg_tree_depth",
              "rep_experts", "rep_tree_depth", "baseline_hidden")


def _layers_str(spec) -> str:
    return ",".join(f"{c}:{k}:{s}" for c, k, s in spec)


def _layers_parse(text: str):
    try:
        return tuple(tuple(int(v) for v in part.split(":")) for part in text.split(","))
    except ValueError:
        raise DataError(f"malformed layer spec {text!r}") from None


def _write_container(path, header: dict[str, str],
                     blocks: list[tuple[str, np.ndarray]]) -> None:
    out = bytearray()
    out += MAGIC
    out += VERSION.to_bytes(4, "little")
    htext = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    out += len(htext).to_bytes(4, "little")
    out += htext
    out += len(blocks).to_bytes(4, "little")
    for name, arr in blocks:
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        nb = name.encode("utf-8")
        out += len(nb).to_bytes(2, "little")
        out += nb
        out += len(payload).to_bytes(8, "little")
        out += (zlib.crc32(payload) & 0xFFFFFFFF).to_bytes(4, "little")
        out += payload
    Path(path).write_bytes(bytes(out))


def _read_container(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    pos = 0

    def need(n: int, section: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise DataError(f"{path}: truncated while reading {section}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    magic = need(4, "magic")
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint (magic {magic!r}, expected {MAGIC!r})")
    version = int.from_bytes(need(4, "version"), "little")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    hlen = int.from_bytes(need(4, "header length"), "little")
    htext = need(hlen, "header").decode("utf-8")
    header: dict[str, str] = {}
    for lineno, line in enumerate(htext.splitlines(), start=1):
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}: header line {lineno} is not key=value")
        key, _, value = line.partition("=")
        header[key] = value
    nblocks = int.from_bytes(need(4, "block count"), "little")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(nblocks):
        nlen = int.from_bytes(need(2, "block name length"), "little")
        name = need(nlen, "block name").decode("utf-8")
        plen = int.from_bytes(need(8, f"length of block '{name}'"), "little")
        crc = int.from_bytes(need(4, f"checksum of block '{name}'"), "little")
        payload = need(plen, f"payload of block '{name}'")
        if (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
            raise DataError(f"{path}: checksum mismatch in block '{name}'")
        blocks[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes after the last block")
    return header, blocks


def _require(header: dict[str, str], key: str, path) -> str:
    if key not in header:
        raise DataError(f"{path}: header is missing required key '{key}'")
    return header[key]


def _dims_to_header(dims: ModelDims) -> dict[str, str]:
    out = {k: str(getattr(dims, k)) for k in _DIMS_KEYS}
    out["single_cnn"] = _layers_str(dims.single_cnn)
    out["expert_cnn"] = _layers_str(dims.expert_cnn)
    return out


def _dims_from_header(header: dict[str, str], path) -> ModelDims:
    try:
        kwargs = {k: int(_require(header, k, path)) for k in _DIMS_KEYS}
    except ValueError as e:
        raise DataError(f"{path}: malformed dims in header: {e}") from None
    return ModelDims(single_cnn=_layers_parse(_require(header, "single_cnn", path)),
                     expert_cnn=_layers_parse(_require(header, "expert_cnn", path)),
                     **kwargs)


def _fill_parameters(named, blocks: dict[str, np.ndarray], path,
                     expected_extra: set[str]) -> None:
    seen = set()
    for name, tensor in named:
        if name not in blocks:
            raise DataError(f"{path}: missing parameter block '{name}'")
        values = blocks[name]
        if values.size != tensor.data.size:
            raise DataError(
                f"{path}: block '{name}' holds {values.size} values, parameter "
                f"expects shape {tensor.data.shape}")
        tensor.data = values.reshape(tensor.data.shape).copy()
        seen.add(name)
    stray = set(blocks) - seen - expected_extra
    if stray:
        raise DataError(f"{path}: unexpected blocks: {', '.join(sorted(stray))}")


# ------------------------------------------------------------ cascade model


def checkpoint_save(model: CascadeModel, path,
                    extra: dict[str, str] | None = None) -> None:
    """Serialize a trained cascade (pose net included when attached)."""
    if model.mean_shape is None or model.mean_box_scale is None:
        raise ValueError("model has no placement statistics; train it before saving")
    header: dict[str, str] = {
        "variant": model.variant,
        "seed": str(model.seed),
        "stages": str(model.num_stages),
        "pose_mode": model.pose_mode,
    }
    header.update(_dims_to_header(model.dims))
    header["leaf_order"] = LEAF_ORDER
    header["mean_box_scale"] = f"{model.mean_box_scale:.17g}"
    for key in sorted(extra or {}):
        header[f"x_{key}"] = str(extra[key])
    blocks: list[tuple[str, np.ndarray]] = [("mean_shape", model.mean_shape)]
    blocks.extend((name, t.data) for name, t in model.named_parameters())
    if model.pose_mode == "model":
        if model.pose_model is None:
            raise ValueError("pose_mode is 'model' but no pose model is attached")
        blocks.extend((name, t.data)
                      for name, t in model.pose_model.named_parameters())
    _write_container(path, header, blocks)


def checkpoint_load(path) -> tuple[CascadeModel, dict[str, str]]:
    """Rebuild a cascade from a checkpoint; returns (model, header)."""
    header, blocks = _read_container(path)
    variant = _require(header, "variant", path)
    if variant == "pose":
        raise DataError(f"{path}: this is a pose checkpoint, not a cascade")
    dims = _dims_from_header(header, path)
    if header.get("leaf_order", LEAF_ORDER) != LEAF_ORDER:
        raise DataError(f"{path}: unknown leaf ordering {header.get('leaf_order')!r}")
    try:
        seed = int(_require(header, "seed", path))
        stages = int(_require(header, "stages", path))
        mean_box = float(_require(header, "mean_box_scale", path))
    except ValueError as e:
        raise DataError(f"{path}: malformed header value: {e}") from None
    pose_mode = _require(header, "pose_mode", path)
    pose_model = make_pose_model(np.random.default_rng(0)) if pose_mode == "model" else None
    model = build_cascade_model(variant, dims, stages, np.random.default_rng(0),
                                pose_mode=pose_mode, pose_model=pose_model, seed=seed)
    if "mean_shape" not in blocks:
        raise DataError(f"{path}: missing parameter block 'mean_shape'")
    ms = blocks["mean_shape"]
    if ms.size != 2 * dims.landmarks:
        raise DataError(
            f"{path}: mean_shape holds {ms.size} values, expected {2 * dims.landmarks}")
    model.mean_shape = ms.copy()
    model.mean_box_scale = mean_box
    named = list(model.named_parameters())
    if pose_model is not None:
        named.extend(pose_model.named_parameters())
    _fill_parameters(named, blocks, path, expected_extra={"mean_shape"})
    return model, header


def extra_from_header(header: dict[str, str]) -> dict[str, str]:
    """Recover the caller-supplied extra entries from a loaded header."""
    return {k[2:]: v for k, v in header.items() if k.startswith("x_")}


# --------------------------------------------------------------- pose model


def pose_checkpoint_save(model: PoseModel, path, seed: int) -> None:
    header = {"variant": "pose", "seed": str(seed), "leaf_order": LEAF_ORDER}
    blocks = [(name, t.data) for name, t in model.named_parameters()]
    _write_container(path, header, blocks)


def pose_checkpoint_load(path) -> PoseModel:
    header, blocks = _read_container(path)
    if _require(header, "variant", path) != "pose":
        raise DataError(
            f"{path}: variant {header.get('variant')!r} is not a pose checkpoint")
    model = make_pose_model(np.random.default_rng(0))
    _fill_parameters(model.named_parameters(), blocks, path, expected_extra=set())
    return model
