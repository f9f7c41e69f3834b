"""On-disk formats: model directories, calibration sets, prune masks.

Model directory: ``manifest.json`` (format version "1": blocks, layer
specs, shapes, frozen flags, loss kind) plus one raw tensor file per
tensor — ``<layer>.bin`` for the weight and ``<layer>.bias.bin`` for the
optional bias — little-endian IEEE-754 float32, row-major, no header.
In memory everything is float64; files quantize to float32.

Calibration file: ``<name>.json`` index listing per-sample input/target
shapes next to one ``.bin`` holding the tensors concatenated in sample
order with the same binary convention.

Masks: ``<layer>.mask.bin`` packed bits (row-major, MSB-first within a
byte) plus a ``masks.json`` index.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import DimensionError, ModelFormatError
from .model import Block, CalibrationSet, LayerSpec, ModelGraph

FORMAT_VERSION = "1"

_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")


def _check_name(name: str) -> str:
    if not _NAME_RE.match(name):
        raise ModelFormatError(f"name {name!r} is not filesystem-safe")
    return name


def _write_f32(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype=np.float64).astype("<f4").tofile(path)


def _read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise ModelFormatError(f"missing tensor file {path}")
    raw = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if raw.size != expected:
        raise ModelFormatError(
            f"{path}: {raw.size} floats on disk, expected {expected}"
        )
    if not np.all(np.isfinite(raw)):
        raise ModelFormatError(f"{path}: non-finite values on disk")
    return raw.astype(np.float64).reshape(shape)


# -- model directories ------------------------------------------------------


def save_model(model: ModelGraph, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "head": model.head, "blocks": []}
    for block in model.blocks:
        entry = {"name": _check_name(block.name), "layers": []}
        for layer in block.layers:
            _check_name(layer.name)
            entry["layers"].append(
                {
                    "name": layer.name,
                    "kind": layer.kind,
                    "shape": list(layer.weight.shape),
                    "activation": layer.activation,
                    "frozen": layer.frozen,
                    "has_bias": layer.bias is not None,
                }
            )
            _write_f32(directory / f"{layer.name}.bin", layer.weight)
            if layer.bias is not None:
                _write_f32(directory / f"{layer.name}.bias.bin", layer.bias)
        manifest["blocks"].append(entry)
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return directory


def load_model(directory: str | Path) -> ModelGraph:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ModelFormatError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"manifest.json is not valid JSON: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {manifest.get('format_version')!r}"
        )
    blocks = []
    for bentry in manifest["blocks"]:
        layers = []
        for lentry in bentry["layers"]:
            shape = tuple(int(s) for s in lentry["shape"])
            if len(shape) != 2:
                raise ModelFormatError(f"layer {lentry['name']!r}: shape must be 2-D")
            weight = _read_f32(directory / f"{lentry['name']}.bin", shape)
            bias = None
            if lentry.get("has_bias"):
                bias = _read_f32(
                    directory / f"{lentry['name']}.bias.bin", (shape[0],)
                )
            layers.append(
                LayerSpec(
                    name=lentry["name"],
                    kind=lentry["kind"],
                    weight=weight,
                    bias=bias,
                    activation=lentry.get("activation", "identity"),
                    frozen=bool(lentry.get("frozen", False)),
                )
            )
        blocks.append(Block(name=bentry["name"], layers=layers))
    return ModelGraph(blocks=blocks, head=manifest["head"])


# -- calibration sets --------------------------------------------------------


def save_calibration(batch: CalibrationSet, json_path: str | Path) -> Path:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    data_name = json_path.stem + ".bin"
    index = {
        "format_version": FORMAT_VERSION,
        "data_file": data_name,
        "samples": [
            {"input": list(x.shape), "target": list(y.shape)}
            for x, y in batch.samples
        ],
    }
    with open(json_path.parent / data_name, "wb") as f:
        for x, y in batch.samples:
            f.write(np.ascontiguousarray(x, dtype=np.float64).astype("<f4").tobytes())
            f.write(np.ascontiguousarray(y, dtype=np.float64).astype("<f4").tobytes())
    json_path.write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return json_path


def load_calibration(json_path: str | Path) -> CalibrationSet:
    json_path = Path(json_path)
    if not json_path.exists():
        raise ModelFormatError(f"no calibration index at {json_path}")
    index = json.loads(json_path.read_text(encoding="utf-8"))
    if index.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError("unsupported calibration format version")
    data = np.fromfile(json_path.parent / index["data_file"], dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise ModelFormatError(f"{index['data_file']}: non-finite values on disk")
    samples = []
    offset = 0
    for entry in index["samples"]:
        xs = tuple(int(v) for v in entry["input"])
        ys = tuple(int(v) for v in entry["target"])
        nx = int(np.prod(xs)) if xs else 1
        ny = int(np.prod(ys)) if ys else 1
        if offset + nx + ny > data.size:
            raise ModelFormatError("calibration data file shorter than its index")
        x = data[offset : offset + nx].astype(np.float64).reshape(xs)
        offset += nx
        y = data[offset : offset + ny].astype(np.float64).reshape(ys)
        offset += ny
        samples.append((x, y))
    if offset != data.size:
        raise ModelFormatError("calibration data file longer than its index")
    return CalibrationSet(samples)


# -- masks -------------------------------------------------------------------


def save_masks(masks: dict[str, np.ndarray], directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"format_version": FORMAT_VERSION, "bit_order": "msb_first", "layers": {}}
    for name in sorted(masks):
        _check_name(name)
        mask = np.ascontiguousarray(masks[name], dtype=bool)
        if mask.ndim != 2:
            raise DimensionError(f"mask for {name!r} must be 2-D")
        fname = f"{name}.mask.bin"
        np.packbits(mask.reshape(-1)).tofile(directory / fname)
        index["layers"][name] = {
            "shape": list(mask.shape),
            "file": fname,
            "kept": int(mask.sum()),
        }
    (directory / "masks.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return directory


def load_masks(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    index_path = directory / "masks.json"
    if not index_path.exists():
        raise ModelFormatError(f"no masks.json in {directory}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    if index.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError("unsupported mask format version")
    masks = {}
    for name, entry in index["layers"].items():
        shape = tuple(int(v) for v in entry["shape"])
        n = int(np.prod(shape))
        bits = np.fromfile(directory / entry["file"], dtype=np.uint8)
        flat = np.unpackbits(bits)[:n].astype(bool)
        if flat.size != n:
            raise ModelFormatError(f"mask file for {name!r} too short")
        mask = flat.reshape(shape)
        if int(mask.sum()) != int(entry["kept"]):
            raise ModelFormatError(f"mask for {name!r} disagrees with its index")
        masks[name] = mask
    return masks
