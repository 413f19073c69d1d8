"""File formats: images in and out, checkpoints, raw guidance maps.

Checkpoints and raw maps use small little-endian binary formats described in
the respective docstrings.  Round trips preserve every float bit; that is a
tested guarantee, not an aspiration.  Image decoding goes through OpenCV and
accepts 8/16-bit PNG and binary PPM.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import (CheckpointVersionError, ContractError, DecodeError,
                     DimensionError)
from .losses import AdamState
from .model import SsgNet
from .tensor import Tensor

_CKPT_MAGIC = b"SSGN"
_CKPT_VERSION = 1
_MAPS_MAGIC = b"SSGM"
_DTYPE_CODES = {0: np.float32, 1: np.float64, 2: np.int64}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
             np.dtype(np.int64): 2}
_IMAGE_EXTS = (".png", ".ppm")


# -- images -------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Decode an 8/16-bit PNG or binary PPM into (3, H, W) float32 in [0, 1].

    Grayscale images are replicated across the three channels; an alpha
    channel, if present, is dropped.
    """
    path = Path(path)
    if path.suffix.lower() not in _IMAGE_EXTS:
        raise DecodeError(f"unsupported image extension {path.suffix!r} "
                          f"(expected one of {_IMAGE_EXTS})")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DecodeError(f"could not decode image {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DecodeError(f"unsupported sample type {raw.dtype} in {path}")
    if raw.ndim == 2:
        rgb = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.ndim == 3 and raw.shape[2] in (3, 4):
        rgb = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB if raw.shape[2] == 4
                           else cv2.COLOR_BGR2RGB)
    else:
        raise DecodeError(f"unsupported channel layout {raw.shape} in {path}")
    img = rgb.astype(np.float32) / np.float32(scale)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def save_image(path, image: np.ndarray) -> None:
    """Write a (3, H, W) array in [0, 1] as an 8-bit PNG."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"image must be (3, H, W), got {img.shape}")
    u8 = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    bgr = cv2.cvtColor(u8.transpose(1, 2, 0), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), bgr):
        raise DecodeError(f"could not write image {path}")


def bilinear_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resample of a (3, H, W) image; output stays in [0, 1]."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"image must be (3, H, W), got {img.shape}")
    if height < 1 or width < 1:
        raise ContractError("target size must be positive")
    out = cv2.resize(img.transpose(1, 2, 0), (width, height),
                     interpolation=cv2.INTER_LINEAR)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0).transpose(2, 0, 1))


def center_crop(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Central (height, width) window of a (3, H, W) image, no resampling."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"image must be (3, H, W), got {img.shape}")
    _, h, w = img.shape
    if height > h or width > w:
        raise ContractError(
            f"cannot center-crop {h}x{w} to {height}x{width}; "
            "use resize-bilinear for upscaling"
        )
    y0 = (h - height) // 2
    x0 = (w - width) // 2
    return np.ascontiguousarray(img[:, y0:y0 + height, x0:x0 + width])


_CROP_MODES = ("resize-bilinear", "center-crop")


@dataclass(frozen=True)
class DatasetSpec:
    """A training image collection: where it lives and how to shape it.

    ``files`` are paths relative to ``root``; every decoded image comes out
    3-channel float32 in [0, 1] at resolution x resolution, either resampled
    (resize-bilinear) or cut from the image center (center-crop).
    """

    root: str
    files: tuple
    resolution: int
    crop_mode: str = "resize-bilinear"

    def __post_init__(self):
        if not self.files:
            raise ContractError("dataset file list is empty")
        if self.resolution < 1:
            raise ContractError(f"resolution must be >= 1, got {self.resolution}")
        if self.crop_mode not in _CROP_MODES:
            raise ContractError(
                f"crop_mode must be one of {_CROP_MODES}, got {self.crop_mode!r}"
            )

    def paths(self) -> list:
        return [Path(self.root) / f for f in self.files]


def dataset_from_dir(root, resolution: int,
                     crop_mode: str = "resize-bilinear") -> DatasetSpec:
    """Spec covering every PNG/PPM directly under ``root``, sorted by name."""
    rootp = Path(root)
    if not rootp.is_dir():
        raise ContractError(f"dataset root {root} is not a directory")
    files = sorted(p.name for p in rootp.iterdir()
                   if p.suffix.lower() in _IMAGE_EXTS and p.is_file())
    if not files:
        raise ContractError(f"no PNG or PPM images under {root}")
    return DatasetSpec(str(rootp), tuple(files), resolution, crop_mode)


def load_dataset(spec: DatasetSpec) -> list:
    """Decode every image in the spec to a (3, R, R) float32 array."""
    images = []
    for p in spec.paths():
        img = load_image(p)
        if spec.crop_mode == "resize-bilinear":
            img = bilinear_resize(img, spec.resolution, spec.resolution)
        else:
            img = center_crop(img, spec.resolution, spec.resolution)
        images.append(img)
    return images


# -- checkpoints --------------------------------------------------------------
#
# Layout (all integers little-endian):
#   b"SSGN" | u32 version | u32 n_model | n_model entries
#   u8 has_optimizer | if set: u32 n_opt | n_opt entries
# entry:
#   u16 name_len | name (utf-8) | u8 dtype_code | u8 ndim | ndim * u32 dims
#   | C-order little-endian payload
# dtype codes: 0 = float32, 1 = float64, 2 = int64.


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_FOR:
        raise ContractError(f"entry {name!r} has unsupported dtype {arr.dtype}")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DecodeError(f"checkpoint truncated while reading {what}")
    return buf


def _read_entry(fh):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "entry name length"))
    name = _read_exact(fh, name_len, "entry name").decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "entry header"))
    if code not in _DTYPE_CODES:
        raise DecodeError(f"entry {name!r} has unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "entry dims"))
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = _read_exact(fh, count * dtype.itemsize, f"entry {name!r} payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return name, arr.astype(arr.dtype.newbyteorder("="), copy=True)


def save_checkpoint(path, model_entries: dict, opt_entries: dict | None = None,
                    version: int = _CKPT_VERSION) -> None:
    """Write named arrays; entry order follows the dicts, so identical dicts
    produce byte-identical files."""
    if version != _CKPT_VERSION:
        raise CheckpointVersionError(f"cannot write version {version}")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", version, len(model_entries)))
        for name, arr in model_entries.items():
            _write_entry(fh, name, np.asarray(arr))
        fh.write(struct.pack("<B", 1 if opt_entries is not None else 0))
        if opt_entries is not None:
            fh.write(struct.pack("<I", len(opt_entries)))
            for name, arr in opt_entries.items():
                _write_entry(fh, name, np.asarray(arr))


def load_checkpoint(path):
    """Read back ``(model_entries, opt_entries_or_None)``."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _CKPT_MAGIC:
            raise DecodeError(f"not a checkpoint file: bad magic {magic!r}")
        version, n_model = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != _CKPT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {version}"
            )
        model = {}
        for _ in range(n_model):
            name, arr = _read_entry(fh)
            model[name] = arr
        (has_opt,) = struct.unpack("<B", _read_exact(fh, 1, "optimizer flag"))
        opt = None
        if has_opt:
            (n_opt,) = struct.unpack("<I", _read_exact(fh, 4, "optimizer count"))
            opt = {}
            for _ in range(n_opt):
                name, arr = _read_entry(fh)
                opt[name] = arr
        trailing = fh.read(1)
        if trailing:
            raise DecodeError("checkpoint has trailing bytes")
    return model, opt


def checkpoint_from_model(net: SsgNet, adam: AdamState | None = None):
    """Entry dicts for ``save_checkpoint``; exact round trip guaranteed."""
    model = {
        "meta.n_eigenmaps": np.int64(net.n_eigenmaps),
        "meta.widths": np.asarray(net.widths, dtype=np.int64),
    }
    for name, p in net.parameters():
        model[name] = p.data
    opt = None
    if adam is not None:
        opt = {
            "adam.step": np.int64(adam.step),
            "adam.lr": np.float64(adam.lr),
            "adam.beta1": np.float64(adam.beta1),
            "adam.beta2": np.float64(adam.beta2),
            "adam.eps": np.float64(adam.eps),
        }
        for name, arr in adam.m.items():
            opt[f"adam.m.{name}"] = arr
        for name, arr in adam.v.items():
            opt[f"adam.v.{name}"] = arr
    return model, opt


def model_from_checkpoint(model_entries: dict) -> SsgNet:
    """Rebuild a network from checkpoint entries, shape-checked."""
    try:
        n_eigen = int(model_entries["meta.n_eigenmaps"].item())
        widths = tuple(int(v) for v in model_entries["meta.widths"])
    except KeyError as exc:
        raise DecodeError(f"checkpoint is missing {exc.args[0]!r}") from None
    net = SsgNet.build(n_eigenmaps=n_eigen, widths=widths, seed=0)
    for name, p in net.parameters():
        if name not in model_entries:
            raise DecodeError(f"checkpoint is missing parameter {name!r}")
        arr = model_entries[name]
        if arr.shape != p.shape:
            raise DecodeError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, "
                f"expected {p.shape}"
            )
        p.data = np.ascontiguousarray(arr)
    return net


def adam_from_checkpoint(opt_entries: dict, net: SsgNet) -> AdamState:
    """Rebuild optimizer state matching ``net``'s parameters."""
    params = net.parameters()
    state = AdamState.init(
        params,
        lr=opt_entries["adam.lr"].item(),
        beta1=opt_entries["adam.beta1"].item(),
        beta2=opt_entries["adam.beta2"].item(),
        eps=opt_entries["adam.eps"].item(),
    )
    state.step = int(opt_entries["adam.step"].item())
    for name, p in params:
        for slot, store in (("m", state.m), ("v", state.v)):
            key = f"adam.{slot}.{name}"
            if key not in opt_entries:
                raise DecodeError(f"checkpoint is missing {key!r}")
            arr = opt_entries[key]
            if arr.shape != p.shape:
                raise DecodeError(f"checkpoint entry {key!r} has wrong shape")
            store[name] = np.ascontiguousarray(arr)
    return state


# -- raw guidance maps --------------------------------------------------------
#
# Layout: b"SSGM" | u32 n_maps | u32 height | u32 width | float32 LE payload
# in (map, row, column) order.  Header is exactly 16 bytes.


def save_raw_maps(path, maps: np.ndarray) -> None:
    arr = np.ascontiguousarray(maps, dtype=np.float32)
    if arr.ndim != 3:
        raise DimensionError(f"maps must be (n, H, W), got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_MAPS_MAGIC)
        fh.write(struct.pack("<III", *arr.shape))
        fh.write(arr.astype("<f4", copy=False).tobytes())


def load_raw_maps(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAPS_MAGIC:
            raise DecodeError(f"not a raw map file: bad magic {magic!r}")
        n, h, w = struct.unpack("<III", _read_exact(fh, 12, "map header"))
        payload = fh.read()
    expect = 4 * n * h * w
    if len(payload) != expect:
        raise DecodeError(
            f"raw map payload is {len(payload)} bytes, expected {expect}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, h, w)
    return arr.astype(np.float32, copy=True)


def save_maps(maps: np.ndarray, out_dir, basename: str = "map",
              formats=("png8", "raw")) -> list:
    """Write guidance maps as 8-bit grayscale PNGs and/or one raw file.

    PNG values are ``round(255 * clamp(map, 0, 1))``.  Returns the paths
    written, PNGs first.
    """
    arr = np.asarray(maps, dtype=np.float32)
    if arr.ndim != 3:
        raise DimensionError(f"maps must be (n, H, W), got {arr.shape}")
    for f in formats:
        if f not in ("png8", "raw"):
            raise ContractError(f"unknown map format {f!r}")
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "png8" in formats:
        for i in range(arr.shape[0]):
            u8 = np.rint(np.clip(arr[i], 0.0, 1.0) * 255.0).astype(np.uint8)
            p = out_dir / f"{basename}_{i:02d}.png"
            if not cv2.imwrite(str(p), u8):
                raise DecodeError(f"could not write {p}")
            written.append(p)
    if "raw" in formats:
        p = out_dir / f"{basename}.ssgm"
        save_raw_maps(p, arr)
        written.append(p)
    return written


def write_trace_csv(trace, path) -> None:
    """Loss trace as delimited text: step, both components, total.

    Wall-clock timings stay on the in-memory rows; the file holds only
    quantities that are reproducible run to run.
    """
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("step,l_eigen,l_spatial,l_ssg\n")
        for row in trace:
            fh.write(f"{row.step},{row.l_eigen:.9g},{row.l_spatial:.9g},"
                     f"{row.l_ssg:.9g}\n")


def batched(image: np.ndarray) -> Tensor:
    """Wrap a single (3, H, W) image as a (1, 3, H, W) tensor."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"image must be (3, H, W), got {img.shape}")
    return Tensor(img[None])
