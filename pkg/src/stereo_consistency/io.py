"""Disparity file formats (PFM, KITTI 16-bit PNG), corpus manifests and array archives."""

from __future__ import annotations

import io
import json
import re
import zipfile
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .data import StereoSample

KITTI_SCALE = 256.0
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class DisparityFormatError(ValueError):
    """Malformed disparity file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _read_header_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise DisparityFormatError("unterminated PFM header line", pos)
    return buf[pos:end].decode("latin-1").strip(), end + 1


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    kind, pos = _read_header_line(buf, 0)
    if kind not in ("Pf", "PF"):
        raise DisparityFormatError(f"bad PFM magic {kind!r}", 0)
    channels = 1 if kind == "Pf" else 3
    dims_at = pos
    dims, pos = _read_header_line(buf, pos)
    m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not m:
        raise DisparityFormatError(f"bad PFM dimensions {dims!r}", dims_at)
    width, height = int(m.group(1)), int(m.group(2))
    scale_at = pos
    scale_txt, pos = _read_header_line(buf, pos)
    try:
        scale = float(scale_txt)
    except ValueError:
        raise DisparityFormatError(f"bad PFM scale {scale_txt!r}", scale_at) from None
    if scale == 0.0:
        raise DisparityFormatError("PFM scale must be nonzero", scale_at)
    endian = "<" if scale < 0 else ">"
    count = width * height * channels
    if len(buf) - pos < 4 * count:
        raise DisparityFormatError(
            f"PFM payload holds {len(buf) - pos} bytes, expected {4 * count}", pos
        )
    data = np.frombuffer(buf, dtype=endian + "f4", count=count, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    # rows are stored bottom-to-top
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_pfm(grid: np.ndarray, path) -> None:
    arr = np.asarray(grid, dtype=np.float32)
    if arr.ndim == 2:
        kind = "Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        kind = "PF"
    else:
        raise ValueError(f"PFM needs an HxW or HxWx3 grid, got shape {arr.shape}")
    h, w = arr.shape[:2]
    header = f"{kind}\n{w} {h}\n-1.0\n".encode("latin-1")
    payload = np.ascontiguousarray(np.flipud(arr)).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def _check_png16(buf: bytes) -> None:
    if buf[:8] != _PNG_SIGNATURE:
        raise DisparityFormatError("not a PNG file", 0)
    if buf[12:16] != b"IHDR":
        raise DisparityFormatError("PNG is missing its IHDR chunk", 12)
    bit_depth, color_type = buf[24], buf[25]
    if bit_depth != 16:
        raise DisparityFormatError(f"expected 16-bit PNG, got {bit_depth}-bit", 24)
    if color_type != 0:
        raise DisparityFormatError(f"expected grayscale PNG, got color type {color_type}", 25)


def read_kitti_png(path) -> np.ndarray:
    """Decode a KITTI disparity PNG. Stored zeros come back as NaN (invalid)."""
    buf = Path(path).read_bytes()
    _check_png16(buf)
    raw = np.asarray(Image.open(io.BytesIO(buf)), dtype=np.float64)
    disp = raw / KITTI_SCALE
    disp[raw == 0] = np.nan
    return disp.astype(np.float32)


def write_kitti_png(grid: np.ndarray, path) -> None:
    arr = np.asarray(grid, dtype=np.float64)
    finite = np.isfinite(arr)
    if np.any(arr[finite] < 0) or np.any(arr[finite] >= 256):
        raise ValueError("KITTI PNG disparities must lie in [0, 256)")
    stored = np.zeros(arr.shape, dtype=np.uint16)
    stored[finite] = np.minimum(np.floor(arr[finite] * KITTI_SCALE + 0.5), 65535).astype(np.uint16)
    Image.fromarray(stored).save(path, format="PNG")


def read_disparity(path, format: str | None = None) -> np.ndarray:
    fmt = format or _guess_format(path)
    if fmt == "pfm":
        return read_pfm(path)
    if fmt == "kitti-png16":
        return read_kitti_png(path)
    raise ValueError(f"unknown disparity format {fmt!r}")


def write_disparity(grid: np.ndarray, path, format: str | None = None) -> None:
    fmt = format or _guess_format(path)
    if fmt == "pfm":
        write_pfm(grid, path)
    elif fmt == "kitti-png16":
        write_kitti_png(grid, path)
    else:
        raise ValueError(f"unknown disparity format {fmt!r}")


def _guess_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return "pfm"
    if suffix == ".png":
        return "kitti-png16"
    raise ValueError(f"cannot infer disparity format from {path}")


def _write_rgb(img: np.ndarray, path: Path) -> None:
    arr = np.clip(np.floor(np.asarray(img) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def _read_rgb(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr


MANIFEST_NAME = "manifest.tsv"
MANIFEST_COLUMNS = ("sample_id", "left", "right", "disp_left", "disp_right", "occlusion", "style_tag")


def write_corpus(samples: Iterable[StereoSample], root) -> Path:
    """Write samples as PNG images + PFM disparities and a tab-separated manifest.

    Images are quantized to 8 bits; disparities are stored losslessly.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for s in samples:
        sid = s.sample_id
        files = {
            "left": f"{sid}_left.png",
            "right": f"{sid}_right.png",
            "disp_left": f"{sid}_disp_left.pfm",
            "disp_right": f"{sid}_disp_right.pfm" if s.disparity_right is not None else "-",
            "occlusion": f"{sid}_occ.png" if s.occlusion_left is not None else "-",
        }
        _write_rgb(s.left_image, root / files["left"])
        _write_rgb(s.right_image, root / files["right"])
        write_pfm(s.disparity_left, root / files["disp_left"])
        if s.disparity_right is not None:
            write_pfm(s.disparity_right, root / files["disp_right"])
        if s.occlusion_left is not None:
            Image.fromarray(s.occlusion_left.astype(np.uint8) * 255).save(root / files["occlusion"])
        lines.append("\t".join([sid, *files.values(), s.style_tag]))
    path = root / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_corpus(root) -> list[StereoSample]:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    rows = path.read_text(encoding="utf-8").splitlines()
    if not rows or tuple(rows[0].split("\t")) != MANIFEST_COLUMNS:
        raise ValueError(f"{path}: unexpected manifest header")
    samples = []
    for line in rows[1:]:
        if not line.strip():
            continue
        sid, left, right, dl, dr, occ, tag = line.split("\t")
        samples.append(
            StereoSample(
                left_image=_read_rgb(root / left),
                right_image=_read_rgb(root / right),
                disparity_left=read_pfm(root / dl),
                disparity_right=None if dr == "-" else read_pfm(root / dr),
                occlusion_left=None if occ == "-" else np.asarray(Image.open(root / occ)) > 0,
                sample_id=sid,
                style_tag=tag,
            )
        )
    return samples


_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_archive(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Named-array archive with a JSON manifest; byte-stable for equal inputs.

    ``numpy.savez`` stamps the current time into the zip headers, so the
    archive is assembled by hand with a fixed timestamp.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            bio = io.BytesIO()
            np.save(bio, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH), bio.getvalue())


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, manifest

