"""On-disk formats: PGM masks/heatmaps, CAS1 score files, manifests, reports.

CAS1 layout (all integers little-endian)::

    b"CAS1"
    u32 header_len
    header_len bytes of canonical JSON; required keys "vocabulary",
        "img_h", "img_w"; the rest is provenance (config_hash, layers,
        timestep, space, softmax, head_agg, ...)
    img_h * img_w * r float64 values, pixel-major (row-major over (n, r))
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .conceptattn import SaliencyMap
from .numerics import Rng
from .segeval import SegmentationSample

SCORE_MAGIC = b"CAS1"
MANIFEST_KEYS = ("id", "mask_path")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


# ---------------------------------------------------------------------------
# PGM (P5)
# ---------------------------------------------------------------------------


def write_pgm(path, image) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {image.shape}")
    if image.min(initial=0) < 0 or image.max(initial=0) > 255:
        raise ValueError("PGM values must lie in 0..255")
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.astype(np.uint8).tobytes())


def _pgm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header fields, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    raster = data[pos : pos + w * h * dtype.itemsize]
    if len(raster) != w * h * dtype.itemsize:
        raise ValueError(f"{path}: PGM raster is truncated")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.int64)


def lift_grayscale(pixels, d_model: int, seed: int) -> np.ndarray:
    """Map grayscale pixels to image tokens: ``(g / 255) * scale + shift``.

    ``scale`` and ``shift`` are length-``d_model`` vectors drawn from the
    ``Rng(seed)`` streams ``"lift.scale"`` and ``"lift.shift"``; the result
    has one row per pixel in row-major order.
    """
    g = np.asarray(pixels, dtype=np.float64).reshape(-1, 1) / 255.0
    rng = Rng(seed)
    scale = rng.normal("lift.scale", (1, d_model))
    shift = rng.normal("lift.shift", (1, d_model))
    return g * scale + shift


def display_scale(plane) -> np.ndarray:
    """Min-max stretch to 0..255 for viewing; a flat plane becomes all zeros."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.round((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# CAS1 score files
# ---------------------------------------------------------------------------


def dump_scores(smap: SaliencyMap) -> bytes:
    h, w, r = smap.scores.shape
    header = {**smap.provenance, "vocabulary": list(smap.concepts), "img_h": h, "img_w": w}
    raw = canonical_json(header).encode()
    body = np.ascontiguousarray(smap.scores.reshape(h * w, r), dtype="<f8").tobytes()
    return SCORE_MAGIC + struct.pack("<I", len(raw)) + raw + body


def load_scores(data: bytes) -> SaliencyMap:
    if data[:4] != SCORE_MAGIC:
        raise ValueError("not a CAS1 score file")
    if len(data) < 8:
        raise ValueError("truncated CAS1 score file")
    (header_len,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + header_len])
    for key in ("vocabulary", "img_h", "img_w"):
        if key not in header:
            raise ValueError(f"CAS1 header lacks {key!r}")
    concepts = tuple(header.pop("vocabulary"))
    h, w = int(header.pop("img_h")), int(header.pop("img_w"))
    body = data[8 + header_len :]
    expected = h * w * len(concepts) * 8
    if len(body) != expected:
        raise ValueError(f"CAS1 body has {len(body)} bytes, header implies {expected}")
    scores = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(h, w, len(concepts))
    if not np.all(np.isfinite(scores)):
        raise ValueError("CAS1 scores contain non-finite values")
    return SaliencyMap(scores=scores, concepts=concepts, provenance=header)


def write_scores(path, smap: SaliencyMap) -> None:
    Path(path).write_bytes(dump_scores(smap))


def read_scores(path) -> SaliencyMap:
    return load_scores(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manifests and reports
# ---------------------------------------------------------------------------


def read_manifest(path) -> list[dict]:
    """JSON-lines records; relative paths resolve against the manifest's directory."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        missing = [k for k in MANIFEST_KEYS if k not in rec]
        if missing:
            raise ValueError(f"{path}:{lineno}: record lacks {missing}")
        for key in ("scores_path", "mask_path", "image_path"):
            if rec.get(key) is not None:
                rec[key] = str(path.parent / rec[key])
        rec["id"] = str(rec["id"])
        records.append(rec)
    if not records:
        raise ValueError(f"{path}: manifest is empty")
    return records


def report_json(report) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def _fmt(v):
    return "" if v is None else repr(float(v))


def report_csv(report, label: str = "ConceptAttention") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if report.map is None:
        writer.writerow(["method", "acc", "miou"])
        writer.writerow([label, _fmt(report.acc), _fmt(report.miou)])
    else:
        writer.writerow(["method", "acc", "miou", "map"])
        writer.writerow([label, _fmt(report.acc), _fmt(report.miou), _fmt(report.map)])
    return buf.getvalue()


def manifest_samples(records) -> list[SegmentationSample]:
    """Load scores and masks for each manifest record.

    Failures are re-raised as ``ValueError`` naming the record's id.
    """
    samples = []
    for rec in records:
        sid = rec["id"]
        try:
            if rec.get("scores_path") is None:
                raise ValueError("record has no scores_path")
            smap = read_scores(rec["scores_path"])
            gt = read_pgm(rec["mask_path"])
            samples.append(SegmentationSample(sid, smap, smap.concepts, gt,
                                              target=rec.get("target_concept"),
                                              label_map=rec.get("label_map")))
        except (OSError, ValueError) as exc:
            msg = str(exc)
            if not msg.startswith(f"sample {sid}"):
                msg = f"sample {sid}: {msg}"
            raise ValueError(msg) from exc
    return samples
