"""Dataset, model and feature-cache persistence.

Datasets are directories: a JSON manifest, one little-endian float32
binary per frame for the points (row-major N x C), and one text record per
object for detections and ground truth. Model and cache files are binary
with a JSON header; identical inputs always produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .features import NormConfig
from .geometry import BoundingBox3D
from .net import GaceModel, Layer, Mlp
from .supervision import Detection, GroundTruth
from .trainer import Frame, FrameRecord, TrainingStore

MODEL_MAGIC = b"GACE"
MODEL_FORMAT_VERSION = 1
STORE_MAGIC = b"GACS"
STORE_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DatasetManifest:
    """Dataset-level metadata; channel count applies to every frame file."""

    channels: int
    classes: tuple
    frame_ids: tuple
    format_version: int = DATASET_FORMAT_VERSION
    seed_digest: str | None = None

    def class_id(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise DataFormatError(f"unknown class name {name!r}; manifest "
                                  f"declares {list(self.classes)}") from None


def write_manifest(root, manifest: DatasetManifest) -> None:
    data = {
        "format_version": manifest.format_version,
        "channels": manifest.channels,
        "classes": list(manifest.classes),
        "frame_ids": list(manifest.frame_ids),
    }
    if manifest.seed_digest is not None:
        data["seed_digest"] = manifest.seed_digest
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataFormatError(f"no manifest.json under {root}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"malformed manifest {path}: {exc}") from exc
    if data.get("channels") not in (4, 5):
        raise DataFormatError(f"manifest channel count must be 4 or 5, "
                              f"got {data.get('channels')}")
    return DatasetManifest(
        channels=data["channels"], classes=tuple(data["classes"]),
        frame_ids=tuple(data["frame_ids"]),
        format_version=data.get("format_version", DATASET_FORMAT_VERSION),
        seed_digest=data.get("seed_digest"))


def _format_box(box: BoundingBox3D) -> str:
    return " ".join(repr(float(v)) for v in
                    (box.cx, box.cy, box.cz, box.dx, box.dy, box.dz, box.yaw))


def _object_lines(objects, classes, with_score: bool) -> str:
    lines = []
    for obj in objects:
        name = classes[obj.class_id]
        line = f"{name} {_format_box(obj.box)}"
        if with_score:
            line += f" {repr(float(obj.score))}"
        lines.append(line)
    return "\n".join(lines) + ("\n" if lines else "")


def _parse_objects(text: str, manifest: DatasetManifest, path,
                   with_score: bool) -> list:
    out = []
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        tok = line.split()
        expected = 9 if with_score else 8
        if len(tok) != expected:
            raise DataFormatError(f"{path}:{ln}: expected {expected} fields, "
                                  f"got {len(tok)}")
        class_id = manifest.class_id(tok[0])
        try:
            vals = [float(t) for t in tok[1:]]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{ln}: {exc}") from exc
        box = BoundingBox3D(*vals[:7])
        if with_score:
            out.append(Detection(box, class_id, vals[7]))
        else:
            out.append(GroundTruth(box, class_id))
    return out


def write_frame(root, frame: Frame, classes, write_points: bool = True) -> None:
    root = Path(root)
    if write_points:
        pts = np.ascontiguousarray(np.asarray(frame.points), dtype="<f4")
        (root / "points").mkdir(parents=True, exist_ok=True)
        (root / "points" / f"{frame.frame_id}.bin").write_bytes(pts.tobytes())
    (root / "detections").mkdir(parents=True, exist_ok=True)
    (root / "detections" / f"{frame.frame_id}.txt").write_text(
        _object_lines(frame.detections, classes, with_score=True))
    if frame.ground_truth is not None:
        (root / "ground_truth").mkdir(parents=True, exist_ok=True)
        (root / "ground_truth" / f"{frame.frame_id}.txt").write_text(
            _object_lines(frame.ground_truth, classes, with_score=False))


def read_frame(root, frame_id: str, manifest: DatasetManifest,
               load_points: bool = True) -> Frame:
    root = Path(root)
    c = manifest.channels
    points = np.zeros((0, c), dtype=np.float32)
    pts_path = root / "points" / f"{frame_id}.bin"
    if load_points and pts_path.exists():
        raw = pts_path.read_bytes()
        if len(raw) % (4 * c) != 0:
            offset = len(raw) - (len(raw) % (4 * c))
            raise DataFormatError(
                f"{pts_path}: truncated payload, {len(raw)} bytes is not a "
                f"multiple of {4 * c} (first bad byte at offset {offset})")
        points = np.frombuffer(raw, dtype="<f4").reshape(-1, c).copy()
    dets_path = root / "detections" / f"{frame_id}.txt"
    detections = []
    if dets_path.exists():
        detections = _parse_objects(dets_path.read_text(), manifest,
                                    dets_path, with_score=True)
    gt_path = root / "ground_truth" / f"{frame_id}.txt"
    ground_truth = None
    if gt_path.exists():
        ground_truth = _parse_objects(gt_path.read_text(), manifest,
                                      gt_path, with_score=False)
    return Frame(frame_id, points, detections, ground_truth)


def write_dataset(root, frames, classes, channels: int | None = None,
                  seed_digest: str | None = None,
                  write_points: bool = True) -> DatasetManifest:
    """Write frames plus a manifest; frames may be any iterable."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frame_ids = []
    for frame in frames:
        if channels is None:
            channels = frame.points.shape[1] if frame.points.size else 5
        if frame.points.size and frame.points.shape[1] != channels:
            raise DataFormatError(
                f"frame {frame.frame_id!r} has {frame.points.shape[1]} point "
                f"channels but the dataset declares {channels}")
        write_frame(root, frame, classes, write_points=write_points)
        frame_ids.append(frame.frame_id)
    manifest = DatasetManifest(channels=channels or 5,
                               classes=tuple(classes),
                               frame_ids=tuple(frame_ids),
                               seed_digest=seed_digest)
    write_manifest(root, manifest)
    return manifest


def iter_frames(root, load_points: bool = True):
    """Stream frames of a dataset in manifest order."""
    manifest = read_manifest(root)
    for frame_id in manifest.frame_ids:
        yield read_frame(root, frame_id, manifest, load_points=load_points)


def read_dataset(root, load_points: bool = True):
    manifest = read_manifest(root)
    return manifest, list(iter_frames(root, load_points=load_points))


def write_labels(root, frame_id: str, labeled) -> None:
    """One line per detection: the binary label u and the IoU target v."""
    root = Path(root)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    lines = [f"{l.u} {repr(float(l.v))}" for l in labeled]
    (root / "labels" / f"{frame_id}.txt").write_text(
        "\n".join(lines) + ("\n" if lines else ""))


def read_labels(root, frame_id: str) -> list:
    path = Path(root) / "labels" / f"{frame_id}.txt"
    out = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        tok = line.split()
        if len(tok) != 2:
            raise DataFormatError(f"{path}:{ln}: expected 'u v'")
        out.append((int(tok[0]), float(tok[1])))
    return out


def _model_header(model: GaceModel) -> dict:
    return {
        "version": model.version,
        "seed": model.seed,
        "use_instance": model.use_instance,
        "use_context": model.use_context,
        "detach_context": model.detach_context,
        "norm_config": model.norm_config.to_dict(),
        "feature_mask": [float(v) for v in model.feature_mask],
        "activations": {name: [l.act for l in mlp.layers]
                        for name, mlp in (("h_i", model.h_i),
                                          ("h_c", model.h_c),
                                          ("h_f", model.h_f))},
        "layer_shapes": {name: [[int(l.w.shape[0]), int(l.w.shape[1])]
                                for l in mlp.layers]
                         for name, mlp in (("h_i", model.h_i),
                                           ("h_c", model.h_c),
                                           ("h_f", model.h_f))},
        "dims": {"instance_in": model.h_i.in_dim,
                 "f_i": model.f_i_dim,
                 "neighbor_in": model.h_c.in_dim,
                 "f_c": model.f_c_dim,
                 "fusion_in": model.h_f.in_dim},
    }


def save_model(model: GaceModel, path) -> None:
    """Binary model file: magic, format version, JSON header, then per-layer
    row-major float32 weight and bias payloads. Save/load round trips are
    byte-identical."""
    header = json.dumps(_model_header(model), sort_keys=True,
                        separators=(",", ":")).encode()
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_FORMAT_VERSION,
                                      len(header)), header]
    for mlp in (model.h_i, model.h_c, model.h_f):
        for layer in mlp.layers:
            parts.append(np.ascontiguousarray(layer.w, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(layer.b, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> GaceModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise DataFormatError(f"{path}: not a model file (bad magic)")
    fmt, hlen = struct.unpack_from("<II", raw, 4)
    if fmt != MODEL_FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {fmt}")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: malformed header: {exc}") from exc
    offset = 12 + hlen
    mlps = {}
    for name in ("h_i", "h_c", "h_f"):
        layers = []
        for (out_d, in_d), act in zip(header["layer_shapes"][name],
                                      header["activations"][name]):
            nw, nb = out_d * in_d * 4, out_d * 4
            if offset + nw + nb > len(raw):
                raise DataFormatError(f"{path}: truncated payload at byte "
                                      f"{offset} while reading {name}")
            w = np.frombuffer(raw, dtype="<f4", count=out_d * in_d,
                              offset=offset).reshape(out_d, in_d).copy()
            offset += nw
            b = np.frombuffer(raw, dtype="<f4", count=out_d,
                              offset=offset).copy()
            offset += nb
            layers.append(Layer(w, b, act))
        mlps[name] = Mlp(layers)
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    norm = NormConfig.from_dict(header["norm_config"])
    mask = np.array(header["feature_mask"], dtype=np.float32)
    return GaceModel(mlps["h_i"], mlps["h_c"], mlps["h_f"], norm, mask,
                     use_instance=header["use_instance"],
                     use_context=header["use_context"],
                     detach_context=header["detach_context"],
                     seed=header["seed"], version=header["version"])


_STORE_ARRAYS = (("x", "<f8"), ("u", "<i1"), ("v", "<f8"),
                 ("pair_subject", "<i8"), ("pair_neighbor", "<i8"),
                 ("pair_offsets", "<i8"), ("pair_geo", "<f8"))


def save_store(store: TrainingStore, path) -> None:
    """Feature cache: JSON header (with the NormConfig digest, so config
    changes invalidate it) plus raw per-frame arrays. Deterministic bytes."""
    frames_meta = []
    for rec in store.records:
        frames_meta.append({"frame_id": rec.frame_id, "n": int(rec.n),
                            "p": int(rec.pair_subject.size)})
    header = json.dumps({
        "norm_config": store.norm_config.to_dict(),
        "norm_digest": store.norm_config.digest(),
        "thresholds": list(store.thresholds),
        "frames": frames_meta,
    }, sort_keys=True, separators=(",", ":")).encode()
    parts = [STORE_MAGIC, struct.pack("<II", STORE_FORMAT_VERSION,
                                      len(header)), header]
    for rec in store.records:
        for attr, dt in _STORE_ARRAYS:
            parts.append(np.ascontiguousarray(getattr(rec, attr),
                                              dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_store(path) -> TrainingStore:
    raw = Path(path).read_bytes()
    if raw[:4] != STORE_MAGIC:
        raise DataFormatError(f"{path}: not a feature cache (bad magic)")
    fmt, hlen = struct.unpack_from("<II", raw, 4)
    if fmt != STORE_FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported cache version {fmt}")
    header = json.loads(raw[12:12 + hlen].decode())
    norm = NormConfig.from_dict(header["norm_config"])
    if norm.digest() != header["norm_digest"]:
        raise DataFormatError(f"{path}: normalization digest mismatch")
    offset = 12 + hlen
    d = norm.instance_dim
    g = norm.neighbor_geo_dim
    records = []
    for meta in header["frames"]:
        n, p = meta["n"], meta["p"]
        shapes = {"x": (n, d), "u": (n,), "v": (n,), "pair_subject": (p,),
                  "pair_neighbor": (p,), "pair_offsets": (n + 1,),
                  "pair_geo": (p, g)}
        arrays = {}
        for attr, dt in _STORE_ARRAYS:
            shape = shapes[attr]
            count = int(np.prod(shape)) if shape else 0
            itemsize = np.dtype(dt).itemsize
            if offset + count * itemsize > len(raw):
                raise DataFormatError(f"{path}: truncated at byte {offset}")
            arr = np.frombuffer(raw, dtype=dt, count=count,
                                offset=offset).reshape(shape).copy()
            arrays[attr] = arr
            offset += count * itemsize
        records.append(FrameRecord(meta["frame_id"], arrays["x"], arrays["u"],
                                   arrays["v"], arrays["pair_subject"],
                                   arrays["pair_neighbor"],
                                   arrays["pair_offsets"],
                                   arrays["pair_geo"]))
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return TrainingStore(norm, tuple(header["thresholds"]), records)
