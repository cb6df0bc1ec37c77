"""On-disk formats: session logs, pipeline results, map dumps, reports, specs.

Every record file is UTF-8 JSON Lines: a header object on the first line,
then one object per line, each line ending in ``\\n``.  Floats are
rounded to 9 significant digits before encoding, and keys are written in
a fixed order, so identical inputs give byte-identical files.  See
docs/FORMATS.md for field-by-field layouts.
"""

from __future__ import annotations

import contextlib
import json
import os
import tempfile
from dataclasses import fields, is_dataclass
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, SessionFormatError, ViodetError
from .evalkit import GroundTruthFrame, MetricsReport
from .geometry import BBox, CameraFrame, CameraIntrinsics, Detection, DetectionFrame, LabeledBox, Pose, QUAT_TOL
from .pipeline import DetectionDiagnostics, FrameResult, PipelineConfig, ScoredBox
from .simulator import DetectorNoiseModel, RollPenalty, RollProfile, SceneObject, SceneSpec, Session, TrajectorySpec

SESSION_FORMAT = "viodet-session"
RESULTS_FORMAT = "viodet-results"
MAP_FORMAT = "viodet-map"
REPORT_FORMAT = "viodet-report"
VERSION = 1

# stored quaternions carry 9 significant digits; readers accept them within QUAT_TOL of unit norm


def fnum(x: float) -> float:
    """Round to 9 significant digits; idempotent."""
    return float(format(float(x), ".9g"))


def fnums(values) -> list[float]:
    return [float(format(v, ".9g")) for v in np.asarray(values, dtype=np.float64).ravel().tolist()]


def _opt(x: Optional[float]) -> Optional[float]:
    return None if x is None else fnum(x)


def dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


@contextlib.contextmanager
def atomic_writer(path, mode: str = "w") -> Iterator[IO]:
    """Write to a temp file beside ``path`` and rename it into place on success.

    On any exception the temp file is removed and ``path`` is left untouched.
    """
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise FileNotFoundError(f"output directory {str(parent)!r} does not exist")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=parent)
    try:
        kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": "\n"}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


# -- session log --------------------------------------------------------------


def _det_rows(dets: Sequence[Detection]) -> list[list]:
    return [[d.label, fnum(d.p_l), *fnums(d.bbox.as_tuple())] for d in dets]


def session_header(intr: CameraIntrinsics, categories: Mapping[int, str], name: str = "session") -> dict:
    return {
        "format": SESSION_FORMAT,
        "version": VERSION,
        "name": name,
        "quaternion_order": "wxyz",
        "pose_convention": "world_from_camera",
        "gravity_frame": "camera",
        "intrinsics": {
            "fx": fnum(intr.fx),
            "fy": fnum(intr.fy),
            "cx": fnum(intr.cx),
            "cy": fnum(intr.cy),
            "width": int(intr.width),
            "height": int(intr.height),
        },
        "categories": [[int(k), v] for k, v in sorted(categories.items())],
    }


def frame_record(frame: CameraFrame) -> dict:
    rec = {
        "frame_id": int(frame.frame_id),
        "timestamp": fnum(frame.timestamp),
        "pose": {"q": fnums(frame.pose.rotation), "t": fnums(frame.pose.translation)},
        "gravity": fnums(frame.gravity),
        "points": fnums(frame.points),
        "detection_frame": frame.detection_frame.value,
        "detections": _det_rows(frame.detections),
    }
    if frame.corrected_detections is not None:
        rec["corrected_detections"] = _det_rows(frame.corrected_detections)
    if frame.ground_truth is not None:
        rec["gt"] = [[g.label, *fnums(g.bbox.as_tuple())] for g in frame.ground_truth]
    if frame.corrected_ground_truth is not None:
        rec["gt_corrected"] = [[g.label, *fnums(g.bbox.as_tuple())] for g in frame.corrected_ground_truth]
    if frame.meta:
        rec["meta"] = _plain(frame.meta)
    return rec


def _plain(value):
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return fnum(value)
    return value


def write_session(
    path,
    frames: Iterable[CameraFrame],
    intr: CameraIntrinsics,
    categories: Mapping[int, str],
    name: str = "session",
) -> int:
    """Stream ``frames`` to ``path`` atomically; returns the frame count."""
    n = 0
    with atomic_writer(path) as fh:
        fh.write(dumps(session_header(intr, categories, name)) + "\n")
        for frame in frames:
            fh.write(dumps(frame_record(frame)) + "\n")
            n += 1
    return n


def save_session(path, session: Session) -> int:
    return write_session(path, session.frames, session.intrinsics, session.categories, session.name)


def _expect(cond: bool, msg: str):
    if not cond:
        raise SessionFormatError(msg)


def _parse_dets(rows, where: str, known: Mapping[int, str]) -> list[Detection]:
    _expect(isinstance(rows, list), f"{where}: detections must be a list")
    out = []
    for row in rows:
        _expect(isinstance(row, list) and len(row) == 6, f"{where}: detection rows are [label, p, x, y, w, h]")
        label = row[0]
        _expect(isinstance(label, int) and label in known, f"{where}: label {label!r} not in the header categories")
        out.append(Detection(label, float(row[1]), BBox(*(float(v) for v in row[2:]))))
    return out


class SessionReader:
    """Streaming session-log reader; iterating yields one CameraFrame per line.

    Memory use is independent of the number of frames.  Errors carry the
    1-based line number; a final record cut short carries its byte offset.
    """

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.is_file():
            raise FileNotFoundError(f"session file {str(self.path)!r} not found")
        self._fh = open(self.path, "rb")
        self._offset = 0
        self._lineno = 0
        line = self._next_line()
        if line is None:
            self.close()
            raise SessionFormatError(f"{self.path}: empty session file")
        header = self._decode(line)
        try:
            self.header = header
            self.intrinsics, self.categories, self.name = self._check_header(header)
        except BaseException:
            self.close()
            raise

    def _next_line(self) -> Optional[tuple[bytes, int, bool]]:
        raw = self._fh.readline()
        if not raw:
            return None
        start = self._offset
        self._offset += len(raw)
        self._lineno += 1
        complete = raw.endswith(b"\n")
        return raw, start, complete

    def _decode(self, line: tuple[bytes, int, bool]) -> dict:
        raw, start, complete = line
        try:
            obj = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            if not complete:
                raise SessionFormatError(
                    f"{self.path}: truncated record at byte offset {start} (line {self._lineno})"
                ) from None
            raise SessionFormatError(f"{self.path}: line {self._lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise SessionFormatError(f"{self.path}: line {self._lineno}: expected a JSON object")
        return obj

    def _check_header(self, header: dict):
        where = f"{self.path}: line 1"
        _expect(header.get("format") == SESSION_FORMAT, f"{where}: not a {SESSION_FORMAT} file")
        version = header.get("version")
        _expect(version == VERSION, f"{where}: unsupported session format version {version!r} (supported: {VERSION})")
        _expect(header.get("quaternion_order", "wxyz") == "wxyz", f"{where}: only wxyz quaternions are supported")
        _expect(
            header.get("pose_convention", "world_from_camera") == "world_from_camera",
            f"{where}: only world_from_camera poses are supported",
        )
        try:
            intr = CameraIntrinsics(**header["intrinsics"])
            cats = {int(k): str(v) for k, v in header["categories"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise SessionFormatError(f"{where}: bad header ({exc})") from None
        return intr, cats, str(header.get("name", "session"))

    def _frame(self, rec: dict, last_id: Optional[int]) -> CameraFrame:
        where = f"{self.path}: line {self._lineno}"
        fid = rec.get("frame_id")
        _expect(isinstance(fid, int), f"{where}: frame_id must be an integer")
        where = f"{where} (frame {fid})"
        _expect(
            last_id is None or fid > last_id,
            f"{where}: frame_id {fid} does not increase (previous {last_id})",
        )
        try:
            pts = rec["points"]
            _expect(len(pts) % 3 == 0, f"{where}: points length {len(pts)} is not a multiple of 3")
            pose = rec["pose"]
            q = np.asarray(pose["q"], dtype=np.float64)
            norm = float(np.linalg.norm(q))
            _expect(abs(norm - 1.0) <= QUAT_TOL, f"{where}: pose quaternion norm {norm!r} is not 1")
            frame = CameraFrame(
                frame_id=fid,
                timestamp=float(rec["timestamp"]),
                intrinsics=self.intrinsics,
                pose=Pose(q, np.asarray(pose["t"], dtype=np.float64)),
                gravity=np.asarray(rec["gravity"], dtype=np.float64),
                points=np.asarray(pts, dtype=np.float64).reshape(-1, 3),
                detections=_parse_dets(rec["detections"], where, self.categories),
                detection_frame=DetectionFrame(rec["detection_frame"]),
                corrected_detections=(
                    _parse_dets(rec["corrected_detections"], where, self.categories)
                    if "corrected_detections" in rec
                    else None
                ),
                ground_truth=self._gt(rec["gt"], where) if "gt" in rec else None,
                corrected_ground_truth=self._gt(rec["gt_corrected"], where) if "gt_corrected" in rec else None,
                meta=rec.get("meta", {}),
            )
        except SessionFormatError:
            raise
        except KeyError as exc:
            raise SessionFormatError(f"{where}: missing field {exc.args[0]!r}") from None
        except (ViodetError, TypeError, ValueError) as exc:
            raise SessionFormatError(f"{where}: {exc}") from None
        return frame

    def _gt(self, rows, where: str) -> list[LabeledBox]:
        out = []
        for row in rows:
            _expect(isinstance(row, list) and len(row) == 5, f"{where}: gt rows are [label, x, y, w, h]")
            _expect(row[0] in self.categories, f"{where}: gt label {row[0]!r} not in the header categories")
            out.append(LabeledBox(int(row[0]), BBox(*(float(v) for v in row[1:]))))
        return out

    def __iter__(self) -> Iterator[CameraFrame]:
        last_id = None
        try:
            while True:
                line = self._next_line()
                if line is None:
                    return
                if not line[0].strip():
                    raise SessionFormatError(f"{self.path}: line {self._lineno}: blank line")
                frame = self._frame(self._decode(line), last_id)
                last_id = frame.frame_id
                yield frame
        finally:
            self.close()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "SessionReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_session(path) -> SessionReader:
    return SessionReader(path)


def load_session(path) -> Session:
    reader = SessionReader(path)
    frames = list(reader)
    return Session(reader.intrinsics, reader.categories, frames, reader.name)


def ground_truth(frames: Iterable[CameraFrame]) -> list[GroundTruthFrame]:
    out = []
    for f in frames:
        if f.ground_truth is None:
            raise SessionFormatError(f"frame {f.frame_id} has no ground truth")
        out.append(GroundTruthFrame.from_frame(f))
    return out


# -- results ------------------------------------------------------------------


def results_header(cfg: PipelineConfig, session_name: str = "session") -> dict:
    return {
        "format": RESULTS_FORMAT,
        "version": VERSION,
        "session": session_name,
        "row": cfg.label,
        "config": _plain(cfg.to_dict()),
    }


def _scored_rows(boxes: Sequence[ScoredBox]) -> list[list]:
    return [[o.label, fnum(o.p), *fnums(o.bbox.as_tuple())] for o in boxes]


def _parse_scored(rows) -> list[ScoredBox]:
    return [ScoredBox(int(r[0]), float(r[1]), BBox(*map(float, r[2:6]))) for r in rows]


def result_record(res: FrameResult) -> dict:
    rec = {
        "frame_id": int(res.frame_id),
        "outputs": _scored_rows(res.outputs),
        "diagnostics": [
            [fnum(d.p_l), fnum(d.p_scale), fnum(d.p_map), _opt(d.D_w), _opt(d.D_h), _opt(d.d), fnum(d.roll)]
            for d in res.diagnostics
        ],
    }
    if res.native_frame is DetectionFrame.CORRECTED:
        rec["corrected_outputs"] = _scored_rows(res.native_outputs)
    return rec


def write_results(path, results: Iterable[FrameResult], cfg: PipelineConfig, session_name: str = "session") -> None:
    with atomic_writer(path) as fh:
        fh.write(dumps(results_header(cfg, session_name)) + "\n")
        for res in results:
            fh.write(dumps(result_record(res)) + "\n")


def _read_records(path, fmt: str) -> tuple[dict, Iterator[tuple[int, dict]]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{fmt} file {str(path)!r} not found")
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise SessionFormatError(f"{path}: empty file")
    parsed = []
    for i, line in enumerate(lines, start=1):
        try:
            parsed.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise SessionFormatError(f"{path}: line {i}: invalid JSON ({exc.msg})") from None
    header = parsed[0]
    if not isinstance(header, dict) or header.get("format") != fmt:
        raise SessionFormatError(f"{path}: not a {fmt} file")
    if header.get("version") != VERSION:
        raise SessionFormatError(f"{path}: unsupported {fmt} version {header.get('version')!r}")
    return header, enumerate(parsed[1:], start=2)


def read_results(path) -> tuple[dict, list[FrameResult]]:
    header, records = _read_records(path, RESULTS_FORMAT)
    out = []
    for lineno, rec in records:
        try:
            outputs = _parse_scored(rec["outputs"])
            diags = [DetectionDiagnostics(*d) for d in rec["diagnostics"]]
            if "corrected_outputs" in rec:
                res = FrameResult(
                    int(rec["frame_id"]), outputs, diags, DetectionFrame.CORRECTED, _parse_scored(rec["corrected_outputs"])
                )
            else:
                res = FrameResult(int(rec["frame_id"]), outputs, diags)
            out.append(res)
        except (KeyError, TypeError, ValueError, IndexError, ViodetError) as exc:
            raise SessionFormatError(f"{path}: line {lineno}: malformed result record ({exc})") from None
    return header, out


# -- map dump -----------------------------------------------------------------


def _superpoint_record(rec: Mapping) -> dict:
    return {
        "id": int(rec["id"]),
        "loc": fnums(rec["loc"]),
        "scores": [[int(label), fnum(score)] for label, score in rec["scores"]],
        "views": [fnums(v) for v in rec["views"]],
        "scales": [int(s) for s in rec["scales"]],
    }


def write_map(path, snapshot: Iterable[Mapping], session_name: str = "session") -> None:
    """One superpoint per line, id order; re-dumping a loaded map is byte-identical."""
    snapshot = list(snapshot)
    with atomic_writer(path) as fh:
        header = {"format": MAP_FORMAT, "version": VERSION, "session": session_name, "superpoints": len(snapshot)}
        fh.write(dumps(header) + "\n")
        for rec in snapshot:
            fh.write(dumps(_superpoint_record(rec)) + "\n")


def read_map(path) -> tuple[dict, list[dict]]:
    header, records = _read_records(path, MAP_FORMAT)
    out = []
    for lineno, rec in records:
        try:
            out.append(_superpoint_record(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise SessionFormatError(f"{path}: line {lineno}: malformed superpoint ({exc})") from None
    if header.get("superpoints") != len(out):
        raise SessionFormatError(f"{path}: header announces {header.get('superpoints')} superpoints, found {len(out)}")
    return header, out


# -- metrics report -----------------------------------------------------------


def report_document(rows: Mapping[str, MetricsReport], sessions: Sequence[str] = ()) -> dict:
    return {
        "format": REPORT_FORMAT,
        "version": VERSION,
        "sessions": list(sessions),
        "rows": [{"row": label, **{k: _opt(v) for k, v in rep.to_dict().items()}} for label, rep in rows.items()],
    }


def write_report(path, rows: Mapping[str, MetricsReport], sessions: Sequence[str] = ()) -> None:
    with atomic_writer(path) as fh:
        fh.write(json.dumps(report_document(rows, sessions), indent=2, allow_nan=False) + "\n")


def read_report(path) -> dict[str, MetricsReport]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != REPORT_FORMAT or doc.get("version") != VERSION:
        raise SessionFormatError(f"{path}: not a {REPORT_FORMAT} v{VERSION} file")
    return {r["row"]: MetricsReport.from_dict(r) for r in doc["rows"]}


# -- specs and configs --------------------------------------------------------


def _load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file {str(path)!r} not found")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _build(cls, data: Mapping, where: str, **converters):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object for {cls.__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown {cls.__name__} keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        conv = converters.get(key)
        kwargs[key] = conv(value) if conv else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def scene_from_dict(data: Mapping, where: str = "scene") -> SceneSpec:
    def objects(items):
        return tuple(_build(SceneObject, o, where) for o in items)

    return _build(SceneSpec, data, where, objects=objects, bounds_min=tuple, bounds_max=tuple)


def trajectory_from_dict(data: Mapping, where: str = "trajectory") -> TrajectorySpec:
    return _build(
        TrajectorySpec,
        data,
        where,
        roll_profile=lambda d: _build(RollProfile, d, where, values=tuple),
    )


def noise_from_dict(data: Mapping, where: str = "noise") -> DetectorNoiseModel:
    return _build(
        DetectorNoiseModel,
        data,
        where,
        roll_penalty=lambda d: _build(RollPenalty, d, where),
        fp_scale_range=tuple,
        tp_score=tuple,
        confusion_score=tuple,
        fp_score=tuple,
    )


def intrinsics_from_dict(data: Mapping, where: str = "intrinsics") -> CameraIntrinsics:
    try:
        return _build(CameraIntrinsics, data, where)
    except ViodetError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def spec_to_dict(spec) -> dict:
    """Plain-data view of a spec dataclass (inverse of the *_from_dict loaders)."""
    out = {}
    for f in fields(spec):
        value = getattr(spec, f.name)
        if is_dataclass(value):
            value = spec_to_dict(value)
        elif isinstance(value, tuple) and value and is_dataclass(value[0]):
            value = [spec_to_dict(v) for v in value]
        elif isinstance(value, Mapping):
            value = {k: [list(p) for p in v] for k, v in value.items()}
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


PRESET_KINDS = ("scene", "trajectory", "noise", "intrinsics")


def preset_names(kind: str) -> list[str]:
    root = resources.files("viodet").joinpath("data/presets")
    prefix = f"{kind}_"
    return sorted(p.name[len(prefix) : -5] for p in root.iterdir() if p.name.startswith(prefix) and p.name.endswith(".json"))


def _preset_data(kind: str, name: str) -> dict:
    res = resources.files("viodet").joinpath(f"data/presets/{kind}_{name}.json")
    if not res.is_file():
        raise ConfigError(f"no {kind} file or preset named {name!r} (presets: {', '.join(preset_names(kind))})")
    return json.loads(res.read_text(encoding="utf-8"))


def load_spec(kind: str, source: str):
    """Load a scene/trajectory/noise/intrinsics spec from a JSON path or a preset name."""
    loaders = {
        "scene": scene_from_dict,
        "trajectory": trajectory_from_dict,
        "noise": noise_from_dict,
        "intrinsics": intrinsics_from_dict,
    }
    if kind not in loaders:
        raise ConfigError(f"unknown spec kind {kind!r}")
    path = Path(source)
    if path.suffix == ".json" or path.exists():
        return loaders[kind](_load_json(path), str(path))
    return loaders[kind](_preset_data(kind, source), f"{kind} preset {source!r}")


def load_pipeline_config(path) -> PipelineConfig:
    data = _load_json(path)
    try:
        return PipelineConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
