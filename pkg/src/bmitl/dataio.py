"""Session data model and its on-disk format.

Run file layout (little-endian)::

    b"BMI1" | u32 n_trials | per trial: u8 label, u32 cue_onset, u32 n_raw,
    float32[8 * n_raw] channel-major samples

Each session directory holds one run file per run plus ``manifest.json``.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

N_CHANNELS = 8
SAMPLE_RATE = 500
TRIAL_SAMPLES = 5000
INSTRUCTION_SAMPLES = 2000
TRIALS_PER_RUN = 15
TRIALS_PER_CLASS = 5

RUN_MAGIC = b"BMI1"
MANIFEST_NAME = "manifest.json"
_TRIAL_HEADER = struct.Struct("<BII")


class Label(enum.IntEnum):
    LEFT = 0
    RIGHT = 1
    REST = 2


class SessionFormatError(ValueError):
    """Raised for invariant violations and malformed session files."""

    def __init__(self, message: str, run_index: int | None = None):
        if run_index is not None:
            message = f"run {run_index}: {message}"
        super().__init__(message)
        self.run_index = run_index


@dataclass(eq=False)
class Trial:
    label: Label
    samples: np.ndarray
    cue_onset: int = 0

    def __post_init__(self):
        self.label = Label(self.label)
        self.samples = np.asarray(self.samples, dtype=np.float32)

    def validate(self) -> None:
        s = self.samples
        if s.ndim != 2 or s.shape[0] != N_CHANNELS:
            raise SessionFormatError(f"trial must have {N_CHANNELS} channel rows, got shape {s.shape}")
        n_raw = s.shape[1]
        if n_raw < INSTRUCTION_SAMPLES:
            raise SessionFormatError(f"trial has {n_raw} samples, need >= {INSTRUCTION_SAMPLES}")
        if self.cue_onset < 0 or self.cue_onset + INSTRUCTION_SAMPLES > n_raw:
            raise SessionFormatError(f"cue_onset {self.cue_onset} leaves no full instruction window")

    def __eq__(self, other):
        if not isinstance(other, Trial):
            return NotImplemented
        return (
            self.label == other.label
            and self.cue_onset == other.cue_onset
            and self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
        )


@dataclass(eq=True)
class Run:
    trials: list[Trial]

    def validate(self) -> None:
        if len(self.trials) != TRIALS_PER_RUN:
            raise SessionFormatError(f"run must hold {TRIALS_PER_RUN} trials, got {len(self.trials)}")
        counts = np.bincount([int(t.label) for t in self.trials], minlength=3)
        if any(c != TRIALS_PER_CLASS for c in counts):
            raise SessionFormatError(f"run must hold {TRIALS_PER_CLASS} trials per label, got {counts.tolist()}")
        for t in self.trials:
            t.validate()


@dataclass(eq=True)
class Session:
    session_id: str
    runs: list[Run]
    sample_rate: int = SAMPLE_RATE
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    def validate(self) -> None:
        if self.sample_rate != SAMPLE_RATE:
            raise SessionFormatError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not self.runs:
            raise SessionFormatError("session has no runs")
        for i, run in enumerate(self.runs):
            try:
                run.validate()
            except SessionFormatError as exc:
                raise SessionFormatError(str(exc), run_index=i) from None

    @property
    def n_runs(self) -> int:
        return len(self.runs)


def run_file_name(index: int) -> str:
    return f"run_{index:02d}.bin"


def trial_record_bytes(n_raw: int) -> int:
    """Byte length of one trial record: header plus 4 * 8 * n_raw payload."""
    return _TRIAL_HEADER.size + 4 * N_CHANNELS * n_raw


def _encode_run(run: Run) -> bytes:
    parts = [RUN_MAGIC, struct.pack("<I", len(run.trials))]
    for t in run.trials:
        n_raw = t.samples.shape[1]
        parts.append(_TRIAL_HEADER.pack(int(t.label), t.cue_onset, n_raw))
        parts.append(np.ascontiguousarray(t.samples, dtype="<f4").tobytes())
    return b"".join(parts)


def _decode_run(buf: bytes, run_index: int) -> Run:
    if buf[:4] != RUN_MAGIC:
        raise SessionFormatError("bad magic", run_index)
    if len(buf) < 8:
        raise SessionFormatError("length mismatch: truncated header", run_index)
    (n_trials,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    trials = []
    for _ in range(n_trials):
        if pos + _TRIAL_HEADER.size > len(buf):
            raise SessionFormatError("length mismatch: truncated trial header", run_index)
        label, cue, n_raw = _TRIAL_HEADER.unpack_from(buf, pos)
        pos += _TRIAL_HEADER.size
        nbytes = 4 * N_CHANNELS * n_raw
        if pos + nbytes > len(buf):
            raise SessionFormatError(
                f"length mismatch: expected {nbytes} payload bytes, found {len(buf) - pos}", run_index
            )
        if label not in (0, 1, 2):
            raise SessionFormatError(f"unknown label code {label}", run_index)
        data = np.frombuffer(buf, dtype="<f4", count=N_CHANNELS * n_raw, offset=pos)
        trials.append(Trial(Label(label), data.reshape(N_CHANNELS, n_raw).astype(np.float32), cue))
        pos += nbytes
    if pos != len(buf):
        raise SessionFormatError(f"length mismatch: {len(buf) - pos} trailing bytes", run_index)
    return Run(trials)


def write_session(session: Session, directory: str | Path) -> dict[str, Any]:
    """Write ``session`` to ``directory`` and return the manifest that was written.

    Invariants are checked before anything touches the disk.
    """
    session.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    runs_meta = []
    for i, run in enumerate(session.runs):
        name = run_file_name(i)
        payload = _encode_run(run)
        (directory / name).write_bytes(payload)
        runs_meta.append(
            {
                "file": name,
                "bytes": len(payload),
                "labels": [t.label.name for t in run.trials],
                "cue_onsets": [t.cue_onset for t in run.trials],
                "n_raw": [int(t.samples.shape[1]) for t in run.trials],
            }
        )
    manifest = {
        "format": "BMI1",
        "session_id": session.session_id,
        "sample_rate": session.sample_rate,
        "n_channels": N_CHANNELS,
        "runs": runs_meta,
        "generator": session.meta.get("generator"),
    }
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (directory / MANIFEST_NAME).write_text(text + "\n", encoding="utf-8")
    return manifest


def read_manifest(directory: str | Path) -> dict[str, Any]:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise SessionFormatError(f"missing manifest {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SessionFormatError(f"manifest is not valid JSON: {exc}") from None


def _check_manifest_labels(labels: list[str], run_index: int) -> None:
    if len(labels) != TRIALS_PER_RUN:
        raise SessionFormatError(f"manifest lists {len(labels)} trials, expected {TRIALS_PER_RUN}", run_index)
    for lab in Label:
        n = labels.count(lab.name)
        if n != TRIALS_PER_CLASS:
            raise SessionFormatError(f"manifest lists {n} {lab.name} trials, expected {TRIALS_PER_CLASS}", run_index)


def read_session(directory: str | Path) -> Session:
    directory = Path(directory)
    manifest = read_manifest(directory)
    runs = []
    for i, meta in enumerate(manifest["runs"]):
        path = directory / meta["file"]
        if not path.is_file():
            raise SessionFormatError(f"missing run file {meta['file']}", i)
        buf = path.read_bytes()
        expected = 8 + sum(trial_record_bytes(n) for n in meta["n_raw"])
        if len(buf) != expected:
            raise SessionFormatError(f"length mismatch: {meta['file']} has {len(buf)} bytes, expected {expected}", i)
        labels = meta["labels"]
        if len(labels) != len(meta["n_raw"]):
            raise SessionFormatError("label count mismatch in manifest", i)
        _check_manifest_labels(labels, i)
        run = _decode_run(buf, i)
        if [t.label.name for t in run.trials] != labels:
            raise SessionFormatError("labels in run file disagree with manifest", i)
        try:
            run.validate()
        except SessionFormatError as exc:
            raise SessionFormatError(str(exc), i) from None
        runs.append(run)
    session = Session(
        session_id=manifest["session_id"],
        runs=runs,
        sample_rate=manifest["sample_rate"],
        meta={"generator": manifest.get("generator")},
    )
    session.validate()
    return session


def two_class_view(session: Session | list[Run]) -> list[tuple[Trial, Label]]:
    """Left/Right trials in run order, Rest dropped."""
    runs = session.runs if isinstance(session, Session) else session
    return [(t, t.label) for run in runs for t in run.trials if t.label != Label.REST]
