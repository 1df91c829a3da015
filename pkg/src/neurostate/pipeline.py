"""Raw recordings to model-ready segments and dataset-grouped batches.

Recordings are resampled to a fixed 200 Hz, cut into non-overlapping
windows, rescaled so that 0.1 mV maps to 1.0, and amplitude-filtered.
Batches are shuffled globally but kept dataset-homogeneous so every
batch shares one montage.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .montage import MontageMap, UniversalTemplate, resolve_montage

TARGET_RATE = 200.0
AMPLITUDE_LIMIT = 10.0

REJECT_AMPLITUDE = "amplitude"
REJECT_NONFINITE = "nonfinite"

# multiplicative factor taking the declared unit to "1.0 == 0.1 mV"
UNIT_SCALE = {
    "scaled": 1.0,
    "microvolt": 0.01,
    "millivolt": 10.0,
    "volt": 1e4,
}


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class Recording:
    """One raw multichannel recording plus its header metadata."""

    data: np.ndarray  # (C, T_raw) float32, in `unit`
    channel_names: tuple[str, ...]
    rate: float
    unit: str
    state: str
    dataset: str

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channel_names):
            raise PipelineError("data must be (n_channels, n_samples)")
        if self.rate <= 0:
            raise PipelineError("rate must be positive")
        if self.unit not in UNIT_SCALE:
            raise PipelineError(f"unknown unit {self.unit!r}; have {sorted(UNIT_SCALE)}")


@dataclass(frozen=True)
class Segment:
    """A scaled, fixed-rate window ready for the model."""

    data: np.ndarray  # (C, T) float32, unit 0.1 mV
    montage: MontageMap
    state: str
    dataset_tag: str
    rate: float = TARGET_RATE


@dataclass(frozen=True)
class Batch:
    segments: tuple[Segment, ...]
    epoch_index: int  # 1-based

    def __post_init__(self):
        tags = {s.dataset_tag for s in self.segments}
        if len(tags) > 1:
            raise PipelineError(f"batch mixes datasets: {sorted(tags)}")
        states = {s.state for s in self.segments}
        if len(states) > 1:
            raise PipelineError(f"batch mixes states: {sorted(states)}")
        if self.epoch_index < 1:
            raise PipelineError("epoch_index is 1-based")

    @property
    def state(self) -> str:
        return self.segments[0].state

    @property
    def dataset_tag(self) -> str:
        return self.segments[0].dataset_tag

    @property
    def montage(self) -> MontageMap:
        return self.segments[0].montage

    def stacked(self) -> np.ndarray:
        """(B, C, T) array of the member segments."""
        return np.stack([s.data for s in self.segments])


def resample(data: np.ndarray, rate_in: float, rate_out: float = TARGET_RATE) -> np.ndarray:
    """Resample along the last axis.

    Uses a polyphase filter (Kaiser-windowed, mean-padded edges) when
    the rate ratio is rational; falls back to linear interpolation for
    irrational ratios.
    """
    if rate_in == rate_out:
        return np.asarray(data)
    ratio = Fraction(rate_out).limit_denominator(10**6) / Fraction(rate_in).limit_denominator(10**6)
    exact = abs(float(ratio) * rate_in - rate_out) < 1e-9 * rate_out
    if exact and max(ratio.numerator, ratio.denominator) <= 1000:
        return resample_poly(data, ratio.numerator, ratio.denominator, axis=-1, padtype="mean")
    n_out = int(np.floor(data.shape[-1] * rate_out / rate_in))
    t_out = np.arange(n_out) * (rate_in / rate_out)
    t_in = np.arange(data.shape[-1])
    flat = data.reshape(-1, data.shape[-1])
    out = np.stack([np.interp(t_out, t_in, row) for row in flat])
    return out.reshape(*data.shape[:-1], n_out)


def segment(recording: Recording, montage: MontageMap, window_s: float = 10.0) -> list[np.ndarray]:
    """Cut a recording into non-overlapping fixed-rate windows.

    Data rows are restricted to the montage's mapped channels, resampled
    to 200 Hz as one piece, then windowed; the trailing remainder is
    discarded.  Values stay in the recording's declared unit.
    """
    if window_s <= 0:
        raise PipelineError("window_s must be positive")
    rows = recording.data[list(montage.input_positions)]
    res = resample(rows.astype(np.float64), recording.rate)
    t_win = int(round(window_s * TARGET_RATE))
    n_win = res.shape[-1] // t_win
    return [res[:, i * t_win:(i + 1) * t_win].astype(np.float32) for i in range(n_win)]


def scale_and_reject(
    window: np.ndarray,
    unit: str,
    montage: MontageMap,
    state: str,
    dataset_tag: str,
) -> tuple[Segment | None, str | None]:
    """Rescale one window to 0.1 mV units and apply the rejection rule.

    Returns (segment, None) when kept, (None, reason) when rejected.
    Reasons: "nonfinite" for NaN/inf anywhere, "amplitude" when any
    scaled value exceeds 10 in magnitude.
    """
    if unit not in UNIT_SCALE:
        raise PipelineError(f"unknown unit {unit!r}")
    if not np.all(np.isfinite(window)):
        return None, REJECT_NONFINITE
    scaled = np.asarray(window, dtype=np.float32) * UNIT_SCALE[unit]
    if np.abs(scaled).max(initial=0.0) > AMPLITUDE_LIMIT:
        return None, REJECT_AMPLITUDE
    return Segment(scaled, montage, state, dataset_tag), None


def prepare_recording(
    recording: Recording,
    template: UniversalTemplate | None = None,
    window_s: float = 10.0,
    coords: np.ndarray | None = None,
) -> tuple[list[Segment], list[tuple[int, str]]]:
    """Full path from one raw recording to kept segments.

    Returns the kept segments and a list of (window_index, reason)
    rejection records.
    """
    montage = resolve_montage(list(recording.channel_names), coords=coords, template=template)
    kept, rejected = [], []
    for i, win in enumerate(segment(recording, montage, window_s)):
        seg, reason = scale_and_reject(win, recording.unit, montage, recording.state, recording.dataset)
        if seg is not None:
            kept.append(seg)
        else:
            rejected.append((i, reason))
    return kept, rejected


def batch_by_dataset(segments: list[Segment], batch_size: int, rng_seed: int, epoch: int = 1) -> list[Batch]:
    """Shuffle globally, then group into dataset-homogeneous batches.

    A batch is emitted whenever a dataset's bucket fills; leftovers are
    flushed at the end as short batches.  Fixed seed gives a fixed order.
    """
    if batch_size < 1:
        raise PipelineError("batch_size must be >= 1")
    order = np.random.default_rng(rng_seed).permutation(len(segments))
    buckets: dict[str, list[Segment]] = {}
    batches: list[Batch] = []
    for i in order:
        seg = segments[int(i)]
        bucket = buckets.setdefault(seg.dataset_tag, [])
        bucket.append(seg)
        if len(bucket) == batch_size:
            batches.append(Batch(tuple(bucket), epoch))
            buckets[seg.dataset_tag] = []
    for tag, bucket in buckets.items():
        if bucket:
            batches.append(Batch(tuple(bucket), epoch))
    return batches


# ---------------------------------------------------------------------------
# recording container and manifest files

MAGIC = b"EEGR"
CONTAINER_VERSION = 1


def write_recording(path: str | Path, recording: Recording) -> None:
    header = {
        "channels": list(recording.channel_names),
        "rate": recording.rate,
        "unit": recording.unit,
        "state": recording.state,
        "dataset": recording.dataset,
        "n_channels": int(recording.data.shape[0]),
        "n_samples": int(recording.data.shape[1]),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(recording.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", CONTAINER_VERSION, len(blob)))
        f.write(blob)
        f.write(payload)


def read_recording(path: str | Path) -> Recording:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise PipelineError(f"{path}: not a recording container (bad magic)")
        version, blob_len = struct.unpack("<II", f.read(8))
        if version != CONTAINER_VERSION:
            raise PipelineError(f"{path}: unsupported container version {version}")
        header = json.loads(f.read(blob_len).decode("utf-8"))
        c, t = header["n_channels"], header["n_samples"]
        payload = f.read(4 * c * t)
        if len(payload) != 4 * c * t:
            raise PipelineError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, t)
    return Recording(
        data=data.copy(),
        channel_names=tuple(header["channels"]),
        rate=float(header["rate"]),
        unit=header["unit"],
        state=header["state"],
        dataset=header["dataset"],
    )


def read_text_recording(
    path: str | Path,
    rate: float,
    unit: str = "scaled",
    state: str = "others",
    dataset: str = "fixture",
) -> Recording:
    """Import a tiny delimited-text fixture: header row of channel names,
    then one row of tab-separated values per sample."""
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip() and not ln.startswith("#")]
    names = tuple(lines[0].split("\t"))
    rows = [[float(v) for v in ln.split("\t")] for ln in lines[1:]]
    data = np.asarray(rows, dtype=np.float32).T
    return Recording(data, names, rate, unit, state, dataset)


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    dataset: str
    state: str
    label: str
    split: str


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    """Write a directory manifest; paths are stored relative to the
    manifest's folder when possible so the corpus can be moved."""
    path = Path(path)
    with open(path, "w") as f:
        f.write("path\tdataset\tstate\tlabel\tsplit\n")
        for e in entries:
            rec_path = Path(e.path)
            try:
                rec_path = rec_path.relative_to(path.parent)
            except ValueError:
                pass
            f.write(f"{rec_path}\t{e.dataset}\t{e.state}\t{e.label}\t{e.split}\n")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a directory manifest: TSV with columns path, dataset, state,
    label, split.  Relative paths resolve against the manifest's folder."""
    path = Path(path)
    entries = []
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip() and not ln.startswith("#")]
    header = lines[0].split("\t")
    expected = ["path", "dataset", "state", "label", "split"]
    if header != expected:
        raise PipelineError(f"manifest header must be {expected}, got {header}")
    for ln in lines[1:]:
        p, dataset, state, label, split = ln.split("\t")
        rec_path = Path(p)
        if not rec_path.is_absolute():
            rec_path = path.parent / rec_path
        entries.append(ManifestEntry(rec_path, dataset, state, label, split))
    return entries
