"""Synthetic labeled EEG corpora with planted spatial state signatures.

Each segment is pink-noise background plus one state-keyed rhythm whose
per-channel amplitude follows the channel prior of the segment's state.
That gives desk-scale corpora a known ground truth: a bandpower probe
on the prior channels should separate the states at high SNR and find
nothing as SNR goes to zero.  The rhythm frequency is fixed per state
(phase stays random per segment), so masked spans of the rhythm are
predictable from context at desk-scale training budgets.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .montage import MontageError, default_template, resolve_montage, state_prior
from .pipeline import (
    AMPLITUDE_LIMIT,
    ManifestEntry,
    Recording,
    write_manifest,
    write_recording,
)

__all__ = ["STATE_BANDS", "STATE_FREQS", "generate_corpus", "pink_noise"]

# One canonical rhythm per state: alpha burst, beta rhythm, diffuse
# fast activity.  The planted tone sits at the band center; the probe
# bands below bracket it for bandpower readouts.
STATE_FREQS = {
    "affect": 10.0,
    "motor": 20.0,
    "others": 40.0,
}
STATE_BANDS = {
    "affect": (8.0, 12.0),
    "motor": (18.0, 22.0),
    "others": (36.0, 44.0),
}

VAL_FRACTION = 0.15
TEST_FRACTION = 0.15


def pink_noise(rng: np.random.Generator, n_channels: int, n_samples: int) -> np.ndarray:
    """Unit-variance 1/f-shaped noise, independent per channel."""
    white = rng.standard_normal((n_channels, n_samples))
    spectrum = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(n_samples)
    gain = np.zeros_like(freqs)
    gain[1:] = 1.0 / np.sqrt(freqs[1:])
    shaped = np.fft.irfft(spectrum * gain, n=n_samples, axis=-1)
    std = shaped.std(axis=-1, keepdims=True)
    np.maximum(std, 1e-12, out=std)
    return shaped / std


def _segment_signal(
    rng: np.random.Generator,
    prior: np.ndarray,
    freq: float,
    snr: float,
    n_samples: int,
    rate: float,
) -> np.ndarray:
    background = pink_noise(rng, prior.size, n_samples)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n_samples) / rate
    oscillation = np.sqrt(2.0) * np.sin(2.0 * np.pi * freq * t + phase)
    x = background + snr * prior[:, None] * oscillation[None, :]
    peak = float(np.abs(x).max())
    # rescale (not clip) so the amplitude bound holds without distorting
    # the planted spatial pattern
    if peak > AMPLITUDE_LIMIT:
        x *= AMPLITUDE_LIMIT / peak
    return x.astype(np.float32)


def _split_labels(n: int, rng: np.random.Generator) -> list[str]:
    n_val = int(np.floor(VAL_FRACTION * n))
    n_test = int(np.floor(TEST_FRACTION * n))
    labels = ["train"] * (n - n_val - n_test) + ["val"] * n_val + ["test"] * n_test
    order = rng.permutation(n)
    return [labels[i] for i in np.argsort(order)]


def generate_corpus(
    out_dir: str | Path,
    states: tuple[str, ...] = ("affect", "motor", "others"),
    channel_names: list[str] | None = None,
    segments_per_state: int = 20,
    snr: float = 2.0,
    seed: int = 0,
    rate: float = 200.0,
    duration_s: float = 10.0,
    dataset: str = "synth",
    template=None,
) -> Path:
    """Write one recording per segment plus ``manifest.tsv``.

    Deterministic under ``seed``: every segment draws from its own
    ``default_rng([seed, segment_index])`` stream, so corpora are
    bit-identical across runs and machines.  Returns the manifest path.
    """
    if snr < 0:
        raise ValueError("snr must be non-negative")
    if segments_per_state < 1:
        raise ValueError("segments_per_state must be at least 1")
    unknown = [s for s in states if s not in STATE_FREQS]
    if unknown:
        raise ValueError(f"no rhythm defined for states {unknown}")

    tpl = template if template is not None else default_template()
    names = list(channel_names) if channel_names is not None else list(tpl.channel_names)
    montage = resolve_montage(names, template=tpl)
    if montage.dropped:
        raise MontageError(
            f"cannot plant signatures on unmapped channels: {list(montage.dropped)}"
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_samples = int(round(duration_s * rate))
    priors = {s: state_prior(s, montage, tpl) for s in states}

    entries: list[ManifestEntry] = []
    global_index = 0
    for label, state in enumerate(states):
        # a dataset belongs to exactly one state group, so dataset-pure
        # batches are also state-pure
        tag = f"{dataset}-{state}"
        split_rng = np.random.default_rng([seed, 7919, label])
        splits = _split_labels(segments_per_state, split_rng)
        for i in range(segments_per_state):
            rng = np.random.default_rng([seed, global_index])
            x = _segment_signal(rng, priors[state], STATE_FREQS[state], snr, n_samples, rate)
            rec = Recording(
                data=x,
                channel_names=tuple(names),
                rate=rate,
                unit="scaled",
                state=state,
                dataset=tag,
            )
            rec_path = out_dir / f"{state}_{i:04d}.eegr"
            write_recording(rec_path, rec)
            entries.append(ManifestEntry(rec_path, tag, state, str(label), splits[i]))
            global_index += 1

    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest_path, entries)
    return manifest_path
