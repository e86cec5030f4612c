"""Keyword spotting pipeline: datasets, split-sweep training, classification.

The default desk-scale corpus is synthetic (class-specific tone pairs), so
everything runs offline in minutes. A directory of 16 kHz mono WAV clips,
one subdirectory per label, can be loaded instead.
"""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .domain import AUDIO_CLIP_SAMPLES, AudioClip, fit_clip_length
from .dsp import DspConfig, log_mel_features

log = logging.getLogger(__name__)

SYNTH_BASE_HZ = 300.0
SYNTH_STEP_HZ = 150.0
SYNTH_PARTIAL_RATIO = 1.5
SYNTH_FREQ_JITTER = 0.03
SYNTH_SNR_DB = 20.0


class DatasetError(ValueError):
    pass


class VocabularyMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledClip:
    clip: AudioClip
    label: int


@dataclass(frozen=True)
class SweepRow:
    train_fraction: float
    train_accuracy: float
    validation_accuracy: float


@dataclass(frozen=True)
class SweepResult:
    rows: tuple


def synth_class_name(k: int) -> str:
    return f"tone{int(SYNTH_BASE_HZ + SYNTH_STEP_HZ * k)}"


def synth_dataset(n_classes=8, n_per_class=200, seed=0):
    """Deterministic synthetic corpus: class k is a two-tone chord.

    Fundamental at 300 + 150k Hz with a 1.5x partial at half amplitude,
    random phase, +-3% frequency jitter per clip, and white noise at
    20 dB SNR. Returns (clips, vocabulary).
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    t = np.arange(AUDIO_CLIP_SAMPLES) / 16000.0
    clips = []
    for k in range(n_classes):
        base = SYNTH_BASE_HZ + SYNTH_STEP_HZ * k
        for _ in range(n_per_class):
            f = base * (1.0 + rng.uniform(-SYNTH_FREQ_JITTER, SYNTH_FREQ_JITTER))
            phase1, phase2 = rng.uniform(0, 2 * np.pi, 2)
            sig = np.sin(2 * np.pi * f * t + phase1)
            sig += 0.5 * np.sin(2 * np.pi * SYNTH_PARTIAL_RATIO * f * t + phase2)
            noise_std = np.sqrt(np.mean(sig**2) / 10 ** (SYNTH_SNR_DB / 10))
            sig = sig + rng.normal(0.0, noise_std, len(t))
            sig = sig / np.max(np.abs(sig)) * 0.9 * 32767
            samples = tuple(int(v) for v in np.round(sig).astype(np.int64))
            clips.append(LabeledClip(clip=AudioClip(patient=1, samples=samples), label=k))
    vocabulary = [synth_class_name(k) for k in range(n_classes)]
    return clips, vocabulary


def load_speech_commands(directory):
    """Load a label-per-subdirectory corpus of 16-bit mono 16 kHz WAVs.

    Clips are padded/truncated to one second; labels follow sorted
    subdirectory names. Unreadable files are skipped with a warning.
    Returns (clips, vocabulary).
    """
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    label_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not label_dirs:
        raise DatasetError(f"{root} holds no label subdirectories")
    clips = []
    vocabulary = [d.name for d in label_dirs]
    for label, d in enumerate(label_dirs):
        for path in sorted(d.iterdir()):
            if path.suffix.lower() != ".wav":
                continue
            try:
                samples = _read_wav(path)
            except Exception as exc:  # noqa: BLE001 - any bad file is skipped
                log.warning("skipping unreadable clip %s: %s", path, exc)
                continue
            clips.append(LabeledClip(clip=AudioClip(patient=1, samples=fit_clip_length(samples)), label=label))
    if not clips:
        raise DatasetError(f"no readable clips under {root}")
    return clips, vocabulary


def _read_wav(path):
    with wave.open(str(path), "rb") as wav:
        if wav.getnchannels() != 1:
            raise DatasetError("expected mono audio")
        if wav.getsampwidth() != 2:
            raise DatasetError("expected 16-bit samples")
        if wav.getframerate() != 16000:
            raise DatasetError("expected a 16 kHz sample rate")
        raw = wav.readframes(wav.getnframes())
    return np.frombuffer(raw, dtype="<i2").tolist()


def export_wav(clip: AudioClip, path):
    """Write a clip as 16-bit little-endian PCM, 16 kHz mono."""
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(16000)
        wav.writeframes(np.asarray(clip.samples, dtype="<i2").tobytes())


def extract_features(clips, config: DspConfig | None = None):
    """Feature tensors (N, 1, n_mels, n_frames) and label vector for a corpus."""
    config = config or DspConfig()
    feats = np.stack([log_mel_features(lc.clip, config).values for lc in clips])
    labels = np.array([lc.label for lc in clips], dtype=np.int64)
    return feats[:, None, :, :], labels


def train_on_clips(clips, n_classes, config: nn.TrainConfig, dsp_config=None, features=None):
    """Train a fresh seeded model on the given clips; returns the model.

    ``features`` can carry precomputed (inputs, labels) aligned with clips.
    """
    if features is None:
        inputs, labels = extract_features(clips, dsp_config)
    else:
        inputs, labels = features
    input_shape = inputs.shape[1:]
    model = nn.build_model(n_classes, input_shape=input_shape, seed=config.seed)
    nn.train_classifier(model, inputs, labels, config)
    return model


def run_split_sweep(dataset, splits, train_config: nn.TrainConfig, dsp_config=None):
    """Train once per requested split fraction and record both accuracies.

    Every row uses the same seed, a fresh model, and a fresh stratified
    partition of the same dataset.
    """
    splits = list(splits)
    if not splits:
        raise ValueError("need at least one split")
    if any(not 0 < s < 1 for s in splits):
        raise ValueError("splits must lie in (0, 1)")
    clips = list(dataset)
    n_classes = max(lc.label for lc in clips) + 1
    inputs, labels = extract_features(clips, dsp_config)
    rows = []
    for split in splits:
        train_items, val_items = nn.split_dataset(list(range(len(clips))), split, train_config.seed, labels=labels)
        train_idx = np.array(train_items, dtype=np.int64)
        val_idx = np.array(val_items, dtype=np.int64)
        model = train_on_clips(
            None, n_classes, train_config, features=(inputs[train_idx], labels[train_idx])
        )
        rows.append(
            SweepRow(
                train_fraction=split,
                train_accuracy=nn.evaluate_accuracy(model, inputs[train_idx], labels[train_idx]),
                validation_accuracy=nn.evaluate_accuracy(model, inputs[val_idx], labels[val_idx]),
            )
        )
    return SweepResult(rows=tuple(rows))


def write_sweep_csv(result: SweepResult, path):
    with open(path, "w") as fh:
        fh.write("split,train_acc,val_acc\n")
        for row in result.rows:
            fh.write(f"{row.train_fraction:g},{row.train_accuracy:.6f},{row.validation_accuracy:.6f}\n")


def read_sweep_csv(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "split,train_acc,val_acc":
            raise ValueError(f"unexpected sweep header {header!r}")
        for line in fh:
            if not line.strip():
                continue
            split, tr, va = line.strip().split(",")
            rows.append(SweepRow(float(split), float(tr), float(va)))
    return SweepResult(rows=tuple(rows))


def classify(model: nn.Model, vocabulary, clip: AudioClip, dsp_config=None):
    """Eval-mode prediction for one clip: (label name, confidence)."""
    if len(vocabulary) != model.n_classes:
        raise VocabularyMismatchError(f"vocabulary has {len(vocabulary)} labels, model emits {model.n_classes}")
    fm = log_mel_features(clip, dsp_config or DspConfig())
    probs = model.forward(fm.values[None, :, :], train=False)
    idx = int(np.argmax(probs))
    return vocabulary[idx], float(probs[idx])
