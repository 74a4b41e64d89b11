"""Manifests, trial lists and a synthetic multi-speaker corpus.

Each synthetic speaker is a harmonic voice source shaped by three resonances
and a spectral tilt.  Utterances jitter pitch, resonance placement, tilt,
loudness and noise level, and move through a random syllable-like sequence
of resonance shifts, so that speaker identity has to be inferred from the
voice rather than from a fixed spectrum.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .frontend import DEFAULT_RATE, write_wav
from .seeding import derive_rng

__all__ = [
    "Corpus",
    "ManifestEntry",
    "ManifestError",
    "SyntheticSpeakerSpec",
    "Trial",
    "build_trials",
    "generate_corpus",
    "load_manifest",
    "make_speaker",
    "read_trials",
    "synthesize_utterance",
    "write_manifest",
    "write_trials",
]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    speaker_id: str
    path: str
    duration_s: float


@dataclass(frozen=True)
class Trial:
    enrol_id: str
    test_id: str
    target: bool


@dataclass(frozen=True)
class SyntheticSpeakerSpec:
    f0_hz: float
    formants_hz: tuple[float, float, float]
    bandwidths_hz: tuple[float, float, float]
    tilt_db_per_octave: float
    f0_jitter: float = 0.06
    formant_jitter: float = 0.04
    tilt_jitter_db: float = 1.5
    seed: int = 0

    def __post_init__(self):
        nyquist = DEFAULT_RATE / 2
        if not 0 < self.f0_hz < nyquist or any(not 0 < f < nyquist for f in self.formants_hz):
            raise ValueError("speaker frequencies must lie in (0, Nyquist)")


# -- manifests ------------------------------------------------------------------------


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    """One JSON record per line; audio paths are stored relative to the manifest when possible."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for e in entries:
        p = Path(e.path)
        if p.is_absolute():
            try:
                p = p.resolve().relative_to(base)
            except ValueError:
                pass
        rec = {"utt_id": e.utt_id, "speaker_id": e.speaker_id, "path": p.as_posix(), "duration_s": e.duration_s}
        lines.append(json.dumps(rec, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_manifest(path, check_audio: bool = True) -> list[ManifestEntry]:
    """Parse a manifest; relative audio paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    base = path.parent.resolve()
    entries: list[ManifestEntry] = []
    first_line: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entry = ManifestEntry(
                utt_id=str(rec["utt_id"]),
                speaker_id=str(rec["speaker_id"]),
                path=str((base / rec["path"]).resolve()),
                duration_s=float(rec["duration_s"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: cannot parse manifest record ({exc})") from exc
        if entry.duration_s <= 0:
            raise ManifestError(f"{path}:{lineno}: duration must be positive")
        if entry.utt_id in first_line:
            raise ManifestError(
                f"{path}: duplicate utt_id {entry.utt_id!r} on lines {first_line[entry.utt_id]} and {lineno}"
            )
        if check_audio and not Path(entry.path).exists():
            raise ManifestError(f"{path}:{lineno}: audio file not found: {entry.path}")
        first_line[entry.utt_id] = lineno
        entries.append(entry)
    return entries


# -- trials ---------------------------------------------------------------------------


def write_trials(path, trials: Iterable[Trial]) -> None:
    """``<label 0|1> <enrol_id> <test_id>`` per line."""
    Path(path).write_text("".join(f"{int(t.target)} {t.enrol_id} {t.test_id}\n" for t in trials), encoding="utf-8")


def read_trials(path) -> list[Trial]:
    trials = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ManifestError(f"{path}:{lineno}: expected '<0|1> <enrol_id> <test_id>', got {line!r}")
        trials.append(Trial(parts[1], parts[2], parts[0] == "1"))
    return trials


def build_trials(
    manifest: Sequence[ManifestEntry], n_pairs: int, target_fraction: float = 0.5, seed: int = 0
) -> list[Trial]:
    """Sample distinct target (same speaker) and non-target pairs without replacement."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    if not 0.0 <= target_fraction <= 1.0:
        raise ValueError("target_fraction must be in [0, 1]")
    rng = derive_rng(seed, "trials")
    by_spk: dict[str, list[str]] = {}
    for e in manifest:
        by_spk.setdefault(e.speaker_id, []).append(e.utt_id)
    n_target = int(round(n_pairs * target_fraction))
    n_non = n_pairs - n_target

    target_pool = [(a, b) for utts in by_spk.values() for i, a in enumerate(utts) for b in utts[i + 1 :]]
    spks = sorted(by_spk)
    n_non_pool = sum(len(by_spk[a]) * len(by_spk[b]) for i, a in enumerate(spks) for b in spks[i + 1 :])
    if n_target > len(target_pool):
        raise ValueError(f"requested {n_target} target pairs but only {len(target_pool)} exist")
    if n_non > n_non_pool:
        raise ValueError(f"requested {n_non} non-target pairs but only {n_non_pool} exist")

    trials = [Trial(a, b, True) for k in rng.choice(len(target_pool), n_target, replace=False) for a, b in [target_pool[k]]]
    non_pool = [
        (a, b) for i, s in enumerate(spks) for t in spks[i + 1 :] for a in by_spk[s] for b in by_spk[t]
    ]
    trials += [Trial(a, b, False) for k in rng.choice(len(non_pool), n_non, replace=False) for a, b in [non_pool[k]]]
    order = rng.permutation(len(trials))
    return [trials[k] for k in order]


# -- synthesis ------------------------------------------------------------------------

# Relative resonance shifts visited by the syllable sequence (a small "vowel inventory").
_VOWEL_SHIFTS = np.array(
    [
        [1.00, 1.00, 1.00],
        [0.55, 1.45, 1.10],
        [0.60, 0.75, 0.95],
        [0.80, 1.25, 1.02],
        [1.15, 0.85, 0.98],
    ]
)


def make_speaker(rng: np.random.Generator, seed: int = 0) -> SyntheticSpeakerSpec:
    f0 = float(np.exp(rng.uniform(np.log(85.0), np.log(260.0))))
    scale = rng.uniform(0.82, 1.22)
    base = np.array([600.0, 1350.0, 2500.0]) * scale
    formants = base * rng.uniform(0.9, 1.1, size=3)
    formants[2] = min(formants[2], 3500.0)
    bw = rng.uniform(60.0, 160.0, size=3)
    tilt = rng.uniform(-9.0, -3.0)
    return SyntheticSpeakerSpec(
        f0_hz=f0,
        formants_hz=tuple(float(f) for f in formants),
        bandwidths_hz=tuple(float(b) for b in bw),
        tilt_db_per_octave=float(tilt),
        seed=seed,
    )


def synthesize_utterance(
    spk: SyntheticSpeakerSpec, duration_s: float, rng: np.random.Generator, sample_rate: int = DEFAULT_RATE
) -> np.ndarray:
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    nyquist = sample_rate / 2

    f0 = spk.f0_hz * (1 + rng.uniform(-spk.f0_jitter, spk.f0_jitter))
    contour = 1 + rng.uniform(0.02, 0.08) * np.sin(2 * np.pi * rng.uniform(0.3, 1.5) * t + rng.uniform(0, 2 * np.pi))
    f0_t = f0 * contour
    phase = 2 * np.pi * np.cumsum(f0_t) / sample_rate

    formants = np.array(spk.formants_hz) * (1 + rng.uniform(-spk.formant_jitter, spk.formant_jitter, size=3))
    tilt = spk.tilt_db_per_octave + rng.uniform(-spk.tilt_jitter_db, spk.tilt_jitter_db)

    # syllables: piecewise resonance shifts with smooth transitions, amplitude bursts
    n_syl = max(1, int(round(duration_s * rng.uniform(2.5, 4.5))))
    bounds = np.sort(rng.uniform(0, n, size=n_syl - 1)).astype(int)
    seg = np.searchsorted(bounds, np.arange(n), side="right")
    shifts = _VOWEL_SHIFTS[rng.integers(0, len(_VOWEL_SHIFTS), size=n_syl)]
    shift_t = shifts[seg]
    k = max(1, int(0.03 * sample_rate))
    kernel = np.hanning(2 * k + 1)
    kernel /= kernel.sum()
    shift_t = np.stack([np.convolve(np.pad(shift_t[:, i], k, mode="edge"), kernel, mode="valid") for i in range(3)], 1)
    envelope = np.ones(n)
    for s in range(n_syl):
        idx = seg == s
        m = int(idx.sum())
        if m:
            envelope[idx] = rng.uniform(0.5, 1.0) * np.sin(np.pi * (np.arange(m) + 0.5) / m) ** 0.5
    f_t = formants[None, :] * shift_t
    f_t = np.minimum(f_t, nyquist - 200.0)

    n_harm = int(nyquist // (f0 * 0.9))
    signal = np.zeros(n)
    bws = np.array(spk.bandwidths_hz)
    for h in range(1, n_harm + 1):
        fh = h * f0_t
        alive = fh < nyquist - 50.0
        if not alive.any():
            break
        res = (1.0 / (1.0 + ((fh[:, None] - f_t) / bws) ** 2)).sum(axis=1)
        gain = 10 ** (tilt * np.log2(np.maximum(fh, 1.0) / 100.0) / 20.0)
        signal += alive * res * gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    signal *= envelope
    signal /= np.max(np.abs(signal)) + 1e-12

    snr_db = rng.uniform(12.0, 35.0)
    noise = rng.normal(size=n)
    noise *= np.sqrt(np.mean(signal**2) / 10 ** (snr_db / 10)) / (np.std(noise) + 1e-12)
    out = signal + noise
    return out / (np.max(np.abs(out)) + 1e-12) * rng.uniform(0.3, 0.9)


@dataclass
class Corpus:
    root: Path
    manifest: Path
    splits: dict[str, Path]
    trials: dict[str, Path]
    speakers: dict[str, SyntheticSpeakerSpec]


def generate_corpus(
    out_dir,
    n_speakers: int,
    utts_per_speaker: int,
    duration_s: float = 2.0,
    sample_rate: int = DEFAULT_RATE,
    seed: int = 0,
    n_test_speakers: int | None = None,
    dev_fraction: float = 0.2,
    n_trials: int = 1000,
) -> Corpus:
    """Write WAVs, manifests for all/train/dev/test, and dev/test trial lists.

    Test speakers are held out entirely; train and dev share speakers with
    disjoint utterances.  Trial counts are capped at what each split affords.
    """
    if n_speakers < 2 or utts_per_speaker < 1:
        raise ValueError("need at least 2 speakers and 1 utterance per speaker")
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if n_test_speakers is None:
        n_test_speakers = n_speakers // 3 if n_speakers >= 6 else 0
    if not 0 <= n_test_speakers < n_speakers:
        raise ValueError(f"n_test_speakers must be in [0, {n_speakers})")
    root = Path(out_dir)
    wav_dir = root / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    spk_rng = derive_rng(seed, "speakers")
    speakers = {f"spk{i:03d}": make_speaker(spk_rng, seed) for i in range(n_speakers)}
    entries: list[ManifestEntry] = []
    for i, (spk_id, spec) in enumerate(speakers.items()):
        for u in range(utts_per_speaker):
            utt_id = f"{spk_id}_u{u:03d}"
            rng = derive_rng(seed, f"utt/{utt_id}")
            samples = synthesize_utterance(spec, duration_s, rng, sample_rate)
            path = wav_dir / f"{utt_id}.wav"
            write_wav(path, samples, sample_rate)
            entries.append(ManifestEntry(utt_id, spk_id, str(path.resolve()), samples.size / sample_rate))

    test_spk = set(list(speakers)[n_speakers - n_test_speakers :])
    n_dev = int(math.floor(utts_per_speaker * dev_fraction)) if utts_per_speaker > 1 else 0
    split = {"train": [], "dev": [], "test": []}
    for e in entries:
        if e.speaker_id in test_spk:
            split["test"].append(e)
        elif int(e.utt_id.rsplit("_u", 1)[1]) >= utts_per_speaker - n_dev:
            split["dev"].append(e)
        else:
            split["train"].append(e)

    write_manifest(root / "manifest.jsonl", entries)
    split_paths = {}
    for name, items in split.items():
        split_paths[name] = root / f"{name}.jsonl"
        write_manifest(split_paths[name], items)

    trial_paths = {}
    for name in ("dev", "test"):
        items = split[name]
        if len({e.speaker_id for e in items}) < 2:
            continue
        by_spk: dict[str, int] = {}
        for e in items:
            by_spk[e.speaker_id] = by_spk.get(e.speaker_id, 0) + 1
        max_target = sum(c * (c - 1) // 2 for c in by_spk.values())
        n_t = min(n_trials // 2, max_target)
        n_pairs = min(n_trials, 2 * n_t) if n_t else 0
        if n_pairs == 0:
            continue
        trials = build_trials(items, n_pairs, n_t / n_pairs, seed=seed + (1 if name == "dev" else 2))
        trial_paths[name] = root / f"trials_{name}.txt"
        write_trials(trial_paths[name], trials)
    (root / "speakers.json").write_text(
        json.dumps({k: asdict(v) for k, v in speakers.items()}, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return Corpus(root, root / "manifest.jsonl", split_paths, trial_paths, speakers)
