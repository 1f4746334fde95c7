"""Synthetic voice corpus with the two-speaker mixing protocol.

Voices are deterministic harmonic sources: each speaker owns an f0 range, a
fixed spectral envelope, and characteristic syllable timing, so different
speakers have measurably different long-term spectra while every utterance
is reproducible from its seeds. Mixtures pair two speakers at a uniform
random SNR in [0, 5] dB; the target speaker's reference is a different
utterance of the same speaker and is re-drawn every epoch.
"""

import dataclasses
import json
import pathlib

import numpy as np

from .dsp import AudioSignal, DspError, write_wav

MIN_DURATION = 0.5
MAX_DURATION = 30.0


class DatagenError(ValueError):
    """Invalid corpus specification or generation request."""


@dataclasses.dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    f0_low: float
    f0_high: float
    envelope_seed: int
    timing_seed: int


def make_speakers(count: int, seed: int) -> list[SyntheticSpeaker]:
    """Deterministic speaker roster with f0 ranges spread over 80-320 Hz."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBEEF]))
    speakers = []
    for i in range(count):
        low = 80.0 + 240.0 * i / max(count, 1) + rng.uniform(0, 10)
        speakers.append(
            SyntheticSpeaker(
                speaker_id=f"spk{i:03d}",
                f0_low=low,
                f0_high=low * rng.uniform(1.15, 1.35),
                # sequential seeds: synth_voice spreads formants over a
                # low-discrepancy sequence of the seed, so roster members
                # cannot collide spectrally
                envelope_seed=i,
                timing_seed=int(rng.integers(0, 2**31)),
            )
        )
    return speakers


def synth_voice(speaker: SyntheticSpeaker, duration: float, utterance_seed: int,
                sample_rate: int = 8000) -> AudioSignal:
    """Harmonic source shaped by the speaker envelope and syllable modulation."""
    if not (MIN_DURATION <= duration <= MAX_DURATION):
        raise DatagenError(
            f"duration {duration} s outside [{MIN_DURATION}, {MAX_DURATION}] s"
        )
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    env_rng = np.random.default_rng(np.random.SeedSequence([speaker.envelope_seed]))
    rng = np.random.default_rng(
        np.random.SeedSequence([speaker.timing_seed, utterance_seed])
    )

    # slow f0 contour inside the speaker range plus mild vibrato
    contour_freq = rng.uniform(0.3, 1.2)
    contour_phase = rng.uniform(0, 2 * np.pi)
    mid = 0.5 * (speaker.f0_low + speaker.f0_high)
    half = 0.5 * (speaker.f0_high - speaker.f0_low)
    f0 = mid + half * np.sin(2 * np.pi * contour_freq * t + contour_phase)
    f0 += 2.0 * np.sin(2 * np.pi * 5.5 * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    # fixed per-speaker harmonic weights: three formant-like resonances over a
    # gentle roll-off, so speakers keep distinct long-term spectra
    max_harmonics = max(2, int((0.45 * sample_rate) / speaker.f0_high))
    harmonic_freqs = np.arange(1, max_harmonics + 1) * mid
    s = speaker.envelope_seed
    centers = np.array([
        300.0 + 900.0 * ((s * 0.6180339887 + 0.17) % 1.0),
        1000.0 + 1300.0 * ((s * 0.7071067811 + 0.41) % 1.0),
        2300.0 + 1200.0 * ((s * 0.8660254037 + 0.73) % 1.0),
    ])
    widths = env_rng.uniform(80.0, 180.0, 3)
    gains = env_rng.uniform(0.6, 1.4, 3)
    tilt = env_rng.uniform(0.0, 1.0)
    resonances = sum(
        g * np.exp(-0.5 * ((harmonic_freqs - c) / w) ** 2)
        for c, w, g in zip(centers, widths, gains)
    )
    weights = (0.01 + resonances) / (np.arange(1, max_harmonics + 1) ** tilt)
    # speaker-specific shelf: different high-band emphasis per speaker
    cutoff = 700.0 + 2400.0 * ((s * 0.5477225575 + 0.29) % 1.0)
    high_gain = 0.25 + 1.5 * ((s * 0.3316624790 + 0.57) % 1.0)
    weights = weights * np.where(harmonic_freqs > cutoff, high_gain, 1.0)
    signal = np.zeros(n)
    for h, w in enumerate(weights, start=1):
        harmonic = h * f0
        audible = harmonic < 0.45 * sample_rate
        signal += np.where(audible, w * np.sin(h * phase), 0.0)

    # syllable-like amplitude bursts, 2-5 per second
    n_syllables = max(1, int(round(duration * rng.uniform(2.0, 5.0))))
    envelope = np.full(n, 0.08)
    for _ in range(n_syllables):
        center = rng.uniform(0, duration)
        width = rng.uniform(0.06, 0.22)
        envelope += np.exp(-0.5 * ((t - center) / width) ** 2)
    signal *= envelope

    peak = np.max(np.abs(signal))
    if peak <= 0:
        raise DatagenError("degenerate synthesis produced silence")
    return AudioSignal(signal * (0.85 / peak), sample_rate)


@dataclasses.dataclass
class MixtureExample:
    mixture: AudioSignal
    target: AudioSignal
    interferer: AudioSignal  # already scaled to the requested SNR
    snr_db: float
    interferer_gain: float
    reference: AudioSignal | None = None
    target_speaker: str = ""
    interferer_speaker: str = ""


def _pad_to(signal: AudioSignal, length: int) -> AudioSignal:
    if len(signal) >= length:
        return signal
    return AudioSignal(
        np.pad(signal.samples, (0, length - len(signal))), signal.sample_rate
    )


def mix(target: AudioSignal, interferer: AudioSignal, snr_db: float,
        mode: str = "max") -> MixtureExample:
    """Scale the interferer so the target-to-interferer energy ratio is snr_db.

    mode 'max' zero-pads the shorter signal; 'min' truncates to the shorter.
    """
    if target.sample_rate != interferer.sample_rate:
        raise DspError(
            f"sample rate mismatch: {target.sample_rate} vs {interferer.sample_rate}"
        )
    if mode == "max":
        length = max(len(target), len(interferer))
        tgt, itf = _pad_to(target, length), _pad_to(interferer, length)
    elif mode == "min":
        length = min(len(target), len(interferer))
        tgt = AudioSignal(target.samples[:length], target.sample_rate)
        itf = AudioSignal(interferer.samples[:length], interferer.sample_rate)
    else:
        raise DatagenError(f"unknown mix mode {mode!r}")
    e_t = float(np.dot(tgt.samples, tgt.samples))
    e_i = float(np.dot(itf.samples, itf.samples))
    if e_t == 0.0 or e_i == 0.0:
        raise DatagenError("cannot mix a zero-energy signal")
    gain = float(np.sqrt(e_t / (e_i * 10.0 ** (snr_db / 10.0))))
    scaled = AudioSignal(gain * itf.samples, itf.sample_rate)
    mixture = AudioSignal(tgt.samples + scaled.samples, tgt.sample_rate)
    return MixtureExample(mixture, tgt, scaled, float(snr_db), gain)


@dataclasses.dataclass(frozen=True)
class CorpusSpec:
    counts: dict  # split -> number of mixtures, e.g. {"train": 32, ...}
    train_speakers: int = 12
    test_speakers: int = 4
    utterances_per_speaker: int = 3
    duration_low: float = 2.0
    duration_high: float = 4.0
    seed: int = 0
    sample_rate: int = 8000

    def __post_init__(self):
        for split in self.counts:
            if split not in ("train", "dev", "test"):
                raise DatagenError(f"unknown split {split!r}")
        if min(self.train_speakers, self.test_speakers) < 2:
            raise DatagenError("each speaker pool needs at least two speakers")
        if self.utterances_per_speaker < 2:
            raise DatagenError("need >= 2 utterances per speaker for references")


def _example_record(index, split, spec, speakers, root, rng):
    target_spk, interferer_spk = rng.choice(len(speakers), size=2, replace=False)
    target_spk, interferer_spk = speakers[target_spk], speakers[interferer_spk]
    n_utt = spec.utterances_per_speaker
    target_utt = int(rng.integers(0, n_utt))
    interferer_utt = int(rng.integers(0, n_utt))
    reference_utt = int(rng.integers(0, n_utt - 1))
    if reference_utt >= target_utt:
        reference_utt += 1
    snr_db = float(rng.uniform(0.0, 5.0))
    return {
        "index": index,
        "split": split,
        "mixture_path": str(root / "wav" / split / f"ex{index:05d}_mix.wav"),
        "target_path": str(root / "wav" / split / f"ex{index:05d}_target.wav"),
        "reference_path": str(
            root / "utt" / target_spk.speaker_id / f"u{reference_utt:02d}.wav"
        ),
        "target_speaker": target_spk.speaker_id,
        "interferer_speaker": interferer_spk.speaker_id,
        "snr_db": snr_db,
        "target_utterance": target_utt,
        "interferer_utterance": interferer_utt,
        "reference_utterance": reference_utt,
    }


def utterance_signal(spec: CorpusSpec, speaker: SyntheticSpeaker,
                     utterance: int) -> AudioSignal:
    """Regenerate one pool utterance deterministically from the corpus spec."""
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, speaker.timing_seed, utterance])
    )
    duration = float(rng.uniform(spec.duration_low, spec.duration_high))
    return synth_voice(speaker, duration, utterance_seed=utterance + 1,
                       sample_rate=spec.sample_rate)


def example_signals(spec: CorpusSpec, speakers_by_id: dict, record: dict) -> MixtureExample:
    """Regenerate a manifest record's mixture/target/reference in float64."""
    target = utterance_signal(
        spec, speakers_by_id[record["target_speaker"]], record["target_utterance"]
    )
    interferer = utterance_signal(
        spec, speakers_by_id[record["interferer_speaker"]], record["interferer_utterance"]
    )
    example = mix(target, interferer, record["snr_db"])
    example.reference = utterance_signal(
        spec, speakers_by_id[record["target_speaker"]], record["reference_utterance"]
    )
    example.target_speaker = record["target_speaker"]
    example.interferer_speaker = record["interferer_speaker"]
    return example


def build_corpus(root, spec: CorpusSpec) -> list[dict]:
    """Generate WAVs and a JSONL manifest under `root`; returns the records."""
    root = pathlib.Path(root)
    n_speakers = spec.train_speakers + spec.test_speakers
    speakers = make_speakers(n_speakers, spec.seed)
    train_pool = speakers[: spec.train_speakers]
    test_pool = speakers[spec.train_speakers :]

    # utterance pools on disk (references point here)
    for speaker in speakers:
        utt_dir = root / "utt" / speaker.speaker_id
        utt_dir.mkdir(parents=True, exist_ok=True)
        for u in range(spec.utterances_per_speaker):
            write_wav(utt_dir / f"u{u:02d}.wav", utterance_signal(spec, speaker, u))

    speakers_by_id = {s.speaker_id: s for s in speakers}
    records = []
    index = 0
    for split_index, split in enumerate(("train", "dev", "test")):
        count = spec.counts.get(split, 0)
        pool = test_pool if split == "test" else train_pool
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1 + split_index]))
        (root / "wav" / split).mkdir(parents=True, exist_ok=True)
        for _ in range(count):
            record = _example_record(index, split, spec, pool, root, rng)
            example = example_signals(spec, speakers_by_id, record)
            write_wav(record["mixture_path"], example.mixture)
            write_wav(record["target_path"], example.target)
            records.append(record)
            index += 1

    manifest_path = root / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(root / "corpus.json", "w") as fh:
        json.dump(
            {
                "spec": dataclasses.asdict(spec),
                "speakers": [dataclasses.asdict(s) for s in speakers],
                "train_speakers": [s.speaker_id for s in train_pool],
                "test_speakers": [s.speaker_id for s in test_pool],
            },
            fh, indent=2, sort_keys=True,
        )
    validate_manifest(records)
    return records


def load_manifest(root) -> tuple[list[dict], CorpusSpec, dict]:
    """Read manifest records plus the corpus spec and speaker roster."""
    root = pathlib.Path(root)
    records = []
    with open(root / "manifest.jsonl") as fh:
        for line in fh:
            records.append(json.loads(line))
    with open(root / "corpus.json") as fh:
        meta = json.load(fh)
    spec = CorpusSpec(**meta["spec"])
    speakers = {s["speaker_id"]: SyntheticSpeaker(**s) for s in meta["speakers"]}
    return records, spec, speakers


def validate_manifest(records: list[dict]) -> None:
    """Check split disjointness and reference sanity; raises on violation."""
    train_dev = set()
    test = set()
    for record in records:
        speakers = {record["target_speaker"], record["interferer_speaker"]}
        if record["split"] == "test":
            test |= speakers
        else:
            train_dev |= speakers
        if record["reference_utterance"] == record["target_utterance"]:
            raise DatagenError(
                f"example {record['index']} uses the target utterance as reference"
            )
    overlap = train_dev & test
    if overlap:
        raise DatagenError(f"speaker overlap across train/dev and test: {sorted(overlap)}")


def resample_references(records: list[dict], spec: CorpusSpec, epoch_seed: int) -> list[dict]:
    """New per-epoch reference assignment; never the target utterance itself."""
    if spec.utterances_per_speaker < 2:
        raise DatagenError("reference resampling needs >= 2 utterances per speaker")
    out = []
    for record in records:
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, epoch_seed, record["index"]])
        )
        choice = int(rng.integers(0, spec.utterances_per_speaker - 1))
        if choice >= record["target_utterance"]:
            choice += 1
        updated = dict(record)
        updated["reference_utterance"] = choice
        parent = pathlib.Path(record["reference_path"]).parent
        updated["reference_path"] = str(parent / f"u{choice:02d}.wav")
        out.append(updated)
    return out
