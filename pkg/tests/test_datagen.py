import json

import numpy as np
import pytest

from tse import datagen, dsp
from tse.datagen import (
    CorpusSpec,
    DatagenError,
    build_corpus,
    example_signals,
    load_manifest,
    make_speakers,
    mix,
    resample_references,
    synth_voice,
    validate_manifest,
)
from tse.dsp import AudioSignal


SPEAKERS = make_speakers(4, seed=7)


class TestSynthVoice:
    def test_deterministic(self):
        a = synth_voice(SPEAKERS[0], 1.0, 5)
        b = synth_voice(SPEAKERS[0], 1.0, 5)
        assert np.array_equal(a.samples, b.samples)

    def test_speakers_distinct(self):
        a = synth_voice(SPEAKERS[0], 2.0, 5)
        b = synth_voice(SPEAKERS[3], 2.0, 5)
        corr = np.dot(a.samples, b.samples) / (
            np.linalg.norm(a.samples) * np.linalg.norm(b.samples)
        )
        assert abs(corr) < 0.5

    def test_long_term_spectra_distinct(self):
        cfg = dsp.StftConfig(128, 64, 128)

        def avg_log_spectrum(speaker):
            sig = synth_voice(speaker, 4.0, 1)
            spec = dsp.stft(sig, cfg)
            v = np.log10(np.abs(spec.data).mean(axis=0) + 1e-8)
            # remove the shared silence-floor offset so the distance reflects
            # spectral shape, not the common baseline
            return v - v.mean()

        specs = [avg_log_spectrum(s) for s in SPEAKERS]
        for i in range(len(specs)):
            for j in range(i + 1, len(specs)):
                cos = np.dot(specs[i], specs[j]) / (
                    np.linalg.norm(specs[i]) * np.linalg.norm(specs[j])
                )
                assert 1.0 - cos > 0.1  # cosine distance over 0.1

    def test_duration_and_peak(self):
        sig = synth_voice(SPEAKERS[1], 4.0, 2)
        assert len(sig) == 32000
        assert np.max(np.abs(sig.samples)) <= 0.9

    def test_duration_bounds(self):
        with pytest.raises(DatagenError):
            synth_voice(SPEAKERS[0], 0.4, 1)
        with pytest.raises(DatagenError):
            synth_voice(SPEAKERS[0], 31.0, 1)

    def test_utterance_seeds_differ(self):
        a = synth_voice(SPEAKERS[0], 1.0, 1)
        b = synth_voice(SPEAKERS[0], 1.0, 2)
        assert not np.array_equal(a.samples, b.samples)


class TestMix:
    def test_snr_zero_equal_energy(self):
        t = synth_voice(SPEAKERS[0], 1.0, 1)
        i = synth_voice(SPEAKERS[1], 1.0, 1)
        ex = mix(t, i, 0.0)
        e_t = np.dot(ex.target.samples, ex.target.samples)
        e_i = np.dot(ex.interferer.samples, ex.interferer.samples)
        assert abs(10 * np.log10(e_t / e_i)) < 1e-9

    def test_snr_accuracy_sweep(self):
        t = synth_voice(SPEAKERS[0], 1.5, 3)
        i = synth_voice(SPEAKERS[2], 1.0, 3)
        for snr in [0.0, 1.234567, 3.3, 5.0]:
            ex = mix(t, i, snr)
            e_t = np.dot(ex.target.samples, ex.target.samples)
            e_i = np.dot(ex.interferer.samples, ex.interferer.samples)
            assert abs(10 * np.log10(e_t / e_i) - snr) < 1e-9

    def test_snr5_energy_ratio(self):
        t = synth_voice(SPEAKERS[0], 1.0, 4)
        i = synth_voice(SPEAKERS[1], 1.0, 4)
        ex = mix(t, i, 5.0)
        e_t = np.dot(ex.target.samples, ex.target.samples)
        e_i = np.dot(ex.interferer.samples, ex.interferer.samples)
        assert abs(e_t / e_i - 10 ** 0.5) < 1e-9

    def test_additivity_sample_exact(self):
        t = synth_voice(SPEAKERS[0], 1.2, 5)
        i = synth_voice(SPEAKERS[1], 0.8, 5)
        ex = mix(t, i, 2.0)
        assert np.array_equal(
            ex.mixture.samples, ex.target.samples + ex.interferer.samples
        )

    def test_max_mode_pads(self):
        t = synth_voice(SPEAKERS[0], 2.0, 6)
        i = synth_voice(SPEAKERS[1], 1.0, 6)
        ex = mix(t, i, 1.0)
        assert len(ex.mixture) == len(t)
        assert np.allclose(ex.interferer.samples[len(i):][-100:], 0.0)

    def test_min_mode_truncates(self):
        t = synth_voice(SPEAKERS[0], 2.0, 6)
        i = synth_voice(SPEAKERS[1], 1.0, 6)
        ex = mix(t, i, 1.0, mode="min")
        assert len(ex.mixture) == len(i)

    def test_zero_energy_rejected(self):
        t = synth_voice(SPEAKERS[0], 1.0, 7)
        silent = AudioSignal(np.zeros(8000), 8000)
        with pytest.raises(DatagenError):
            mix(t, silent, 0.0)
        with pytest.raises(DatagenError):
            mix(silent, t, 0.0)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    spec = CorpusSpec(counts={"train": 8, "dev": 4, "test": 4},
                      train_speakers=6, test_speakers=3,
                      utterances_per_speaker=3, duration_low=1.0,
                      duration_high=2.0, seed=11)
    records = build_corpus(root, spec)
    return root, spec, records


class TestCorpus:

    def test_counts_and_files(self, corpus):
        root, spec, records = corpus
        assert len(records) == 16
        for record in records:
            mix_sig = dsp.read_wav(record["mixture_path"])
            tgt_sig = dsp.read_wav(record["target_path"])
            ref_sig = dsp.read_wav(record["reference_path"])
            assert mix_sig.sample_rate == tgt_sig.sample_rate == ref_sig.sample_rate == 8000
            assert len(mix_sig) == len(tgt_sig)

    def test_split_disjointness(self, corpus):
        _, _, records = corpus
        validate_manifest(records)
        train_dev = {r["target_speaker"] for r in records if r["split"] != "test"}
        test = {r["target_speaker"] for r in records if r["split"] == "test"}
        assert not (train_dev & test)

    def test_overlap_detected(self, corpus):
        _, _, records = corpus
        bad = [dict(r) for r in records]
        bad[-1]["target_speaker"] = records[0]["target_speaker"]
        bad[-1]["split"] = "test"
        with pytest.raises(DatagenError):
            validate_manifest(bad)

    def test_snr_accuracy_from_manifest(self, corpus):
        root, _, _ = corpus
        records2, spec2, speakers = load_manifest(root)
        for record in records2[:4]:
            ex = example_signals(spec2, speakers, record)
            e_t = np.dot(ex.target.samples, ex.target.samples)
            e_i = np.dot(ex.interferer.samples, ex.interferer.samples)
            assert abs(10 * np.log10(e_t / e_i) - record["snr_db"]) < 1e-9

    def test_regenerated_matches_files(self, corpus):
        root, spec, _ = corpus
        records, spec2, speakers = load_manifest(root)
        record = records[0]
        ex = example_signals(spec2, speakers, record)
        on_disk = dsp.read_wav(record["target_path"])
        assert np.max(np.abs(on_disk.samples - ex.target.samples)) < 1e-6

    def test_seed_determinism(self, tmp_path):
        spec = CorpusSpec(counts={"train": 4, "test": 2}, train_speakers=4,
                          test_speakers=2, duration_low=1.0, duration_high=1.5, seed=3)
        a = build_corpus(tmp_path / "a", spec)
        b = build_corpus(tmp_path / "b", spec)
        strip = lambda rs, root: [
            {k: (v.replace(str(root), "") if isinstance(v, str) else v)
             for k, v in r.items()} for r in rs
        ]
        assert strip(a, tmp_path / "a") == strip(b, tmp_path / "b")
        wav_a = dsp.read_wav(a[0]["mixture_path"])
        wav_b = dsp.read_wav(b[0]["mixture_path"])
        assert np.array_equal(wav_a.samples, wav_b.samples)

    def test_reference_resampling(self, corpus):
        root, spec, records = corpus
        e1 = resample_references(records, spec, epoch_seed=1)
        e1_again = resample_references(records, spec, epoch_seed=1)
        e2 = resample_references(records, spec, epoch_seed=2)
        assert e1 == e1_again
        assert any(x["reference_utterance"] != y["reference_utterance"]
                   for x, y in zip(e1, e2))
        for assigned, original in zip(e1, records):
            assert assigned["reference_utterance"] != assigned["target_utterance"]
            assert assigned["target_speaker"] == original["target_speaker"]

    def test_manifest_fields(self, corpus):
        root, _, _ = corpus
        with open(root / "manifest.jsonl") as fh:
            record = json.loads(fh.readline())
        for field in ["mixture_path", "target_path", "reference_path",
                      "target_speaker", "interferer_speaker", "snr_db", "split"]:
            assert field in record


def test_spec_validation():
    with pytest.raises(DatagenError):
        CorpusSpec(counts={"validation": 4})
    with pytest.raises(DatagenError):
        CorpusSpec(counts={"train": 4}, utterances_per_speaker=1)
    with pytest.raises(DatagenError):
        CorpusSpec(counts={"train": 4}, test_speakers=1)
