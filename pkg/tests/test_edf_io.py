import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psgmae import edf_io, synthgen
from psgmae.edf_io import (
    Annotation,
    DegenerateCalibration,
    EdfError,
    EdfRecording,
    InconsistentLengths,
    MalformedHeader,
    MalformedTal,
    SignalSpec,
    TruncatedFile,
    UnsupportedEdf,
    parse_edf,
    parse_tal,
    serialize_tal,
    write_edf,
)


def build_header(num_records=1, num_signals=1, reserved=""):
    """Hand-built 256-byte global header, independent of the writer."""
    return (
        b"0".ljust(8)
        + b"patient".ljust(80)
        + b"recording".ljust(80)
        + b"01.01.00"
        + b"00.00.00"
        + str(256 * (1 + num_signals)).encode().ljust(8)
        + reserved.encode().ljust(44)
        + str(num_records).encode().ljust(8)
        + b"1".ljust(8)
        + str(num_signals).encode().ljust(4)
    )


def build_signal_header(columns):
    """Field-major signal header block from per-signal dicts."""
    widths = [("label", 16), ("transducer", 80), ("dimension", 8),
              ("physical_min", 8), ("physical_max", 8), ("digital_min", 8),
              ("digital_max", 8), ("prefilter", 80), ("samples_per_record", 8),
              ("reserved", 32)]
    out = b""
    for key, width in widths:
        for col in columns:
            out += str(col.get(key, "")).encode().ljust(width)
    return out


def one_signal_file(digital_values, physical_min=-200, physical_max=200,
                    digital_min=-2048, digital_max=2047):
    header = build_header(num_records=1, num_signals=1)
    signal = build_signal_header([{
        "label": "EEG test", "dimension": "uV",
        "physical_min": physical_min, "physical_max": physical_max,
        "digital_min": digital_min, "digital_max": digital_max,
        "samples_per_record": len(digital_values),
    }])
    data = np.asarray(digital_values, dtype="<i2").tobytes()
    return header + signal + data


class TestParse:
    def test_linear_mapping_example(self):
        # digital 0 with range [-2048, 2047] over [-200, 200] uV
        recording = parse_edf(one_signal_file([0]))
        expected = 2048 * (400 / 4095) - 200
        assert recording.samples[0][0] == pytest.approx(expected, abs=1e-9)
        assert recording.samples[0][0] == pytest.approx(0.04884, abs=1e-5)

    def test_header_fields(self):
        recording = parse_edf(one_signal_file([0, 1, 2]))
        assert recording.patient_id == "patient"
        assert recording.num_records == 1
        assert recording.record_duration_s == 1.0
        assert recording.signals[0].label == "EEG test"
        assert recording.start_datetime.year == 2000

    def test_truncated_after_global_header(self):
        data = build_header(num_records=1, num_signals=1)
        with pytest.raises(TruncatedFile):
            parse_edf(data)

    def test_shorter_than_256(self):
        with pytest.raises(TruncatedFile):
            parse_edf(b"0")

    def test_truncated_data_records(self):
        data = one_signal_file([1, 2, 3, 4])
        with pytest.raises(TruncatedFile):
            parse_edf(data[:-3])

    def test_oversized_errors(self):
        data = one_signal_file([1, 2, 3, 4])
        with pytest.raises(MalformedHeader):
            parse_edf(data + b"\x00\x00")

    def test_fuzz_truncation_never_crashes(self):
        recording, annotations = synthgen.generate(
            synthgen.SynthSpec(seed=1, duration_s=30)
        )
        data = write_edf(recording)
        for cut in range(0, len(data), max(len(data) // 37, 1)):
            with pytest.raises(EdfError):
                parse_edf(data[:cut])

    def test_non_numeric_field(self):
        data = bytearray(one_signal_file([0]))
        data[236:244] = b"oops    "  # record count
        with pytest.raises(MalformedHeader):
            parse_edf(bytes(data))

    def test_degenerate_digital_range(self):
        data = one_signal_file([0], digital_min=5, digital_max=5)
        with pytest.raises(DegenerateCalibration):
            parse_edf(data)

    def test_edf_plus_d_rejected(self):
        header = build_header(num_records=1, num_signals=1, reserved="EDF+D")
        signal = build_signal_header([{
            "label": "EEG test", "physical_min": -1, "physical_max": 1,
            "digital_min": -10, "digital_max": 10, "samples_per_record": 1,
        }])
        with pytest.raises(UnsupportedEdf):
            parse_edf(header + signal + b"\x00\x00")


class TestWrite:
    @staticmethod
    def recording(samples, physical_min=-200.0, physical_max=200.0):
        spec = SignalSpec(
            label="EEG test", physical_dimension="uV",
            physical_min=physical_min, physical_max=physical_max,
            digital_min=-2048, digital_max=2047,
            samples_per_record=len(samples),
        )
        return EdfRecording(
            num_records=1, record_duration_s=1.0,
            signals=[spec], samples=[np.asarray(samples, dtype=np.float64)],
        )

    def read_digital(self, data, n):
        return np.frombuffer(data[-2 * n:], dtype="<i2")

    def test_physical_max_maps_to_digital_max(self):
        data = write_edf(self.recording([200.0]))
        assert self.read_digital(data, 1)[0] == 2047

    def test_physical_min_maps_to_digital_min(self):
        data = write_edf(self.recording([-200.0]))
        assert self.read_digital(data, 1)[0] == -2048

    def test_out_of_range_clips(self):
        data = write_edf(self.recording([5000.0, -5000.0]))
        assert list(self.read_digital(data, 2)) == [2047, -2048]

    def test_inconsistent_lengths(self):
        recording = self.recording([1.0, 2.0])
        recording.samples[0] = np.array([1.0])
        with pytest.raises(InconsistentLengths):
            write_edf(recording)

    def test_degenerate_calibration(self):
        recording = self.recording([1.0])
        recording.signals[0].digital_min = recording.signals[0].digital_max = 3
        with pytest.raises(DegenerateCalibration):
            write_edf(recording)

    def test_quantization_within_half_step(self):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(11)))
        for _ in range(20):
            values = rng.uniform(-200, 200, 50)
            recording = self.recording(values)
            parsed = parse_edf(write_edf(recording))
            half_step = (400 / 4095) / 2
            assert np.abs(parsed.samples[0] - values).max() <= half_step + 1e-12


class TestRoundTrip:
    def test_synthgen_round_trip_field_by_field(self):
        recording, annotations = synthgen.generate(
            synthgen.SynthSpec(seed=2, duration_s=60)
        )
        parsed = parse_edf(write_edf(recording))
        assert parsed.version == recording.version
        assert parsed.patient_id == recording.patient_id
        assert parsed.recording_id == recording.recording_id
        assert parsed.start_datetime == recording.start_datetime
        assert parsed.num_records == recording.num_records
        assert parsed.record_duration_s == recording.record_duration_s
        assert len(parsed.signals) == len(recording.signals)
        for got, want in zip(parsed.signals, recording.signals):
            assert got == want
        for got, want, spec in zip(parsed.samples, recording.samples,
                                   recording.signals):
            half_step = (spec.physical_max - spec.physical_min) / (
                2 * (spec.digital_max - spec.digital_min))
            clipped = np.clip(want, spec.physical_min, spec.physical_max)
            assert np.abs(got - clipped).max() <= half_step + 1e-12

    def test_annotation_only_file_round_trip(self):
        spec = synthgen.SynthSpec(seed=3, duration_s=90)
        _, annotations = synthgen.generate(spec)
        hypnogram = synthgen.hypnogram_recording(spec, annotations)
        parsed = parse_edf(write_edf(hypnogram))
        assert parsed.signals == []
        assert parsed.samples == []
        assert parsed.annotations == annotations

    def test_signals_plus_annotations_round_trip(self):
        recording, annotations = synthgen.generate(
            synthgen.SynthSpec(seed=4, duration_s=60)
        )
        recording.annotations = annotations
        parsed = parse_edf(write_edf(recording))
        assert parsed.annotations == annotations
        assert [s.label for s in parsed.signals] == \
            [s.label for s in recording.signals]


# TAL grammar suite: (raw bytes, expected annotations); shared with the
# acceptance tests.
TAL_CASES = [
    (b"+0\x1530\x14Sleep stage W\x14\x00",
     [Annotation(0.0, 30.0, "Sleep stage W")]),
    (b"+180\x14Lights off\x14\x00",
     [Annotation(180.0, 0.0, "Lights off")]),
    (b"+30.5\x151.5\x14Arousal\x14\x00",
     [Annotation(30.5, 1.5, "Arousal")]),
    (b"-10\x14Pre-start event\x14\x00",
     [Annotation(-10.0, 0.0, "Pre-start event")]),
    (b"+0\x14\x14\x00", []),  # timekeeping TAL: no label
    (b"+60\x1530\x14Sleep stage 1\x14Sleep stage 2\x14\x00",
     [Annotation(60.0, 30.0, "Sleep stage 1"),
      Annotation(60.0, 30.0, "Sleep stage 2")]),
    (b"+0\x14\x14\x00+30\x1530\x14Sleep stage R\x14\x00\x00\x00",
     [Annotation(30.0, 30.0, "Sleep stage R")]),
    (b"\x00\x00+90\x1530\x14Sleep stage ?\x14\x00\x00",
     [Annotation(90.0, 30.0, "Sleep stage ?")]),
    (b"+1\x14a\x14\x00+2\x14b\x14\x00+3\x14c\x14\x00",
     [Annotation(1.0, 0.0, "a"), Annotation(2.0, 0.0, "b"),
      Annotation(3.0, 0.0, "c")]),
    (b"", []),
    (b"\x00\x00\x00\x00", []),
    (b"+7200\x150.001\x14Movement time\x14\x00",
     [Annotation(7200.0, 0.001, "Movement time")]),
]

TAL_MALFORMED = [
    b"+30\x1530\x14Sleep stage W\x14",  # missing 0x00 terminator
    b"+abc\x14label\x14\x00",           # non-numeric onset
    b"30\x14label\x14\x00",             # onset missing sign
    b"+30\x00",                          # no 0x14 before terminator
    b"+1\x152x\x14label\x14\x00",       # non-numeric duration
]


class TestTal:
    @pytest.mark.parametrize("raw,expected", TAL_CASES)
    def test_grammar(self, raw, expected):
        assert parse_tal(raw) == expected

    @pytest.mark.parametrize("raw", TAL_MALFORMED)
    def test_malformed(self, raw):
        with pytest.raises(MalformedTal):
            parse_tal(raw)

    def test_hypnogram_onsets_monotonic(self):
        spec = synthgen.SynthSpec(seed=5, duration_s=300)
        _, annotations = synthgen.generate(spec)
        hypnogram = synthgen.hypnogram_recording(spec, annotations)
        parsed = parse_edf(write_edf(hypnogram))
        onsets = [a.onset_s for a in parsed.annotations]
        assert onsets == sorted(onsets)
        assert len(onsets) == 10

    @given(st.lists(
        st.tuples(
            st.integers(0, 10**6),
            st.integers(0, 10**4),
            st.text(
                alphabet=st.characters(
                    codec="ascii", exclude_characters="\x00\x14\x15"
                ),
                min_size=1, max_size=30,
            ),
        ),
        max_size=8,
    ))
    @settings(max_examples=60, deadline=None)
    def test_serialize_parse_round_trip(self, entries):
        annotations = [
            Annotation(float(onset) / 10, float(duration) / 10, label.strip() or "x")
            for onset, duration, label in entries
        ]
        annotations = [
            Annotation(a.onset_s, a.duration_s, a.label) for a in annotations
        ]
        parsed = parse_tal(serialize_tal(annotations))
        assert parsed == annotations
