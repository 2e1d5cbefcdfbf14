"""Reader/writer for EDF and EDF+ files, including TAL annotations.

EDF files carry a 256-byte ASCII global header, one 256-byte ASCII header
block per signal (stored field-major), and data records of 16-bit
little-endian two's-complement samples. EDF+ adds an "EDF Annotations"
signal whose byte content is a sequence of TALs (time-stamped annotation
lists) delimited by 0x14/0x15 separators and 0x00 terminators.

All sample data is converted to physical units at parse time via the
linear mapping defined by the per-signal calibration fields.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass, field

import numpy as np

ANNOTATION_LABEL = "EDF Annotations"

_SEP_DURATION = 0x15
_SEP_FIELD = 0x14
_TERMINATOR = 0x00


class EdfError(Exception):
    """Base class for EDF parse/write failures."""


class TruncatedFile(EdfError):
    """Fewer bytes than the header promises."""


class MalformedHeader(EdfError):
    """Non-numeric numeric field, bad date, or inconsistent layout."""


class DegenerateCalibration(EdfError):
    """digital_min == digital_max (or physical range collapsed)."""


class InconsistentLengths(EdfError):
    """Sample array lengths disagree with num_records × samples_per_record."""


class MalformedTal(EdfError):
    """TAL missing its terminator or carrying a non-numeric onset."""


class UnsupportedEdf(EdfError):
    """Valid EDF variant this reader does not handle (e.g. EDF+D)."""


class FieldOverflow(EdfError):
    """A header value cannot be represented in its fixed-width ASCII field."""


@dataclass
class SignalSpec:
    """Per-signal header block of an EDF file."""

    label: str
    transducer: str = ""
    physical_dimension: str = ""
    physical_min: float = -1.0
    physical_max: float = 1.0
    digital_min: int = -32768
    digital_max: int = 32767
    samples_per_record: int = 1
    prefilter: str = ""

    def validate(self) -> None:
        if self.digital_min == self.digital_max:
            raise DegenerateCalibration(
                f"signal {self.label!r}: digital_min == digital_max == {self.digital_min}"
            )
        if self.physical_min == self.physical_max:
            raise DegenerateCalibration(
                f"signal {self.label!r}: physical_min == physical_max == {self.physical_min}"
            )
        if self.samples_per_record < 1:
            raise MalformedHeader(
                f"signal {self.label!r}: samples_per_record must be >= 1, "
                f"got {self.samples_per_record}"
            )

    def digital_to_physical(self, digital: np.ndarray) -> np.ndarray:
        scale = (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)
        return (digital.astype(np.float64) - self.digital_min) * scale + self.physical_min

    def physical_to_digital(self, physical: np.ndarray) -> np.ndarray:
        scale = (self.digital_max - self.digital_min) / (self.physical_max - self.physical_min)
        digital = np.rint((np.asarray(physical, dtype=np.float64) - self.physical_min) * scale
                          + self.digital_min)
        return np.clip(digital, self.digital_min, self.digital_max).astype(np.int16)


@dataclass
class Annotation:
    """One annotation: onset/duration in seconds from recording start."""

    onset_s: float
    duration_s: float
    label: str


@dataclass
class EdfRecording:
    """Parsed EDF/EDF+ file with samples in physical units.

    ``samples[i]`` is the flat float array for ``signals[i]``; annotation
    channels are parsed into ``annotations`` and never appear in either list.
    """

    version: str = "0"
    patient_id: str = ""
    recording_id: str = ""
    start_datetime: datetime.datetime = datetime.datetime(2000, 1, 1)
    record_duration_s: float = 1.0
    num_records: int = 0
    signals: list[SignalSpec] = field(default_factory=list)
    samples: list[np.ndarray] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)

    def sample_rate(self, index: int) -> float:
        return self.signals[index].samples_per_record / self.record_duration_s

    def duration_s(self) -> float:
        return self.num_records * self.record_duration_s

    def signal_index(self, label: str) -> int:
        for i, spec in enumerate(self.signals):
            if spec.label == label:
                return i
        raise KeyError(label)


def _ascii(raw: bytes) -> str:
    try:
        return raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"non-ASCII header bytes: {raw[:16]!r}") from exc


def _parse_int(raw: bytes, what: str) -> int:
    text = _ascii(raw).strip()
    try:
        return int(text)
    except ValueError as exc:
        raise MalformedHeader(f"{what}: expected integer, got {text!r}") from exc


def _parse_float(raw: bytes, what: str) -> float:
    text = _ascii(raw).strip()
    try:
        return float(text)
    except ValueError as exc:
        raise MalformedHeader(f"{what}: expected number, got {text!r}") from exc


def _parse_start(date_raw: bytes, time_raw: bytes) -> datetime.datetime:
    date_text = _ascii(date_raw).strip()
    time_text = _ascii(time_raw).strip()
    try:
        day, month, yy = (int(p) for p in date_text.split("."))
        hour, minute, second = (int(p) for p in time_text.split("."))
        # EDF clipping convention: 85-99 -> 1985-1999, 00-84 -> 2000-2084.
        year = 1900 + yy if yy >= 85 else 2000 + yy
        return datetime.datetime(year, month, day, hour, minute, second)
    except (ValueError, TypeError) as exc:
        raise MalformedHeader(
            f"bad start date/time: {date_text!r} {time_text!r}"
        ) from exc


def _pad(text: str, width: int, what: str) -> bytes:
    raw = text.encode("ascii", errors="strict") if text.isascii() else None
    if raw is None or len(raw) > width:
        raise FieldOverflow(f"{what}: {text!r} does not fit in {width} ASCII bytes")
    return raw.ljust(width)


def _fmt_number(value: float, width: int, what: str) -> bytes:
    """Shortest ASCII rendering of value that parses back exactly."""
    if float(value).is_integer() and abs(value) < 10 ** (width + 1):
        text = str(int(value))
    else:
        text = repr(float(value))
    if len(text) > width or float(text) != float(value):
        raise FieldOverflow(f"{what}: {value!r} does not fit in {width} ASCII bytes")
    return text.ljust(width).encode("ascii")


def parse_edf(data: bytes) -> EdfRecording:
    """Parse an EDF/EDF+ byte stream into physical-unit sample arrays.

    Raises TruncatedFile when the buffer is shorter than the header
    promises, MalformedHeader on unparseable or inconsistent header
    fields (including trailing bytes beyond the promised length),
    DegenerateCalibration on collapsed calibration ranges, and
    UnsupportedEdf for discontinuous (EDF+D) files.
    """
    if len(data) < 256:
        raise TruncatedFile(f"need at least 256 header bytes, got {len(data)}")

    version = _ascii(data[0:8]).strip()
    patient_id = _ascii(data[8:88]).strip()
    recording_id = _ascii(data[88:168]).strip()
    start = _parse_start(data[168:176], data[176:184])
    header_bytes = _parse_int(data[184:192], "header byte count")
    reserved = _ascii(data[192:236]).strip()
    num_records = _parse_int(data[236:244], "record count")
    record_duration = _parse_float(data[244:252], "record duration")
    num_signals = _parse_int(data[252:256], "signal count")

    if reserved.startswith("EDF+D"):
        raise UnsupportedEdf("discontinuous (EDF+D) recordings are not supported")
    if num_signals < 1:
        raise MalformedHeader(f"signal count must be >= 1, got {num_signals}")
    if num_records < 0:
        raise MalformedHeader(f"record count must be >= 0, got {num_records}")
    expected_header = 256 * (1 + num_signals)
    if header_bytes != expected_header:
        raise MalformedHeader(
            f"header byte count {header_bytes} != 256*(1+{num_signals})"
        )
    if len(data) < expected_header:
        raise TruncatedFile(
            f"header promises {expected_header} bytes, got {len(data)}"
        )

    def block(offset: int, width: int, i: int) -> bytes:
        base = 256 + offset * num_signals
        return data[base + i * width: base + (i + 1) * width]

    specs = []
    for i in range(num_signals):
        specs.append(SignalSpec(
            label=_ascii(block(0, 16, i)).strip(),
            transducer=_ascii(block(16, 80, i)).strip(),
            physical_dimension=_ascii(block(96, 8, i)).strip(),
            physical_min=_parse_float(block(104, 8, i), f"signal {i} physical_min"),
            physical_max=_parse_float(block(112, 8, i), f"signal {i} physical_max"),
            digital_min=_parse_int(block(120, 8, i), f"signal {i} digital_min"),
            digital_max=_parse_int(block(128, 8, i), f"signal {i} digital_max"),
            prefilter=_ascii(block(136, 80, i)).strip(),
            samples_per_record=_parse_int(block(216, 8, i), f"signal {i} samples_per_record"),
        ))

    for spec in specs:
        if spec.samples_per_record < 1:
            raise MalformedHeader(
                f"signal {spec.label!r}: samples_per_record must be >= 1"
            )
        if spec.digital_min == spec.digital_max:
            raise DegenerateCalibration(
                f"signal {spec.label!r}: digital_min == digital_max"
            )
        if spec.label != ANNOTATION_LABEL and spec.physical_min == spec.physical_max:
            raise DegenerateCalibration(
                f"signal {spec.label!r}: physical_min == physical_max"
            )

    record_bytes = sum(s.samples_per_record for s in specs) * 2
    expected_total = expected_header + num_records * record_bytes
    if len(data) < expected_total:
        raise TruncatedFile(
            f"file promises {expected_total} bytes, got {len(data)}"
        )
    if len(data) > expected_total:
        raise MalformedHeader(
            f"{len(data) - expected_total} trailing bytes beyond the "
            f"promised {expected_total}"
        )

    offsets = np.cumsum([0] + [s.samples_per_record * 2 for s in specs])
    signals_out: list[SignalSpec] = []
    samples_out: list[np.ndarray] = []
    annotations: list[Annotation] = []

    for i, spec in enumerate(specs):
        chunks = []
        for rec in range(num_records):
            lo = expected_header + rec * record_bytes + int(offsets[i])
            chunks.append(data[lo: lo + spec.samples_per_record * 2])
        if spec.label == ANNOTATION_LABEL:
            for chunk in chunks:
                annotations.extend(parse_tal(chunk))
        else:
            raw = b"".join(chunks)
            digital = np.frombuffer(raw, dtype="<i2")
            signals_out.append(spec)
            samples_out.append(spec.digital_to_physical(digital))

    return EdfRecording(
        version=version,
        patient_id=patient_id,
        recording_id=recording_id,
        start_datetime=start,
        record_duration_s=record_duration,
        num_records=num_records,
        signals=signals_out,
        samples=samples_out,
        annotations=annotations,
    )


def write_edf(recording: EdfRecording) -> bytes:
    """Serialize a recording to a standards-conformant EDF/EDF+ byte stream.

    Physical values are mapped back to 16-bit digital values by inverting
    the calibration line, rounding to nearest and clipping to
    [digital_min, digital_max]. If annotations are present an
    "EDF Annotations" channel is appended and the file is marked EDF+C.
    """
    if len(recording.signals) != len(recording.samples):
        raise InconsistentLengths(
            f"{len(recording.signals)} signal specs but "
            f"{len(recording.samples)} sample arrays"
        )
    for spec in recording.signals:
        spec.validate()
    for spec, arr in zip(recording.signals, recording.samples):
        expected = recording.num_records * spec.samples_per_record
        if len(arr) != expected:
            raise InconsistentLengths(
                f"signal {spec.label!r}: {len(arr)} samples, expected "
                f"{recording.num_records} records x {spec.samples_per_record}"
            )

    num_records = recording.num_records
    ann_records: list[bytes] = []
    if recording.annotations:
        if num_records < 1:
            raise InconsistentLengths("annotations require at least one data record")
        ann_records = _annotation_records(
            recording.annotations, num_records, recording.record_duration_s
        )

    specs = list(recording.signals)
    if ann_records:
        spr_ann = (max(len(r) for r in ann_records) + 1) // 2
        specs = specs + [SignalSpec(
            label=ANNOTATION_LABEL,
            physical_min=-1.0,
            physical_max=1.0,
            digital_min=-32768,
            digital_max=32767,
            samples_per_record=spr_ann,
        )]

    num_signals = len(specs)
    if num_signals < 1:
        raise InconsistentLengths("recording has neither signals nor annotations")

    start = recording.start_datetime
    if not 1985 <= start.year <= 2084:
        raise FieldOverflow(f"start year {start.year} outside EDF range 1985-2084")
    yy = start.year - 1900 if start.year < 2000 else start.year - 2000

    header = b"".join([
        _pad(recording.version or "0", 8, "version"),
        _pad(recording.patient_id, 80, "patient_id"),
        _pad(recording.recording_id, 80, "recording_id"),
        f"{start.day:02d}.{start.month:02d}.{yy:02d}".encode("ascii"),
        f"{start.hour:02d}.{start.minute:02d}.{start.second:02d}".encode("ascii"),
        _fmt_number(256 * (1 + num_signals), 8, "header bytes"),
        _pad("EDF+C" if ann_records else "", 44, "reserved"),
        _fmt_number(num_records, 8, "record count"),
        _fmt_number(recording.record_duration_s, 8, "record duration"),
        _fmt_number(num_signals, 4, "signal count"),
    ])

    def column(fmt, width, what):
        return b"".join(fmt(s, width, what) for s in specs)

    signal_header = b"".join([
        column(lambda s, w, _: _pad(s.label, w, "label"), 16, None),
        column(lambda s, w, _: _pad(s.transducer, w, "transducer"), 80, None),
        column(lambda s, w, _: _pad(s.physical_dimension, w, "dimension"), 8, None),
        column(lambda s, w, _: _fmt_number(s.physical_min, w, "physical_min"), 8, None),
        column(lambda s, w, _: _fmt_number(s.physical_max, w, "physical_max"), 8, None),
        column(lambda s, w, _: _fmt_number(s.digital_min, w, "digital_min"), 8, None),
        column(lambda s, w, _: _fmt_number(s.digital_max, w, "digital_max"), 8, None),
        column(lambda s, w, _: _pad(s.prefilter, w, "prefilter"), 80, None),
        column(lambda s, w, _: _fmt_number(s.samples_per_record, w, "samples_per_record"), 8, None),
        column(lambda s, w, _: _pad("", w, "reserved"), 32, None),
    ])

    digitals = [
        spec.physical_to_digital(arr)
        for spec, arr in zip(recording.signals, recording.samples)
    ]

    records = []
    for rec in range(num_records):
        for i, spec in enumerate(recording.signals):
            spr = spec.samples_per_record
            records.append(digitals[i][rec * spr: (rec + 1) * spr].astype("<i2").tobytes())
        if ann_records:
            spr_ann = specs[-1].samples_per_record
            records.append(ann_records[rec].ljust(spr_ann * 2, b"\x00"))

    return header + signal_header + b"".join(records)


def parse_tal(data: bytes) -> list[Annotation]:
    """Parse the raw byte content of an "EDF Annotations" channel record.

    Each TAL has the form ``+onset[0x15 duration]0x14 label 0x14 ... 0x00``
    and yields one Annotation per non-empty label; timekeeping TALs (empty
    label) yield nothing. Zero bytes between TALs are padding.
    """
    annotations: list[Annotation] = []
    pos = 0
    n = len(data)
    while pos < n:
        if data[pos] == _TERMINATOR:
            pos += 1
            continue
        end = data.find(b"\x00", pos)
        if end < 0:
            raise MalformedTal("TAL missing its 0x00 terminator")
        chunk = data[pos:end]
        pos = end + 1

        parts = chunk.split(bytes([_SEP_FIELD]))
        if len(parts) < 2 or parts[-1] != b"":
            raise MalformedTal(f"TAL not terminated by 0x14 before 0x00: {chunk!r}")
        head, labels = parts[0], parts[1:-1]

        if not head[:1] in (b"+", b"-"):
            raise MalformedTal(f"TAL onset must start with '+' or '-': {head!r}")
        onset_raw, _, duration_raw = head.partition(bytes([_SEP_DURATION]))
        try:
            onset = float(onset_raw)
            duration = float(duration_raw) if duration_raw else 0.0
        except ValueError as exc:
            raise MalformedTal(f"non-numeric TAL onset/duration: {head!r}") from exc

        for label in labels:
            text = label.decode("utf-8", errors="replace")
            if text:
                annotations.append(Annotation(onset, duration, text))
    return annotations


def serialize_tal(annotations: list[Annotation]) -> bytes:
    """Render annotations as consecutive TALs (inverse of parse_tal)."""
    out = bytearray()
    for ann in annotations:
        out += _tal_number(ann.onset_s, signed=True)
        if ann.duration_s:
            out.append(_SEP_DURATION)
            out += _tal_number(ann.duration_s, signed=False)
        out.append(_SEP_FIELD)
        out += ann.label.encode("utf-8")
        out.append(_SEP_FIELD)
        out.append(_TERMINATOR)
    return bytes(out)


def _tal_number(value: float, signed: bool) -> bytes:
    text = str(int(value)) if float(value).is_integer() else repr(float(value))
    if signed and not text.startswith("-"):
        text = "+" + text
    return text.encode("ascii")


def _annotation_records(
    annotations: list[Annotation], num_records: int, record_duration_s: float
) -> list[bytes]:
    """Distribute annotations into per-record TAL byte blocks.

    Record r starts with the mandatory timekeeping TAL for its onset;
    each annotation lands in the record containing its onset (clamped to
    the last record so late annotations are never dropped).
    """
    buckets: list[list[Annotation]] = [[] for _ in range(num_records)]
    for ann in sorted(annotations, key=lambda a: a.onset_s):
        if record_duration_s > 0:
            rec = int(math.floor(ann.onset_s / record_duration_s))
        else:
            rec = 0
        rec = min(max(rec, 0), num_records - 1)
        buckets[rec].append(ann)

    records = []
    for rec in range(num_records):
        onset = rec * record_duration_s
        block = _tal_number(onset, signed=True) + bytes([_SEP_FIELD, _SEP_FIELD, _TERMINATOR])
        block += serialize_tal(buckets[rec])
        records.append(block)
    return records
