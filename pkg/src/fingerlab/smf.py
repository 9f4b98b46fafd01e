"""Minimal Standard MIDI File reader: note on/off pairs onto a frame grid.

Supports format 0 and 1 files with metric division. Chunk lengths are
big-endian; delta times are variable-length quantities; running status is
honored. Only note events and set-tempo meta events are interpreted.
"""
from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path

from .corpus import NoteRecord
from .errors import FormatError

log = logging.getLogger(__name__)

DEFAULT_TEMPO_US = 500_000  # microseconds per quarter note, i.e. 120 BPM
PIANO_LOW, PIANO_HIGH = 21, 108


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def bytes(self, n: int) -> bytes:
        if self.remaining() < n:
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.bytes(1)[0]

    def u16(self) -> int:
        b = self.bytes(2)
        return (b[0] << 8) | b[1]

    def u32(self) -> int:
        b = self.bytes(4)
        return (b[0] << 24) | (b[1] << 16) | (b[2] << 8) | b[3]

    def vlq(self) -> int:
        value = 0
        for _ in range(4):
            if self.remaining() < 1:
                raise FormatError(f"truncated variable-length quantity at offset {self.pos}")
            b = self.u8()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise FormatError(f"variable-length quantity longer than 4 bytes at offset {self.pos}")


@dataclass(frozen=True)
class _RawNote:
    pitch: int
    onset_tick: int
    offset_tick: int


def _parse_track(reader: _Reader, tempo_events: list[tuple[int, int]]) -> list[_RawNote]:
    notes: list[_RawNote] = []
    open_notes: dict[tuple[int, int], deque[int]] = defaultdict(deque)
    tick = 0
    status = None
    ended = False
    while reader.remaining() > 0 and not ended:
        tick += reader.vlq()
        first = reader.u8()
        if first < 0x80:
            if status is None:
                raise FormatError(f"data byte {first:#x} with no running status at offset {reader.pos}")
            data0 = first
        else:
            status = first
            data0 = None

        if status == 0xFF:
            meta_type = reader.u8() if data0 is None else data0
            length = reader.vlq()
            payload = reader.bytes(length)
            status = None  # meta events cancel running status
            if meta_type == 0x51 and length == 3:
                tempo_events.append((tick, (payload[0] << 16) | (payload[1] << 8) | payload[2]))
            elif meta_type == 0x2F:
                ended = True
            continue
        if status in (0xF0, 0xF7):
            length = reader.vlq()
            reader.bytes(length)
            status = None
            continue
        if status is None or status < 0x80:
            raise FormatError(f"bad status byte at offset {reader.pos}")

        kind = status & 0xF0
        channel = status & 0x0F
        if kind in (0xC0, 0xD0):
            if data0 is None:
                reader.u8()
            continue
        d0 = data0 if data0 is not None else reader.u8()
        d1 = reader.u8()
        if kind == 0x90 and d1 > 0:
            open_notes[(channel, d0)].append(tick)
        elif kind == 0x80 or (kind == 0x90 and d1 == 0):
            stack = open_notes[(channel, d0)]
            if stack:
                notes.append(_RawNote(pitch=d0, onset_tick=stack.popleft(), offset_tick=tick))
        # other channel messages (0xA0, 0xB0, 0xE0) carry two data bytes, already consumed

    for (channel, pitch), stack in open_notes.items():
        for onset in stack:
            notes.append(_RawNote(pitch=pitch, onset_tick=onset, offset_tick=tick))
    return notes


def _tick_to_seconds(tick: int, tempo_map: list[tuple[int, int]], ppq: int) -> float:
    seconds = 0.0
    prev_tick = 0
    tempo = DEFAULT_TEMPO_US
    for at_tick, new_tempo in tempo_map:
        if at_tick >= tick:
            break
        seconds += (at_tick - prev_tick) * tempo / (1e6 * ppq)
        prev_tick = at_tick
        tempo = new_tempo
    seconds += (tick - prev_tick) * tempo / (1e6 * ppq)
    return seconds


def _to_frame(seconds: float, frame_rate_hz: float) -> int:
    # half-up rounding, fixed so identical inputs always land on the same frame
    return int(seconds * frame_rate_hz + 0.5)


def parse_smf(path: str | Path, frame_rate_hz: float) -> list[NoteRecord]:
    """Extract note intervals from a format-0/1 SMF onto the motion-frame grid.

    Each closed note-on/note-off pair within the 88-key range becomes a
    NoteRecord with key_index = pitch - 21 and label 0. Note-on with velocity
    0 counts as note-off; unclosed notes are closed at end of track. Tempo
    comes from set-tempo events (default 120 BPM). Pitches outside 21..108
    are skipped with a warning.
    """
    data = Path(path).read_bytes()
    reader = _Reader(data)
    if reader.bytes(4) != b"MThd":
        raise FormatError(f"{path}: bad header chunk (expected MThd)")
    header_len = reader.u32()
    if header_len < 6:
        raise FormatError(f"{path}: header chunk too short ({header_len} bytes)")
    fmt = reader.u16()
    n_tracks = reader.u16()
    division = reader.u16()
    reader.bytes(header_len - 6)
    if fmt not in (0, 1):
        raise FormatError(f"{path}: unsupported SMF format {fmt}")
    if division & 0x8000:
        raise FormatError(f"{path}: SMPTE division is not supported (metric time required)")
    if division == 0:
        raise FormatError(f"{path}: division must be positive")

    tempo_events: list[tuple[int, int]] = []
    raw_notes: list[_RawNote] = []
    tracks_read = 0
    while reader.remaining() >= 8 and tracks_read < n_tracks:
        chunk_id = reader.bytes(4)
        chunk_len = reader.u32()
        body = reader.bytes(chunk_len)
        if chunk_id != b"MTrk":
            continue  # unknown chunks are skipped per the SMF spec
        raw_notes.extend(_parse_track(_Reader(body), tempo_events))
        tracks_read += 1
    if tracks_read == 0:
        raise FormatError(f"{path}: no track chunks found")

    tempo_events.sort()
    records: list[tuple[int, int, int, float, float]] = []
    for raw in raw_notes:
        if not PIANO_LOW <= raw.pitch <= PIANO_HIGH:
            log.warning("skipping pitch %d outside the 88-key range", raw.pitch)
            continue
        onset_s = _tick_to_seconds(raw.onset_tick, tempo_events, division)
        offset_s = _tick_to_seconds(raw.offset_tick, tempo_events, division)
        onset = _to_frame(onset_s, frame_rate_hz)
        offset = max(_to_frame(offset_s, frame_rate_hz), onset + 1)
        records.append((onset, raw.pitch - PIANO_LOW, offset, onset_s, offset_s))

    records.sort()
    return [
        NoteRecord(note_id=f"smf{i:05d}", key_index=key, onset_frame=onset, offset_frame=offset)
        for i, (onset, key, offset, _, _) in enumerate(records)
    ]
