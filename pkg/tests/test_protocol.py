import io
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aschpuf.asch import run_d_asch_powerup, run_s_asch
from aschpuf.cell import NOMINAL, CellConfig, Environment, ModelConfig, sample_chip
from aschpuf.keygen import BitPlane, Key, golden_plane, stabilize_readout
from aschpuf.maps import MalformedMap, MapSource, StabilizationMap
from aschpuf.protocol import (
    DB_MAGIC,
    DeviceClient,
    DuplicateChip,
    EnrollmentDB,
    EnrollmentRecord,
    Message,
    MessageType,
    ProtocolError,
    TruncatedFrame,
    UnknownChip,
    VerificationServer,
    decode_all,
    decode_frame,
    encode_frame,
    local_pair,
    plane_from_bytes,
    plane_to_bytes,
    read_frame,
    read_messages,
    server_expected_key,
    session_overhead,
    verify,
    write_messages,
)

messages = st.builds(Message, st.sampled_from(list(MessageType)), st.binary(max_size=300))


def planes(rows, cols, seed=0):
    rng = np.random.default_rng(seed)
    a = BitPlane(rng.random((rows, cols)) < 0.5, CellConfig.ORIGINAL, NOMINAL, 101)
    b = BitPlane(rng.random((rows, cols)) < 0.5, CellConfig.HEALED, NOMINAL, 101)
    return a, b


def dynamic_record(chip_id="c0", rows=4, cols=8, seed=0):
    return EnrollmentRecord.dynamic(chip_id, *planes(rows, cols, seed))


class TestFraming:
    @given(messages)
    def test_round_trip(self, msg):
        frame = encode_frame(msg)
        back, end = decode_frame(frame)
        assert back == msg and end == len(frame)
        assert read_frame(io.BytesIO(frame)) == msg

    @given(st.lists(messages, max_size=6))
    def test_stream_of_frames(self, msgs):
        assert decode_all(b"".join(encode_frame(m) for m in msgs)) == msgs

    @given(messages, st.data())
    def test_truncation(self, msg, data):
        frame = encode_frame(msg)
        cut = data.draw(st.integers(1, len(frame) - 1))
        with pytest.raises(TruncatedFrame):
            decode_frame(frame[:cut])
        with pytest.raises(TruncatedFrame):
            read_frame(io.BytesIO(frame[:cut]))

    def test_empty_stream_is_clean_end(self):
        assert read_frame(io.BytesIO(b"")) is None

    @pytest.mark.parametrize("raw", [b"\x00\x00\x00\x00", b"\x01\x00\x00\x00\x09", b"\xff\xff\xff\xff"])
    def test_bad_frames(self, raw):
        with pytest.raises(ProtocolError):
            decode_frame(raw)


class TestRecords:
    def test_dynamic_round_trip(self):
        rec = dynamic_record()
        assert EnrollmentRecord.from_bytes(rec.to_bytes()) == rec

    def test_static_round_trip(self):
        smap = StabilizationMap.empty(2, 4)
        rec = EnrollmentRecord.static("s", Key(np.array([1, 0, 1], bool)), smap)
        back = EnrollmentRecord.from_bytes(rec.to_bytes())
        assert back == rec and back.static_key.bits.tolist() == [True, False, True]

    def test_plane_round_trip(self):
        a, _ = planes(3, 7)
        a = BitPlane(a.bits, a.config, Environment(0.7, -45.0), 11)
        back = plane_from_bytes(plane_to_bytes(a))
        # environment is stored in Q16.16
        assert plane_to_bytes(back) == plane_to_bytes(a)
        assert np.array_equal(back.bits, a.bits) and abs(back.env.vdd - 0.7) < 2**-16

    def test_mode_fields_enforced(self):
        a, b = planes(2, 2)
        with pytest.raises(ValueError):
            EnrollmentRecord.static("x", None, StabilizationMap.empty(2, 2))
        with pytest.raises(ValueError):
            EnrollmentRecord.dynamic("x", a, None)

    def test_truncated_record(self):
        raw = dynamic_record().to_bytes()
        for cut in range(len(raw)):
            with pytest.raises(ProtocolError):
                EnrollmentRecord.from_bytes(raw[:cut])

    def test_bad_utf8_id(self):
        raw = bytearray(dynamic_record(chip_id="ab").to_bytes())
        raw[3] = 0xFF
        with pytest.raises(ProtocolError):
            EnrollmentRecord.from_bytes(bytes(raw))


class TestDb:
    def test_persistence(self, tmp_path):
        path = tmp_path / "enroll.db"
        db = EnrollmentDB(path)
        assert db.enroll(dynamic_record("a")) and db.enroll(dynamic_record("b", seed=1))
        assert path.read_bytes()[:8] == DB_MAGIC
        again = EnrollmentDB(path)
        assert len(again) == 2 and again.lookup("b") == dynamic_record("b", seed=1)

    def test_duplicate_and_idempotent(self):
        db = EnrollmentDB()
        assert db.enroll(dynamic_record("a"))
        assert not db.enroll(dynamic_record("a"))
        with pytest.raises(DuplicateChip):
            db.enroll(dynamic_record("a", seed=5))

    def test_unknown(self):
        with pytest.raises(UnknownChip):
            EnrollmentDB().lookup("nope")

    def test_not_a_db(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"whatever")
        with pytest.raises(ProtocolError):
            EnrollmentDB(path)


class TestExpectedKey:
    def test_empty_map_is_original_plane(self):
        rec = dynamic_record()
        key = server_expected_key(rec, StabilizationMap.empty(4, 8), None)
        assert np.array_equal(key.bits, rec.orig_plane.bits.ravel())

    def test_five_cell_toy(self):
        orig = BitPlane(np.array([[1, 0, 1, 1, 0]], bool), CellConfig.ORIGINAL, NOMINAL, 1)
        healed = BitPlane(np.array([[0, 1, 1, 0, 1]], bool), CellConfig.HEALED, NOMINAL, 1)
        smap = StabilizationMap(np.array([[0, 0, 1, 0, 0]], bool), np.array([[0, 1, 0, 0, 0]], bool),
                                1.0, MapSource.DYNAMIC, NOMINAL)
        key = server_expected_key(EnrollmentRecord.dynamic("t", orig, healed), smap, 3)
        assert key.bits.tolist() == [True, True, True]

    def test_hot_session_mirrors_device(self):
        chip = sample_chip(ModelConfig().noiseless(), "hot", 8, 32)
        rng = np.random.default_rng(0)
        rec = EnrollmentRecord.dynamic(
            chip.chip_id,
            golden_plane(chip, CellConfig.ORIGINAL, NOMINAL, rng, 1),
            golden_plane(chip, CellConfig.HEALED, NOMINAL, rng, 1))
        flow = run_d_asch_powerup(chip, Environment(1.2, 125.0), 30.0, rng, key_length=64)
        assert server_expected_key(rec, flow.map, 64) == flow.key

    def test_shape_mismatch(self):
        db = EnrollmentDB()
        db.enroll(dynamic_record())
        with pytest.raises(MalformedMap):
            verify(db, "c0", StabilizationMap.empty(2, 2), Key(np.zeros(4, bool)))


class TestVerify:
    @pytest.fixture
    def db(self):
        db = EnrollmentDB()
        db.enroll(dynamic_record())
        return db

    def test_accept_and_single_flip(self, db):
        smap = StabilizationMap.empty(4, 8)
        key = server_expected_key(db.lookup("c0"), smap, 20)
        assert verify(db, "c0", smap, key).accepted
        bits = key.bits.copy()
        bits[7] ^= True
        assert not verify(db, "c0", smap, Key(bits)).accepted

    def test_unknown_chip(self, db):
        with pytest.raises(UnknownChip):
            verify(db, "zz", None, Key(np.zeros(4, bool)))

    def test_dynamic_needs_map(self, db):
        with pytest.raises(MalformedMap):
            verify(db, "c0", None, Key(np.zeros(4, bool)))

    def test_static_mode_without_map(self, chip):
        flow = run_s_asch(chip, NOMINAL, 10.0, np.random.default_rng(0))
        db = EnrollmentDB()
        db.enroll(EnrollmentRecord.static(chip.chip_id, flow.key, flow.map))
        assert verify(db, chip.chip_id, None, Key(flow.key.bits[:128])).accepted
        assert not verify(db, chip.chip_id, None, Key(~flow.key.bits[:128])).accepted

    def test_static_key_too_long(self):
        db = EnrollmentDB()
        db.enroll(EnrollmentRecord.static("s", Key(np.ones(4, bool)), StabilizationMap.empty(1, 8)))
        assert not verify(db, "s", None, Key(np.ones(6, bool))).accepted


class TestOverhead:
    def test_4096_cells(self):
        assert session_overhead(StabilizationMap.empty(32, 128)) == 29 + 2 * 512

    def test_independent_of_content(self):
        rng = np.random.default_rng(0)
        sizes = {session_overhead(StabilizationMap(rng.random((32, 128)) < p, rng.random((32, 128)) < p,
                                                   s, MapSource.DYNAMIC, NOMINAL), n)
                 for p, s, n in [(0.0, 0.0, 1), (0.3, 12.0, 128), (0.9, 30.0, 4096)]}
        assert sizes == {1053}


def _enroll_and_verify(client):
    rec = dynamic_record("net")
    assert client.enroll(rec).accepted
    assert client.enroll(rec).reason == "already enrolled"
    smap = StabilizationMap.empty(4, 8)
    key = stabilize_readout(rec.orig_plane, rec.healed_plane, smap, 16)
    assert client.verify("net", key, smap).accepted
    assert not client.verify("net", Key(~key.bits), smap).accepted
    v = client.verify("ghost", key, smap)
    assert not v.accepted and "unknown" in v.reason


class TestTransport:
    def test_local_pair(self):
        client, thread = local_pair(EnrollmentDB())
        with client:
            _enroll_and_verify(client)
        thread.join(5)
        assert not thread.is_alive()

    def test_tcp_server(self):
        server = VerificationServer(("127.0.0.1", 0), EnrollmentDB())
        t = threading.Thread(target=server.serve_forever, daemon=True)
        t.start()
        try:
            with DeviceClient.connect(*server.server_address, timeout=10) as client:
                _enroll_and_verify(client)
        finally:
            server.shutdown()
            server.server_close()

    def test_malformed_enroll_gets_rejection(self):
        client, _ = local_pair(EnrollmentDB())
        with client:
            client._send(Message(MessageType.ENROLL_DYNAMIC, b"\x01\x02"))
            v = client._verdict()
        assert not v.accepted and v.reason.startswith("malformed")

    def test_mode_tag_mismatch(self):
        client, _ = local_pair(EnrollmentDB())
        with client:
            client._send(Message(MessageType.ENROLL_STATIC, dynamic_record().to_bytes()))
            assert not client._verdict().accepted

    def test_file_transport(self, tmp_path):
        msgs = [Message(MessageType.KEY_PROOF, b"abc"), Message(MessageType.VERDICT, b"\x01ok")]
        path = tmp_path / "frames.bin"
        write_messages(path, msgs)
        assert read_messages(path) == msgs
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(TruncatedFrame):
            read_messages(path)
