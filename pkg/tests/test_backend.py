import json
import sys
import threading
import time

import pytest

from gemmbench import backend as be
from gemmbench.errors import BackendError, ProtocolError
from gemmbench.matrix import mse, random_matrix, read_matrix_file, serial_gemm_ref, write_matrix_file


@pytest.fixture
def operands(tmp_path):
    def build(n, seed=1):
        a, b = random_matrix(n, n, seed), random_matrix(n, n, seed + 1)
        write_matrix_file(tmp_path / "a.gemmmat", a)
        write_matrix_file(tmp_path / "b.gemmmat", b)
        return a, b, tmp_path / "a.gemmmat", tmp_path / "b.gemmmat"
    return build


@pytest.fixture
def spawn(mock_argv):
    handles = []

    def start(*flags, **kwargs):
        h = be.spawn_backend(mock_argv(*flags), **kwargs)
        handles.append(h)
        return h
    yield start
    for h in handles:
        be.shutdown(h)


def test_encode_decode_roundtrip():
    line = be.encode(7, "gemm", {"n": 4})
    assert line.endswith("\n") and line.count("\n") == 1
    assert be.decode(line) == {"id": 7, "type": "gemm", "payload": {"n": 4}}


@pytest.mark.parametrize("line", ["not json", "[1,2]", '{"id": 1, "type": "x"}',
                                  '{"id": 1, "type": "x", "payload": 3}'])
def test_decode_rejects(line):
    with pytest.raises(ProtocolError):
        be.decode(line)


def test_handshake(spawn):
    h = spawn()
    assert h.info == be.BackendInfo(1, "mock", "cpu", False, False)
    assert h.alive


def test_missing_executable():
    with pytest.raises(BackendError):
        be.spawn_backend(["/nonexistent/backend-binary"])


def test_version_mismatch(mock_argv):
    with pytest.raises(BackendError, match="99.*1|version"):
        be.spawn_backend(mock_argv("--protocol-version", "99"))


def test_handshake_timeout():
    t0 = time.monotonic()
    with pytest.raises(BackendError, match="did not reply"):
        be.spawn_backend([sys.executable, "-c", "import time; time.sleep(30)"], handshake_timeout=0.5)
    assert time.monotonic() - t0 < 5


def test_non_hello_first_message():
    script = "import json; print(json.dumps({'id': 0, 'type': 'result', 'payload': {}}), flush=True); input()"
    with pytest.raises(ProtocolError):
        be.spawn_backend([sys.executable, "-c", script])


def test_gemm_through_protocol(spawn, operands, tmp_path):
    a, b, pa, pb = operands(64)
    h = spawn()
    res = be.request_gemm(h, pa, pb, 64, reps=10, warmup=1, result_path=tmp_path / "c.gemmmat")
    assert res.ok and len(res.per_rep_time_ms) == 10
    ref = serial_gemm_ref(a, b)
    assert res.result.bit_equal(ref)
    assert mse(read_matrix_file(res.result_path), ref) == 0.0


def test_request_ids_increase(spawn, operands):
    _, _, pa, pb = operands(8)
    h = spawn()
    for _ in range(3):
        assert be.request_gemm(h, pa, pb, 8, reps=2, warmup=0).ok
    assert h._next_id == 4


def test_sleep_ms_fake_timing(spawn, operands):
    _, _, pa, pb = operands(16)
    res = be.request_gemm(spawn("--sleep-ms", "2.5"), pa, pb, 16, reps=4, warmup=0)
    assert res.per_rep_time_ms == [2.5] * 4


def test_injected_error(spawn, operands):
    _, _, pa, pb = operands(16)
    h = spawn("--inject-error")
    res = be.request_gemm(h, pa, pb, 16, reps=3, warmup=0)
    assert res.status == "error" and "injected" in res.message
    assert h.alive


def test_perturbed_result_mse(spawn, operands):
    a, b, pa, pb = operands(64)
    res = be.request_gemm(spawn("--perturb", "1e-3"), pa, pb, 64, reps=1, warmup=0)
    assert 0.5e-6 <= mse(res.result, serial_gemm_ref(a, b)) <= 2e-6


def test_hang_times_out_and_is_killable(spawn, operands):
    _, _, pa, pb = operands(8)
    h = spawn("--hang")
    with pytest.raises(BackendError, match="did not reply"):
        be.request_gemm(h, pa, pb, 8, reps=1, warmup=0, timeout=0.5)
    t0 = time.monotonic()
    be.shutdown(h)
    assert time.monotonic() - t0 < 3.5
    assert not h.alive


def test_shutdown_during_inflight_request(spawn, operands):
    _, _, pa, pb = operands(8)
    h = spawn("--hang")
    errors = []

    def request():
        try:
            be.request_gemm(h, pa, pb, 8, reps=1, warmup=0)
        except BackendError as exc:
            errors.append(exc)

    t = threading.Thread(target=request)
    t.start()
    time.sleep(0.3)
    be.shutdown(h)
    t.join(timeout=10)
    assert not t.is_alive()
    assert len(errors) == 1


def test_shutdown_idempotent(spawn):
    h = spawn()
    be.shutdown(h)
    assert h.proc.returncode == 0
    be.shutdown(h)
    assert not h.alive


def test_ignore_shutdown_forced(spawn):
    h = spawn("--ignore-shutdown")
    t0 = time.monotonic()
    be.shutdown(h)
    elapsed = time.monotonic() - t0
    assert 1.5 < elapsed < 3.5
    assert h.proc.returncode is not None and h.proc.returncode != 0


def test_request_after_death(spawn, operands):
    _, _, pa, pb = operands(8)
    h = spawn()
    be.shutdown(h)
    with pytest.raises(BackendError):
        be.request_gemm(h, pa, pb, 8, reps=1, warmup=0)


def scripted_backend(reply_payload, reply_id=None, reply_type="result"):
    """A one-shot backend that answers any gemm with a fixed reply."""
    hello = be.encode(0, "hello", {"protocol_version": 1, "name": "scripted", "device": "cpu"})
    script = (
        "import json, sys\n"
        f"sys.stdout.write({hello!r}); sys.stdout.flush()\n"
        "for line in sys.stdin:\n"
        "    msg = json.loads(line)\n"
        "    if msg['type'] == 'shutdown': break\n"
        f"    rid = msg['id'] if {reply_id!r} is None else {reply_id!r}\n"
        f"    sys.stdout.write(json.dumps({{'id': rid, 'type': {reply_type!r}, 'payload': {reply_payload!r}}}) + '\\n')\n"
        "    sys.stdout.flush()\n"
    )
    return [sys.executable, "-c", script]


def test_mismatched_reply_id(operands):
    _, _, pa, pb = operands(4)
    h = be.spawn_backend(scripted_backend({"status": "error", "message": "x"}, reply_id=99))
    try:
        with pytest.raises(ProtocolError, match="does not match"):
            be.request_gemm(h, pa, pb, 4, reps=1, warmup=0)
    finally:
        be.shutdown(h)


def test_wrong_timing_count(operands, tmp_path):
    a, b, pa, pb = operands(4)
    out = tmp_path / "c.gemmmat"
    write_matrix_file(out, serial_gemm_ref(a, b))
    h = be.spawn_backend(scripted_backend({"status": "ok", "per_rep_time_ms": [1.0], "result_path": str(out)}))
    try:
        with pytest.raises(ProtocolError, match="1 timings for 3 reps"):
            be.request_gemm(h, pa, pb, 4, reps=3, warmup=0)
    finally:
        be.shutdown(h)


def test_wrong_result_shape(operands, tmp_path):
    _, _, pa, pb = operands(4)
    out = tmp_path / "c.gemmmat"
    write_matrix_file(out, random_matrix(3, 3, 1))
    h = be.spawn_backend(scripted_backend({"status": "ok", "per_rep_time_ms": [1.0], "result_path": str(out)}))
    try:
        with pytest.raises(ProtocolError, match="expected 4x4"):
            be.request_gemm(h, pa, pb, 4, reps=1, warmup=0)
    finally:
        be.shutdown(h)


def test_unknown_status(operands):
    _, _, pa, pb = operands(4)
    h = be.spawn_backend(scripted_backend({"status": "maybe"}))
    try:
        with pytest.raises(ProtocolError):
            be.request_gemm(h, pa, pb, 4, reps=1, warmup=0)
    finally:
        be.shutdown(h)


def test_crash_mid_request(operands):
    _, _, pa, pb = operands(4)
    hello = be.encode(0, "hello", {"protocol_version": 1, "name": "crashy"})
    script = f"import sys; sys.stdout.write({hello!r}); sys.stdout.flush(); sys.stdin.readline(); sys.exit(9)"
    h = be.spawn_backend([sys.executable, "-c", script])
    with pytest.raises(BackendError, match="exited"):
        be.request_gemm(h, pa, pb, 4, reps=1, warmup=0)
    be.shutdown(h)


def test_hello_payload_validation():
    with pytest.raises(ProtocolError):
        be.BackendInfo.from_payload({"name": "x"})
    with pytest.raises(ProtocolError):
        be.BackendInfo.from_payload({"protocol_version": 1, "name": ""})
    info = be.BackendInfo.from_payload(json.loads(json.dumps(
        {"protocol_version": 1, "name": "gpu", "device": "gpu:a100", "includes_transfer_time": True})))
    assert info.includes_transfer_time and not info.reports_energy
