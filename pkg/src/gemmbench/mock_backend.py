"""Protocol-conforming mock backend.

Computes products with the ikj kernel, so an unperturbed result is
bit-equal to the serial oracle. Flags force the failure paths the harness
has to survive.

    python -m gemmbench.mock_backend [--protocol-version N] [--inject-error]
        [--perturb EPS] [--ignore-shutdown] [--hang] [--sleep-ms T]
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from gemmbench.backend import PROTOCOL_VERSION, encode


def _reply(msg_id: int, msg_type: str, payload: dict) -> None:
    sys.stdout.write(encode(msg_id, msg_type, payload))
    sys.stdout.flush()


def _serve_gemm(msg_id: int, req: dict, args) -> None:
    # heavy imports happen after the hello so the handshake stays fast
    import numpy as np

    from gemmbench.kernels import gemm_ikj
    from gemmbench.matrix import Matrix, random_matrix, read_matrix_file, write_matrix_file

    if args.inject_error:
        _reply(msg_id, "result", {"status": "error", "message": "injected failure"})
        return
    a = read_matrix_file(req["a_path"])
    b = read_matrix_file(req["b_path"])
    for _ in range(int(req.get("warmup", 0))):
        gemm_ikj(a, b)
    times = []
    c = None
    for _ in range(int(req["reps"])):
        t0 = time.perf_counter()
        c = gemm_ikj(a, b)
        elapsed = (time.perf_counter() - t0) * 1e3
        times.append(args.sleep_ms if args.sleep_ms is not None else elapsed)
    if args.perturb:
        # +/- eps with a reproducible sign pattern: mse is eps**2 up to fp32 rounding
        sign = np.sign(random_matrix(c.rows, c.cols, 0xC0FFEE).data + np.float32(0.5) ** 30)
        c = Matrix(c.data + np.float32(args.perturb) * sign.astype(np.float32))
    write_matrix_file(req["result_path"], c)
    _reply(msg_id, "result", {
        "status": "ok", "per_rep_time_ms": times,
        "result_path": req["result_path"], "energy_j": None,
    })


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gemmbench-mock-backend")
    parser.add_argument("--protocol-version", type=int, default=PROTOCOL_VERSION)
    parser.add_argument("--inject-error", action="store_true")
    parser.add_argument("--perturb", type=float, default=0.0)
    parser.add_argument("--ignore-shutdown", action="store_true")
    parser.add_argument("--hang", action="store_true")
    parser.add_argument("--sleep-ms", type=float, default=None,
                        help="report this per-rep time instead of measuring")
    args = parser.parse_args(argv)

    _reply(0, "hello", {
        "protocol_version": args.protocol_version, "name": "mock", "device": "cpu",
        "includes_transfer_time": False, "reports_energy": False,
    })
    for line in sys.stdin:
        if not line.strip():
            continue
        msg = json.loads(line)
        if msg["type"] == "shutdown":
            if args.ignore_shutdown:
                continue
            return 0
        if msg["type"] == "gemm":
            if args.hang:
                while True:
                    time.sleep(3600)
            try:
                _serve_gemm(msg["id"], msg["payload"], args)
            except Exception as exc:  # report, keep serving
                _reply(msg["id"], "result", {"status": "error", "message": f"{type(exc).__name__}: {exc}"})
    if args.ignore_shutdown:
        while True:
            time.sleep(3600)
    return 0


if __name__ == "__main__":
    sys.exit(main())
