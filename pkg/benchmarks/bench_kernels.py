#!/usr/bin/env python3
"""Compiled (numba) versus pure-numpy kernels.

The backend is fixed at import time, so each backend runs in its own
subprocess (``NCSFSP_DISABLE_NUMBA=0/1``).  Compilation is excluded by a
warm-up call; the numba cache is used when present.

    python benchmarks/bench_kernels.py [--replicas 50] [--draws 2000] [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _time(fn, repeat):
    fn()  # warm-up / compile
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def worker(replicas, draws, repeat, kron_draws=4):
    from ncsfsp import _accel, kernels
    from ncsfsp.cli import shipped_config
    from ncsfsp.config import load_config
    from ncsfsp.delays import sample_step_draws
    from ncsfsp.design import design
    from ncsfsp.sim import make_setup, sample_traces, _run

    cfg = load_config(shipped_config()).with_overrides(replicas=replicas)
    cfg.compensator.model_samples = 2000
    d = design(cfg, ["3sfsp"])
    law = d.law("3sfsp")
    setup = make_setup(cfg.scenario, cfg.timing.sampling_period, d.plant.n_disturbances, d.max_delay + 1)
    t, aj = sample_traces(cfg.timing, cfg.seed, replicas, setup.total)
    rows = {}

    sec, out = _time(lambda: _run(d.plant, law, setup, t, aj), repeat)
    rows["simulate_batch"] = {"seconds": sec, "work": f"{replicas} replicas x {setup.total} steps",
                              "checksum": float(np.nansum(np.abs(out[0])))}

    rng = np.random.default_rng(0)
    dt = rng.uniform(0.08, 0.12, draws)
    s = rng.uniform(0.0, 0.02, (draws, 2))
    p = d.plant
    sec, out = _time(lambda: kernels.step_matrices_batch(p.A, p.B, p.Bw, dt, s), repeat)
    rows["step_matrices_batch"] = {"seconds": sec, "work": f"{draws} intervals",
                                   "checksum": float(np.abs(out[0]).sum() + np.abs(out[1]).sum())}

    M = rng.normal(size=(6, 6))
    sec, out = _time(lambda: [kernels.expm(M * (0.01 * i)) for i in range(1, 201)], repeat)
    rows["expm"] = {"seconds": sec, "work": "200 6x6 exponentials",
                    "checksum": float(sum(np.abs(e).sum() for e in out))}

    draws_s = sample_step_draws(p, cfg.timing, 256, np.random.default_rng(1), d.max_delay)
    from ncsfsp.stability import AugmentedClosedLoop
    mats = AugmentedClosedLoop(p, law, d.max_delay).matrices(draws_s)[:kron_draws]
    sec, out = _time(lambda: kernels.kron_second_moment(np.ascontiguousarray(mats)), repeat)
    rows["kron_second_moment"] = {"seconds": sec, "work": f"{kron_draws} draws, dim {mats.shape[1]}",
                                  "checksum": float(np.abs(out).sum())}
    print(json.dumps({"backend": _accel.backend(), "rows": rows}))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replicas", type=int, default=50)
    ap.add_argument("--draws", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    a = ap.parse_args()
    if a.worker:
        worker(a.replicas, a.draws, a.repeat)
        return
    res = {}
    for flag in ("0", "1"):
        env = dict(os.environ, NCSFSP_DISABLE_NUMBA=flag)
        cmd = [sys.executable, __file__, "--worker", "--replicas", str(a.replicas),
               "--draws", str(a.draws), "--repeat", str(a.repeat)]
        r = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
        res[flag] = json.loads(r.stdout.strip().splitlines()[-1])
    fast, slow = res["0"], res["1"]
    print(f"backends: {fast['backend']} vs {slow['backend']}")
    print(f"{'kernel':22s} {'work':32s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speed-up':>9s} {'rel. diff':>10s}")
    for name, row in fast["rows"].items():
        ref = slow["rows"][name]
        diff = abs(row["checksum"] - ref["checksum"]) / max(abs(ref["checksum"]), 1e-300)
        print(f"{name:22s} {row['work']:32s} {row['seconds']:10.4f} {ref['seconds']:10.4f} "
              f"{ref['seconds'] / row['seconds']:8.1f}x {diff:10.1e}")


if __name__ == "__main__":
    main()
