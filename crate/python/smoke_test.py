#!/usr/bin/env python3
"""Smoke test for the demand_dispatch_py extension module.

Build the extension first:

    cargo build -p demand-dispatch-py --release

then run this script from the repository root (or anywhere):

    python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import sys
import tempfile

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    candidates = [
        os.path.join(REPO_ROOT, "target", profile, name)
        for profile in ("release", "debug")
        for name in ("libdemand_dispatch_py.so", "demand_dispatch_py.so")
    ]
    built = next((p for p in candidates if os.path.exists(p)), None)
    if built is None:
        sys.exit(
            "extension not found; run `cargo build -p demand-dispatch-py --release` first"
        )
    stage = tempfile.mkdtemp(prefix="demand_dispatch_py_")
    shutil.copy(built, os.path.join(stage, "demand_dispatch_py.so"))
    sys.path.insert(0, stage)
    import demand_dispatch_py

    return demand_dispatch_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    dd = load_module()

    # Pool model: structure, tilting, stationarity.
    model = dd.PoolModel(8, 5.0, 12.0)
    assert model.dim == 16
    p0 = model.transition_matrix(0.0)
    for row in p0:
        approx(sum(row), 1.0, 1e-12)
    pi = model.stationary()
    approx(sum(pi), 1.0, 1e-10)
    approx(model.nominal_output(), 0.5, 1e-10)
    assert model.is_irreducible()
    first, second = model.derivative_matrices()
    for row in first + second:
        approx(sum(row), 0.0, 1e-12)

    # Positive commands shift mass toward On states.
    pz = model.transition_matrix(0.5)
    on = model.num_sojourn
    for i in range(model.dim):
        assert sum(pz[i][:on]) >= sum(p0[i][:on]) - 1e-15

    # Determinism of trajectory sampling.
    path_a = model.sample_path([0.1] * 500, seed=42)
    path_b = model.sample_path([0.1] * 500, seed=42)
    assert path_a == path_b
    assert path_a != model.sample_path([0.1] * 500, seed=43)

    # PI controller hand value.
    pi_ctl = dd.PiController(50.0, 1.5, 1.0)
    approx(pi_ctl.step(0.001), 0.0515, 1e-15)

    # Butterworth coefficients at the reference operating point.
    num, den = dd.butterworth_lowpass(1.0 / 1000.0, 5.0)
    approx(num[0], 0.0155, 2e-3)
    approx(-den[1], 0.9691, 2e-3)
    step = dd.filter_series(num, den, [1.0] * 1000)
    approx(step[-1], 1.0, 2e-2)

    # Reshaping hand value and pass-through.
    approx(dd.reshape_reference(0.1, 40.0, -50.4, 50.4, 0.006, 0.65), 0.05656, 1e-12)
    approx(dd.reshape_reference(0.1, 0.0, -50.4, 50.4, 0.006, 0.65), 0.1)

    # Discount window identity.
    approx(dd.expected_window(1.0 - 1.0 / 2880.0), 2880.0, 1e-6)

    # ARMA generate/fit round trip keeps the noise variance.
    arma = dd.ArmaModel(-1.16, 0.2301, -0.2489, 4.36e-3)
    series = arma.generate(100_000, seed=5)
    fit = dd.ArmaModel.fit(series)
    assert abs(fit.sigma_w2 - 4.36e-3) / 4.36e-3 < 0.1
    thetas, values = dd.welch_psd(series, 256, 0.5)
    assert len(thetas) == len(values) == 256
    assert all(v >= 0.0 for v in values)

    # A small closed-loop run through the TOML interface.
    config = """
population = 200
horizon = 400
master_seed = 11
epsilon = 0.5
reference_scale = 0.5
guard_enabled = true
burn_in = 100

[[metrics]]
kind = "normalized_power"
lower = -36.0
upper = 36.0
"""
    out = dd.run_simulation(config)
    assert len(out["y_tilde"]) == 400
    summary = out["summary"]
    assert summary["population"] == 200
    assert summary["qos_min"][0] >= -36.0
    assert summary["qos_max"][0] <= 36.0
    out2 = dd.run_simulation(config)
    assert out["zeta"] == out2["zeta"], "runs must be deterministic"

    v0, v2 = dd.predict_qos_variance(config)
    assert v0 > 0.0 and v2 > 0.0

    default_toml = dd.default_config()
    assert "population = 10000" in default_toml

    print("smoke test passed:", json.dumps({
        "dim": model.dim,
        "nominal_output": model.nominal_output(),
        "fit_sigma_w2": fit.sigma_w2,
        "rms_error": summary["rms_error"],
        "analytic_v0": v0,
        "analytic_v2": v2,
    }, indent=2))


if __name__ == "__main__":
    main()
