#!/usr/bin/env python3
"""Smoke test for the tdlab_py extension module.

Builds nothing itself: expects the extension to exist already, e.g.

    cargo build -p tdlab-py --release --features python
    python3 python/smoke.py
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_extension():
    candidates = [
        REPO / "target" / "release" / "libtdlab_py.so",
        REPO / "target" / "debug" / "libtdlab_py.so",
        REPO / "target" / "release" / "libtdlab_py.dylib",
        REPO / "target" / "debug" / "libtdlab_py.dylib",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit(
            "extension not built; run: cargo build -p tdlab-py --release --features python"
        )
    stage = Path(tempfile.mkdtemp(prefix="tdlab-py-"))
    shutil.copy(built, stage / "tdlab_py.so")
    sys.path.insert(0, str(stage))
    import tdlab_py

    return tdlab_py


def approx(a, b, tol=1e-10):
    assert abs(a - b) < tol, f"{a} != {b} (tol {tol})"


def main():
    td = import_extension()

    # The two-state divergence example: scalar forces and thresholds.
    eps, gamma = 0.1, 0.5
    mrp, phi, d = td.counterexample(eps, gamma, 0.5)
    assert mrp.n == 3
    sys_ = td.build_system(mrp, phi, d)
    approx(sys_.mw[0][0], 2.5)
    approx(sys_.mtheta[0][0], gamma * (3 - 2 * eps))
    converges, rho = sys_.predict_convergence()
    approx(rho, gamma * (6 - 4 * eps) / 5)
    assert converges

    # Exact solve contracts at exactly rho per step.
    obj = td.quadratic_objective(mrp, phi, d)
    traj = td.solve_exact(obj, [1.0], t=100, theta_star=[0.0])
    assert traj.converged and not traj.diverged
    for r in traj.ratios:
        approx(r, 0.56, 1e-12)

    # Divergence flips on at the analytic threshold.
    thr = td.gamma_threshold(eps)
    approx(thr, 5 / 5.6, 1e-12)
    mrp_bad, phi_bad, d_bad = td.counterexample(eps, 0.95, 0.5)
    obj_bad = td.quadratic_objective(mrp_bad, phi_bad, d_bad)
    traj_bad = td.solve_gradient(obj_bad, [1.0], t=100000, k=1, theta_star=[0.0])
    assert traj_bad.diverged

    # Stationary distribution with restart: (eps, 1, 0) / (1 + eps).
    d_stat = mrp.stationary_distribution(restart=[1.0, 0.0, 0.0])
    approx(d_stat[0], eps / (1 + eps))
    approx(d_stat[1], 1 / (1 + eps))
    approx(d_stat[2], 0.0)

    # Force constants and the K-step contraction factor.
    f_theta, f_w, l, eta, kappa = obj.constants()
    approx(f_theta, gamma * (3 - 2 * eps))
    approx(f_w, 2.5)
    approx(eta, 0.56)
    approx(td.sigma_k(0.5, 0.8, 3), math.sqrt(0.125 * 0.36 + 0.64), 1e-12)
    approx(td.sigma_k(kappa, eta, 10000), eta, 1e-9)

    est_f_theta, est_f_w, est_l = obj.estimate_constants(samples=500, seed=7)
    approx(est_f_theta, f_theta, 1e-6)
    approx(est_f_w, f_w, 1e-6)

    # d1 threshold from the weighted-gradient combination.
    approx(td.d1_threshold(1.0, 0.5), 1.0, 1e-12)

    # Spectral radius of a plain matrix.
    approx(td.spectral_radius([[0.5, 0.0], [0.0, -0.9]]), 0.9, 1e-12)

    # Huber gradient against a one-sided numeric check.
    hub = td.ridge(td.huber_objective(mrp, phi, d, 1.0), 0.25)
    theta, w = [0.7], [0.3]
    g = hub.grad_w(theta, w)
    h = 1e-6
    numeric = (hub.value(theta, [w[0] + h]) - hub.value(theta, [w[0] - h])) / (2 * h)
    approx(g[0], numeric, 1e-6)

    # Full experiment document through the same runner the CLI uses.
    csv, run_json = td.run_experiment(
        json.dumps(
            {
                "problem": {
                    "builtin": "counterexample",
                    "epsilon": 0.1,
                    "gamma": 0.5,
                    "d1": 0.5,
                },
                "solver": {"mode": "exact", "T": 500, "K": 1},
                "seed": 0,
            }
        )
    )
    assert csv.splitlines()[0] == "t,theta_0,distance,ratio,grad_residual"
    report = json.loads(run_json)
    assert report["converged"] is True
    approx(report["contraction"]["predicted_sigma"], 0.56, 1e-12)

    print("smoke test passed")


if __name__ == "__main__":
    main()
