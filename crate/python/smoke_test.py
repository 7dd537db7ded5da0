"""Smoke test for the nsstab_py extension module.

Build and install first, e.g.
    pip install --no-build-isolation ./crates/py
"""

import math

import nsstab_py as ns


def main():
    basis = ns.StokesBasis(16, 16, 12, [0.6, 0.9, 0.1, 0.4])
    tau = basis.tau
    assert len(basis) == 12 and all(a <= b for a, b in zip(tau, tau[1:]))
    assert abs(tau[0] - 52.34) / 52.34 < 0.05, tau[0]
    assert basis.gram_lambda_min(4) > 0.0
    assert basis.fit_c1()["c1"] >= 1.0

    model = ns.GalerkinModel(basis)
    u = ns.random_state(model.dim, 1.0, 1)
    v = ns.random_state(model.dim, 1.0, 2)
    assert abs(model.trilinear(u, v, v)) < 1e-12
    c0 = model.estimate_c0(200, 42)["c0"]
    assert c0 > 0.0

    x0 = ns.random_state(model.dim, 1e-3, 3)
    free = model.simulate(x0, 0.05, 1e-4, stride=100)
    balance = 0.5 * free["norm"][-1] ** 2 + free["dissipation"] - 0.5e-6
    assert abs(balance) <= 1e-6 * 1e-6, balance

    assert abs(ns.ConstantPack.certified(1.0, 1.0).c2 - 8.0) < 1e-9

    # practical constants are sized for the square of side 1/3
    s = 1.0 / 3.0
    small = ns.StokesBasis(16, 16, 12, [0.6 * s, 0.9 * s, 0.1 * s, 0.4 * s], lx=s, ly=s)
    model = ns.GalerkinModel(small)
    pack = ns.ConstantPack.practical(0.1, 1.0, 11.3, c0)
    assert pack.mode == "practical" and pack.c3 == 11.3 ** 2 / 32.0

    rs = ns.rapid_stab(model, pack, small.tau[3], 0.03125, 2 ** -14)
    assert rs["state_bound_holds"], rs["state_bound_worst_ratio"]

    nc = ns.null_control(model, pack, 1, 3, 2 ** -10, y0_norm=1e-4)
    assert nc["final_relative_norm"] <= 1e-6
    assert math.isfinite(nc["cost"])

    try:
        ns.StokesBasis(16, 16, 12, [0.6, 1.9, 0.1, 0.4])
    except ValueError as e:
        assert "invalid_domain" in str(e)
    else:
        raise AssertionError("bad omega accepted")
    print("smoke test passed: tau_1 = %.4f, c0 = %.4e, cost = %.3e" % (tau[0], c0, nc["cost"]))


if __name__ == "__main__":
    main()
