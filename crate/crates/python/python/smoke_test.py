"""Smoke test for the stagecraft_py extension.

Build and install first, e.g. `maturin develop` inside crates/python.
"""

import json
import math

import stagecraft_py as sc


def check_functions():
    f = sc.KInf.power(2.0) + sc.KInf.linear(3.0)
    assert math.isclose(f(2.0), 10.0)
    assert math.isclose(f.invert(10.0), 2.0, rel_tol=1e-10)
    g = sc.KInf.from_json(f.to_json())
    assert math.isclose(g(0.5), f(0.5))
    h = f.compose(sc.KInf.table([(1.0, 2.0), (2.0, 3.0)]))
    assert math.isclose(h(1.0), f(2.0))
    try:
        sc.KInf.table([(1.0, 2.0), (2.0, 1.0)])
    except ValueError:
        pass
    else:
        raise AssertionError("decreasing table accepted")


def check_decomposition():
    beta = sc.KL.exponential(2.0, 0.6)
    g1, g2 = beta.decompose(0.5)
    for r in (1e-3, 0.1, 1.0, 10.0, 1e3):
        for t in range(20):
            assert beta(r, t) <= g2(0.5 ** t * g1(r)) + 1e-9


def check_synthesis():
    for name in sc.builtin_cases():
        out = json.loads(sc.synthesize_builtin(name))
        assert out["passed"], (name, out["worst_margin"])


def check_oracle_and_converse():
    chain = sc.FiniteSystem.chain(6)
    vt = json.loads(chain.value_iteration())
    assert vt["v"] == [float(i * (i + 1) // 2 + i) for i in range(6)]
    out = json.loads(chain.converse())
    assert out["claims_passed"] and out["passed"], out["worst_margin"]


def main():
    check_functions()
    check_decomposition()
    check_synthesis()
    check_oracle_and_converse()
    print("stagecraft_py smoke test passed")


if __name__ == "__main__":
    main()
