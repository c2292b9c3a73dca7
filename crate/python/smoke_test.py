"""Smoke test for the ddsindy Python extension.

Build and install with `maturin develop --release -m crates/python/Cargo.toml`
(or `pip install ./crates/python`), then run `python python/smoke_test.py`.
"""

import math

import ddsindy


def main():
    rule = ddsindy.QuadratureRule("clenshaw-curtis", 9, -2.0, 0.0)
    assert abs(rule.integrate([s * s for s in rule.nodes]) - 8.0 / 3.0) < 1e-12
    assert abs(sum(rule.weights) - 2.0) < 1e-12

    design = [[1.0, t, t * t] for t in (i / 10 for i in range(20))]
    target = [2.0 - 3.0 * row[2] for row in design]
    xi = ddsindy.sparse_regression(design, target, 0.1)
    assert abs(xi[0] - 2.0) < 1e-10 and xi[1] == 0.0 and abs(xi[2] + 3.0) < 1e-10

    data, truth = ddsindy.simulate("logistic_re")
    assert len(data) == 100 and len(truth) == 4
    train, val = data.split(0.5)
    model = ddsindy.identify("logistic_re", train, nodes=128)
    for _, label, value in truth:
        assert abs(model.coefficient(0, label) - value) < 5e-2, (label, model.coefficient(0, label))
    rmse_train, rmse_val, _ = model.rmse(train, val)
    assert rmse_train < 1e-2 and rmse_val < 1e-2
    print(model.render(3))

    again = ddsindy.Model.parse(model.to_text())
    assert again.labels == model.labels

    noisy = data.with_noise(0.05, seed=1)
    assert noisy.states == data.with_noise(0.05, seed=1).states
    assert noisy.states != data.states

    data, _ = ddsindy.simulate("ricker_advanced")
    train, val = data.split(0.5)
    params, objective, model = ddsindy.optimize("ricker_advanced", train, val, seed=0, max_evals=300)
    assert set(params) == {"a", "n", "rate", "tau"}
    assert math.isfinite(objective)
    print(params, objective)

    try:
        ddsindy.simulate("nosuch")
    except ddsindy.DdsindyError as e:
        assert "nosuch" in str(e)
    else:
        raise AssertionError("unknown benchmark accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
