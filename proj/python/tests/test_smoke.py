import json
import math
import pathlib

import numpy as np
import pytest

import qtorhc

CONFIGS = pathlib.Path(__file__).resolve().parents[2] / "configs"


def test_pendulum_dynamics_quarter_turn():
    dx = qtorhc.dynamics("pendulum", [math.pi / 2, 1.0], [1.0])
    np.testing.assert_allclose(dx, [1.0, 1.3], atol=1e-15)


def test_jacobians_at_origin():
    fx, fu = qtorhc.jacobians("pendulum", [0.0, 0.0], [0.0])
    np.testing.assert_allclose(fx, [[0, 1], [1, 0]], atol=1e-15)
    np.testing.assert_allclose(fu, [[0], [0.3]], atol=1e-15)


def test_scalar_care():
    P, K, res = qtorhc.solve_care(np.zeros((1, 1)), np.ones((1, 1)), np.eye(1), np.eye(1))
    assert P[0, 0] == pytest.approx(1.0)
    assert K[0, 0] == pytest.approx(-1.0)
    assert res < 1e-12


def test_lyapunov_scalar():
    H = qtorhc.solve_lyapunov(-np.eye(1), 2 * np.eye(1))
    assert H[0, 0] == pytest.approx(1.0)


def test_pendulum_synthesis_and_certificate():
    s = qtorhc.synthesize("pendulum", 500 * np.eye(2), 500 * np.eye(1), alpha=0.01)
    np.testing.assert_allclose(s["K"], [[-6.81, -6.81]], rtol=0.02)
    assert s["certified"]
    cert = qtorhc.certify("pendulum", s["K"], s["H"], 500 * np.eye(2), 500 * np.eye(1), 1.1, 1e6)
    assert not cert["passed"]
    assert not cert["constraint_ok"]


def test_unknown_plant_is_a_config_error():
    with pytest.raises(qtorhc.ConfigError):
        qtorhc.dynamics("unicycle", [0.0], [0.0])


def test_bad_config_lists_field():
    cfg = qtorhc.load_config(str(CONFIGS / "pendulum_qto.json"))
    cfg["T_min"] = 0.01
    with pytest.raises(qtorhc.ConfigError, match="T_min"):
        qtorhc.load_config(cfg)


def test_short_run_and_audit(tmp_path):
    cfg = qtorhc.load_config(str(CONFIGS / "pendulum_qto.json"))
    cfg.update(x0=[0.05, -0.02], N=16, initial_guess="lq", max_steps=5)
    summary = qtorhc.run(cfg, str(tmp_path / "run"))
    assert summary["steps"] == 5
    assert summary["invariant_violations"] == 0
    assert json.loads((tmp_path / "run" / "summary.json").read_text())["steps"] == 5
    assert qtorhc.audit(str(tmp_path / "run"))["ok"]


def test_first_solve_from_rest():
    cfg = qtorhc.load_config(str(CONFIGS / "pendulum_qto.json"))
    cfg.update(x0=[0.0, 0.0])
    sol = qtorhc.first_solve(cfg, segments=8)
    assert sol["T"] == pytest.approx(0.5)
    assert np.all(sol["controls"] == 0.0)
