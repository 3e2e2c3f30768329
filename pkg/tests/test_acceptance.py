"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line that is printed in the terminal
summary. The full module takes several minutes on one CPU.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, make_dataset
from faultflow.cli import main
from faultflow.demo import ADVICE, PERSON_INIT, Fault, reproduce_study
from faultflow.density import FitConfig, fit, identity_model
from faultflow.localize import DEFAULT_CRITICAL_VALUE, ROOT_CAUSE, SYMPTOM, significance_test
from patterns import (
    INTEGRATION_INSIGNIFICANT,
    INTEGRATION_SIGNIFICANT,
    REGRESSION_INSIGNIFICANT,
    REGRESSION_SIGNIFICANT,
    check_pattern,
    perturbed_workload,
)
from test_flow import numeric_logdet, random_flow

pytestmark = pytest.mark.acceptance

STUDY_SEEDS = range(5)
CONTROL_SEEDS = range(20)


def record(key, ok, detail):
    line = f"{key}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)
    return ok


@pytest.fixture(scope="module")
def studies():
    """Five seeded studies with both faults plus a null-vs-null control run each."""
    out = {}
    for seed in STUDY_SEEDS:
        out[seed] = reproduce_study(seed, workload=perturbed_workload(seed), faults=list(Fault))
    return out


@pytest.fixture(scope="module")
def controls(studies):
    """Null-vs-null reports for twenty seeds; the first five reuse the studies."""
    reports = {seed: studies[seed].reports[Fault.NONE.value] for seed in STUDY_SEEDS}
    for seed in CONTROL_SEEDS:
        if seed not in reports:
            study = reproduce_study(seed, workload=perturbed_workload(seed), faults=[Fault.NONE])
            reports[seed] = study.reports[Fault.NONE.value]
    return reports


def _pattern(studies, which, significant, insignificant):
    missed, spurious = {}, {}
    for seed, study in studies.items():
        m, s = check_pattern(getattr(study, which), significant, insignificant)
        if m:
            missed[seed] = m
        if s:
            spurious[seed] = s
    n_spurious = sum(len(v) for v in spurious.values())
    ok = not missed and n_spurious <= 1
    detail = (f"significant rows correct in {len(studies) - len(missed)}/{len(studies)} seeds, "
              f"{n_spurious} spurious across seeds")
    if missed:
        detail += f"; missed {missed}"
    if spurious:
        detail += f"; spurious {spurious}"
    return ok, detail


def test_ac1_regression_pattern(studies):
    ok, detail = _pattern(studies, "regression", REGRESSION_SIGNIFICANT, REGRESSION_INSIGNIFICANT)
    assert record("AC1", ok, detail), detail


def test_ac2_integration_pattern(studies):
    ok, detail = _pattern(studies, "integration", INTEGRATION_SIGNIFICANT, INTEGRATION_INSIGNIFICANT)
    assert record("AC2", ok, detail), detail


def test_ac3_false_positive_control(controls):
    clean = [seed for seed, rep in controls.items() if not rep.significant_set()]
    rate_ok = len(clean) >= 19
    subset_ok = True
    grid = [DEFAULT_CRITICAL_VALUE * f for f in (0.05, 0.1, 0.5, 1.0, 2.0, 10.0)]
    for rep in controls.values():
        sets = [rep.rethreshold(c).significant_set() for c in sorted(grid)]
        # sorted ascending: most negative (tightest) first
        subset_ok &= all(a <= b for a, b in zip(sets, sets[1:]))
    worst = min(r.delta for rep in controls.values() for r in rep.results)
    ok = rate_ok and subset_ok
    detail = (f"{len(clean)}/{len(controls)} null runs with zero significant rows, "
              f"worst delta {worst:.3f}, subset property {'holds' if subset_ok else 'violated'}")
    assert record("AC3", ok, detail), detail


def test_ac4_density_oracle():
    start = time.perf_counter()
    cov = np.array([[1.0, 0.8], [0.8, 1.5]])
    rows = np.random.default_rng(2024).multivariate_normal([3.0, -1.0], cov, size=5000)
    model = fit(make_dataset(rows), FitConfig(seed=0))
    analytic = -(1 + math.log(2 * math.pi)) - 0.5 * math.log(np.linalg.det(cov))
    gap = abs(model.self_ll - analytic)
    ident = identity_model(3)
    pts = np.random.default_rng(1).normal(size=(200, 3))
    base = -0.5 * np.sum(pts**2, axis=1) - 1.5 * math.log(2 * math.pi)
    ident_err = float(np.max(np.abs(ident.log_prob_batch(pts) - base)))
    elapsed = time.perf_counter() - start
    ok = gap < 0.1 and ident_err <= 1e-12 and elapsed < 60
    detail = (f"held-out LL {model.self_ll:.4f} vs analytic {analytic:.4f} (gap {gap:.4f}), "
              f"identity error {ident_err:.1e}, {elapsed:.1f}s")
    assert record("AC4", ok, detail), detail


def _gradient_error(d, seed):
    flow = random_flow(d, seed, scale=0.2, hidden=8)
    u = np.random.default_rng(seed).standard_normal((16, d))
    _, grad = flow.nll_and_grad(u)
    theta0 = flow.theta.copy()
    worst = 0.0
    for key, offset, shape in flow.parameter_names():
        size = int(np.prod(shape))
        numeric = np.empty(size)
        for i in range(size):
            flow.theta[:] = theta0
            flow.theta[offset + i] += 1e-6
            hi, _ = flow.nll_and_grad(u)
            flow.theta[offset + i] -= 2e-6
            lo, _ = flow.nll_and_grad(u)
            numeric[i] = (hi - lo) / 2e-6
        a = grad[offset:offset + size]
        worst = max(worst, np.linalg.norm(a - numeric) / max(np.linalg.norm(numeric), 1e-3))
    flow.theta[:] = theta0
    return worst


def test_ac5_numeric_properties():
    start = time.perf_counter()
    grad_err = max(_gradient_error(d, s) for d, s in ((1, 0), (2, 1), (3, 2), (5, 3)))
    inv_err = jac_err = 0.0
    for seed in range(30):
        d = 1 + seed % 6
        flow = random_flow(d, seed)
        u = np.random.default_rng(seed).standard_normal((64, d)) * 2
        z, _ = flow.forward(u)
        inv_err = max(inv_err, float(np.max(np.abs(flow.inverse(z) - u))))
        x = u[0]
        exact = flow.forward(x[None, :])[1][0]
        jac_err = max(jac_err, abs(exact - numeric_logdet(flow, x)) / max(1.0, abs(exact)))
    masses = []
    for seed in range(5):
        flow = random_flow(1, seed, scale=0.5)
        lo, hi = flow.inverse(np.array([[-10.0], [10.0]]))[:, 0]
        grid = np.linspace(lo, hi, 40001)
        masses.append(float(np.sum(np.exp(flow.log_prob(grid[:, None]))) * (grid[1] - grid[0])))
    elapsed = time.perf_counter() - start
    ok = (grad_err < 1e-4 and inv_err < 1e-6 and jac_err < 1e-4
          and all(0.98 <= m <= 1.02 for m in masses) and elapsed < 120)
    detail = (f"gradient {grad_err:.1e}, inverse {inv_err:.1e}, jacobian {jac_err:.1e}, "
              f"quadrature [{min(masses):.4f}, {max(masses):.4f}], {elapsed:.1f}s")
    assert record("AC5", ok, detail), detail


def test_ac6_decision_rule():
    c = math.log(0.001)
    checks = [
        significance_test(-10, -2, c) is True,
        significance_test(-3, -2, -6.9078) is False,
        significance_test(-10.0, -2.0, -8.0) is False,
    ]
    ok = all(checks)
    assert record("AC6", ok, f"{sum(checks)}/3 boundary examples reproduced"), checks


def test_ac7_propagation_verdicts(studies):
    wrong = {}
    for seed, study in studies.items():
        got = (study.regression.verdict(PERSON_INIT).classification,
               study.regression.verdict(ADVICE).classification)
        if got != (ROOT_CAUSE, SYMPTOM):
            wrong[seed] = got
    ok = not wrong
    detail = f"Person.init root cause and advice symptom in {len(studies) - len(wrong)}/{len(studies)} seeds"
    if wrong:
        detail += f"; wrong {wrong}"
    assert record("AC7", ok, detail), detail


def test_ac8_demo_reproducible(tmp_path):
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["demo", "--out", str(out), "--seed", "7"]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted((out / "reports").glob("*.csv"))})
    ok = len(outputs[0]) == 2 and outputs[0] == outputs[1]
    detail = f"{len(outputs[0])} report CSVs, byte-identical: {outputs[0] == outputs[1]}"
    assert record("AC8", ok, detail), detail
