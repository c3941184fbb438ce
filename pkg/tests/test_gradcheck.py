import numpy as np

from demtg.autodiff import ParamStore, Tensor, broken_rules, matmul, mean_all, mul, sub
from demtg.gradcheck import grad_check
from demtg.verify import RULES, run_suite


def _regression_store(rng):
    st = ParamStore()
    st.add("w", rng.normal(size=(3, 1)))
    return st


def _mse(x, y):
    def f(st):
        r = sub(matmul(Tensor(x), st["w"]), Tensor(y))
        return mean_all(mul(r, r))
    return f


def test_linear_regression_passes_tight(rng):
    x, y = rng.normal(size=(10, 3)), rng.normal(size=(10, 1))
    rep = grad_check(_mse(x, y), _regression_store(rng), eps=1e-5, tol=1e-6)
    assert rep.passed and rep.n_checked == 3


def test_broken_matmul_is_located(rng):
    x, y = rng.normal(size=(10, 3)), rng.normal(size=(10, 1))
    with broken_rules("matmul"):
        rep = grad_check(_mse(x, y), _regression_store(rng), tol=1e-5)
    assert not rep.passed
    assert rep.worst.path == "w" and len(rep.worst.index) == 2
    assert rep.worst.rel_err > 1e-2
    assert "w[" in str(rep.worst)


def test_coords_per_param_limits_work(rng):
    st = ParamStore()
    st.add("a", rng.normal(size=(6, 5)))
    f = lambda s: mean_all(mul(s["a"], s["a"]))
    assert grad_check(f, st, coords_per_param=4).n_checked == 4
    assert grad_check(f, st, only=[]).n_checked == 0


def test_refinement_removes_truncation_error():
    # exp-like cubic: 2-point stencil error is eps^2 * f''' / 6, relatively large
    # where the gradient is tiny; the 4th-order stencil removes it
    st = ParamStore()
    st.add("x", np.array([1e-4]))
    f = lambda s: mean_all(mul(mul(s["x"], s["x"]), s["x"]))
    coarse = grad_check(f, st, eps=1e-3, tol=1e-6, refine=False)
    fine = grad_check(f, st, eps=1e-3, tol=1e-6, refine=True)
    assert not coarse.passed
    assert fine.passed


def test_suite_primitives_pass_and_negative_controls_fail():
    checks = run_suite(seed=0, include_model=False)
    assert checks and all(c.report.passed for c in checks)
    names = {c.name for c in checks}
    assert {"softmax", "conv2d", "bilinear_sample", "mhsa", "ssg"} <= names
    bad = run_suite(seed=0, broken=("gelu",), include_model=False)
    assert not next(c for c in bad if c.name == "gelu").report.passed


def test_rules_listing_is_complete():
    assert len(set(RULES)) == len(RULES)
    assert {"mhsa", "bilinear", "cross_entropy", "conv1d"} <= set(RULES)
