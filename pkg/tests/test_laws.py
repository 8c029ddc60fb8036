import json

import numpy as np
import pytest

from qsl import laws
from qsl.errors import DegenerateInput, DomainError
from qsl.laws import ChinchillaParams, DeltaParams
from qsl.quant import PER_TENSOR, PER_VECTOR, Group

C, DELTAS = laws.reference_params()
W4A4 = DELTAS["w4a4"]


def test_reference_constants_loaded():
    assert C == ChinchillaParams(E=1.9279, A=237.7042, alpha=0.3022, B=596.2490, beta=0.3022)
    assert set(DELTAS) == set(laws.PRECISION_TAGS)
    assert W4A4 == DeltaParams(0.1582, 0.2186, 0.0745, 0.7779)
    assert DELTAS["w16a4_fc2_8"].gamma_G == 0.4491


def test_frozen_values():
    assert laws.chinchilla_loss(C, 595e6, 100e9) == pytest.approx(2.7406605627, abs=1e-9)
    assert laws.delta(W4A4, 595e6, 100e9, 128) == pytest.approx(0.0572794495, abs=1e-9)
    assert laws.qat_loss(C, W4A4, 595e6, 100e9, 128) == pytest.approx(2.79794, abs=1e-5)
    assert laws.legacy_delta(C, 0.5, 595e6) == pytest.approx(0.1235313, abs=1e-6)


def test_delta_at_g1_is_zero():
    assert laws.delta(W4A4, 1e8, 1e10, 1) == 0.0
    assert laws.epm(C, W4A4, 1e8, 1e10, 1) == 1.0
    with pytest.raises(DomainError):
        laws.delta(W4A4, 1e8, 1e10, 1.5)


def test_domain_errors():
    with pytest.raises(DomainError):
        laws.chinchilla_loss(C, 0, 1e9)
    with pytest.raises(DomainError):
        laws.delta(W4A4, 1e8, -1, 32)
    with pytest.raises(DomainError):
        laws.legacy_delta(C, 1.5, 1e8)
    with pytest.raises(DomainError):
        DeltaParams(-1, 0.2, 0.1, 0.5)


def test_effective_g():
    assert laws.effective_g(Group(64)) == 64
    assert laws.effective_g(PER_VECTOR, 1536) == 1536
    with pytest.raises(DomainError):
        laws.effective_g(PER_VECTOR)
    with pytest.raises(DomainError):
        laws.effective_g(PER_TENSOR)


@pytest.mark.parametrize("tag", laws.PRECISION_TAGS)
def test_monotonicity(tag):
    d = DELTAS[tag]
    N = np.geomspace(74e6, 973e6, 10)[:, None, None]
    D = np.geomspace(10e9, 200e9, 10)[None, :, None]
    g = np.array([32, 64, 128, 256])[None, None, :]
    v = laws.delta(d, N, D, g)
    assert np.all(np.diff(v, axis=0) < 0)
    assert np.all(np.diff(v, axis=1) > 0)
    assert np.all(np.diff(v, axis=2) > 0)


def test_epm_identity():
    rng = np.random.default_rng(0)
    N = 10 ** rng.uniform(np.log10(74e6), np.log10(973e6), 100)
    D = 10 ** rng.uniform(10, np.log10(200e9), 100)
    g = rng.choice([32, 64, 128, 256], 100)
    e = laws.epm(C, W4A4, N, D, g)
    lhs = laws.chinchilla_loss(C, e * N, D)
    rhs = laws.qat_loss(C, W4A4, N, D, g)
    assert np.max(np.abs(lhs - rhs)) < 1e-9
    assert np.all((e > 0) & (e < 1))


def test_legacy_delta_consistent_with_epm():
    e = laws.epm(C, W4A4, 3e8, 5e10, 64)
    assert laws.legacy_delta(C, e, 3e8) == pytest.approx(laws.delta(W4A4, 3e8, 5e10, 64), rel=1e-10)


def test_contour_lines_straight():
    lines = laws.contour_lines(W4A4, 128, [0.04, 0.06, 0.08], (74e6, 973e6))
    slope = 0.2186 / 0.0745
    for ln in lines:
        assert abs(ln.slope - slope) < 1e-12
        for x in np.linspace(ln.x0, ln.x1, 7):
            y = ln.slope * x + ln.intercept
            assert laws.delta(W4A4, 10**x, 10**y, 128) == pytest.approx(ln.level, rel=1e-9)


def test_contour_clipping():
    lines = laws.contour_lines(W4A4, 128, [0.001, 0.05], (74e6, 973e6), (10e9, 200e9))
    assert [ln.level for ln in lines] == [0.05]
    (x0, y0), (x1, y1) = lines[0].endpoints
    assert y0 >= 10 - 1e-12 and y1 <= np.log10(200e9) + 1e-12
    with pytest.raises(DomainError):
        laws.contour_lines(W4A4, 128, [0.0], (1e8, 1e9))


def test_ratio_R():
    r = laws.ratio_R(DELTAS["w16a4"], DELTAS["w4a16"], 595e6, 59.5e9, 32)
    assert r > 1
    # with equal N, R falls as D/N grows
    rs = [laws.ratio_R(DELTAS["w16a4"], DELTAS["w4a16"], 595e6, 595e6 * k, 32) for k in (10, 50, 100, 200)]
    assert all(a > b for a, b in zip(rs, rs[1:]))


def test_fit_sum_coefficient():
    x = np.linspace(0.01, 0.2, 30)
    assert laws.fit_sum_coefficient(np.column_stack([0.9 * x, x])) == pytest.approx(0.9, rel=1e-14)
    assert laws.fit_sum_coefficient([(2.0, 1.0), (4.0, 2.0)]) == 2.0
    with pytest.raises(DegenerateInput):
        laws.fit_sum_coefficient([(1.0, 0.0), (2.0, 0.0)])
    with pytest.raises(DegenerateInput):
        laws.fit_sum_coefficient([(1.0, 1.0)])


def test_relative_error():
    assert laws.relative_error([1.1, 1.8], [1.0, 2.0]) == pytest.approx(0.1)
    with pytest.raises(DomainError):
        laws.relative_error([1.0], [0.0])
    with pytest.raises(DomainError):
        laws.relative_error([1.0, 2.0], [1.0])


def test_params_round_trip(tmp_path):
    p = tmp_path / "p.json"
    laws.save_params(p, C, DELTAS, note="x")
    c2, d2 = laws.load_params(p)
    assert c2 == C and d2 == DELTAS
    assert json.loads(p.read_text())["note"] == "x"
    with pytest.raises(DomainError):
        laws.params_from_dict({"delta": {"w8a8": {"k": 1, "gamma_N": 1, "gamma_D": 1, "gamma_G": 1}}})
