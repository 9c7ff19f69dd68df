"""Grid fields: energy quadrature, Lipschitz/oscillation, extension,
mollification, annulus blending, ambient composition.

Hand oracles used below:
  * affine single-valued field on the full square: energy -> |A|_F^2 * area,
    exact for the trapezoid-weighted matched differences;
  * two-branch square root on the unit disk: |Df|^2 = 1/|w|, integral 2*pi;
  * pair {x, -x} on [-1, 1]: Lipschitz sqrt(2), oscillation sqrt(2) (the
    optimal center is 0 and the worst spread is 2 at the endpoints);
  * annulus ramp between constants 1 and 0 over radii [0.5, 1]: gradient
    magnitude 2, energy 4 * (pi - pi/4) = 3*pi.
"""
import math

import numpy as np
import pytest

from qlip.qspace import QPoint
from qlip.embed import xi_batch
from qlip.roproj import default_machinery
from qlip import qfield as qf


def _affine_field(res=33, q=1):
    A = np.array([[0.7, -0.3], [0.2, 1.1]])
    b = np.array([1.0, 0.5])

    def fn(p):
        base = A @ p
        if q == 1:
            return base[None, :]
        return np.stack([base + b, base - b])

    f = qf.from_callable(qf.square(1.0), res, fn, q=q, n=2)
    return f, A


def test_energy_affine_exact():
    f, A = _affine_field(q=1)
    area = 4.0
    expect = float(np.sum(A**2)) * area
    got = qf.dirichlet_energy(f)
    assert abs(got - expect) <= 1e-10 * expect


def test_energy_affine_two_sheets():
    f, A = _affine_field(q=2)
    expect = 2.0 * float(np.sum(A**2)) * 4.0
    got = qf.dirichlet_energy(f)
    assert abs(got - expect) <= 1e-10 * expect


def test_energy_line_segment():
    dom = qf.GridDomain("square", (0.0,), 1.0)
    f = qf.from_callable(dom, 41, lambda p: p[None, :], q=1, n=1)
    got = qf.dirichlet_energy(f)
    assert abs(got - 2.0) <= 1e-12


def _sqrt_field(res=64):
    def fn(p):
        v = complex(p[0], p[1]) ** 0.5
        return np.array([[v.real, v.imag], [-v.real, -v.imag]])

    return qf.from_callable(qf.ball(1.0), res, fn, q=2, n=2)


def test_energy_sqrt_branch():
    f = _sqrt_field(64)
    w = qf.disk_weights(f, (0.0, 0.0), 1.0)
    d = np.linalg.norm(f.nodes(), axis=-1)
    w[d < f.spacing] = 0.0  # excise the branch-point cell
    got = qf.dirichlet_energy(f, weights=w)
    assert abs(got - 2 * math.pi) <= 0.05 * 2 * math.pi


def test_disk_weights_area():
    f = _sqrt_field(64)
    w = qf.disk_weights(f, (0.0, 0.0), 0.8)
    area = w.sum() * f.spacing ** 2
    assert abs(area - math.pi * 0.64) <= 0.01 * math.pi * 0.64


def test_energy_density_shape_and_mass():
    f, A = _affine_field(q=1)
    dens = qf.energy_density(f)
    assert dens.shape == (33, 33)
    inner = dens[1:-1, 1:-1]
    assert np.allclose(inner, np.sum(A**2), rtol=1e-9)


def test_lip_and_osc_pair():
    dom = qf.GridDomain("square", (0.0,), 1.0)
    f = qf.from_callable(dom, 81, lambda p: np.array([[p[0]], [-p[0]]]), q=2, n=1)
    lip, osc = qf.lipschitz_and_osc(f)
    assert abs(lip - math.sqrt(2)) <= 1e-9
    assert abs(osc - math.sqrt(2)) <= 1e-6


def test_lip_and_osc_constant():
    f = qf.constant_field(qf.square(1.0), 17, QPoint([[0.3, -0.2]]))
    lip, osc = qf.lipschitz_and_osc(f)
    assert lip == 0.0
    assert osc == 0.0


def test_mcshane_line_is_exact():
    dom = qf.GridDomain("square", (0.5,), 0.5)
    f = qf.from_callable(dom, 41, lambda p: p[None, :], q=1, n=1)
    keep = np.zeros(41, dtype=bool)
    keep[0] = keep[-1] = True
    g = qf.lipschitz_extend(f, keep, lip=1.0)
    xs = f.axes()[0]
    assert np.allclose(g.values[:, 0, 0], xs, atol=1e-9)
    assert g.values.min() >= -1e-12 and g.values.max() <= 1.0 + 1e-12
    assert g.values[0, 0, 0] == f.values[0, 0, 0]
    assert g.values[-1, 0, 0] == f.values[-1, 0, 0]


def test_extension_preserves_anchors_and_lands_on_cone():
    mach = default_machinery(1, 2)
    dom = qf.GridDomain("square", (0.0,), 1.0)
    f = qf.from_callable(dom, 33, lambda p: np.array([[p[0]], [-p[0]]]), q=2, n=1)
    keep = np.abs(f.axes()[0]) > 0.4
    g = qf.lipschitz_extend(f, keep, lip=2.0, machinery=mach)
    assert np.array_equal(g.values[keep], f.values[keep])
    emb = xi_batch(mach.spec, g.values)
    _, resid = mach.lattice.nearest_point_batch(emb)
    assert resid.max() <= 1e-6
    lip, _ = qf.lipschitz_and_osc(g)
    assert lip <= 2.0 * math.sqrt(2) + 1e-6


def test_mollify_constant_invariant():
    mach = default_machinery(1, 2)
    f = qf.constant_field(qf.square(1.0), 33, QPoint([[0.2], [0.9]]))
    emb, w = qf.mollify_embedded(f, eps=3 * f.spacing)
    target = xi_batch(mach.spec, f.values[0, 0][None])[0]
    good = w > 0.5
    assert np.abs(emb[good] - target).max() <= 1e-12


def test_mollify_energy_non_increase():
    def fn(p):
        return np.array([[math.sin(2 * p[0]) + 0.5 * p[1]],
                         [2.0 + math.cos(p[0] + p[1])]])

    f = qf.from_callable(qf.square(1.0), 49, fn, q=2, n=1)
    base = qf.dirichlet_energy(f)
    emb, w = qf.mollify_embedded(f, eps=4 * f.spacing)
    interior = w > 1 - 1e-9
    got = qf.dirichlet_energy_embedded(emb, f.spacing, weights=interior.astype(float))
    assert got <= base * (1 + 1e-9)


def test_mollify_rejects_small_radius():
    f = qf.constant_field(qf.square(1.0), 17, QPoint([[0.0], [1.0]]))
    with pytest.raises(ValueError):
        qf.mollify_embedded(f, eps=0.5 * f.spacing)


def test_annulus_ramp_energy():
    dom = qf.square(1.0)  # blend clamps outside B_1, so grid past the rim is fine
    f = qf.constant_field(dom, 129, QPoint([[0.0]]))
    g = qf.constant_field(dom, 129, QPoint([[1.0]]))
    out = qf.annulus_interpolate(f, g, r=1.0, rbar=0.5)
    w = qf.disk_weights(out, (0.0, 0.0), 1.0)
    got = qf.dirichlet_energy(out, weights=w)
    expect = 3 * math.pi
    assert abs(got - expect) <= 0.02 * expect
    d = np.linalg.norm(out.nodes(), axis=-1)
    inner = d <= 0.5
    assert np.array_equal(out.values[inner], g.values[inner])
    rim = d >= 1.0 - 1e-12
    assert rim.any()
    assert np.array_equal(out.values[rim], f.values[rim])


def test_annulus_two_sheets_hand_value():
    mach = default_machinery(1, 2)
    dom = qf.ball(1.0)
    f = qf.constant_field(dom, 33, QPoint([[0.35], [-0.35]]))
    g = qf.constant_field(dom, 33, QPoint([[0.0], [0.0]]))
    out = qf.annulus_interpolate(f, g, r=1.0, rbar=0.5, machinery=mach)
    pts = out.nodes()
    d = np.linalg.norm(pts, axis=-1)
    idx = np.unravel_index(np.argmin(np.abs(d - 0.75)), d.shape)
    t = (d[idx] - 0.5) / 0.5
    want = np.sort(np.array([0.35 * t, -0.35 * t]))
    assert np.allclose(np.sort(out.values[idx][:, 0]), want, atol=1e-9)


def _chart():
    def psi(y, v):
        return 0.1 * (y[..., :1] ** 2 + y[..., 1:2] ** 2 + v[..., :1] ** 2)

    return qf.AmbientChart(psi=psi, m=2, n=1, l=1, dpsi_bound=0.35, d2psi_bound=0.2)


def test_chart_validate():
    rep = _chart().validate(np.random.default_rng(0))
    assert rep["ok"]
    assert rep["anchor_zero"] == 0.0
    assert rep["max_dpsi"] <= 0.35


def test_compose_ambient_energy_bounds():
    def fn(p):
        return np.array([[0.4 * p[0] - 0.1 * p[1]], [0.3 * p[1] + 1.0]])

    u = qf.from_callable(qf.square(1.0), 33, fn, q=2, n=1)
    chart = _chart()
    w = qf.compose_ambient(u, chart)
    assert w.n == 2 and w.q == 2
    assert np.array_equal(w.values[..., :1], u.values)
    eu = qf.dirichlet_energy(u)
    ew = qf.dirichlet_energy(w)
    B2 = chart.dpsi_bound ** 2
    assert ew >= eu - 1e-12
    assert ew <= (1 + 2 * B2) * eu + 2 * B2 * u.q * 4.0 + 1e-9


def test_embedded_energy_matches_tuple_energy():
    mach = default_machinery(1, 2)

    def fn(p):
        return np.array([[math.sin(p[0]) + 0.3 * p[1]],
                         [2.5 + 0.2 * math.cos(2 * p[1])]])

    f = qf.from_callable(qf.square(1.0), 65, fn, q=2, n=1)
    direct = qf.dirichlet_energy(f)
    emb = xi_batch(mach.spec, f.values)
    via = qf.dirichlet_energy_embedded(emb, f.spacing, mask=f.mask)
    assert abs(direct - via) <= 1e-10 * direct


def test_grid_json_roundtrip():
    f = _sqrt_field(16)
    g = qf.QGridFunction.from_json(f.to_json())
    assert g.domain == f.domain
    assert np.array_equal(g.values, f.values)
    assert np.array_equal(g.mask, f.mask)


def test_grid_accessors():
    f = _sqrt_field(16)
    assert f.m == 2 and f.q == 2 and f.n == 2
    assert abs(f.spacing - 2.0 / 15) <= 1e-15
    t = f.node((0, 0))
    assert isinstance(t, QPoint)
    assert f.mask[0, 0] == (np.linalg.norm(f.nodes()[0, 0]) <= 1.0 + 1e-12)
