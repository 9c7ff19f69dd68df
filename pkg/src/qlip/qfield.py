"""Multi-valued functions on uniform grids.

Values are unordered q-tuples per node.  The Dirichlet energy uses matched
finite differences: each grid edge contributes the squared matching metric of
its endpoint tuples over the spacing, weighted by a trapezoid rule in the
transverse directions (exact for affine single-valued fields) and optionally
by per-node region weights (coverage fractions for disks).

Extension, mollification and interpolation all route through the embedded
coordinates and retract stray values with the almost-projection machinery.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .embed import xi_batch, xi_inverse
from .qspace import QPoint, metric_g


@dataclass(frozen=True)
class GridDomain:
    """Square [c-r, c+r]^m or the inscribed ball B_r(c)."""

    kind: str
    center: tuple
    radius: float

    def __post_init__(self):
        if self.kind not in ("square", "ball"):
            raise ValueError("kind must be 'square' or 'ball'")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def m(self) -> int:
        return len(self.center)

    def to_json(self):
        return {"kind": self.kind, "center": list(self.center), "radius": self.radius}

    @staticmethod
    def from_json(obj):
        return GridDomain(obj["kind"], tuple(obj["center"]), float(obj["radius"]))


def square(radius: float = 1.0, center=(0.0, 0.0)) -> GridDomain:
    return GridDomain("square", tuple(float(c) for c in center), float(radius))


def ball(radius: float = 1.0, center=(0.0, 0.0)) -> GridDomain:
    return GridDomain("ball", tuple(float(c) for c in center), float(radius))


class QGridFunction:
    """q-tuple of values in R^n at each node of a uniform tensor grid."""

    def __init__(self, domain: GridDomain, res: int, values: np.ndarray,
                 mask: np.ndarray = None):
        self.domain = domain
        self.res = int(res)
        values = np.asarray(values, dtype=float)
        m = domain.m
        if values.shape[:m] != (res,) * m or values.ndim != m + 2:
            raise ValueError("values must have shape grid^m x q x n")
        self.values = values
        if mask is None:
            if domain.kind == "ball":
                r2 = np.sum((self.nodes() - np.asarray(domain.center)) ** 2, axis=-1)
                mask = r2 <= domain.radius ** 2 + 1e-12
            else:
                mask = np.ones((res,) * m, dtype=bool)
        self.mask = np.asarray(mask, dtype=bool)
        if self.mask.shape != (res,) * m:
            raise ValueError("mask shape mismatch")

    # -- geometry ------------------------------------------------------------

    @property
    def m(self) -> int:
        return self.domain.m

    @property
    def q(self) -> int:
        return self.values.shape[-2]

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    @property
    def spacing(self) -> float:
        return 2.0 * self.domain.radius / (self.res - 1)

    def axes(self):
        c, r = np.asarray(self.domain.center), self.domain.radius
        return [np.linspace(ci - r, ci + r, self.res) for ci in c]

    def nodes(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(grids, axis=-1)

    def node(self, idx) -> QPoint:
        return QPoint(self.values[idx])

    def copy(self) -> "QGridFunction":
        return QGridFunction(self.domain, self.res, self.values.copy(), self.mask.copy())

    # -- serialization --------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "domain": self.domain.to_json(),
            "res": self.res,
            "q": self.q,
            "n": self.n,
            "values": self.values.reshape(-1).tolist(),
            "mask": self.mask.reshape(-1).astype(int).tolist(),
        }

    @staticmethod
    def from_json(obj) -> "QGridFunction":
        dom = GridDomain.from_json(obj["domain"])
        res, q, n = int(obj["res"]), int(obj["q"]), int(obj["n"])
        vals = np.asarray(obj["values"], dtype=float).reshape((res,) * dom.m + (q, n))
        mask = np.asarray(obj["mask"], dtype=int).reshape((res,) * dom.m).astype(bool)
        return QGridFunction(dom, res, vals, mask)


def from_callable(domain: GridDomain, res: int, fn, q: int, n: int) -> QGridFunction:
    """Sample fn(point) -> (q, n) array at every node."""
    probe = QGridFunction(domain, res, np.zeros((res,) * domain.m + (q, n)))
    pts = probe.nodes().reshape(-1, domain.m)
    vals = np.stack([np.asarray(fn(p), dtype=float).reshape(q, n) for p in pts])
    return QGridFunction(domain, res, vals.reshape((res,) * domain.m + (q, n)))


def constant_field(domain: GridDomain, res: int, t: QPoint) -> QGridFunction:
    vals = np.broadcast_to(t.points, (res,) * domain.m + t.points.shape).copy()
    return QGridFunction(domain, res, vals)


# ---------------------------------------------------------------------------
# energy


def _perm_bank(q: int):
    return np.array(list(itertools.permutations(range(q))))


def matched_diff_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared matching metric between aligned arrays of tuples (..., q, n)."""
    q = a.shape[-2]
    if q <= 6:
        perms = _perm_bank(q)
        costs = np.stack([np.sum((a - b[..., p, :]) ** 2, axis=(-2, -1)) for p in perms])
        return costs.min(axis=0)
    flat_a = a.reshape(-1, *a.shape[-2:])
    flat_b = b.reshape(-1, *b.shape[-2:])
    out = np.array([metric_g(QPoint(x), QPoint(y)) ** 2
                    for x, y in zip(flat_a, flat_b)])
    return out.reshape(a.shape[:-2])


def _trapezoid_weights(res: int, m: int, axis: int) -> np.ndarray:
    """Transverse trapezoid factors for edges along `axis` on an m-grid."""
    if m == 1:
        return np.ones(1)
    factors = np.ones((res,) * m)
    for ax in range(m):
        if ax == axis:
            continue
        f = np.ones(res)
        f[0] = f[-1] = 0.5
        shape = [1] * m
        shape[ax] = res
        factors = factors * f.reshape(shape)
    sl = [slice(None)] * m
    sl[axis] = slice(0, res - 1)
    return factors[tuple(sl)]


def dirichlet_energy(f: QGridFunction, weights: np.ndarray = None) -> float:
    """Sum over edges of matched difference quotients squared, times cell
    measure; `weights` are per-node region fractions (default: the mask)."""
    if weights is None:
        weights = f.mask.astype(float)
    else:
        weights = np.asarray(weights, dtype=float) * f.mask
    if weights.sum() == 0:
        raise ValueError("empty region")
    h = f.spacing
    m = f.m
    total = 0.0
    for ax in range(m):
        lo = [slice(None)] * m
        hi = [slice(None)] * m
        lo[ax] = slice(0, f.res - 1)
        hi[ax] = slice(1, f.res)
        a = f.values[tuple(lo)]
        b = f.values[tuple(hi)]
        cost = matched_diff_sq(a, b) / h ** 2
        wedge = 0.5 * (weights[tuple(lo)] + weights[tuple(hi)])
        both = f.mask[tuple(lo)] & f.mask[tuple(hi)]
        total += float(np.sum(cost * wedge * both * _trapezoid_weights(f.res, m, ax)))
    return total * h ** m


def dirichlet_energy_embedded(emb: np.ndarray, h: float, mask: np.ndarray = None,
                              weights: np.ndarray = None) -> float:
    """Same quadrature for a single-valued embedded field (..., D)."""
    m = emb.ndim - 1
    res = emb.shape[0]
    if mask is None:
        mask = np.ones(emb.shape[:-1], dtype=bool)
    if weights is None:
        weights = mask.astype(float)
    else:
        weights = np.asarray(weights, dtype=float) * mask
    total = 0.0
    for ax in range(m):
        lo = [slice(None)] * m
        hi = [slice(None)] * m
        lo[ax] = slice(0, res - 1)
        hi[ax] = slice(1, res)
        cost = np.sum((emb[tuple(lo)] - emb[tuple(hi)]) ** 2, axis=-1) / h ** 2
        wedge = 0.5 * (weights[tuple(lo)] + weights[tuple(hi)])
        both = mask[tuple(lo)] & mask[tuple(hi)]
        total += float(np.sum(cost * wedge * both * _trapezoid_weights(res, m, ax)))
    return total * h ** m


def energy_density(f: QGridFunction) -> np.ndarray:
    """Per-node energy density: half-sum of incident edge difference quotients."""
    h = f.spacing
    out = np.zeros(f.values.shape[: f.m])
    count = np.zeros_like(out)
    for ax in range(f.m):
        lo = [slice(None)] * f.m
        hi = [slice(None)] * f.m
        lo[ax] = slice(0, f.res - 1)
        hi[ax] = slice(1, f.res)
        cost = matched_diff_sq(f.values[tuple(lo)], f.values[tuple(hi)]) / h ** 2
        both = f.mask[tuple(lo)] & f.mask[tuple(hi)]
        out[tuple(lo)] += cost * both
        out[tuple(hi)] += cost * both
        count[tuple(lo)] += both
        count[tuple(hi)] += both
    with np.errstate(invalid="ignore"):
        dens = np.where(count > 0, out * (f.m / np.maximum(count, 1)), 0.0)
    return dens


def disk_weights(f: QGridFunction, center, radius: float, sub: int = 4) -> np.ndarray:
    """Coverage fraction of each node's dual cell inside the disk."""
    pts = f.nodes()
    c = np.asarray(center, dtype=float)
    h = f.spacing
    d = np.linalg.norm(pts - c, axis=-1)
    inner = d <= radius - h  # dual cell certainly inside
    outer = d >= radius + h
    w = inner.astype(float)
    edge = ~inner & ~outer
    if np.any(edge):
        offs = (np.arange(sub) + 0.5) / sub - 0.5
        stencil = np.stack(np.meshgrid(*([offs] * f.m), indexing="ij"),
                           axis=-1).reshape(-1, f.m) * h
        epts = pts[edge][:, None, :] + stencil[None, :, :]
        frac = (np.linalg.norm(epts - c, axis=-1) <= radius).mean(axis=1)
        w[edge] = frac
    return w


# ---------------------------------------------------------------------------
# Lipschitz constant and oscillation


def lipschitz_and_osc(f: QGridFunction, stencil: int = 2):
    """Max difference quotient over node pairs within the stencil radius, and
    the exact min-over-centers of the worst spread (solved as a weighted
    smallest enclosing problem on tuple means and spreads)."""
    from .coneproj import offset_enclosing_center

    h = f.spacing
    m = f.m
    lip_sq = 0.0
    for off in itertools.product(range(-stencil, stencil + 1), repeat=m):
        if all(o == 0 for o in off) or off < tuple(-o for o in off):
            continue  # skip null and mirror-duplicate offsets
        src = [slice(max(0, -o), f.res - max(0, o)) for o in off]
        dst = [slice(max(0, o), f.res + min(0, o)) for o in off]
        a = f.values[tuple(src)]
        b = f.values[tuple(dst)]
        both = f.mask[tuple(src)] & f.mask[tuple(dst)]
        if not np.any(both):
            continue
        cost = matched_diff_sq(a, b)
        d2 = (h ** 2) * sum(o * o for o in off)
        lip_sq = max(lip_sq, float(cost[both].max()) / d2)

    valid = f.values[f.mask]
    eta = valid.mean(axis=-2)
    spread = np.sum((valid - eta[..., None, :]) ** 2, axis=(-2, -1))
    if np.allclose(spread, 0) and np.allclose(eta, eta.reshape(-1, f.n)[0]):
        return math.sqrt(lip_sq), 0.0
    _, worst = offset_enclosing_center(eta.reshape(-1, f.n), spread.reshape(-1),
                                       weight=float(f.q))
    return math.sqrt(lip_sq), math.sqrt(max(worst, 0.0))


# ---------------------------------------------------------------------------
# extension, mollification, interpolation


def lipschitz_extend(f: QGridFunction, keep: np.ndarray, lip: float,
                     machinery=None) -> QGridFunction:
    """McShane inf-convolution per embedded coordinate off `keep`, followed by
    retraction of values that left the cone; nodes in `keep` are preserved
    bitwise."""
    keep = np.asarray(keep, dtype=bool)
    if not np.any(keep):
        raise ValueError("empty anchor set")
    if machinery is None:
        from .roproj import default_machinery
        machinery = default_machinery(f.n, f.q, m=f.m)
    spec, lat = machinery.spec, machinery.lattice
    emb = xi_batch(spec, f.values)
    pts = f.nodes()
    anchors = pts[keep]
    avals = emb[keep]
    out = f.copy()
    todo = np.argwhere(~keep & f.mask)
    if len(todo) == 0:
        return out
    qpts = pts[tuple(np.asarray(todo).T)]
    dists = np.linalg.norm(qpts[:, None, :] - anchors[None, :, :], axis=-1)
    ext = np.min(avals[None, :, :] + lip * dists[:, :, None], axis=1)
    snapped, resid = lat.nearest_point_batch(ext)
    tol = machinery.on_image_tol * (1 + np.linalg.norm(ext, axis=1))
    for row, idx in enumerate(todo):
        v = snapped[row] if resid[row] <= tol[row] else machinery.rho_star(ext[row])
        t = xi_inverse(spec, v, tol=1e-5)
        out.values[tuple(idx)] = t.points
    return out


def _bump_kernel(m: int, h: float, eps: float) -> np.ndarray:
    if eps < h:
        raise ValueError("mollification radius below grid spacing")
    k = int(math.floor(eps / h + 1e-9))
    ax = np.arange(-k, k + 1) * h
    grids = np.meshgrid(*([ax] * m), indexing="ij")
    r2 = sum(g ** 2 for g in grids) / eps ** 2
    with np.errstate(divide="ignore", over="ignore"):
        kern = np.where(r2 < 1.0, np.exp(-1.0 / np.maximum(1.0 - r2, 1e-300)), 0.0)
    return kern / kern.sum()


def mollify_embedded(f: QGridFunction, eps: float, machinery=None):
    """Mask-aware convolution of the embedded field with a smooth bump.

    Returns (embedded array, weight array); the ratio is normalized so the
    kernel integrates to one over the valid region.  Values are meaningful
    where the weight is positive; the output generally leaves the cone.
    """
    if machinery is None:
        from .roproj import default_machinery
        machinery = default_machinery(f.n, f.q, m=f.m)
    emb = xi_batch(machinery.spec, f.values)
    kern = _bump_kernel(f.m, f.spacing, eps)
    w = fftconvolve(f.mask.astype(float), kern, mode="same")
    out = np.empty_like(emb)
    masked = emb * f.mask[..., None]
    for i in range(emb.shape[-1]):
        out[..., i] = fftconvolve(masked[..., i], kern, mode="same")
    good = w > 1e-10
    out[good] /= w[good][..., None]
    out[~good] = 0.0
    return out, w


def retract_embedded(emb: np.ndarray, machinery, select: np.ndarray = None) -> np.ndarray:
    """Bring embedded node values back onto the cone: exact nearest point when
    the residual is tiny, the full almost-projection otherwise."""
    flat = emb.reshape(-1, emb.shape[-1])
    sel = np.ones(len(flat), dtype=bool) if select is None \
        else np.asarray(select, dtype=bool).reshape(-1)
    out = flat.copy()
    snapped, resid = machinery.lattice.nearest_point_batch(flat[sel])
    tol = machinery.on_image_tol * (1 + np.linalg.norm(flat[sel], axis=1))
    rows = np.flatnonzero(sel)
    out[rows] = snapped
    for j in np.flatnonzero(resid > tol):
        out[rows[j]] = machinery.rho_star(flat[rows[j]])
    return out.reshape(emb.shape)


def embedded_to_field(emb: np.ndarray, template: QGridFunction, machinery,
                      tol: float = 1e-5) -> QGridFunction:
    """Decode an on-cone embedded array back into tuple values."""
    out = template.copy()
    flat = emb.reshape(-1, emb.shape[-1])
    mask = template.mask.reshape(-1)
    vals = out.values.reshape(-1, template.q, template.n)
    for i in np.flatnonzero(mask):
        vals[i] = xi_inverse(machinery.spec, flat[i], tol=tol).points
    return out


def annulus_interpolate(f: QGridFunction, g: QGridFunction, r: float,
                        rbar: float, machinery=None) -> QGridFunction:
    """Radial embedded blend: g inside B_rbar, f outside B_r, linear in the
    radius between, retracted onto the cone in the open annulus only (so the
    boundary values are preserved bitwise)."""
    if rbar >= r:
        raise ValueError("need rbar < r")
    if f.res != g.res or f.domain != g.domain:
        raise ValueError("fields must share the grid")
    if machinery is None:
        from .roproj import default_machinery
        machinery = default_machinery(f.n, f.q, m=f.m)
    spec = machinery.spec
    rho = np.linalg.norm(f.nodes() - np.asarray(f.domain.center), axis=-1)
    t = np.clip((rho - rbar) / (r - rbar), 0.0, 1.0)
    emb = (1.0 - t[..., None]) * xi_batch(spec, g.values) \
        + t[..., None] * xi_batch(spec, f.values)
    out = f.copy()
    inner = t <= 0.0
    outer = t >= 1.0
    out.values[inner] = g.values[inner]
    out.values[outer] = f.values[outer]
    mid = ~inner & ~outer & f.mask
    if np.any(mid):
        fixed = retract_embedded(emb[mid], machinery)
        for row, idx in enumerate(np.argwhere(mid)):
            out.values[tuple(idx)] = xi_inverse(spec, fixed[row], tol=1e-5).points
    return out


# ---------------------------------------------------------------------------
# ambient composition


@dataclass(frozen=True)
class AmbientChart:
    """Second-fundamental-form style chart: w = (u, psi(y, u)) per sheet.

    psi maps (points (..., m), values (..., n)) -> (..., l) vectorized; the
    declared derivative bounds are spot-checked by finite differences."""

    psi: object
    m: int
    n: int
    l: int
    dpsi_bound: float
    d2psi_bound: float

    def validate(self, rng: np.random.Generator, samples: int = 200,
                 box: float = 1.0) -> dict:
        y = rng.uniform(-box, box, size=(samples, self.m))
        v = rng.uniform(-box, box, size=(samples, self.n))
        base = np.asarray(self.psi(y, v), dtype=float)
        anchor = np.asarray(self.psi(np.zeros((1, self.m)), np.zeros((1, self.n))))
        step = 1e-5
        grad_sq = np.zeros(samples)
        for i in range(self.m):
            dy = np.zeros(self.m)
            dy[i] = step
            d = (np.asarray(self.psi(y + dy, v)) - np.asarray(self.psi(y - dy, v))) / (2 * step)
            grad_sq += np.sum(d ** 2, axis=-1)
        for i in range(self.n):
            dv = np.zeros(self.n)
            dv[i] = step
            d = (np.asarray(self.psi(y, v + dv)) - np.asarray(self.psi(y, v - dv))) / (2 * step)
            grad_sq += np.sum(d ** 2, axis=-1)
        worst = float(np.sqrt(grad_sq.max()))
        report = {"anchor_zero": float(np.abs(anchor).max()),
                  "max_dpsi": worst, "declared": self.dpsi_bound,
                  "ok": bool(worst <= self.dpsi_bound * (1 + 1e-6)
                             and np.abs(anchor).max() < 1e-12)}
        return report


def compose_ambient(u: QGridFunction, chart: AmbientChart) -> QGridFunction:
    if chart.m != u.m or chart.n != u.n:
        raise ValueError("chart dimensions do not match the field")
    pts = u.nodes()[..., None, :]  # broadcast over sheets
    y = np.broadcast_to(pts, u.values.shape[:-1] + (u.m,))
    psi_vals = np.asarray(chart.psi(y.reshape(-1, u.m),
                                    u.values.reshape(-1, u.n)), dtype=float)
    psi_vals = psi_vals.reshape(u.values.shape[:-1] + (chart.l,))
    w = np.concatenate([u.values, psi_vals], axis=-1)
    return QGridFunction(u.domain, u.res, w, u.mask.copy())
