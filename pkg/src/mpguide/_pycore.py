"""Pure-Python kernels.

This module is the fallback used when the compiled ``_core`` extension is not
available, and the readable reference the extension is checked against.  Both
modules expose the same functions with the same argument order and consume
random numbers from the numpy generator in the same sequence, so for a given
seed they produce identical results.

Conventions: directions point along propagation; a vertex's ``wi``/``wo`` are
unit vectors pointing *away* from the vertex toward its two neighbours.
"""

import math
from time import perf_counter

from ._layout import (
    ADMISSIBLE, CONDUCTOR, DEDUCE_MISMATCH, DEDUCE_MISS, DEDUCE_OK, DEDUCE_TIR,
    DIELECTRIC, DIFFUSE, EM_KIND, EM_LE, EM_POS, EM_RAD, EMIT_SPHERE, ESCAPED,
    GLOSSY, KIND_QUAD, MODE_MPG, MODE_PT, MT_CLASS, MT_COL, MT_IOR, MT_ROUGH,
    NOT_CONVERGED, N_MAX, P_ALPHA, P_BETA0, P_BETA_MIN, P_CLAMP, P_DELTA_SAME,
    P_FD_DELTA, P_GROWTH, P_KMAX, P_MAX_DEPTH, P_MAX_ITER, P_MODE, P_P0,
    P_RETRIES, P_RR_GAMMA, P_RR_START, P_SELECTIVE, P_TIMING, P_TOL,
    P_TOL_POLISH, P_TRAINING, SH_AREA, SH_C, SH_CURV, SH_EU, SH_EV, SH_HU,
    SH_HV, SH_KIND, SH_MAT, SH_N, SH_RAD, ST_ACT_ACTIVE, ST_ACT_QUERIES,
    ST_CHAIN_NONZERO, ST_DEDUCE_FAIL, ST_ESCAPED, ST_ESTIMATES, ST_FOUND,
    ST_GGT_FAIL, ST_GUIDE_TIME, ST_LEARNED, ST_PATHS, ST_RECORDS, ST_SPEC_TIME,
    ST_TRIALS, ST_TRUNCATED, ST_WALKS, ST_WALKS_OK,
)

BACKEND = "python"
INV_PI = 1.0 / math.pi
INF = float("inf")


# ---------------------------------------------------------------------------
# small vector helpers on 3-tuples

def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _add(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def _mul(a, s):
    return (a[0] * s, a[1] * s, a[2] * s)


def _madd(a, b, s):
    return (a[0] + b[0] * s, a[1] + b[1] * s, a[2] + b[2] * s)


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0])


def _norm(a):
    return math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


def _normalize(a):
    inv = 1.0 / math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
    return (a[0] * inv, a[1] * inv, a[2] * inv)


def _lum(c):
    return 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]


def onb(n):
    """Orthonormal (t1, t2) with t1 x t2 = n (Duff et al. branchless frame)."""
    sign = math.copysign(1.0, n[2])
    a = -1.0 / (sign + n[2])
    b = n[0] * n[1] * a
    t1 = (1.0 + sign * n[0] * n[0] * a, sign * b, -sign * n[0])
    t2 = (b, sign + n[1] * n[1] * a, -n[1])
    return t1, t2


def reflect(w, n):
    c = 2.0 * _dot(w, n)
    return (w[0] - c * n[0], w[1] - c * n[1], w[2] - c * n[2])


def refract(w, n, ior):
    """Refract propagation direction ``w`` at a surface of relative index ``ior``.

    Returns None on total internal reflection.
    """
    c = _dot(w, n)
    if c < 0.0:
        eta = 1.0 / ior
        nn = n
        cosi = -c
    else:
        eta = ior
        nn = (-n[0], -n[1], -n[2])
        cosi = c
    k = 1.0 - eta * eta * (1.0 - cosi * cosi)
    if k < 0.0:
        return None
    s = eta * cosi - math.sqrt(k)
    return (eta * w[0] + s * nn[0], eta * w[1] + s * nn[1], eta * w[2] + s * nn[2])


def fresnel(cos_i, eta_i, eta_t):
    """Unpolarised Fresnel reflectance; 1 under total internal reflection."""
    r = eta_i / eta_t
    sin2t = r * r * (1.0 - cos_i * cos_i)
    if sin2t >= 1.0:
        return 1.0
    cos_t = math.sqrt(1.0 - sin2t)
    rs = (eta_i * cos_i - eta_t * cos_t) / (eta_i * cos_i + eta_t * cos_t)
    rp = (eta_t * cos_i - eta_i * cos_t) / (eta_t * cos_i + eta_i * cos_t)
    return 0.5 * (rs * rs + rp * rp)


# ---------------------------------------------------------------------------
# scene / guide containers

class KScene:
    def __init__(self, shapes, materials, emitters, spec_ids, spec_cdf, scale):
        self.shapes = [tuple(float(v) for v in row) for row in shapes]
        self.materials = [tuple(float(v) for v in row) for row in materials]
        self.emitters = [tuple(float(v) for v in row) for row in emitters]
        self.spec_ids = [int(i) for i in spec_ids]
        self.spec_cdf = [float(v) for v in spec_cdf]
        self.scale = float(scale)
        self.eps = 1e-4 * float(scale)
        self.is_spec = [self.materials[int(s[SH_MAT])][MT_CLASS] >= DIELECTRIC
                        for s in self.shapes]


class KGuide:
    def __init__(self, node_axis, node_split, node_left, node_right, node_leaf,
                 lo, inv_ext, leaf_real, leaf_pn, leaf_tau_start, leaf_tau_count,
                 tau_n, tau_bits, tau_prob, tau_lobe_start, tau_lobe_count,
                 lobe_mu, lobe_kappa, lobe_cdf):
        self.node_axis = [int(v) for v in node_axis]
        self.node_split = [float(v) for v in node_split]
        self.node_left = [int(v) for v in node_left]
        self.node_right = [int(v) for v in node_right]
        self.node_leaf = [int(v) for v in node_leaf]
        self.lo = [float(v) for v in lo]
        self.inv_ext = [float(v) for v in inv_ext]
        self.leaf_real = [int(v) for v in leaf_real]
        self.leaf_pn = [[float(v) for v in row] for row in leaf_pn]
        self.leaf_tau_start = [int(v) for v in leaf_tau_start]
        self.leaf_tau_count = [int(v) for v in leaf_tau_count]
        self.tau_n = [int(v) for v in tau_n]
        self.tau_bits = [int(v) for v in tau_bits]
        self.tau_prob = [float(v) for v in tau_prob]
        self.tau_lobe_start = [int(v) for v in tau_lobe_start]
        self.tau_lobe_count = [int(v) for v in tau_lobe_count]
        self.lobe_mu = [tuple(float(v) for v in row) for row in lobe_mu]
        self.lobe_kappa = [float(v) for v in lobe_kappa]
        self.lobe_cdf = [float(v) for v in lobe_cdf]


# ---------------------------------------------------------------------------
# intersection

def _hit_shape(sh, o, d, tmin, tmax):
    c = (sh[SH_C], sh[SH_C + 1], sh[SH_C + 2])
    if sh[SH_KIND] == KIND_QUAD:
        n = (sh[SH_N], sh[SH_N + 1], sh[SH_N + 2])
        den = _dot(d, n)
        if abs(den) < 1e-14:
            return -1.0
        t = _dot(_sub(c, o), n) / den
        if t <= tmin or t >= tmax:
            return -1.0
        q = _sub(_madd(o, d, t), c)
        if abs(q[0] * sh[SH_EU] + q[1] * sh[SH_EU + 1] + q[2] * sh[SH_EU + 2]) > sh[SH_HU]:
            return -1.0
        if abs(q[0] * sh[SH_EV] + q[1] * sh[SH_EV + 1] + q[2] * sh[SH_EV + 2]) > sh[SH_HV]:
            return -1.0
        return t
    r = sh[SH_RAD]
    oc = _sub(o, c)
    b = _dot(oc, d)
    cc = _dot(oc, oc) - r * r
    disc = b * b - cc
    if disc < 0.0:
        return -1.0
    s = math.sqrt(disc)
    t = -b - s
    if tmin < t < tmax:
        return t
    t = -b + s
    if tmin < t < tmax:
        return t
    return -1.0


def intersect(ks, o, d, tmin, tmax, specular_only):
    """Nearest shape hit: returns (t, shape_id) with shape_id -1 on a miss."""
    best = tmax
    sid = -1
    for i, sh in enumerate(ks.shapes):
        if specular_only and not ks.is_spec[i]:
            continue
        t = _hit_shape(sh, o, d, tmin, best)
        if t > 0.0:
            best = t
            sid = i
    return best, sid


def _hit_sphere(c, r, o, d, tmin, tmax):
    oc = _sub(o, c)
    b = _dot(oc, d)
    cc = _dot(oc, oc) - r * r
    disc = b * b - cc
    if disc < 0.0:
        return -1.0
    s = math.sqrt(disc)
    t = -b - s
    if tmin < t < tmax:
        return t
    t = -b + s
    if tmin < t < tmax:
        return t
    return -1.0


def intersect_emitters(ks, o, d, tmin, tmax):
    best = tmax
    eid = -1
    for i, em in enumerate(ks.emitters):
        if em[EM_KIND] != EMIT_SPHERE:
            continue
        t = _hit_sphere((em[EM_POS], em[EM_POS + 1], em[EM_POS + 2]), em[EM_RAD], o, d, tmin, best)
        if t > 0.0:
            best = t
            eid = i
    return best, eid


def occluded(ks, a, b):
    d = _sub(b, a)
    dist = _norm(d)
    d = _mul(d, 1.0 / dist)
    tmax = dist - ks.eps
    if tmax <= ks.eps:
        return False
    for sh in ks.shapes:
        if _hit_shape(sh, a, d, ks.eps, tmax) > 0.0:
            return True
    for em in ks.emitters:
        if em[EM_KIND] == EMIT_SPHERE:
            c = (em[EM_POS], em[EM_POS + 1], em[EM_POS + 2])
            if _hit_sphere(c, em[EM_RAD], a, d, ks.eps, tmax) > 0.0:
                return True
    return False


# ---------------------------------------------------------------------------
# local geometry

def shape_normal(ks, sid, p):
    sh = ks.shapes[sid]
    if sh[SH_KIND] == KIND_QUAD:
        return (sh[SH_N], sh[SH_N + 1], sh[SH_N + 2])
    inv = 1.0 / sh[SH_RAD]
    return ((p[0] - sh[SH_C]) * inv, (p[1] - sh[SH_C + 1]) * inv, (p[2] - sh[SH_C + 2]) * inv)


def shape_frame(ks, sid, p):
    sh = ks.shapes[sid]
    if sh[SH_KIND] == KIND_QUAD:
        return ((sh[SH_EU], sh[SH_EU + 1], sh[SH_EU + 2]),
                (sh[SH_EV], sh[SH_EV + 1], sh[SH_EV + 2]),
                (sh[SH_N], sh[SH_N + 1], sh[SH_N + 2]))
    n = _normalize(shape_normal(ks, sid, p))
    t1, t2 = onb(n)
    return t1, t2, n


def retract(ks, sid, p, frame, du, dv):
    """Move ``p`` by (du, dv) in the tangent frame and map back onto the shape."""
    sh = ks.shapes[sid]
    tu, tv = frame[0], frame[1]
    if sh[SH_KIND] == KIND_QUAD:
        q = (p[0] + du * tu[0] + dv * tv[0],
             p[1] + du * tu[1] + dv * tv[1],
             p[2] + du * tu[2] + dv * tv[2])
        r = _sub(q, (sh[SH_C], sh[SH_C + 1], sh[SH_C + 2]))
        u = r[0] * sh[SH_EU] + r[1] * sh[SH_EU + 1] + r[2] * sh[SH_EU + 2]
        v = r[0] * sh[SH_EV] + r[1] * sh[SH_EV + 1] + r[2] * sh[SH_EV + 2]
        return q, (abs(u) <= sh[SH_HU] and abs(v) <= sh[SH_HV])
    c = (sh[SH_C], sh[SH_C + 1], sh[SH_C + 2])
    q = (p[0] - c[0] + du * tu[0] + dv * tv[0],
         p[1] - c[1] + du * tu[1] + dv * tv[1],
         p[2] - c[2] + du * tu[2] + dv * tv[2])
    s = sh[SH_RAD] / _norm(q)
    return (c[0] + q[0] * s, c[1] + q[1] * s, c[2] + q[2] * s), True


def shape_size(sh):
    if sh[SH_KIND] == KIND_QUAD:
        return 2.0 * min(sh[SH_HU], sh[SH_HV])
    return sh[SH_RAD]


# ---------------------------------------------------------------------------
# chain deduction

def deduce(ks, xd, wd, taus, n, rng):
    """Trace ``n`` specular vertices from ``xd`` along ``wd``.

    ``taus`` fixes the scattering types (0 = R, 1 = T); when it is None the type
    at each dielectric vertex is drawn with probability 1/2 from ``rng``.
    Returns (status, shape_ids, points, types, type_probability).
    """
    sids = []
    pts = []
    out_t = []
    prob = 1.0
    o = xd
    d = wd
    for i in range(n):
        t, sid = intersect(ks, o, d, ks.eps, INF, True)
        if sid < 0:
            return DEDUCE_MISS, sids, pts, out_t, prob
        p = _madd(o, d, t)
        mat = ks.materials[int(ks.shapes[sid][SH_MAT])]
        if taus is None:
            if mat[MT_CLASS] == DIELECTRIC:
                ty = 0 if rng.random() < 0.5 else 1
                prob *= 0.5
            else:
                ty = 0
        else:
            ty = taus[i]
            if ty == 1 and mat[MT_CLASS] != DIELECTRIC:
                return DEDUCE_MISMATCH, sids, pts, out_t, prob
        sids.append(sid)
        pts.append(p)
        out_t.append(ty)
        if i + 1 < n:
            nrm = shape_normal(ks, sid, p)
            if ty == 0:
                d = reflect(d, nrm)
            else:
                d = refract(d, nrm, mat[MT_IOR])
                if d is None:
                    return DEDUCE_TIR, sids, pts, out_t, prob
                d = _normalize(d)
            o = p
    return DEDUCE_OK, sids, pts, out_t, prob


# ---------------------------------------------------------------------------
# constraints

def _vertex_sides(ks, sid, x, frame, prev, nxt):
    n = frame[2]
    a = _sub(prev, x)
    b = _sub(nxt, x)
    return a, b, n


def spec_residual(ks, sids, pts, frames, taus, xd, xl):
    """Tangential components of the normalised generalised half-vector.

    Returns (residual list, sidedness_ok); None for a degenerate chain.
    """
    n = len(sids)
    out = [0.0] * (2 * n)
    sides_ok = True
    for i in range(n):
        prev = xd if i == 0 else pts[i - 1]
        nxt = xl if i == n - 1 else pts[i + 1]
        x = pts[i]
        tu, tv, nn = frames[i]
        a = _sub(prev, x)
        b = _sub(nxt, x)
        la = _norm(a)
        lb = _norm(b)
        if la < 1e-12 or lb < 1e-12:
            return None, False
        wi = _mul(a, 1.0 / la)
        wo = _mul(b, 1.0 / lb)
        ci = _dot(wi, nn)
        co = _dot(wo, nn)
        if taus[i] == 0:
            h = _add(wi, wo)
            if ci * co <= 0.0:
                sides_ok = False
        else:
            ior = ks.materials[int(ks.shapes[sids[i]][SH_MAT])][MT_IOR]
            if ci > 0.0:
                h = _madd(_mul(wi, -1.0), wo, -ior)
            else:
                h = _madd(_mul(wi, -ior), wo, -1.0)
            if ci * co >= 0.0:
                sides_ok = False
        lh = _norm(h)
        if lh < 1e-14:
            return None, False
        out[2 * i] = _dot(h, tu) / lh
        out[2 * i + 1] = _dot(h, tv) / lh
    return out, sides_ok


def newton_system(ks, sids, pts, frames, taus, xd, xl, want_jac):
    """Constraint vector driven by the walk and its Jacobian.

    Reflection vertices use the slope form t.(a/(a.n) + b/(b.n)), which is
    linear in the vertex position on planar mirrors; refraction vertices use
    the normalised generalised half-vector.  Both vanish exactly on admissible
    chains.  The Jacobian is taken with respect to tangent-plane offsets of
    each vertex, with the frame carried by projection.
    """
    n = len(sids)
    m = 2 * n
    F = [0.0] * m
    J = [[0.0] * m for _ in range(m)] if want_jac else None
    for i in range(n):
        prev = xd if i == 0 else pts[i - 1]
        nxt = xl if i == n - 1 else pts[i + 1]
        x = pts[i]
        tu, tv, nn = frames[i]
        sh = ks.shapes[sids[i]]
        curv = sh[SH_CURV]
        a = _sub(prev, x)
        b = _sub(nxt, x)
        tks = (tu, tv)
        if taus[i] == 0:
            an = _dot(a, nn)
            bn = _dot(b, nn)
            if abs(an) < 1e-12 or abs(bn) < 1e-12:
                return None, None
            for k in range(2):
                tk = tks[k]
                ta = _dot(tk, a)
                tb = _dot(tk, b)
                F[2 * i + k] = ta / an + tb / bn
                if not want_jac:
                    continue
                row = J[2 * i + k]
                if i > 0:
                    gp = _madd(_mul(tk, 1.0 / an), nn, -ta / (an * an))
                    fp = frames[i - 1]
                    row[2 * i - 2] = _dot(gp, fp[0])
                    row[2 * i - 1] = _dot(gp, fp[1])
                if i < n - 1:
                    gn = _madd(_mul(tk, 1.0 / bn), nn, -tb / (bn * bn))
                    fn = frames[i + 1]
                    row[2 * i + 2] = _dot(gn, fn[0])
                    row[2 * i + 3] = _dot(gn, fn[1])
                gs = _mul(tk, -(1.0 / an + 1.0 / bn))
                gs = _madd(gs, a, -curv * ta / (an * an))
                gs = _madd(gs, b, -curv * tb / (bn * bn))
                row[2 * i] = _dot(gs, tu) - (2.0 * curv if k == 0 else 0.0)
                row[2 * i + 1] = _dot(gs, tv) - (2.0 * curv if k == 1 else 0.0)
        else:
            la = _norm(a)
            lb = _norm(b)
            if la < 1e-12 or lb < 1e-12:
                return None, None
            wi = _mul(a, 1.0 / la)
            wo = _mul(b, 1.0 / lb)
            ior = ks.materials[int(sh[SH_MAT])][MT_IOR]
            if _dot(wi, nn) > 0.0:
                ei, eo = 1.0, ior
            else:
                ei, eo = ior, 1.0
            hr = (-(ei * wi[0] + eo * wo[0]), -(ei * wi[1] + eo * wo[1]), -(ei * wi[2] + eo * wo[2]))
            lh = _norm(hr)
            if lh < 1e-14:
                return None, None
            h = _mul(hr, 1.0 / lh)
            nh = _dot(nn, h)
            for k in range(2):
                tk = tks[k]
                F[2 * i + k] = _dot(tk, h)
                if not want_jac:
                    continue
                row = J[2 * i + k]
                rk = _mul(_madd(tk, h, -_dot(h, tk)), 1.0 / lh)
                ra = _mul(_madd(rk, wi, -_dot(wi, rk)), 1.0 / la)
                rb = _mul(_madd(rk, wo, -_dot(wo, rk)), 1.0 / lb)
                if i > 0:
                    fp = frames[i - 1]
                    row[2 * i - 2] = -ei * _dot(ra, fp[0])
                    row[2 * i - 1] = -ei * _dot(ra, fp[1])
                if i < n - 1:
                    fn = frames[i + 1]
                    row[2 * i + 2] = -eo * _dot(rb, fn[0])
                    row[2 * i + 3] = -eo * _dot(rb, fn[1])
                gs = (ei * ra[0] + eo * rb[0], ei * ra[1] + eo * rb[1], ei * ra[2] + eo * rb[2])
                row[2 * i] = _dot(gs, tu) - (curv * nh if k == 0 else 0.0)
                row[2 * i + 1] = _dot(gs, tv) - (curv * nh if k == 1 else 0.0)
    return F, J


def projected_frame(frame, n_new):
    tu = frame[0]
    t = _madd(tu, n_new, -_dot(tu, n_new))
    t = _normalize(t)
    return t, _cross(n_new, t), n_new


def fd_jacobian(ks, sids, pts, taus, xd, xl, h):
    """Central-difference Jacobian of ``newton_system`` (verification mode)."""
    n = len(sids)
    frames = [shape_frame(ks, sids[i], pts[i]) for i in range(n)]
    m = 2 * n
    J = [[0.0] * m for _ in range(m)]
    for j in range(n):
        for k in range(2):
            cols = []
            for s in (h, -h):
                du = s if k == 0 else 0.0
                dv = s if k == 1 else 0.0
                pj, _ = retract(ks, sids[j], pts[j], frames[j], du, dv)
                p2 = list(pts)
                p2[j] = pj
                f2 = list(frames)
                f2[j] = projected_frame(frames[j], _normalize(shape_normal(ks, sids[j], pj)))
                F, _ = newton_system(ks, sids, p2, f2, taus, xd, xl, False)
                cols.append(F)
            for r in range(m):
                J[r][2 * j + k] = (cols[0][r] - cols[1][r]) / (2.0 * h)
    return J


def solve(A, b):
    """Gaussian elimination with partial pivoting; None if singular."""
    m = len(b)
    M = [list(A[i]) + [b[i]] for i in range(m)]
    for c in range(m):
        piv = c
        best = abs(M[c][c])
        for r in range(c + 1, m):
            v = abs(M[r][c])
            if v > best:
                best = v
                piv = r
        if best < 1e-300:
            return None
        if piv != c:
            M[c], M[piv] = M[piv], M[c]
        rowc = M[c]
        inv = 1.0 / rowc[c]
        for r in range(c + 1, m):
            rowr = M[r]
            f = rowr[c] * inv
            if f != 0.0:
                for j in range(c, m + 1):
                    rowr[j] -= f * rowc[j]
    x = [0.0] * m
    for r in range(m - 1, -1, -1):
        s = M[r][m]
        for j in range(r + 1, m):
            s -= M[r][j] * x[j]
        x[r] = s / M[r][r]
    return x


def _inf_norm(v):
    best = 0.0
    for x in v:
        ax = abs(x)
        if ax > best:
            best = ax
    return best


def _two_norm(v):
    return math.sqrt(sum(x * x for x in v))


def walk(ks, sids, pts, taus, xd, xl, prm, tol):
    """Damped Newton walk; returns (status, points, iterations)."""
    n = len(sids)
    pts = list(pts)
    frames = [shape_frame(ks, sids[i], pts[i]) for i in range(n)]
    max_it = int(prm[P_MAX_ITER])
    beta = prm[P_BETA0]
    it = 0
    clamp = [prm[P_CLAMP] * shape_size(ks.shapes[s]) for s in sids]
    while True:
        res, sides = spec_residual(ks, sids, pts, frames, taus, xd, xl)
        if res is None:
            return NOT_CONVERGED, pts, it
        if _inf_norm(res) < tol:
            return (ADMISSIBLE if sides else NOT_CONVERGED), pts, it
        if it >= max_it:
            return NOT_CONVERGED, pts, it
        F, J = newton_system(ks, sids, pts, frames, taus, xd, xl, True)
        if F is None:
            return NOT_CONVERGED, pts, it
        step = solve(J, [-f for f in F])
        if step is None:
            return NOT_CONVERGED, pts, it
        scale = 1.0
        for i in range(n):
            ln = math.sqrt(step[2 * i] * step[2 * i] + step[2 * i + 1] * step[2 * i + 1])
            if ln * scale > clamp[i]:
                scale = clamp[i] / ln
        fnorm = _two_norm(F)
        while True:
            s = beta * scale
            new_pts = []
            for i in range(n):
                q, inside = retract(ks, sids[i], pts[i], frames[i], s * step[2 * i], s * step[2 * i + 1])
                if not inside:
                    return ESCAPED, pts, it
                new_pts.append(q)
            new_frames = [shape_frame(ks, sids[i], new_pts[i]) for i in range(n)]
            F2, _ = newton_system(ks, sids, new_pts, new_frames, taus, xd, xl, False)
            if F2 is not None and _two_norm(F2) < fnorm:
                pts = new_pts
                frames = new_frames
                beta = min(1.0, beta * prm[P_GROWTH])
                break
            beta *= 0.5
            if beta < prm[P_BETA_MIN]:
                return NOT_CONVERGED, pts, it
        it += 1


def same_chain(pa, ta, pb, tb, delta):
    if len(pa) != len(pb) or list(ta) != list(tb):
        return False
    d2 = delta * delta
    for a, b in zip(pa, pb):
        dx = a[0] - b[0]
        dy = a[1] - b[1]
        dz = a[2] - b[2]
        if dx * dx + dy * dy + dz * dz >= d2:
            return False
    return True


# ---------------------------------------------------------------------------
# throughput

def kappa(ks, sids, pts, taus, xd):
    out = [1.0, 1.0, 1.0]
    for i in range(len(sids)):
        prev = xd if i == 0 else pts[i - 1]
        mat = ks.materials[int(ks.shapes[sids[i]][SH_MAT])]
        if mat[MT_CLASS] == CONDUCTOR:
            out[0] *= mat[MT_COL]
            out[1] *= mat[MT_COL + 1]
            out[2] *= mat[MT_COL + 2]
            continue
        nn = _normalize(shape_normal(ks, sids[i], pts[i]))
        wi = _normalize(_sub(prev, pts[i]))
        c = _dot(wi, nn)
        if c > 0.0:
            f = fresnel(c, 1.0, mat[MT_IOR])
        else:
            f = fresnel(-c, mat[MT_IOR], 1.0)
        v = f if taus[i] == 0 else 1.0 - f
        out[0] *= v
        out[1] *= v
        out[2] *= v
    return out


def chain_visible(ks, pts, xd, xl):
    prev = xd
    for p in pts:
        if occluded(ks, prev, p):
            return False
        prev = p
    return not occluded(ks, prev, xl)


def throughput(ks, sids, pts, taus, xd, nd, xl, eid, prm):
    """Sub-path throughput kappa * G * L.

    Returns (status, rgb, G, polished points): status 0 ok, 1 GGT failure.
    G uses central differences of the re-converged first direction under
    perturbations of ``xl`` in the emitter's tangent plane.
    """
    zero = [0.0, 0.0, 0.0]
    st, pts, _ = walk(ks, sids, pts, taus, xd, xl, prm, prm[P_TOL_POLISH])
    if st != ADMISSIBLE:
        return 1, zero, 0.0, pts
    w0 = _normalize(_sub(pts[0], xd))
    cos_d = _dot(nd, w0)
    if cos_d <= 0.0:
        return 0, zero, 0.0, pts
    em = ks.emitters[eid]
    le = (em[EM_LE], em[EM_LE + 1], em[EM_LE + 2])
    if em[EM_KIND] == EMIT_SPHERE:
        nl = _normalize(_sub(xl, (em[EM_POS], em[EM_POS + 1], em[EM_POS + 2])))
        if _dot(nl, _sub(pts[-1], xl)) <= 0.0:
            return 0, zero, 0.0, pts
    else:
        nl = _normalize(_sub(xl, pts[-1]))
    if not chain_visible(ks, pts, xd, xl):
        return 0, zero, 0.0, pts
    t1, t2 = onb(nl)
    h = prm[P_FD_DELTA]
    dirs = []
    for t in (t1, t2):
        pair = []
        for s in (h, -h):
            st, p2, _ = walk(ks, sids, pts, taus, xd, _madd(xl, t, s), prm, prm[P_TOL_POLISH])
            if st != ADMISSIBLE:
                return 1, zero, 0.0, pts
            pair.append(_normalize(_sub(p2[0], xd)))
        dirs.append(_mul(_sub(pair[0], pair[1]), 1.0 / (2.0 * h)))
    g = cos_d * _norm(_cross(dirs[0], dirs[1]))
    k = kappa(ks, sids, pts, taus, xd)
    return 0, [k[0] * g * le[0], k[1] * g * le[1], k[2] * g * le[2]], g, pts


# ---------------------------------------------------------------------------
# seed sampling

def _sample_p0_n(prm, rng):
    u = rng.random()
    acc = 0.0
    for n in range(1, N_MAX + 1):
        acc += prm[P_P0 + n]
        if u < acc:
            return n
    return N_MAX


def _sample_pe_n(row, rng):
    u = rng.random()
    acc = 0.0
    last = 1
    for n in range(1, N_MAX + 1):
        if row[n] > 0.0:
            acc += row[n]
            last = n
            if u < acc:
                return n
    return last


def _spec_point(ks, rng):
    u = rng.random()
    cdf = ks.spec_cdf
    j = 0
    while j < len(cdf) - 1 and u >= cdf[j]:
        j += 1
    sid = ks.spec_ids[j]
    sh = ks.shapes[sid]
    c = (sh[SH_C], sh[SH_C + 1], sh[SH_C + 2])
    if sh[SH_KIND] == KIND_QUAD:
        u1 = (2.0 * rng.random() - 1.0) * sh[SH_HU]
        v1 = (2.0 * rng.random() - 1.0) * sh[SH_HV]
        return _madd(_madd(c, (sh[SH_EU], sh[SH_EU + 1], sh[SH_EU + 2]), u1),
                     (sh[SH_EV], sh[SH_EV + 1], sh[SH_EV + 2]), v1)
    z = 1.0 - 2.0 * rng.random()
    phi = 2.0 * math.pi * rng.random()
    s = math.sqrt(max(0.0, 1.0 - z * z))
    r = sh[SH_RAD]
    return (c[0] + r * s * math.cos(phi), c[1] + r * s * math.sin(phi), c[2] + r * z)


def sample_vmf(mu, kappa_, rng):
    u1 = rng.random()
    u2 = rng.random()
    if kappa_ < 1e-8:
        w = 1.0 - 2.0 * u1
    else:
        w = 1.0 + math.log(math.exp(-2.0 * kappa_) + u1 * (-math.expm1(-2.0 * kappa_))) / kappa_
        w = min(1.0, max(-1.0, w))
    s = math.sqrt(max(0.0, 1.0 - w * w))
    phi = 2.0 * math.pi * u2
    t1, t2 = onb(mu)
    cp = math.cos(phi) * s
    sp = math.sin(phi) * s
    # unit length up to rounding: mu, t1, t2 are orthonormal and w^2 + sq^2 = 1
    return (w * mu[0] + cp * t1[0] + sp * t2[0],
            w * mu[1] + cp * t1[1] + sp * t2[1],
            w * mu[2] + cp * t1[2] + sp * t2[2])


def leaf_has_length(kg, leaf, n):
    return kg is not None and leaf >= 0 and kg.leaf_pn[leaf][n] > 0.0


def draw_seed(ks, kg, leaf, xd, n, prm, rng):
    """One seed-chain draw for a fixed length ``n``.

    Returns (status, component, shape_ids, points, types, direction) with
    component 0 for the initializer and 1 for the learned distribution.
    """
    learned = leaf_has_length(kg, leaf, n)
    if learned and rng.random() >= prm[P_ALPHA]:
        u = rng.random()
        start = kg.leaf_tau_start[leaf]
        acc = 0.0
        pick = -1
        for j in range(start, start + kg.leaf_tau_count[leaf]):
            if kg.tau_n[j] != n:
                continue
            acc += kg.tau_prob[j]
            pick = j
            if u < acc:
                break
        bits = kg.tau_bits[pick]
        taus = [(bits >> i) & 1 for i in range(n)]
        ls = kg.tau_lobe_start[pick]
        lc = kg.tau_lobe_count[pick]
        u = rng.random()
        lo, hi = ls, ls + lc - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if u < kg.lobe_cdf[mid]:
                hi = mid
            else:
                lo = mid + 1
        w = sample_vmf(kg.lobe_mu[lo], kg.lobe_kappa[lo], rng)
        st, sids, pts, ty, _ = deduce(ks, xd, w, taus, n, rng)
        return st, 1, sids, pts, ty, w
    x1 = _spec_point(ks, rng)
    w = _normalize(_sub(x1, xd))
    st, sids, pts, ty, _ = deduce(ks, xd, w, None, n, rng)
    return st, 0, sids, pts, ty, w


def _attempt(ks, kg, leaf, xd, xl, n, prm, rng, stats):
    retries = int(prm[P_RETRIES])
    for _ in range(retries):
        st, comp, sids, pts, ty, w = draw_seed(ks, kg, leaf, xd, n, prm, rng)
        stats[ST_LEARNED] += comp
        if st == DEDUCE_OK:
            break
        stats[ST_DEDUCE_FAIL] += 1
    else:
        return None
    stats[ST_WALKS] += 1
    wst, pts, _ = walk(ks, sids, pts, ty, xd, xl, prm, prm[P_TOL])
    if wst != ADMISSIBLE:
        if wst == ESCAPED:
            stats[ST_ESCAPED] += 1
        return None
    stats[ST_WALKS_OK] += 1
    return sids, pts, ty


def length_probability(kg, leaf, n, prm):
    p0 = prm[P_P0 + n]
    if kg is not None and leaf >= 0 and sum(kg.leaf_pn[leaf]) > 0.0:
        a = prm[P_ALPHA]
        return a * p0 + (1.0 - a) * kg.leaf_pn[leaf][n]
    return p0


def sample_length(kg, leaf, prm, rng):
    if kg is not None and leaf >= 0 and sum(kg.leaf_pn[leaf]) > 0.0:
        if rng.random() < prm[P_ALPHA]:
            n = _sample_p0_n(prm, rng)
        else:
            n = _sample_pe_n(kg.leaf_pn[leaf], rng)
    else:
        n = _sample_p0_n(prm, rng)
    return n, length_probability(kg, leaf, n, prm)


def query(kg, xd, xl):
    q = ((xd[0] - kg.lo[0]) * kg.inv_ext[0], (xd[1] - kg.lo[1]) * kg.inv_ext[1],
         (xd[2] - kg.lo[2]) * kg.inv_ext[2], (xl[0] - kg.lo[0]) * kg.inv_ext[0],
         (xl[1] - kg.lo[1]) * kg.inv_ext[1], (xl[2] - kg.lo[2]) * kg.inv_ext[2])
    node = 0
    while kg.node_leaf[node] < 0:
        if q[kg.node_axis[node]] < kg.node_split[node]:
            node = kg.node_left[node]
        else:
            node = kg.node_right[node]
    return kg.node_leaf[node]


def estimate(ks, kg, leaf, xd, nd, xl, eid, prm, rng, stats):
    """Single chain estimate T * k / P(n) for the configuration (xd, xl).

    Returns None when no chain with positive throughput is found, otherwise
    (contribution, throughput, k, P(n), n, shape_ids, points, types).
    """
    timing = prm[P_TIMING] != 0.0
    t0 = perf_counter() if timing else 0.0
    stats[ST_ESTIMATES] += 1
    n, pn = sample_length(kg, leaf, prm, rng)
    res = _attempt(ks, kg, leaf, xd, xl, n, prm, rng, stats)
    out = None
    if res is not None:
        sids, pts, ty = res
        st, T, _, pts = throughput(ks, sids, pts, ty, xd, nd, xl, eid, prm)
        if st != 0:
            stats[ST_GGT_FAIL] += 1
        elif T[0] > 0.0 or T[1] > 0.0 or T[2] > 0.0:
            kmax = int(prm[P_KMAX])
            delta = prm[P_DELTA_SAME]
            k = 0
            hit = False
            while k < kmax:
                k += 1
                stats[ST_TRIALS] += 1
                r2 = _attempt(ks, kg, leaf, xd, xl, n, prm, rng, stats)
                if r2 is not None and same_chain(r2[1], r2[2], pts, ty, delta):
                    hit = True
                    break
            if not hit:
                stats[ST_TRUNCATED] += 1
            stats[ST_FOUND] += 1
            s = k / pn
            out = ([T[0] * s, T[1] * s, T[2] * s], T, k, pn, n, sids, pts, ty)
    if timing:
        stats[ST_SPEC_TIME] += perf_counter() - t0
    return out


def guide_probe(ks, kg, leaf_hint, xd, xl, n, prm, rng):
    """Query + learned-distribution draw only (used to time guiding overhead)."""
    leaf = query(kg, xd, xl) if leaf_hint < 0 else leaf_hint
    if not leaf_has_length(kg, leaf, n):
        return leaf
    u = rng.random()
    start = kg.leaf_tau_start[leaf]
    acc = 0.0
    pick = -1
    for j in range(start, start + kg.leaf_tau_count[leaf]):
        if kg.tau_n[j] != n:
            continue
        acc += kg.tau_prob[j]
        pick = j
        if u < acc:
            break
    ls = kg.tau_lobe_start[pick]
    lc = kg.tau_lobe_count[pick]
    u = rng.random()
    lo, hi = ls, ls + lc - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if u < kg.lobe_cdf[mid]:
            hi = mid
        else:
            lo = mid + 1
    sample_vmf(kg.lobe_mu[lo], kg.lobe_kappa[lo], rng)
    return leaf


def time_guiding(ks, kg, xds, xls, ns, prm, rng):
    """Wall time of query + learned-distribution draws over the given configurations."""
    rows = [(tuple(map(float, a)), tuple(map(float, b)), int(n)) for a, b, n in zip(xds, xls, ns)]
    t0 = perf_counter()
    for xd, xl, n in rows:
        guide_probe(ks, kg, -1, xd, xl, n, prm, rng)
    return perf_counter() - t0


def estimate_many(ks, kg, leaf, xd, nd, xl, eid, prm, rng, stats, count):
    """``count`` independent estimates at one configuration.

    Returns (contributions as a list of rgb, records as lists of floats).
    Records hold (x_d, x_l, direction, n, type bits, throughput luminance,
    reciprocal estimate k / P(n), 0) for every estimate with T > 0.
    """
    contribs = []
    records = []
    for _ in range(count):
        r = estimate(ks, kg, leaf, xd, nd, xl, eid, prm, rng, stats)
        if r is None:
            contribs.append((0.0, 0.0, 0.0))
            continue
        c, T, k, pn, n, sids, pts, ty = r
        contribs.append(tuple(c))
        w = _normalize(_sub(pts[0], xd))
        bits = 0
        for i, t in enumerate(ty):
            bits |= t << i
        records.append([xd[0], xd[1], xd[2], xl[0], xl[1], xl[2], w[0], w[1], w[2],
                        float(n), float(bits), _lum(T), k / pn, 0.0])
    return contribs, records


def find_many(ks, kg, leaf, xd, xl, prm, rng, stats, count):
    """First-attempt chains of ``count`` estimator draws (no trials, no throughput).

    Returns a list of (n, type bits, first vertex) for the successful draws.
    """
    out = []
    for _ in range(count):
        n, _ = sample_length(kg, leaf, prm, rng)
        r = _attempt(ks, kg, leaf, xd, xl, n, prm, rng, stats)
        if r is None:
            continue
        sids, pts, ty = r
        bits = 0
        for i, t in enumerate(ty):
            bits |= t << i
        out.append((n, bits, pts[0]))
    return out


def grid_seed(ks, sid, i, j, res):
    """Cell-centre point of a ``res`` x ``res`` stratification of shape ``sid``."""
    sh = ks.shapes[sid]
    c = (sh[SH_C], sh[SH_C + 1], sh[SH_C + 2])
    a = (2.0 * i + 1.0) / res - 1.0
    b = (2.0 * j + 1.0) / res - 1.0
    if sh[SH_KIND] == KIND_QUAD:
        return _madd(_madd(c, (sh[SH_EU], sh[SH_EU + 1], sh[SH_EU + 2]), a * sh[SH_HU]),
                     (sh[SH_EV], sh[SH_EV + 1], sh[SH_EV + 2]), b * sh[SH_HV])
    z = -a
    phi = math.pi * (b + 1.0)
    s = math.sqrt(max(0.0, 1.0 - z * z))
    r = sh[SH_RAD]
    return (c[0] + r * s * math.cos(phi), c[1] + r * s * math.sin(phi), c[2] + r * z)


def basin_grid(ks, xd, xl, sid, res, taus, prm, tol):
    """Walk one seed per grid cell of shape ``sid`` for the fixed type string.

    Returns (labels, chains): labels[i * res + j] is the index of the deduped
    admissible chain reached from cell (i, j), or -1; chains holds
    (shape ids, points) per distinct chain.
    """
    n = len(taus)
    labels = [-1] * (res * res)
    chains = []
    delta = prm[P_DELTA_SAME]
    for i in range(res):
        for j in range(res):
            x1 = grid_seed(ks, sid, i, j, res)
            w = _sub(x1, xd)
            if _norm(w) < 1e-12:
                continue
            w = _normalize(w)
            st, sids, pts, ty, _ = deduce(ks, xd, w, taus, n, None)
            if st != DEDUCE_OK:
                continue
            wst, pts, _ = walk(ks, sids, pts, ty, xd, xl, prm, tol)
            if wst != ADMISSIBLE:
                continue
            lab = -1
            for c, (csids, cpts) in enumerate(chains):
                if same_chain(cpts, taus, pts, taus, delta):
                    lab = c
                    break
            if lab < 0:
                lab = len(chains)
                chains.append((sids, pts))
            labels[i * res + j] = lab
    return labels, chains


# ---------------------------------------------------------------------------
# BSDFs for non-specular receivers

def _ggx_d(cos_h, a2):
    c2 = cos_h * cos_h
    d = c2 * (a2 - 1.0) + 1.0
    return a2 / (math.pi * d * d)


def _ggx_g1(cos_v, a2):
    c2 = cos_v * cos_v
    t2 = (1.0 - c2) / c2
    return 2.0 / (1.0 + math.sqrt(1.0 + a2 * t2))


def bsdf_eval(mat, n, wo, wi):
    co = _dot(n, wo)
    ci = _dot(n, wi)
    if co <= 0.0 or ci <= 0.0:
        return (0.0, 0.0, 0.0)
    col = (mat[MT_COL], mat[MT_COL + 1], mat[MT_COL + 2])
    if mat[MT_CLASS] == DIFFUSE:
        return _mul(col, INV_PI)
    a = mat[MT_ROUGH]
    a2 = a * a
    h = _normalize(_add(wo, wi))
    v = _ggx_d(_dot(n, h), a2) * _ggx_g1(co, a2) * _ggx_g1(ci, a2) / (4.0 * co * ci)
    return _mul(col, v)


def bsdf_pdf(mat, n, wo, wi):
    co = _dot(n, wo)
    ci = _dot(n, wi)
    if co <= 0.0 or ci <= 0.0:
        return 0.0
    if mat[MT_CLASS] == DIFFUSE:
        return ci * INV_PI
    a = mat[MT_ROUGH]
    h = _normalize(_add(wo, wi))
    ch = _dot(n, h)
    return _ggx_d(ch, a * a) * ch / (4.0 * _dot(wo, h))


def bsdf_sample(mat, n, wo, rng):
    """Returns (wi, weight f*cos/pdf, pdf); pdf 0 on failure."""
    u1 = rng.random()
    u2 = rng.random()
    t1, t2 = onb(n)
    phi = 2.0 * math.pi * u2
    col = (mat[MT_COL], mat[MT_COL + 1], mat[MT_COL + 2])
    if mat[MT_CLASS] == DIFFUSE:
        r = math.sqrt(u1)
        z = math.sqrt(max(0.0, 1.0 - u1))
        x = r * math.cos(phi)
        y = r * math.sin(phi)
        wi = (x * t1[0] + y * t2[0] + z * n[0], x * t1[1] + y * t2[1] + z * n[1],
              x * t1[2] + y * t2[2] + z * n[2])
        if z <= 0.0:
            return wi, (0.0, 0.0, 0.0), 0.0
        return wi, col, z * INV_PI
    a = mat[MT_ROUGH]
    a2 = a * a
    tan2 = a2 * u1 / (1.0 - u1)
    ch = 1.0 / math.sqrt(1.0 + tan2)
    sh = math.sqrt(max(0.0, 1.0 - ch * ch))
    x = sh * math.cos(phi)
    y = sh * math.sin(phi)
    h = (x * t1[0] + y * t2[0] + ch * n[0], x * t1[1] + y * t2[1] + ch * n[1],
         x * t1[2] + y * t2[2] + ch * n[2])
    oh = _dot(wo, h)
    if oh <= 0.0:
        return wo, (0.0, 0.0, 0.0), 0.0
    wi = _madd(_mul(wo, -1.0), h, 2.0 * oh)
    ci = _dot(n, wi)
    co = _dot(n, wo)
    if ci <= 0.0 or co <= 0.0:
        return wi, (0.0, 0.0, 0.0), 0.0
    d = _ggx_d(ch, a2)
    pdf = d * ch / (4.0 * oh)
    f = d * _ggx_g1(co, a2) * _ggx_g1(ci, a2) / (4.0 * co * ci)
    s = f * ci / pdf
    return wi, _mul(col, s), pdf


# ---------------------------------------------------------------------------
# emitters

def sample_emitter(ks, rng):
    """Returns (emitter id, point, pdf) with pdf = choice probability times area pdf."""
    ne = len(ks.emitters)
    eid = min(int(rng.random() * ne), ne - 1)
    em = ks.emitters[eid]
    c = (em[EM_POS], em[EM_POS + 1], em[EM_POS + 2])
    if em[EM_KIND] == EMIT_SPHERE:
        z = 1.0 - 2.0 * rng.random()
        phi = 2.0 * math.pi * rng.random()
        s = math.sqrt(max(0.0, 1.0 - z * z))
        r = em[EM_RAD]
        p = (c[0] + r * s * math.cos(phi), c[1] + r * s * math.sin(phi), c[2] + r * z)
        return eid, p, 1.0 / (ne * 4.0 * math.pi * r * r)
    return eid, c, 1.0 / ne


# ---------------------------------------------------------------------------
# path tracer

def trace_path(ks, kg, cam, px, py, prm, rng, stats, records):
    """One camera path; returns (radiance, chain-only radiance)."""
    mode = int(prm[P_MODE])
    selective = prm[P_SELECTIVE] != 0.0
    training = prm[P_TRAINING] != 0.0
    max_depth = int(prm[P_MAX_DEPTH])
    rr_start = int(prm[P_RR_START])
    gamma = prm[P_RR_GAMMA]
    eps = ks.eps
    ne = len(ks.emitters)
    chain_on = mode != MODE_PT and len(ks.spec_ids) > 0 and ne > 0
    stats[ST_PATHS] += 1

    w = cam[14]
    h = cam[15]
    sx = (2.0 * (px + rng.random()) / w - 1.0) * cam[12] * cam[13]
    sy = (1.0 - 2.0 * (py + rng.random()) / h) * cam[12]
    o = (cam[0], cam[1], cam[2])
    d = _normalize((cam[3] + sx * cam[6] + sy * cam[9],
                    cam[4] + sx * cam[7] + sy * cam[10],
                    cam[5] + sx * cam[8] + sy * cam[11]))
    beta = (1.0, 1.0, 1.0)
    L = [0.0, 0.0, 0.0]
    Lc = [0.0, 0.0, 0.0]
    has_ns = False
    nspec = 0
    last_xd = o
    last_pdf = 0.0
    depth = 0
    while True:
        t, sid = intersect(ks, o, d, eps, INF, False)
        te, eid = intersect_emitters(ks, o, d, eps, t if sid >= 0 else INF)
        if eid >= 0:
            em = ks.emitters[eid]
            c = (em[EM_POS], em[EM_POS + 1], em[EM_POS + 2])
            xl = _madd(o, d, te)
            nl = _normalize(_sub(xl, c))
            cos_l = -_dot(d, nl)
            if cos_l > 0.0:
                le = (em[EM_LE], em[EM_LE + 1], em[EM_LE + 2])
                wgt = 0.0
                if not has_ns:
                    wgt = 1.0
                elif nspec == 0:
                    r = em[EM_RAD]
                    pl = te * te / (cos_l * ne * 4.0 * math.pi * r * r)
                    wgt = last_pdf / (last_pdf + pl)
                elif mode == MODE_PT:
                    wgt = 1.0
                elif selective:
                    stats[ST_ACT_QUERIES] += 1
                    leaf = query(kg, last_xd, xl) if (kg is not None and mode == MODE_MPG) else -1
                    if leaf >= 0 and kg.leaf_real[leaf] > 0:
                        stats[ST_ACT_ACTIVE] += 1
                    else:
                        wgt = 1.0
                if wgt > 0.0:
                    L[0] += beta[0] * le[0] * wgt
                    L[1] += beta[1] * le[1] * wgt
                    L[2] += beta[2] * le[2] * wgt
            break
        if sid < 0:
            break
        x = _madd(o, d, t)
        mat = ks.materials[int(ks.shapes[sid][SH_MAT])]
        cls = mat[MT_CLASS]
        nrm = _normalize(shape_normal(ks, sid, x))
        if cls >= DIELECTRIC:
            if cls == CONDUCTOR:
                d = _normalize(reflect(d, nrm))
                beta = (beta[0] * mat[MT_COL], beta[1] * mat[MT_COL + 1], beta[2] * mat[MT_COL + 2])
            else:
                c = _dot(d, nrm)
                if c < 0.0:
                    f = fresnel(-c, 1.0, mat[MT_IOR])
                else:
                    f = fresnel(c, mat[MT_IOR], 1.0)
                if rng.random() < f:
                    d = _normalize(reflect(d, nrm))
                else:
                    d = _normalize(refract(d, nrm, mat[MT_IOR]))
            nspec += 1
            last_pdf = 0.0
        else:
            wo = (-d[0], -d[1], -d[2])
            ns = nrm if _dot(nrm, wo) > 0.0 else (-nrm[0], -nrm[1], -nrm[2])
            has_ns = True
            nspec = 0
            last_xd = x
            if ne > 0:
                # direct lighting
                eid, xl, pe = sample_emitter(ks, rng)
                em = ks.emitters[eid]
                le = (em[EM_LE], em[EM_LE + 1], em[EM_LE + 2])
                wl = _sub(xl, x)
                dist2 = _dot(wl, wl)
                wl = _mul(wl, 1.0 / math.sqrt(dist2))
                cos_d = _dot(ns, wl)
                if cos_d > 0.0:
                    if em[EM_KIND] == EMIT_SPHERE:
                        nl = _normalize(_sub(xl, (em[EM_POS], em[EM_POS + 1], em[EM_POS + 2])))
                        cos_l = -_dot(wl, nl)
                        if cos_l > 0.0 and not occluded(ks, x, xl):
                            f = bsdf_eval(mat, ns, wo, wl)
                            pl = pe * dist2 / cos_l
                            pb = bsdf_pdf(mat, ns, wo, wl)
                            s = cos_d / pl * (pl / (pl + pb))
                            L[0] += beta[0] * f[0] * le[0] * s
                            L[1] += beta[1] * f[1] * le[1] * s
                            L[2] += beta[2] * f[2] * le[2] * s
                    elif not occluded(ks, x, xl):
                        f = bsdf_eval(mat, ns, wo, wl)
                        s = cos_d / (dist2 * pe)
                        L[0] += beta[0] * f[0] * le[0] * s
                        L[1] += beta[1] * f[1] * le[1] * s
                        L[2] += beta[2] * f[2] * le[2] * s
            if chain_on:
                eid, xl, pe = sample_emitter(ks, rng)
                leaf = -1
                active = True
                timing = prm[P_TIMING] != 0.0
                if kg is not None and mode == MODE_MPG:
                    tq = perf_counter() if timing else 0.0
                    leaf = query(kg, x, xl)
                    if timing:
                        stats[ST_GUIDE_TIME] += perf_counter() - tq
                if selective:
                    stats[ST_ACT_QUERIES] += 1
                    active = leaf >= 0 and kg.leaf_real[leaf] > 0
                    if active:
                        stats[ST_ACT_ACTIVE] += 1
                if active:
                    r = estimate(ks, kg, leaf, x, ns, xl, eid, prm, rng, stats)
                    if r is not None:
                        cc, T, k, pn, n, sids, pts, ty = r
                        wd = _normalize(_sub(pts[0], x))
                        f = bsdf_eval(mat, ns, wo, wd)
                        s = 1.0 / pe
                        v = (beta[0] * f[0] * cc[0] * s, beta[1] * f[1] * cc[1] * s,
                             beta[2] * f[2] * cc[2] * s)
                        L[0] += v[0]
                        L[1] += v[1]
                        L[2] += v[2]
                        Lc[0] += v[0]
                        Lc[1] += v[1]
                        Lc[2] += v[2]
                        if v[0] > 0.0 or v[1] > 0.0 or v[2] > 0.0:
                            stats[ST_CHAIN_NONZERO] += 1
                        if training:
                            bits = 0
                            for i, tt in enumerate(ty):
                                bits |= tt << i
                            records.append([x[0], x[1], x[2], xl[0], xl[1], xl[2],
                                            wd[0], wd[1], wd[2], float(n), float(bits),
                                            _lum(T), k / pn, _lum(f)])
                            stats[ST_RECORDS] += 1
            wi, wgt, pdf = bsdf_sample(mat, ns, wo, rng)
            if pdf <= 0.0:
                break
            beta = (beta[0] * wgt[0], beta[1] * wgt[1], beta[2] * wgt[2])
            d = wi
            last_pdf = pdf
        o = x
        depth += 1
        if depth >= max_depth:
            break
        if depth >= rr_start:
            if rng.random() >= gamma:
                break
            beta = (beta[0] / gamma, beta[1] / gamma, beta[2] / gamma)
    return L, Lc


def render_pixels(ks, kg, cam, pixels, rngs, spp, prm, stats):
    """Trace ``spp`` paths for each (px, py) in ``pixels`` with its own generator.

    Returns (rgb sums, chain rgb sums, records); the sums hold one [r, g, b]
    per pixel and records one row of ``REC_WIDTH`` floats per training sample.
    """
    out = [[0.0, 0.0, 0.0] for _ in pixels]
    outc = [[0.0, 0.0, 0.0] for _ in pixels]
    records = []
    for j, (px, py) in enumerate(pixels):
        rng = rngs[j]
        acc = out[j]
        accc = outc[j]
        for _ in range(spp):
            L, Lc = trace_path(ks, kg, cam, int(px), int(py), prm, rng, stats, records)
            for c in range(3):
                acc[c] += L[c]
                accc[c] += Lc[c]
    return out, outc, records
