# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels.

A line-by-line port of ``_pycore`` to C-level Cython.  Every arithmetic
expression is kept in the same order as the Python reference so that, built
without fast-math or FMA contraction, both backends return identical floats
for identical inputs and generator states.  The render loop runs without the
GIL so tiles can be traced on several threads.
"""

from libc.math cimport sqrt, fabs, exp, expm1, log, cos, sin, copysign, INFINITY
from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memcpy
from cpython.pycapsule cimport PyCapsule_GetPointer
from numpy.random cimport bitgen_t
from posix.time cimport clock_gettime, timespec, CLOCK_MONOTONIC

import numpy as np

BACKEND = "compiled"

cdef double PI = 3.141592653589793
cdef double INV_PI = 1.0 / 3.141592653589793

cdef enum:
    NMAX = 13
    MMAX = 26
    SH_KIND = 0
    SH_MAT = 1
    SH_C = 2
    SH_EU = 5
    SH_EV = 8
    SH_HU = 11
    SH_HV = 12
    SH_RAD = 13
    SH_AREA = 14
    SH_N = 15
    SH_CURV = 18
    SH_WIDTH = 19
    KIND_QUAD = 0
    KIND_SPHERE = 1
    MT_CLASS = 0
    MT_IOR = 1
    MT_COL = 2
    MT_ROUGH = 5
    MT_WIDTH = 8
    DIFFUSE = 0
    GLOSSY = 1
    DIELECTRIC = 2
    CONDUCTOR = 3
    EM_KIND = 0
    EM_POS = 1
    EM_RAD = 4
    EM_LE = 5
    EM_WIDTH = 8
    EMIT_POINT = 0
    EMIT_SPHERE = 1
    P_MAX_ITER = 0
    P_TOL = 1
    P_BETA0 = 2
    P_GROWTH = 3
    P_CLAMP = 4
    P_DELTA_SAME = 5
    P_FD_DELTA = 6
    P_TOL_POLISH = 7
    P_KMAX = 8
    P_RETRIES = 9
    P_ALPHA = 10
    P_RR_START = 11
    P_RR_GAMMA = 12
    P_MAX_DEPTH = 13
    P_NMAX = 14
    P_TIMING = 15
    P_MODE = 16
    P_SELECTIVE = 17
    P_TRAINING = 18
    P_BETA_MIN = 19
    P_P0 = 32
    PRM_WIDTH = 48
    MODE_PT = 0
    MODE_SMS = 1
    MODE_MPG = 2
    ADMISSIBLE = 0
    NOT_CONVERGED = 1
    ESCAPED = 2
    DEDUCE_OK = 0
    DEDUCE_MISS = 1
    DEDUCE_TIR = 2
    DEDUCE_MISMATCH = 3
    ST_ESTIMATES = 0
    ST_FOUND = 1
    ST_WALKS = 2
    ST_WALKS_OK = 3
    ST_TRIALS = 4
    ST_TRUNCATED = 5
    ST_DEDUCE_FAIL = 6
    ST_GGT_FAIL = 7
    ST_ACT_QUERIES = 8
    ST_ACT_ACTIVE = 9
    ST_GUIDE_TIME = 10
    ST_SPEC_TIME = 11
    ST_RECORDS = 12
    ST_PATHS = 13
    ST_CHAIN_NONZERO = 14
    ST_ESCAPED = 15
    ST_LEARNED = 16
    ST_WIDTH = 17
    REC_WIDTH = 14

LAYOUT = dict(
    SH_KIND=SH_KIND, SH_MAT=SH_MAT, SH_C=SH_C, SH_EU=SH_EU, SH_EV=SH_EV, SH_HU=SH_HU,
    SH_HV=SH_HV, SH_RAD=SH_RAD, SH_AREA=SH_AREA, SH_N=SH_N, SH_CURV=SH_CURV,
    SH_WIDTH=SH_WIDTH, MT_CLASS=MT_CLASS, MT_IOR=MT_IOR, MT_COL=MT_COL,
    MT_ROUGH=MT_ROUGH, MT_WIDTH=MT_WIDTH, EM_KIND=EM_KIND, EM_POS=EM_POS,
    EM_RAD=EM_RAD, EM_LE=EM_LE, EM_WIDTH=EM_WIDTH, P_MAX_ITER=P_MAX_ITER, P_TOL=P_TOL,
    P_BETA0=P_BETA0, P_GROWTH=P_GROWTH, P_CLAMP=P_CLAMP, P_DELTA_SAME=P_DELTA_SAME,
    P_FD_DELTA=P_FD_DELTA, P_TOL_POLISH=P_TOL_POLISH, P_KMAX=P_KMAX, P_RETRIES=P_RETRIES,
    P_ALPHA=P_ALPHA, P_RR_START=P_RR_START, P_RR_GAMMA=P_RR_GAMMA,
    P_MAX_DEPTH=P_MAX_DEPTH, P_NMAX=P_NMAX, P_TIMING=P_TIMING, P_MODE=P_MODE,
    P_SELECTIVE=P_SELECTIVE, P_TRAINING=P_TRAINING, P_BETA_MIN=P_BETA_MIN, P_P0=P_P0,
    PRM_WIDTH=PRM_WIDTH, ST_WIDTH=ST_WIDTH, REC_WIDTH=REC_WIDTH, N_MAX=NMAX,
)


ctypedef struct V3:
    double x
    double y
    double z


ctypedef struct SceneC:
    double* shapes
    int nshapes
    double* mats
    double* ems
    int nems
    long* spec_ids
    double* spec_cdf
    int nspec
    unsigned char* is_spec
    double eps


ctypedef struct NodeC:
    double split
    int axis
    int leaf  # -1 for inner nodes
    int left
    int right


ctypedef struct GuideC:
    NodeC* nodes
    double lo[3]
    double inv_ext[3]
    long* leaf_real
    double* leaf_pn
    long* leaf_tau_start
    long* leaf_tau_count
    long* tau_n
    long* tau_bits
    double* tau_prob
    long* tau_lobe_start
    long* tau_lobe_count
    double* lobe_mu
    double* lobe_kappa
    double* lobe_cdf
    double* lobe_aux  # per lobe: exp(-2k), -expm1(-2k), tangent frame t1, t2


ctypedef struct RecBuf:
    double* data
    Py_ssize_t n
    Py_ssize_t cap


ctypedef struct Est:
    double c[3]
    double T[3]
    long k
    double pn
    int n
    int sids[NMAX]
    V3 pts[NMAX]
    int tys[NMAX]


# ---------------------------------------------------------------------------
# vectors

cdef inline V3 v3(double x, double y, double z) noexcept nogil:
    cdef V3 r
    r.x = x
    r.y = y
    r.z = z
    return r


cdef inline V3 vsub(V3 a, V3 b) noexcept nogil:
    return v3(a.x - b.x, a.y - b.y, a.z - b.z)


cdef inline V3 vadd(V3 a, V3 b) noexcept nogil:
    return v3(a.x + b.x, a.y + b.y, a.z + b.z)


cdef inline V3 vmul(V3 a, double s) noexcept nogil:
    return v3(a.x * s, a.y * s, a.z * s)


cdef inline V3 vmadd(V3 a, V3 b, double s) noexcept nogil:
    return v3(a.x + b.x * s, a.y + b.y * s, a.z + b.z * s)


cdef inline double vdot(V3 a, V3 b) noexcept nogil:
    return a.x * b.x + a.y * b.y + a.z * b.z


cdef inline V3 vcross(V3 a, V3 b) noexcept nogil:
    return v3(a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x)


cdef inline double vnorm(V3 a) noexcept nogil:
    return sqrt(a.x * a.x + a.y * a.y + a.z * a.z)


cdef inline V3 vnormalize(V3 a) noexcept nogil:
    cdef double inv = 1.0 / sqrt(a.x * a.x + a.y * a.y + a.z * a.z)
    return v3(a.x * inv, a.y * inv, a.z * inv)


cdef inline V3 vneg(V3 a) noexcept nogil:
    return v3(-a.x, -a.y, -a.z)


cdef inline V3 vat(const double* p) noexcept nogil:
    return v3(p[0], p[1], p[2])


cdef inline double lum(const double* c) noexcept nogil:
    return 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]


cdef inline double rand(bitgen_t* bg) noexcept nogil:
    return bg.next_double(bg.state)


cdef inline double now() noexcept nogil:
    cdef timespec ts
    clock_gettime(CLOCK_MONOTONIC, &ts)
    return ts.tv_sec + ts.tv_nsec * 1e-9


cdef inline void c_onb(V3 n, V3* t1, V3* t2) noexcept nogil:
    cdef double sign = copysign(1.0, n.z)
    cdef double a = -1.0 / (sign + n.z)
    cdef double b = n.x * n.y * a
    t1[0] = v3(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x)
    t2[0] = v3(b, sign + n.y * n.y * a, -n.y)


cdef inline V3 c_reflect(V3 w, V3 n) noexcept nogil:
    cdef double c = 2.0 * vdot(w, n)
    return v3(w.x - c * n.x, w.y - c * n.y, w.z - c * n.z)


cdef int c_refract(V3 w, V3 n, double ior, V3* out) noexcept nogil:
    cdef double c = vdot(w, n)
    cdef double eta, cosi, k, s
    cdef V3 nn
    if c < 0.0:
        eta = 1.0 / ior
        nn = n
        cosi = -c
    else:
        eta = ior
        nn = vneg(n)
        cosi = c
    k = 1.0 - eta * eta * (1.0 - cosi * cosi)
    if k < 0.0:
        return 0
    s = eta * cosi - sqrt(k)
    out[0] = v3(eta * w.x + s * nn.x, eta * w.y + s * nn.y, eta * w.z + s * nn.z)
    return 1


cdef double c_fresnel(double cos_i, double eta_i, double eta_t) noexcept nogil:
    cdef double r = eta_i / eta_t
    cdef double sin2t = r * r * (1.0 - cos_i * cos_i)
    cdef double cos_t, rs, rp
    if sin2t >= 1.0:
        return 1.0
    cos_t = sqrt(1.0 - sin2t)
    rs = (eta_i * cos_i - eta_t * cos_t) / (eta_i * cos_i + eta_t * cos_t)
    rp = (eta_t * cos_i - eta_i * cos_t) / (eta_t * cos_i + eta_i * cos_t)
    return 0.5 * (rs * rs + rp * rp)


# ---------------------------------------------------------------------------
# containers

cdef class KScene:
    cdef SceneC s
    cdef object _shapes, _mats, _ems, _ids, _cdf, _spec
    cdef public double scale, eps

    def __init__(self, shapes, materials, emitters, spec_ids, spec_cdf, scale):
        self._shapes = np.ascontiguousarray(shapes, dtype=np.float64).reshape(-1, SH_WIDTH)
        self._mats = np.ascontiguousarray(materials, dtype=np.float64).reshape(-1, MT_WIDTH)
        self._ems = np.ascontiguousarray(emitters, dtype=np.float64).reshape(-1, EM_WIDTH)
        self._ids = np.ascontiguousarray(spec_ids, dtype=np.int64)
        self._cdf = np.ascontiguousarray(spec_cdf, dtype=np.float64)
        self.scale = float(scale)
        self.eps = 1e-4 * float(scale)
        cls = self._mats[self._shapes[:, SH_MAT].astype(np.int64), MT_CLASS] if len(self._shapes) else np.zeros(0)
        self._spec = np.ascontiguousarray(cls >= DIELECTRIC, dtype=np.uint8)
        self.s.shapes = _dptr(self._shapes)
        self.s.nshapes = self._shapes.shape[0]
        self.s.mats = _dptr(self._mats)
        self.s.ems = _dptr(self._ems)
        self.s.nems = self._ems.shape[0]
        self.s.spec_ids = _lptr(self._ids)
        self.s.spec_cdf = _dptr(self._cdf)
        self.s.nspec = self._ids.shape[0]
        self.s.is_spec = _bptr(self._spec)
        self.s.eps = self.eps


cdef double* _dptr(object a):
    cdef double[::1] v
    if a.size == 0:
        return NULL
    v = a.reshape(-1)
    return &v[0]


cdef long* _lptr(object a):
    cdef long[::1] v
    if a.size == 0:
        return NULL
    v = a.reshape(-1)
    return &v[0]


cdef unsigned char* _bptr(object a):
    cdef unsigned char[::1] v
    if a.size == 0:
        return NULL
    v = a.reshape(-1)
    return &v[0]


cdef class KGuide:
    cdef GuideC g
    cdef list _keep

    def __init__(self, node_axis, node_split, node_left, node_right, node_leaf,
                 lo, inv_ext, leaf_real, leaf_pn, leaf_tau_start, leaf_tau_count,
                 tau_n, tau_bits, tau_prob, tau_lobe_start, tau_lobe_count,
                 lobe_mu, lobe_kappa, lobe_cdf):
        def L(a):
            arr = np.ascontiguousarray(a, dtype=np.int64).reshape(-1)
            self._keep.append(arr)
            return arr

        def D(a):
            arr = np.ascontiguousarray(a, dtype=np.float64).reshape(-1)
            self._keep.append(arr)
            return arr

        self._keep = []
        axis, split, left, right, leaf = (L(node_axis), D(node_split), L(node_left),
                                          L(node_right), L(node_leaf))
        self.g.nodes = <NodeC*>malloc(max(leaf.shape[0], 1) * sizeof(NodeC))
        if self.g.nodes == NULL:
            raise MemoryError()
        for i in range(leaf.shape[0]):
            self.g.nodes[i].split = split[i]
            self.g.nodes[i].axis = axis[i]
            self.g.nodes[i].leaf = leaf[i]
            self.g.nodes[i].left = left[i]
            self.g.nodes[i].right = right[i]
        for i in range(3):
            self.g.lo[i] = float(lo[i])
            self.g.inv_ext[i] = float(inv_ext[i])
        self.g.leaf_real = _lptr(L(leaf_real))
        self.g.leaf_pn = _dptr(D(leaf_pn))
        self.g.leaf_tau_start = _lptr(L(leaf_tau_start))
        self.g.leaf_tau_count = _lptr(L(leaf_tau_count))
        self.g.tau_n = _lptr(L(tau_n))
        self.g.tau_bits = _lptr(L(tau_bits))
        self.g.tau_prob = _dptr(D(tau_prob))
        self.g.tau_lobe_start = _lptr(L(tau_lobe_start))
        self.g.tau_lobe_count = _lptr(L(tau_lobe_count))
        self.g.lobe_mu = _dptr(D(lobe_mu))
        kap = D(lobe_kappa)
        self.g.lobe_kappa = _dptr(kap)
        self.g.lobe_cdf = _dptr(D(lobe_cdf))
        nl = kap.shape[0]
        aux = np.zeros(8 * max(nl, 1))
        self._keep.append(aux)
        self.g.lobe_aux = _dptr(aux)
        _fill_lobe_aux(&self.g, nl)


    def __dealloc__(self):
        free(self.g.nodes)


cdef void _fill_lobe_aux(GuideC* g, Py_ssize_t nl) noexcept nogil:
    cdef Py_ssize_t i
    cdef double* a
    cdef V3 t1, t2
    for i in range(nl):
        a = g.lobe_aux + 8 * i
        a[0] = exp(-2.0 * g.lobe_kappa[i])
        a[1] = -expm1(-2.0 * g.lobe_kappa[i])
        c_onb(vat(g.lobe_mu + 3 * i), &t1, &t2)
        a[2] = t1.x
        a[3] = t1.y
        a[4] = t1.z
        a[5] = t2.x
        a[6] = t2.y
        a[7] = t2.z


cdef inline GuideC* _guide(object kg):
    if kg is None:
        return NULL
    return &(<KGuide>kg).g


cdef inline bitgen_t* _bitgen(object rng) except NULL:
    return <bitgen_t*>PyCapsule_GetPointer(rng.bit_generator.capsule, "BitGenerator")


# ---------------------------------------------------------------------------
# intersection

cdef double hit_sphere(V3 c, double r, V3 o, V3 d, double tmin, double tmax) noexcept nogil:
    cdef V3 oc = vsub(o, c)
    cdef double b = vdot(oc, d)
    cdef double cc = vdot(oc, oc) - r * r
    cdef double disc = b * b - cc
    cdef double s, t
    if disc < 0.0:
        return -1.0
    s = sqrt(disc)
    t = -b - s
    if tmin < t and t < tmax:
        return t
    t = -b + s
    if tmin < t and t < tmax:
        return t
    return -1.0


cdef double hit_shape(const double* sh, V3 o, V3 d, double tmin, double tmax) noexcept nogil:
    cdef V3 c = vat(sh + SH_C)
    cdef V3 n, q
    cdef double den, t
    if sh[SH_KIND] == KIND_QUAD:
        n = vat(sh + SH_N)
        den = vdot(d, n)
        if fabs(den) < 1e-14:
            return -1.0
        t = vdot(vsub(c, o), n) / den
        if t <= tmin or t >= tmax:
            return -1.0
        q = vsub(vmadd(o, d, t), c)
        if fabs(q.x * sh[SH_EU] + q.y * sh[SH_EU + 1] + q.z * sh[SH_EU + 2]) > sh[SH_HU]:
            return -1.0
        if fabs(q.x * sh[SH_EV] + q.y * sh[SH_EV + 1] + q.z * sh[SH_EV + 2]) > sh[SH_HV]:
            return -1.0
        return t
    return hit_sphere(c, sh[SH_RAD], o, d, tmin, tmax)


cdef double c_intersect(SceneC* s, V3 o, V3 d, double tmin, double tmax, int spec_only, int* sid) noexcept nogil:
    cdef double best = tmax
    cdef double t
    cdef int i
    sid[0] = -1
    for i in range(s.nshapes):
        if spec_only and not s.is_spec[i]:
            continue
        t = hit_shape(s.shapes + i * SH_WIDTH, o, d, tmin, best)
        if t > 0.0:
            best = t
            sid[0] = i
    return best


cdef double c_intersect_emitters(SceneC* s, V3 o, V3 d, double tmin, double tmax, int* eid) noexcept nogil:
    cdef double best = tmax
    cdef double t
    cdef const double* em
    cdef int i
    eid[0] = -1
    for i in range(s.nems):
        em = s.ems + i * EM_WIDTH
        if em[EM_KIND] != EMIT_SPHERE:
            continue
        t = hit_sphere(vat(em + EM_POS), em[EM_RAD], o, d, tmin, best)
        if t > 0.0:
            best = t
            eid[0] = i
    return best


cdef int c_occluded(SceneC* s, V3 a, V3 b) noexcept nogil:
    cdef V3 d = vsub(b, a)
    cdef double dist = vnorm(d)
    cdef double tmax
    cdef const double* em
    cdef int i
    d = vmul(d, 1.0 / dist)
    tmax = dist - s.eps
    if tmax <= s.eps:
        return 0
    for i in range(s.nshapes):
        if hit_shape(s.shapes + i * SH_WIDTH, a, d, s.eps, tmax) > 0.0:
            return 1
    for i in range(s.nems):
        em = s.ems + i * EM_WIDTH
        if em[EM_KIND] == EMIT_SPHERE:
            if hit_sphere(vat(em + EM_POS), em[EM_RAD], a, d, s.eps, tmax) > 0.0:
                return 1
    return 0


# ---------------------------------------------------------------------------
# local geometry

cdef inline const double* shp(SceneC* s, int sid) noexcept nogil:
    return s.shapes + sid * SH_WIDTH


cdef inline const double* matof(SceneC* s, int sid) noexcept nogil:
    return s.mats + (<int>s.shapes[sid * SH_WIDTH + SH_MAT]) * MT_WIDTH


cdef V3 c_shape_normal(SceneC* s, int sid, V3 p) noexcept nogil:
    cdef const double* sh = shp(s, sid)
    cdef double inv
    if sh[SH_KIND] == KIND_QUAD:
        return vat(sh + SH_N)
    inv = 1.0 / sh[SH_RAD]
    return v3((p.x - sh[SH_C]) * inv, (p.y - sh[SH_C + 1]) * inv, (p.z - sh[SH_C + 2]) * inv)


cdef void c_shape_frame(SceneC* s, int sid, V3 p, V3* f) noexcept nogil:
    cdef const double* sh = shp(s, sid)
    cdef V3 n
    if sh[SH_KIND] == KIND_QUAD:
        f[0] = vat(sh + SH_EU)
        f[1] = vat(sh + SH_EV)
        f[2] = vat(sh + SH_N)
        return
    n = vnormalize(c_shape_normal(s, sid, p))
    c_onb(n, &f[0], &f[1])
    f[2] = n


cdef int c_retract(SceneC* s, int sid, V3 p, V3* frame, double du, double dv, V3* out) noexcept nogil:
    cdef const double* sh = shp(s, sid)
    cdef V3 tu = frame[0]
    cdef V3 tv = frame[1]
    cdef V3 q, r, c
    cdef double u, v, sc
    if sh[SH_KIND] == KIND_QUAD:
        q = v3(p.x + du * tu.x + dv * tv.x,
               p.y + du * tu.y + dv * tv.y,
               p.z + du * tu.z + dv * tv.z)
        r = vsub(q, vat(sh + SH_C))
        u = r.x * sh[SH_EU] + r.y * sh[SH_EU + 1] + r.z * sh[SH_EU + 2]
        v = r.x * sh[SH_EV] + r.y * sh[SH_EV + 1] + r.z * sh[SH_EV + 2]
        out[0] = q
        return fabs(u) <= sh[SH_HU] and fabs(v) <= sh[SH_HV]
    c = vat(sh + SH_C)
    q = v3(p.x - c.x + du * tu.x + dv * tv.x,
           p.y - c.y + du * tu.y + dv * tv.y,
           p.z - c.z + du * tu.z + dv * tv.z)
    sc = sh[SH_RAD] / vnorm(q)
    out[0] = v3(c.x + q.x * sc, c.y + q.y * sc, c.z + q.z * sc)
    return 1


cdef inline double shape_size(const double* sh) noexcept nogil:
    if sh[SH_KIND] == KIND_QUAD:
        return 2.0 * (sh[SH_HU] if sh[SH_HU] < sh[SH_HV] else sh[SH_HV])
    return sh[SH_RAD]


# ---------------------------------------------------------------------------
# deduction

cdef int c_deduce(SceneC* s, V3 xd, V3 wd, const int* taus, int n, bitgen_t* rng,
                  int* sids, V3* pts, int* tys, int* count, double* prob) noexcept nogil:
    cdef V3 o = xd
    cdef V3 d = wd
    cdef V3 p, nrm, dn
    cdef double t
    cdef int sid, ty, i
    cdef const double* mat
    prob[0] = 1.0
    count[0] = 0
    for i in range(n):
        t = c_intersect(s, o, d, s.eps, INFINITY, 1, &sid)
        if sid < 0:
            return DEDUCE_MISS
        p = vmadd(o, d, t)
        mat = matof(s, sid)
        if taus == NULL:
            if mat[MT_CLASS] == DIELECTRIC:
                ty = 0 if rand(rng) < 0.5 else 1
                prob[0] *= 0.5
            else:
                ty = 0
        else:
            ty = taus[i]
            if ty == 1 and mat[MT_CLASS] != DIELECTRIC:
                return DEDUCE_MISMATCH
        sids[i] = sid
        pts[i] = p
        tys[i] = ty
        count[0] = i + 1
        if i + 1 < n:
            nrm = c_shape_normal(s, sid, p)
            if ty == 0:
                d = c_reflect(d, nrm)
            else:
                if not c_refract(d, nrm, mat[MT_IOR], &dn):
                    return DEDUCE_TIR
                d = vnormalize(dn)
            o = p
    return DEDUCE_OK


# ---------------------------------------------------------------------------
# constraints

cdef int c_spec_residual(SceneC* s, int n, const int* sids, const V3* pts, const V3* frames,
                         const int* taus, V3 xd, V3 xl, double* out, int* sides_ok) noexcept nogil:
    cdef int i
    cdef V3 prev, nxt, x, tu, tv, nn, a, b, wi, wo, h
    cdef double la, lb, ci, co, ior, lh
    sides_ok[0] = 1
    for i in range(n):
        prev = xd if i == 0 else pts[i - 1]
        nxt = xl if i == n - 1 else pts[i + 1]
        x = pts[i]
        tu = frames[3 * i]
        tv = frames[3 * i + 1]
        nn = frames[3 * i + 2]
        a = vsub(prev, x)
        b = vsub(nxt, x)
        la = vnorm(a)
        lb = vnorm(b)
        if la < 1e-12 or lb < 1e-12:
            sides_ok[0] = 0
            return 0
        wi = vmul(a, 1.0 / la)
        wo = vmul(b, 1.0 / lb)
        ci = vdot(wi, nn)
        co = vdot(wo, nn)
        if taus[i] == 0:
            h = vadd(wi, wo)
            if ci * co <= 0.0:
                sides_ok[0] = 0
        else:
            ior = matof(s, sids[i])[MT_IOR]
            if ci > 0.0:
                h = vmadd(vmul(wi, -1.0), wo, -ior)
            else:
                h = vmadd(vmul(wi, -ior), wo, -1.0)
            if ci * co >= 0.0:
                sides_ok[0] = 0
        lh = vnorm(h)
        if lh < 1e-14:
            sides_ok[0] = 0
            return 0
        out[2 * i] = vdot(h, tu) / lh
        out[2 * i + 1] = vdot(h, tv) / lh
    return 1


cdef int c_newton_system(SceneC* s, int n, const int* sids, const V3* pts, const V3* frames,
                         const int* taus, V3 xd, V3 xl, double* F, double* J) noexcept nogil:
    """J is row-major m x m (m = 2n) or NULL; returns 0 on a degenerate chain."""
    cdef int m = 2 * n
    cdef int i, k, r
    cdef V3 prev, nxt, x, tu, tv, nn, a, b, tk, gp, gn, gs, wi, wo, hr, h, rk, ra, rb
    cdef V3 tks[2]
    cdef V3 fp0, fp1, fn0, fn1
    cdef double curv, an, bn, ta, tb, la, lb, ior, ei, eo, lh, nh
    cdef double* row
    cdef const double* sh
    if J != NULL:
        for r in range(m * m):
            J[r] = 0.0
    for i in range(n):
        prev = xd if i == 0 else pts[i - 1]
        nxt = xl if i == n - 1 else pts[i + 1]
        x = pts[i]
        tu = frames[3 * i]
        tv = frames[3 * i + 1]
        nn = frames[3 * i + 2]
        sh = shp(s, sids[i])
        curv = sh[SH_CURV]
        a = vsub(prev, x)
        b = vsub(nxt, x)
        tks[0] = tu
        tks[1] = tv
        if taus[i] == 0:
            an = vdot(a, nn)
            bn = vdot(b, nn)
            if fabs(an) < 1e-12 or fabs(bn) < 1e-12:
                return 0
            for k in range(2):
                tk = tks[k]
                ta = vdot(tk, a)
                tb = vdot(tk, b)
                F[2 * i + k] = ta / an + tb / bn
                if J == NULL:
                    continue
                row = J + (2 * i + k) * m
                if i > 0:
                    gp = vmadd(vmul(tk, 1.0 / an), nn, -ta / (an * an))
                    row[2 * i - 2] = vdot(gp, frames[3 * (i - 1)])
                    row[2 * i - 1] = vdot(gp, frames[3 * (i - 1) + 1])
                if i < n - 1:
                    gn = vmadd(vmul(tk, 1.0 / bn), nn, -tb / (bn * bn))
                    row[2 * i + 2] = vdot(gn, frames[3 * (i + 1)])
                    row[2 * i + 3] = vdot(gn, frames[3 * (i + 1) + 1])
                gs = vmul(tk, -(1.0 / an + 1.0 / bn))
                gs = vmadd(gs, a, -curv * ta / (an * an))
                gs = vmadd(gs, b, -curv * tb / (bn * bn))
                row[2 * i] = vdot(gs, tu) - (2.0 * curv if k == 0 else 0.0)
                row[2 * i + 1] = vdot(gs, tv) - (2.0 * curv if k == 1 else 0.0)
        else:
            la = vnorm(a)
            lb = vnorm(b)
            if la < 1e-12 or lb < 1e-12:
                return 0
            wi = vmul(a, 1.0 / la)
            wo = vmul(b, 1.0 / lb)
            ior = matof(s, sids[i])[MT_IOR]
            if vdot(wi, nn) > 0.0:
                ei = 1.0
                eo = ior
            else:
                ei = ior
                eo = 1.0
            hr = v3(-(ei * wi.x + eo * wo.x), -(ei * wi.y + eo * wo.y), -(ei * wi.z + eo * wo.z))
            lh = vnorm(hr)
            if lh < 1e-14:
                return 0
            h = vmul(hr, 1.0 / lh)
            nh = vdot(nn, h)
            for k in range(2):
                tk = tks[k]
                F[2 * i + k] = vdot(tk, h)
                if J == NULL:
                    continue
                row = J + (2 * i + k) * m
                rk = vmul(vmadd(tk, h, -vdot(h, tk)), 1.0 / lh)
                ra = vmul(vmadd(rk, wi, -vdot(wi, rk)), 1.0 / la)
                rb = vmul(vmadd(rk, wo, -vdot(wo, rk)), 1.0 / lb)
                if i > 0:
                    row[2 * i - 2] = -ei * vdot(ra, frames[3 * (i - 1)])
                    row[2 * i - 1] = -ei * vdot(ra, frames[3 * (i - 1) + 1])
                if i < n - 1:
                    row[2 * i + 2] = -eo * vdot(rb, frames[3 * (i + 1)])
                    row[2 * i + 3] = -eo * vdot(rb, frames[3 * (i + 1) + 1])
                gs = v3(ei * ra.x + eo * rb.x, ei * ra.y + eo * rb.y, ei * ra.z + eo * rb.z)
                row[2 * i] = vdot(gs, tu) - (curv * nh if k == 0 else 0.0)
                row[2 * i + 1] = vdot(gs, tv) - (curv * nh if k == 1 else 0.0)
    return 1


cdef int c_solve(const double* A, const double* b, int m, double* x) noexcept nogil:
    cdef double M[MMAX * (MMAX + 1)]
    cdef double tmp, best, v, inv, f, acc
    cdef int w = m + 1
    cdef int i, j, c, r, piv
    for i in range(m):
        for j in range(m):
            M[i * w + j] = A[i * m + j]
        M[i * w + m] = b[i]
    for c in range(m):
        piv = c
        best = fabs(M[c * w + c])
        for r in range(c + 1, m):
            v = fabs(M[r * w + c])
            if v > best:
                best = v
                piv = r
        if best < 1e-300:
            return 0
        if piv != c:
            for j in range(w):
                tmp = M[c * w + j]
                M[c * w + j] = M[piv * w + j]
                M[piv * w + j] = tmp
        inv = 1.0 / M[c * w + c]
        for r in range(c + 1, m):
            f = M[r * w + c] * inv
            if f != 0.0:
                for j in range(c, w):
                    M[r * w + j] -= f * M[c * w + j]
    for r in range(m - 1, -1, -1):
        acc = M[r * w + m]
        for j in range(r + 1, m):
            acc -= M[r * w + j] * x[j]
        x[r] = acc / M[r * w + r]
    return 1


cdef inline double inf_norm(const double* v, int m) noexcept nogil:
    cdef double best = 0.0
    cdef double a
    cdef int i
    for i in range(m):
        a = fabs(v[i])
        if a > best:
            best = a
    return best


cdef inline double two_norm(const double* v, int m) noexcept nogil:
    cdef double acc = 0.0
    cdef int i
    for i in range(m):
        acc += v[i] * v[i]
    return sqrt(acc)


cdef int c_walk(SceneC* s, int n, const int* sids, V3* pts, const int* taus, V3 xd, V3 xl,
                const double* prm, double tol, int* iters) noexcept nogil:
    """Damped Newton walk; ``pts`` is updated in place with the last accepted chain."""
    cdef V3 frames[3 * NMAX]
    cdef V3 new_frames[3 * NMAX]
    cdef V3 new_pts[NMAX]
    cdef double res[MMAX]
    cdef double F[MMAX]
    cdef double F2[MMAX]
    cdef double negF[MMAX]
    cdef double J[MMAX * MMAX]
    cdef double step[MMAX]
    cdef double clamp[NMAX]
    cdef int m = 2 * n
    cdef int max_it = <int>prm[P_MAX_ITER]
    cdef double beta = prm[P_BETA0]
    cdef int it = 0
    cdef int i, sides, inside
    cdef double sc, ln, fnorm, st
    for i in range(n):
        c_shape_frame(s, sids[i], pts[i], &frames[3 * i])
        clamp[i] = prm[P_CLAMP] * shape_size(shp(s, sids[i]))
    iters[0] = 0
    while True:
        iters[0] = it
        if not c_spec_residual(s, n, sids, pts, frames, taus, xd, xl, res, &sides):
            return NOT_CONVERGED
        if inf_norm(res, m) < tol:
            return ADMISSIBLE if sides else NOT_CONVERGED
        if it >= max_it:
            return NOT_CONVERGED
        if not c_newton_system(s, n, sids, pts, frames, taus, xd, xl, F, J):
            return NOT_CONVERGED
        for i in range(m):
            negF[i] = -F[i]
        if not c_solve(J, negF, m, step):
            return NOT_CONVERGED
        sc = 1.0
        for i in range(n):
            ln = sqrt(step[2 * i] * step[2 * i] + step[2 * i + 1] * step[2 * i + 1])
            if ln * sc > clamp[i]:
                sc = clamp[i] / ln
        fnorm = two_norm(F, m)
        while True:
            st = beta * sc
            for i in range(n):
                inside = c_retract(s, sids[i], pts[i], &frames[3 * i], st * step[2 * i],
                                   st * step[2 * i + 1], &new_pts[i])
                if not inside:
                    return ESCAPED
            for i in range(n):
                c_shape_frame(s, sids[i], new_pts[i], &new_frames[3 * i])
            if c_newton_system(s, n, sids, new_pts, new_frames, taus, xd, xl, F2, NULL) \
                    and two_norm(F2, m) < fnorm:
                memcpy(pts, new_pts, n * sizeof(V3))
                memcpy(frames, new_frames, 3 * n * sizeof(V3))
                beta = beta * prm[P_GROWTH]
                if beta > 1.0:
                    beta = 1.0
                break
            beta *= 0.5
            if beta < prm[P_BETA_MIN]:
                return NOT_CONVERGED
        it += 1


cdef int c_same_chain(int n, const V3* pa, const int* ta, const V3* pb, const int* tb, double delta) noexcept nogil:
    cdef double d2 = delta * delta
    cdef double dx, dy, dz
    cdef int i
    for i in range(n):
        if ta[i] != tb[i]:
            return 0
    for i in range(n):
        dx = pa[i].x - pb[i].x
        dy = pa[i].y - pb[i].y
        dz = pa[i].z - pb[i].z
        if dx * dx + dy * dy + dz * dz >= d2:
            return 0
    return 1


# ---------------------------------------------------------------------------
# throughput

cdef void c_kappa(SceneC* s, int n, const int* sids, const V3* pts, const int* taus, V3 xd, double* out) noexcept nogil:
    cdef int i
    cdef V3 prev, nn, wi
    cdef const double* mat
    cdef double c, f, v
    out[0] = 1.0
    out[1] = 1.0
    out[2] = 1.0
    for i in range(n):
        prev = xd if i == 0 else pts[i - 1]
        mat = matof(s, sids[i])
        if mat[MT_CLASS] == CONDUCTOR:
            out[0] *= mat[MT_COL]
            out[1] *= mat[MT_COL + 1]
            out[2] *= mat[MT_COL + 2]
            continue
        nn = vnormalize(c_shape_normal(s, sids[i], pts[i]))
        wi = vnormalize(vsub(prev, pts[i]))
        c = vdot(wi, nn)
        if c > 0.0:
            f = c_fresnel(c, 1.0, mat[MT_IOR])
        else:
            f = c_fresnel(-c, mat[MT_IOR], 1.0)
        v = f if taus[i] == 0 else 1.0 - f
        out[0] *= v
        out[1] *= v
        out[2] *= v


cdef int c_chain_visible(SceneC* s, int n, const V3* pts, V3 xd, V3 xl) noexcept nogil:
    cdef V3 prev = xd
    cdef int i
    for i in range(n):
        if c_occluded(s, prev, pts[i]):
            return 0
        prev = pts[i]
    return not c_occluded(s, prev, xl)


cdef int c_throughput(SceneC* s, int n, const int* sids, V3* pts, const int* taus, V3 xd, V3 nd,
                      V3 xl, int eid, const double* prm, double* T, double* G) noexcept nogil:
    """Polishes ``pts`` in place; T and G are zero unless the chain contributes."""
    cdef int it, st, a, b
    cdef V3 w0, nl, t1, t2, tt, xp
    cdef V3 p2[NMAX]
    cdef V3 pair[2]
    cdef V3 dirs[2]
    cdef double cos_d, h, g, sgn
    cdef double k[3]
    cdef const double* em
    T[0] = 0.0
    T[1] = 0.0
    T[2] = 0.0
    G[0] = 0.0
    st = c_walk(s, n, sids, pts, taus, xd, xl, prm, prm[P_TOL_POLISH], &it)
    if st != ADMISSIBLE:
        return 1
    w0 = vnormalize(vsub(pts[0], xd))
    cos_d = vdot(nd, w0)
    if cos_d <= 0.0:
        return 0
    em = s.ems + eid * EM_WIDTH
    if em[EM_KIND] == EMIT_SPHERE:
        nl = vnormalize(vsub(xl, vat(em + EM_POS)))
        if vdot(nl, vsub(pts[n - 1], xl)) <= 0.0:
            return 0
    else:
        nl = vnormalize(vsub(xl, pts[n - 1]))
    if not c_chain_visible(s, n, pts, xd, xl):
        return 0
    c_onb(nl, &t1, &t2)
    h = prm[P_FD_DELTA]
    for a in range(2):
        tt = t1 if a == 0 else t2
        for b in range(2):
            sgn = h if b == 0 else -h
            memcpy(p2, pts, n * sizeof(V3))
            xp = vmadd(xl, tt, sgn)
            st = c_walk(s, n, sids, p2, taus, xd, xp, prm, prm[P_TOL_POLISH], &it)
            if st != ADMISSIBLE:
                return 1
            pair[b] = vnormalize(vsub(p2[0], xd))
        dirs[a] = vmul(vsub(pair[0], pair[1]), 1.0 / (2.0 * h))
    g = cos_d * vnorm(vcross(dirs[0], dirs[1]))
    c_kappa(s, n, sids, pts, taus, xd, k)
    T[0] = k[0] * g * em[EM_LE]
    T[1] = k[1] * g * em[EM_LE + 1]
    T[2] = k[2] * g * em[EM_LE + 2]
    G[0] = g
    return 0


# ---------------------------------------------------------------------------
# seed sampling

cdef int sample_p0_n(const double* prm, bitgen_t* rng) noexcept nogil:
    cdef double u = rand(rng)
    cdef double acc = 0.0
    cdef int n
    for n in range(1, NMAX + 1):
        acc += prm[P_P0 + n]
        if u < acc:
            return n
    return NMAX


cdef int sample_pe_n(const double* row, bitgen_t* rng) noexcept nogil:
    cdef double u = rand(rng)
    cdef double acc = 0.0
    cdef int last = 1
    cdef int n
    for n in range(1, NMAX + 1):
        if row[n] > 0.0:
            acc += row[n]
            last = n
            if u < acc:
                return n
    return last


cdef V3 spec_point(SceneC* s, bitgen_t* rng) noexcept nogil:
    cdef double u = rand(rng)
    cdef int j = 0
    cdef const double* sh
    cdef V3 c
    cdef double u1, v1, z, phi, sq, r
    while j < s.nspec - 1 and u >= s.spec_cdf[j]:
        j += 1
    sh = shp(s, <int>s.spec_ids[j])
    c = vat(sh + SH_C)
    if sh[SH_KIND] == KIND_QUAD:
        u1 = (2.0 * rand(rng) - 1.0) * sh[SH_HU]
        v1 = (2.0 * rand(rng) - 1.0) * sh[SH_HV]
        return vmadd(vmadd(c, vat(sh + SH_EU), u1), vat(sh + SH_EV), v1)
    z = 1.0 - 2.0 * rand(rng)
    phi = 2.0 * PI * rand(rng)
    sq = sqrt(max(0.0, 1.0 - z * z))
    r = sh[SH_RAD]
    return v3(c.x + r * sq * cos(phi), c.y + r * sq * sin(phi), c.z + r * z)


cdef V3 c_sample_vmf(V3 mu, double kappa, bitgen_t* rng) noexcept nogil:
    cdef double u1 = rand(rng)
    cdef double u2 = rand(rng)
    cdef double w, sq, phi, cp, sp
    cdef V3 t1, t2
    if kappa < 1e-8:
        w = 1.0 - 2.0 * u1
    else:
        w = 1.0 + log(exp(-2.0 * kappa) + u1 * (-expm1(-2.0 * kappa))) / kappa
        w = min(1.0, max(-1.0, w))
    sq = sqrt(max(0.0, 1.0 - w * w))
    phi = 2.0 * PI * u2
    c_onb(mu, &t1, &t2)
    cp = cos(phi) * sq
    sp = sin(phi) * sq
    return v3(w * mu.x + cp * t1.x + sp * t2.x,
              w * mu.y + cp * t1.y + sp * t2.y,
              w * mu.z + cp * t1.z + sp * t2.z)


cdef V3 lobe_sample(GuideC* g, int lobe, bitgen_t* rng) noexcept nogil:
    """c_sample_vmf with the lobe's exponentials and frame taken from lobe_aux."""
    cdef double u1 = rand(rng)
    cdef double u2 = rand(rng)
    cdef double kappa = g.lobe_kappa[lobe]
    cdef const double* a = g.lobe_aux + 8 * lobe
    cdef V3 mu = vat(g.lobe_mu + 3 * lobe)
    cdef double w, sq, phi, cp, sp
    if kappa < 1e-8:
        w = 1.0 - 2.0 * u1
    else:
        w = 1.0 + log(a[0] + u1 * a[1]) / kappa
        w = min(1.0, max(-1.0, w))
    sq = sqrt(max(0.0, 1.0 - w * w))
    phi = 2.0 * PI * u2
    cp = cos(phi) * sq
    sp = sin(phi) * sq
    return v3(w * mu.x + cp * a[2] + sp * a[5],
              w * mu.y + cp * a[3] + sp * a[6],
              w * mu.z + cp * a[4] + sp * a[7])


cdef inline int leaf_has_length(GuideC* g, int leaf, int n) noexcept nogil:
    return g != NULL and leaf >= 0 and g.leaf_pn[leaf * (NMAX + 1) + n] > 0.0


cdef inline int leaf_has_any(GuideC* g, int leaf) noexcept nogil:
    cdef double acc = 0.0
    cdef int i
    if g == NULL or leaf < 0:
        return 0
    for i in range(NMAX + 1):
        acc += g.leaf_pn[leaf * (NMAX + 1) + i]
    return acc > 0.0


cdef int pick_lobe(GuideC* g, int leaf, int n, bitgen_t* rng, int* bits) noexcept nogil:
    cdef double u = rand(rng)
    cdef int start = <int>g.leaf_tau_start[leaf]
    cdef double acc = 0.0
    cdef int pick = -1
    cdef int j, ls, lc, lo, mid
    for j in range(start, start + <int>g.leaf_tau_count[leaf]):
        if g.tau_n[j] != n:
            continue
        acc += g.tau_prob[j]
        pick = j
        if u < acc:
            break
    bits[0] = <int>g.tau_bits[pick]
    ls = <int>g.tau_lobe_start[pick]
    lc = <int>g.tau_lobe_count[pick]
    u = rand(rng)
    # first lobe with u < cdf (or the last one), without data-dependent branches
    lo = ls
    while lc > 1:
        mid = lc >> 1
        lo += mid * (g.lobe_cdf[lo + mid - 1] <= u)
        lc -= mid
    return lo


cdef int c_draw_seed(SceneC* s, GuideC* g, int leaf, V3 xd, int n, const double* prm, bitgen_t* rng,
                     int* sids, V3* pts, int* tys, int* comp, V3* wout) noexcept nogil:
    cdef int bits, lobe, i, count, st
    cdef int taus[NMAX]
    cdef double prob
    cdef V3 w, x1
    if leaf_has_length(g, leaf, n) and rand(rng) >= prm[P_ALPHA]:
        lobe = pick_lobe(g, leaf, n, rng, &bits)
        for i in range(n):
            taus[i] = (bits >> i) & 1
        w = lobe_sample(g, lobe, rng)
        comp[0] = 1
        wout[0] = w
        return c_deduce(s, xd, w, taus, n, rng, sids, pts, tys, &count, &prob)
    x1 = spec_point(s, rng)
    w = vnormalize(vsub(x1, xd))
    comp[0] = 0
    wout[0] = w
    return c_deduce(s, xd, w, NULL, n, rng, sids, pts, tys, &count, &prob)


cdef int c_attempt(SceneC* s, GuideC* g, int leaf, V3 xd, V3 xl, int n, const double* prm,
                   bitgen_t* rng, double* stats, int* sids, V3* pts, int* tys) noexcept nogil:
    cdef int retries = <int>prm[P_RETRIES]
    cdef int r, st, comp, it, wst
    cdef int ok = 0
    cdef V3 w
    for r in range(retries):
        st = c_draw_seed(s, g, leaf, xd, n, prm, rng, sids, pts, tys, &comp, &w)
        stats[ST_LEARNED] += comp
        if st == DEDUCE_OK:
            ok = 1
            break
        stats[ST_DEDUCE_FAIL] += 1
    if not ok:
        return 0
    stats[ST_WALKS] += 1
    wst = c_walk(s, n, sids, pts, tys, xd, xl, prm, prm[P_TOL], &it)
    if wst != ADMISSIBLE:
        if wst == ESCAPED:
            stats[ST_ESCAPED] += 1
        return 0
    stats[ST_WALKS_OK] += 1
    return 1


cdef double c_length_probability(GuideC* g, int leaf, int n, const double* prm) noexcept nogil:
    cdef double p0 = prm[P_P0 + n]
    cdef double a
    if leaf_has_any(g, leaf):
        a = prm[P_ALPHA]
        return a * p0 + (1.0 - a) * g.leaf_pn[leaf * (NMAX + 1) + n]
    return p0


cdef int c_sample_length(GuideC* g, int leaf, const double* prm, bitgen_t* rng, double* pn) noexcept nogil:
    cdef int n
    if leaf_has_any(g, leaf):
        if rand(rng) < prm[P_ALPHA]:
            n = sample_p0_n(prm, rng)
        else:
            n = sample_pe_n(g.leaf_pn + leaf * (NMAX + 1), rng)
    else:
        n = sample_p0_n(prm, rng)
    pn[0] = c_length_probability(g, leaf, n, prm)
    return n


cdef int c_query(GuideC* g, V3 xd, V3 xl) noexcept nogil:
    cdef double q[6]
    cdef const NodeC* nd = g.nodes
    q[0] = (xd.x - g.lo[0]) * g.inv_ext[0]
    q[1] = (xd.y - g.lo[1]) * g.inv_ext[1]
    q[2] = (xd.z - g.lo[2]) * g.inv_ext[2]
    q[3] = (xl.x - g.lo[0]) * g.inv_ext[0]
    q[4] = (xl.y - g.lo[1]) * g.inv_ext[1]
    q[5] = (xl.z - g.lo[2]) * g.inv_ext[2]
    cdef int right
    while nd.leaf < 0:
        # branch-free child select; split outcomes are unpredictable
        right = q[nd.axis] >= nd.split
        nd = g.nodes + nd.left + right * (nd.right - nd.left)
    return nd.leaf


cdef int c_estimate(SceneC* s, GuideC* g, int leaf, V3 xd, V3 nd, V3 xl, int eid, const double* prm,
                    bitgen_t* rng, double* stats, Est* out) noexcept nogil:
    cdef int timing = prm[P_TIMING] != 0.0
    cdef double t0 = now() if timing else 0.0
    cdef int n, st, found, hit, kmax, i
    cdef double pn, Gv, delta, sc
    cdef long k
    cdef int sids2[NMAX]
    cdef V3 pts2[NMAX]
    cdef int tys2[NMAX]
    found = 0
    stats[ST_ESTIMATES] += 1
    n = c_sample_length(g, leaf, prm, rng, &pn)
    if c_attempt(s, g, leaf, xd, xl, n, prm, rng, stats, out.sids, out.pts, out.tys):
        st = c_throughput(s, n, out.sids, out.pts, out.tys, xd, nd, xl, eid, prm, out.T, &Gv)
        if st != 0:
            stats[ST_GGT_FAIL] += 1
        elif out.T[0] > 0.0 or out.T[1] > 0.0 or out.T[2] > 0.0:
            kmax = <int>prm[P_KMAX]
            delta = prm[P_DELTA_SAME]
            k = 0
            hit = 0
            while k < kmax:
                k += 1
                stats[ST_TRIALS] += 1
                if c_attempt(s, g, leaf, xd, xl, n, prm, rng, stats, sids2, pts2, tys2) \
                        and c_same_chain(n, pts2, tys2, out.pts, out.tys, delta):
                    hit = 1
                    break
            if not hit:
                stats[ST_TRUNCATED] += 1
            stats[ST_FOUND] += 1
            sc = k / pn
            for i in range(3):
                out.c[i] = out.T[i] * sc
            out.k = k
            out.pn = pn
            out.n = n
            found = 1
    if timing:
        stats[ST_SPEC_TIME] += now() - t0
    return found


# ---------------------------------------------------------------------------
# BSDFs

cdef inline double ggx_d(double cos_h, double a2) noexcept nogil:
    cdef double c2 = cos_h * cos_h
    cdef double d = c2 * (a2 - 1.0) + 1.0
    return a2 / (PI * d * d)


cdef inline double ggx_g1(double cos_v, double a2) noexcept nogil:
    cdef double c2 = cos_v * cos_v
    cdef double t2 = (1.0 - c2) / c2
    return 2.0 / (1.0 + sqrt(1.0 + a2 * t2))


cdef void c_bsdf_eval(const double* mat, V3 n, V3 wo, V3 wi, double* f) noexcept nogil:
    cdef double co = vdot(n, wo)
    cdef double ci = vdot(n, wi)
    cdef double a, a2, v
    cdef V3 h
    if co <= 0.0 or ci <= 0.0:
        f[0] = 0.0
        f[1] = 0.0
        f[2] = 0.0
        return
    if mat[MT_CLASS] == DIFFUSE:
        f[0] = mat[MT_COL] * INV_PI
        f[1] = mat[MT_COL + 1] * INV_PI
        f[2] = mat[MT_COL + 2] * INV_PI
        return
    a = mat[MT_ROUGH]
    a2 = a * a
    h = vnormalize(vadd(wo, wi))
    v = ggx_d(vdot(n, h), a2) * ggx_g1(co, a2) * ggx_g1(ci, a2) / (4.0 * co * ci)
    f[0] = mat[MT_COL] * v
    f[1] = mat[MT_COL + 1] * v
    f[2] = mat[MT_COL + 2] * v


cdef double c_bsdf_pdf(const double* mat, V3 n, V3 wo, V3 wi) noexcept nogil:
    cdef double co = vdot(n, wo)
    cdef double ci = vdot(n, wi)
    cdef double a, ch
    cdef V3 h
    if co <= 0.0 or ci <= 0.0:
        return 0.0
    if mat[MT_CLASS] == DIFFUSE:
        return ci * INV_PI
    a = mat[MT_ROUGH]
    h = vnormalize(vadd(wo, wi))
    ch = vdot(n, h)
    return ggx_d(ch, a * a) * ch / (4.0 * vdot(wo, h))


cdef double c_bsdf_sample(const double* mat, V3 n, V3 wo, bitgen_t* rng, V3* wi, double* wgt) noexcept nogil:
    cdef double u1 = rand(rng)
    cdef double u2 = rand(rng)
    cdef V3 t1, t2, h
    cdef double phi, r, z, x, y, a, a2, tan2, ch, sh, oh, ci, co, d, pdf, f, sc
    c_onb(n, &t1, &t2)
    phi = 2.0 * PI * u2
    wgt[0] = 0.0
    wgt[1] = 0.0
    wgt[2] = 0.0
    if mat[MT_CLASS] == DIFFUSE:
        r = sqrt(u1)
        z = sqrt(max(0.0, 1.0 - u1))
        x = r * cos(phi)
        y = r * sin(phi)
        wi[0] = v3(x * t1.x + y * t2.x + z * n.x, x * t1.y + y * t2.y + z * n.y,
                   x * t1.z + y * t2.z + z * n.z)
        if z <= 0.0:
            return 0.0
        wgt[0] = mat[MT_COL]
        wgt[1] = mat[MT_COL + 1]
        wgt[2] = mat[MT_COL + 2]
        return z * INV_PI
    a = mat[MT_ROUGH]
    a2 = a * a
    tan2 = a2 * u1 / (1.0 - u1)
    ch = 1.0 / sqrt(1.0 + tan2)
    sh = sqrt(max(0.0, 1.0 - ch * ch))
    x = sh * cos(phi)
    y = sh * sin(phi)
    h = v3(x * t1.x + y * t2.x + ch * n.x, x * t1.y + y * t2.y + ch * n.y,
           x * t1.z + y * t2.z + ch * n.z)
    oh = vdot(wo, h)
    if oh <= 0.0:
        wi[0] = wo
        return 0.0
    wi[0] = vmadd(vmul(wo, -1.0), h, 2.0 * oh)
    ci = vdot(n, wi[0])
    co = vdot(n, wo)
    if ci <= 0.0 or co <= 0.0:
        return 0.0
    d = ggx_d(ch, a2)
    pdf = d * ch / (4.0 * oh)
    f = d * ggx_g1(co, a2) * ggx_g1(ci, a2) / (4.0 * co * ci)
    sc = f * ci / pdf
    wgt[0] = mat[MT_COL] * sc
    wgt[1] = mat[MT_COL + 1] * sc
    wgt[2] = mat[MT_COL + 2] * sc
    return pdf


cdef int c_sample_emitter(SceneC* s, bitgen_t* rng, V3* p, double* pdf) noexcept nogil:
    cdef int ne = s.nems
    cdef int eid = <int>(rand(rng) * ne)
    cdef const double* em
    cdef V3 c
    cdef double z, phi, sq, r
    if eid > ne - 1:
        eid = ne - 1
    em = s.ems + eid * EM_WIDTH
    c = vat(em + EM_POS)
    if em[EM_KIND] == EMIT_SPHERE:
        z = 1.0 - 2.0 * rand(rng)
        phi = 2.0 * PI * rand(rng)
        sq = sqrt(max(0.0, 1.0 - z * z))
        r = em[EM_RAD]
        p[0] = v3(c.x + r * sq * cos(phi), c.y + r * sq * sin(phi), c.z + r * z)
        pdf[0] = 1.0 / (ne * 4.0 * PI * r * r)
        return eid
    p[0] = c
    pdf[0] = 1.0 / ne
    return eid


# ---------------------------------------------------------------------------
# path tracer

cdef int rec_push(RecBuf* rb, const double* row) noexcept nogil:
    cdef double* nd
    cdef Py_ssize_t cap
    cdef int i
    if rb.n == rb.cap:
        cap = 256 if rb.cap == 0 else 2 * rb.cap
        nd = <double*>realloc(rb.data, cap * REC_WIDTH * sizeof(double))
        if nd == NULL:
            return 0
        rb.data = nd
        rb.cap = cap
    for i in range(REC_WIDTH):
        rb.data[rb.n * REC_WIDTH + i] = row[i]
    rb.n += 1
    return 1


cdef void c_trace_path(SceneC* s, GuideC* g, const double* cam, int px, int py, const double* prm,
                       bitgen_t* rng, double* stats, RecBuf* recs, double* L, double* Lc) noexcept nogil:
    cdef int mode = <int>prm[P_MODE]
    cdef int selective = prm[P_SELECTIVE] != 0.0
    cdef int training = prm[P_TRAINING] != 0.0
    cdef int max_depth = <int>prm[P_MAX_DEPTH]
    cdef int rr_start = <int>prm[P_RR_START]
    cdef double gamma = prm[P_RR_GAMMA]
    cdef double eps = s.eps
    cdef int ne = s.nems
    cdef int chain_on = mode != MODE_PT and s.nspec > 0 and ne > 0
    cdef int timing = prm[P_TIMING] != 0.0
    cdef double w, h, sx, sy, t, te, cos_l, wgt, r, pl, c, f, dist2, cos_d, pe, pb, sc, pdf, tq
    cdef V3 o, d, x, nrm, wo, ns, xl, nl, wl, wd, wi, cen, dn
    cdef double beta[3]
    cdef double fv[3]
    cdef double bw[3]
    cdef double v[3]
    cdef double row[REC_WIDTH]
    cdef int has_ns = 0
    cdef int nspec = 0
    cdef V3 last_xd
    cdef double last_pdf = 0.0
    cdef int depth = 0
    cdef int sid, eid, leaf, active, found, i, bits
    cdef const double* mat
    cdef const double* em
    cdef double cls
    cdef Est est
    stats[ST_PATHS] += 1
    L[0] = 0.0
    L[1] = 0.0
    L[2] = 0.0
    Lc[0] = 0.0
    Lc[1] = 0.0
    Lc[2] = 0.0
    w = cam[14]
    h = cam[15]
    sx = (2.0 * (px + rand(rng)) / w - 1.0) * cam[12] * cam[13]
    sy = (1.0 - 2.0 * (py + rand(rng)) / h) * cam[12]
    o = v3(cam[0], cam[1], cam[2])
    d = vnormalize(v3(cam[3] + sx * cam[6] + sy * cam[9],
                      cam[4] + sx * cam[7] + sy * cam[10],
                      cam[5] + sx * cam[8] + sy * cam[11]))
    beta[0] = 1.0
    beta[1] = 1.0
    beta[2] = 1.0
    last_xd = o
    while True:
        t = c_intersect(s, o, d, eps, INFINITY, 0, &sid)
        te = c_intersect_emitters(s, o, d, eps, t if sid >= 0 else INFINITY, &eid)
        if eid >= 0:
            em = s.ems + eid * EM_WIDTH
            cen = vat(em + EM_POS)
            xl = vmadd(o, d, te)
            nl = vnormalize(vsub(xl, cen))
            cos_l = -vdot(d, nl)
            if cos_l > 0.0:
                wgt = 0.0
                if not has_ns:
                    wgt = 1.0
                elif nspec == 0:
                    r = em[EM_RAD]
                    pl = te * te / (cos_l * ne * 4.0 * PI * r * r)
                    wgt = last_pdf / (last_pdf + pl)
                elif mode == MODE_PT:
                    wgt = 1.0
                elif selective:
                    stats[ST_ACT_QUERIES] += 1
                    leaf = c_query(g, last_xd, xl) if (g != NULL and mode == MODE_MPG) else -1
                    if leaf >= 0 and g.leaf_real[leaf] > 0:
                        stats[ST_ACT_ACTIVE] += 1
                    else:
                        wgt = 1.0
                if wgt > 0.0:
                    L[0] += beta[0] * em[EM_LE] * wgt
                    L[1] += beta[1] * em[EM_LE + 1] * wgt
                    L[2] += beta[2] * em[EM_LE + 2] * wgt
            break
        if sid < 0:
            break
        x = vmadd(o, d, t)
        mat = matof(s, sid)
        cls = mat[MT_CLASS]
        nrm = vnormalize(c_shape_normal(s, sid, x))
        if cls >= DIELECTRIC:
            if cls == CONDUCTOR:
                d = vnormalize(c_reflect(d, nrm))
                beta[0] = beta[0] * mat[MT_COL]
                beta[1] = beta[1] * mat[MT_COL + 1]
                beta[2] = beta[2] * mat[MT_COL + 2]
            else:
                c = vdot(d, nrm)
                if c < 0.0:
                    f = c_fresnel(-c, 1.0, mat[MT_IOR])
                else:
                    f = c_fresnel(c, mat[MT_IOR], 1.0)
                if rand(rng) < f:
                    d = vnormalize(c_reflect(d, nrm))
                else:
                    c_refract(d, nrm, mat[MT_IOR], &dn)
                    d = vnormalize(dn)
            nspec += 1
            last_pdf = 0.0
        else:
            wo = vneg(d)
            ns = nrm if vdot(nrm, wo) > 0.0 else vneg(nrm)
            has_ns = 1
            nspec = 0
            last_xd = x
            if ne > 0:
                eid = c_sample_emitter(s, rng, &xl, &pe)
                em = s.ems + eid * EM_WIDTH
                wl = vsub(xl, x)
                dist2 = vdot(wl, wl)
                wl = vmul(wl, 1.0 / sqrt(dist2))
                cos_d = vdot(ns, wl)
                if cos_d > 0.0:
                    if em[EM_KIND] == EMIT_SPHERE:
                        nl = vnormalize(vsub(xl, vat(em + EM_POS)))
                        cos_l = -vdot(wl, nl)
                        if cos_l > 0.0 and not c_occluded(s, x, xl):
                            c_bsdf_eval(mat, ns, wo, wl, fv)
                            pl = pe * dist2 / cos_l
                            pb = c_bsdf_pdf(mat, ns, wo, wl)
                            sc = cos_d / pl * (pl / (pl + pb))
                            L[0] += beta[0] * fv[0] * em[EM_LE] * sc
                            L[1] += beta[1] * fv[1] * em[EM_LE + 1] * sc
                            L[2] += beta[2] * fv[2] * em[EM_LE + 2] * sc
                    elif not c_occluded(s, x, xl):
                        c_bsdf_eval(mat, ns, wo, wl, fv)
                        sc = cos_d / (dist2 * pe)
                        L[0] += beta[0] * fv[0] * em[EM_LE] * sc
                        L[1] += beta[1] * fv[1] * em[EM_LE + 1] * sc
                        L[2] += beta[2] * fv[2] * em[EM_LE + 2] * sc
            if chain_on:
                eid = c_sample_emitter(s, rng, &xl, &pe)
                leaf = -1
                active = 1
                if g != NULL and mode == MODE_MPG:
                    tq = now() if timing else 0.0
                    leaf = c_query(g, x, xl)
                    if timing:
                        stats[ST_GUIDE_TIME] += now() - tq
                if selective:
                    stats[ST_ACT_QUERIES] += 1
                    active = leaf >= 0 and g.leaf_real[leaf] > 0
                    if active:
                        stats[ST_ACT_ACTIVE] += 1
                if active:
                    found = c_estimate(s, g if mode == MODE_MPG else NULL, leaf, x, ns, xl, eid, prm,
                                       rng, stats, &est)
                    if found:
                        wd = vnormalize(vsub(est.pts[0], x))
                        c_bsdf_eval(mat, ns, wo, wd, fv)
                        sc = 1.0 / pe
                        v[0] = beta[0] * fv[0] * est.c[0] * sc
                        v[1] = beta[1] * fv[1] * est.c[1] * sc
                        v[2] = beta[2] * fv[2] * est.c[2] * sc
                        for i in range(3):
                            L[i] += v[i]
                            Lc[i] += v[i]
                        if v[0] > 0.0 or v[1] > 0.0 or v[2] > 0.0:
                            stats[ST_CHAIN_NONZERO] += 1
                        if training:
                            bits = 0
                            for i in range(est.n):
                                bits |= est.tys[i] << i
                            row[0] = x.x
                            row[1] = x.y
                            row[2] = x.z
                            row[3] = xl.x
                            row[4] = xl.y
                            row[5] = xl.z
                            row[6] = wd.x
                            row[7] = wd.y
                            row[8] = wd.z
                            row[9] = est.n
                            row[10] = bits
                            row[11] = lum(est.T)
                            row[12] = est.k / est.pn
                            row[13] = lum(fv)
                            rec_push(recs, row)
                            stats[ST_RECORDS] += 1
            pdf = c_bsdf_sample(mat, ns, wo, rng, &wi, bw)
            if pdf <= 0.0:
                break
            beta[0] = beta[0] * bw[0]
            beta[1] = beta[1] * bw[1]
            beta[2] = beta[2] * bw[2]
            d = wi
            last_pdf = pdf
        o = x
        depth += 1
        if depth >= max_depth:
            break
        if depth >= rr_start:
            if rand(rng) >= gamma:
                break
            beta[0] = beta[0] / gamma
            beta[1] = beta[1] / gamma
            beta[2] = beta[2] / gamma


# ---------------------------------------------------------------------------
# Python-facing wrappers (same signatures and return shapes as ``_pycore``)

cdef inline V3 tv3(object a):
    return v3(a[0], a[1], a[2])


cdef inline tuple pv3(V3 a):
    return (a.x, a.y, a.z)


cdef object _prm(object prm):
    return np.ascontiguousarray(prm, dtype=np.float64)


def onb(n):
    cdef V3 t1, t2
    c_onb(tv3(n), &t1, &t2)
    return pv3(t1), pv3(t2)


def reflect(w, n):
    return pv3(c_reflect(tv3(w), tv3(n)))


def refract(w, n, double ior):
    cdef V3 out
    if not c_refract(tv3(w), tv3(n), ior, &out):
        return None
    return pv3(out)


def fresnel(double cos_i, double eta_i, double eta_t):
    return c_fresnel(cos_i, eta_i, eta_t)


def intersect(KScene ks, o, d, double tmin, double tmax, specular_only):
    cdef int sid
    cdef double t = c_intersect(&ks.s, tv3(o), tv3(d), tmin, tmax, 1 if specular_only else 0, &sid)
    return t, sid


def intersect_emitters(KScene ks, o, d, double tmin, double tmax):
    cdef int eid
    cdef double t = c_intersect_emitters(&ks.s, tv3(o), tv3(d), tmin, tmax, &eid)
    return t, eid


def occluded(KScene ks, a, b):
    return bool(c_occluded(&ks.s, tv3(a), tv3(b)))


def shape_normal(KScene ks, int sid, p):
    return pv3(c_shape_normal(&ks.s, sid, tv3(p)))


def shape_frame(KScene ks, int sid, p):
    cdef V3 f[3]
    c_shape_frame(&ks.s, sid, tv3(p), f)
    return pv3(f[0]), pv3(f[1]), pv3(f[2])


cdef int _load_chain(object sids, object pts, object taus, int* cs, V3* cp, int* ct) except -1:
    cdef int n = len(sids)
    cdef int i
    if n < 1 or n > NMAX:
        raise ValueError("chain length out of range")
    for i in range(n):
        cs[i] = sids[i]
        cp[i] = tv3(pts[i])
        ct[i] = taus[i]
    return n


def deduce(KScene ks, xd, wd, taus, int n, rng):
    cdef int sids[NMAX]
    cdef V3 pts[NMAX]
    cdef int tys[NMAX]
    cdef int tin[NMAX]
    cdef int count, i, st
    cdef double prob
    cdef bitgen_t* bg = NULL
    if n < 1 or n > NMAX:
        raise ValueError("chain length out of range")
    if taus is not None:
        for i in range(n):
            tin[i] = taus[i]
    else:
        bg = _bitgen(rng)
    st = c_deduce(&ks.s, tv3(xd), tv3(wd), tin if taus is not None else NULL, n, bg,
                  sids, pts, tys, &count, &prob)
    return (st, [sids[i] for i in range(count)], [pv3(pts[i]) for i in range(count)],
            [tys[i] for i in range(count)], prob)


def spec_residual(KScene ks, sids, pts, frames, taus, xd, xl):
    cdef int cs[NMAX]
    cdef V3 cp[NMAX]
    cdef int ct[NMAX]
    cdef V3 fr[3 * NMAX]
    cdef double out[MMAX]
    cdef int sides, i
    cdef int n = _load_chain(sids, pts, taus, cs, cp, ct)
    for i in range(n):
        fr[3 * i] = tv3(frames[i][0])
        fr[3 * i + 1] = tv3(frames[i][1])
        fr[3 * i + 2] = tv3(frames[i][2])
    if not c_spec_residual(&ks.s, n, cs, cp, fr, ct, tv3(xd), tv3(xl), out, &sides):
        return None, False
    return [out[i] for i in range(2 * n)], bool(sides)


def newton_system(KScene ks, sids, pts, frames, taus, xd, xl, want_jac):
    cdef int cs[NMAX]
    cdef V3 cp[NMAX]
    cdef int ct[NMAX]
    cdef V3 fr[3 * NMAX]
    cdef double F[MMAX]
    cdef double J[MMAX * MMAX]
    cdef int i, j
    cdef int n = _load_chain(sids, pts, taus, cs, cp, ct)
    cdef int m = 2 * n
    for i in range(n):
        fr[3 * i] = tv3(frames[i][0])
        fr[3 * i + 1] = tv3(frames[i][1])
        fr[3 * i + 2] = tv3(frames[i][2])
    if not c_newton_system(&ks.s, n, cs, cp, fr, ct, tv3(xd), tv3(xl), F, J if want_jac else NULL):
        return None, None
    Fl = [F[i] for i in range(m)]
    if not want_jac:
        return Fl, None
    return Fl, [[J[i * m + j] for j in range(m)] for i in range(m)]


def walk(KScene ks, sids, pts, taus, xd, xl, prm, double tol):
    cdef int cs[NMAX]
    cdef V3 cp[NMAX]
    cdef int ct[NMAX]
    cdef int it, st, i
    cdef int n = _load_chain(sids, pts, taus, cs, cp, ct)
    cdef double[::1] p = _prm(prm)
    st = c_walk(&ks.s, n, cs, cp, ct, tv3(xd), tv3(xl), &p[0], tol, &it)
    return st, [pv3(cp[i]) for i in range(n)], it


def same_chain(pa, ta, pb, tb, double delta):
    cdef V3 a[NMAX]
    cdef V3 b[NMAX]
    cdef int x[NMAX]
    cdef int y[NMAX]
    cdef int n = len(pa)
    cdef int i
    if n != len(pb) or len(ta) != len(tb) or n != len(ta):
        return False
    if n > NMAX:
        raise ValueError("chain length out of range")
    for i in range(n):
        a[i] = tv3(pa[i])
        b[i] = tv3(pb[i])
        x[i] = ta[i]
        y[i] = tb[i]
    return bool(c_same_chain(n, a, x, b, y, delta))


def kappa(KScene ks, sids, pts, taus, xd):
    cdef int cs[NMAX]
    cdef V3 cp[NMAX]
    cdef int ct[NMAX]
    cdef double out[3]
    cdef int n = _load_chain(sids, pts, taus, cs, cp, ct)
    c_kappa(&ks.s, n, cs, cp, ct, tv3(xd), out)
    return [out[0], out[1], out[2]]


def throughput(KScene ks, sids, pts, taus, xd, nd, xl, int eid, prm):
    cdef int cs[NMAX]
    cdef V3 cp[NMAX]
    cdef int ct[NMAX]
    cdef double T[3]
    cdef double G
    cdef int i, st
    cdef int n = _load_chain(sids, pts, taus, cs, cp, ct)
    cdef double[::1] p = _prm(prm)
    st = c_throughput(&ks.s, n, cs, cp, ct, tv3(xd), tv3(nd), tv3(xl), eid, &p[0], T, &G)
    return st, [T[0], T[1], T[2]], G, [pv3(cp[i]) for i in range(n)]


def sample_vmf(mu, double kappa_, rng):
    return pv3(c_sample_vmf(tv3(mu), kappa_, _bitgen(rng)))


def draw_seed(KScene ks, kg, int leaf, xd, int n, prm, rng):
    cdef int sids[NMAX]
    cdef V3 pts[NMAX]
    cdef int tys[NMAX]
    cdef int comp, st, i, count
    cdef V3 w
    cdef double[::1] p = _prm(prm)
    for i in range(NMAX):
        sids[i] = -1
    st = c_draw_seed(&ks.s, _guide(kg), leaf, tv3(xd), n, &p[0], _bitgen(rng), sids, pts, tys, &comp, &w)
    count = 0
    while count < n and sids[count] >= 0:
        count += 1
    return (st, comp, [sids[i] for i in range(count)], [pv3(pts[i]) for i in range(count)],
            [tys[i] for i in range(count)], pv3(w))


def length_probability(kg, int leaf, int n, prm):
    cdef double[::1] p = _prm(prm)
    return c_length_probability(_guide(kg), leaf, n, &p[0])


def sample_length(kg, int leaf, prm, rng):
    cdef double[::1] p = _prm(prm)
    cdef double pn
    cdef int n = c_sample_length(_guide(kg), leaf, &p[0], _bitgen(rng), &pn)
    return n, pn


def query(kg, xd, xl):
    return c_query(_guide(kg), tv3(xd), tv3(xl))


cdef tuple _est_tuple(Est* e):
    cdef int i
    return ([e.c[0], e.c[1], e.c[2]], [e.T[0], e.T[1], e.T[2]], e.k, e.pn, e.n,
            [e.sids[i] for i in range(e.n)], [pv3(e.pts[i]) for i in range(e.n)],
            [e.tys[i] for i in range(e.n)])


def estimate(KScene ks, kg, int leaf, xd, nd, xl, int eid, prm, rng, double[::1] stats):
    cdef Est e
    cdef double[::1] p = _prm(prm)
    if not c_estimate(&ks.s, _guide(kg), leaf, tv3(xd), tv3(nd), tv3(xl), eid, &p[0],
                      _bitgen(rng), &stats[0], &e):
        return None
    return _est_tuple(&e)


def estimate_many(KScene ks, kg, int leaf, xd, nd, xl, int eid, prm, rng, double[::1] stats, int count):
    cdef Est e
    cdef double[::1] p = _prm(prm)
    cdef bitgen_t* bg = _bitgen(rng)
    cdef GuideC* g = _guide(kg)
    cdef V3 cxd = tv3(xd)
    cdef V3 cnd = tv3(nd)
    cdef V3 cxl = tv3(xl)
    cdef double[:, ::1] contrib = np.zeros((count, 3))
    cdef RecBuf rb
    cdef double row[REC_WIDTH]
    cdef V3 w
    cdef int j, i, bits
    rb.data = NULL
    rb.n = 0
    rb.cap = 0
    try:
        with nogil:
            for j in range(count):
                if not c_estimate(&ks.s, g, leaf, cxd, cnd, cxl, eid, &p[0], bg, &stats[0], &e):
                    continue
                contrib[j, 0] = e.c[0]
                contrib[j, 1] = e.c[1]
                contrib[j, 2] = e.c[2]
                w = vnormalize(vsub(e.pts[0], cxd))
                bits = 0
                for i in range(e.n):
                    bits |= e.tys[i] << i
                row[0] = cxd.x
                row[1] = cxd.y
                row[2] = cxd.z
                row[3] = cxl.x
                row[4] = cxl.y
                row[5] = cxl.z
                row[6] = w.x
                row[7] = w.y
                row[8] = w.z
                row[9] = e.n
                row[10] = bits
                row[11] = lum(e.T)
                row[12] = e.k / e.pn
                row[13] = 0.0
                rec_push(&rb, row)
        recs = np.array(<double[:rb.n * REC_WIDTH]>rb.data).reshape(-1, REC_WIDTH) if rb.n else \
            np.zeros((0, REC_WIDTH))
    finally:
        free(rb.data)
    return np.asarray(contrib), recs


def find_many(KScene ks, kg, int leaf, xd, xl, prm, rng, double[::1] stats, int count):
    cdef int sids[NMAX]
    cdef V3 pts[NMAX]
    cdef int tys[NMAX]
    cdef double[::1] p = _prm(prm)
    cdef bitgen_t* bg = _bitgen(rng)
    cdef GuideC* g = _guide(kg)
    cdef V3 cxd = tv3(xd)
    cdef V3 cxl = tv3(xl)
    cdef int j, i, n, bits
    cdef double pn
    out = []
    for j in range(count):
        n = c_sample_length(g, leaf, &p[0], bg, &pn)
        if not c_attempt(&ks.s, g, leaf, cxd, cxl, n, &p[0], bg, &stats[0], sids, pts, tys):
            continue
        bits = 0
        for i in range(n):
            bits |= tys[i] << i
        out.append((n, bits, pv3(pts[0])))
    return out


def guide_probe(KScene ks, kg, int leaf_hint, xd, xl, int n, prm, rng):
    cdef GuideC* g = _guide(kg)
    cdef bitgen_t* bg = _bitgen(rng)
    cdef int leaf = c_query(g, tv3(xd), tv3(xl)) if leaf_hint < 0 else leaf_hint
    cdef int bits, lobe
    if not leaf_has_length(g, leaf, n):
        return leaf
    lobe = pick_lobe(g, leaf, n, bg, &bits)
    lobe_sample(g, lobe, bg)
    return leaf


def time_guiding(KScene ks, kg, xds, xls, ns, prm, rng):
    """Wall time of query + learned-distribution draws over the given configurations."""
    cdef GuideC* g = _guide(kg)
    cdef bitgen_t* bg = _bitgen(rng)
    cdef double[:, ::1] a = np.ascontiguousarray(xds, dtype=np.float64)
    cdef double[:, ::1] b = np.ascontiguousarray(xls, dtype=np.float64)
    cdef long[::1] nn = np.ascontiguousarray(ns, dtype=np.int64)
    cdef Py_ssize_t j
    cdef int leaf, bits, lobe
    cdef double t0, t1
    with nogil:
        t0 = now()
        for j in range(a.shape[0]):
            leaf = c_query(g, v3(a[j, 0], a[j, 1], a[j, 2]), v3(b[j, 0], b[j, 1], b[j, 2]))
            if leaf_has_length(g, leaf, <int>nn[j]):
                lobe = pick_lobe(g, leaf, <int>nn[j], bg, &bits)
                lobe_sample(g, lobe, bg)
        t1 = now()
    return t1 - t0


def basin_grid(KScene ks, xd, xl, int sid, int res, taus, prm, double tol):
    cdef int cs[NMAX]
    cdef V3 cp[NMAX]
    cdef int ct[NMAX]
    cdef int tin[NMAX]
    cdef double[::1] p = _prm(prm)
    cdef int n = len(taus)
    cdef int i, j, c, st, it, count, lab
    cdef double prob, delta = p[P_DELTA_SAME]
    cdef V3 cxd = tv3(xd)
    cdef V3 cxl = tv3(xl)
    cdef V3 x1, w
    cdef const double* sh = shp(&ks.s, sid)
    cdef double a, b, z, phi, sq, r
    cdef V3 cen = vat(sh + SH_C)
    cdef V3* found = <V3*>malloc(res * res * NMAX * sizeof(V3))
    cdef int nfound = 0
    if n < 1 or n > NMAX:
        raise ValueError("chain length out of range")
    for i in range(n):
        tin[i] = taus[i]
    labels = [-1] * (res * res)
    chains = []
    try:
        for i in range(res):
            for j in range(res):
                a = (2.0 * i + 1.0) / res - 1.0
                b = (2.0 * j + 1.0) / res - 1.0
                if sh[SH_KIND] == KIND_QUAD:
                    x1 = vmadd(vmadd(cen, vat(sh + SH_EU), a * sh[SH_HU]), vat(sh + SH_EV), b * sh[SH_HV])
                else:
                    z = -a
                    phi = PI * (b + 1.0)
                    sq = sqrt(max(0.0, 1.0 - z * z))
                    r = sh[SH_RAD]
                    x1 = v3(cen.x + r * sq * cos(phi), cen.y + r * sq * sin(phi), cen.z + r * z)
                w = vsub(x1, cxd)
                if vnorm(w) < 1e-12:
                    continue
                w = vnormalize(w)
                st = c_deduce(&ks.s, cxd, w, tin, n, NULL, cs, cp, ct, &count, &prob)
                if st != DEDUCE_OK:
                    continue
                st = c_walk(&ks.s, n, cs, cp, ct, cxd, cxl, &p[0], tol, &it)
                if st != ADMISSIBLE:
                    continue
                lab = -1
                for c in range(nfound):
                    if c_same_chain(n, found + c * NMAX, tin, cp, tin, delta):
                        lab = c
                        break
                if lab < 0:
                    lab = nfound
                    memcpy(found + nfound * NMAX, cp, n * sizeof(V3))
                    nfound += 1
                    chains.append(([cs[c] for c in range(n)], [pv3(cp[c]) for c in range(n)]))
                labels[i * res + j] = lab
    finally:
        free(found)
    return labels, chains


def sample_emitter(KScene ks, rng):
    cdef V3 p
    cdef double pdf
    cdef int eid = c_sample_emitter(&ks.s, _bitgen(rng), &p, &pdf)
    return eid, pv3(p), pdf


def bsdf_eval(mat, n, wo, wi):
    cdef double m[MT_WIDTH]
    cdef double f[3]
    cdef int i
    for i in range(MT_WIDTH):
        m[i] = mat[i]
    c_bsdf_eval(m, tv3(n), tv3(wo), tv3(wi), f)
    return (f[0], f[1], f[2])


def bsdf_pdf(mat, n, wo, wi):
    cdef double m[MT_WIDTH]
    cdef int i
    for i in range(MT_WIDTH):
        m[i] = mat[i]
    return c_bsdf_pdf(m, tv3(n), tv3(wo), tv3(wi))


def bsdf_sample(mat, n, wo, rng):
    cdef double m[MT_WIDTH]
    cdef double wgt[3]
    cdef V3 wi
    cdef double pdf
    cdef int i
    for i in range(MT_WIDTH):
        m[i] = mat[i]
    pdf = c_bsdf_sample(m, tv3(n), tv3(wo), _bitgen(rng), &wi, wgt)
    return pv3(wi), (wgt[0], wgt[1], wgt[2]), pdf


def trace_path(KScene ks, kg, cam, int px, int py, prm, rng, double[::1] stats, records):
    cdef double[::1] p = _prm(prm)
    cdef double[::1] c = np.ascontiguousarray(cam, dtype=np.float64)
    cdef double L[3]
    cdef double Lc[3]
    cdef RecBuf rb
    cdef Py_ssize_t i
    rb.data = NULL
    rb.n = 0
    rb.cap = 0
    try:
        c_trace_path(&ks.s, _guide(kg), &c[0], px, py, &p[0], _bitgen(rng), &stats[0], &rb, L, Lc)
        for i in range(rb.n):
            records.append([rb.data[i * REC_WIDTH + j] for j in range(REC_WIDTH)])
    finally:
        free(rb.data)
    return [L[0], L[1], L[2]], [Lc[0], Lc[1], Lc[2]]


def render_pixels(KScene ks, kg, cam, pixels, rngs, int spp, prm, double[::1] stats):
    """Trace ``spp`` paths per pixel without holding the GIL.

    Returns (rgb sums (P, 3), chain rgb sums (P, 3), records (R, 14)).
    """
    cdef double[::1] p = _prm(prm)
    cdef double[::1] c = np.ascontiguousarray(cam, dtype=np.float64)
    cdef long[:, ::1] px = np.ascontiguousarray(pixels, dtype=np.int64).reshape(-1, 2)
    cdef Py_ssize_t npx = px.shape[0]
    cdef double[:, ::1] out = np.zeros((npx, 3))
    cdef double[:, ::1] outc = np.zeros((npx, 3))
    cdef bitgen_t** bgs = <bitgen_t**>malloc((npx + 1) * sizeof(bitgen_t*))
    cdef GuideC* g = _guide(kg)
    cdef RecBuf rb
    cdef double L[3]
    cdef double Lc[3]
    cdef Py_ssize_t j
    cdef int k, ch
    rb.data = NULL
    rb.n = 0
    rb.cap = 0
    try:
        for j in range(npx):
            bgs[j] = _bitgen(rngs[j])
        with nogil:
            for j in range(npx):
                for k in range(spp):
                    c_trace_path(&ks.s, g, &c[0], <int>px[j, 0], <int>px[j, 1], &p[0], bgs[j],
                                 &stats[0], &rb, L, Lc)
                    for ch in range(3):
                        out[j, ch] += L[ch]
                        outc[j, ch] += Lc[ch]
        recs = np.array(<double[:rb.n * REC_WIDTH]>rb.data).reshape(-1, REC_WIDTH) if rb.n else \
            np.zeros((0, REC_WIDTH))
    finally:
        free(rb.data)
        free(bgs)
    return np.asarray(out), np.asarray(outc), recs
