# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: weighted-set projection, TD(lambda) target recursion, pinball loss."""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free, qsort
from libc.math cimport isfinite

cnp.import_array()

cdef double WEIGHT_FLOOR = 1e-12
cdef double LEVEL_TOL = 1e-12


cdef struct Atom:
    double pos
    double w
    Py_ssize_t order


cdef int _cmp_atom(const void *a, const void *b) noexcept nogil:
    cdef const Atom *x = <const Atom *> a
    cdef const Atom *y = <const Atom *> b
    if x.pos < y.pos:
        return -1
    if x.pos > y.pos:
        return 1
    # keep insertion order for equal positions (stable)
    if x.order < y.order:
        return -1
    if x.order > y.order:
        return 1
    return 0


cdef int _project(Atom *atoms, Py_ssize_t n, double *out, Py_ssize_t m_out) noexcept nogil:
    """Project ``n`` atoms (weights need not be normalised) into ``out``. Returns -1 if empty."""
    cdef Py_ssize_t i, k = 0
    cdef double total = 0.0, acc = 0.0, level
    for i in range(n):
        total += atoms[i].w
    if n == 0 or not total > 0.0:
        return -1
    # normalise, drop negligible entries, compact in place
    for i in range(n):
        atoms[i].w = atoms[i].w / total
        if atoms[i].w >= WEIGHT_FLOOR:
            atoms[k] = atoms[i]
            atoms[k].order = k
            k += 1
    n = k
    qsort(atoms, n, sizeof(Atom), _cmp_atom)
    k = 0
    acc = atoms[0].w
    for i in range(m_out):
        level = (i + 0.5) / m_out - LEVEL_TOL
        while acc < level and k < n - 1:
            k += 1
            acc += atoms[k].w
        out[i] = atoms[k].pos
    return 0


def project_weighted(positions, weights, Py_ssize_t m_out):
    cdef const double[::1] pos = np.ascontiguousarray(positions, dtype=np.float64)
    cdef const double[::1] wts = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = pos.shape[0], i
    if wts.shape[0] != n:
        raise ValueError("positions and weights differ in length")
    result = np.empty(m_out, dtype=np.float64)
    cdef double[::1] res = result
    cdef Atom *atoms = <Atom *> malloc((n if n > 0 else 1) * sizeof(Atom))
    if atoms == NULL:
        raise MemoryError()
    try:
        for i in range(n):
            atoms[i].pos = pos[i]
            atoms[i].w = wts[i]
            atoms[i].order = i
        if _project(atoms, n, &res[0], m_out) != 0:
            raise ValueError("cannot project an empty atom set")
    finally:
        free(atoms)
    return result


cdef int _cmp_double(const void *a, const void *b) noexcept nogil:
    cdef double x = (<const double *> a)[0]
    cdef double y = (<const double *> b)[0]
    return (x > y) - (x < y)


cdef void _merge_project(const double *a, Py_ssize_t na, double wa,
                         const double *b, Py_ssize_t nb, double wb,
                         double *out, Py_ssize_t m_out) noexcept nogil:
    """Project the union of two sorted equal-weight sets (per-atom weights wa, wb; wa+wb>0)."""
    cdef double total = na * wa + nb * wb
    cdef double pa = wa / total, pb = wb / total
    cdef Py_ssize_t i = 0, j = 0, k
    cdef double acc = 0.0, level, cur = 0.0
    cdef bint have = False
    if pa < WEIGHT_FLOOR:
        i = na
    if pb < WEIGHT_FLOOR:
        j = nb
    for k in range(m_out):
        level = (k + 0.5) / m_out - LEVEL_TOL
        while (not have or acc < level) and (i < na or j < nb):
            # ties go to the first set, matching a stable sort of (a, b)
            if j >= nb or (i < na and a[i] <= b[j]):
                cur = a[i]
                acc += pa
                i += 1
            else:
                cur = b[j]
                acc += pb
                j += 1
            have = True
        out[k] = cur


def td_lambda_targets(rewards, dones, ratios, boot, double gamma, double lam, Py_ssize_t m_proj):
    cdef const double[::1] r = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef const double[::1] d = np.ascontiguousarray(dones, dtype=np.float64)
    cdef const double[::1] rho = np.ascontiguousarray(ratios, dtype=np.float64)
    cdef double[:, ::1] bt = np.array(boot, dtype=np.float64, order="C", copy=True, ndmin=2)
    cdef Py_ssize_t n_steps = bt.shape[0], n_boot = bt.shape[1]
    result = np.empty((n_steps, m_proj), dtype=np.float64)
    if n_steps == 0:
        return result
    if n_boot == 0:
        raise ValueError("cannot project an empty atom set")
    cdef double[:, ::1] out = result
    cdef Py_ssize_t cap = n_boot if n_boot > m_proj else m_proj
    cdef double *one = <double *> malloc(cap * sizeof(double))
    cdef double *tot = <double *> malloc(cap * sizeof(double))
    if one == NULL or tot == NULL:
        free(one)
        free(tot)
        raise MemoryError()
    cdef Py_ssize_t t, j, n_tot, last = n_steps - 1
    cdef double w_one, w_tot, cont, scale
    cdef int bad_step = -1
    try:
        with nogil:
            for t in range(n_steps):
                for j in range(1, n_boot):
                    if bt[t, j] < bt[t, j - 1]:
                        qsort(&bt[t, 0], n_boot, sizeof(double), _cmp_double)
                        break
            scale = (1.0 - d[last]) * gamma
            for j in range(n_boot):
                tot[j] = r[last] + scale * bt[last, j]
            n_tot = n_boot
            w_tot = lam
            t = last
            while t >= 0:
                w_one = 1.0 - lam
                if w_one + w_tot <= 0.0:
                    w_one = 1.0
                    w_tot = 0.0
                scale = (1.0 - d[t]) * gamma
                for j in range(n_boot):
                    one[j] = r[t] + scale * bt[t, j]
                _merge_project(one, n_boot, w_one / n_boot, tot, n_tot, w_tot / n_tot,
                               &out[t, 0], m_proj)
                if t > 0:
                    cont = 1.0 - d[t - 1]
                    for j in range(m_proj):
                        tot[j] = r[t - 1] + cont * gamma * out[t, j]
                    n_tot = m_proj
                    w_tot = lam * rho[t] * cont * (1.0 - lam + w_tot)
                    if not isfinite(w_tot):
                        bad_step = <int> t
                        break
                t -= 1
    finally:
        free(one)
        free(tot)
    if bad_step >= 0:
        raise FloatingPointError(f"trace weight overflowed at step {bad_step}")
    return result


def quantile_loss_grad(pred, target, target_w):
    cdef const double[:, ::1] p = np.ascontiguousarray(pred, dtype=np.float64)
    cdef const double[:, ::1] z = np.ascontiguousarray(target, dtype=np.float64)
    cdef const double[:, ::1] w = np.ascontiguousarray(target_w, dtype=np.float64)
    cdef Py_ssize_t n_rows = p.shape[0], n_atoms = p.shape[1], n_tgt = z.shape[1]
    if z.shape[0] != n_rows or w.shape[0] != n_rows or w.shape[1] != n_tgt:
        raise ValueError("prediction/target shapes disagree")
    loss_arr = np.zeros(n_rows, dtype=np.float64)
    grad_arr = np.empty((n_rows, n_atoms), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t i, m, j
    cdef double tau, u, below, acc_loss, acc_below
    with nogil:
        for i in range(n_rows):
            acc_loss = 0.0
            for m in range(n_atoms):
                tau = (m + 0.5) / n_atoms
                acc_below = 0.0
                for j in range(n_tgt):
                    u = z[i, j] - p[i, m]
                    if u < 0.0:
                        acc_below += w[i, j]
                        acc_loss += w[i, j] * u * (tau - 1.0)
                    else:
                        acc_loss += w[i, j] * u * tau
                grad[i, m] = acc_below - tau
            loss[i] = acc_loss
    return loss_arr, grad_arr
