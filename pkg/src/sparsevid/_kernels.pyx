# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled policy-gradient kernels; same contract as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


cdef void _row_logp(const double[:, :, ::1] phi, const cnp.uint8_t[:, ::1] mask,
                    const double[::1] theta, Py_ssize_t s, double[::1] out) noexcept nogil:
    cdef Py_ssize_t A = phi.shape[1], D = phi.shape[2], a, d
    cdef double v, top = -INFINITY, z = 0.0
    for a in range(A):
        if mask[s, a]:
            v = 0.0
            for d in range(D):
                v += phi[s, a, d] * theta[d]
            out[a] = v
            if v > top:
                top = v
        else:
            out[a] = -INFINITY
    for a in range(A):
        if mask[s, a]:
            z += exp(out[a] - top)
    z = top + log(z)
    for a in range(A):
        if mask[s, a]:
            out[a] -= z


def policy_logp(phi, mask, theta):
    cdef const double[:, :, ::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    cdef const cnp.uint8_t[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef Py_ssize_t S = ph.shape[0], A = ph.shape[1], s
    out = np.empty((S, A), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for s in range(S):
            _row_logp(ph, m, th, s, o[s])
    return out


def surrogate_grad(phi, mask, actions, theta, old_logp, adv, weight, double eps, double kl_coef):
    cdef const double[:, :, ::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    cdef const cnp.uint8_t[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef const cnp.int64_t[::1] act = np.ascontiguousarray(actions, dtype=np.int64)
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const double[:, ::1] old = np.ascontiguousarray(old_logp, dtype=np.float64)
    cdef const double[::1] A_ = np.ascontiguousarray(adv, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weight, dtype=np.float64)
    cdef Py_ssize_t S = ph.shape[0], NA = ph.shape[1], D = ph.shape[2], s, a, d
    grad_arr = np.zeros(D, dtype=np.float64)
    cdef double[::1] grad = grad_arr
    row_arr = np.empty(NA, dtype=np.float64)
    cdef double[::1] row = row_arr
    cdef double obj = 0.0, kl = 0.0, ratio, clipped, unc, cl, coef, p, po, klc
    cdef int active
    with nogil:
        for s in range(S):
            _row_logp(ph, m, th, s, row)
            ratio = exp(row[act[s]] - old[s, act[s]])
            clipped = ratio
            if clipped < 1.0 - eps:
                clipped = 1.0 - eps
            elif clipped > 1.0 + eps:
                clipped = 1.0 + eps
            unc = ratio * A_[s]
            cl = clipped * A_[s]
            obj += w[s] * (unc if unc < cl else cl)
            if A_[s] >= 0:
                active = ratio <= 1.0 + eps
            else:
                active = ratio >= 1.0 - eps
            coef = w[s] * ratio * A_[s] if active else 0.0
            klc = kl_coef * w[s]
            for a in range(NA):
                if not m[s, a]:
                    continue
                p = exp(row[a])
                po = exp(old[s, a])
                kl += w[s] * po * (old[s, a] - row[a])
                # d/dtheta: coef * (phi_act - E_p[phi]) - klc * (E_p[phi] - E_old[phi])
                for d in range(D):
                    grad[d] += (klc * po - (coef + klc) * p) * ph[s, a, d]
            if coef != 0.0:
                for d in range(D):
                    grad[d] += coef * ph[s, act[s], d]
    return obj, kl, grad_arr


def discounted_return(rewards, double gamma):
    cdef const double[::1] r = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef double total = 0.0, scale = 1.0
    cdef Py_ssize_t i
    for i in range(r.shape[0]):
        total += scale * r[i]
        scale *= gamma
    return total
