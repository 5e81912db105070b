# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled Hessian/gradient assembly; same contract as ``_kernel_py.assemble``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def assemble(const long long[::1] feat_ptr, const long long[::1] view_pose,
             const double[:, ::1] g, const double[:, ::1] g1, const double[:, ::1] g2,
             const double[:, ::1] d, const double[:, :, ::1] Q, const double[:, ::1] coef,
             Py_ssize_t n_poses):
    cdef Py_ssize_t n6 = 6 * n_poses
    J_arr = np.zeros(n6)
    H_arr = np.zeros((n6, n6))
    cdef double[::1] J = J_arr
    cdef double[:, ::1] H = H_arr
    cdef Py_ssize_t f, va, vb, i, k, ra, rb, a0, a1
    cdef long long pa, pb
    cdef double c1, c2, cd
    cdef Py_ssize_t nf = feat_ptr.shape[0] - 1
    with nogil:
        for f in range(nf):
            c1 = coef[f, 0]
            c2 = coef[f, 1]
            cd = coef[f, 2]
            a0 = feat_ptr[f]
            a1 = feat_ptr[f + 1]
            for va in range(a0, a1):
                pa = view_pose[va]
                if pa < 0:
                    continue
                ra = 6 * pa
                for i in range(6):
                    J[ra + i] += g[va, i]
                    for k in range(6):
                        H[ra + i, ra + k] += Q[va, i, k]
                for vb in range(a0, a1):
                    pb = view_pose[vb]
                    if pb < 0:
                        continue
                    rb = 6 * pb
                    for i in range(6):
                        for k in range(6):
                            H[ra + i, rb + k] += (c1 * g1[va, i] * g1[vb, k]
                                                  + c2 * g2[va, i] * g2[vb, k]
                                                  + cd * d[va, i] * d[vb, k])
    return J_arr, H_arr
