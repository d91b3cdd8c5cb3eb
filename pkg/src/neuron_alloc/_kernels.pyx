# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched matmul with a fixed summation order.

Every output element is accumulated as ``((0 + a0*b0) + a1*b1) + ...`` in
the array dtype, the same sequence the pure-numpy fallback performs, so the
two backends agree bit-for-bit.
"""

ctypedef fused real:
    float
    double


def bmm_into(const real[:, :, ::1] a, const real[:, :, ::1] b, real[:, :, ::1] out):
    cdef Py_ssize_t nb = a.shape[0]
    cdef Py_ssize_t n = a.shape[1]
    cdef Py_ssize_t kk = a.shape[2]
    cdef Py_ssize_t m = b.shape[2]
    cdef Py_ssize_t p, i, k, j
    cdef real aik
    if b.shape[0] != nb or b.shape[1] != kk:
        raise ValueError("bmm: inner or batch dimensions disagree")
    if out.shape[0] != nb or out.shape[1] != n or out.shape[2] != m:
        raise ValueError("bmm: output buffer has the wrong shape")
    with nogil:
        for p in range(nb):
            for i in range(n):
                for j in range(m):
                    out[p, i, j] = 0
                for k in range(kk):
                    aik = a[p, i, k]
                    for j in range(m):
                        out[p, i, j] = out[p, i, j] + aik * b[p, k, j]
