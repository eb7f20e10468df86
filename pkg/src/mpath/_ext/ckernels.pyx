# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled token-sequence kernels used by the text metrics."""

from libc.stdlib cimport calloc, free


def lcs_length(const long long[::1] a, const long long[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef int *prev
    cdef int *cur
    cdef int *tmp
    cdef int best
    if n == 0 or m == 0:
        return 0
    prev = <int *> calloc(m + 1, sizeof(int))
    cur = <int *> calloc(m + 1, sizeof(int))
    if prev == NULL or cur == NULL:
        free(prev)
        free(cur)
        raise MemoryError()
    for i in range(n):
        for j in range(m):
            if a[i] == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                best = prev[j + 1]
                if cur[j] > best:
                    best = cur[j]
                cur[j + 1] = best
        tmp = prev
        prev = cur
        cur = tmp
    best = prev[m]
    free(prev)
    free(cur)
    return best


def ngram_matches(const long long[::1] cand, const long long[::1] ref, int n):
    """Clipped n-gram match count and total candidate n-grams."""
    cdef Py_ssize_t nc = cand.shape[0] - n + 1, nr = ref.shape[0] - n + 1, i, j, k
    cdef char *used
    cdef int matches = 0
    cdef bint same
    if nc <= 0:
        return 0, 0
    if nr <= 0:
        return 0, nc
    used = <char *> calloc(nr, sizeof(char))
    if used == NULL:
        raise MemoryError()
    for i in range(nc):
        for j in range(nr):
            if used[j]:
                continue
            same = True
            for k in range(n):
                if cand[i + k] != ref[j + k]:
                    same = False
                    break
            if same:
                used[j] = 1
                matches += 1
                break
    free(used)
    return matches, nc
