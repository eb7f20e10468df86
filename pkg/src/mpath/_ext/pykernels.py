"""Pure-Python versions of the compiled metric kernels (same signatures)."""

from collections import Counter


def lcs_length(a, b) -> int:
    if not len(a) or not len(b):
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def ngram_matches(cand, ref, n: int) -> tuple[int, int]:
    cand, ref = list(cand), list(ref)
    total = max(len(cand) - n + 1, 0)
    if total == 0:
        return 0, 0
    c = Counter(tuple(cand[i : i + n]) for i in range(total))
    r = Counter(tuple(ref[i : i + n]) for i in range(max(len(ref) - n + 1, 0)))
    return sum(min(k, r[g]) for g, k in c.items()), total
