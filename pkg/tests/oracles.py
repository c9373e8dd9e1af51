"""Independent reference computations used by several test modules."""

import itertools
import math

import numpy as np

from jacolip.models import forward


def loop_gcn_jacobian(a, w1, w2, m1, i):
    """[J_i]_{jf} = sum_k A_ik A_ki sum_c M_kc W1_fc W2_cj, written as explicit loops."""
    n = a.shape[0]
    f_in, hid = w1.shape
    f_out = w2.shape[1]
    out = np.zeros((f_out, f_in))
    for j in range(f_out):
        for f in range(f_in):
            total = 0.0
            for k in range(n):
                coef = a[i, k] * a[k, i]
                if coef == 0.0:
                    continue
                for c in range(hid):
                    total += coef * m1[k, c] * w1[f, c] * w2[c, j]
            out[j, f] = total
    return out


def fd_node_jacobian(model, a_hat, x, i, eps=1e-6):
    """Central differences of Y_i with respect to X_i."""
    x = np.array(x, dtype=np.float64)
    f_out = model.layers[-1].out_dim
    out = np.zeros((f_out, x.shape[1]))
    for f in range(x.shape[1]):
        xp, xm = x.copy(), x.copy()
        xp[i, f] += eps
        xm[i, f] -= eps
        yp, _ = forward(model, a_hat, xp)
        ym, _ = forward(model, a_hat, xm)
        out[:, f] = (yp[i] - ym[i]) / (2 * eps)
    return out



def _candidates(n, i):
    return [j for j in range(n) if j != i]


def ranked_by_scores(s_y_row, i):
    """Candidates of node i, best first; ties go to the lower index."""
    return sorted(_candidates(len(s_y_row), i), key=lambda j: (-s_y_row[j], j))


def clip_rel(v):
    return min(max(float(v), 0.0), 1.0)


def gain(rel):
    # numpy's exp2 and libm's pow differ in the last bit for some inputs; the
    # exactness checks compare rankings, so both sides share this primitive
    return float(np.exp2(clip_rel(rel))) - 1.0


def dcg_of(order, rel, k):
    total = 0.0
    for p, j in enumerate(order[:k]):
        total += gain(rel[j]) / math.log2(p + 2.0)
    return total


def brute_ndcg(s_g, s_y, k):
    n = s_g.shape[0]
    out = []
    for i in range(n):
        best = max(dcg_of(list(p), s_g[i], k) for p in itertools.permutations(_candidates(n, i), k))
        got = dcg_of(ranked_by_scores(s_y[i], i), s_g[i], k)
        out.append(got / best if best > 0 else 1.0)
    return np.array(out)


def err_of(order, rel, k, rel_max):
    total, stay = 0.0, 1.0
    for p, j in enumerate(order[:k]):
        r = gain(rel[j]) / float(np.exp2(rel_max))
        total += stay * r / (p + 1.0)
        stay *= 1.0 - r
    return total


def direct_err(s_g, s_y, k):
    n = s_g.shape[0]
    out = []
    for i in range(n):
        cands = _candidates(n, i)
        rel_max = max(clip_rel(s_g[i, j]) for j in cands)
        ideal_order = sorted(cands, key=lambda j: -clip_rel(s_g[i, j]))
        ideal = err_of(ideal_order, s_g[i], k, rel_max)
        got = err_of(ranked_by_scores(s_y[i], i), s_g[i], k, rel_max)
        out.append(got / ideal if ideal > 0 else 1.0)
    return np.array(out)


def brute_max_err(s_g, k):
    n = s_g.shape[0]
    out = []
    for i in range(n):
        cands = _candidates(n, i)
        rel_max = max(clip_rel(s_g[i, j]) for j in cands)
        out.append(max(err_of(list(p), s_g[i], k, rel_max) for p in itertools.permutations(cands, k)))
    return np.array(out)


def pair_count_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))
