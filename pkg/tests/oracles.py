"""Reference implementations written independently of the library.

Plain loops and scalar ``math`` only; nothing here imports slicekit.
"""

import math


def slc(areas, selected, delta, eps=1e-6):
    """Literal coverage / proximity-weight / weighted-mean transcription."""
    n = len(areas)
    a_star = max(areas)
    if a_star <= 0:
        return None
    s_star = areas.index(a_star)
    if not selected:
        return 0.0
    num = 0.0
    den = 0.0
    for s in sorted(selected):
        c = areas[s] / (a_star + eps)
        w = math.exp(-(abs(s - s_star) / n) / delta)
        num += c * w
        den += w
    return num / den


def roc_auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def average_precision_enum(scores, labels):
    n_pos = sum(labels)
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        pred = sum(1 for s in scores if s >= t)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / pred)
        prev_recall = recall
    return ap


def confusion(scores, labels, threshold):
    tp = fp = fn = 0
    for s, y in zip(scores, labels):
        if s >= threshold and y == 1:
            tp += 1
        elif s >= threshold:
            fp += 1
        elif y == 1:
            fn += 1
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def view_slice(vol, view, i):
    """Element-wise slice extraction; ``vol`` is a nested list [x][y][z]."""
    h, w, d = len(vol), len(vol[0]), len(vol[0][0])
    if view == "axial":
        return [[vol[r][c][i] for c in range(w)] for r in range(h)]
    if view == "coronal":
        # G[a][b] = V[a][i][b], shape (H, D); counter-clockwise: out[r][c] = G[c][D-1-r]
        return [[vol[c][i][d - 1 - r] for c in range(h)] for r in range(d)]
    # G = transpose(V[i]), G[a][b] = V[i][b][a], shape (D, W); out[r][c] = G[c][W-1-r]
    return [[vol[i][w - 1 - r][c] for c in range(d)] for r in range(w)]


def percentile(values, q):
    xs = sorted(values)
    pos = q / 100 * (len(xs) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (pos - lo) * (xs[hi] - xs[lo])


def ellipsoid_count(dims, center, radii):
    count = 0
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                q = sum(((v - c) / r) ** 2 for v, c, r in zip((i, j, k), center, radii))
                if q <= 1.0:
                    count += 1
    return count


def matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))]
            for i in range(len(a))]


def attention_single_head(f, w_q, w_k, w_v):
    q, k, v = matmul(f, w_q), matmul(f, w_k), matmul(f, w_v)
    d = len(w_q[0])
    out = []
    for i in range(len(f)):
        scores = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) for j in range(len(f))]
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        z = sum(e)
        out.append([sum(e[j] / z * v[j][c] for j in range(len(f))) for c in range(len(v[0]))])
    return out


def layer_norm(rows, gain, bias, eps=1e-5):
    out = []
    for row in rows:
        mu = sum(row) / len(row)
        var = sum((x - mu) ** 2 for x in row) / len(row)
        out.append([(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(row, gain, bias)])
    return out


def fusion(f, w_q, w_k, w_v, gain, bias, w1, b1, w2, b2):
    att = attention_single_head(f, w_q, w_k, w_v)
    resid = [[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(f, att)]
    normed = layer_norm(resid, gain, bias)
    hidden = [[max(0.0, x + b) for x, b in zip(row, b1)] for row in matmul(normed, w1)]
    return [[x + b for x, b in zip(row, b2)] for row in matmul(hidden, w2)]


def dense_head(x, weights, biases):
    """Single-layer sigmoid head: y_j = sigmoid(sum_i x_i W_ij + b_j)."""
    out = []
    for j in range(len(biases)):
        z = sum(x[i] * weights[i][j] for i in range(len(x))) + biases[j]
        out.append(1.0 / (1.0 + math.exp(-z)))
    return out
