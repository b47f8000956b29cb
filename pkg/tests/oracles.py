"""Independent reference implementations used as test oracles.

These are written as plain per-position Python loops, deliberately sharing no
code with the vectorized implementations under test.
"""

import math

import numpy as np


def _vec(a):
    return [float(x) for x in a]


def _matvec(W, b, v):
    return [sum(W[o][j] * v[j] for j in range(len(v))) + (b[o] if b is not None else 0.0)
            for o in range(len(W))]


def _layernorm(v, g, b, eps=1e-5):
    n = len(v)
    mu = sum(v) / n
    var = sum((x - mu) ** 2 for x in v) / n
    return [(x - mu) / math.sqrt(var + eps) * g[i] + b[i] for i, x in enumerate(v)]


def _gelu(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _lora_matvec(arrays, lora, name, bias, v):
    W = arrays[name].tolist()
    out = _matvec(W, arrays[bias].tolist(), v)
    if lora and name in lora:
        A, B = (m.tolist() for m in lora[name])
        u = _matvec(A, None, v)
        d = _matvec(B, None, u)
        out = [o + x for o, x in zip(out, d)]
    return out


def reference_logits(params, tokens, lora=None):
    """Straight-line forward pass: returns a (T, V) array."""
    cfg, a = params.config, params.arrays
    d, H = cfg.width, cfg.heads
    dh = d // H
    xs = [[a["wte"][t][j] + a["wpe"][i][j] for j in range(d)] for i, t in enumerate(tokens)]
    for layer in range(cfg.layers):
        p = f"h{layer}."
        ln1 = [_layernorm(x, a[p + "ln1.g"], a[p + "ln1.b"]) for x in xs]
        qs = [_lora_matvec(a, lora, p + "attn.wq", p + "attn.bq", v) for v in ln1]
        ks = [_lora_matvec(a, lora, p + "attn.wk", p + "attn.bk", v) for v in ln1]
        vs = [_lora_matvec(a, lora, p + "attn.wv", p + "attn.bv", v) for v in ln1]
        outs = []
        for i in range(len(xs)):
            o = [0.0] * d
            for h in range(H):
                sl = range(h * dh, (h + 1) * dh)
                scores = [sum(qs[i][c] * ks[j][c] for c in sl) / math.sqrt(dh)
                          for j in range(i + 1)]
                top = max(scores)
                w = [math.exp(s - top) for s in scores]
                z = sum(w)
                for c in sl:
                    o[c] = sum(w[j] / z * vs[j][c] for j in range(i + 1))
            outs.append(o)
        xs = [[x + y for x, y in zip(xs[i], _matvec(a[p + "attn.wo"].tolist(),
                                                    a[p + "attn.bo"].tolist(), outs[i]))]
              for i in range(len(xs))]
        new = []
        for x in xs:
            m = _layernorm(x, a[p + "ln2.g"], a[p + "ln2.b"])
            hdn = [_gelu(u) for u in _matvec(a[p + "mlp.w1"].tolist(), a[p + "mlp.b1"].tolist(), m)]
            y = _matvec(a[p + "mlp.w2"].tolist(), a[p + "mlp.b2"].tolist(), hdn)
            new.append([u + w for u, w in zip(x, y)])
        xs = new
    out = []
    for x in xs:
        f = _layernorm(x, a["lnf.g"], a["lnf.b"])
        out.append(_matvec(a["lm_head"].tolist(), None, f))
    return np.array(out)


def reference_nll(params, prompt, target, lora=None):
    """Mean over target tokens of -log softmax, one position at a time."""
    seq = list(prompt) + list(target)
    logits = reference_logits(params, seq[:-1], lora)
    total = 0.0
    for j, tok in enumerate(target):
        row = logits[len(prompt) - 1 + j]
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += lse - row[tok]
    return total / len(target)


def lcs_dp(a, b):
    """Textbook O(|a||b|) longest common subsequence length."""
    m, n = len(a), len(b)
    table = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[m][n]


def rouge_l_reference(cand_words, ref_words):
    if not cand_words or not ref_words:
        return 0.0
    lcs = lcs_dp(cand_words, ref_words)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand_words), lcs / len(ref_words)
    return 2 * p * r / (p + r)


def dist_n_reference(texts, n):
    seen, total = set(), 0
    for t in texts:
        toks = t.split()
        for i in range(len(toks) - n + 1):
            seen.add(" ".join(toks[i:i + n]))
            total += 1
    return None if total == 0 else len(seen) / total


def central_difference(f, arrays, name, idx, h=1e-4):
    plus = {k: v.copy() if k == name else v for k, v in arrays.items()}
    minus = {k: v.copy() if k == name else v for k, v in arrays.items()}
    plus[name][idx] += h
    minus[name][idx] -= h
    return (f(plus) - f(minus)) / (2 * h)
