"""Independent plain-numpy oracles shared by several test modules."""
import itertools
import math

import numpy as np


def _ln(x, gain, bias, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _conv(x, w, b, stride):
    # x (T, C); explicit loops over output positions, kernel 3, padding 1
    t = x.shape[0]
    xp = np.vstack([np.zeros((1, x.shape[1])), x, np.zeros((1, x.shape[1]))])
    out = []
    for o in range(0, t, stride):
        out.append(np.concatenate([xp[o], xp[o + 1], xp[o + 2]]) @ w + b)
    return np.array(out)


def _attention(xq, xkv, p, heads):
    d = xq.shape[-1]
    dh = d // heads
    q = xq @ p["wq"] + p["bq"]
    k = xkv @ p["wk"]
    v = xkv @ p["wv"] + p["bv"]
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        s = np.exp(s - s.max(-1, keepdims=True))
        s /= s.sum(-1, keepdims=True)
        out[:, sl] = s @ v[:, sl]
    return out @ p["wo"] + p["bo"]


def plain_encoder(arrays, features, heads, stride, pre_transform=None):
    """Unconditioned encoder: conv front end, positions, pre-norm layers, head.

    ``arrays`` maps parameter names to numpy arrays.  ``pre_transform`` is
    an optional callable applied to the subsampled features before
    positions are added.
    """
    a = arrays
    h = _gelu(_conv(features, a["conv.w1"], a["conv.b1"], 1))
    h = _gelu(_conv(h, a["conv.w2"], a["conv.b2"], stride))
    if pre_transform is not None:
        h = pre_transform(h)
    d = h.shape[1]
    inv = np.exp(-math.log(10000.0) / (d // 2 - 1) * np.arange(d // 2))
    ang = np.arange(h.shape[0])[:, None] * inv[None]
    z = h + np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    layer = 0
    while f"layers.{layer}.ln1_gain" in a:
        pre = f"layers.{layer}."
        attn = {k: a[pre + "attn." + k] for k in ("wq", "bq", "wk", "wv", "bv", "wo", "bo")}
        x = _ln(z, a[pre + "ln1_gain"], a[pre + "ln1_bias"])
        z = z + _attention(x, x, attn, heads)
        x = _ln(z, a[pre + "ln2_gain"], a[pre + "ln2_bias"])
        z = z + _gelu(x @ a[pre + "ff_w1"] + a[pre + "ff_b1"]) @ a[pre + "ff_w2"] + a[pre + "ff_b2"]
        layer += 1
    z = _ln(z, a["ln_post_gain"], a["ln_post_bias"])
    return z @ a["head_w"] + a["head_b"]


def brute_force_window(p, w):
    """Earliest start among windows with the maximal (rounded) sum, by full scan."""
    w = min(w, len(p))
    best, best_start = None, None
    for start in range(len(p) - w + 1):
        s = math.fsum(p[start:start + w])
        if best is None or s > best + 1e-9 * max(1.0, abs(best)):
            best, best_start = s, start
    return best_start


def levenshtein_recursive(ref, hyp, collar):
    """Memoized recursion over (i, j); independent of the iterative tables."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        best = min(go(i + 1, j) + 1, go(i, j + 1) + 1)
        if abs(ref[i][1] - hyp[j][1]) <= collar:
            best = min(best, go(i + 1, j + 1) + (ref[i][0] != hyp[j][0]))
        return best

    return go(0, 0)


def brute_force_tcp(ref_streams, hyp_streams, collar):
    """Minimum over every partial one-to-one pairing (including leaving streams unpaired)."""
    refs = list(ref_streams.values())
    hyps = list(hyp_streams.values())
    best = None
    # assign each hyp stream to a ref index or to None, injectively
    for choice in itertools.product([None] + list(range(len(refs))), repeat=len(hyps)):
        used = [c for c in choice if c is not None]
        if len(used) != len(set(used)):
            continue
        total = 0
        for h, c in enumerate(choice):
            if c is None:
                total += len(hyps[h])
            else:
                total += levenshtein_recursive(tuple(refs[c]), tuple(hyps[h]), collar)
        total += sum(len(refs[r]) for r in range(len(refs)) if r not in used)
        if best is None or total < best:
            best = total
    n_ref = sum(len(r) for r in refs)
    return best, n_ref
