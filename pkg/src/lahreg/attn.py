"""Windowed self-attention with cross-window K/V and overlap-guided cross-attention.

Every block has the pre-norm residual layout::

    O = X_q + MHA(LN(X_q), LN(X_kv))
    X = O + FFN(LN(O))          FFN = linear -> relu -> linear, hidden 4C

Self-attention is the case ``X_kv = X_q``. The group transformer widens
``X_kv`` of each window with the rows of a few randomly chosen other
windows; the interaction transformer lets windows of two clouds attend to
each other, paired through an overlap matrix of window descriptors.
"""

from dataclasses import dataclass

import numpy as np

from lahreg import autodiff as ad
from lahreg.hashwin import gather_windows, unpartition
from lahreg.validation import check_positive_int, check_seed

BLOCK_KEYS = (
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
)  # fmt: skip


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    head_dim: int
    window_points: int
    cross_window_count: int = 2
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.heads, "heads")
        check_positive_int(self.head_dim, "head_dim")
        check_positive_int(self.window_points, "window_points")
        check_positive_int(self.cross_window_count, "cross_window_count", minimum=0)
        check_seed(self.seed)

    @property
    def width(self):
        return self.heads * self.head_dim


def init_block_params(width, rng, hidden_mult=4):
    """Randomly initialized parameters of one attention block.

    Weights are drawn from N(0, 1/fan_in); layer-norm gains start at one and
    all biases at zero.
    """
    hidden = hidden_mult * width

    def w(n_in, n_out):
        return ad.Tensor(rng.standard_normal((n_in, n_out)) / np.sqrt(n_in), True)

    def const(n, v):
        return ad.Tensor(np.full(n, v), True)

    return {
        "ln1_g": const(width, 1.0), "ln1_b": const(width, 0.0),
        "wq": w(width, width), "bq": const(width, 0.0),
        "wk": w(width, width), "bk": const(width, 0.0),
        "wv": w(width, width), "bv": const(width, 0.0),
        "wo": w(width, width), "bo": const(width, 0.0),
        "ln2_g": const(width, 1.0), "ln2_b": const(width, 0.0),
        "w1": w(width, hidden), "b1": const(hidden, 0.0),
        "w2": w(hidden, width), "b2": const(width, 0.0),
    }  # fmt: skip


def _check_block(x, params, heads):
    width = params["wq"].shape[0]
    if x.shape[1] != width:
        raise ValueError(f"feature width {x.shape[1]} does not match block width {width}")
    if width % heads:
        raise ValueError(f"width {width} is not divisible by {heads} heads")


def multi_head_attention(q_in, kv_in, params, heads):
    """Scaled dot-product attention over ``heads`` column groups.

    Returns the projected output and the per-head attention matrices.
    """
    width = params["wq"].shape[0]
    d = width // heads
    Q = ad.linear(q_in, params["wq"], params["bq"])
    K = ad.linear(kv_in, params["wk"], params["bk"])
    V = ad.linear(kv_in, params["wv"], params["bv"])
    outs, weights = [], []
    inv_sqrt_d = 1.0 / np.sqrt(d)
    for h in range(heads):
        lo, hi = h * d, (h + 1) * d
        logits = ad.scale(
            ad.matmul(ad.slice_cols(Q, lo, hi), ad.transpose(ad.slice_cols(K, lo, hi))),
            inv_sqrt_d,
        )
        A = ad.softmax_rows(logits)
        weights.append(A.data)
        outs.append(ad.matmul(A, ad.slice_cols(V, lo, hi)))
    merged = outs[0] if heads == 1 else ad.concat_cols(outs)
    return ad.linear(merged, params["wo"], params["bo"]), weights


def attention_block(x_q, x_kv, params, heads):
    """One pre-norm residual attention + FFN block; output shaped like ``x_q``."""
    _check_block(x_q, params, heads)
    _check_block(x_kv, params, heads)
    q_in = ad.layer_norm_rows(x_q, params["ln1_g"], params["ln1_b"])
    kv_in = q_in if x_kv is x_q else ad.layer_norm_rows(x_kv, params["ln1_g"], params["ln1_b"])
    attn, _ = multi_head_attention(q_in, kv_in, params, heads)
    O = ad.add(x_q, attn)
    h = ad.relu(ad.linear(ad.layer_norm_rows(O, params["ln2_g"], params["ln2_b"]), params["w1"], params["b1"]))
    return ad.add(O, ad.linear(h, params["w2"], params["b2"]))


def mhsa_block(window, params, heads):
    """Self-attention block over the rows of one window."""
    return attention_block(ad.as_tensor(window), ad.as_tensor(window), params, heads)


def cross_window_sample(n_windows, cross_window_count, seed):
    """For each window, ``cross_window_count`` distinct other windows.

    Sampled uniformly without replacement; when fewer other windows exist,
    all of them are used. Lists are returned in ascending order.
    """
    check_positive_int(n_windows, "n_windows")
    check_positive_int(cross_window_count, "cross_window_count", minimum=0)
    rng = np.random.default_rng(seed)
    k = min(cross_window_count, n_windows - 1)
    out = []
    for i in range(n_windows):
        if k == 0:
            out.append(np.empty(0, dtype=np.int64))
            continue
        others = np.delete(np.arange(n_windows), i)
        out.append(np.sort(rng.choice(others, size=k, replace=False)))
    return out


def group_transformer(F, part, config, params, cross_windows=None):
    """Windowed self-attention whose keys/values include sampled other windows.

    Queries come from each window's own rows; keys and values from those rows
    followed by the rows of the sampled windows. ``cross_windows`` overrides
    the seeded sampling with explicit per-window lists.
    """
    F = ad.as_tensor(F)
    if F.shape[1] != config.width:
        raise ValueError(f"feature width {F.shape[1]} != heads*head_dim {config.width}")
    if part.window_size is not None and part.window_size != config.window_points:
        raise ValueError(
            f"partition window size {part.window_size} != configured {config.window_points}"
        )
    windows = gather_windows(F, part)
    n = len(windows)
    if cross_windows is None:
        cross_windows = cross_window_sample(n, config.cross_window_count, config.seed)
    elif len(cross_windows) != n:
        raise ValueError("cross_windows needs one list per window")
    out = []
    for i, win in enumerate(windows):
        extra = [windows[j] for j in cross_windows[i]]
        kv = win if not extra else ad.concat_rows([win, *extra])
        out.append(attention_block(win, kv, params, config.heads))
    return unpartition(out, part)


def window_global_descriptors(windows):
    """Channel-wise max over each window, L2-normalized (rows of zeros stay zero)."""
    rows = []
    for i, w in enumerate(windows):
        arr = w.data if isinstance(w, ad.Tensor) else np.asarray(w, dtype=np.float64)
        if arr.shape[0] == 0:
            raise ValueError(f"window {i} is empty")
        rows.append(arr.max(axis=0))
    G = np.stack(rows)
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    return G / np.where(norms > 0, norms, 1.0)


def overlap_matrix(G_p, G_q):
    G_p = np.asarray(G_p, dtype=np.float64)
    G_q = np.asarray(G_q, dtype=np.float64)
    if G_p.ndim != 2 or G_q.ndim != 2 or G_p.shape[1] != G_q.shape[1]:
        raise ValueError(f"descriptor width mismatch: {G_p.shape} vs {G_q.shape}")
    return G_p @ G_q.T


def match_windows(W):
    """Union of row-wise and column-wise argmax pairs, sorted.

    Every window on either side appears in at least one pair. Ties go to the
    lowest index.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size == 0:
        raise ValueError("overlap matrix must be a non-empty 2-D array")
    pairs = {(i, int(j)) for i, j in enumerate(W.argmax(axis=1))}
    pairs |= {(int(i), j) for j, i in enumerate(W.argmax(axis=0))}
    return sorted(pairs)


def interaction_transformer(F_p, part_p, F_q, part_q, config, params, return_info=False):
    """Bidirectional cross-attention between overlap-matched windows.

    Each window of one cloud attends to the concatenated rows of all windows
    of the other cloud it is paired with. Both directions read the features
    as they were before this block, and share the same parameters.
    """
    F_p, F_q = ad.as_tensor(F_p), ad.as_tensor(F_q)
    for F, part in ((F_p, part_p), (F_q, part_q)):
        if F.shape[1] != config.width:
            raise ValueError(f"feature width {F.shape[1]} != heads*head_dim {config.width}")
        if part.window_size is not None and part.window_size != config.window_points:
            raise ValueError(
                f"partition window size {part.window_size} != configured {config.window_points}"
            )
    wp = gather_windows(F_p, part_p)
    wq = gather_windows(F_q, part_q)
    W = overlap_matrix(window_global_descriptors(wp), window_global_descriptors(wq))
    pairs = match_windows(W)
    partners_p = [[] for _ in wp]
    partners_q = [[] for _ in wq]
    for i, j in pairs:
        partners_p[i].append(j)
        partners_q[j].append(i)

    def update(own, other, partners):
        out = []
        for win, js in zip(own, partners):
            if not js:
                out.append(win)
                continue
            kv = other[js[0]] if len(js) == 1 else ad.concat_rows([other[j] for j in js])
            out.append(attention_block(win, kv, params, config.heads))
        return out

    new_p = unpartition(update(wp, wq, partners_p), part_p)
    new_q = unpartition(update(wq, wp, partners_q), part_q)
    if return_info:
        return new_p, new_q, {"overlap": W, "pairs": pairs}
    return new_p, new_q
