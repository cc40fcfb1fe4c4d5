"""Objective-conditioned sequence recommendation model.

Data flow: a feature encoder embeds the user id, the two normalized
objective values, and the GRU-encoded interaction history; a step
transformer (full self-attention over those four tokens) refines them; the
refined tokens concatenate through an MLP into the control vector, and the
history embedding maps through a second MLP into the initial state.  A
causal sequence transformer then consumes [control, state, target
embeddings] with learned positions, and an affine decoder turns each hidden
state into next-item logits.

All array math runs on the autodiff core; parameters live in a flat
{name: ndarray} dict so one checkpoint file (npz with a JSON config entry)
captures the whole model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelConfig:
    num_users: int
    vocab: int
    d_model: int = 32
    layers: int = 1
    n_heads: int = 2
    horizon: int = 10
    max_hist: int = 50
    num_objectives: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.horizon < 2 or self.layers < 1:
            raise ValueError("need horizon >= 2 and layers >= 1")


def _layer_shapes(cfg):
    d, dh = cfg.d_model, cfg.d_model // cfg.n_heads
    shapes = {"ln1_g": (d,), "ln1_b": (d,), "ln2_g": (d,), "ln2_b": (d,),
              "wo": (d, d), "bo": (d,),
              "ff_w1": (d, 4 * d), "ff_b1": (4 * d,),
              "ff_w2": (4 * d, d), "ff_b2": (d,)}
    for h in range(cfg.n_heads):
        shapes[f"h{h}_wq"] = (d, dh)
        shapes[f"h{h}_wk"] = (d, dh)
        shapes[f"h{h}_wv"] = (d, dh)
    return shapes


def param_shapes(cfg):
    d = cfg.d_model
    shapes = {
        "user_emb": (cfg.num_users, d),
        "item_emb": (cfg.vocab, d),
        "obj_w": (cfg.num_objectives, d),
        "obj_b": (cfg.num_objectives, d),
        "ctrl_w1": ((cfg.num_objectives + 2) * d, d), "ctrl_b1": (d,),
        "ctrl_w2": (d, d), "ctrl_b2": (d,),
        "state_w1": (d, d), "state_b1": (d,),
        "state_w2": (d, d), "state_b2": (d,),
        "pos": (cfg.horizon + 2, d),
        "dec_w": (d, cfg.vocab), "dec_b": (cfg.vocab,),
    }
    for gate in ("z", "r", "h"):
        shapes[f"gru_w{gate}"] = (d, d)
        shapes[f"gru_u{gate}"] = (d, d)
        shapes[f"gru_b{gate}"] = (d,)
    for block in ("step", "seq"):
        for l in range(cfg.layers):
            for k, s in _layer_shapes(cfg).items():
                shapes[f"{block}{l}_{k}"] = s
    return shapes


def param_count(cfg):
    """Closed-form parameter count for a config.

    tables: (U + V + 2*num_obj) * d; GRU: 3*(2d^2 + d); MLPs: control
    ((no+2)d^2 + d^2 + 2d) and state (2d^2 + 2d); each transformer layer:
    3d^2 (qkv) + d^2 + d (output) + 8d^2 + 5d (ff) + 4d (norms); positions:
    (H+2)d; decoder: dV + V.
    """
    d, no = cfg.d_model, cfg.num_objectives
    tables = (cfg.num_users + cfg.vocab + 2 * no) * d
    gru = 3 * (2 * d * d + d)
    ctrl = (no + 2) * d * d + d + d * d + d
    state = 2 * d * d + 2 * d
    layer = 3 * d * d + d * d + d + 8 * d * d + 5 * d + 4 * d
    pos = (cfg.horizon + 2) * d
    dec = d * cfg.vocab + cfg.vocab
    return tables + gru + ctrl + state + 2 * cfg.layers * layer + pos + dec


def init_params(cfg):
    """Seeded init: uniform(+-1/sqrt(d)) for weights and tables, zeros for
    biases and the decoder, ones for layer-norm gains."""
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / np.sqrt(cfg.d_model)
    params = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        tail = name.rsplit("_", 1)[-1]
        if "ln" in name and tail == "g":
            params[name] = np.ones(shape)
        elif name.startswith("dec_") or tail.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


class Model:
    """Config plus flat parameter dict; immutable during evaluation."""

    def __init__(self, cfg, params=None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        expected = param_shapes(cfg)
        if set(self.params) != set(expected):
            raise ValueError("parameter names do not match config")
        for k, v in self.params.items():
            if v.shape != expected[k]:
                raise ValueError(f"parameter {k}: shape {v.shape} != {expected[k]}")

    def param_nodes(self):
        return {k: ad.leaf(v) for k, v in self.params.items()}

    def save(self, path):
        meta = {"format": CHECKPOINT_FORMAT, "config": asdict(self.cfg)}
        np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)),
                 **self.params)

    @classmethod
    def load(cls, path):
        data = np.load(path, allow_pickle=False)
        meta = json.loads(str(data["__meta__"]))
        if meta["format"] != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta['format']}")
        cfg = ModelConfig(**meta["config"])
        params = {k: data[k] for k in data.files if k != "__meta__"}
        return cls(cfg, params)


# ---------------------------------------------------------------------------
# forward components (batched; pn is the {name: leaf Node} dict)


def _affine(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def gru_step(pn, h, x):
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, pn["gru_wz"]),
                                 ad.matmul(h, pn["gru_uz"])), pn["gru_bz"]))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, pn["gru_wr"]),
                                 ad.matmul(h, pn["gru_ur"])), pn["gru_br"]))
    n = ad.tanh(ad.add(ad.add(ad.matmul(x, pn["gru_wh"]),
                              ad.matmul(ad.mul(r, h), pn["gru_uh"])), pn["gru_bh"]))
    one = ad.const(1.0)
    return ad.add(ad.mul(ad.sub(one, z), h), ad.mul(z, n))


def encode_history(model, pn, histories):
    """GRU over each history (most recent last), batched with masking.

    histories: list of item-id lists.  Empty histories yield the zero
    vector.  Each list is truncated to the final max_hist items.
    """
    cfg = model.cfg
    b = len(histories)
    clipped = [list(h)[-cfg.max_hist:] for h in histories]
    tmax = max((len(h) for h in clipped), default=0)
    h = ad.const(np.zeros((b, cfg.d_model)))
    if tmax == 0:
        return h
    idx = np.zeros((b, tmax), dtype=np.int64)
    mask = np.zeros((b, tmax, 1))
    for i, items in enumerate(clipped):
        idx[i, :len(items)] = items
        mask[i, :len(items), 0] = 1.0
    for t in range(tmax):
        x = ad.row_select(pn["item_emb"], idx[:, t])
        h_new = gru_step(pn, h, x)
        m = ad.const(mask[:, t])
        h = ad.add(ad.mul(m, h_new), ad.mul(ad.sub(ad.const(1.0), m), h))
    return h


def _tx_layer(x, pn, prefix, cfg, mask=None):
    """Pre-norm transformer layer: x + MHA(LN(x)), then x + FF(LN(x))."""
    dh = cfg.d_model // cfg.n_heads
    inv = ad.const(1.0 / np.sqrt(dh))
    h = ad.layer_norm(x, pn[f"{prefix}_ln1_g"], pn[f"{prefix}_ln1_b"])
    heads = []
    for i in range(cfg.n_heads):
        q = ad.matmul(h, pn[f"{prefix}_h{i}_wq"])
        k = ad.matmul(h, pn[f"{prefix}_h{i}_wk"])
        v = ad.matmul(h, pn[f"{prefix}_h{i}_wv"])
        scores = ad.mul(ad.matmul(q, ad.swap_last(k)), inv)
        if mask is not None:
            scores = ad.add(scores, ad.const(mask))
        heads.append(ad.matmul(ad.softmax(scores), v))
    attn = _affine(ad.concat(heads, axis=-1), pn[f"{prefix}_wo"], pn[f"{prefix}_bo"])
    x = ad.add(x, attn)
    h2 = ad.layer_norm(x, pn[f"{prefix}_ln2_g"], pn[f"{prefix}_ln2_b"])
    ff = _affine(ad.tanh(_affine(h2, pn[f"{prefix}_ff_w1"], pn[f"{prefix}_ff_b1"])),
                 pn[f"{prefix}_ff_w2"], pn[f"{prefix}_ff_b2"])
    return ad.add(x, ff)


def causal_mask(t):
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = -1e9
    return m


def step_transform(model, pn, users, points, hist_vec):
    """Refine [user, objective 1, objective 2, history] tokens; returns (B, 4, d)."""
    cfg = model.cfg
    b = len(users)
    u = ad.row_select(pn["user_emb"], np.asarray(users, dtype=np.int64))
    pts = np.asarray(points, dtype=np.float64).reshape(b, cfg.num_objectives)
    tokens = [ad.reshape(u, (b, 1, cfg.d_model))]
    for j in range(cfg.num_objectives):
        w = ad.row_select(pn["obj_w"], np.array([j]))
        bj = ad.row_select(pn["obj_b"], np.array([j]))
        e = ad.tanh(ad.add(ad.mul(ad.const(pts[:, j:j + 1]), w), bj))
        tokens.append(ad.reshape(e, (b, 1, cfg.d_model)))
    tokens.append(ad.reshape(hist_vec, (b, 1, cfg.d_model)))
    x = ad.concat(tokens, axis=1)
    for l in range(cfg.layers):
        x = _tx_layer(x, pn, f"step{l}", cfg)
    return x


def control_signal(model, pn, step_out):
    """Concatenate the four refined tokens and pass them through the MLP."""
    cfg = model.cfg
    b = step_out.shape[0]
    flat = ad.reshape(step_out, (b, (cfg.num_objectives + 2) * cfg.d_model))
    hidden = ad.tanh(_affine(flat, pn["ctrl_w1"], pn["ctrl_b1"]))
    return _affine(hidden, pn["ctrl_w2"], pn["ctrl_b2"])


def init_state(model, pn, hist_vec):
    hidden = ad.tanh(_affine(hist_vec, pn["state_w1"], pn["state_b1"]))
    return _affine(hidden, pn["state_w2"], pn["state_b2"])


def sequence_logits(model, pn, ctrl, state, fed_items):
    """Run the causal sequence transformer over [ctrl, state, item tokens].

    fed_items is a (B, K) int array of teacher-forced or generated items
    (K may be 0).  Returns logits (B, K+2, vocab) for every position.
    """
    cfg = model.cfg
    b = ctrl.shape[0]
    fed_items = np.asarray(fed_items, dtype=np.int64).reshape(b, -1)
    k = fed_items.shape[1]
    tokens = [ad.reshape(ctrl, (b, 1, cfg.d_model)),
              ad.reshape(state, (b, 1, cfg.d_model))]
    if k:
        tokens.append(ad.row_select(pn["item_emb"], fed_items))
    x = ad.concat(tokens, axis=1)
    t = k + 2
    if t > cfg.horizon + 2:
        raise ValueError(f"sequence length {t} exceeds positional table")
    x = ad.add(x, ad.row_select(pn["pos"], np.arange(t)))
    for l in range(cfg.layers):
        x = _tx_layer(x, pn, f"seq{l}", cfg, mask=causal_mask(t))
    return _affine(x, pn["dec_w"], pn["dec_b"])


def forward_window(model, pn, users, histories, points, targets):
    """Teacher-forced logits (B, H, vocab) for H-item target windows."""
    cfg = model.cfg
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 2 or targets.shape[1] != cfg.horizon:
        raise ValueError(f"targets must be (B, {cfg.horizon}), got {targets.shape}")
    hist = encode_history(model, pn, histories)
    ctrl = control_signal(model, pn, step_transform(model, pn, users, points, hist))
    state = init_state(model, pn, hist)
    logits = sequence_logits(model, pn, ctrl, state, targets[:, :-1])
    return ad.select_steps(logits, np.arange(1, cfg.horizon + 1))


def nll_loss(model, pn, users, histories, points, targets):
    """Mean negative log-likelihood of the H target items per window."""
    cfg = model.cfg
    targets = np.asarray(targets, dtype=np.int64)
    logits = forward_window(model, pn, users, histories, points, targets)
    b = targets.shape[0]
    flat = ad.reshape(logits, (b * cfg.horizon, cfg.vocab))
    return ad.cross_entropy_logits(flat, targets.reshape(-1))
