"""Completion of hand motion over frames where the hand left the view.

Gap frames are first filled by interpolation (linear for translation and
shape, SLERP per joint for rotations). A small transformer encoder then
predicts residual corrections on gap frames only, so visible frames always
pass through untouched. The encoder and its backward pass are plain numpy.

Checkpoint layout (little endian)::

    b"HWIF"  u32 version
    u32 x 7  d_model, n_layers, n_heads, d_ffn, window, n_in, n_out
    u32      n_arrays
    per array: u32 ndim, u32 x ndim shape, float64 x prod(shape) row-major

Arrays are stored in :meth:`InfillerModel.names` order: the three
normalization buffers followed by all trainable parameters.
"""

import io
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .canonical import world_to_canonical
from .errors import (CheckpointError, DivergedLoss, EmptyDataset, FrameTagMismatch, ModelUninitialized,
                     NoContext, WindowTooLong)
from .geometry import aa_to_quat, quat_to_aa, slerp
from .hand import N_ARTICULATED, STATE_DIM

MAGIC = b"HWIF"
VERSION = 1
N_IN = STATE_DIM + 1  # state vector plus a visibility bit
LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)

# column blocks of a state vector
SL_PHI = slice(0, 3)
SL_THETA = slice(3, 3 + 3 * N_ARTICULATED)
SL_BETA = slice(48, 58)
SL_GAMMA = slice(58, 61)
ROT_COLS = np.arange(0, 48)


@dataclass
class GapSet:
    """Maximal invisible runs as inclusive ``(start, end)`` pairs.

    ``context[i]`` is ``(left, right)``: the visible frames bracketing gap
    ``i``, with -1 where the gap touches a sequence end.
    """

    gaps: list
    context: list
    length: int

    def __len__(self):
        return len(self.gaps)

    def frame_mask(self):
        m = np.zeros(self.length, dtype=bool)
        for s, e in self.gaps:
            m[s:e + 1] = True
        return m


@dataclass(frozen=True)
class InfillLossWeights:
    """Per-term L1 weights for translation, global orientation, articulation and shape."""

    translation: float = 0.05
    orientation: float = 2.0
    articulation: float = 2.0
    shape: float = 0.05

    def __post_init__(self):
        if min(self.translation, self.orientation, self.articulation, self.shape) < 0:
            raise ValueError("loss weights must be nonnegative")

    def column_weights(self):
        w = np.empty(STATE_DIM)
        w[SL_PHI] = self.orientation
        w[SL_THETA] = self.articulation
        w[SL_BETA] = self.shape
        w[SL_GAMMA] = self.translation
        return w


def detect_gaps(seq):
    vis = np.asarray(seq.visible, dtype=bool)
    T = vis.size
    gaps, ctx = [], []
    t = 0
    while t < T:
        if vis[t]:
            t += 1
            continue
        s = t
        while t < T and not vis[t]:
            t += 1
        e = t - 1
        gaps.append((s, e))
        ctx.append((s - 1 if s > 0 else -1, e + 1 if e + 1 < T else -1))
    return GapSet(gaps, ctx, T)


def _check_context(seq):
    if not np.any(seq.visible):
        raise NoContext("no visible frame to fill from")


def interpolate_init(seq, gaps=None):
    """Fill gaps by interpolation between the bracketing visible frames.

    Translation and shape are linear in time and rotations (global and per
    joint) follow SLERP. A gap touching either end holds its single anchor.
    """
    _check_context(seq)
    gaps = detect_gaps(seq) if gaps is None else gaps
    phi = seq.phi.copy()
    theta = seq.theta.copy()
    beta = seq.beta.copy()
    gamma = seq.gamma.copy()
    for (s, e), (lo, hi) in zip(gaps.gaps, gaps.context):
        idx = np.arange(s, e + 1)
        if lo >= 0 and hi >= 0:
            u = (idx - lo) / float(hi - lo)
            gamma[idx] = (1 - u)[:, None] * seq.gamma[lo] + u[:, None] * seq.gamma[hi]
            beta[idx] = (1 - u)[:, None] * seq.beta[lo] + u[:, None] * seq.beta[hi]
            rots = np.concatenate([seq.phi[:, None], seq.theta], axis=1)  # (T,16,3)
            q0 = aa_to_quat(rots[lo])
            q1 = aa_to_quat(rots[hi])
            q = slerp(q0[None], q1[None], u[:, None])
            aa = quat_to_aa(q)
            phi[idx] = aa[:, 0]
            theta[idx] = aa[:, 1:]
        else:
            src = lo if lo >= 0 else hi
            phi[idx] = seq.phi[src]
            theta[idx] = seq.theta[src]
            beta[idx] = seq.beta[src]
            gamma[idx] = seq.gamma[src]
    return seq.replace(phi=phi, theta=theta, beta=beta, gamma=gamma, visible=seq.visible.copy())


def last_pose_fill(seq, gaps=None):
    """Hold the last visible state across each gap (the next one for leading gaps)."""
    _check_context(seq)
    gaps = detect_gaps(seq) if gaps is None else gaps
    phi = seq.phi.copy()
    theta = seq.theta.copy()
    beta = seq.beta.copy()
    gamma = seq.gamma.copy()
    for (s, e), (lo, hi) in zip(gaps.gaps, gaps.context):
        src = lo if lo >= 0 else hi
        phi[s:e + 1] = seq.phi[src]
        theta[s:e + 1] = seq.theta[src]
        beta[s:e + 1] = seq.beta[src]
        gamma[s:e + 1] = seq.gamma[src]
    return seq.replace(phi=phi, theta=theta, beta=beta, gamma=gamma, visible=seq.visible.copy())


def max_gap_length(T, max_gap_fraction):
    return int(min(np.floor(max_gap_fraction * T + 1e-9), T - 2))


def mask_augment(seq, rng_seed, max_gap_fraction):
    """Hide one interior run of frames; the first and last frames stay visible.

    The run length is uniform on ``1..floor(max_gap_fraction*T)`` (capped at
    T-2) and its start is uniform over the interior positions that fit.
    Hidden frames are zeroed, matching what the encoder sees at inference.
    """
    T = len(seq)
    if T < 3:
        raise ValueError("mask_augment needs at least 3 frames")
    L_max = max_gap_length(T, max_gap_fraction)
    if L_max < 1:
        return seq.replace(visible=seq.visible.copy())
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    L = int(rng.integers(1, L_max + 1))
    s = int(rng.integers(1, T - L))
    vis = seq.visible.copy()
    vis[s:s + L] = False
    hidden = ~vis
    out = []
    for arr in (seq.phi, seq.theta, seq.beta, seq.gamma):
        a = arr.copy()
        a[hidden] = 0.0
        out.append(a)
    return seq.replace(phi=out[0], theta=out[1], beta=out[2], gamma=out[3], visible=vis)


# ---------------------------------------------------------------------------
# axis-angle canonicalization with its Jacobian
# ---------------------------------------------------------------------------

def _canon_rows(v):
    """Map each 3-vector with norm > pi to its shortest representative.

    Returns ``(v_canon, wrapped, norms)``; only wrapped rows change.
    """
    n = np.linalg.norm(v, axis=-1)
    wrapped = n > np.pi
    out = v.copy()
    if np.any(wrapped):
        nw = n[wrapped]
        k = np.floor((nw + np.pi) / (2 * np.pi))
        out[wrapped] = v[wrapped] * (1.0 - 2 * np.pi * k / nw)[:, None]
    return out, wrapped, n


def _canon_backward(v, wrapped, n, g):
    """Vector-Jacobian product of :func:`_canon_rows`."""
    out = g.copy()
    if np.any(wrapped):
        vw = v[wrapped]
        nw = n[wrapped]
        k = np.floor((nw + np.pi) / (2 * np.pi))
        a = 1.0 - 2 * np.pi * k / nw
        gw = g[wrapped]
        dot = np.sum(vw * gw, axis=-1)
        out[wrapped] = a[:, None] * gw + (2 * np.pi * k / nw ** 3 * dot)[:, None] * vw
    return out


def canonicalize_rotations(states):
    """Canonicalize the 16 rotation blocks of (T, 61) state vectors."""
    rot = states[:, :48].reshape(-1, 3)
    c, _, _ = _canon_rows(rot)
    out = states.copy()
    out[:, :48] = c.reshape(states.shape[0], 48)
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class InfillerConfig:
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    d_ffn: int = 128
    window: int = 128
    steps: int = 1500
    batch: int = 8
    lr: float = 2e-3
    lr_decay: float = 0.9
    decay_every: int = 100
    optimizer: str = "adam"
    max_gap_fraction: float = 0.5
    crop: int = 64
    seed: int = 0
    init_scale: float = 1.0

    def to_dict(self):
        return asdict(self)


def sinusoidal_table(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    freq = 1.0 / (10000.0 ** (2 * i / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)[:, : d - d // 2]
    return pe


def _layer_names(l):
    p = f"l{l}."
    return [p + n for n in ("ln1_g", "ln1_b", "Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo",
                            "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")]


BUFFERS = ("in_mean", "in_std", "out_scale")


class InfillerModel:
    """Pre-norm transformer encoder mapping state tokens to residuals."""

    def __init__(self, d_model=64, n_layers=3, n_heads=4, d_ffn=128, window=128, seed=0, init_scale=1.0):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.d_model = int(d_model)
        self.n_layers = int(n_layers)
        self.n_heads = int(n_heads)
        self.d_ffn = int(d_ffn)
        self.window = int(window)
        self.params = None
        self.buffers = None
        self.history = []
        self._pe = sinusoidal_table(self.window, self.d_model)
        if seed is not None:
            self.initialize(seed, init_scale)

    # -- parameters ---------------------------------------------------------
    def param_names(self):
        names = ["in_W", "in_b"]
        for l in range(self.n_layers):
            names += _layer_names(l)
        return names + ["lnf_g", "lnf_b", "out_W", "out_b"]

    def names(self):
        return list(BUFFERS) + self.param_names()

    def shapes(self):
        D, F = self.d_model, self.d_ffn
        s = {"in_W": (N_IN, D), "in_b": (D,), "lnf_g": (D,), "lnf_b": (D,),
             "out_W": (D, STATE_DIM), "out_b": (STATE_DIM,)}
        for l in range(self.n_layers):
            p = f"l{l}."
            s.update({p + "ln1_g": (D,), p + "ln1_b": (D,), p + "ln2_g": (D,), p + "ln2_b": (D,),
                      p + "Wq": (D, D), p + "bq": (D,), p + "Wk": (D, D), p + "bk": (D,),
                      p + "Wv": (D, D), p + "bv": (D,), p + "Wo": (D, D), p + "bo": (D,),
                      p + "W1": (D, F), p + "b1": (F,), p + "W2": (F, D), p + "b2": (D,)})
        return s

    def initialize(self, seed, init_scale=1.0):
        rng = np.random.default_rng(seed)
        shapes = self.shapes()
        params = {}
        for name in self.param_names():
            shp = shapes[name]
            base = name.split(".")[-1]
            if base.endswith("_g"):
                params[name] = np.ones(shp)
            elif len(shp) == 1 or name == "out_W":
                params[name] = np.zeros(shp)
            else:
                params[name] = rng.normal(0.0, init_scale / np.sqrt(shp[0]), shp)
        self.params = params
        self.buffers = {"in_mean": np.zeros(N_IN), "in_std": np.ones(N_IN), "out_scale": np.ones(STATE_DIM)}
        return self

    def set_normalization(self, in_mean, in_std, out_scale):
        self.buffers = {"in_mean": np.asarray(in_mean, dtype=np.float64).copy(),
                        "in_std": np.maximum(np.asarray(in_std, dtype=np.float64), 1e-6),
                        "out_scale": np.asarray(out_scale, dtype=np.float64).copy()}

    def config(self):
        return dict(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
                    d_ffn=self.d_ffn, window=self.window)

    def copy(self):
        m = InfillerModel(seed=None, **self.config())
        m.params = {k: v.copy() for k, v in self.params.items()}
        m.buffers = {k: v.copy() for k, v in self.buffers.items()}
        m.history = list(self.history)
        return m

    def flat_params(self):
        return np.concatenate([self.params[n].ravel() for n in self.param_names()])

    def set_flat_params(self, flat):
        off = 0
        for n in self.param_names():
            a = self.params[n]
            self.params[n] = np.asarray(flat[off:off + a.size], dtype=np.float64).reshape(a.shape).copy()
            off += a.size

    # -- forward/backward ---------------------------------------------------
    def forward(self, tokens, cache=False):
        """Residuals (..., T, 61) for input tokens (T, 62) or a batch (B, T, 62)."""
        if self.params is None:
            raise ModelUninitialized("model parameters are not set")
        P = self.params
        single = tokens.ndim == 2
        tok = tokens[None] if single else tokens
        B, T = tok.shape[:2]
        if T > self.window:
            raise WindowTooLong(f"{T} frames exceed the model window of {self.window}")
        H, D = self.n_heads, self.d_model
        dh = D // H
        c = {}
        xin = (tok - self.buffers["in_mean"]) / self.buffers["in_std"]
        c["xin"] = xin
        x = xin @ P["in_W"] + P["in_b"] + self._pe[:T]
        layers = []
        for l in range(self.n_layers):
            p = f"l{l}."
            lc = {}
            h, lc["ln1"] = _ln_fwd(x, P[p + "ln1_g"], P[p + "ln1_b"])
            lc["h"] = h
            q = (h @ P[p + "Wq"] + P[p + "bq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = (h @ P[p + "Wk"] + P[p + "bk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            v = (h @ P[p + "Wv"] + P[p + "bv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
            s = s - s.max(axis=-1, keepdims=True)
            e = np.exp(s)
            a = e / e.sum(axis=-1, keepdims=True)
            o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
            x = x + o @ P[p + "Wo"] + P[p + "bo"]
            lc.update(q=q, k=k, v=v, a=a, o=o)
            h2, lc["ln2"] = _ln_fwd(x, P[p + "ln2_g"], P[p + "ln2_b"])
            z1 = h2 @ P[p + "W1"] + P[p + "b1"]
            g1, tz = _gelu(z1)
            x = x + g1 @ P[p + "W2"] + P[p + "b2"]
            lc.update(h2=h2, z1=z1, g1=g1, tz=tz)
            layers.append(lc)
        hf, lnf = _ln_fwd(x, P["lnf_g"], P["lnf_b"])
        y = (hf @ P["out_W"] + P["out_b"]) * self.buffers["out_scale"]
        if single:
            y = y[0]
        if cache:
            c.update(layers=layers, hf=hf, lnf=lnf, B=B, T=T, single=single)
            return y, c
        return y

    def backward(self, dy, c):
        """Parameter gradients given dL/dy and a forward cache."""
        P = self.params
        B, T = c["B"], c["T"]
        H, D = self.n_heads, self.d_model
        dh = D // H
        g = {}
        dy = (dy[None] if c["single"] else dy) * self.buffers["out_scale"]
        g["out_W"] = _wgrad(c["hf"], dy)
        g["out_b"] = _bgrad(dy)
        dhf = dy @ P["out_W"].T
        dx, g["lnf_g"], g["lnf_b"] = _ln_bwd(dhf, c["lnf"], P["lnf_g"])
        for l in reversed(range(self.n_layers)):
            p = f"l{l}."
            lc = c["layers"][l]
            # feedforward
            g[p + "b2"] = _bgrad(dx)
            g[p + "W2"] = _wgrad(lc["g1"], dx)
            dg1 = dx @ P[p + "W2"].T
            dz1 = dg1 * _gelu_grad(lc["z1"], lc["tz"])
            g[p + "W1"] = _wgrad(lc["h2"], dz1)
            g[p + "b1"] = _bgrad(dz1)
            dh2 = dz1 @ P[p + "W1"].T
            d_ln2, g[p + "ln2_g"], g[p + "ln2_b"] = _ln_bwd(dh2, lc["ln2"], P[p + "ln2_g"])
            dx = dx + d_ln2
            # attention
            g[p + "bo"] = _bgrad(dx)
            g[p + "Wo"] = _wgrad(lc["o"], dx)
            do = (dx @ P[p + "Wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            a, q, k, v = lc["a"], lc["q"], lc["k"], lc["v"]
            da = do @ v.transpose(0, 1, 3, 2)
            dv = a.transpose(0, 1, 3, 2) @ do
            ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) / np.sqrt(dh)
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            h = lc["h"]
            dhh = np.zeros((B, T, D))
            for name, dm in (("q", dq), ("k", dk), ("v", dv)):
                dm = dm.transpose(0, 2, 1, 3).reshape(B, T, D)
                g[p + "W" + name] = _wgrad(h, dm)
                g[p + "b" + name] = _bgrad(dm)
                dhh += dm @ P[p + "W" + name].T
            d_ln1, g[p + "ln1_g"], g[p + "ln1_b"] = _ln_bwd(dhh, lc["ln1"], P[p + "ln1_g"])
            dx = dx + d_ln1
        g["in_W"] = _wgrad(c["xin"], dx)
        g["in_b"] = _bgrad(dx)
        return g

    # -- persistence --------------------------------------------------------
    def to_bytes(self):
        if self.params is None:
            raise ModelUninitialized("model parameters are not set")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        buf.write(struct.pack("<7I", self.d_model, self.n_layers, self.n_heads, self.d_ffn, self.window,
                              N_IN, STATE_DIM))
        arrays = [self.buffers[n] for n in BUFFERS] + [self.params[n] for n in self.param_names()]
        buf.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.ascontiguousarray(a, dtype="<f8")
            buf.write(struct.pack("<I", a.ndim))
            buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
            buf.write(a.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        mv = memoryview(data)
        if bytes(mv[:4]) != MAGIC:
            raise CheckpointError("not an infiller checkpoint (bad magic)")
        off = 4
        (version,) = struct.unpack_from("<I", mv, off)
        off += 4
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        d_model, n_layers, n_heads, d_ffn, window, n_in, n_out = struct.unpack_from("<7I", mv, off)
        off += 28
        if n_in != N_IN or n_out != STATE_DIM:
            raise CheckpointError("checkpoint token sizes do not match this build")
        m = cls(d_model, n_layers, n_heads, d_ffn, window, seed=None)
        (n_arr,) = struct.unpack_from("<I", mv, off)
        off += 4
        names = m.names()
        if n_arr != len(names):
            raise CheckpointError(f"expected {len(names)} arrays, found {n_arr}")
        shapes = m.shapes()
        shapes.update({"in_mean": (N_IN,), "in_std": (N_IN,), "out_scale": (STATE_DIM,)})
        arrays = {}
        try:
            for name in names:
                (ndim,) = struct.unpack_from("<I", mv, off)
                off += 4
                shp = struct.unpack_from(f"<{ndim}I", mv, off)
                off += 4 * ndim
                if tuple(shp) != tuple(shapes[name]):
                    raise CheckpointError(f"array {name} has shape {shp}, expected {shapes[name]}")
                n = int(np.prod(shp))
                arrays[name] = np.frombuffer(mv, dtype="<f8", count=n, offset=off).reshape(shp).astype(np.float64)
                off += 8 * n
        except struct.error as e:
            raise CheckpointError("truncated checkpoint") from e
        except ValueError as e:
            raise CheckpointError("truncated checkpoint") from e
        if off != len(data):
            raise CheckpointError("trailing bytes after checkpoint payload")
        m.buffers = {n: arrays[n] for n in BUFFERS}
        m.params = {n: arrays[n] for n in m.param_names()}
        if not all(np.all(np.isfinite(a)) for a in arrays.values()):
            raise CheckpointError("checkpoint contains non-finite values")
        return m

    def save(self, path):
        from .io import atomic_write_bytes
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def _wgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _bgrad(dy):
    return dy.reshape(-1, dy.shape[-1]).sum(axis=0)


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv)


def _ln_bwd(dy, cache, g):
    xh, inv = cache
    n = xh.shape[-1]
    dxh = dy * g
    dx = inv / n * (n * dxh - dxh.sum(axis=-1, keepdims=True) - xh * np.sum(dxh * xh, axis=-1, keepdims=True))
    return dx, _bgrad(dy * xh), _bgrad(dy)


def _gelu(x):
    """Tanh-approximated GELU; also returns the tanh term for the backward pass."""
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def tokens_of(seq):
    return np.concatenate([seq.vectors(), seq.visible[:, None].astype(np.float64)], axis=1)


def _apply_residual(seq_init, y, gap_mask):
    vec = seq_init.vectors()
    out = vec.copy()
    out[gap_mask] = vec[gap_mask] + y[gap_mask]
    rot = out[gap_mask][:, :48].reshape(-1, 3)
    c, _, _ = _canon_rows(rot)
    rows = out[gap_mask]
    rows[:, :48] = c.reshape(-1, 48)
    out[gap_mask] = rows
    T = len(seq_init)
    return seq_init.replace(phi=out[:, SL_PHI], theta=out[:, SL_THETA].reshape(T, N_ARTICULATED, 3),
                            beta=out[:, SL_BETA], gamma=out[:, SL_GAMMA], visible=seq_init.visible.copy())


def infill_refine(model, seq_init, gaps=None):
    """Add model residuals to ``seq_init`` on gap frames; other frames pass through."""
    if model is None or model.params is None:
        raise ModelUninitialized("no trained infiller model")
    if seq_init.frame_tag != "canonical":
        raise FrameTagMismatch(f"expected canonical motion, got {seq_init.frame_tag!r}")
    T = len(seq_init)
    if T > model.window:
        raise WindowTooLong(f"{T} frames exceed the model window of {model.window}")
    gaps = detect_gaps(seq_init) if gaps is None else gaps
    gap_mask = gaps.frame_mask()
    if not np.any(gap_mask):
        return seq_init.replace(visible=seq_init.visible.copy())
    y = model.forward(tokens_of(seq_init))
    return _apply_residual(seq_init, y, gap_mask)


def _recanonicalize(seq):
    """Re-anchor a canonical window at its first visible frame."""
    cano, _, anchor = world_to_canonical(seq.replace(frame_tag="world"))
    return cano, anchor


def infill_long(model, seq, gaps=None):
    """Interpolate then refine a canonical sequence of any length in model-sized windows.

    Each window is re-anchored at its first visible frame so its input
    matches the training distribution, refined, then mapped back.
    """
    from .canonical import canonical_to_world

    init = interpolate_init(seq, gaps)
    T = len(seq)
    if model is None:
        raise ModelUninitialized("no trained infiller model")
    W = model.window
    if T <= W and np.flatnonzero(seq.visible)[0] == 0:
        return infill_refine(model, init, gaps)
    parts = []
    for s in range(0, T, W):
        win = init.slice(s, min(T, s + W))
        if not np.any(win.visible) or np.all(win.visible):
            parts.append(win)
            continue
        cano, anchor = _recanonicalize(win)
        ref = infill_refine(model, cano)
        back = canonical_to_world(ref, anchor).replace(frame_tag="canonical")
        # visible frames keep their exact input values
        vis = win.visible
        phi = np.where(vis[:, None], win.phi, back.phi)
        theta = np.where(vis[:, None, None], win.theta, back.theta)
        beta = np.where(vis[:, None], win.beta, back.beta)
        gamma = np.where(vis[:, None], win.gamma, back.gamma)
        parts.append(win.replace(phi=phi, theta=theta, beta=beta, gamma=gamma))
    return init.replace(phi=np.concatenate([p.phi for p in parts]),
                        theta=np.concatenate([p.theta for p in parts]),
                        beta=np.concatenate([p.beta for p in parts]),
                        gamma=np.concatenate([p.gamma for p in parts]),
                        visible=seq.visible.copy())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def infill_loss(pred_vec, gt_vec, gap_mask, weights):
    """Weighted L1 over gap frames, averaged over gap frames, and dL/dpred."""
    w = weights.column_weights()
    n = int(np.count_nonzero(gap_mask))
    grad = np.zeros_like(pred_vec)
    if n == 0:
        return 0.0, grad
    p = pred_vec[gap_mask]
    q = gt_vec[gap_mask]
    prot = p[:, :48].reshape(-1, 3)
    pc, wrapped, norms = _canon_rows(prot)
    qc, _, _ = _canon_rows(q[:, :48].reshape(-1, 3))
    diff = p - q
    diff[:, :48] = (pc - qc).reshape(-1, 48)
    loss = float(np.sum(w * np.abs(diff)) / n)
    g = w * np.sign(diff) / n
    grot = _canon_backward(prot, wrapped, norms, g[:, :48].reshape(-1, 3))
    g[:, :48] = grot.reshape(-1, 48)
    grad[gap_mask] = g
    return loss, grad


def batch_loss(model, inits, gts, weights, with_grad=True):
    """Mean L_F over equal-length examples; each prediction is init + residual on gap frames."""
    tokens = np.stack([tokens_of(s) for s in inits])
    gap = np.stack([~s.visible for s in inits])
    if with_grad:
        y, cache = model.forward(tokens, cache=True)
    else:
        y = model.forward(tokens)
    B = len(inits)
    total = 0.0
    dy = np.zeros_like(y)
    for b in range(B):
        pred = inits[b].vectors()
        pred[gap[b]] = pred[gap[b]] + y[b][gap[b]]
        loss, dpred = infill_loss(pred, gts[b].vectors(), gap[b], weights)
        total += loss / B
        dy[b][gap[b]] = dpred[gap[b]] / B
    if not with_grad:
        return total, None
    return total, model.backward(dy, cache)


def example_loss(model, init_seq, gt_seq, weights, with_grad=True):
    """L_F of one masked example."""
    return batch_loss(model, [init_seq], [gt_seq], weights, with_grad)


def make_example(seq, rng, cfg):
    """Random canonical crop with one masked interior gap: (init, gt)."""
    T = len(seq)
    L = min(T, cfg.crop, cfg.window)
    s = int(rng.integers(0, T - L + 1))
    crop = seq.slice(s, s + L)
    if s > 0 or crop.frame_tag != "canonical":
        crop, _ = _recanonicalize(crop.replace(visible=np.ones(L, dtype=bool)))
    masked = mask_augment(crop, rng, cfg.max_gap_fraction)
    if np.all(masked.visible):
        return None
    return interpolate_init(masked), crop


def normalization_stats(dataset):
    vecs = np.concatenate([s.vectors() for s in dataset])
    mean = np.concatenate([vecs.mean(axis=0), [0.5]])
    std = np.concatenate([vecs.std(axis=0), [0.5]])
    out_scale = np.maximum(vecs.std(axis=0), 1e-3)
    return mean, std, out_scale


def train_infiller(dataset, weights=None, config=None, log=None):
    """Fit the residual infiller on masked crops of canonical sequences.

    Deterministic given ``config.seed``. ``model.history`` holds the mean
    training loss of each epoch (``len(dataset) // batch`` steps, at least 1).
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("training set is empty")
    for s in dataset:
        if s.frame_tag != "canonical":
            raise FrameTagMismatch("training sequences must be canonical")
        if len(s) < 3:
            raise ValueError("training sequences need at least 3 frames")
    weights = InfillLossWeights() if weights is None else weights
    cfg = InfillerConfig() if config is None else config
    model = InfillerModel(cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ffn, cfg.window, seed=cfg.seed,
                          init_scale=cfg.init_scale)
    model.set_normalization(*normalization_stats(dataset))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    names = model.param_names()
    m1 = {n: np.zeros_like(model.params[n]) for n in names}
    m2 = {n: np.zeros_like(model.params[n]) for n in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    steps_per_epoch = max(1, len(dataset) // cfg.batch)
    epoch_losses = []
    history = []
    for step in range(cfg.steps):
        lr = cfg.lr * cfg.lr_decay ** (step // cfg.decay_every)
        examples = [make_example(dataset[int(rng.integers(len(dataset)))], rng, cfg) for _ in range(cfg.batch)]
        examples = [ex for ex in examples if ex is not None]
        if not examples:
            continue
        groups = {}
        for ex in examples:
            groups.setdefault(len(ex[0]), []).append(ex)
        grads = {n: np.zeros_like(model.params[n]) for n in names}
        loss = 0.0
        for T_len in sorted(groups):
            grp = groups[T_len]
            share = len(grp) / len(examples)
            l, g = batch_loss(model, [e[0] for e in grp], [e[1] for e in grp], weights)
            loss += share * l
            for n in names:
                grads[n] += share * g[n]
        if not np.isfinite(loss):
            raise DivergedLoss(f"training loss became non-finite at step {step}")
        for n in names:
            gr = grads[n]
            if cfg.optimizer == "adam":
                m1[n] = b1 * m1[n] + (1 - b1) * gr
                m2[n] = b2 * m2[n] + (1 - b2) * gr * gr
                mh = m1[n] / (1 - b1 ** (step + 1))
                vh = m2[n] / (1 - b2 ** (step + 1))
                model.params[n] -= lr * mh / (np.sqrt(vh) + eps)
            elif cfg.optimizer == "sgd":
                model.params[n] -= lr * gr
            else:
                raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
        epoch_losses.append(loss)
        if len(epoch_losses) == steps_per_epoch:
            history.append(float(np.mean(epoch_losses)))
            epoch_losses = []
            if log is not None:
                log(f"step {step + 1} lr {lr:.3g} loss {history[-1]:.6f}")
    if epoch_losses:
        history.append(float(np.mean(epoch_losses)))
    for n in names:
        if not np.all(np.isfinite(model.params[n])):
            raise DivergedLoss(f"parameter {n} became non-finite")
    model.history = history
    return model
