"""Minimal dense/recurrent network kernel with hand-written backward passes.

Sized for small research models: stacks of dense (relu/tanh/identity), LSTM
and GRU layers. Forward passes return an explicit cache so several passes
can be recorded before gradients are pulled back through them (needed for
losses that compare two encodings). Parameters live in flat name->array
dicts shared by the Adam optimizer and the checkpoint format.

Everything defaults to float64; pass ``dtype=np.float32`` at construction
when throughput matters more than finite-difference headroom.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

__all__ = [
    "Dense",
    "LSTM",
    "GRU",
    "Network",
    "AdamState",
    "adam_step",
    "clip_global_norm",
    "save_checkpoint",
    "load_checkpoint",
]


def _uniform_fan_in(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Dense:
    """Affine layer with an elementwise activation."""

    ACTIVATIONS = ("relu", "tanh", "identity")

    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity"):
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.recurrent = False

    def param_shapes(self):
        return {"W": (self.in_dim, self.out_dim), "b": (self.out_dim,)}

    def init_params(self, rng, dtype):
        return {
            "W": _uniform_fan_in(rng, self.in_dim, (self.in_dim, self.out_dim), dtype),
            "b": _uniform_fan_in(rng, self.in_dim, (self.out_dim,), dtype),
        }

    def forward(self, params, x, state=None):
        z = x @ params["W"] + params["b"]
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        elif self.activation == "tanh":
            y = np.tanh(z)
        else:
            y = z
        return y, None, (x, y)

    def backward(self, params, cache, dy, dstate=None):
        x, y = cache
        if self.activation == "relu":
            dz = dy * (y > 0)
        elif self.activation == "tanh":
            dz = dy * (1.0 - y * y)
        else:
            dz = dy
        grads = {"W": x.T @ dz, "b": dz.sum(axis=0)}
        dx = dz @ params["W"].T
        return grads, dx, None

    def init_state(self, batch, dtype):
        return None


class LSTM:
    """Single LSTM layer; gate order is (input, forget, cell, output)."""

    def __init__(self, in_dim: int, hidden_dim: int):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.recurrent = True

    def param_shapes(self):
        h = self.hidden_dim
        return {"Wx": (self.in_dim, 4 * h), "Wh": (h, 4 * h), "b": (4 * h,)}

    def init_params(self, rng, dtype):
        h = self.hidden_dim
        return {
            "Wx": _uniform_fan_in(rng, h, (self.in_dim, 4 * h), dtype),
            "Wh": _uniform_fan_in(rng, h, (h, 4 * h), dtype),
            "b": _uniform_fan_in(rng, h, (4 * h,), dtype),
        }

    def init_state(self, batch, dtype):
        h = self.hidden_dim
        return (np.zeros((batch, h), dtype=dtype), np.zeros((batch, h), dtype=dtype))

    def forward(self, params, x, state, x_proj=None):
        h_prev, c_prev = state
        hd = self.hidden_dim
        if x_proj is None:
            x_proj = x @ params["Wx"]
        gates = x_proj + h_prev @ params["Wh"] + params["b"]
        i = _sigmoid(gates[:, :hd])
        f = _sigmoid(gates[:, hd : 2 * hd])
        g = np.tanh(gates[:, 2 * hd : 3 * hd])
        o = _sigmoid(gates[:, 3 * hd :])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        cache = (x, h_prev, c_prev, i, f, g, o, tc)
        return h, (h, c), cache

    def backward(self, params, cache, dh, dstate):
        x, h_prev, c_prev, i, f, g, o, tc = cache
        if dstate is None:
            dh_next = np.zeros_like(dh)
            dc_next = np.zeros_like(dh)
        else:
            dh_next, dc_next = dstate
        dh_total = dh + dh_next
        do = dh_total * tc
        dc = dh_total * o * (1.0 - tc * tc) + dc_next
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        dc_prev = dc * f
        dgates = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)],
            axis=1,
        )
        grads = {
            "Wx": x.T @ dgates,
            "Wh": h_prev.T @ dgates,
            "b": dgates.sum(axis=0),
        }
        dx = dgates @ params["Wx"].T
        dh_prev = dgates @ params["Wh"].T
        return grads, dx, (dh_prev, dc_prev)

    # Sequence-level hooks used by Network.forward_sequence to batch the
    # input projection and the parameter-gradient accumulation into single
    # GEMMs over all timesteps.
    def project_inputs(self, params, xs):
        t, b, _ = xs.shape
        return (xs.reshape(t * b, -1) @ params["Wx"]).reshape(t, b, -1)

    def backward_step_light(self, params, cache, dh, dstate):
        """Like backward but defers Wx/Wh/b gradients; returns dgates."""
        x, h_prev, c_prev, i, f, g, o, tc = cache
        if dstate is None:
            dh_next = np.zeros_like(dh)
            dc_next = np.zeros_like(dh)
        else:
            dh_next, dc_next = dstate
        dh_total = dh + dh_next
        do = dh_total * tc
        dc = dh_total * o * (1.0 - tc * tc) + dc_next
        dgates = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        dh_prev = dgates @ params["Wh"].T
        return dgates, (dh_prev, dc * f)

    def accumulate_sequence_grads(self, params, caches, dgates_seq):
        xs = np.stack([c[0] for c in caches])  # (t, b, in)
        hs = np.stack([c[1] for c in caches])  # (t, b, h)
        t, b, _ = xs.shape
        dg = dgates_seq.reshape(t * b, -1)
        grads = {
            "Wx": xs.reshape(t * b, -1).T @ dg,
            "Wh": hs.reshape(t * b, -1).T @ dg,
            "b": dg.sum(axis=0),
        }
        dxs = (dg @ params["Wx"].T).reshape(t, b, -1)
        return grads, dxs


class GRU:
    """Single GRU layer; gate order is (reset, update, candidate)."""

    def __init__(self, in_dim: int, hidden_dim: int):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.recurrent = True

    def param_shapes(self):
        h = self.hidden_dim
        return {"Wx": (self.in_dim, 3 * h), "Wh": (h, 3 * h), "b": (3 * h,)}

    def init_params(self, rng, dtype):
        h = self.hidden_dim
        return {
            "Wx": _uniform_fan_in(rng, h, (self.in_dim, 3 * h), dtype),
            "Wh": _uniform_fan_in(rng, h, (h, 3 * h), dtype),
            "b": _uniform_fan_in(rng, h, (3 * h,), dtype),
        }

    def init_state(self, batch, dtype):
        return np.zeros((batch, self.hidden_dim), dtype=dtype)

    def forward(self, params, x, state, x_proj=None):
        h_prev = state
        hd = self.hidden_dim
        if x_proj is None:
            x_proj = x @ params["Wx"]
        hh = h_prev @ params["Wh"]
        r = _sigmoid(x_proj[:, :hd] + hh[:, :hd] + params["b"][:hd])
        z = _sigmoid(x_proj[:, hd : 2 * hd] + hh[:, hd : 2 * hd] + params["b"][hd : 2 * hd])
        hn = hh[:, 2 * hd :]
        n = np.tanh(x_proj[:, 2 * hd :] + r * hn + params["b"][2 * hd :])
        h = (1.0 - z) * n + z * h_prev
        cache = (x, h_prev, r, z, n, hn)
        return h, h, cache

    def _gate_grads(self, cache, dh, dstate):
        x, h_prev, r, z, n, hn = cache
        dh_total = dh + (dstate if dstate is not None else 0.0)
        dz = dh_total * (h_prev - n)
        dn = dh_total * (1.0 - z)
        dpre_n = dn * (1.0 - n * n)
        dr = dpre_n * hn
        dgx = np.concatenate([dr * r * (1.0 - r), dz * z * (1.0 - z), dpre_n], axis=1)
        # Gradient w.r.t. the h_prev @ Wh product: candidate slice is gated by r.
        dgh = dgx.copy()
        dgh[:, 2 * self.hidden_dim :] = dpre_n * r
        dh_prev = dh_total * z
        return dgx, dgh, dh_prev

    def backward(self, params, cache, dh, dstate):
        x, h_prev, r, z, n, hn = cache
        dgx, dgh, dh_prev = self._gate_grads(cache, dh, dstate)
        grads = {
            "Wx": x.T @ dgx,
            "Wh": h_prev.T @ dgh,
            "b": dgx.sum(axis=0),
        }
        dx = dgx @ params["Wx"].T
        dh_prev = dh_prev + dgh @ params["Wh"].T
        return grads, dx, dh_prev

    def project_inputs(self, params, xs):
        t, b, _ = xs.shape
        return (xs.reshape(t * b, -1) @ params["Wx"]).reshape(t, b, -1)

    def backward_step_light(self, params, cache, dh, dstate):
        dgx, dgh, dh_prev = self._gate_grads(cache, dh, dstate)
        dh_prev = dh_prev + dgh @ params["Wh"].T
        return (dgx, dgh), dh_prev

    def accumulate_sequence_grads(self, params, caches, dgates_seq):
        xs = np.stack([c[0] for c in caches])
        hs = np.stack([c[1] for c in caches])
        t, b, _ = xs.shape
        dgx = np.stack([d[0] for d in dgates_seq]).reshape(t * b, -1)
        dgh = np.stack([d[1] for d in dgates_seq]).reshape(t * b, -1)
        grads = {
            "Wx": xs.reshape(t * b, -1).T @ dgx,
            "Wh": hs.reshape(t * b, -1).T @ dgh,
            "b": dgx.sum(axis=0),
        }
        dxs = (dgx @ params["Wx"].T).reshape(t, b, -1)
        return grads, dxs


class Network:
    """Ordered layer stack with one flat parameter dict.

    Parameter keys are ``"{layer_index}.{name}"``. Recurrent state is a list
    with one entry per layer (None for dense layers).
    """

    def __init__(self, layers, seed: int = 0, dtype=np.float64):
        self.layers = list(layers)
        self.dtype = np.dtype(dtype).type
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            out = a.out_dim if isinstance(a, Dense) else a.hidden_dim
            if out != b.in_dim:
                raise ValueError(f"layer dims do not compose: {out} -> {b.in_dim}")
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for idx, layer in enumerate(self.layers):
            for name, arr in layer.init_params(rng, self.dtype).items():
                self.params[f"{idx}.{name}"] = arr
        self.seed = seed

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        last = self.layers[-1]
        return last.out_dim if isinstance(last, Dense) else last.hidden_dim

    def has_recurrent(self) -> bool:
        return any(l.recurrent for l in self.layers)

    def init_state(self, batch: int):
        return [l.init_state(batch, self.dtype) for l in self.layers]

    def _layer_params(self, idx):
        layer = self.layers[idx]
        return {name: self.params[f"{idx}.{name}"] for name in layer.param_shapes()}

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, state=None):
        """One step for ``x`` of shape (batch, in_dim). Returns
        (output, new_state, cache)."""
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if state is None:
            state = self.init_state(x.shape[0])
        new_state, caches = [], []
        for idx, layer in enumerate(self.layers):
            x, st, cache = layer.forward(self._layer_params(idx), x, state[idx])
            new_state.append(st)
            caches.append(cache)
        if squeeze:
            x = x[0]
        return x, new_state, caches

    def backward(self, caches, dout, dstate=None, grads=None):
        """Pull ``dout`` back through one recorded step. Accumulates into
        ``grads`` when given. Returns (grads, dx, dstate_prev)."""
        if grads is None:
            grads = self.zero_grads()
        dout = np.asarray(dout, dtype=self.dtype)
        if dout.ndim == 1:
            dout = dout[None, :]
        dstate_prev = [None] * len(self.layers)
        dx = dout
        for idx in reversed(range(len(self.layers))):
            layer = self.layers[idx]
            dst = dstate[idx] if dstate is not None else None
            g, dx, ds = layer.backward(self._layer_params(idx), caches[idx], dx, dst)
            for name, arr in g.items():
                grads[f"{idx}.{name}"] += arr
            dstate_prev[idx] = ds
        return grads, dx, dstate_prev

    def forward_sequence(self, xs, state=None):
        """Run ``xs`` of shape (T, batch, in_dim) through the stack.

        Returns (outputs (T, batch, out_dim), final_state, seq_cache). Input
        projections of recurrent layers are batched over all timesteps.
        """
        xs = np.asarray(xs, dtype=self.dtype)
        t, batch, _ = xs.shape
        if state is None:
            state = self.init_state(batch)
        state = list(state)
        layer_caches: list[list] = [[] for _ in self.layers]
        cur = xs
        for idx, layer in enumerate(self.layers):
            params = self._layer_params(idx)
            if layer.recurrent:
                proj = layer.project_inputs(params, cur)
                outs = np.empty((t, batch, layer.hidden_dim), dtype=self.dtype)
                st = state[idx]
                for k in range(t):
                    out, st, cache = layer.forward(params, cur[k], st, x_proj=proj[k])
                    outs[k] = out
                    layer_caches[idx].append(cache)
                state[idx] = st
                cur = outs
            else:
                flat = cur.reshape(t * batch, -1)
                out, _, cache = layer.forward(params, flat)
                layer_caches[idx].append(cache)
                cur = out.reshape(t, batch, -1)
        return cur, state, (t, batch, layer_caches)

    def backward_sequence(self, seq_cache, douts, grads=None):
        """Backpropagate per-step output gradients ``douts`` (T, batch,
        out_dim) through a recorded forward_sequence. Returns (grads, dxs)."""
        t, batch, layer_caches = seq_cache
        if grads is None:
            grads = self.zero_grads()
        douts = np.asarray(douts, dtype=self.dtype)
        cur = douts
        for idx in reversed(range(len(self.layers))):
            layer = self.layers[idx]
            params = self._layer_params(idx)
            if layer.recurrent:
                dgates_seq = [None] * t
                dstate = None
                for k in reversed(range(t)):
                    dgates_seq[k], dstate = layer.backward_step_light(
                        params, layer_caches[idx][k], cur[k], dstate
                    )
                if isinstance(layer, LSTM):
                    stacked = np.stack(dgates_seq)
                    g, cur = layer.accumulate_sequence_grads(params, layer_caches[idx], stacked)
                else:
                    g, cur = layer.accumulate_sequence_grads(params, layer_caches[idx], dgates_seq)
            else:
                flat = cur.reshape(t * batch, -1)
                g, dx, _ = layer.backward(params, layer_caches[idx][0], flat)
                cur = dx.reshape(t, batch, -1)
            for name, arr in g.items():
                grads[f"{idx}.{name}"] += arr
        return grads, cur

    def copy(self) -> "Network":
        clone = object.__new__(Network)
        clone.layers = self.layers
        clone.dtype = self.dtype
        clone.seed = self.seed
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        if set(params) != set(self.params):
            raise ValueError("parameter names do not match this network")
        for k, v in params.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}")
            self.params[k] = v.astype(self.dtype)


class AdamState:
    """Adam moments and step count for one parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One Adam update, in place on ``params``. Raises on non-finite
    gradients so diverging training halts loudly."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.
    Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def finite_difference_grads(params: dict, loss_fn, h: float = 1e-5) -> dict:
    """Central finite differences of ``loss_fn()`` w.r.t. every entry of
    ``params`` (mutated in place and restored). For verifying backward
    passes; O(#params) loss evaluations."""
    grads = {}
    for k, p in params.items():
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        grads[k] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict) -> float:
    """max_i |a_i - n_i| / max(|a_i| + |n_i|, 1e-8) over all parameters."""
    worst = 0.0
    for k in analytic:
        a = analytic[k].astype(np.float64).ravel()
        n = numeric[k].astype(np.float64).ravel()
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def save_checkpoint(path, params: dict, *, seed: int, step: int, extra: dict | None = None):
    """Self-describing checkpoint: parameter arrays plus a JSON header with
    shapes, dtypes, seed and step count. Round-trips bit-exactly."""
    meta = {
        "seed": int(seed),
        "step": int(step),
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "dtypes": {k: str(v.dtype) for k, v in params.items()},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, sort_keys=True))
        for k in sorted(params):
            buf = io.BytesIO()
            np.save(buf, params[k], allow_pickle=False)
            zf.writestr(f"params/{k}.npy", buf.getvalue())


def load_checkpoint(path):
    """Returns (params, meta) as written by :func:`save_checkpoint`."""
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json").decode())
        params = {}
        for k in meta["shapes"]:
            buf = io.BytesIO(zf.read(f"params/{k}.npy"))
            params[k] = np.load(buf, allow_pickle=False)
    return params, meta
