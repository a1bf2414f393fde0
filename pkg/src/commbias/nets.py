"""Agent architectures and optimizers built on :mod:`commbias.autodiff`.

Networks own their parameters as a name -> float32 array mapping. Forward
methods take an optional ``params`` mapping of tensors; pass ``bind(net, tape)``
to differentiate, or nothing for constant-only inference.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    pass


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def one_hot(index, width: int, dtype=DTYPE) -> np.ndarray:
    """One-hot rows; negative indices produce all-zero rows."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros(index.shape + (width,), dtype=dtype)
    live = index >= 0
    out[live, index[live]] = 1
    return out


class Net:
    params: dict[str, np.ndarray]

    def bind(self, tape: Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def _p(self, params):
        return self.bind() if params is None else params

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: Mapping[str, np.ndarray]) -> None:
        for k, v in params.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k] = np.array(v, dtype=DTYPE)


def _linear(p, name, x):
    return ad.add(ad.matmul(x, p[name + ".w"]), p[name + ".b"])


def _check_finite(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.values)):
        raise NonFiniteError(f"non-finite activations in layer {layer!r}")
    return t


class DigitAgentNet(Net):
    """Speaker or listener for the digit-sum game.

    Image mode: conv(5x5, 32) -> pool -> conv(5x5, 64) -> pool -> [concat message]
    -> linear 1024 -> policy head. Symbolic mode replaces the conv stack with a
    one-hot digit fed to a 2x64 MLP.
    """

    def __init__(self, role: str, rng: np.random.Generator, symbolic: bool = True,
                 n_messages: int = 20, n_actions: int = 19, n_digits: int = 10,
                 hidden: int = 1024, mlp: tuple[int, ...] = (64, 64)):
        if role not in ("speaker", "listener"):
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.symbolic = symbolic
        self.n_messages = n_messages
        self.n_digits = n_digits
        self.out_width = n_messages if role == "speaker" else n_actions
        msg = n_messages if role == "listener" else 0
        self.params = {}
        if symbolic:
            sizes = [n_digits + msg, *mlp]
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                self.params[f"mlp{i}.w"] = _uniform(rng, (a, b), a)
                self.params[f"mlp{i}.b"] = _uniform(rng, (b,), a)
            last = sizes[-1]
        else:
            self.params["conv0.w"] = _uniform(rng, (5, 5, 1, 32), 25)
            self.params["conv0.b"] = _uniform(rng, (32,), 25)
            self.params["conv1.w"] = _uniform(rng, (5, 5, 32, 64), 25 * 32)
            self.params["conv1.b"] = _uniform(rng, (64,), 25 * 32)
            flat = 4 * 4 * 64 + msg
            self.params["fc.w"] = _uniform(rng, (flat, hidden), flat)
            self.params["fc.b"] = _uniform(rng, (hidden,), flat)
            last = hidden
        self.params["head.w"] = _uniform(rng, (last, self.out_width), last)
        self.params["head.b"] = _uniform(rng, (self.out_width,), last)

    @property
    def message_rows(self) -> tuple[str, slice]:
        """Parameter name and row slice that read the message input."""
        if self.role != "listener":
            raise ValueError("speaker has no message input")
        if self.symbolic:
            return "mlp0.w", slice(self.n_digits, self.n_digits + self.n_messages)
        return "fc.w", slice(1024, 1024 + self.n_messages)

    def zero_message_path(self) -> None:
        name, rows = self.message_rows
        self.params[name][rows] = 0

    def encode_inputs(self, digits_or_images) -> np.ndarray:
        x = np.asarray(digits_or_images)
        if self.symbolic:
            if x.ndim != 1:
                raise ValueError(f"symbolic input must be a vector of digits, got shape {x.shape}")
            return one_hot(x, self.n_digits)
        if x.ndim == 3:
            x = x[..., None]
        if x.shape[1:] != (28, 28, 1):
            raise ValueError(f"image input must be [N, 28, 28], got shape {x.shape}")
        return x.astype(DTYPE)

    def logits(self, obs, message=None, params=None) -> Tensor:
        """Policy logits. ``obs`` is pre-encoded (see :meth:`encode_inputs`);
        ``message`` is a [N, n_messages] one-hot (all-zero rows allowed)."""
        p = self._p(params)
        if (message is not None) != (self.role == "listener"):
            raise ValueError("message must be given iff the net is a listener")
        x = ad.as_tensor(obs)
        if self.symbolic:
            if message is not None:
                x = ad.concat([x, message], axis=1)
            n_layers = sum(1 for k in p if k.startswith("mlp") and k.endswith(".w"))
            for i in range(n_layers):
                x = ad.relu(_linear(p, f"mlp{i}", x))
        else:
            x = ad.relu(ad.add(ad.conv2d(x, p["conv0.w"]), p["conv0.b"]))
            x = ad.maxpool2d(x)
            x = ad.relu(ad.add(ad.conv2d(x, p["conv1.w"]), p["conv1.b"]))
            x = ad.maxpool2d(x)
            x = ad.reshape(x, (x.shape[0], -1))
            if message is not None:
                x = ad.concat([x, message], axis=1)
            x = ad.relu(_linear(p, "fc", x))
        return _linear(p, "head", x)


def digit_forward(net: DigitAgentNet, obs, message=None) -> np.ndarray:
    """Policy logits for raw digits/images and an optional message symbol array."""
    x = net.encode_inputs(obs)
    m = None if message is None else one_hot(message, net.n_messages)
    return net.logits(x, m).values


class TreasureAgentNet(Net):
    """conv(1x1, 6) -> MLP -> [concat message, previous action] -> LSTM -> heads."""

    def __init__(self, rng: np.random.Generator, view: int = 5, conv_channels: int = 6,
                 mlp: tuple[int, ...] = (64, 64), lstm: int = 128, n_actions: int = 5,
                 n_messages: int = 5):
        self.view = view
        self.hidden = lstm
        self.n_actions = n_actions
        self.n_messages = n_messages
        self.params = {
            "conv.w": _uniform(rng, (1, 1, 3, conv_channels), 3),
            "conv.b": _uniform(rng, (conv_channels,), 3),
        }
        sizes = [view * view * conv_channels, *mlp]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"mlp{i}.w"] = _uniform(rng, (a, b), a)
            self.params[f"mlp{i}.b"] = _uniform(rng, (b,), a)
        self.n_mlp = len(mlp)
        self.mlp_out = sizes[-1]
        d = self.mlp_out + n_messages + n_actions
        self.params["lstm.w"] = _uniform(rng, (d + lstm, 4 * lstm), d + lstm)
        b = np.zeros(4 * lstm, dtype=DTYPE)
        b[lstm:2 * lstm] = 1.0  # forget gate
        self.params["lstm.b"] = b
        for name, width in (("pi_a", n_actions), ("pi_m", n_messages), ("value", 1)):
            self.params[name + ".w"] = _uniform(rng, (lstm, width), lstm)
            self.params[name + ".b"] = np.zeros(width, dtype=DTYPE)

    @property
    def message_rows(self) -> tuple[str, slice]:
        return "lstm.w", slice(self.mlp_out, self.mlp_out + self.n_messages)

    def zero_message_path(self) -> None:
        name, rows = self.message_rows
        self.params[name][rows] = 0

    def initial_state(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        z = np.zeros((batch, self.hidden), dtype=DTYPE)
        return z, z.copy()

    def step(self, obs, message, prev_action, state, params=None):
        """One recurrent step.

        ``obs``: [N, 5, 5, 3]; ``message``/``prev_action``: one-hot rows (zeros
        allowed); ``state``: (h, c). Returns (action logits, message logits,
        value [N], (h, c)).
        """
        p = self._p(params)
        h, c = state
        if h.shape[-1] != self.hidden or c.shape[-1] != self.hidden:
            raise ValueError(f"state width must be {self.hidden}, got {h.shape}, {c.shape}")
        x = ad.relu(ad.add(ad.conv2d(obs, p["conv.w"]), p["conv.b"]))
        x = ad.reshape(x, (x.shape[0], -1))
        for i in range(self.n_mlp):
            x = ad.relu(_linear(p, f"mlp{i}", x))
        x = ad.concat([x, message, prev_action], axis=1)
        h, c = ad.lstm_cell(x, h, c, p["lstm.w"], p["lstm.b"])
        _check_finite(h, "lstm")
        logits_a = _check_finite(_linear(p, "pi_a", h), "pi_a")
        logits_m = _check_finite(_linear(p, "pi_m", h), "pi_m")
        value = _check_finite(ad.reshape(_linear(p, "value", h), (h.shape[0],)), "value")
        return logits_a, logits_m, value, (h, c)


def treasure_step(net: TreasureAgentNet, obs, prev_message, state, prev_action=None):
    """Numpy convenience wrapper: symbols in, arrays out. ``None``/-1 symbols are zero vectors."""
    obs = np.asarray(obs, dtype=DTYPE)
    n = obs.shape[0]
    msg = one_hot(np.full(n, -1) if prev_message is None else prev_message, net.n_messages)
    act = one_hot(np.full(n, -1) if prev_action is None else prev_action, net.n_actions)
    la, lm, v, (h, c) = net.step(obs, msg, act, state)
    return la.values, lm.values, v.values, (h.values, c.values)


# ----------------------------------------------------------------- optimizers

class Optimizer:
    hyper: dict

    def __init__(self) -> None:
        self.buffers: dict[str, dict[str, np.ndarray]] = {}
        self.steps = 0

    def _check(self, params, grads):
        for k, g in grads.items():
            if k not in params or params[k].shape != g.shape:
                shape = params[k].shape if k in params else None
                raise ValueError(f"gradient for {k!r} has shape {g.shape}, parameter {shape}")

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"{slot}/{k}": v for slot, bufs in self.buffers.items() for k, v in bufs.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], steps: int) -> None:
        for key, v in arrays.items():
            slot, name = key.split("/", 1)
            self.buffers.setdefault(slot, {})[name] = np.array(v, dtype=DTYPE)
        self.steps = steps


class Adam(Optimizer):
    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__()
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.buffers = {"m": {}, "v": {}}

    def learning_rate(self, global_step: int | None = None) -> float:
        return self.hyper["lr"]

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             global_step: int | None = None) -> dict[str, np.ndarray]:
        self._check(params, grads)
        self.steps += 1
        lr, b1, b2, eps = (self.hyper[k] for k in ("lr", "beta1", "beta2", "eps"))
        c1 = 1 - b1 ** self.steps
        c2 = 1 - b2 ** self.steps
        for k, g in grads.items():
            g = g.astype(DTYPE, copy=False)
            m = self.buffers["m"].setdefault(k, np.zeros_like(params[k]))
            v = self.buffers["v"].setdefault(k, np.zeros_like(params[k]))
            m *= DTYPE(b1)
            m += DTYPE(1 - b1) * g
            v *= DTYPE(b2)
            v += DTYPE(1 - b2) * g * g
            mhat = m / DTYPE(c1)
            vhat = v / DTYPE(c2)
            params[k] -= (DTYPE(lr) * mhat / (np.sqrt(vhat) + DTYPE(eps))).astype(DTYPE)
        return params


class RMSProp(Optimizer):
    """RMSProp with learning rate ``lr * anneal ** (global_step / anneal_every)``."""

    def __init__(self, lr: float = 1e-3, decay: float = 0.99, eps: float = 1e-6,
                 anneal: float = 0.99, anneal_every: float = 1e6):
        super().__init__()
        self.hyper = dict(lr=lr, decay=decay, eps=eps, anneal=anneal, anneal_every=anneal_every)
        self.buffers = {"ms": {}}

    def learning_rate(self, global_step: int) -> float:
        h = self.hyper
        return h["lr"] * h["anneal"] ** (global_step / h["anneal_every"])

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             global_step: int = 0) -> dict[str, np.ndarray]:
        self._check(params, grads)
        self.steps += 1
        lr = DTYPE(self.learning_rate(global_step))
        decay, eps = DTYPE(self.hyper["decay"]), DTYPE(self.hyper["eps"])
        for k, g in grads.items():
            g = g.astype(DTYPE, copy=False)
            ms = self.buffers["ms"].setdefault(k, np.zeros_like(params[k]))
            ms *= decay
            ms += (1 - decay) * g * g
            params[k] -= lr * g / (np.sqrt(ms) + eps)
        return params


def adam_step(state: Adam, params, grads):
    return state.step(params, grads)


def rmsprop_step(state: RMSProp, params, grads, global_step: int):
    return state.step(params, grads, global_step)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale grads in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = DTYPE(max_norm / norm)
        for g in grads.values():
            g *= s
    return norm
