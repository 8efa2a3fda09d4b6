"""Time-conditioned MLP noise estimator with hand-written backpropagation.

Input rows are ``concat(x_t, sinusoidal_embedding(t))``; hidden layers use SiLU
and the output layer is linear. A :class:`QuantizedNetwork` keeps the same
forward contract but fake-quantizes every affine weight and every affine input.
"""
import numpy as np

from dmquant.core import ConfigError, DimensionError, InputError, as_tensor, matmul
from dmquant.diffusion import OutputHooks
from dmquant.quantizer import QuantParams, quant_dequant


def time_embedding(t, dim, T=None):
    """Sinusoidal embedding; ``t`` scalar gives shape ``(dim,)``, an array gives ``(n, dim)``."""
    if dim % 2:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    tt = np.asarray(t, dtype=np.float64)
    if T is not None and tt.size and (tt.min() < 0 or tt.max() > T):
        raise InputError(f"timestep outside [0, {T}]")
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    ang = tt[..., None] * omega
    out = np.empty(tt.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def silu(x):
    with np.errstate(over="ignore"):  # exp(-x) -> inf gives the correct limit -0
        return x / (1.0 + np.exp(-x))


def silu_grad(x):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


class ScoreNetwork:
    """MLP ``eps_theta(x_t, t)``; ``layers`` is a list of ``(W[out, in], b[out])``."""

    def __init__(self, input_dim, layers, time_embed_dim=32, T=None):
        self.input_dim = int(input_dim)
        self.time_embed_dim = int(time_embed_dim)
        self.T = T
        self.layers = [(as_tensor(W), as_tensor(b)) for W, b in layers]
        fan_in = self.input_dim + self.time_embed_dim
        for i, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or W.shape[1] != fan_in or b.shape != (W.shape[0],):
                raise DimensionError(f"layer {i} shape {W.shape} does not chain from {fan_in}")
            fan_in = W.shape[0]
        if fan_in != self.input_dim:
            raise DimensionError("last layer must output input_dim values")

    @classmethod
    def init(cls, input_dim, rng, hidden_dims=(128, 128, 128), time_embed_dim=32, T=None):
        dims = [input_dim + time_embed_dim, *hidden_dims, input_dim]
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            u = rng.uniform(fan_out * fan_in).reshape(fan_out, fan_in)
            layers.append(((2.0 * u - 1.0) * limit, np.zeros(fan_out)))
        return cls(input_dim, layers, time_embed_dim, T)

    @property
    def hidden_dims(self):
        return [W.shape[0] for W, _ in self.layers[:-1]]

    def architecture(self):
        return {
            "input_dim": self.input_dim,
            "time_embed_dim": self.time_embed_dim,
            "hidden_dims": self.hidden_dims,
        }

    def copy(self):
        return ScoreNetwork(
            self.input_dim, [(W.copy(), b.copy()) for W, b in self.layers], self.time_embed_dim, self.T
        )

    def _input(self, x, t):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"expected (n, {self.input_dim}) input, got {x.shape}")
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        if self.T is not None and t.size and (t.min() < 0 or t.max() > self.T):
            raise InputError(f"timestep outside [0, {self.T}]")
        return np.concatenate([x, time_embedding(t, self.time_embed_dim)], axis=1)

    def _weights(self):
        return self.layers

    def _quantize_input(self, i, h):
        return h

    def forward(self, x, t, taps=None):
        """Predicted noise for each row. ``taps`` (a list) receives each affine layer's input."""
        h = self._input(x, t)
        layers = self._weights()
        for i, (W, b) in enumerate(layers):
            if taps is not None:
                taps.append(h.copy())
            h = matmul(self._quantize_input(i, h), np.ascontiguousarray(W.T)) + b
            if i + 1 < len(layers):
                h = silu(h)
        return h

    def backward(self, x, t, eps):
        """Mean squared error against ``eps`` and its exact gradients ``[(dW, db), ...]``."""
        h = self._input(x, t)
        inputs, pre = [], []
        for i, (W, b) in enumerate(self.layers):
            inputs.append(h)
            a = matmul(h, np.ascontiguousarray(W.T)) + b
            pre.append(a)
            h = silu(a) if i + 1 < len(self.layers) else a
        eps = as_tensor(eps)
        if eps.shape != h.shape:
            raise DimensionError(f"target shape {eps.shape} != output shape {h.shape}")
        diff = h - eps
        loss = float(np.mean(diff * diff))
        g = 2.0 * diff / diff.size
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[i]
            if i + 1 < len(self.layers):
                g = g * silu_grad(pre[i])
            grads[i] = (matmul(np.ascontiguousarray(g.T), inputs[i]), g.sum(axis=0))
            if i > 0:
                g = matmul(g, W)
        return loss, grads


class QuantizedNetwork(ScoreNetwork):
    """Fake-quantized copy of a :class:`ScoreNetwork`.

    ``weight_params[i]`` and ``activation_params[i]`` belong to affine layer ``i``.
    Biases, SiLU and the time embedding stay in full precision.
    """

    def __init__(self, base, weight_params, activation_params, output_hooks=None):
        n = len(base.layers)
        if len(weight_params) != n or len(activation_params) != n:
            raise ConfigError(f"need params for all {n} affine layers")
        if any(p is None for p in weight_params) or any(p is None for p in activation_params):
            raise ConfigError("missing quantization params for a layer")
        qlayers = [(quant_dequant(W, wp), b.copy()) for (W, b), wp in zip(base.layers, weight_params)]
        super().__init__(base.input_dim, qlayers, base.time_embed_dim, base.T)
        self.base_layers = [(W.copy(), b.copy()) for W, b in base.layers]
        self.weight_params = list(weight_params)
        self.activation_params = list(activation_params)
        self.output_hooks = output_hooks or OutputHooks()

    def _quantize_input(self, i, h):
        return quant_dequant(h, self.activation_params[i])

    def backward(self, x, t, eps):
        raise NotImplementedError("quantized networks are inference-only")

    def params_json(self):
        hooks = {k: (None if v is None else v.to_json())
                 for k, v in (("mu", self.output_hooks.mu), ("sigma", self.output_hooks.sigma),
                              ("x", self.output_hooks.x))}
        return {
            "weights": [p.to_json() for p in self.weight_params],
            "activations": [p.to_json() for p in self.activation_params],
            "output_hooks": hooks,
        }

    @classmethod
    def from_params_json(cls, base, d):
        hooks = OutputHooks(**{k: (None if v is None else QuantParams.from_json(v))
                               for k, v in d.get("output_hooks", {}).items()})
        return cls(
            base,
            [QuantParams.from_json(p) for p in d["weights"]],
            [QuantParams.from_json(p) for p in d["activations"]],
            hooks,
        )


def quantize_network(net, weight_params, activation_params, output_hooks=None):
    return QuantizedNetwork(net, weight_params, activation_params, output_hooks)
