"""Small dense networks with explicit tapes, exact analytic backprop,
Adam, and finite-difference gradient checking.

Everything here is plain float64 numpy. Forward passes route through
``np.einsum`` so that a row of a batched call is bit-identical to the
same row evaluated alone (BLAS matmul does not guarantee that).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class DimensionMismatchError(ValueError):
    """Input or gradient shape does not match the network."""


class StaleTapeError(ValueError):
    """Tape was produced by a network with different shapes."""


class TrainingDivergenceError(RuntimeError):
    """A non-finite value showed up where training math needs a finite one."""


@dataclass
class Mlp:
    """Fully connected net. Hidden layers use ``activation``, the output
    layer is always identity. ``weights[j]`` has shape (out_j, in_j)."""

    layer_sizes: tuple
    weights: list
    biases: list
    activation: str = "tanh"

    def num_parameters(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


@dataclass
class ForwardTape:
    """Activation record from one forward pass: per-layer inputs and
    pre-activations, enough to run the exact backward pass."""

    inputs: list
    pre: list
    single: bool


@dataclass
class AdamState:
    step_count: int
    first_moment: list
    second_moment: list
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_mlp(layer_sizes, activation="tanh", rng=None):
    """Build an Mlp with weights uniform in [-s, s], s = 1/sqrt(fan_in),
    and zero biases. Deterministic given the generator."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    sizes = tuple(int(n) for n in layer_sizes)
    if len(sizes) < 2 or any(n <= 0 for n in sizes):
        raise ValueError(f"layer_sizes must be >= 2 positive ints, got {sizes}")
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(layer_sizes=sizes, weights=weights, biases=biases, activation=activation)


def _linear(h, w, b):
    # einsum keeps each output row's accumulation order independent of the
    # batch size; the batched-vs-sequential bit-identity contract needs that.
    return np.einsum("bi,oi->bo", h, w) + b


def _activate(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad_from_output(name, h):
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (h > 0.0).astype(np.float64)
    return np.ones_like(h)


def mlp_forward(net, x):
    """Run the network on a vector (n_in,) or batch (B, n_in).

    Returns (output, tape). Pure: same parameters and input give
    bit-identical output.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != net.layer_sizes[0]:
        raise DimensionMismatchError(
            f"input has size {x.shape}, network expects {net.layer_sizes[0]}"
        )
    n_layers = len(net.weights)
    inputs, pre = [], []
    for j in range(n_layers):
        inputs.append(h)
        z = _linear(h, net.weights[j], net.biases[j])
        pre.append(z)
        h = _activate(net.activation, z) if j < n_layers - 1 else z
    tape = ForwardTape(inputs=inputs, pre=pre, single=single)
    return (h[0] if single else h), tape


def _check_tape(net, tape):
    if len(tape.pre) != len(net.weights) or len(tape.inputs) != len(net.weights):
        raise StaleTapeError("tape layer count does not match network")
    for j, (inp, z) in enumerate(zip(tape.inputs, tape.pre)):
        if inp.shape[1] != net.layer_sizes[j] or z.shape[1] != net.layer_sizes[j + 1]:
            raise StaleTapeError(
                f"tape shapes at layer {j} do not match network layer sizes"
            )


def mlp_backward(net, tape, output_grad):
    """Exact chain rule for the recorded activation.

    Returns (weight_grads, bias_grads, input_grad); gradients are summed
    over the batch dimension.
    """
    _check_tape(net, tape)
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.single:
        g = g[None, :]
    if g.shape != tape.pre[-1].shape:
        raise DimensionMismatchError(
            f"output_grad shape {output_grad.shape} does not match output {tape.pre[-1].shape}"
        )
    n_layers = len(net.weights)
    weight_grads = [None] * n_layers
    bias_grads = [None] * n_layers
    delta = g
    input_grad = None
    for j in reversed(range(n_layers)):
        weight_grads[j] = delta.T @ tape.inputs[j]
        bias_grads[j] = delta.sum(axis=0)
        dh = delta @ net.weights[j]
        if j > 0:
            delta = dh * _activation_grad_from_output(net.activation, tape.inputs[j])
        else:
            input_grad = dh
    return weight_grads, bias_grads, (input_grad[0] if tape.single else input_grad)


def mlp_parameters(net):
    """Flat parameter list [W0, b0, W1, b1, ...] with matching names."""
    params, names = [], []
    for j, (w, b) in enumerate(zip(net.weights, net.biases)):
        params.append(w)
        names.append(f"layer{j}.weight")
        params.append(b)
        names.append(f"layer{j}.bias")
    return params, names


def interleave_grads(weight_grads, bias_grads):
    """Order gradients to match :func:`mlp_parameters`."""
    out = []
    for wg, bg in zip(weight_grads, bias_grads):
        out.append(wg)
        out.append(bg)
    return out


def init_adam(params, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
    return AdamState(
        step_count=0,
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params, grads, state, names=None):
    """One Adam update with bias correction. Functional: inputs are not
    mutated, the updated parameters and state are returned."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionMismatchError("params/grads/state length mismatch")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise DimensionMismatchError(
                f"gradient shape {g.shape} does not match parameter shape {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"parameter {i}"
            raise TrainingDivergenceError(f"non-finite gradient in {label}")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m1 = b1 * m + (1.0 - b1) * g
        v1 = b2 * v + (1.0 - b2) * g * g
        m_hat = m1 / (1.0 - b1**t)
        v_hat = v1 / (1.0 - b2**t)
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m1)
        new_v.append(v1)
    new_state = AdamState(
        step_count=t,
        first_moment=new_m,
        second_moment=new_v,
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
    )
    return new_params, new_state


def apply_params(net, params):
    """Rebuild an Mlp from a parameter list ordered like mlp_parameters."""
    weights = [params[2 * j] for j in range(len(net.weights))]
    biases = [params[2 * j + 1] for j in range(len(net.biases))]
    return Mlp(net.layer_sizes, weights, biases, net.activation)


def mlp_to_tensors(net, prefix):
    """Named-tensor view of the parameters, for checkpointing."""
    tensors = {}
    for j, (w, b) in enumerate(zip(net.weights, net.biases)):
        tensors[f"{prefix}.w{j}"] = w
        tensors[f"{prefix}.b{j}"] = b
    return tensors


def mlp_from_tensors(tensors, prefix, activation="tanh"):
    """Rebuild an Mlp from checkpoint tensors named ``<prefix>.w<j>`` /
    ``<prefix>.b<j>``; layer sizes come from the weight shapes."""
    weights, biases = [], []
    j = 0
    while f"{prefix}.w{j}" in tensors:
        weights.append(np.asarray(tensors[f"{prefix}.w{j}"], dtype=np.float64))
        biases.append(np.asarray(tensors[f"{prefix}.b{j}"], dtype=np.float64))
        j += 1
    if not weights:
        raise KeyError(f"no tensors under prefix {prefix!r}")
    sizes = (weights[0].shape[1],) + tuple(w.shape[0] for w in weights)
    return Mlp(sizes, weights, biases, activation)


# --- losses used by grad_check and the trainers ---

LOSS_CODES = ("identity", "mse", "l1")


def loss_value(code, y, target=None):
    y = np.asarray(y, dtype=np.float64)
    if code == "identity":
        return float(np.sum(y))
    if target is None:
        raise ValueError(f"loss {code!r} needs a target")
    t = np.asarray(target, dtype=np.float64)
    if code == "mse":
        return float(np.mean((y - t) ** 2))
    if code == "l1":
        return float(np.mean(np.abs(y - t)))
    raise ValueError(f"unknown loss code {code!r}")


def loss_grad(code, y, target=None):
    y = np.asarray(y, dtype=np.float64)
    if code == "identity":
        return np.ones_like(y)
    t = np.asarray(target, dtype=np.float64)
    if code == "mse":
        return 2.0 * (y - t) / y.size
    if code == "l1":
        # sign(0) = 0: the subgradient convention keeps backward total
        return np.sign(y - t) / y.size
    raise ValueError(f"unknown loss code {code!r}")


def finite_difference_grads(eval_loss, tensors, h):
    """Central finite differences of ``eval_loss()`` with respect to every
    entry of ``tensors``. Perturbs in place and restores afterwards."""
    grads = []
    for arr in tensors:
        g = np.zeros_like(arr)
        flat, gf = arr.ravel(), g.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = eval_loss()
            flat[idx] = orig - h
            lm = eval_loss()
            flat[idx] = orig
            gf[idx] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def gradient_relative_error(analytic, numeric):
    """Infinity-norm difference scaled by the larger gradient magnitude."""
    diff = max(float(np.max(np.abs(a - n))) for a, n in zip(analytic, numeric))
    scale = max(
        max(float(np.max(np.abs(a))) for a in analytic),
        max(float(np.max(np.abs(n))) for n in numeric),
        1e-12,
    )
    return diff / scale


@dataclass
class GradCheckReport:
    loss: str
    trials: int
    h: float
    rel_errs: list = field(default_factory=list)

    @property
    def max_rel_err(self):
        return max(self.rel_errs) if self.rel_errs else 0.0


def grad_check(net, loss="mse", trials=20, h=1e-3, seed=0):
    """Compare analytic gradients against central finite differences over
    ``trials`` random seeded (parameters, input, target) draws using the
    architecture of ``net``. Report-only: never raises on mismatch."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if loss not in LOSS_CODES:
        raise ValueError(f"unknown loss code {loss!r}")
    report = GradCheckReport(loss=loss, trials=trials, h=h)
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, trial]))
        trial_net = init_mlp(net.layer_sizes, net.activation, rng)
        for b in trial_net.biases:
            b[:] = rng.uniform(-0.5, 0.5, size=b.shape)
        x = rng.uniform(-1.0, 1.0, size=net.layer_sizes[0])
        target = rng.uniform(-1.0, 1.0, size=net.layer_sizes[-1])

        y, tape = mlp_forward(trial_net, x)
        wg, bg, _ = mlp_backward(trial_net, tape, loss_grad(loss, y, target))
        analytic = interleave_grads(wg, bg)

        params, _ = mlp_parameters(trial_net)

        def eval_loss():
            out, _ = mlp_forward(trial_net, x)
            return loss_value(loss, out, target)

        numeric = finite_difference_grads(eval_loss, params, h)
        report.rel_errs.append(gradient_relative_error(analytic, numeric))
    return report
