"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_coords: int

    def passed(self, rtol: float = 1e-4) -> bool:
        return self.max_rel_err < rtol


def numerical_grad(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. every coordinate of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    # the floor keeps coordinates with (near-)zero gradient from dividing by noise
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(
    build: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    name: str = "expr",
) -> GradCheckResult:
    """Compare tape gradients of the scalar ``build()`` against central differences.

    ``build`` must recompute the loss from the current ``.data`` of ``params``.
    """
    with Tape() as tape:
        loss = build()
        for p in params:
            p.grad = None
        tape.backward(loss)
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        with Tape():
            return float(build().data)

    rel, ab, n = 0.0, 0.0, 0
    for p, ga in zip(params, analytic):
        gn = numerical_grad(value, p.data, eps)
        rel = max(rel, float(relative_error(ga, gn).max(initial=0.0)))
        ab = max(ab, float(np.abs(ga - gn).max(initial=0.0)))
        n += p.data.size
    return GradCheckResult(name, rel, ab, n)


# --- sweep over every differentiable piece used in training -----------------


def micro_instance(seed: int = 0, variant: str = "COMPLETE", tau: float = 0.6):
    """The smallest full configuration: B=2 (one labeled, one unlabeled), H=W=2, D=2, C=2."""
    from .nets import ModelDims
    from .trainer import BatchSpec, TrainConfig, init_state

    dims = ModelDims(in_channels=3, D=2, C=2, H=2, W=2, heads=1)
    cfg = TrainConfig(dims=dims, batch=BatchSpec(B_L=1, B_U=1), tau=tau, variant=variant, seed=seed, epochs=1)
    state = init_state(cfg)
    rng = np.random.default_rng([seed, 0x61C])
    # Zero biases put dead-row pre-activations exactly on the ReLU kink, where central
    # differences are meaningless; random biases (and a non-identity CWT output layer,
    # so every branch carries gradient) keep the check away from kinks.
    for name, t in state.params.named_tensors().items():
        if t.requires_grad and (name.endswith(("b1", "b2", "bias")) or name == "cwt.mlp_w2"):
            t.data = rng.uniform(-0.5, 0.5, size=t.shape) + (1.0 if name == "cwt.mlp_b2" else 0.0)
    images_l = rng.uniform(0.0, 1.0, size=(1, 2, 2, 3))
    images_u = rng.uniform(0.0, 1.0, size=(1, 2, 2, 3))
    masks_l = rng.integers(0, 2, size=(1, 2, 2))
    return cfg, state, images_l, masks_l, images_u


def sweep(seed: int = 0, eps: float = 1e-5) -> list[GradCheckResult]:
    from . import tensor as T
    from .losses import consistency_loss, pseudo_label_loss, supervised_ce, total_loss, weight_regularizer
    from .pseudo import threshold_labels
    from .nets import cwt_forward, encode, head_forward
    from .trainer import effective_weights, forward, make_variant

    rng = np.random.default_rng(seed)

    def p(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    out = []
    a, b, v = p(3, 4), p(4, 2), p(4)
    w34 = Tensor(rng.standard_normal((3, 4)))
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    g, bb = p(4), p(4)
    img = p(2, 3, 3, 2)
    mix = rng.standard_normal((3, 3, 2))
    wimg = Tensor(rng.standard_normal((2, 3, 3, 2)))
    cases = {
        "matmul": (lambda: T.sum(T.matmul(a, b)), [a, b]),
        "add": (lambda: T.sum(T.mul(T.add(a, v), w34)), [a, v]),
        "sub": (lambda: T.sum(T.mul(T.sub(a, v), w34)), [a, v]),
        "mul": (lambda: T.sum(T.mul(a, a)), [a]),
        "scale": (lambda: T.sum(T.mul(T.scale(a, 1.7), w34)), [a]),
        "relu": (lambda: T.sum(T.mul(T.relu(a), w34)), [a]),
        "log": (lambda: T.sum(T.mul(T.log(pos), w34)), [pos]),
        "mean": (lambda: T.mean(T.square(a)), [a]),
        "concat": (lambda: T.sum(T.square(T.concat([a, pos]))), [a, pos]),
        "softmax": (lambda: T.sum(T.mul(T.softmax(a), w34)), [a]),
        "log_softmax": (lambda: T.sum(T.mul(T.log_softmax(a), w34)), [a]),
        "layer_norm": (lambda: T.sum(T.mul(T.layer_norm(a, g, bb), w34)), [a, g, bb]),
        "exp": (lambda: T.sum(T.mul(T.exp(a), w34)), [a]),
        "square": (lambda: T.sum(T.mul(T.square(a), w34)), [a]),
        "sum_axis": (lambda: T.sum(T.square(T.sum(a, axis=0))), [a]),
        "reshape": (lambda: T.sum(T.mul(T.reshape(a, (4, 3)), T.reshape(w34, (4, 3)))), [a]),
        "transpose": (lambda: T.sum(T.mul(T.transpose(a), T.transpose(w34))), [a]),
        "slice_axis": (lambda: T.sum(T.square(T.slice_axis(a, 1, 3))), [a]),
        "broadcast_to": (lambda: T.sum(T.mul(T.broadcast_to(T.reshape(v, (1, 4)), (3, 4)), w34)), [v]),
        "spatial_mix": (lambda: T.sum(T.mul(T.spatial_mix(img, mix), wimg)), [img]),
    }
    for name, (build, params) in cases.items():
        out.append(check_gradients(build, params, eps, name))

    cfg, state, xl, yl, xu = micro_instance(seed)
    prm = state.params
    enc = list(prm.encoder.tensors().values())
    stu = list(prm.student.tensors().values())
    cwt = list(prm.cwt.tensors().values())
    x = Tensor(np.concatenate([xl, xu]))
    out.append(check_gradients(lambda: T.sum(T.square(encode(prm.encoder, x).pixels)), enc, eps, "encode"))

    def head_loss():
        return T.sum(T.square(head_forward(prm.student, encode(prm.encoder, x))))

    out.append(check_gradients(head_loss, enc + stu, eps, "head_forward"))

    def cwt_loss():
        f = encode(prm.encoder, x)
        return T.sum(T.square(cwt_forward(prm.cwt, f.pooled, T.concat([f.pooled, f.pooled]))))

    out.append(check_gradients(cwt_loss, enc + cwt, eps, "cwt_forward"))

    def ce_loss():
        f = encode(prm.encoder, Tensor(xl))
        w = cwt_forward(prm.cwt, f.pooled, T.concat([f.pooled, f.pooled]))
        return supervised_ce(head_forward(prm.student, f), w, yl)

    out.append(check_gradients(ce_loss, enc + stu + cwt, eps, "supervised_ce"))

    # a fixed mixed mask (two confident pixels) so the pseudo-label path is always exercised
    plb = threshold_labels(np.array([[[[0.9, 0.1], [0.5, 0.5]], [[0.45, 0.55], [0.2, 0.8]]]]), 0.7)

    def pl_loss():
        f = encode(prm.encoder, Tensor(xu))
        w = cwt_forward(prm.cwt, f.pooled, T.concat([f.pooled, f.pooled]))
        return pseudo_label_loss(head_forward(prm.student, f), w, plb)[0]

    out.append(check_gradients(pl_loss, enc + stu + cwt, eps, "pseudo_label_loss"))

    def consist():
        f = encode(prm.encoder, Tensor(xu))
        return consistency_loss(head_forward(prm.teacher1, f), head_forward(prm.teacher2, f), 1)[0]

    out.append(check_gradients(consist, enc, eps, "consistency_loss"))

    def reg():
        f = encode(prm.encoder, x)
        return weight_regularizer(cwt_forward(prm.cwt, f.pooled, T.concat([f.pooled, f.pooled])))

    out.append(check_gradients(reg, enc + cwt, eps, "weight_regularizer"))

    wiring = make_variant(cfg)
    lw = effective_weights(cfg, wiring)

    def composed():
        fwd = forward(prm, xl, yl, xu, cfg, wiring)
        return total_loss(fwd.ce, fwd.pl, fwd.consist, fwd.reg, lw)

    out.append(check_gradients(composed, enc + stu + cwt, eps, "total_loss"))
    return out
