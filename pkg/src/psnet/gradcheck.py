"""Finite-difference verification of every block's adjoints in 64-bit precision."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    EOS,
    BOS,
    ModelConfig,
    decode_train,
    encode,
    init_params,
    pdp_layer_forward,
    sr_module_forward,
)
from .nn import (
    causal_mask,
    decoding_layer_forward,
    encoding_layer_forward,
    init_attention,
    init_decoder_layer,
    init_encoder_layer,
    init_layer_norm,
    init_mlp,
    layer_norm,
    mlp_forward,
    multi_head_attention,
    named_parameters,
)

REDUCED = ModelConfig(
    image_size=16, patch=8, width=8, heads=2,
    pdp_layers=2, sr_modules=2, decoder_layers=2,
    vocab_size=11, max_len=6, precision="float64",
)

# below this magnitude the relative error is measured against the floor instead
ABS_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = ABS_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class BlockReport:
    block: str
    max_error: float
    worst_tensor: str
    worst_index: int
    analytic: float
    numeric: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.block}\t{self.max_error:.3e}\t{status}\t{self.checked} coords"


def check_gradients(
    block: str,
    loss_fn: Callable[[], Tensor],
    wrt: list[tuple[str, Tensor]],
    rng: np.random.Generator,
    coords_per_tensor: int = 8,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> BlockReport:
    """Compare tape gradients of ``loss_fn()`` with central differences on sampled coordinates."""
    with ad.GradTape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, [t for _, t in wrt])
    worst = BlockReport(block, 0.0, "", -1, 0.0, 0.0, 0, tol)
    for name, t in wrt:
        size = t.data.size
        idx = np.arange(size) if size <= coords_per_tensor else rng.choice(size, coords_per_tensor, replace=False)
        original = t.data

        def f(x, t=t):
            t.data = x
            return float(loss_fn().data)

        try:
            numeric = ad.finite_difference_gradient(f, original, eps, idx).reshape(-1)
        finally:
            t.data = original
        analytic = grads[t.node_id].reshape(-1)
        for i in idx:
            err = relative_error(analytic[i], numeric[i])
            worst.checked += 1
            if err > worst.max_error:
                worst.max_error, worst.worst_tensor, worst.worst_index = err, name, int(i)
                worst.analytic, worst.numeric = float(analytic[i]), float(numeric[i])
    return worst


def _leaf(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _randomize_norms(obj, rng) -> None:
    # identity-initialised gamma/beta would hide errors in their adjoints
    for name, t in named_parameters(obj):
        if name.endswith("gamma") or name.endswith("beta"):
            t.data = rng.uniform(0.5, 1.5, t.shape) if name.endswith("gamma") else rng.normal(0, 0.3, t.shape)


def _projection(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _blocks(cfg: ModelConfig, rng: np.random.Generator):
    c, h = cfg.width, cfg.heads
    n = cfg.tokens

    def params_of(prefix, obj):
        return [(f"{prefix}.{k}", t) for k, t in named_parameters(obj)]

    # layer norm
    ln = init_layer_norm(c)
    _randomize_norms(ln, rng)
    x = _leaf(rng, (n, c))
    r = _projection(rng, (n, c))
    yield "layer_norm", lambda: ad.dot_all(layer_norm(x, ln), r), [("x", x)] + params_of("ln", ln)

    # cross attention (unmasked) and causal self attention
    attn = init_attention(rng, c, h)
    q, k, v = _leaf(rng, (3, c)), _leaf(rng, (5, c)), _leaf(rng, (5, c))
    r = _projection(rng, (3, c))
    yield "attention", lambda: ad.dot_all(multi_head_attention(q, k, v, attn), r), [("q", q), ("k", k), ("v", v)] + params_of("attn", attn)
    s = _leaf(rng, (4, c))
    r4 = _projection(rng, (4, c))
    yield "masked_attention", lambda: ad.dot_all(multi_head_attention(s, s, s, attn, causal_mask(4)), r4), [("x", s)] + params_of("attn", attn)

    # MLPs: gelu (encoder/decoder) and relu (SR)
    for act in ("gelu", "relu"):
        mlp = init_mlp(rng, c, 4 * c if act == "gelu" else c, act)
        for t in (mlp.b1, mlp.b2):
            t.data = rng.normal(0, 0.1, t.shape)
        xm = _leaf(rng, (n, c))
        rm = _projection(rng, (n, c))
        yield f"mlp_{act}", (lambda mlp=mlp, xm=xm, rm=rm: ad.dot_all(mlp_forward(xm, mlp), rm)), [("x", xm)] + params_of("mlp", mlp)

    enc = init_encoder_layer(rng, c, h)
    _randomize_norms(enc, rng)
    xe = _leaf(rng, (n, c))
    re = _projection(rng, (n, c))
    yield "encoder_layer", lambda: ad.dot_all(encoding_layer_forward(xe, enc), re), [("x", xe)] + params_of("enc", enc)

    dec = init_decoder_layer(rng, c, h)
    _randomize_norms(dec, rng)
    td, md = _leaf(rng, (3, c)), _leaf(rng, (n, c))
    rd = _projection(rng, (3, c))
    yield "decoder_layer", lambda: ad.dot_all(decoding_layer_forward(td, md, dec), rd), [("t", td), ("memory", md)] + params_of("dec", dec)

    model = init_params(cfg, int(rng.integers(2**31)))
    _randomize_norms(model, rng)
    x1, x2 = _leaf(rng, (n, c)), _leaf(rng, (n, c))
    rp = [_projection(rng, (n, c)) for _ in range(3)]
    layer = model.pdp[0]

    def pdp_loss():
        out = pdp_layer_forward(x1, x2, layer, cfg.uses_difference)
        return ad.add(ad.add(ad.dot_all(out.fused, rp[0]), ad.dot_all(out.x1, rp[1])), ad.dot_all(out.x2, rp[2]))

    yield "pdp_layer", pdp_loss, [("x1", x1), ("x2", x2)] + params_of("pdp.0", layer)

    if model.sr:
        feats = [_leaf(rng, (n, c)) for _ in range(cfg.sr_modules)]
        sr = model.sr[0]
        rs = _projection(rng, (n, c))
        yield "sr_module", lambda: ad.dot_all(sr_module_forward(0, feats, sr), rs), [(f"F{j}", f) for j, f in enumerate(feats)] + params_of("sr.0", sr)

    from .train import cross_entropy_loss

    t1 = rng.random((cfg.image_size, cfg.image_size, cfg.channels))
    t2 = rng.random((cfg.image_size, cfg.image_size, cfg.channels))
    ids = np.concatenate([[BOS], rng.integers(4, cfg.vocab_size, cfg.max_len - 2), [EOS]])

    def full_loss():
        logits = decode_train(ids[:-1], encode(t1, t2, model), model)
        return cross_entropy_loss(logits, ids[1:])

    yield "full_model", full_loss, model.named()


BLOCKS = (
    "layer_norm", "attention", "masked_attention", "mlp_gelu", "mlp_relu",
    "encoder_layer", "decoder_layer", "pdp_layer", "sr_module", "full_model",
)


def run_gradcheck(
    cfg: ModelConfig = REDUCED,
    seed: int = 0,
    tol: float = 1e-4,
    eps: float = 1e-5,
    coords_per_tensor: int = 8,
    fault_op: str | None = None,
) -> list[BlockReport]:
    """Check every block; ``fault_op`` corrupts that op's adjoint (test hook)."""
    if cfg.precision != "float64":
        raise ValueError("gradient checks need a float64 config")
    rng = np.random.default_rng(seed)
    guard = ad.corrupt_adjoint(fault_op) if fault_op else contextlib.nullcontext()
    reports = []
    with guard:
        for block, loss_fn, wrt in _blocks(cfg, rng):
            reports.append(check_gradients(block, loss_fn, wrt, rng, coords_per_tensor, eps, tol))
    return reports
