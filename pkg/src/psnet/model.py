"""PSNet: patch stem, progressive difference perception layers, scale-aware
reinforcement modules and a progressive Transformer decoder.

Three variants share this code:

``psnet``
    difference-aware encoder layers, SR modules, decoder layer j attends to O_j.
``pdp``
    difference-aware encoder layers; every decoder layer attends to the top
    encoder layer output (conventional decoder wiring).
``baseline``
    each temporal branch is encoded on its own (no difference features);
    conventional decoder wiring.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .nn import (
    AttentionParams,
    DecoderLayerParams,
    EncoderLayerParams,
    LayerNormParams,
    MlpParams,
    decoding_layer_forward,
    encoding_layer_forward,
    glorot,
    init_attention,
    init_decoder_layer,
    init_encoder_layer,
    init_layer_norm,
    init_mlp,
    layer_norm,
    linear,
    mlp_forward,
    multi_head_attention,
    named_parameters,
    zeros,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
VARIANTS = ("psnet", "pdp", "baseline")
_DTYPES = {"float32": np.float32, "float64": np.float64}

# vocabulary head starts near-silent so a fresh model predicts close to uniform
OUTPUT_INIT_GAIN = 0.1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 8
    width: int = 64
    heads: int = 4
    pdp_layers: int = 3
    sr_modules: int = 3
    decoder_layers: int = 3
    vocab_size: int = 64
    max_len: int = 16
    ffn_mult: int = 4
    precision: str = "float32"
    variant: str = "psnet"

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ContractError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if not (self.pdp_layers == self.sr_modules == self.decoder_layers):
            raise ContractError(
                "pdp_layers, sr_modules and decoder_layers must be equal "
                f"(got {self.pdp_layers}, {self.sr_modules}, {self.decoder_layers})"
            )
        if self.pdp_layers < 1:
            raise ContractError("need at least one layer")
        if self.width % self.heads:
            raise ContractError(f"width {self.width} not divisible by {self.heads} heads")
        if self.precision not in _DTYPES:
            raise ContractError(f"precision must be one of {sorted(_DTYPES)}")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}")
        if self.variant == "psnet" and self.sr_modules < 2:
            raise ContractError("the psnet variant needs at least 2 layers so each SR module has other scales to attend to")
        if self.vocab_size < 5 or self.max_len < 2:
            raise ContractError("vocab_size must exceed the 4 reserved ids and max_len must be >= 2")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    @property
    def uses_difference(self) -> bool:
        return self.variant != "baseline"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class PdpBranch:
    encoders: list[EncoderLayerParams]
    proj_w: Tensor
    proj_b: Tensor


@dataclass
class PdpLayerParams:
    branches: list[PdpBranch]
    fuse_w: Tensor
    fuse_b: Tensor


@dataclass
class SrModuleParams:
    ln_query: LayerNormParams
    ln_memory: LayerNormParams
    attn: AttentionParams
    mlp: MlpParams


@dataclass
class PsNetParams:
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    pdp: list[PdpLayerParams]
    sr: list[SrModuleParams]
    decoder: list[DecoderLayerParams]
    tok_emb: Tensor
    dec_pos: Tensor
    out_w: Tensor
    out_b: Tensor
    config: ModelConfig = field(compare=False, repr=False, default=None)

    def named(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in named_parameters(self) if not n.startswith("config")]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.named()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named()
        missing = [n for n, _ in named if n not in state]
        if missing:
            raise ContractError(f"state is missing parameters: {missing[:5]}")
        for n, t in named:
            arr = np.asarray(state[n])
            if arr.shape != t.shape:
                raise DimensionError(f"{n}: stored shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)


def _init_pdp_layer(rng, cfg: ModelConfig) -> PdpLayerParams:
    c, dt = cfg.width, cfg.dtype
    branch_width = 2 * c if cfg.uses_difference else c
    branches = [
        PdpBranch(
            [init_encoder_layer(rng, branch_width, cfg.heads, cfg.ffn_mult, dt) for _ in range(2)],
            glorot(rng, branch_width, c, dtype=dt),
            zeros((c,), dt),
        )
        for _ in range(2)
    ]
    return PdpLayerParams(branches, glorot(rng, 2 * c, c, dtype=dt), zeros((c,), dt))


def _init_sr_module(rng, cfg: ModelConfig) -> SrModuleParams:
    c, dt = cfg.width, cfg.dtype
    return SrModuleParams(
        init_layer_norm(c, dt),
        init_layer_norm(c, dt),
        init_attention(rng, c, cfg.heads, dt),
        init_mlp(rng, c, c, "relu", dt),
    )


def init_params(cfg: ModelConfig, seed: int = 0) -> PsNetParams:
    rng = np.random.default_rng(seed)
    c, dt, n = cfg.width, cfg.dtype, cfg.tokens
    n_sr = cfg.sr_modules if cfg.variant == "psnet" else 0
    return PsNetParams(
        patch_w=glorot(rng, cfg.patch_dim, c, dtype=dt),
        patch_b=zeros((c,), dt),
        pos=glorot(rng, n, c, dtype=dt),
        pdp=[_init_pdp_layer(rng, cfg) for _ in range(cfg.pdp_layers)],
        sr=[_init_sr_module(rng, cfg) for _ in range(n_sr)],
        decoder=[init_decoder_layer(rng, c, cfg.heads, cfg.ffn_mult, dt) for _ in range(cfg.decoder_layers)],
        tok_emb=glorot(rng, cfg.vocab_size, c, dtype=dt),
        dec_pos=glorot(rng, cfg.max_len, c, dtype=dt),
        out_w=glorot(rng, c, cfg.vocab_size, dtype=dt, gain=OUTPUT_INIT_GAIN),
        out_b=zeros((cfg.vocab_size,), dt),
        config=cfg,
    )


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar parameters for ``cfg``."""
    c, m, v, n = cfg.width, cfg.ffn_mult, cfg.vocab_size, cfg.tokens

    def attn(w):
        return 4 * w * w

    def mlp(w, hidden):
        return 2 * w * hidden + hidden + w

    def encoder(w):
        return attn(w) + mlp(w, m * w) + 4 * w

    bw = 2 * c if cfg.uses_difference else c
    pdp = 2 * (2 * encoder(bw) + bw * c + c) + 2 * c * c + c
    sr = 4 * c + attn(c) + mlp(c, c)
    dec = 2 * attn(c) + mlp(c, m * c) + 6 * c
    n_sr = cfg.sr_modules if cfg.variant == "psnet" else 0
    return (
        cfg.patch_dim * c + c + n * c
        + cfg.pdp_layers * pdp
        + n_sr * sr
        + cfg.decoder_layers * dec
        + v * c + cfg.max_len * c + c * v + v
    )


# ---------------------------------------------------------------------------
# encoder


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """H x W x ch image -> (H/p * W/p) x (p*p*ch) rows, patches in row-major grid order."""
    h, w, ch = image.shape
    g = image.reshape(h // patch, patch, w // patch, patch, ch).transpose(0, 2, 1, 3, 4)
    return g.reshape((h // patch) * (w // patch), patch * patch * ch)


def _check_image(img: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    img = np.asarray(img)
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    if img.shape != want:
        raise ContractError(f"image shape {img.shape} != configured {want}")
    return img.astype(cfg.dtype, copy=False)


def vision_stem(t1: np.ndarray, t2: np.ndarray, p: PsNetParams) -> tuple[Tensor, Tensor]:
    """Shared patch projection plus shared position embeddings for both images."""
    cfg = p.config
    out = []
    for img in (t1, t2):
        patches = Tensor(patchify(_check_image(img, cfg), cfg.patch))
        out.append(ad.add(linear(patches, p.patch_w, p.patch_b), p.pos))
    return out[0], out[1]


class PdpOutput(NamedTuple):
    x1: Tensor
    x2: Tensor
    fused: Tensor
    diff: Tensor | None


def pdp_layer_forward(x1: Tensor, x2: Tensor, p: PdpLayerParams, difference: bool = True) -> PdpOutput:
    """One progressive difference perception layer.

    Each branch sees [X_i ; X2 - X1] on the channel axis, runs two encoding
    layers and projects back to C. The layer output fuses both refined branches.
    """
    if x1.shape != x2.shape:
        raise DimensionError(f"pdp: branch shapes {x1.shape} and {x2.shape} differ")
    diff = ad.sub(x2, x1) if difference else None
    refined = []
    for x, branch in zip((x1, x2), p.branches):
        h = ad.concat([x, diff], axis=1) if difference else x
        for enc in branch.encoders:
            h = encoding_layer_forward(h, enc)
        refined.append(linear(h, branch.proj_w, branch.proj_b))
    fused = linear(ad.concat(refined, axis=1), p.fuse_w, p.fuse_b)
    return PdpOutput(refined[0], refined[1], fused, diff)


def sr_module_forward(k: int, features: list[Tensor], p: SrModuleParams) -> Tensor:
    """Enhance layer ``k``'s features (0-based) with all other layers' features.

    O_k = F_k + MLP(MCA(LN(F_k), F_u, F_u)), F_u = token-axis concat of LN(F_j), j != k.
    """
    if not 0 <= k < len(features):
        raise ContractError(f"SR index {k} out of range for {len(features)} feature maps")
    if len(features) < 2:
        raise ContractError("SR module needs at least two feature maps")
    memory = ad.concat([layer_norm(f, p.ln_memory) for j, f in enumerate(features) if j != k], axis=0)
    x = multi_head_attention(layer_norm(features[k], p.ln_query), memory, memory, p.attn)
    return ad.add(features[k], mlp_forward(x, p.mlp))


@dataclass
class EncoderTrace:
    x1: Tensor
    x2: Tensor
    diffs: list[Tensor | None]
    features: list[Tensor]
    memories: list[Tensor]


def encode_trace(t1: np.ndarray, t2: np.ndarray, p: PsNetParams) -> EncoderTrace:
    cfg = p.config
    x1, x2 = vision_stem(t1, t2, p)
    stem = (x1, x2)
    diffs, features = [], []
    for layer in p.pdp:
        out = pdp_layer_forward(x1, x2, layer, cfg.uses_difference)
        x1, x2 = out.x1, out.x2
        diffs.append(out.diff)
        features.append(out.fused)
    if cfg.variant == "psnet":
        memories = [sr_module_forward(k, features, sr) for k, sr in enumerate(p.sr)]
    else:
        memories = [features[-1]] * cfg.decoder_layers
    return EncoderTrace(stem[0], stem[1], diffs, features, memories)


def encode(t1: np.ndarray, t2: np.ndarray, p: PsNetParams) -> list[Tensor]:
    """One decoder memory per decoder layer."""
    return encode_trace(t1, t2, p).memories


# ---------------------------------------------------------------------------
# decoder


def decode_train(tokens, memories: list[Tensor], p: PsNetParams) -> Tensor:
    """Teacher-forced logits (L x V); decoder layer j cross-attends to ``memories[j]``."""
    cfg = p.config
    tokens = np.asarray(tokens, dtype=np.int64)
    length = tokens.shape[0]
    if length < 1 or length > cfg.max_len:
        raise ContractError(f"sequence length {length} outside 1..{cfg.max_len}")
    if len(memories) != len(p.decoder):
        raise ContractError(f"{len(memories)} memories for {len(p.decoder)} decoder layers")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ContractError(f"token ids must lie in [0, {cfg.vocab_size})")
    t = ad.add(ad.take_rows(p.tok_emb, tokens), ad.take_rows(p.dec_pos, np.arange(length)))
    for layer, memory in zip(p.decoder, memories):
        t = decoding_layer_forward(t, memory, layer)
    return linear(t, p.out_w, p.out_b)


def generate_caption(t1: np.ndarray, t2: np.ndarray, p: PsNetParams, max_len: int | None = None) -> list[int]:
    """Greedy decoding from BOS; returned ids exclude BOS and include EOS if emitted."""
    cfg = p.config
    max_len = cfg.max_len - 1 if max_len is None else min(max_len, cfg.max_len - 1)
    memories = encode(t1, t2, p)
    seq = [BOS]
    out: list[int] = []
    while len(out) < max_len:
        logits = decode_train(seq, memories, p).data
        nxt = int(np.argmax(logits[-1]))  # first maximum -> lowest id on ties
        out.append(nxt)
        if nxt == EOS:
            break
        seq.append(nxt)
    return out
