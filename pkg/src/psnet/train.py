"""Teacher-forced training: cross-entropy, Adam, the epoch loop and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BitemporalSample, Vocabulary, build_vocab, derive_seed, encode_caption, normalize, read_dataset
from .errors import ContractError, CorruptionError, FormatError, SchemaError
from .model import PAD, ModelConfig, PsNetParams, decode_train, encode, init_params

log = logging.getLogger(__name__)

MAGIC = b"PSNT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 40
    batch_size: int = 1
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ContractError("only batch size 1 is supported")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# loss


def cross_entropy_loss(logits: Tensor, targets, pad_id: int = PAD) -> Tensor:
    """Mean negative log-likelihood over non-PAD target positions."""
    targets = np.asarray(targets, dtype=np.int64)
    length, vocab = logits.shape
    if targets.shape != (length,):
        raise ContractError(f"{targets.shape[0]} targets for {length} logit rows")
    if targets.min() < 0 or targets.max() >= vocab:
        raise ContractError(f"target ids must lie in [0, {vocab})")
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ContractError("every target position is PAD")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(length)
    loss = -(logp[rows, targets] * keep).sum() / count

    def grad(g):
        d = np.exp(logp)
        d[rows, targets] -= 1
        d *= (keep / count).astype(d.dtype)[:, None]
        return (d * g,)

    return ad.make_op(np.asarray(loss, dtype=x.dtype), (logits,), grad, "cross_entropy")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, 0)


@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, b1, nb1, b2, nb2, inv_c1, inv_c2, lr, eps, p_out, m_out, v_out):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + nb1 * gi
        vi = b2 * v[i] + nb2 * (gi * gi)
        m_out[i] = mi
        v_out[i] = vi
        p_out[i] = p[i] - lr * (mi * inv_c1) / (np.sqrt(vi * inv_c2) + eps)


def _check_aligned(params, grads, state) -> None:
    if params.keys() != grads.keys() or params.keys() != state.m.keys() or params.keys() != state.v.keys():
        raise ContractError("params, grads and optimizer state name different parameters")
    for name, p in params.items():
        if not (grads[name].shape == state.m[name].shape == state.v[name].shape == p.shape):
            raise ContractError(f"{name}: shapes disagree (param {p.shape}, grad {grads[name].shape})")


def _run_kernel(p, g, m, v, t, cfg, p_out, m_out, v_out) -> None:
    # scalars in the parameter dtype keep 32-bit training in 32-bit arithmetic
    f = p.dtype.type
    _adam_kernel(
        p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1), m.reshape(-1), v.reshape(-1),
        f(cfg.beta1), f(1.0 - cfg.beta1), f(cfg.beta2), f(1.0 - cfg.beta2),
        f(1.0 / (1.0 - cfg.beta1**t)), f(1.0 / (1.0 - cfg.beta2**t)), f(cfg.lr), f(cfg.eps),
        p_out.reshape(-1), m_out.reshape(-1), v_out.reshape(-1),
    )


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    _check_aligned(params, grads, state)
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        p = np.ascontiguousarray(p)
        new_p[name], new_m[name], new_v[name] = np.empty_like(p), np.empty_like(p), np.empty_like(p)
        m = np.ascontiguousarray(state.m[name], dtype=p.dtype)
        v = np.ascontiguousarray(state.v[name], dtype=p.dtype)
        _run_kernel(p, grads[name], m, v, t, cfg, new_p[name], new_m[name], new_v[name])
    return new_p, AdamState(new_m, new_v, t)


def adam_update_(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """In-place twin of :func:`adam_step` (same arithmetic) for the training loop.

    Arrays must be contiguous.
    """
    _check_aligned(params, grads, state)
    state.step += 1
    for name, p in params.items():
        m, v = state.m[name], state.v[name]
        _run_kernel(p, grads[name], m, v, state.step, cfg, p, m, v)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int
    loss_history: list[float]
    vocab: list[str]
    train_config: TrainConfig = field(default_factory=TrainConfig)
    version: int = FORMAT_VERSION


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write ``PSNT`` | u32 version | u32 manifest length | manifest JSON | float32 blocks."""
    blocks = [("param/" + n, a) for n, a in ckpt.params.items()]
    blocks += [("adam_m/" + n, a) for n, a in ckpt.adam.m.items()]
    blocks += [("adam_v/" + n, a) for n, a in ckpt.adam.v.items()]
    entries, payload, offset = [], [], 0
    for name, arr in blocks:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        payload.append(raw)
        offset += len(raw)
    manifest = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "loss_history": ckpt.loss_history,
        "vocab": ckpt.vocab,
        "adam_step": ckpt.adam.step,
        "payload_bytes": offset,
        "blocks": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(head)))
        fh.write(head)
        for raw in payload:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a PSNT checkpoint")
    if len(blob) < 12:
        raise CorruptionError(f"{path}: truncated header")
    version, head_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        manifest = json.loads(blob[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable manifest") from exc
    payload = memoryview(blob)[12 + head_len:]
    if len(payload) != manifest["payload_bytes"]:
        raise CorruptionError(f"{path}: payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in manifest["blocks"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if zlib.crc32(raw) != e["crc32"]:
            raise CorruptionError(f"{path}: checksum mismatch in block {e['name']}")
        kind, name = e["name"].split("/", 1)
        groups[kind][name] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return Checkpoint(
        model_config=ModelConfig.from_dict(manifest["model_config"]),
        params=groups["param"],
        adam=AdamState(groups["adam_m"], groups["adam_v"], manifest["adam_step"]),
        epoch=manifest["epoch"],
        loss_history=list(manifest["loss_history"]),
        vocab=list(manifest["vocab"]),
        train_config=TrainConfig.from_dict(manifest["train_config"]),
        version=version,
    )


def params_from_checkpoint(ckpt: Checkpoint) -> PsNetParams:
    params = init_params(ckpt.model_config, 0)
    params.load_state_dict(ckpt.params)
    return params


# ---------------------------------------------------------------------------
# training loop


class FlatParams:
    """Parameters rebound as views of one contiguous buffer, so Adam runs as a single vector op."""

    def __init__(self, params: PsNetParams):
        self.named = params.named()
        self.sizes = [t.data.size for _, t in self.named]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        dtype = params.config.dtype
        self.buffer = np.concatenate([t.data.ravel() for _, t in self.named]).astype(dtype)
        for (_, t), lo, hi in zip(self.named, self.offsets[:-1], self.offsets[1:]):
            t.data = self.buffer[lo:hi].reshape(t.shape)

    @property
    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named]

    def flatten(self, per_param: dict[int | str, np.ndarray], by_name: bool = False) -> np.ndarray:
        keys = [n if by_name else t.node_id for n, t in self.named]
        return np.concatenate([per_param[k].ravel() for k in keys]).astype(self.buffer.dtype, copy=False)

    def split(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {n: flat[lo:hi].reshape(t.shape).copy() for (n, t), lo, hi in zip(self.named, self.offsets[:-1], self.offsets[1:])}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    params: PsNetParams
    vocab: Vocabulary


def _targets(caption: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    return np.asarray(encode_caption(caption, vocab, max_len + 1), dtype=np.int64)


def sample_loss(sample: BitemporalSample, ids: np.ndarray, params: PsNetParams) -> Tensor:
    """Teacher-forced loss: BOS-prefixed input, EOS-suffixed target."""
    memories = encode(sample.t1, sample.t2, params)
    logits = decode_train(ids[:-1], memories, params)
    return cross_entropy_loss(logits, ids[1:])


def check_dataset(samples: Sequence[BitemporalSample], cfg: ModelConfig, vocab: Vocabulary) -> None:
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    if cfg.vocab_size != len(vocab):
        raise SchemaError(f"vocab_size: model has {cfg.vocab_size}, dataset vocabulary has {len(vocab)}")
    for s in samples:
        if s.t1.shape != want:
            raise SchemaError(f"image shape: sample {s.id} is {list(s.t1.shape)}, model expects {list(want)}")
        for c in s.captions:
            unknown = [w for w in normalize(c) if w not in vocab]
            if unknown:
                raise SchemaError(f"vocab: sample {s.id} uses words outside the vocabulary {unknown}")


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: str | os.PathLike | Sequence[BitemporalSample],
    out_dir: str | os.PathLike | None = None,
    resume: Checkpoint | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
    keep_every_epoch: bool = False,
    vocab: Vocabulary | None = None,
) -> TrainResult:
    """Run ``train_cfg.epochs`` epochs (counted from the resume point, if any).

    Each epoch visits samples in an order seeded by (seed, epoch) and draws one
    reference caption per sample from the same stream, so a resumed run
    reproduces an uninterrupted one exactly. The vocabulary comes from the
    checkpoint when resuming, else ``vocab``, else the dataset's captions.
    """
    samples = read_dataset(dataset) if isinstance(dataset, (str, os.PathLike)) else list(dataset)
    if not samples:
        raise SchemaError("dataset is empty")
    if resume is not None:
        vocab = Vocabulary(resume.vocab)
        if resume.model_config != model_cfg:
            raise SchemaError("model config differs from the checkpoint's")
    elif vocab is None:
        vocab = build_vocab(c for s in samples for c in s.captions)
    check_dataset(samples, model_cfg, vocab)

    params = init_params(model_cfg, derive_seed(train_cfg.seed, "init"))
    if resume is not None:
        params.load_state_dict(resume.params)
    flat = FlatParams(params)
    tensors = flat.tensors
    if resume is not None:
        state = AdamState({"all": flat.flatten(resume.adam.m, by_name=True)}, {"all": flat.flatten(resume.adam.v, by_name=True)}, resume.adam.step)
        history = list(resume.loss_history)
        start = resume.epoch
    else:
        zero = np.zeros_like(flat.buffer)
        state = AdamState({"all": zero}, {"all": zero.copy()}, 0)
        history = []
        start = 0

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "loss.log"
        # a resumed run keeps the history written so far and drops anything later
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            for e, loss in enumerate(history):
                fh.write(f"{e}\t{loss!r}\n")

    ckpt = None
    for epoch in range(start, start + train_cfg.epochs):
        rng = np.random.default_rng(derive_seed(train_cfg.seed, f"epoch:{epoch}"))
        order = rng.permutation(len(samples))
        picks = [int(rng.integers(len(samples[i].captions))) for i in order]
        total = 0.0
        for i, pick in zip(order, picks):
            s = samples[i]
            ids = _targets(s.captions[pick], vocab, model_cfg.max_len)
            with ad.GradTape() as tape:
                loss = sample_loss(s, ids, params)
            grads = tape.backward(loss, tensors)
            adam_update_({"all": flat.buffer}, {"all": flat.flatten(grads)}, state, train_cfg)
            total += float(loss.data)
        epoch_loss = total / len(samples)
        history.append(epoch_loss)
        if train_cfg.log_every and epoch % train_cfg.log_every == 0:
            log.info("epoch %d loss %.6f", epoch, epoch_loss)
        ckpt = Checkpoint(
            model_config=model_cfg,
            params=flat.split(flat.buffer),
            adam=AdamState(flat.split(state.m["all"]), flat.split(state.v["all"]), state.step),
            epoch=epoch + 1,
            loss_history=list(history),
            vocab=vocab.words,
            train_config=train_cfg,
        )
        if out is not None:
            with open(out / "loss.log", "a", encoding="utf-8", newline="\n") as fh:
                fh.write(f"{epoch}\t{epoch_loss!r}\n")
            save_checkpoint(ckpt, out / "checkpoint.psnt")
            if keep_every_epoch:
                save_checkpoint(ckpt, out / f"epoch_{epoch + 1:04d}.psnt")
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
    return TrainResult(ckpt, history, params, vocab)


def evaluate_loss(samples: Sequence[BitemporalSample], params: PsNetParams, vocab: Vocabulary, caption_index: int = 0) -> float:
    """Mean teacher-forced loss without updating anything."""
    total = 0.0
    for s in samples:
        ids = _targets(s.captions[caption_index], vocab, params.config.max_len)
        total += float(sample_loss(s, ids, params).data)
    return total / len(samples)


def uniform_loss(vocab_size: int) -> float:
    return math.log(vocab_size)
