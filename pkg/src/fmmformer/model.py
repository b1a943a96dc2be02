"""A small causal transformer trained on the synthetic copy task.

Forward passes record backward closures on a ``Tape``; ``loss_and_grads``
replays it to get exact parameter gradients without an autodiff framework.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import attention as att
from . import grad as gr
from .feature_maps import FeatureMapSet
from .numerics import make_rng

VOCAB = 11
SEPARATOR = 0
VARIANTS = ("softmax", "linear", "band", "fmm")


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


# ----------------------------------------------------------------- copy task


@dataclass(frozen=True)
class CopyTaskSample:
    """``0 w 0 w`` with ``w`` drawn from the symbols 1..10."""

    word: tuple[int, ...]

    @property
    def tokens(self) -> list[int]:
        return [SEPARATOR, *self.word, SEPARATOR, *self.word]

    def __len__(self):
        return 2 * len(self.word) + 2


def gen_copy_batch(rng: np.random.Generator, batch: int, max_len: int) -> list[CopyTaskSample]:
    if max_len < 4 or max_len % 2:
        raise ValueError(f"max_len must be even and at least 4, got {max_len}")
    longest = (max_len - 2) // 2
    lengths = rng.integers(1, longest + 1, size=batch)
    return [CopyTaskSample(tuple(int(s) for s in rng.integers(1, 11, size=n))) for n in lengths]


@dataclass
class PackedBatch:
    tokens: np.ndarray   # (B, N) inputs, zero padded
    targets: np.ndarray  # (B, N) next token at each position
    mask: np.ndarray     # (B, N) True where the target is a duplicated symbol


def pack_batch(samples: Iterable[CopyTaskSample], max_len: int) -> PackedBatch:
    samples = list(samples)
    tokens = np.zeros((len(samples), max_len + 1), dtype=np.int64)
    mask = np.zeros((len(samples), max_len), dtype=bool)
    for b, s in enumerate(samples):
        if len(s) > max_len:
            raise ValueError(f"sample of length {len(s)} exceeds max_len {max_len}")
        tokens[b, : len(s)] = s.tokens
        n = len(s.word)
        mask[b, n + 1 : 2 * n + 1] = True
    return PackedBatch(tokens[:, :max_len], tokens[:, 1:], mask)


# -------------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "softmax"
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_len: int = 128
    bandwidth: int | None = 10
    feature_maps: str = "elu1"
    w1_logit: float = -4.0
    w2_logit: float = 4.0
    lr: float = 1e-3
    lr_decay_step: int = 3000
    lr_decay: float = 0.1
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 32
    steps: int = 3000
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise att.ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.steps < 0:
            raise att.ConfigError("steps must be non-negative")
        if self.dtype not in ("float64", "float32"):
            raise att.ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.d_model % self.heads:
            raise att.ConfigError("d_model must be divisible by heads")
        if self.max_len < 4 or self.max_len % 2:
            raise att.ConfigError("max_len must be even and at least 4")
        FeatureMapSet(self.feature_maps)
        if self.variant == "band" and self.bandwidth is None:
            raise att.ConfigError("band variant needs a bandwidth")
        if self.variant == "fmm":
            self.attention_config(self.max_len)

    def attention_config(self, n: int) -> att.AttentionConfig | None:
        """Per-sequence attention config; the band is clipped to ``n - 1``."""
        bw = None if self.bandwidth is None else min(self.bandwidth, n - 1)
        maps = FeatureMapSet(self.feature_maps)
        if self.variant == "fmm":
            return att.AttentionConfig(bw, maps, True, att.BlendParams(self.w1_logit, self.w2_logit))
        if self.variant == "linear":
            return att.AttentionConfig(None, maps or FeatureMapSet(["elu1"]), True)
        if self.variant == "band":
            return att.AttentionConfig(bw, (), True)
        return None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bandwidth"] = "none" if self.bandwidth is None else self.bandwidth
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in d.items():
            if key not in known:
                raise att.ConfigError(f"unknown training key {key!r}")
            kwargs[key] = _coerce(key, raw, known[key].type)
        return cls(**kwargs)


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key == "bandwidth":
            return None if text.lower() == "none" else int(text)
        if "int" in str(typ):
            return int(text)
        if "float" in str(typ):
            return float(text)
    except ValueError:
        raise att.ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


# -------------------------------------------------------------------- params


def init_params(cfg: TrainConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, f = cfg.d_model, cfg.d_ff
    p = {
        "tok_emb": rng.normal(0, 0.1, (VOCAB, d)),
        "pos_emb": rng.normal(0, 0.1, (cfg.max_len, d)),
    }
    for i in range(cfg.layers):
        pre = f"l{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        p[pre + "w_qkv"] = rng.normal(0, 1 / math.sqrt(d), (d, 3 * d))
        p[pre + "w_o"] = rng.normal(0, 1 / math.sqrt(d), (d, d))
        p[pre + "b_o"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "w_1"] = rng.normal(0, 1 / math.sqrt(d), (d, f))
        p[pre + "b_1"] = np.zeros(f)
        p[pre + "w_2"] = rng.normal(0, 1 / math.sqrt(f), (f, d))
        p[pre + "b_2"] = np.zeros(d)
        if cfg.variant == "fmm":
            p[pre + "blend"] = np.array([cfg.w1_logit, cfg.w2_logit])
    p["lnf.g"] = np.ones(d)
    p["lnf.b"] = np.zeros(d)
    p["w_out"] = rng.normal(0, 0.02, (d, VOCAB))
    p["b_out"] = np.zeros(VOCAB)
    return {k: v.astype(cfg.dtype) for k, v in p.items()}


# ------------------------------------------------------------------- layers


def _layer_norm(x, g, b, tape, grads, gname, bname, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    out = xh * g + b
    cell = {}

    def back():
        dy = cell["d"]
        grads[gname] += (dy * xh).reshape(-1, dy.shape[-1]).sum(axis=0)
        grads[bname] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        dxh = dy * g
        cell["dx"] = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))

    return out, cell, back


_GELU_K = math.sqrt(2 / math.pi)


def _gelu(x):
    """Tanh-form GELU and its derivative. Smooth, unlike ReLU, so finite
    differences of the loss never straddle a kink."""
    c = x.dtype.type
    k, a = c(_GELU_K), c(0.044715)
    x2 = x * x
    u = a * x2
    u += 1
    u *= x
    u *= k
    t = np.tanh(u)
    half = c(0.5) * (1 + t)
    out = x * half
    # slope = half + x (1 - t^2) k (1 + 3 a x^2) / 2
    x2 *= 3 * a
    x2 += 1
    t *= t
    np.subtract(1, t, out=t)
    t *= x2
    t *= x
    t *= c(0.5) * k
    t += half
    return out, t


class Model:
    """Stack of pre-norm blocks: ``x += attn(ln(x)); x += ffn(ln(x))``."""

    def __init__(self, cfg: TrainConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, make_rng(cfg.seed))

    # attention on (B, H, N, dh)
    def _attend(self, q, k, v, layer: int):
        cfg = self.cfg
        n = q.shape[-2]
        if cfg.variant == "softmax":
            out, saved = gr.dense_softmax_forward(q, k, v, causal=True)
            return out, lambda g: (gr.backward_dense_softmax(saved, g), None)
        acfg = cfg.attention_config(n)
        if cfg.variant == "fmm":
            logits = self.params[f"l{layer}.blend"]
            acfg = replace(acfg, blend=att.BlendParams(float(logits[0]), float(logits[1])))
            out, saved = gr.fmm_forward(q, k, v, acfg)

            def back(g):
                b = gr.backward_blend(saved, g)
                return b, np.array(b.d_blend)

            return out, back
        if cfg.variant == "linear":
            out, saved = gr.far_field_forward(q, k, v, acfg.feature_maps, causal=True)
            return out, lambda g: (gr.backward_far_field(saved, g), None)
        out, saved = gr.near_field_forward(q, k, v, acfg.bandwidth, causal=True)
        return out, lambda g: (gr.backward_near_field(saved, g), None)

    def forward(self, tokens, tape: gr.Tape | None = None, grads=None, keep_attention: bool = False):
        """Logits of shape ``(B, N, VOCAB)`` for integer ``tokens (B, N)``."""
        cfg, p = self.cfg, self.params
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= VOCAB):
            raise ValueError(f"token ids must lie in [0, {VOCAB})")
        bsz, n = tokens.shape
        if n > cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
        h, dh = cfg.heads, cfg.d_model // cfg.heads
        record = tape is not None
        self.attention_maps = [] if keep_attention else None

        x = p["tok_emb"][tokens] + p["pos_emb"][:n]
        if record:
            emb_cell = {}

            def back_emb():
                dx = emb_cell["d"]
                onehot = np.eye(VOCAB, dtype=dx.dtype)[tokens.reshape(-1)]
                grads["tok_emb"] += onehot.T @ dx.reshape(-1, dx.shape[-1])
                grads["pos_emb"][:n] += dx.sum(axis=0)

            cells = [emb_cell]
            tape.record("embed", back_emb)

        for i in range(cfg.layers):
            pre = f"l{i}."
            a, ln_cell, ln_back = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"], tape, grads, pre + "ln1.g", pre + "ln1.b")
            qkv = a @ p[pre + "w_qkv"]
            heads = np.ascontiguousarray(qkv.reshape(bsz, n, 3, h, dh).transpose(2, 0, 3, 1, 4))
            q, k, v = heads[0], heads[1], heads[2]
            o, att_back = self._attend(q, k, v, i)
            if keep_attention and cfg.variant == "softmax":
                from .oracle import dense_attention_matrix

                self.attention_maps.append(dense_attention_matrix(q, k, causal=True))
            merged = o.transpose(0, 2, 1, 3).reshape(bsz, n, cfg.d_model)
            x_mid = x + merged @ p[pre + "w_o"] + p[pre + "b_o"]

            c, ln2_cell, ln2_back = _layer_norm(x_mid, p[pre + "ln2.g"], p[pre + "ln2.b"], tape, grads, pre + "ln2.g", pre + "ln2.b")
            hid_pre = c @ p[pre + "w_1"] + p[pre + "b_1"]
            hid, hid_slope = _gelu(hid_pre)
            x_out = x_mid + hid @ p[pre + "w_2"] + p[pre + "b_2"]

            if record:
                prev_cell = cells[-1]
                block_cell = {}
                cells.append(block_cell)

                def back_block(pre=pre, a=a, q=q, merged=merged, c=c, hid=hid, hid_slope=hid_slope,
                               att_back=att_back, ln_cell=ln_cell, ln_back=ln_back,
                               ln2_cell=ln2_cell, ln2_back=ln2_back, prev_cell=prev_cell, block_cell=block_cell):
                    dx_out = block_cell["d"]
                    flat = lambda t: t.reshape(-1, t.shape[-1])  # noqa: E731
                    # feed-forward
                    grads[pre + "w_2"] += flat(hid).T @ flat(dx_out)
                    grads[pre + "b_2"] += flat(dx_out).sum(axis=0)
                    dhid = (dx_out @ p[pre + "w_2"].T) * hid_slope
                    grads[pre + "w_1"] += flat(c).T @ flat(dhid)
                    grads[pre + "b_1"] += flat(dhid).sum(axis=0)
                    ln2_cell["d"] = dhid @ p[pre + "w_1"].T
                    ln2_back()
                    dx_mid = dx_out + ln2_cell["dx"]
                    # attention
                    grads[pre + "w_o"] += flat(merged).T @ flat(dx_mid)
                    grads[pre + "b_o"] += flat(dx_mid).sum(axis=0)
                    dmerged = dx_mid @ p[pre + "w_o"].T
                    do = np.ascontiguousarray(dmerged.reshape(bsz, n, h, dh).transpose(0, 2, 1, 3))
                    bundle, dblend = att_back(do)
                    if dblend is not None:
                        grads[pre + "blend"] += dblend
                    dheads = np.stack([bundle.d_q, bundle.d_k, bundle.d_v])
                    dqkv = dheads.transpose(1, 3, 0, 2, 4).reshape(bsz, n, 3 * cfg.d_model)
                    grads[pre + "w_qkv"] += flat(a).T @ flat(dqkv)
                    ln_cell["d"] = dqkv @ p[pre + "w_qkv"].T
                    ln_back()
                    prev_cell["d"] = dx_mid + ln_cell["dx"]

                tape.record(f"block{i}", back_block)
            x = x_out

        xf, lnf_cell, lnf_back = _layer_norm(x, p["lnf.g"], p["lnf.b"], tape, grads, "lnf.g", "lnf.b")
        logits = xf @ p["w_out"] + p["b_out"]
        if record:
            prev_cell = cells[-1]
            out_cell = {}

            def back_head():
                dlogits = out_cell["d"]
                grads["w_out"] += xf.reshape(-1, xf.shape[-1]).T @ dlogits.reshape(-1, VOCAB)
                grads["b_out"] += dlogits.reshape(-1, VOCAB).sum(axis=0)
                lnf_cell["d"] = dlogits @ p["w_out"].T
                lnf_back()
                prev_cell["d"] = lnf_cell["dx"]

            tape.record("head", back_head)
            self._out_cell = out_cell
        return logits

    def loss_and_grads(self, batch: PackedBatch):
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        tape = gr.Tape()
        logits = self.forward(batch.tokens, tape, grads)
        loss, dlogits = masked_cross_entropy(logits, batch.targets, batch.mask)
        self._out_cell["d"] = dlogits
        tape.backward()
        return loss, grads

    def loss(self, batch: PackedBatch) -> float:
        return masked_cross_entropy(self.forward(batch.tokens), batch.targets, batch.mask)[0]

    def loss_extended(self, batch: PackedBatch):
        """Loss as a numpy scalar in the parameter dtype (no rounding to float)."""
        return _masked_nll(self.forward(batch.tokens), batch.targets, batch.mask)[0]


def _masked_nll(logits, targets, mask):
    shift = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shift).sum(axis=-1, keepdims=True))
    logp = shift - logz
    count = max(int(mask.sum()), 1)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return -(picked * mask).sum() / count, logp, count


def masked_cross_entropy(logits, targets, mask):
    """Mean negative log-likelihood over masked positions and its gradient."""
    loss, logp, count = _masked_nll(logits, targets, mask)
    loss = float(loss)
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1, axis=-1)
    dlogits *= mask[..., None] / count
    return loss, dlogits


# ------------------------------------------------------------------ training


class Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def lr(self, step: int) -> float:
        cfg = self.cfg
        lr = cfg.lr * min(1.0, (step + 1) / cfg.warmup) if cfg.warmup > 0 else cfg.lr
        if step >= cfg.lr_decay_step:
            lr *= cfg.lr_decay
        return lr

    def step(self, params, grads):
        cfg = self.cfg
        lr = self.lr(self.t)
        self.t += 1
        if cfg.clip_norm > 0:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
            if norm > cfg.clip_norm:
                scale = cfg.clip_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        c1 = 1 - cfg.beta1**self.t
        c2 = 1 - cfg.beta2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


@dataclass
class TrainResult:
    cfg: TrainConfig
    losses: list[float] = field(default_factory=list)
    model: Model | None = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def tail_loss(self, window: int = 100) -> float:
        return float(np.mean(self.losses[-window:]))


def data_rng(seed: int) -> np.random.Generator:
    return make_rng(seed + 0x9E3779B9)


def train(cfg: TrainConfig, callback=None) -> TrainResult:
    """Adam on the copy task; records the loss of every step.

    With ``steps == 0`` the single recorded value is the loss of the
    initial parameters on one batch.
    """
    model = Model(cfg)
    rng = data_rng(cfg.seed)
    result = TrainResult(cfg, model=model)
    if cfg.steps == 0:
        batch = pack_batch(gen_copy_batch(rng, cfg.batch_size, cfg.max_len), cfg.max_len)
        result.losses.append(model.loss(batch))
        return result
    opt = Adam(model.params, cfg)
    for step in range(cfg.steps):
        batch = pack_batch(gen_copy_batch(rng, cfg.batch_size, cfg.max_len), cfg.max_len)
        loss, grads = model.loss_and_grads(batch)
        if not math.isfinite(loss):
            raise TrainingError(step, f"loss became {loss}")
        opt.step(model.params, grads)
        result.losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return result


# --------------------------------------------------------------- checkpoints

_MAGIC = b"FMMCKPT1"


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Little-endian layout: magic, tensor count (u32), then per tensor the
    name length (u32), UTF-8 name, rank (u32), dims (u64 each) and raw
    float64 values in row-major order."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path} is not a checkpoint")
    pos = len(_MAGIC)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return params
