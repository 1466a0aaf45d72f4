"""Temporal convolutional autoencoder built from the kernels in :mod:`nn_core`.

Encoder: residual TCN -> 1x1 conv (c filters) -> temporal average pooling by s.
Decoder: sample-and-hold upsampling by s -> residual TCN -> 1x1 conv (d filters).
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from replay_sentinel import nn_core as nn
from replay_sentinel.errors import ModelFormatError, NumericalError
from replay_sentinel.nn_core import AdamState, ConvFilter

log = logging.getLogger(__name__)

FORMAT_NAME = "replay-sentinel/tcn-ae"
FORMAT_VERSION = 1


@dataclass
class TcnAeConfig:
    d: int = 10
    n_filters: int = 20
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16)
    latent_channels: int = 4
    sample_factor: int = 4
    dropout_rate: float = 0.1
    T_train: int = 1024
    batch_size: int = 32
    n_epochs: int = 10
    lr: float = 1e-3
    seed: int = 0
    # None -> ceil(T / (T_train * batch_size)) * batch_size draws per epoch
    subsequences_per_epoch: int | None = None

    def __post_init__(self) -> None:
        self.dilations = tuple(int(q) for q in self.dilations)
        self.validate()

    def validate(self) -> None:
        for name in ("d", "n_filters", "kernel_size", "latent_channels", "sample_factor",
                     "T_train", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_epochs < 0:
            raise ValueError("n_epochs must be >= 0")
        if not self.dilations or any(q < 1 for q in self.dilations):
            raise ValueError(f"dilations must be a non-empty list of positive ints, got {self.dilations}")
        if self.T_train % self.sample_factor:
            raise ValueError(
                f"T_train={self.T_train} is not divisible by sample_factor={self.sample_factor}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.subsequences_per_epoch is not None and self.subsequences_per_epoch < 1:
            raise ValueError("subsequences_per_epoch must be >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dilations"] = list(self.dilations)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TcnAeConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ResidualBlock:
    conv1: ConvFilter
    conv2: ConvFilter
    dropout_rate: float = 0.0
    skip: ConvFilter | None = None

    @property
    def filters(self) -> list[ConvFilter]:
        out = [self.conv1, self.conv2]
        if self.skip is not None:
            out.append(self.skip)
        return out


@dataclass
class TcnAeModel:
    config: TcnAeConfig
    encoder_blocks: list[ResidualBlock]
    decoder_blocks: list[ResidualBlock]
    enc_1x1: ConvFilter
    dec_1x1: ConvFilter
    adam: AdamState | None = None
    loss_history: list[tuple[int, float]] = field(default_factory=list)

    def filters(self) -> list[tuple[str, ConvFilter]]:
        """All convolution filters in declared order, with stable names."""
        out = []
        for prefix, blocks in (("enc", self.encoder_blocks), ("dec", self.decoder_blocks)):
            for i, b in enumerate(blocks):
                out.append((f"{prefix}.{i}.conv1", b.conv1))
                out.append((f"{prefix}.{i}.conv2", b.conv2))
                if b.skip is not None:
                    out.append((f"{prefix}.{i}.skip", b.skip))
            out.append((f"{prefix}.1x1", self.enc_1x1 if prefix == "enc" else self.dec_1x1))
        return out

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, f in self.filters():
            out += [(f"{name}.v", f.v), (f"{name}.g", f.g), (f"{name}.bias", f.bias)]
        return out

    def parameters(self) -> list[np.ndarray]:
        return [p for _, p in self.named_parameters()]

    def set_parameters(self, params: list[np.ndarray]) -> None:
        fs = [f for _, f in self.filters()]
        if len(params) != 3 * len(fs):
            raise ValueError("parameter list length does not match the model")
        for i, f in enumerate(fs):
            f.v, f.g, f.bias = params[3 * i], params[3 * i + 1], params[3 * i + 2]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def _init_filter(rng: np.random.Generator, k: int, d_in: int, d_out: int, dilation: int = 1) -> ConvFilter:
    v = rng.uniform(-1.0, 1.0, size=(k, d_in, d_out)) / math.sqrt(k * d_in)
    return ConvFilter(v=v, g=np.ones(d_out), bias=np.zeros(d_out), dilation=dilation, causal=True)


def _build_tcn(rng, cfg: TcnAeConfig, d_in: int) -> list[ResidualBlock]:
    blocks = []
    width = d_in
    for q in cfg.dilations:
        conv1 = _init_filter(rng, cfg.kernel_size, width, cfg.n_filters, q)
        conv2 = _init_filter(rng, cfg.kernel_size, cfg.n_filters, cfg.n_filters, q)
        skip = _init_filter(rng, 1, width, cfg.n_filters) if width != cfg.n_filters else None
        blocks.append(ResidualBlock(conv1, conv2, cfg.dropout_rate, skip))
        width = cfg.n_filters
    return blocks


def build_model(cfg: TcnAeConfig, rng_seed: int | None = None) -> TcnAeModel:
    """Instantiate a freshly initialised model; ``rng_seed`` defaults to ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if rng_seed is None else rng_seed)
    enc = _build_tcn(rng, cfg, cfg.d)
    enc_1x1 = _init_filter(rng, 1, cfg.n_filters, cfg.latent_channels)
    dec = _build_tcn(rng, cfg, cfg.latent_channels)
    dec_1x1 = _init_filter(rng, 1, cfg.n_filters, cfg.d)
    model = TcnAeModel(cfg, enc, dec, enc_1x1, dec_1x1)
    model.adam = AdamState.zeros_like(model.parameters(), lr=cfg.lr)
    return model


def count_parameters(cfg: TcnAeConfig) -> int:
    """Closed-form parameter count: each filter has k*d_in*d_out + 2*d_out entries."""

    def conv(k, a, b):
        return k * a * b + 2 * b

    def tcn(d_in):
        total, width = 0, d_in
        for _ in cfg.dilations:
            total += conv(cfg.kernel_size, width, cfg.n_filters)
            total += conv(cfg.kernel_size, cfg.n_filters, cfg.n_filters)
            if width != cfg.n_filters:
                total += conv(1, width, cfg.n_filters)
            width = cfg.n_filters
        return total

    return (tcn(cfg.d) + conv(1, cfg.n_filters, cfg.latent_channels)
            + tcn(cfg.latent_channels) + conv(1, cfg.n_filters, cfg.d))


# -- forward / backward ------------------------------------------------------

def residual_block_forward(x: np.ndarray, b: ResidualBlock, training: bool = False, rng=None,
                           cache: list | None = None) -> np.ndarray:
    """``skip(x) + drop(relu(conv2(drop(relu(conv1(x))))))``.

    If ``cache`` is a list, the intermediates needed by the backward pass are appended to it.
    """
    if x.shape[-1] != b.conv1.d_in:
        raise ValueError(f"block expects {b.conv1.d_in} input channels, got {x.shape[-1]}")
    h1 = nn.dilated_conv1d(x, b.conv1)
    d1, m1 = nn.spatial_dropout(nn.relu(h1), b.dropout_rate, training, rng)
    h2 = nn.dilated_conv1d(d1, b.conv2)
    d2, m2 = nn.spatial_dropout(nn.relu(h2), b.dropout_rate, training, rng)
    skip = x if b.skip is None else nn.dilated_conv1d(x, b.skip)
    if cache is not None:
        cache.append((x, h1, m1, d1, h2, m2))
    return skip + d2


def _residual_block_backward(b: ResidualBlock, cached, gy: np.ndarray, training: bool):
    x, h1, m1, d1, h2, m2 = cached
    rate = b.dropout_rate
    gh2 = nn.relu_grad(h2, nn.spatial_dropout_grad(gy, m2, rate, training))
    gd1, gv2, gg2, gb2 = nn.dilated_conv1d_grads(d1, b.conv2, gh2)
    gh1 = nn.relu_grad(h1, nn.spatial_dropout_grad(gd1, m1, rate, training))
    gx, gv1, gg1, gb1 = nn.dilated_conv1d_grads(x, b.conv1, gh1)
    grads = [gv1, gg1, gb1, gv2, gg2, gb2]
    if b.skip is None:
        gx = gx + gy
    else:
        gxs, gvs, ggs, gbs = nn.dilated_conv1d_grads(x, b.skip, gy)
        gx = gx + gxs
        grads += [gvs, ggs, gbs]
    return gx, grads


def _tcn_forward(blocks, x, training, rng, cache=None):
    for b in blocks:
        x = residual_block_forward(x, b, training, rng, cache)
    return x


def _tcn_backward(blocks, caches, gy, training):
    grads: list[list[np.ndarray]] = []
    for b, c in zip(reversed(blocks), reversed(caches)):
        gy, g = _residual_block_backward(b, c, gy, training)
        grads.append(g)
    flat = [a for g in reversed(grads) for a in g]
    return gy, flat


def encode(m: TcnAeModel, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
    """Latent sequence of shape ``(ceil(T/s), c)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.config.d:
        raise ValueError(f"model expects {m.config.d} channels, got {x.shape[-1]}")
    h = _tcn_forward(m.encoder_blocks, x, training, rng)
    return nn.temporal_avg_pool(nn.dilated_conv1d(h, m.enc_1x1), m.config.sample_factor)


def decode(m: TcnAeModel, g: np.ndarray, length: int | None = None, training: bool = False,
           rng=None) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1] != m.config.latent_channels:
        raise ValueError(f"latent input must have {m.config.latent_channels} channels, got {g.shape[-1]}")
    u = nn.upsample_hold(g, m.config.sample_factor, length)
    h = _tcn_forward(m.decoder_blocks, u, training, rng)
    return nn.dilated_conv1d(h, m.dec_1x1)


def loss_and_grads(m: TcnAeModel, xb: np.ndarray, training: bool = True, rng=None):
    """Log-cosh reconstruction loss of a batch and its gradient for every parameter
    (same order as :meth:`TcnAeModel.parameters`)."""
    cfg = m.config
    s = cfg.sample_factor
    T = xb.shape[-2]
    enc_cache: list = []
    dec_cache: list = []
    h_enc = _tcn_forward(m.encoder_blocks, xb, training, rng, enc_cache)
    z = nn.dilated_conv1d(h_enc, m.enc_1x1)
    g = nn.temporal_avg_pool(z, s)
    u = nn.upsample_hold(g, s, T)
    h_dec = _tcn_forward(m.decoder_blocks, u, training, rng, dec_cache)
    x_hat = nn.dilated_conv1d(h_dec, m.dec_1x1)
    loss, gx_hat = nn.logcosh_loss(xb, x_hat)
    if not math.isfinite(loss):
        raise NumericalError("non-finite training loss")

    gh_dec, gv, gg, gb = nn.dilated_conv1d_grads(h_dec, m.dec_1x1, gx_hat)
    dec_1x1_grads = [gv, gg, gb]
    gu, dec_grads = _tcn_backward(m.decoder_blocks, dec_cache, gh_dec, training)
    gg_latent = nn.upsample_hold_grad(gu, s, g.shape[-2])
    gz = nn.temporal_avg_pool_grad(gg_latent, s, T)
    gh_enc, gv, gg, gb = nn.dilated_conv1d_grads(h_enc, m.enc_1x1, gz)
    enc_1x1_grads = [gv, gg, gb]
    _, enc_grads = _tcn_backward(m.encoder_blocks, enc_cache, gh_enc, training)
    return loss, enc_grads + enc_1x1_grads + dec_grads + dec_1x1_grads


def extract_training_subsequences(x_tr: np.ndarray, T_train: int, count: int, rng_seed=None) -> np.ndarray:
    """``count`` windows of length ``T_train`` at uniform random offsets, stacked as ``(count, T_train, d)``."""
    x_tr = np.asarray(x_tr, dtype=np.float64)
    T = x_tr.shape[0]
    if T_train > T:
        raise ValueError(f"T_train={T_train} exceeds series length {T}")
    rng = nn._as_rng(rng_seed)
    starts = rng.integers(0, T - T_train + 1, size=count)
    if count == 0:
        return np.empty((0, T_train, x_tr.shape[1]))
    return np.stack([x_tr[s:s + T_train] for s in starts])


def subsequences_per_epoch(cfg: TcnAeConfig, T: int) -> int:
    if cfg.subsequences_per_epoch is not None:
        return cfg.subsequences_per_epoch
    return math.ceil(T / (cfg.T_train * cfg.batch_size)) * cfg.batch_size


def train(m: TcnAeModel, x_tr: np.ndarray, progress=None) -> TcnAeModel:
    """Mini-batch Adam training on random sub-sequences. Returns a new model."""
    x_tr = np.asarray(x_tr, dtype=np.float64)
    cfg = m.config
    if x_tr.ndim != 2 or x_tr.shape[1] != cfg.d:
        raise ValueError(f"training series must have shape (T, {cfg.d}), got {x_tr.shape}")
    out = copy.deepcopy(m)
    if out.adam is None:
        out.adam = AdamState.zeros_like(out.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x7C4E])
    n_draw = subsequences_per_epoch(cfg, x_tr.shape[0])
    first_epoch = out.loss_history[-1][0] + 1 if out.loss_history else 1
    for epoch in range(first_epoch, first_epoch + cfg.n_epochs):
        windows = extract_training_subsequences(x_tr, cfg.T_train, n_draw, rng)
        losses = []
        for bi, start in enumerate(range(0, n_draw, cfg.batch_size)):
            xb = windows[start:start + cfg.batch_size]
            try:
                loss, grads = loss_and_grads(out, xb, training=True, rng=rng)
                params, out.adam = nn.adam_step(out.parameters(), grads, out.adam)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            out.set_parameters(params)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        out.loss_history.append((epoch, mean_loss))
        log.info("epoch %d loss %.6f", epoch, mean_loss)
        if progress is not None:
            progress(epoch, mean_loss)
    return out


def reconstruct(m: TcnAeModel, x: np.ndarray) -> np.ndarray:
    """Encode and decode a full series (dropout off). Lengths that are not a multiple
    of the sample factor are right-padded by edge replication and truncated back."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.config.d:
        raise ValueError(f"model expects {m.config.d} channels, got {x.shape[-1]}")
    T = x.shape[-2]
    s = m.config.sample_factor
    pad = (-T) % s
    if pad:
        width = [(0, 0)] * x.ndim
        width[-2] = (0, pad)
        x = np.pad(x, width, mode="edge")
    x_hat = decode(m, encode(m, x), x.shape[-2])
    x_hat = x_hat[..., :T, :]
    if not np.all(np.isfinite(x_hat)):
        raise NumericalError("reconstruction produced non-finite values")
    return x_hat


# -- serialization -----------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"], validate=True)
    shape = tuple(obj["shape"])
    if len(raw) != 8 * math.prod(shape):
        raise ModelFormatError("array payload has the wrong size")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_model(m: TcnAeModel) -> bytes:
    """Serialize to a self-describing JSON document with a SHA-256 checksum."""
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": m.config.to_dict(),
        "parameters": [{"name": n, **_encode_array(p)} for n, p in m.named_parameters()],
        "loss_history": [[int(e), float(v)] for e, v in m.loss_history],
    }
    if m.adam is not None:
        a = m.adam
        doc["adam"] = {
            "t": a.t, "lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps,
            "m": [_encode_array(x) for x in a.m],
            "v": [_encode_array(x) for x in a.v],
        }
    doc["checksum"] = hashlib.sha256(_canonical(doc)).hexdigest()
    return json.dumps(doc, sort_keys=True, indent=1).encode("utf-8") + b"\n"


def load_model(payload: bytes) -> TcnAeModel:
    try:
        doc = json.loads(payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"model file is truncated or not JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ModelFormatError("not a replay-sentinel model file")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {doc.get('version')!r}")
    checksum = doc.pop("checksum", None)
    if checksum != hashlib.sha256(_canonical(doc)).hexdigest():
        raise ModelFormatError("checksum mismatch: model file is corrupted")
    try:
        cfg = TcnAeConfig.from_dict(doc["config"])
        model = build_model(cfg)
        names = [n for n, _ in model.named_parameters()]
        stored = doc["parameters"]
        if [p["name"] for p in stored] != names:
            raise ModelFormatError("parameter list does not match the configuration")
        params = [_decode_array(p) for p in stored]
        for (n, ref), p in zip(model.named_parameters(), params):
            if ref.shape != p.shape:
                raise ModelFormatError(f"parameter {n} has shape {p.shape}, expected {ref.shape}")
        model.set_parameters(params)
        model.loss_history = [(int(e), float(v)) for e, v in doc["loss_history"]]
        if "adam" in doc:
            a = doc["adam"]
            model.adam = AdamState(
                m=[_decode_array(x) for x in a["m"]], v=[_decode_array(x) for x in a["v"]],
                t=int(a["t"]), lr=float(a["lr"]), beta1=float(a["beta1"]),
                beta2=float(a["beta2"]), eps=float(a["eps"]))
        else:
            model.adam = None
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model file: {exc}") from exc
    return model
