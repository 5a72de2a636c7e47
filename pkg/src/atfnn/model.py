"""Attentive time-frequency network over log-mel segments.

The model sees an 80x128 grid per segment. A frequency attention block
gates 5-band groups of the raw grid, a frequency encoder lifts it to c
channels and mixes the 80 bands per frame with multi-head self-attention
plus time convolutions, a time attention block gates 8-frame groups, and
a 3-layer bidirectional LSTM reads the frame sequence into a fixed
embedding for a linear classifier. Ablation variants drop individual
stages: AFNN has no sequence encoder, ATNN no frequency encoder, TFNN no
attention at all.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("AFNN", "ATNN", "TFNN", "ATFNN")


@dataclass
class ModelConfig:
    f: int = 80
    t: int = 128
    c: int = 8
    band_group: int = 5
    frame_group: int = 8
    attention_heads: int = 4
    fenc_conv_channels: tuple[int, int] = (32, 8)
    fenc_conv_width: int = 5
    lstm_layers: int = 3
    lstm_hidden: int = 128
    num_classes: int = 2
    variant: str = "ATFNN"

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.f % self.band_group:
            raise ValueError(f"f={self.f} not divisible by band_group={self.band_group}")
        if self.t % self.frame_group:
            raise ValueError(f"t={self.t} not divisible by frame_group={self.frame_group}")
        if self.c % self.attention_heads:
            raise ValueError(f"c={self.c} not divisible by attention_heads={self.attention_heads}")
        if self.fenc_conv_channels[1] != self.c:
            raise ValueError("second encoder conv must map back to c channels "
                             f"(got {self.fenc_conv_channels[1]}, c={self.c})")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.lstm_layers < 1 or self.lstm_hidden < 1:
            raise ValueError("lstm_layers and lstm_hidden must be positive")

    @property
    def embed_dim(self) -> int:
        """Classifier input width: pooled grid for AFNN, Bi-LSTM ends otherwise."""
        return self.f * self.c if self.variant == "AFNN" else 2 * self.lstm_hidden


@dataclass
class AttentionMaps:
    """Detached attention weights for inspection and export.

    freq_* cover the 5-band groups (raw per-channel, channel-averaged,
    expanded back to all f bands); time_* cover the 8-frame groups.
    Parts not produced by the variant stay None. Arrays keep the leading
    batch axis of the forward pass that made them.
    """
    freq_raw: np.ndarray | None = None       # (B, f/5, t, c)
    freq_avg: np.ndarray | None = None       # (B, f/5, t)
    freq_expanded: np.ndarray | None = None  # (B, f, t)
    time_raw: np.ndarray | None = None       # (B, f, t/8, c)
    time_avg: np.ndarray | None = None       # (B, f, t/8)
    time_expanded: np.ndarray | None = None  # (B, f, t)


class AtfnnModel:
    """Parameter container plus the forward graph builders for one variant."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        cfg = config
        v = cfg.variant

        def uniform(name, shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
            self.params[name] = Tensor(data, requires_grad=True)

        def zeros(name, shape):
            self.params[name] = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

        def ones(name, shape):
            self.params[name] = Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)

        if v in ("ATFNN", "AFNN"):
            uniform("fatt.kernel", (cfg.c, 1, cfg.band_group, 1), cfg.band_group)
        if v in ("ATFNN", "ATNN"):
            uniform("tatt.kernel", (cfg.c, 1, 1, cfg.frame_group), cfg.frame_group)
        # the 1->c channel lift feeds the frequency encoder, and stands in
        # for it in the ATNN ablation
        uniform("lift.w", (cfg.c, 1, 1), 1)
        zeros("lift.b", (cfg.c, 1, 1))
        if v != "ATNN":
            for n in ("wq", "wk", "wv", "wo"):
                uniform(f"mhsa.{n}", (cfg.c, cfg.c), cfg.c)
            ones("ln1.gain", (cfg.c,))
            zeros("ln1.bias", (cfg.c,))
            ch1, ch2 = cfg.fenc_conv_channels
            w = cfg.fenc_conv_width
            uniform("fenc.conv1.kernel", (ch1, cfg.c, 1, w), cfg.c * w)
            zeros("fenc.conv1.bias", (ch1,))
            uniform("fenc.conv2.kernel", (ch2, ch1, 1, w), ch1 * w)
            zeros("fenc.conv2.bias", (ch2,))
            ones("ln2.gain", (cfg.c,))
            zeros("ln2.bias", (cfg.c,))
        if v != "AFNN":
            h = cfg.lstm_hidden
            for layer in range(cfg.lstm_layers):
                d_in = cfg.f * cfg.c if layer == 0 else 2 * h
                for direction in ("fw", "bw"):
                    base = f"lstm.l{layer}.{direction}"
                    uniform(f"{base}.wx", (d_in, 4 * h), d_in)
                    uniform(f"{base}.wh", (h, 4 * h), h)
                    zeros(f"{base}.b", (4 * h,))
                    # standard trick: start with an open forget gate
                    self.params[f"{base}.b"].data[h:2 * h] = 1.0
        uniform("cls.w", (cfg.embed_dim, cfg.num_classes), cfg.embed_dim)
        zeros("cls.b", (cfg.num_classes,))

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "AtfnnModel":
        """Cast all parameters in place; optimizer state must be rebuilt after."""
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.data = p.data.astype(self.dtype)
        return self

    # -- stages -----------------------------------------------------------
    # All stage methods take and return batched tensors; x is (B, f, t).

    def _check_grid(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.f, cfg.t):
            raise ValueError(f"expected (batch, {cfg.f}, {cfg.t}) grid, got {x.shape}")

    def lift(self, x: Tensor) -> Tensor:
        """Shared linear 1->c on every cell: (B, f, t) -> (B, c, f, t)."""
        B = x.shape[0]
        cfg = self.config
        x4 = ad.reshape(x, (B, 1, cfg.f, cfg.t))
        return ad.add(ad.mul(x4, self.params["lift.w"]), self.params["lift.b"])

    def f_attention(self, x: Tensor) -> tuple[Tensor, dict]:
        """Gate 5-band frequency groups of the raw grid: x + A * x."""
        self._check_grid(x)
        cfg = self.config
        B = x.shape[0]
        x4 = ad.reshape(x, (B, 1, cfg.f, cfg.t))
        raw = ad.sigmoid(ad.conv2d(x4, self.params["fatt.kernel"],
                                   stride=(cfg.band_group, 1)))  # (B, c, f/5, t)
        avg = ad.tmean(raw, axis=1)                              # (B, f/5, t)
        expanded = ad.repeat_groups(avg, cfg.band_group, axis=1)  # (B, f, t)
        enhanced = ad.add(x, ad.mul(expanded, x))
        maps = {
            "freq_raw": np.ascontiguousarray(raw.data.transpose(0, 2, 3, 1)),
            "freq_avg": avg.data.copy(),
            "freq_expanded": expanded.data.copy(),
        }
        return enhanced, maps

    def f_encoder(self, x: Tensor) -> Tensor:
        """(B, f, t) grid -> (B, f, t, c) frequency-mixed features."""
        self._check_grid(x)
        cfg = self.config
        B = x.shape[0]
        lifted = self.lift(x)                                     # (B, c, f, t)
        tokens = ad.reshape(ad.transpose(lifted, (0, 3, 2, 1)), (B * cfg.t, cfg.f, cfg.c))
        att = ad.multi_head_self_attention(tokens, self.params["mhsa.wq"],
                                           self.params["mhsa.wk"], self.params["mhsa.wv"],
                                           self.params["mhsa.wo"], cfg.attention_heads)
        y1 = ad.layer_norm(ad.add(tokens, att), self.params["ln1.gain"], self.params["ln1.bias"])
        # time-axis convs need NCHW
        y1_grid = ad.transpose(ad.reshape(y1, (B, cfg.t, cfg.f, cfg.c)), (0, 3, 2, 1))
        pad = (0, cfg.fenc_conv_width // 2)
        h = ad.relu(ad.conv2d(y1_grid, self.params["fenc.conv1.kernel"],
                              self.params["fenc.conv1.bias"], padding=pad))
        y2_grid = ad.conv2d(h, self.params["fenc.conv2.kernel"],
                            self.params["fenc.conv2.bias"], padding=pad)
        y2 = ad.reshape(ad.transpose(y2_grid, (0, 3, 2, 1)), (B * cfg.t, cfg.f, cfg.c))
        out = ad.layer_norm(ad.add(y1, y2), self.params["ln2.gain"], self.params["ln2.bias"])
        return ad.transpose(ad.reshape(out, (B, cfg.t, cfg.f, cfg.c)), (0, 2, 1, 3))

    def t_attention(self, x: Tensor, x_hat: Tensor) -> tuple[Tensor, dict]:
        """Gate 8-frame groups of x_hat with weights computed from raw x."""
        self._check_grid(x)
        cfg = self.config
        B = x.shape[0]
        if x_hat.shape != (B, cfg.f, cfg.t, cfg.c):
            raise ValueError(f"expected {(B, cfg.f, cfg.t, cfg.c)} features, got {x_hat.shape}")
        x4 = ad.reshape(x, (B, 1, cfg.f, cfg.t))
        raw = ad.sigmoid(ad.conv2d(x4, self.params["tatt.kernel"],
                                   stride=(1, cfg.frame_group)))  # (B, c, f, t/8)
        avg = ad.tmean(raw, axis=1)                               # (B, f, t/8)
        expanded = ad.repeat_groups(avg, cfg.frame_group, axis=2)  # (B, f, t)
        gate = ad.reshape(expanded, (B, cfg.f, cfg.t, 1))
        enhanced = ad.add(x_hat, ad.mul(gate, x_hat))
        maps = {
            "time_raw": np.ascontiguousarray(raw.data.transpose(0, 2, 3, 1)),
            "time_avg": avg.data.copy(),
            "time_expanded": expanded.data.copy(),
        }
        return enhanced, maps

    def t_encoder(self, x_feat: Tensor) -> Tensor:
        """(B, f, t, c) -> (B, 2*hidden) via frame-sequence Bi-LSTM.

        Each frame flattens to an f*c vector; the embedding concatenates
        the forward direction's last hidden state with the backward
        direction's state for the first frame.
        """
        cfg = self.config
        B = x_feat.shape[0]
        seq = ad.reshape(ad.transpose(x_feat, (0, 2, 1, 3)), (B, cfg.t, cfg.f * cfg.c))
        layers = []
        for layer in range(cfg.lstm_layers):
            layers.append({
                d: (self.params[f"lstm.l{layer}.{d}.wx"],
                    self.params[f"lstm.l{layer}.{d}.wh"],
                    self.params[f"lstm.l{layer}.{d}.b"])
                for d in ("fw", "bw")
            })
        _, final = ad.bilstm(seq, layers, cfg.lstm_hidden)
        return final

    def classify(self, h: Tensor) -> Tensor:
        return ad.linear(h, self.params["cls.w"], self.params["cls.b"])

    # -- full forward -------------------------------------------------------

    def forward(self, x, want_maps: bool = True) -> tuple[Tensor, AttentionMaps | None]:
        """Segment grid(s) to logits. Accepts (f, t) or (B, f, t); a 2-D
        input comes back unbatched. Maps are None for TFNN."""
        squeeze = False
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
            squeeze = True
        self._check_grid(x)
        v = self.config.variant
        parts: dict = {}
        if v == "ATFNN":
            enhanced, m = self.f_attention(x)
            parts.update(m)
            x_hat = self.f_encoder(enhanced)
            gated, m = self.t_attention(x, x_hat)
            parts.update(m)
            logits = self.classify(self.t_encoder(gated))
        elif v == "TFNN":
            logits = self.classify(self.t_encoder(self.f_encoder(x)))
        elif v == "AFNN":
            enhanced, m = self.f_attention(x)
            parts.update(m)
            x_hat = self.f_encoder(enhanced)
            pooled = ad.tmean(x_hat, axis=2)  # (B, f, c)
            logits = self.classify(ad.reshape(pooled, (x.shape[0], -1)))
        elif v == "ATNN":
            lifted = ad.transpose(self.lift(x), (0, 2, 3, 1))  # (B, f, t, c)
            gated, m = self.t_attention(x, lifted)
            parts.update(m)
            logits = self.classify(self.t_encoder(gated))
        else:
            raise ValueError(f"unknown variant {v!r}")

        maps = None
        if parts and want_maps:
            if squeeze:
                parts = {k: a[0] for k, a in parts.items()}
            maps = AttentionMaps(**parts)
        if squeeze:
            logits = ad.reshape(logits, (self.config.num_classes,))
        return logits, maps


def save_model(path, model: AtfnnModel, meta: dict | None = None) -> None:
    """Write parameters in the binary checkpoint format plus a JSON sidecar
    (same path + ".json") holding the model configuration."""
    ad.save_checkpoint(path, model.params)
    sidecar = {"model": asdict(model.config), "dtype": model.dtype.name}
    if meta:
        sidecar["meta"] = meta
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_model(path) -> AtfnnModel:
    """Rebuild a model from a checkpoint and its JSON sidecar."""
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing sidecar {sidecar_path} for checkpoint {path}")
    sidecar = json.loads(sidecar_path.read_text())
    fields = dict(sidecar["model"])
    fields["fenc_conv_channels"] = tuple(fields["fenc_conv_channels"])
    model = AtfnnModel(ModelConfig(**fields), seed=0, dtype=np.dtype(sidecar.get("dtype", "float64")))
    ad.restore(model.params, ad.load_checkpoint(path))
    return model


def train_step(model: AtfnnModel, optimizer, batch_x: np.ndarray, labels: np.ndarray) -> float:
    """One optimization step on a segment batch; returns the pre-update loss."""
    if len(batch_x) == 0:
        raise ValueError("empty batch")
    x = Tensor(np.asarray(batch_x, dtype=model.dtype))
    logits, _ = model.forward(x, want_maps=False)
    loss = ad.softmax_cross_entropy(logits, labels)
    value = loss.item()
    if not np.isfinite(value):
        raise ad.DivergenceError(f"non-finite loss {value!r} on batch of {len(batch_x)}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return value


def posteriors(model: AtfnnModel, segments: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class posteriors for a stack of segments, (N, num_classes) float64."""
    outs = []
    with ad.no_grad():
        for start in range(0, len(segments), batch_size):
            chunk = segments[start:start + batch_size]
            logits, _ = model.forward(Tensor(np.asarray(chunk, dtype=model.dtype)),
                                      want_maps=False)
            z = logits.data.astype(np.float64)
            z -= z.max(axis=1, keepdims=True)
            e = np.exp(z)
            outs.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(outs, axis=0)
