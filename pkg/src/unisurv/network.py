"""Masked transformer encoder that maps covariates to a PDF over the time grid."""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class TapeConsumedError(RuntimeError):
    pass


DYNAMIC_MODES = ("none", "tabular", "tensor")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``t_window`` groups time steps into blocks that share one dynamic feature
    (see ``window_pooling``). Latent widths and conv channels are not given in
    the method description; the defaults here are ours.
    """

    t_max: int
    static_dim: int
    dynamic_dim: int = 0
    dynamic_mode: str = "none"
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    dropout: float = 0.1
    t_window: int = 1
    use_mask: bool = True
    seed: int = 0
    static_latent: int = 32
    dynamic_latent: int = 32
    ff_mult: int = 4
    window_pooling: str = "causal"
    tensor_shape: tuple = (3, 30)
    conv_channels: tuple = (8, 16)
    dtype: str = "float32"

    def __post_init__(self):
        self.tensor_shape = tuple(int(v) for v in self.tensor_shape)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        if self.d_model % 2 or self.d_model < 2:
            raise ConfigError(f"d_model must be a positive even number, got {self.d_model}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dynamic_mode not in DYNAMIC_MODES:
            raise ConfigError(f"dynamic_mode must be one of {DYNAMIC_MODES}")
        if self.window_pooling not in ("causal", "replicate"):
            raise ConfigError("window_pooling must be 'causal' or 'replicate'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.dynamic_mode != "none" and (self.t_window < 1 or (self.t_max + 1) % self.t_window):
            raise ConfigError(f"t_window={self.t_window} must divide t_max + 1 = {self.t_max + 1}")
        if self.dynamic_mode == "tabular" and self.dynamic_dim < 1:
            raise ConfigError("tabular dynamic mode needs dynamic_dim >= 1")

    @property
    def length(self) -> int:
        return self.t_max + 1

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


def positional_encoding(d_model: int, length: int) -> np.ndarray:
    """Sine-cosine table: sin on even columns, cos on odd columns."""
    if d_model % 2:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


def causal_mask(length: int, dtype=torch.float64) -> torch.Tensor:
    """Additive attention mask: 0 where key <= query, -inf otherwise."""
    if length < 1:
        raise ConfigError("mask length must be >= 1")
    return torch.triu(torch.full((length, length), float("-inf"), dtype=dtype), diagonal=1)


@dataclass
class ModelInputs:
    """Batched, fully imputed inputs.

    ``x_dynamic`` is ``(B, L, dynamic_dim)`` in tabular mode;
    ``x_tensor`` is ``(B, L, tasks, responses)`` in tensor mode.
    """

    x_static: torch.Tensor
    x_dynamic: torch.Tensor | None = None
    x_tensor: torch.Tensor | None = None

    def __len__(self):
        return self.x_static.shape[0]

    def index(self, idx) -> "ModelInputs":
        return ModelInputs(
            self.x_static[idx],
            None if self.x_dynamic is None else self.x_dynamic[idx],
            None if self.x_tensor is None else self.x_tensor[idx],
        )

    @classmethod
    def from_arrays(cls, x_static, x_dynamic=None, x_tensor=None, dtype=torch.float32) -> "ModelInputs":
        conv = lambda a: None if a is None else torch.as_tensor(np.asarray(a), dtype=dtype)
        return cls(conv(x_static), conv(x_dynamic), conv(x_tensor))


class SeededDropout(nn.Module):
    """Inverted dropout drawing keep masks from a numpy stream.

    Torch's CPU Bernoulli sampler dominated training time on the attention
    weights; 16-bit uniforms from PCG64 are several times cheaper. The drop
    rate is rounded to a multiple of 2**-16.
    """

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.rng = np.random.default_rng(0)

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        bits = self.rng.integers(0, 1 << 16, size=tuple(x.shape), dtype=np.uint16).view(np.int16)
        keep = torch.from_numpy(bits) >= round(self.p * 65536) - 32768
        return x * keep.to(x.dtype).mul_(1.0 / (1.0 - self.p))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.drop = SeededDropout(dropout)

    def forward(self, x, mask=None):
        B, L, D = x.shape
        H, dh = self.n_heads, self.d_head
        q, k, v = self.qkv(x).view(B, L, 3, H, dh).permute(2, 0, 3, 1, 4)
        if self.training and self.drop.p > 0:
            # dropout acts on the attention weights, so they are formed explicitly
            q3, k3 = q.reshape(B * H, L, dh), k.reshape(B * H, L, dh)
            bias = torch.zeros((), dtype=x.dtype) if mask is None else mask
            scores = torch.baddbmm(bias.expand(B * H, L, L), q3, k3.transpose(1, 2), alpha=dh**-0.5)
            o = self.drop(torch.softmax(scores, dim=-1)).view(B, H, L, L) @ v
        else:
            o = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out(o.transpose(1, 2).reshape(B, L, D))


class EncoderLayer(nn.Module):
    """Post-norm block: attention, add & norm, feed-forward, add & norm."""

    def __init__(self, d_model: int, n_heads: int, dropout: float, ff_mult: int = 4):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d_model, n_heads, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model),
            nn.ReLU(),
            SeededDropout(dropout),
            nn.Linear(ff_mult * d_model, d_model),
        )
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x, mask=None):
        x = self.norm1(x + self.attn(x, mask))
        return self.norm2(x + self.ff(x))


class ConvExtractor(nn.Module):
    """Two conv stages over one month's (task x response) plane."""

    def __init__(self, tensor_shape, channels, out_dim: int):
        super().__init__()
        tasks, resp = tensor_shape
        c1, c2 = channels
        self.net = nn.Sequential(
            nn.Conv1d(tasks, c1, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool1d(2),
            nn.Conv1d(c1, c2, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool1d(2),
            nn.Flatten(),
        )
        self.proj = nn.Linear(c2 * (resp // 4), out_dim)

    def forward(self, x):
        return F.relu(self.proj(self.net(x)))


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out), nn.ReLU())


class UniSurvNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.static_branch = _mlp(cfg.static_dim, cfg.static_latent, cfg.static_latent)
        emb_in = cfg.static_latent
        if cfg.dynamic_mode == "tabular":
            self.dynamic_branch = _mlp(cfg.dynamic_dim, cfg.dynamic_latent, cfg.dynamic_latent)
            emb_in += cfg.dynamic_latent
        elif cfg.dynamic_mode == "tensor":
            self.dynamic_branch = ConvExtractor(cfg.tensor_shape, cfg.conv_channels, cfg.dynamic_latent)
            emb_in += cfg.dynamic_latent
        self.embed = nn.Sequential(nn.Linear(emb_in, d), nn.ReLU(), nn.Linear(d, d), nn.LayerNorm(d))
        self.layers = nn.ModuleList(
            EncoderLayer(d, cfg.n_heads, cfg.dropout, cfg.ff_mult) for _ in range(cfg.n_layers)
        )
        self.head = nn.Sequential(nn.Linear(d, d // 2), nn.ReLU(), nn.LayerNorm(d // 2), nn.Linear(d // 2, 1))
        self.register_buffer("pos", torch.as_tensor(positional_encoding(d, cfg.length)), persistent=False)
        self.register_buffer("mask", causal_mask(cfg.length), persistent=False)
        self.to(cfg.torch_dtype)
        self.reset_parameters()

    def reseed_dropout(self, seed: int) -> None:
        """Give every dropout site its own child stream of ``seed``."""
        sites = [m for m in self.modules() if isinstance(m, SeededDropout)]
        for m, child in zip(sites, np.random.SeedSequence([seed, 1]).spawn(len(sites))):
            m.rng = np.random.default_rng(child)

    def reset_parameters(self):
        self.reseed_dropout(self.cfg.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.cfg.seed)
            for m in self.modules():
                if isinstance(m, (nn.Linear, nn.Conv1d)):
                    nn.init.xavier_uniform_(m.weight)
                    nn.init.zeros_(m.bias)
                elif isinstance(m, nn.LayerNorm):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)

    def _check(self, x, name):
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite activation after {name}")
        return x

    def _pool_windows(self, h):
        W = self.cfg.t_window
        if W == 1:
            return h
        B, L, D = h.shape
        blocks = h.view(B, L // W, W, D)
        if self.cfg.window_pooling == "replicate":
            shared = blocks.mean(dim=2, keepdim=True).expand_as(blocks)
        else:
            # running mean inside each block so position j never sees j+1..
            count = torch.arange(1, W + 1, dtype=h.dtype).view(1, 1, W, 1)
            shared = blocks.cumsum(dim=2) / count
        return shared.reshape(B, L, D)

    def encode(self, inputs: ModelInputs) -> torch.Tensor:
        """Encoder outputs ``(B, L, d_model)``, before the head."""
        cfg = self.cfg
        xs = inputs.x_static
        if xs.ndim != 2 or xs.shape[1] != cfg.static_dim:
            raise ConfigError(f"static input has shape {tuple(xs.shape)}, expected (B, {cfg.static_dim})")
        B, L = xs.shape[0], cfg.length
        h = self._check(self.static_branch(xs), "static_branch").unsqueeze(1).expand(B, L, -1)
        if cfg.dynamic_mode == "tabular":
            xd = inputs.x_dynamic
            if xd is None or tuple(xd.shape[1:]) != (L, cfg.dynamic_dim):
                shape = None if xd is None else tuple(xd.shape)
                raise ConfigError(f"dynamic input has shape {shape}, expected (B, {L}, {cfg.dynamic_dim})")
            hd = self._check(self.dynamic_branch(xd), "dynamic_branch")
            h = torch.cat([h, self._pool_windows(hd)], dim=-1)
        elif cfg.dynamic_mode == "tensor":
            xt = inputs.x_tensor
            if xt is None or tuple(xt.shape[1:]) != (L, *cfg.tensor_shape):
                shape = None if xt is None else tuple(xt.shape)
                raise ConfigError(f"tensor input has shape {shape}, expected (B, {L}, {cfg.tensor_shape})")
            hd = self.dynamic_branch(xt.reshape(B * L, *cfg.tensor_shape)).view(B, L, -1)
            h = torch.cat([h, self._pool_windows(self._check(hd, "dynamic_branch"))], dim=-1)
        x = self._check(self.embed(h), "embedding") + self.pos.to(h.dtype)
        mask = self.mask.to(h.dtype) if cfg.use_mask else None
        for i, layer in enumerate(self.layers):
            x = self._check(layer(x, mask), f"encoder layer {i}")
        return x

    def forward(self, inputs: ModelInputs) -> torch.Tensor:
        """Probabilities ``(B, t_max + 1)``; each row sums to 1."""
        scores = self._check(self.head(self.encode(inputs)).squeeze(-1), "head")
        return torch.softmax(scores, dim=-1)


class GradientTape:
    """Handle on one forward pass; yields parameter gradients exactly once."""

    def __init__(self, model: nn.Module, output: torch.Tensor):
        self.model = model
        self.output = output
        self._consumed = False

    def backward(self, loss: torch.Tensor, seed: float = 1.0) -> dict[str, np.ndarray]:
        if self._consumed:
            raise TapeConsumedError("this tape has already been used for a backward pass")
        self._consumed = True
        names, params = zip(*self.model.named_parameters())
        grads = torch.autograd.grad(
            loss, params, grad_outputs=torch.as_tensor(seed, dtype=loss.dtype), allow_unused=True
        )
        return {
            n: np.zeros(tuple(p.shape)) if g is None else g.detach().cpu().numpy().astype(np.float64)
            for n, p, g in zip(names, params, grads)
        }


def forward(model: UniSurvNet, inputs: ModelInputs) -> tuple[torch.Tensor, GradientTape]:
    probs = model(inputs)
    return probs, GradientTape(model, probs)


@torch.no_grad()
def predict_probs(model: UniSurvNet, inputs: ModelInputs, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        out = [model(inputs.index(slice(i, i + batch_size))) for i in range(0, len(inputs), batch_size)]
    finally:
        model.train(was_training)
    probs = torch.cat(out).double().numpy()
    # float32 softmax rows can miss 1 by ~1e-7; renormalise in float64
    return probs / probs.sum(axis=1, keepdims=True)


def save_checkpoint(path, model: UniSurvNet, extra: dict | None = None) -> None:
    """One torch file holding the config, every parameter tensor and ``extra``."""
    payload = {"config": asdict(model.cfg), "state": model.state_dict(), "extra": extra or {}}
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[UniSurvNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = UniSurvNet(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload["extra"]
