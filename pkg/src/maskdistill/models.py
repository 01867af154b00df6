"""Tiny bidirectional transformer denoiser, per-token discriminator, tabular denoiser."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    length: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    init_std: float = 0.08
    # additive sinusoidal time features; off by default because the mask count
    # already carries the noise level and the extra input stalls early training
    time_embedding: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 2:
            raise ValueError("vocabulary needs at least one real token plus MASK")

    @property
    def mask_index(self) -> int:
        return self.vocab_size - 1

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    """Named parameter collection plus a forward pass."""

    kind = "model"

    def __init__(self, config):
        self.config = config
        self.params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        p = Parameter(np.array(data, dtype=np.float64), name=name, trainable=trainable)
        self.params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def freeze(self) -> "Model":
        for p in self.params.values():
            p.trainable = False
            p.requires_grad = False
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            if state[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def clone(self) -> "Model":
        other = copy.copy(self)
        other.params = {}
        for k, p in self.params.items():
            other.params[k] = Parameter(p.data.copy(), name=p.name, trainable=p.trainable)
        other._rebind()
        return other

    def _rebind(self) -> None:
        """Hook for subclasses caching references into ``params``."""


def sinusoidal_time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = 1000.0 * t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.size, 1))], axis=1)
    return emb


class _Backbone(Model):
    """Token + position + time embeddings followed by pre-norm transformer blocks."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config)
        rng = np.random.default_rng(seed)
        c = config
        d, std = c.d_model, c.init_std
        self.add("tok_emb", rng.normal(0, std, (c.vocab_size, d)))
        self.add("pos_emb", rng.normal(0, std, (c.length, d)))
        time_w = rng.normal(0, std, (d, d))
        if c.time_embedding:
            self.add("time.w", time_w)
            self.add("time.b", np.zeros(d))
        out_std = std / math.sqrt(2 * c.n_layers)
        for i in range(c.n_layers):
            p = f"blocks.{i}."
            self.add(p + "ln1.g", np.ones(d))
            self.add(p + "ln1.b", np.zeros(d))
            self.add(p + "attn.qkv", rng.normal(0, std, (d, 3 * d)))
            self.add(p + "attn.out", rng.normal(0, out_std, (d, d)))
            self.add(p + "ln2.g", np.ones(d))
            self.add(p + "ln2.b", np.zeros(d))
            self.add(p + "mlp.w1", rng.normal(0, std, (d, c.mlp_ratio * d)))
            self.add(p + "mlp.b1", np.zeros(c.mlp_ratio * d))
            self.add(p + "mlp.w2", rng.normal(0, out_std, (c.mlp_ratio * d, d)))
            self.add(p + "mlp.b2", np.zeros(d))
        self.add("ln_f.g", np.ones(d))
        self.add("ln_f.b", np.zeros(d))

    def embed(self, z, t) -> Tensor:
        """``z`` is an int array (B, L) or a relaxed one-hot Tensor (B, L, K)."""
        P = self.params
        if isinstance(z, Tensor):
            h = T.matmul(z, P["tok_emb"])
            batch, length = z.shape[0], z.shape[1]
        else:
            z = np.asarray(z)
            h = T.embedding(P["tok_emb"], z)
            batch, length = z.shape
        h = h + P["pos_emb"][:length]
        if not self.config.time_embedding:
            return h
        temb = sinusoidal_time_embedding(np.broadcast_to(t, (batch,)), self.config.d_model)
        tproj = T.matmul(Tensor(temb), P["time.w"]) + P["time.b"]
        return h + T.reshape(tproj, (batch, 1, self.config.d_model))

    def trunk(self, z, t) -> Tensor:
        P = self.params
        c = self.config
        h = self.embed(z, t)
        b, l, d = h.shape
        nh, dh = c.n_heads, c.d_model // c.n_heads
        scale = 1.0 / math.sqrt(dh)
        for i in range(c.n_layers):
            p = f"blocks.{i}."
            a = T.layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
            qkv = T.matmul(a, P[p + "attn.qkv"]).reshape(b, l, 3, nh, dh).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = T.softmax(T.matmul(q, k.transpose(0, 1, 3, 2)) * scale, axis=-1)
            y = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, l, d)
            h = h + T.matmul(y, P[p + "attn.out"])
            m = T.layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
            m = T.gelu(T.matmul(m, P[p + "mlp.w1"]) + P[p + "mlp.b1"])
            h = h + T.matmul(m, P[p + "mlp.w2"]) + P[p + "mlp.b2"]
        return T.layer_norm(h, P["ln_f.g"], P["ln_f.b"])


class Denoiser:
    """Shared constraint layer on top of raw logits.

    Subclasses implement ``logits(z, t) -> Tensor (B, L, K)``.
    """

    def log_probs(self, z, t) -> Tensor:
        """Log-probabilities over the K-1 real tokens (MASK excluded), no carry-over."""
        lg = self.logits(z, t)
        return T.log_softmax(lg[..., : self.config.vocab_size - 1], axis=-1)

    def denoise(self, z: np.ndarray, t) -> np.ndarray:
        """Clean-token distributions (B, L, K): MASK mass 0, unmasked inputs carried over."""
        z = np.asarray(z)
        k = self.config.vocab_size
        with T.no_grad():
            lp = self.log_probs(z, np.broadcast_to(t, (z.shape[0],))).data
        probs = np.zeros(z.shape + (k,))
        probs[..., : k - 1] = np.exp(lp)
        probs[..., : k - 1] /= probs[..., : k - 1].sum(axis=-1, keepdims=True)
        return apply_carry_over(probs, z, k - 1)


def apply_carry_over(probs: np.ndarray, z: np.ndarray, mask_index: int) -> np.ndarray:
    carry = z != mask_index
    if np.any(carry):
        onehot = np.eye(probs.shape[-1])[np.where(carry, z, 0)]
        probs = np.where(carry[..., None], onehot, probs)
    return probs


class DenoiserModel(_Backbone, Denoiser):
    kind = "denoiser"

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config, seed)
        rng = np.random.default_rng(seed + 7919)
        # small head so that a fresh model predicts close to uniform
        self.add("out.w", rng.normal(0, config.init_std / 4, (config.d_model, config.vocab_size)))
        self.add("out.b", np.zeros(config.vocab_size))

    def logits(self, z, t) -> Tensor:
        h = self.trunk(z, t)
        return T.matmul(h, self.params["out.w"]) + self.params["out.b"]


class TabularDenoiser(Model, Denoiser):
    """Per-state logit table over all K^L sequences; ignores time."""

    kind = "tabular"

    def __init__(self, config: ModelConfig, seed: int = 0, scale: float = 1.0):
        super().__init__(config)
        k, l = config.vocab_size, config.length
        if k ** l > 10 ** 4:
            raise ValueError("tabular denoiser limited to 10^4 states")
        rng = np.random.default_rng(seed)
        self.add("table", rng.normal(0, scale, (k ** l, l, k)))
        self._radix = k ** np.arange(l)

    def state_index(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z) * self._radix).sum(axis=-1)

    def logits(self, z, t) -> Tensor:
        return T.embedding(self.params["table"], self.state_index(z))

    def _rebind(self) -> None:
        self._radix = self.config.vocab_size ** np.arange(self.config.length)


@dataclass(frozen=True)
class DiscriminatorConfig(ModelConfig):
    prob_floor: float = 1e-6
    power_iterations: int = 1

    @property
    def logit_bound(self) -> float:
        return math.log((1.0 - self.prob_floor) / self.prob_floor)


class DiscriminatorModel(_Backbone):
    """Backbone + two norm-constrained affine layers with SiLU; one logit per token."""

    kind = "discriminator"

    def __init__(self, config: DiscriminatorConfig, seed: int = 0):
        super().__init__(config, seed)
        rng = np.random.default_rng(seed + 104729)
        d = config.d_model
        self.add("head.0.w", rng.normal(0, 1.0 / math.sqrt(d), (d, d)))
        self.add("head.0.b", np.zeros(d))
        self.add("head.0.u", _unit(rng.normal(size=d)), trainable=False)
        self.add("head.1.w", np.zeros((d, 1)))
        self.add("head.1.b", np.zeros(1))
        self.add("head.1.u", _unit(rng.normal(size=d)), trainable=False)

    def init_backbone_from(self, denoiser: DenoiserModel) -> None:
        for name, p in denoiser.params.items():
            if name in self.params and not name.startswith(("head.", "out.")):
                self.params[name].data = p.data.copy()

    def _constrained(self, layer: str, update: bool) -> Tensor:
        """Weight divided by max(1, leading singular value estimate)."""
        w = self.params[f"head.{layer}.w"]
        u_param = self.params[f"head.{layer}.u"]
        u = u_param.data
        if update:
            for _ in range(self.config.power_iterations):
                u = _unit(w.data @ _unit(w.data.T @ u))
            u_param.data = u
        v = _unit(w.data.T @ u)
        sigma = T.tsum(T.matmul(T.matmul(Tensor(u[None, :]), w), Tensor(v[:, None])))
        if sigma.item() <= 1.0:
            return w
        return w / sigma

    def logits(self, z, t, update_norm: bool = False) -> Tensor:
        """Per-position logits (B, L), clamped so that D stays inside [floor, 1 - floor]."""
        h = self.trunk(z, t)
        w0 = self._constrained("0", update_norm)
        w1 = self._constrained("1", update_norm)
        h = T.silu(T.matmul(h, w0) + self.params["head.0.b"])
        out = T.matmul(h, w1) + self.params["head.1.b"]
        b = self.config.logit_bound
        return T.clip(out[..., 0], -b, b)

    def discriminate(self, z: np.ndarray, t) -> np.ndarray:
        z = np.asarray(z)
        with T.no_grad():
            lg = self.logits(z, np.broadcast_to(t, (z.shape[0],))).data
        return 0.5 * (1.0 + np.tanh(0.5 * lg))

    def head_operator_norms(self) -> list[float]:
        out = []
        for layer in ("0", "1"):
            with T.no_grad():
                w = self._constrained(layer, update=False).data
            out.append(float(np.linalg.norm(w, 2)))
        return out


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def denoise(model: Denoiser, z_t: np.ndarray, t) -> np.ndarray:
    return model.denoise(z_t, t)


def discriminate(model: DiscriminatorModel, z_t: np.ndarray, t) -> np.ndarray:
    return model.discriminate(z_t, t)


def init_student_from_teacher(teacher: Model) -> Model:
    """Independent deep copy; all parameters trainable."""
    student = teacher.clone()
    for p in student.params.values():
        if not p.name.endswith(".u"):
            p.trainable = True
            p.requires_grad = True
    return student


def build_model(kind: str, config_dict: dict, seed: int = 0) -> Model:
    if kind == "denoiser":
        return DenoiserModel(ModelConfig(**config_dict), seed)
    if kind == "discriminator":
        return DiscriminatorModel(DiscriminatorConfig(**config_dict), seed)
    if kind == "tabular":
        return TabularDenoiser(ModelConfig(**config_dict), seed)
    raise ValueError(f"unknown model kind {kind!r}")
