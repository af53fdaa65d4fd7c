"""Emotion network: frozen attention encoder with LoRA, pooling, dual heads.

Pipeline: feature matrix [T, D] -> frozen 2-layer pre-norm self-attention
encoder (LoRA adapters on the q/k/v projections are the only trainable
encoder parameters) -> downsized ECAPA-style stack with GroupNorm
(input TDNN block, three SE-Res2 blocks at dilations 2/3/4, multi-feature
aggregation conv) -> attentive statistics pooling plus multiscale
hierarchical attention pooling -> 7-way softmax head and 3-way sigmoid head.

The encoder carries no positional encoding: order information enters the
network only through convolution kernels wider than one frame, which keeps
the permutation-sensitivity contract testable.

Parameters live in a flat dotted-name table (e.g. encoder.layer0.attn.q.lora.A)
that doubles as the checkpoint schema.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, concat, conv1d_dilated, group_norm, layer_norm, stack_rows
from .errors import ConfigError, ShapeError
from .labels import NUM_CLASSES


# -- configuration ---------------------------------------------------------


@dataclass
class EncoderStubConfig:
    num_layers: int = 2
    model_dim: int = 32
    num_heads: int = 4
    ff_dim: int = 64
    frozen: bool = True

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"encoder model_dim {self.model_dim} not divisible by {self.num_heads} heads"
            )
        if self.num_layers < 1:
            raise ConfigError("encoder needs at least one layer")


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0

    def __post_init__(self):
        if self.rank < 0:
            raise ConfigError(f"LoRA rank must be >= 0, got {self.rank}")

    @property
    def enabled(self) -> bool:
        return self.rank > 0


@dataclass
class PoolingConfig:
    scales: tuple = (1, 4, 16)
    attention_hidden: int = 32

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales or self.scales[0] != 1:
            raise ConfigError("pooling scales must start with 1")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"pooling scales must be strictly increasing, got {self.scales}")


@dataclass
class EcapaConfig:
    channels: int = 64
    dilations: tuple = (2, 3, 4)
    res2_scale: int = 4
    gn_groups: int = 8
    se_bottleneck: int = 16
    kernel_size: int = 3
    gn_eps: float = 1e-5
    stats_attention_hidden: int = 32

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.channels % self.gn_groups != 0:
            raise ConfigError(
                f"ECAPA channels {self.channels} not divisible by {self.gn_groups} GroupNorm groups"
            )
        if self.channels % self.res2_scale != 0:
            raise ConfigError(
                f"ECAPA channels {self.channels} not divisible by Res2 scale {self.res2_scale}"
            )
        if self.kernel_size % 2 != 1:
            raise ConfigError(f"ECAPA kernel size must be odd, got {self.kernel_size}")
        if self.gn_eps <= 0:
            raise ConfigError("GroupNorm eps must be > 0")


@dataclass
class ModelConfig:
    feature_dim: int = 16
    seed: int = 0
    encoder: EncoderStubConfig = field(default_factory=EncoderStubConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    ecapa: EcapaConfig = field(default_factory=EcapaConfig)


# -- outputs ---------------------------------------------------------------


@dataclass
class DimScores:
    arousal: float
    valence: float
    dominance: float

    def as_array(self) -> np.ndarray:
        return np.array([self.arousal, self.valence, self.dominance])


@dataclass
class ModelOutput:
    cat_logits: Tensor          # [7]
    cat_probs: Tensor           # [7], softmax of logits
    dim_tensor: Tensor          # [3] sigmoid scores, kept on the graph
    dims: DimScores

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.cat_probs.data))


# -- LoRA ------------------------------------------------------------------


@dataclass
class LoraAdapter:
    """Low-rank update for one projection: W_eff = W + (alpha/rank) * B @ A."""

    rank: int
    alpha: float
    A: Tensor                   # [rank, d_in], seeded Gaussian scale 0.02
    B: Tensor                   # [d_out, rank], zero-initialized
    target: str                 # one of {query, key, value}

    def __post_init__(self):
        if self.target not in ("query", "key", "value"):
            raise ConfigError(f"LoRA target must be query/key/value, got {self.target!r}")
        if self.A.data.shape[0] != self.rank or self.B.data.shape[1] != self.rank:
            raise ConfigError(
                f"LoRA rank mismatch: A {self.A.data.shape}, B {self.B.data.shape}, rank {self.rank}"
            )

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: Tensor) -> Tensor:
        """Adapter contribution (alpha/rank) * (x @ A^T) @ B^T; exact zero while B is zero."""
        return ((x @ self.A.T) @ self.B.T) * self.scaling


def lora_merge(base_weight: Tensor, adapter: LoraAdapter) -> Tensor:
    """Dense merge W' = W + (alpha/rank) * B @ A."""
    ba = adapter.B.data @ adapter.A.data
    if ba.shape != base_weight.data.shape:
        raise ConfigError(
            f"lora_merge shape mismatch: B@A is {ba.shape}, base weight is {base_weight.data.shape}"
        )
    return Tensor(base_weight.data + adapter.scaling * ba)


# -- pooling primitives ------------------------------------------------------

_window_matrix_cache: dict = {}


def _window_matrix(t: int, scale: int) -> Tensor:
    """Averaging matrix over non-overlapping windows of `scale` frames (remainder kept)."""
    key = (t, scale)
    cached = _window_matrix_cache.get(key)
    if cached is None:
        n = math.ceil(t / scale)
        m = np.zeros((n, t))
        for i in range(n):
            lo, hi = i * scale, min((i + 1) * scale, t)
            m[i, lo:hi] = 1.0 / (hi - lo)
        cached = Tensor(m)
        _window_matrix_cache[key] = cached
    return cached


def additive_attention(seq: Tensor, w: Tensor, b: Tensor, v: Tensor) -> tuple:
    """Single-head additive attention over rows of [n, d].

    Returns (summary [d], weights [n]); weights are softmax of
    v^T tanh(W u_i + b).
    """
    scores = ((seq @ w.T + b).tanh() @ v.reshape(-1, 1)).reshape(seq.data.shape[0])
    weights = scores.softmax()
    summary = (weights.reshape(1, -1) @ seq).reshape(seq.data.shape[1])
    return summary, weights


def multiscale_hierarchical_pool(hidden: Tensor, cfg: PoolingConfig,
                                 scale_attn: tuple, hier_attn: tuple,
                                 return_details: bool = False):
    """Multiscale + hierarchical attention pooling of [T, d] into [d].

    Per scale s: average non-overlapping windows of s frames (remainder
    window kept, short inputs collapse to a single whole-sequence window),
    then apply a shared additive attention to get one summary per scale.
    A second additive attention over the per-scale summaries yields the
    pooled vector.
    """
    t = hidden.data.shape[0]
    if t == 0:
        raise ShapeError("multiscale pooling on empty input (T=0)")
    summaries = []
    scale_weights = {}
    for scale in cfg.scales:
        windowed = _window_matrix(t, scale) @ hidden
        summary, weights = additive_attention(windowed, *scale_attn)
        summaries.append(summary)
        scale_weights[scale] = weights
    stacked = stack_rows(summaries)
    pooled, hier_weights = additive_attention(stacked, *hier_attn)
    if return_details:
        return pooled, {"scale_weights": scale_weights, "hier_weights": hier_weights}
    return pooled


def attentive_stats_pool(x: Tensor, w: Tensor, b: Tensor, v: Tensor,
                         var_floor: float = 1e-12) -> Tensor:
    """Attention-weighted mean and std per channel of [C, T], concatenated to [2C].

    The variance is floored (default sqrt -> std floor 1e-6) so constant
    inputs stay differentiable.
    """
    if x.data.shape[1] < 1:
        raise ShapeError("attentive stats pooling needs at least one frame")
    summary, weights = additive_attention(x.T, w, b, v)   # weights over T
    col = weights.reshape(-1, 1)
    mean = (x @ col).reshape(x.data.shape[0])
    second = ((x * x) @ col).reshape(x.data.shape[0])
    std = (second - mean * mean).maximum(var_floor) ** 0.5
    return concat([mean, std], axis=0)


# -- model ------------------------------------------------------------------


class SERModel:
    """The full network; parameters in a flat dotted-name table."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.adapters: dict[str, LoraAdapter] = {}
        rng = np.random.default_rng(cfg.seed)
        self._build_encoder(rng)
        self._build_ecapa(rng)
        self._build_pooling(rng)
        self._build_heads(rng)
        # Separate stream so enabling/disabling LoRA cannot shift base init.
        self._build_lora(np.random.default_rng((cfg.seed, 0x10AD)))

    # -- construction --

    def _add(self, name: str, array: np.ndarray, trainable: bool) -> Tensor:
        tensor = Tensor(array, requires_grad=trainable)
        self.params[name] = tensor
        return tensor

    def _linear_init(self, rng, fan_out, fan_in):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_out, fan_in))

    def _build_encoder(self, rng):
        enc = self.cfg.encoder
        d, din = enc.model_dim, self.cfg.feature_dim
        self._add("encoder.in_proj.weight", self._linear_init(rng, d, din), False)
        self._add("encoder.in_proj.bias", np.zeros(d), False)
        for i in range(enc.num_layers):
            p = f"encoder.layer{i}"
            self._add(f"{p}.ln1.gamma", np.ones(d), False)
            self._add(f"{p}.ln1.beta", np.zeros(d), False)
            for proj in ("q", "k", "v"):
                self._add(f"{p}.attn.{proj}.weight", self._linear_init(rng, d, d), False)
                self._add(f"{p}.attn.{proj}.bias", np.zeros(d), False)
            self._add(f"{p}.attn.out.weight", self._linear_init(rng, d, d), False)
            self._add(f"{p}.attn.out.bias", np.zeros(d), False)
            self._add(f"{p}.ln2.gamma", np.ones(d), False)
            self._add(f"{p}.ln2.beta", np.zeros(d), False)
            self._add(f"{p}.ff.w1.weight", self._linear_init(rng, enc.ff_dim, d), False)
            self._add(f"{p}.ff.w1.bias", np.zeros(enc.ff_dim), False)
            self._add(f"{p}.ff.w2.weight", self._linear_init(rng, d, enc.ff_dim), False)
            self._add(f"{p}.ff.w2.bias", np.zeros(d), False)
        self._add("encoder.ln_out.gamma", np.ones(d), False)
        self._add("encoder.ln_out.beta", np.zeros(d), False)

    def _build_lora(self, rng):
        if not self.cfg.lora.enabled:
            return
        r = self.cfg.lora.rank
        d = self.cfg.encoder.model_dim
        for i in range(self.cfg.encoder.num_layers):
            for proj, target in (("q", "query"), ("k", "key"), ("v", "value")):
                prefix = f"encoder.layer{i}.attn.{proj}"
                a = self._add(f"{prefix}.lora.A", rng.normal(0.0, 0.02, size=(r, d)), True)
                b = self._add(f"{prefix}.lora.B", np.zeros((d, r)), True)
                self.adapters[prefix] = LoraAdapter(
                    rank=r, alpha=self.cfg.lora.alpha, A=a, B=b, target=target
                )

    def _conv_init(self, rng, c_out, c_in, k):
        return rng.normal(0.0, 1.0 / math.sqrt(c_in * k), size=(c_out, c_in, k))

    def _add_gn(self, prefix, channels):
        self._add(f"{prefix}.gamma", np.ones(channels), True)
        self._add(f"{prefix}.beta", np.zeros(channels), True)

    def _build_ecapa(self, rng):
        e = self.cfg.ecapa
        c, k = e.channels, e.kernel_size
        d = self.cfg.encoder.model_dim
        self._add("ecapa.input.conv.weight", self._conv_init(rng, c, d, k), True)
        self._add("ecapa.input.conv.bias", np.zeros(c), True)
        self._add_gn("ecapa.input.gn", c)
        width = c // e.res2_scale
        for i, _dil in enumerate(e.dilations):
            p = f"ecapa.block{i}"
            self._add(f"{p}.conv1.weight", self._conv_init(rng, c, c, 1), True)
            self._add(f"{p}.conv1.bias", np.zeros(c), True)
            self._add_gn(f"{p}.gn1", c)
            for j in range(1, e.res2_scale):
                self._add(f"{p}.res2.conv{j}.weight", self._conv_init(rng, width, width, k), True)
                self._add(f"{p}.res2.conv{j}.bias", np.zeros(width), True)
            self._add_gn(f"{p}.gn2", c)
            self._add(f"{p}.conv3.weight", self._conv_init(rng, c, c, 1), True)
            self._add(f"{p}.conv3.bias", np.zeros(c), True)
            self._add_gn(f"{p}.gn3", c)
            self._add(f"{p}.se.fc1.weight", self._linear_init(rng, e.se_bottleneck, c), True)
            self._add(f"{p}.se.fc1.bias", np.zeros(e.se_bottleneck), True)
            self._add(f"{p}.se.fc2.weight", self._linear_init(rng, c, e.se_bottleneck), True)
            self._add(f"{p}.se.fc2.bias", np.zeros(c), True)
        n_blocks = len(e.dilations)
        self._add("ecapa.mfa.conv.weight", self._conv_init(rng, c, n_blocks * c, 1), True)
        self._add("ecapa.mfa.conv.bias", np.zeros(c), True)
        self._add_gn("ecapa.mfa.gn", c)
        h = e.stats_attention_hidden
        self._add("ecapa.stats.attn.W", self._linear_init(rng, h, c), True)
        self._add("ecapa.stats.attn.b", np.zeros(h), True)
        self._add("ecapa.stats.attn.v", rng.normal(0.0, 1.0 / math.sqrt(h), size=h), True)

    def _build_pooling(self, rng):
        c = self.cfg.ecapa.channels
        h = self.cfg.pooling.attention_hidden
        for name in ("pool.scale_attn", "pool.hier_attn"):
            self._add(f"{name}.W", self._linear_init(rng, h, c), True)
            self._add(f"{name}.b", np.zeros(h), True)
            self._add(f"{name}.v", rng.normal(0.0, 1.0 / math.sqrt(h), size=h), True)

    def _build_heads(self, rng):
        c = self.cfg.ecapa.channels
        pooled_dim = 3 * c  # attentive stats (2C) + multiscale summary (C)
        self._add("head.cat.weight", self._linear_init(rng, NUM_CLASSES, pooled_dim), True)
        self._add("head.cat.bias", np.zeros(NUM_CLASSES), True)
        self._add("head.dim.weight", self._linear_init(rng, 3, pooled_dim), True)
        self._add("head.dim.bias", np.zeros(3), True)

    # -- parameter access --

    def named_parameters(self) -> dict:
        return dict(self.params)

    def trainable_parameters(self) -> dict:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def backbone_parameters(self) -> dict:
        return {n: t for n, t in self.trainable_parameters().items() if ".lora." in n}

    def downstream_parameters(self) -> dict:
        return {n: t for n, t in self.trainable_parameters().items() if ".lora." not in n}

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def state_arrays(self) -> dict:
        return {name: tensor.data.copy() for name, tensor in self.params.items()}

    def load_state(self, arrays: dict):
        for name, tensor in self.params.items():
            if name not in arrays:
                raise ShapeError(f"checkpoint missing tensor '{name}'")
            incoming = np.asarray(arrays[name], dtype=np.float64)
            if incoming.shape != tensor.data.shape:
                raise ShapeError(
                    f"tensor '{name}' shape mismatch: model {tensor.data.shape}, checkpoint {incoming.shape}"
                )
            tensor.data = incoming.copy()
        extra = set(arrays) - set(self.params)
        if extra:
            raise ShapeError(f"checkpoint has unknown tensors: {sorted(extra)[:4]}")

    # -- forward pieces --

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return x @ self.params[f"{prefix}.weight"].T + self.params[f"{prefix}.bias"]

    def _project(self, x: Tensor, prefix: str) -> Tensor:
        out = self._linear(x, prefix)
        adapter = self.adapters.get(prefix)
        if adapter is not None:
            out = out + adapter.delta(x)
        return out

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        return layer_norm(x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"])

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        enc = self.cfg.encoder
        dh = enc.model_dim // enc.num_heads
        q = self._project(x, f"{prefix}.q")
        k = self._project(x, f"{prefix}.k")
        v = self._project(x, f"{prefix}.v")
        heads = []
        inv_scale = 1.0 / math.sqrt(dh)
        for h in range(enc.num_heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = (q[:, sl] @ k[:, sl].T) * inv_scale
            heads.append(scores.softmax() @ v[:, sl])
        return self._linear(concat(heads, axis=1), f"{prefix}.out")

    def encoder_forward(self, features: Tensor) -> Tensor:
        """Frozen encoder with LoRA; gradient reaches only adapter parameters."""
        if features.data.ndim != 2:
            raise ShapeError(f"features must be [T, D], got shape {features.data.shape}")
        t, din = features.data.shape
        if t < 1:
            raise ShapeError("encoder input has no frames (T=0)")
        if din != self.cfg.feature_dim:
            raise ConfigError(
                f"feature dim {din} does not match configured {self.cfg.feature_dim}"
            )
        h = self._linear(features, "encoder.in_proj")
        for i in range(self.cfg.encoder.num_layers):
            p = f"encoder.layer{i}"
            h = h + self._attention(self._layer_norm(h, f"{p}.ln1"), f"{p}.attn")
            n = self._layer_norm(h, f"{p}.ln2")
            ff = self._linear(n, f"{p}.ff.w1").relu()
            h = h + self._linear(ff, f"{p}.ff.w2")
        return self._layer_norm(h, "encoder.ln_out")

    def _conv_gn_relu(self, x: Tensor, conv_prefix: str, gn_prefix: str, dilation: int = 1,
                      apply_relu: bool = True) -> Tensor:
        e = self.cfg.ecapa
        out = conv1d_dilated(x, self.params[f"{conv_prefix}.weight"],
                             self.params[f"{conv_prefix}.bias"], dilation=dilation)
        out = group_norm(out, e.gn_groups, self.params[f"{gn_prefix}.gamma"],
                         self.params[f"{gn_prefix}.beta"], eps=e.gn_eps)
        return out.relu() if apply_relu else out

    def ecapa_block_forward(self, x: Tensor, block_index: int) -> Tensor:
        """SE-Res2 block: 1x1 conv, Res2 dilated convs, 1x1 conv, SE gate, residual."""
        e = self.cfg.ecapa
        p = f"ecapa.block{block_index}"
        dilation = e.dilations[block_index]
        width = e.channels // e.res2_scale

        out = self._conv_gn_relu(x, f"{p}.conv1", f"{p}.gn1", dilation=1)
        # Res2 split: first chunk passes through, the rest get dilated convs.
        chunks = [out[0:width, :]]
        for j in range(1, e.res2_scale):
            piece = out[j * width:(j + 1) * width, :]
            chunks.append(conv1d_dilated(piece, self.params[f"{p}.res2.conv{j}.weight"],
                                         self.params[f"{p}.res2.conv{j}.bias"], dilation=dilation))
        out = concat(chunks, axis=0)
        out = group_norm(out, e.gn_groups, self.params[f"{p}.gn2.gamma"],
                         self.params[f"{p}.gn2.beta"], eps=e.gn_eps).relu()
        out = self._conv_gn_relu(out, f"{p}.conv3", f"{p}.gn3", dilation=1, apply_relu=False)
        # Squeeze-excitation channel gate from the time-averaged signal.
        squeeze = out.mean(axis=1).reshape(1, -1)
        gate = self._linear(squeeze, f"{p}.se.fc1").relu()
        gate = self._linear(gate, f"{p}.se.fc2").sigmoid()
        out = out * gate.reshape(-1, 1)
        return x + out

    def ecapa_forward(self, hidden: Tensor) -> Tensor:
        """Frame-level ECAPA stack on encoder output [T, d] -> [C, T]."""
        x = self._conv_gn_relu(hidden.T, "ecapa.input.conv", "ecapa.input.gn", dilation=1)
        block_outs = []
        for i in range(len(self.cfg.ecapa.dilations)):
            x = self.ecapa_block_forward(x, i)
            block_outs.append(x)
        return self._conv_gn_relu(concat(block_outs, axis=0), "ecapa.mfa.conv", "ecapa.mfa.gn")

    def _stats_attn_params(self):
        return (self.params["ecapa.stats.attn.W"], self.params["ecapa.stats.attn.b"],
                self.params["ecapa.stats.attn.v"])

    def _pool_params(self, prefix: str):
        return (self.params[f"{prefix}.W"], self.params[f"{prefix}.b"], self.params[f"{prefix}.v"])

    def pooled_representation(self, features: Tensor) -> Tensor:
        """[T, D] features -> fixed-size [3C] vector feeding both heads."""
        hidden = self.encoder_forward(features)
        frames = self.ecapa_forward(hidden)            # [C, T]
        stats = attentive_stats_pool(frames, *self._stats_attn_params())
        summary = multiscale_hierarchical_pool(frames.T, self.cfg.pooling,
                                               self._pool_params("pool.scale_attn"),
                                               self._pool_params("pool.hier_attn"))
        return concat([stats, summary], axis=0)

    def forward(self, features) -> ModelOutput:
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features, dtype=np.float64))
        pooled = self.pooled_representation(features).reshape(1, -1)
        logits = self._linear(pooled, "head.cat").reshape(NUM_CLASSES)
        probs = logits.softmax()
        dim_scores = self._linear(pooled, "head.dim").reshape(3).sigmoid()
        a, v, d = (float(x) for x in dim_scores.data)
        return ModelOutput(cat_logits=logits, cat_probs=probs, dim_tensor=dim_scores,
                           dims=DimScores(arousal=a, valence=v, dominance=d))

    def forward_batch(self, feature_list) -> tuple:
        """Stack per-utterance outputs into batch tensors (probs [B,7], dims [B,3])."""
        outputs = [self.forward(f) for f in feature_list]
        probs = stack_rows([o.cat_probs for o in outputs])
        dims = stack_rows([o.dim_tensor for o in outputs])
        return probs, dims, outputs

    # -- LoRA merge --

    def merge_adapters(self) -> "SERModel":
        """Adapter-free clone whose q/k/v weights absorb the LoRA updates."""
        merged_cfg = replace(copy.deepcopy(self.cfg), lora=LoraConfig(rank=0, alpha=self.cfg.lora.alpha))
        merged = SERModel(merged_cfg)
        state = {}
        for name, tensor in self.params.items():
            if ".lora." in name:
                continue
            state[name] = tensor.data.copy()
        for prefix, adapter in self.adapters.items():
            state[f"{prefix}.weight"] = lora_merge(self.params[f"{prefix}.weight"], adapter).data
        merged.load_state(state)
        return merged
