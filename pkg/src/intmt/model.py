"""Pre-norm encoder-decoder Transformer with switchable arithmetic.

One wiring serves three modes:

  * fp32       - plain float forward (baseline training),
  * fake_quant - every matmul operand passes through a quantizer that
                 rounds onto an integer grid but stays float, so
                 gradients flow (weights use range-preserving scales,
                 activations use learned thresholds),
  * int_infer  - the same sites dispatch to int32 kernels prepared
                 offline from the trained thresholds.

Quantized matmul sites come in two kinds.  A dense site multiplies an
activation by a weight matrix and owns one learned input threshold (the
weight scale is recomputed from the live tensor).  A matmul site
multiplies two activations (the attention products) and owns a learned
threshold per operand.  The softmax output is non-negative, so the
probabilities operand uses the unsigned grid.

The embedding matrix is one Parameter shared by both lookup sides and,
transposed, by the final logit projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DataError, MissingStatsError
from .int_infer import IntAttentionSite, IntDenseLayer, attention_forward_int, dense_forward_int
from .quant import QuantConfig, ThresholdScalar, fake_quant, fake_quant_range_preserving
from .seeding import substream

PAD_ID = 0
EOS_ID = 1  # also used as the decoder start symbol
FIRST_TOKEN_ID = 2

MODE_FP32 = "fp32"
MODE_FAKE = "fake_quant"
MODE_INT = "int_infer"
MODES = (MODE_FP32, MODE_FAKE, MODE_INT)

NEG_INF = np.float32(-1e9)


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 64
    max_len: int = 64
    dropout: float = 0.0
    quant: QuantConfig = field(default_factory=QuantConfig)

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigurationError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < FIRST_TOKEN_ID + 1:
            raise ConfigurationError(
                f"vocab_size must be >= {FIRST_TOKEN_ID + 1} (pad, eos, one real token)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


def base_dimension_config(bits: int = 8) -> TransformerConfig:
    """The full-size layout used for registry accounting checks."""
    return TransformerConfig(n_layers=6, d_model=512, n_heads=8, d_ff=2048,
                             vocab_size=32000, max_len=256,
                             quant=QuantConfig(bits=bits))


class ScalarRegistry:
    """Ordered collection of every learned threshold in one model."""

    def __init__(self):
        self._entries: list[tuple[str, ThresholdScalar, bool]] = []
        self._by_name: dict[str, int] = {}

    def new(self, site_name: str, unsigned: bool = False) -> ThresholdScalar:
        if site_name in self._by_name:
            raise ConfigurationError(f"duplicate threshold site {site_name!r}")
        th = ThresholdScalar(z=0.0, site_name=site_name)
        self._by_name[site_name] = len(self._entries)
        self._entries.append((site_name, th, unsigned))
        return th

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def get(self, site_name: str) -> ThresholdScalar:
        return self._entries[self._by_name[site_name]][1]

    def is_unsigned(self, site_name: str) -> bool:
        return self._entries[self._by_name[site_name]][2]

    def scalars(self) -> list[ThresholdScalar]:
        return [th for _, th, _ in self._entries]

    @staticmethod
    def expected_count(n_layers: int) -> int:
        # per layer: encoder 6 dense + 2*2 matmul operands, decoder
        # 10 dense + 2*4 matmul operands; plus the logit projection
        return n_layers * 28 + 1


def expected_site_counts(n_layers: int) -> dict:
    """Structural site counts implied by the layer count alone."""
    dense = 16 * n_layers + 1  # enc 6 + dec 10 per layer, plus logits
    matmul = 6 * n_layers      # two per attention block
    return {"dense": dense, "matmul": matmul,
            "thresholds": ScalarRegistry.expected_count(n_layers)}


class DenseSite:
    """y = x @ W (+ b) with a learned threshold on x."""

    def __init__(self, name: str, weight: T.Parameter, bias: T.Parameter | None,
                 registry: ScalarRegistry, transpose_weight: bool = False):
        self.name = name
        self.weight = weight
        self.bias = bias
        self.transpose_weight = transpose_weight
        self.threshold = registry.new(name)


class MatmulSite:
    """Product of two activations; each operand gets its own threshold."""

    def __init__(self, name: str, registry: ScalarRegistry,
                 operand_names: tuple[str, str], left_unsigned: bool = False):
        self.name = name
        self.left_threshold = registry.new(f"{name}.{operand_names[0]}", unsigned=left_unsigned)
        self.right_threshold = registry.new(f"{name}.{operand_names[1]}")
        self.left_unsigned = left_unsigned


class AttentionBlock:
    def __init__(self, name: str, params: "_ParamFactory", registry: ScalarRegistry):
        self.name = name
        d = params.cfg.d_model
        self.q = DenseSite(f"{name}.q", params.dense_weight(f"{name}.q.w", d, d),
                           params.bias(f"{name}.q.b", d), registry)
        self.k = DenseSite(f"{name}.k", params.dense_weight(f"{name}.k.w", d, d),
                           params.bias(f"{name}.k.b", d), registry)
        self.v = DenseSite(f"{name}.v", params.dense_weight(f"{name}.v.w", d, d),
                           params.bias(f"{name}.v.b", d), registry)
        self.qk = MatmulSite(f"{name}.qk", registry, ("q", "k"))
        self.uv = MatmulSite(f"{name}.uv", registry, ("u", "v"), left_unsigned=True)
        self.out = DenseSite(f"{name}.out", params.dense_weight(f"{name}.out.w", d, d),
                             params.bias(f"{name}.out.b", d), registry)


class LayerNormParams:
    def __init__(self, name: str, d: int, params: "_ParamFactory"):
        self.gain = params.register(T.Parameter(np.ones(d, dtype=np.float32), f"{name}.g"))
        self.bias = params.register(T.Parameter(np.zeros(d, dtype=np.float32), f"{name}.b"))


class EncoderLayer:
    def __init__(self, name: str, params: "_ParamFactory", registry: ScalarRegistry):
        cfg = params.cfg
        self.ln1 = LayerNormParams(f"{name}.ln1", cfg.d_model, params)
        self.attn = AttentionBlock(f"{name}.attn", params, registry)
        self.ln2 = LayerNormParams(f"{name}.ln2", cfg.d_model, params)
        self.ff1 = DenseSite(f"{name}.ff1",
                             params.dense_weight(f"{name}.ff1.w", cfg.d_model, cfg.d_ff),
                             params.bias(f"{name}.ff1.b", cfg.d_ff), registry)
        self.ff2 = DenseSite(f"{name}.ff2",
                             params.dense_weight(f"{name}.ff2.w", cfg.d_ff, cfg.d_model),
                             params.bias(f"{name}.ff2.b", cfg.d_model), registry)


class DecoderLayer:
    def __init__(self, name: str, params: "_ParamFactory", registry: ScalarRegistry):
        cfg = params.cfg
        self.ln1 = LayerNormParams(f"{name}.ln1", cfg.d_model, params)
        self.self_attn = AttentionBlock(f"{name}.self", params, registry)
        self.ln2 = LayerNormParams(f"{name}.ln2", cfg.d_model, params)
        self.cross_attn = AttentionBlock(f"{name}.cross", params, registry)
        self.ln3 = LayerNormParams(f"{name}.ln3", cfg.d_model, params)
        self.ff1 = DenseSite(f"{name}.ff1",
                             params.dense_weight(f"{name}.ff1.w", cfg.d_model, cfg.d_ff),
                             params.bias(f"{name}.ff1.b", cfg.d_ff), registry)
        self.ff2 = DenseSite(f"{name}.ff2",
                             params.dense_weight(f"{name}.ff2.w", cfg.d_ff, cfg.d_model),
                             params.bias(f"{name}.ff2.b", cfg.d_model), registry)


class _ParamFactory:
    """Creates, names, and tracks every Parameter in construction order."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.params: list[T.Parameter] = []

    def register(self, p: T.Parameter) -> T.Parameter:
        self.params.append(p)
        return p

    def dense_weight(self, name: str, d_in: int, d_out: int) -> T.Parameter:
        std = math.sqrt(2.0 / (d_in + d_out))
        w = self.rng.normal(0.0, std, size=(d_in, d_out)).astype(np.float32)
        return self.register(T.Parameter(w, name))

    def bias(self, name: str, d: int) -> T.Parameter:
        return self.register(T.Parameter(np.zeros(d, dtype=np.float32), name))


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    dim = np.arange(d_model // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * dim / d_model)
    out = np.zeros((max_len, d_model), dtype=np.float32)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


class Transformer:
    def __init__(self, cfg: TransformerConfig, seed: int = 0):
        self.cfg = cfg
        rng = substream(seed, "init")
        factory = _ParamFactory(cfg, rng)
        self.registry = ScalarRegistry()

        emb = rng.normal(0.0, cfg.d_model ** -0.5,
                         size=(cfg.vocab_size, cfg.d_model)).astype(np.float32)
        self.embedding = factory.register(T.Parameter(emb, "embedding"))
        self.positions = sinusoidal_positions(cfg.max_len, cfg.d_model)

        self.enc_layers = [EncoderLayer(f"enc{i}", factory, self.registry)
                           for i in range(cfg.n_layers)]
        self.enc_ln = LayerNormParams("enc_final_ln", cfg.d_model, factory)
        self.dec_layers = [DecoderLayer(f"dec{i}", factory, self.registry)
                           for i in range(cfg.n_layers)]
        self.dec_ln = LayerNormParams("dec_final_ln", cfg.d_model, factory)
        # logit projection reuses the embedding matrix, transposed at use
        self.final = DenseSite("final", self.embedding, None, self.registry,
                               transpose_weight=True)

        self._params = factory.params
        self.mode = MODE_FP32
        self.quantize_weights = False
        self.quantize_acts = False
        self.calibration = None  # CalibrationStats during the measurement phase
        self.training = False
        self.dropout_rng = substream(seed, "dropout")
        self.int_dense: dict[str, IntDenseLayer] = {}
        self.int_attn: dict[str, IntAttentionSite] = {}
        # integer weights restored from a checkpoint, keyed by parameter
        # name; prepare_int_inference uses them verbatim when present
        self.loaded_int_weights: dict = {}

    # -- bookkeeping ------------------------------------------------------

    def parameters(self) -> list[T.Parameter]:
        return list(self._params)

    def named_parameters(self) -> list[tuple[str, T.Parameter]]:
        return [(p.name, p) for p in self._params]

    def zero_grad(self) -> None:
        for p in self._params:
            p.zero_grad()
        for th in self.registry.scalars():
            th.zero_grad()

    def dense_sites(self) -> list[DenseSite]:
        sites = []
        for layer in self.enc_layers:
            a = layer.attn
            sites += [a.q, a.k, a.v, a.out, layer.ff1, layer.ff2]
        for layer in self.dec_layers:
            for a in (layer.self_attn, layer.cross_attn):
                sites += [a.q, a.k, a.v, a.out]
            sites += [layer.ff1, layer.ff2]
        sites.append(self.final)
        return sites

    def attention_blocks(self) -> list[AttentionBlock]:
        blocks = [layer.attn for layer in self.enc_layers]
        for layer in self.dec_layers:
            blocks += [layer.self_attn, layer.cross_attn]
        return blocks

    def matmul_sites(self) -> list[MatmulSite]:
        out = []
        for b in self.attention_blocks():
            out += [b.qk, b.uv]
        return out

    def count_quantized_matmuls(self) -> dict[str, int]:
        dense = len(self.dense_sites())
        matmul = len(self.matmul_sites())
        return {"dense": dense, "matmul": matmul, "total": dense + matmul,
                "scalars": len(self.registry)}

    def set_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}, expected one of {MODES}")
        if mode == MODE_INT and not self.int_dense:
            raise ConfigurationError(
                "integer tables not prepared; run prepare_int_inference first")
        self.mode = mode
        if mode == MODE_FAKE:
            self.quantize_weights = True
            self.quantize_acts = True
        elif mode == MODE_INT:
            # the embedding gather reads the same grid the int tables use
            self.quantize_weights = True
        else:
            self.quantize_weights = False
            self.quantize_acts = False

    # -- quantization plumbing --------------------------------------------

    def _signed_cfg(self) -> QuantConfig:
        return self.cfg.quant.as_signed()

    def _observe(self, threshold: ThresholdScalar, x: T.Tensor) -> None:
        if self.calibration is None:
            return
        name = threshold.site_name
        if self.registry.is_unsigned(name):
            value = float(x.data.max()) if x.data.size else 0.0
        else:
            value = float(np.abs(x.data).max()) if x.data.size else 0.0
        self.calibration.observe(name, value)

    def _quantize_act(self, x: T.Tensor, threshold: ThresholdScalar,
                      unsigned: bool = False) -> T.Tensor:
        if self.quantize_acts:
            cfg = self.cfg.quant.as_unsigned() if unsigned else self._signed_cfg()
            return fake_quant(x, threshold, cfg)
        self._observe(threshold, x)
        return x

    def _weight_node(self, p: T.Parameter) -> T.Tensor:
        if self.quantize_weights:
            return fake_quant_range_preserving(p, self._signed_cfg())
        return p

    def _dense(self, site: DenseSite, x: T.Tensor) -> T.Tensor:
        if self.mode == MODE_INT:
            return T.Tensor(dense_forward_int(x.data, self.int_dense[site.name],
                                              self._signed_cfg()))
        xq = self._quantize_act(x, site.threshold)
        w = self._weight_node(site.weight)
        if site.transpose_weight:
            w = T.transpose(w, (1, 0))
        y = T.matmul(xq, w)
        if site.bias is not None:
            y = T.add(y, self._weight_node(site.bias))
        return y

    # -- forward ----------------------------------------------------------

    def _check_ids(self, ids: np.ndarray, what: str) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise DataError(f"{what} ids must be [batch, length], got shape {ids.shape}")
        if ids.shape[1] > self.cfg.max_len:
            raise DataError(
                f"{what} length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise DataError(f"{what} ids outside [0, {self.cfg.vocab_size})")
        return ids

    def _dropout(self, x: T.Tensor) -> T.Tensor:
        if self.training and self.cfg.dropout > 0.0 and self.mode == MODE_FP32:
            return T.dropout(x, self.cfg.dropout, self.dropout_rng)
        return x

    def _embed(self, ids: np.ndarray) -> T.Tensor:
        table = self._weight_node(self.embedding)
        x = T.scale(T.embedding(table, ids), math.sqrt(self.cfg.d_model))
        pos = T.Tensor(self.positions[:ids.shape[1]])
        return self._dropout(T.add(x, pos))

    def _split_heads(self, x: T.Tensor) -> T.Tensor:
        B, L, _ = x.shape
        return T.transpose(T.reshape(x, (B, L, self.cfg.n_heads, self.cfg.d_k)),
                           (0, 2, 1, 3))

    def _merge_heads(self, x: T.Tensor) -> T.Tensor:
        B, H, L, dk = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, H * dk))

    def _attention(self, block: AttentionBlock, x_q: T.Tensor, x_kv: T.Tensor,
                   mask: np.ndarray | None) -> T.Tensor:
        q = self._split_heads(self._dense(block.q, x_q))
        k = self._split_heads(self._dense(block.k, x_kv))
        v = self._split_heads(self._dense(block.v, x_kv))

        if self.mode == MODE_INT:
            ctx = T.Tensor(attention_forward_int(q.data, k.data, v.data,
                                                 self.int_attn[block.name],
                                                 self._signed_cfg(), mask=mask))
        else:
            if self.quantize_acts:
                q = fake_quant(q, block.qk.left_threshold, self._signed_cfg())
                k = fake_quant(k, block.qk.right_threshold, self._signed_cfg())
            else:
                self._observe(block.qk.left_threshold, q)
                self._observe(block.qk.right_threshold, k)
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                             1.0 / math.sqrt(self.cfg.d_k))
            if mask is not None:
                scores = T.add(scores, T.Tensor(mask))
            u = T.softmax(scores, axis=-1)
            if self.quantize_acts:
                u = fake_quant(u, block.uv.left_threshold, self.cfg.quant.as_unsigned())
                v = fake_quant(v, block.uv.right_threshold, self._signed_cfg())
            else:
                self._observe(block.uv.left_threshold, u)
                self._observe(block.uv.right_threshold, v)
            ctx = T.matmul(u, v)

        return self._dense(block.out, self._merge_heads(ctx))

    def _ln(self, ln: LayerNormParams, x: T.Tensor) -> T.Tensor:
        return T.layer_norm(x, ln.gain, ln.bias)

    def _ffn(self, layer, x: T.Tensor) -> T.Tensor:
        return self._dense(layer.ff2, T.relu(self._dense(layer.ff1, x)))

    def encode(self, src_ids: np.ndarray) -> tuple[T.Tensor, np.ndarray]:
        src_ids = self._check_ids(src_ids, "source")
        pad_mask = np.where(src_ids == PAD_ID, NEG_INF, np.float32(0.0)
                            )[:, None, None, :].astype(np.float32)
        x = self._embed(src_ids)
        for layer in self.enc_layers:
            h = self._ln(layer.ln1, x)
            x = T.add(x, self._dropout(self._attention(layer.attn, h, h, pad_mask)))
            x = T.add(x, self._dropout(self._ffn(layer, self._ln(layer.ln2, x))))
        return self._ln(self.enc_ln, x), pad_mask

    def decode(self, memory: T.Tensor, src_mask: np.ndarray,
               tgt_ids: np.ndarray) -> T.Tensor:
        tgt_ids = self._check_ids(tgt_ids, "target")
        L = tgt_ids.shape[1]
        causal = np.triu(np.full((L, L), NEG_INF, dtype=np.float32), k=1)[None, None]
        x = self._embed(tgt_ids)
        for layer in self.dec_layers:
            h = self._ln(layer.ln1, x)
            x = T.add(x, self._dropout(
                self._attention(layer.self_attn, h, h, causal)))
            x = T.add(x, self._dropout(
                self._attention(layer.cross_attn, self._ln(layer.ln2, x),
                                memory, src_mask)))
            x = T.add(x, self._dropout(self._ffn(layer, self._ln(layer.ln3, x))))
        return self._dense(self.final, self._ln(self.dec_ln, x))

    def forward(self, src_ids: np.ndarray, tgt_ids: np.ndarray) -> T.Tensor:
        """Teacher-forced logits [batch, tgt_len, vocab]."""
        memory, src_mask = self.encode(src_ids)
        return self.decode(memory, src_mask, tgt_ids)

    def step_logprobs(self, memory: T.Tensor, src_mask: np.ndarray,
                      prefix_ids: np.ndarray) -> np.ndarray:
        """Log-probabilities of the next token after each prefix, [batch, vocab]."""
        with T.no_grad():
            logits = self.decode(memory, src_mask, prefix_ids).data[:, -1, :]
        shifted = logits - logits.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    # -- integer preparation ------------------------------------------------

    def prepare_int_inference(self) -> None:
        """Freeze trained thresholds and weights into int32 tables."""
        cfg = self._signed_cfg()
        self.int_dense = {}
        self.int_attn = {}
        for site in self.dense_sites():
            bias = None if site.bias is None else site.bias.data
            s_x = site.threshold.forward_scale(cfg)
            stored = self.loaded_int_weights.get(site.weight.name)
            if stored is not None:
                w_int = stored.transposed() if site.transpose_weight else stored
                self.int_dense[site.name] = IntDenseLayer(
                    weight=w_int, input_scale=s_x,
                    combined_scale=s_x * w_int.scale, bias=bias,
                    input_bits=cfg.bits)
            else:
                w = site.weight.data.T if site.transpose_weight else site.weight.data
                self.int_dense[site.name] = IntDenseLayer.from_weights(w, bias, s_x, cfg)
        unsigned = self.cfg.quant.as_unsigned()
        for block in self.attention_blocks():
            self.int_attn[block.name] = IntAttentionSite(
                s_q=block.qk.left_threshold.forward_scale(cfg),
                s_k=block.qk.right_threshold.forward_scale(cfg),
                s_u=block.uv.left_threshold.forward_scale(unsigned),
                s_v=block.uv.right_threshold.forward_scale(cfg),
                d_k=self.cfg.d_k)
        self.mode = MODE_INT
        self.quantize_weights = True


def init_thresholds_from_stats(model: Transformer, stats) -> None:
    """Seed every threshold from calibrated ranges: z = log2(range / limit)."""
    cfg = model.cfg.quant
    for name, th, unsigned in model.registry:
        m = stats.get(name)
        if m is None:
            raise MissingStatsError(f"no calibrated range for site {name!r}")
        limit = cfg.unsigned_limit if unsigned else cfg.positive_limit
        m = max(float(m), 2.0 ** -24)
        th.z = math.log2(m / limit)
