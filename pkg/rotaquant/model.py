"""A desk-scale transformer with quantizer insertion points.

The model is a stack of pre-norm decoder layers (attention, then a gated
MLP) on a residual stream, followed by a final norm and an ``lm_head``.
Weights are stored in fp32 with the norm gains already folded in; the
rotations R1 (residual stream) and R2 (per-head value space) are fused into
the weights at every forward pass, so they can be optimized on the tape.

Every quantizer lives in a :class:`QuantSite`, identified as
``layers.{i}.{linear}.{role}`` (or ``lm_head.{role}``).
"""

import logging
from collections.abc import Callable, Iterator, Mapping
from contextlib import contextmanager
from typing import Any, Literal, Optional

import numpy as np
from attrs import asdict, define, evolve, field, validators

from rotaquant.core import autodiff as ad
from rotaquant.logging import log_error
from rotaquant.quantizer import (
    SUPPORTED_BITS,
    QuantParams,
    QuantSpec,
    fake_quantize_on_tape,
)
from rotaquant.rotation import LearnableRotation

logger = logging.getLogger(__name__)

ROLES = (
    "linear_input_act",
    "linear_weight",
    "linear_output_act",
    "key",
    "value",
    "silu_output",
)

DEFAULT_BITS = {
    "linear_input_act": 8,
    "linear_weight": 4,
    "linear_output_act": 8,
    "key": 8,
    "value": 8,
    "silu_output": 16,
}

STAGES = ("one", "two")
"""Stages that can be switched on in a forward pass."""

LINEARS = (
    "q_proj",
    "k_proj",
    "v_proj",
    "o_proj",
    "up_proj",
    "gate_proj",
    "down_proj",
)

# linears that read from the residual stream, i.e. carry R1 on their input
_R1_INPUT = ("q_proj", "k_proj", "v_proj", "up_proj", "gate_proj")
# linears that write to the residual stream
_R1_OUTPUT = ("o_proj", "down_proj")


def _is_power_of_two(value: int) -> bool:
    return value >= 1 and not value & (value - 1)


def _positive(instance, attribute, value):
    if value < 1:
        raise log_error(
            ValueError, f"Expected `{attribute.name}` >= 1, but got {value}."
        )


def _power_of_two(instance, attribute, value):
    if not _is_power_of_two(value):
        raise log_error(
            ValueError,
            f"Expected `{attribute.name}` to be a power of two, "
            f"but got {value}.",
        )


def _unit_interval(instance, attribute, value):
    if not 0.0 <= value < 1.0:
        raise log_error(
            ValueError,
            f"Expected `{attribute.name}` in [0, 1), but got {value}.",
        )


def _merge_bits(value: Optional[Mapping[str, int]]) -> dict[str, int]:
    bits = dict(DEFAULT_BITS)
    bits.update(value or {})
    return bits


@define(frozen=True, kw_only=True)
class ToyTransformerConfig:
    """Shape of the toy model and the bit-width of each tensor role.

    Attributes
    ----------
    hidden_dim : int
        Width of the residual stream, a power of two. Default 64.
    num_heads : int
        Attention heads; ``hidden_dim / num_heads`` must be a power of two.
        Default 4.
    mlp_dim : int
        Width of the gated MLP. Default 256.
    num_layers : int
        Number of decoder layers. Default 2.
    vocab_size : int
        Number of token ids. Default 256.
    seq_len : int
        Maximum sequence length. Default 32.
    outlier_layer : int or None
        Layer whose ``up_proj`` gets one scaled-up output row, which puts
        a heavy-tailed channel into that layer's ``down_proj`` input.
        None disables the injection. Default 0.
    outlier_scale : float
        Factor applied to that row. Default 30.
    outlier_channel : int
        Index of that row. Default 0.
    weight_outlier_rate : float
        Fraction of the attention projection weights (q, k, v and o) that
        are multiplied by ``weight_outlier_scale``. The projections are
        then rescaled to their original variance. Default 1/64.
    weight_outlier_scale : float
        Factor applied to those weights. Default 8.
    bits : dict
        Bit-width per tensor role. Missing roles take the defaults
        (W4A8, 8-bit outputs and KV, 16-bit SiLU).

    """

    hidden_dim: int = field(default=64, validator=_power_of_two)
    num_heads: int = field(default=4, validator=_positive)
    mlp_dim: int = field(default=256, validator=_positive)
    num_layers: int = field(default=2, validator=_positive)
    vocab_size: int = field(default=256, validator=_positive)
    seq_len: int = field(default=32, validator=_positive)
    outlier_layer: Optional[int] = field(default=0)
    outlier_scale: float = field(default=30.0, converter=float)
    outlier_channel: int = field(default=0)
    weight_outlier_rate: float = field(
        default=1 / 64, converter=float, validator=_unit_interval
    )
    weight_outlier_scale: float = field(
        default=8.0, converter=float, validator=validators.ge(1.0)
    )
    bits: dict[str, int] = field(factory=dict, converter=_merge_bits)

    def __attrs_post_init__(self):
        """Check the constraints that involve more than one field."""
        if self.hidden_dim % self.num_heads:
            raise log_error(
                ValueError,
                f"hidden_dim ({self.hidden_dim}) is not divisible by "
                f"num_heads ({self.num_heads}).",
            )
        if not _is_power_of_two(self.head_dim):
            raise log_error(
                ValueError,
                f"Head dimension {self.head_dim} is not a power of two.",
            )
        if self.outlier_layer is not None and not (
            0 <= self.outlier_layer < self.num_layers
        ):
            raise log_error(
                ValueError,
                f"outlier_layer {self.outlier_layer} is outside "
                f"[0, {self.num_layers}).",
            )
        if not 0 <= self.outlier_channel < self.mlp_dim:
            raise log_error(
                ValueError,
                f"outlier_channel {self.outlier_channel} is outside "
                f"[0, {self.mlp_dim}).",
            )
        for role, bits in self.bits.items():
            if role not in ROLES:
                raise log_error(ValueError, f"Unknown tensor role '{role}'.")
            if bits not in SUPPORTED_BITS:
                raise log_error(
                    ValueError,
                    f"Expected bits in {SUPPORTED_BITS} for role '{role}', "
                    f"but got {bits}.",
                )

    @property
    def head_dim(self) -> int:
        """Width of one attention head."""
        return self.hidden_dim // self.num_heads

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ToyTransformerConfig":
        """Build a config from a mapping, rejecting unknown keys."""
        if not isinstance(data, Mapping):
            raise log_error(
                ValueError,
                f"Expected the model config to be a mapping, "
                f"but got {type(data).__name__}.",
            )
        known = {a.name for a in cls.__attrs_attrs__}  # type: ignore
        for key in data:
            if key not in known:
                raise log_error(
                    ValueError, f"Unknown model config key '{key}'."
                )
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        """Return the config as a plain dictionary."""
        return asdict(self)

    def with_bits(
        self,
        weight_bits: Optional[int] = None,
        act_bits: Optional[int] = None,
    ) -> "ToyTransformerConfig":
        """Override the weight and input-activation bit-widths."""
        bits = dict(self.bits)
        if weight_bits is not None:
            bits["linear_weight"] = weight_bits
        if act_bits is not None:
            bits["linear_input_act"] = act_bits
        return evolve(self, bits=bits)


def _check_stage(instance, attribute, value):
    if value == "one" and instance.role not in (
        "linear_input_act",
        "linear_weight",
    ):
        raise log_error(
            ValueError,
            f"Site {instance.site_id}: only input activations and weights "
            "can be optimized in stage one.",
        )


@define
class QuantSite:
    """One quantizer insertion point of the model.

    Attributes
    ----------
    site_id : str
        Unique id, ``layers.{i}.{linear}.{role}`` or ``lm_head.{role}``.
    layer : int or None
        Layer index; None for ``lm_head``.
    linear : str
        Name of the linear layer the site belongs to.
    role : str
        Tensor role, one of :data:`ROLES`.
    spec : QuantSpec
        Quantizer configuration.
    stage : {"one", "two", "excluded"}
        Which pipeline stage sets the parameters. Excluded sites stay in
        floating point.
    params : QuantParams, optional
        Current parameters; None until initialized.
    init_method : str, optional
        Method that produced the initial parameters.
    enabled : bool
        Whether the site quantizes when its stage is active. Default True.

    """

    site_id: str
    layer: Optional[int]
    linear: str
    role: str = field(validator=validators.in_(ROLES))
    spec: QuantSpec
    stage: Literal["one", "two", "excluded"] = field(
        validator=[
            validators.in_(["one", "two", "excluded"]),
            _check_stage,
        ]
    )
    params: Optional[QuantParams] = None
    init_method: Optional[str] = None
    enabled: bool = True

    @property
    def is_weight(self) -> bool:
        """Whether the site quantizes a weight."""
        return self.role == "linear_weight"


@define
class ForwardPass:
    """Outputs of one forward pass.

    Attributes
    ----------
    logits : Variable
        Logits of shape (batch, seq, vocab).
    site_inputs : dict
        For every activation site that quantized: its input, scale and
        zero-point variables, keyed by site id.

    """

    logits: ad.Variable
    site_inputs: dict[str, tuple] = field(factory=dict)


Observer = Callable[[str, np.ndarray], None]


class _Context:
    """State shared by the operations of one forward pass."""

    def __init__(self, model, tape, stages, observer, bindings):
        self.model = model
        self.tape = tape
        self.stages = set(stages)
        self.observer = observer
        self.bindings = bindings or {}
        self.site_inputs: dict[str, tuple] = {}
        self._rotations: dict[str, ad.Variable] = {}

    def constant(self, value) -> ad.Variable:
        return self.tape.constant(value)

    def rotation(self, name: str) -> ad.Variable:
        if name in self.bindings:
            return self.bindings[name]
        if name not in self._rotations:
            matrix = self.model.rotations[name].matrix
            self._rotations[name] = self.constant(matrix)
        return self._rotations[name]

    def params(self, site: QuantSite):
        if site.site_id in self.bindings:
            return self.bindings[site.site_id]
        zero_point = None
        if not site.spec.symmetric:
            zero_point = self.constant(
                site.params.zero_point.astype(np.float32)
            )
        return self.constant(site.params.scale), zero_point

    def quantize(self, site_id: str, x: ad.Variable) -> ad.Variable:
        site = self.model.sites[site_id]
        if self.observer is not None:
            self.observer(site_id, x.value)
        if not self.model.is_active(site, self.stages):
            return x
        scale, zero_point = self.params(site)
        if not site.is_weight:
            self.site_inputs[site_id] = (x, scale, zero_point)
        return fake_quantize_on_tape(x, scale, zero_point, site.spec)


class ToyTransformer:
    """The quantizable toy model.

    Parameters
    ----------
    config : ToyTransformerConfig
        Model shape and per-role bits.
    seed : int
        Seed the weights and rotations were drawn from.
    weights : dict
        fp32 weights (norm gains folded in), keyed by "embed",
        "layers.{i}.{linear}" and "lm_head". Linear weights have shape
        (out_features, in_features).
    rotations : dict
        Learnable rotations keyed by "R1" and "layers.{i}.R2"; empty for an
        unrotated model.
    sites : dict
        Quantization sites keyed by site id.

    """

    def __init__(
        self,
        config: ToyTransformerConfig,
        seed: int,
        weights: dict[str, np.ndarray],
        rotations: dict[str, LearnableRotation],
        sites: dict[str, QuantSite],
    ):
        self.config = config
        self.seed = seed
        self.weights = weights
        self.rotations = rotations
        self.sites = sites
        self.quantization_enabled = True

    def __repr__(self) -> str:
        return (
            f"ToyTransformer(layers={self.config.num_layers}, "
            f"hidden={self.config.hidden_dim}, rotated={self.rotated}, "
            f"sites={len(self.sites)})"
        )

    @property
    def rotated(self) -> bool:
        """Whether R1/R2 rotations are fused into the weights."""
        return bool(self.rotations)

    def is_active(self, site: QuantSite, stages=STAGES) -> bool:
        """Whether a site quantizes in a pass with the given stages."""
        return (
            self.quantization_enabled
            and site.enabled
            and site.params is not None
            and site.stage in stages
        )

    def sites_in_stage(self, stage: str) -> list[QuantSite]:
        """Sites handled by a stage, in model order."""
        return [s for s in self.sites.values() if s.stage == stage]

    @contextmanager
    def quantization_disabled(self) -> Iterator["ToyTransformer"]:
        """Run the plain fp32 model inside the block."""
        previous = self.quantization_enabled
        self.quantization_enabled = False
        try:
            yield self
        finally:
            self.quantization_enabled = previous

    def _weight(self, ctx: _Context, name: str, layer=None) -> ad.Variable:
        """Fuse the rotations into a weight and fake-quantize it."""
        w = ctx.constant(self.weights[name])
        linear = name.rsplit(".", 1)[-1]
        if self.rotated:
            r1 = ctx.rotation("R1")
            if linear in _R1_INPUT or linear == "lm_head":
                w = ad.matmul(w, r1)
            elif linear in _R1_OUTPUT:
                w = ad.matmul(ad.transpose(r1, (1, 0)), w)
            if linear in ("v_proj", "o_proj"):
                r2 = ad.block_diagonal(
                    ctx.rotation(f"layers.{layer}.R2"), self.config.num_heads
                )
                if linear == "v_proj":
                    w = ad.matmul(ad.transpose(r2, (1, 0)), w)
                else:
                    w = ad.matmul(w, r2)
        return ctx.quantize(f"{name}.linear_weight", w)

    def _linear(self, ctx, x, name, layer, output_role=None):
        x = ctx.quantize(f"{name}.linear_input_act", x)
        return self._project(ctx, x, name, layer, output_role)

    def _project(self, ctx, x, name, layer, output_role):
        y = ad.linear(x, self._weight(ctx, name, layer))
        if output_role is not None:
            y = ctx.quantize(f"{name}.{output_role}", y)
        return y

    def _attention(self, ctx, x, i):
        cfg = self.config
        batch, seq, _ = x.shape
        prefix = f"layers.{i}"
        h = ctx.quantize(
            f"{prefix}.q_proj.linear_input_act", ad.rms_norm(x)
        )
        q = self._project(ctx, h, f"{prefix}.q_proj", i, "linear_output_act")
        k = self._project(ctx, h, f"{prefix}.k_proj", i, "key")
        v = self._project(ctx, h, f"{prefix}.v_proj", i, "value")

        def heads(t):
            t = ad.reshape(t, (batch, seq, cfg.num_heads, cfg.head_dim))
            return ad.transpose(t, (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        scores = ad.scale(
            ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
            1.0 / np.sqrt(cfg.head_dim),
        )
        mask = np.triu(np.full((seq, seq), -1e9), k=1)
        probs = ad.softmax(ad.add(scores, mask.astype(scores.value.dtype)))
        out = ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3))
        out = ad.reshape(out, (batch, seq, cfg.hidden_dim))
        return self._linear(
            ctx, out, f"{prefix}.o_proj", i, "linear_output_act"
        )

    def _mlp(self, ctx, x, i):
        prefix = f"layers.{i}"
        h = ctx.quantize(
            f"{prefix}.up_proj.linear_input_act", ad.rms_norm(x)
        )
        up = self._project(
            ctx, h, f"{prefix}.up_proj", i, "linear_output_act"
        )
        # gate outputs stay in floating point, only SiLU of them is quantized
        gate = self._project(ctx, h, f"{prefix}.gate_proj", i, None)
        gate = ctx.quantize(
            f"{prefix}.gate_proj.silu_output", ad.silu(gate)
        )
        return self._linear(
            ctx,
            ad.mul(up, gate),
            f"{prefix}.down_proj",
            i,
            "linear_output_act",
        )

    def forward(
        self,
        tokens: np.ndarray,
        *,
        stages=STAGES,
        observer: Optional[Observer] = None,
        tape: Optional[ad.Tape] = None,
        bindings: Optional[dict[str, Any]] = None,
    ) -> ForwardPass:
        """Run the model on a batch of token ids.

        Parameters
        ----------
        tokens : numpy.ndarray
            Integer token ids of shape (batch, seq).
        stages : iterable of str, optional
            Stages whose sites quantize. Defaults to both stages.
        observer : callable, optional
            Called as ``observer(site_id, value)`` with the unquantized
            value at every site, weights included.
        tape : Tape, optional
            Tape to record on. A fresh one is used if not given.
        bindings : dict, optional
            Tape variables to use instead of the stored state: rotation
            matrices keyed by rotation name, ``(scale, zero_point)`` pairs
            keyed by site id.

        Returns
        -------
        ForwardPass
            The logits and the quantized activation inputs.

        """
        tokens = self._check_tokens(tokens)
        ctx = _Context(self, tape or ad.Tape(), stages, observer, bindings)
        embed = ctx.constant(self.weights["embed"])
        if self.rotated:
            embed = ad.matmul(embed, ctx.rotation("R1"))
        x = ad.embedding(embed, tokens)
        for i in range(self.config.num_layers):
            x = ad.add(x, self._attention(ctx, x, i))
            x = ad.add(x, self._mlp(ctx, x, i))
        logits = self._linear(
            ctx, ad.rms_norm(x), "lm_head", None, "linear_output_act"
        )
        return ForwardPass(logits, ctx.site_inputs)

    def logits(self, tokens: np.ndarray, stages=STAGES) -> np.ndarray:
        """Return the logits of a batch as a numpy array."""
        return self.forward(tokens, stages=stages).logits.value

    def teacher_logits(self, tokens: np.ndarray) -> np.ndarray:
        """Return the fp32 logits with every quantizer disabled."""
        with self.quantization_disabled():
            return self.logits(tokens)

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
            raise log_error(
                ValueError,
                "Expected integer token ids of shape (batch, seq), "
                f"but got {tokens.dtype} array of shape {tokens.shape}.",
            )
        if tokens.shape[1] > self.config.seq_len:
            raise log_error(
                ValueError,
                f"Sequence length {tokens.shape[1]} exceeds seq_len "
                f"{self.config.seq_len}.",
            )
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise log_error(
                ValueError,
                f"Token ids must lie in [0, {self.config.vocab_size}).",
            )
        return tokens

    def weight_values(self) -> dict[str, np.ndarray]:
        """Return the rotation-fused weight of every weight site."""
        values = {}

        def record(site_id, value):
            if self.sites[site_id].is_weight:
                values[site_id] = value

        with self.quantization_disabled():
            self.forward(
                np.zeros((1, 1), dtype=np.int32), observer=record
            )
        return values


def fold_norm_gains(
    weight: np.ndarray, gain: np.ndarray
) -> np.ndarray:
    """Fold an RMSNorm gain into the linear that reads the norm's output.

    ``rms_norm(x) * gain @ W.T == rms_norm(x) @ (W * gain).T``, so after
    folding the norm carries no gain and commutes with R1.
    """
    return (weight * gain[None, :]).astype(np.float32)


def _site(site_id, layer, linear, role, bits, stage, **spec_kwargs):
    return QuantSite(
        site_id,
        layer,
        linear,
        role,
        QuantSpec(bits, **spec_kwargs),
        stage,
    )


def build_sites(
    config: ToyTransformerConfig, rotated: bool = True
) -> dict[str, QuantSite]:
    """Lay out every quantization site of the model, in forward order."""
    bits = config.bits
    cls = "rotated" if rotated else "unrotated"
    sites: list[QuantSite] = []
    for i in range(config.num_layers):
        p = f"layers.{i}"

        def weight(linear, i=i, p=p):
            return _site(
                f"{p}.{linear}.linear_weight",
                i,
                linear,
                "linear_weight",
                bits["linear_weight"],
                "one",
                granularity="per_channel",
                axis=0,
                tensor_class=cls,
            )

        def act(linear, role, stage, tensor_class, n_bits, i=i, p=p):
            return _site(
                f"{p}.{linear}.{role}",
                i,
                linear,
                role,
                n_bits,
                stage,
                tensor_class=tensor_class,
            )

        in_bits = bits["linear_input_act"]
        out_bits = bits["linear_output_act"]
        sites += [
            act("q_proj", "linear_input_act", "one", cls, in_bits),
            weight("q_proj"),
            act("q_proj", "linear_output_act", "two", "unrotated", out_bits),
            weight("k_proj"),
            act("k_proj", "key", "two", "unrotated", bits["key"]),
            weight("v_proj"),
            act("v_proj", "value", "two", "unrotated", bits["value"]),
            act("o_proj", "linear_input_act", "one", cls, in_bits),
            weight("o_proj"),
            act("o_proj", "linear_output_act", "two", "unrotated", out_bits),
            act("up_proj", "linear_input_act", "one", cls, in_bits),
            weight("up_proj"),
            act("up_proj", "linear_output_act", "two", "unrotated", out_bits),
            weight("gate_proj"),
            act(
                "gate_proj",
                "silu_output",
                "two",
                "unrotated",
                bits["silu_output"],
            ),
            # no online rotation in front of down_proj
            act(
                "down_proj",
                "linear_input_act",
                "two",
                "unrotated",
                max(in_bits, 8),
            ),
            weight("down_proj"),
            act(
                "down_proj", "linear_output_act", "two", "unrotated", out_bits
            ),
        ]
    for role, n_bits in (
        ("linear_input_act", bits["linear_input_act"]),
        ("linear_weight", bits["linear_weight"]),
        ("linear_output_act", bits["linear_output_act"]),
    ):
        sites.append(
            _site(
                f"lm_head.{role}",
                None,
                "lm_head",
                role,
                n_bits,
                "excluded",
                tensor_class="unrotated",
            )
        )
    return {site.site_id: site for site in sites}


def build_model(
    config: ToyTransformerConfig, seed: int, rotated: bool = True
) -> ToyTransformer:
    """Build a toy model with weights drawn from a seeded generator.

    Parameters
    ----------
    config : ToyTransformerConfig
        Model shape and per-role bits.
    seed : int
        Seed for the weights and the rotations' sign diagonals.
    rotated : bool, optional
        Whether to fuse learnable R1/R2 rotations. Default True.

    Returns
    -------
    ToyTransformer
        A model with uninitialized quantization sites.

    """
    rng = np.random.default_rng(seed)
    h, m = config.hidden_dim, config.mlp_dim

    def normal(shape, fan_in=1):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(
            np.float32
        )

    def with_outliers(w):
        rate, factor = config.weight_outlier_rate, config.weight_outlier_scale
        if rate == 0:
            return w
        w = np.where(rng.random(w.shape) < rate, w * factor, w)
        # back to the variance of the plain draw
        return (w / np.sqrt(1 + rate * (factor**2 - 1))).astype(np.float32)

    def gain():
        return (1.0 + 0.1 * rng.standard_normal(h)).astype(np.float32)

    weights = {"embed": normal((config.vocab_size, h))}
    for i in range(config.num_layers):
        p = f"layers.{i}"
        attn_gain = gain()
        for name in ("q_proj", "k_proj", "v_proj"):
            weights[f"{p}.{name}"] = fold_norm_gains(
                with_outliers(normal((h, h), h)), attn_gain
            )
        weights[f"{p}.o_proj"] = with_outliers(normal((h, h), h))
        mlp_gain = gain()
        up = normal((m, h), h)
        if config.outlier_layer == i:
            up[config.outlier_channel] *= config.outlier_scale
        weights[f"{p}.up_proj"] = fold_norm_gains(up, mlp_gain)
        weights[f"{p}.gate_proj"] = fold_norm_gains(
            normal((m, h), h), mlp_gain
        )
        weights[f"{p}.down_proj"] = normal((h, m), m)
    final_gain = gain()
    weights["lm_head"] = fold_norm_gains(
        normal((config.vocab_size, h), h), final_gain
    )

    rotations = {}
    if rotated:
        seeds = rng.integers(0, 2**31 - 1, size=config.num_layers + 1)
        rotations["R1"] = LearnableRotation(h, int(seeds[0]), "R1", "R1")
        for i in range(config.num_layers):
            name = f"layers.{i}.R2"
            rotations[name] = LearnableRotation(
                config.head_dim, int(seeds[i + 1]), "R2", name
            )
    model = ToyTransformer(
        config, seed, weights, rotations, build_sites(config, rotated)
    )
    logger.info(f"Built {model!r} from seed {seed}.")
    return model
