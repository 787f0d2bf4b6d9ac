"""The two-stage static quantization pipeline.

Stage One jointly optimizes the rotations and the parameters of the
stage-one sites (input activations and weights of the linears) against a
frozen fp32 copy of the model, with every stage-two site left in floating
point. Stage Two then runs calibration data through the stage-one-quantized
model and sets the remaining sites (outputs, KV, SiLU, ``down_proj`` input)
statically from Max-Min statistics.
"""

import logging
from collections.abc import Sequence
from typing import Literal, Optional

import numpy as np
import pandas as pd
import xarray as xr
from attrs import define, evolve, field, validators
from tqdm import tqdm

from rotaquant.core import autodiff as ad
from rotaquant.core.stats import RunningStats
from rotaquant.initialization import (
    INIT_METHODS,
    InitPolicy,
    initialize,
    max_min_init,
    select_policy,
)
from rotaquant.logging import log_error
from rotaquant.model import ToyTransformer
from rotaquant.quantizer import (
    SCALE_FLOOR,
    SUPPORTED_BITS,
    QuantParams,
    fake_quantize,
    gradient_scale_factor,
    local_quant_loss_on_tape,
)
from rotaquant.sensitivity import (
    ErrorDecomposition,
    PrecisionPlan,
    SensitivityReport,
    error_decomposition,
    plan_mixed_precision,
    probe_ratio,
)

logger = logging.getLogger(__name__)

Batches = Sequence[np.ndarray]


def _non_negative(instance, attribute, value):
    if value < 0:
        raise log_error(
            ValueError, f"Expected `{attribute.name}` >= 0, but got {value}."
        )


@define(frozen=True, kw_only=True)
class OptimConfig:
    """Hyper-parameters of Stage One.

    Attributes
    ----------
    steps : int
        Number of optimizer steps. Default 512.
    warmup_local_loss_steps : int
        The local quantization-error loss is added for steps
        ``0 .. warmup_local_loss_steps - 1``. Default 128.
    lr_rotation : float
        Initial learning rate of the rotation parameters. Default 0.1.
    lr_quant : float
        Initial learning rate of the scales. Default 0.01.
    schedule : {"cosine", "constant"}
        Learning-rate schedule. Cosine decays to zero at ``steps``.
    batch_size : int
        Sequences per calibration batch. Default 4.
    seed : int
        Seed recorded with the run. Default 0.
    learn_quant_params : bool
        If False, quantization parameters stay at their initialization and
        only the rotations are optimized. Default True.
    learn_rotations : bool
        If False, the rotations stay fixed. Default True.
    init_override : str, optional
        Force this initialization method on the stage-one sites instead of
        the rotation-aware policy.
    init_override_bits : int, optional
        Restrict ``init_override`` to sites quantized to this many bits.
        None applies it to every stage-one site.
    progress : bool
        Show a progress bar. Default False.

    """

    steps: int = field(default=512, validator=_non_negative)
    warmup_local_loss_steps: int = field(default=128, validator=_non_negative)
    lr_rotation: float = field(default=0.1, validator=_non_negative)
    lr_quant: float = field(default=0.01, validator=_non_negative)
    schedule: Literal["cosine", "constant"] = field(
        default="cosine", validator=validators.in_(["cosine", "constant"])
    )
    batch_size: int = field(default=4, validator=validators.ge(1))
    seed: int = 0
    learn_quant_params: bool = True
    learn_rotations: bool = True
    init_override: Optional[str] = field(
        default=None,
        validator=validators.optional(validators.in_(list(INIT_METHODS))),
    )
    init_override_bits: Optional[int] = field(
        default=None,
        validator=validators.optional(validators.in_(SUPPORTED_BITS)),
    )
    progress: bool = False

    def __attrs_post_init__(self):
        """Check that the warmup fits in the run."""
        if self.warmup_local_loss_steps > self.steps:
            raise log_error(
                ValueError,
                f"warmup_local_loss_steps ({self.warmup_local_loss_steps}) "
                f"exceeds steps ({self.steps}).",
            )

    def learning_rate(self, base: float, step: int) -> float:
        """Learning rate at ``step`` for a base rate."""
        if self.schedule == "constant" or self.steps == 0:
            return base
        return base * 0.5 * (1.0 + np.cos(np.pi * step / self.steps))


@define
class EvaluationReport:
    """Quality of a quantized model against its fp32 counterpart.

    Attributes
    ----------
    mse : float
        Mean squared error of the logits.
    per_site : pandas.DataFrame
        One row per quantizing site (index ``site_id``) with columns
        ``role``, ``stage``, ``bits`` and ``relative_error``
        (``||fq(x) - x||^2 / ||x||^2``).
    decomposition : ErrorDecomposition
        Rounding/clipping split of the squared error, summed over the
        quantizing activation sites.

    """

    mse: float
    per_site: pd.DataFrame
    decomposition: ErrorDecomposition

    def to_text(self) -> str:
        """Format the report as plain text."""
        lines = [f"output_mse: {self.mse:.6e}", "per-site relative error:"]
        for site_id, row in self.per_site.iterrows():
            lines.append(
                f"  {site_id} {row['bits']}-bit {row['relative_error']:.6e}"
            )
        d = self.decomposition
        lines += [
            f"e_rounding: {d.e_rounding:.6e}",
            f"e_clipping: {d.e_clipping:.6e}",
            f"e_total: {d.e_total:.6e}",
        ]
        return "\n".join(lines)


@define
class CalibrationResult:
    """Everything produced by :func:`calibrate` besides the model itself."""

    plan: PrecisionPlan
    reports: list[SensitivityReport]
    policies: dict[str, InitPolicy]
    trace: xr.Dataset
    stage_two: dict[str, QuantParams]


def _check_batches(batches: Batches) -> None:
    if len(batches) == 0:
        raise log_error(
            ValueError, "Empty calibration set: no batches were given."
        )


def _collect_activation_stats(
    model: ToyTransformer,
    batches: Batches,
    site_ids: set[str],
    stages,
) -> dict[str, RunningStats]:
    """Per-tensor statistics of the inputs of the given sites."""
    stats: dict[str, RunningStats] = {}

    def observe(site_id, value):
        if site_id in site_ids:
            stats[site_id] = stats.get(site_id, RunningStats()).update(value)

    for batch in batches:
        model.forward(batch, stages=stages, observer=observe)
    return stats


def initialize_sites(
    model: ToyTransformer,
    batches: Batches,
    init_override: Optional[str] = None,
    learnable: bool = True,
    respect_bit_floor: bool = True,
    override_bits: Optional[int] = None,
) -> dict[str, InitPolicy]:
    """Initialize every stage-one site.

    Activation statistics come from the fp32 model; weight statistics are
    per output channel of the rotation-fused weights.

    Parameters
    ----------
    model : ToyTransformer
        The model; its stage-one sites are updated in place.
    batches : sequence of numpy.ndarray
        Calibration token batches.
    init_override : str, optional
        Use this method everywhere instead of the policy's choice.
    learnable : bool, optional
        Mark the parameters as learnable by Stage One. Default True.
    respect_bit_floor : bool, optional
        Raise bit-widths to the policy's floor (8 bits for unrotated
        tensors). Default True.
    override_bits : int, optional
        Apply ``init_override`` only to sites with this bit-width (after
        the floor). None applies it everywhere.

    Returns
    -------
    dict
        The policy selected for each site.

    """
    _check_batches(batches)
    sites = model.sites_in_stage("one")
    act_ids = {s.site_id for s in sites if not s.is_weight}
    with model.quantization_disabled():
        stats = _collect_activation_stats(model, batches, act_ids, ("one",))
    weights = model.weight_values()
    policies = {}
    for site in sites:
        policy = select_policy(site.spec.tensor_class, site.spec.bits)
        spec = policy.apply(site.spec) if respect_bit_floor else site.spec
        if site.is_weight:
            site_stats = RunningStats().update(
                weights[site.site_id], channel_axis=spec.axis
            )
        else:
            site_stats = stats[site.site_id]
        override = init_override
        if override_bits is not None and spec.bits != override_bits:
            override = None
        method = override or policy.method
        params = initialize(site_stats, spec, method)
        params.learnable = learnable
        site.spec, site.params, site.init_method = spec, params, method
        policies[site.site_id] = policy
        logger.debug(
            f"{site.site_id}: {method} at {spec.bits} bits, "
            f"mean scale {float(np.mean(params.scale)):.4g}"
        )
    logger.info(f"Initialized {len(sites)} stage-one sites.")
    return policies


def probe_sensitivity(
    model: ToyTransformer, batches: Batches, probe_bits: int = 8
) -> list[SensitivityReport]:
    """Sensitivity ratio of every ``down_proj`` input on the fp32 model."""
    _check_batches(batches)
    candidates = [
        s
        for s in model.sites.values()
        if s.linear == "down_proj" and s.role == "linear_input_act"
    ]
    ids = {s.site_id for s in candidates}
    values: dict[str, list[np.ndarray]] = {i: [] for i in ids}

    def observe(site_id, value):
        if site_id in ids:
            values[site_id].append(value.reshape(-1))

    with model.quantization_disabled():
        for batch in batches:
            model.forward(batch, observer=observe)
    return [
        SensitivityReport(
            site.site_id,
            probe_ratio(np.concatenate(values[site.site_id]), probe_bits),
            probe_bits,
            index=site.layer,
        )
        for site in candidates
    ]


def apply_precision_plan(model: ToyTransformer, plan: PrecisionPlan) -> None:
    """Set the bit-width of every planned site."""
    for site_id, bits in plan.bits.items():
        if site_id not in model.sites:
            raise log_error(
                ValueError, f"Plan refers to unknown site '{site_id}'."
            )
        site = model.sites[site_id]
        site.spec = evolve(site.spec, bits=bits)


def _bind_parameters(model, tape, sites, optim):
    """Register the trainable state on a tape.

    Zero-points stay constants: they live on the integer grid, where an
    SGD step of this size never moves them.
    """
    bindings = {}
    if model.rotated and optim.learn_rotations:
        for name, rotation in model.rotations.items():
            bindings[name] = rotation.on_tape(tape)
    for site in sites:
        learn = optim.learn_quant_params and site.params.learnable
        scale = (
            tape.parameter(f"{site.site_id}.scale", site.params.scale)
            if learn
            else tape.constant(site.params.scale)
        )
        zero_point = None
        if not site.spec.symmetric:
            zero_point = tape.constant(
                site.params.zero_point.astype(np.float32)
            )
        bindings[site.site_id] = (scale, zero_point)
    return bindings


def _elements_per_parameter(model, site, site_inputs) -> int:
    if site.is_weight:
        size = model.weights[site.site_id.rsplit(".", 1)[0]].size
    else:
        size = site_inputs[site.site_id][0].value.size
    return size // site.params.scale.size


def _apply_updates(model, sites, grads, site_inputs, lr_rotation, lr_quant):
    """One SGD step; scales stay above the floor."""
    for name, rotation in model.rotations.items():
        if name in grads:
            rotation.theta = (rotation.theta - lr_rotation * grads[name])
            rotation.theta = rotation.theta.astype(np.float32)
    for site in sites:
        key = f"{site.site_id}.scale"
        if key not in grads:
            continue
        g = gradient_scale_factor(
            _elements_per_parameter(model, site, site_inputs),
            site.spec.q_max,
        )
        scale = np.maximum(
            site.params.scale - lr_quant * g * grads[key], SCALE_FLOOR
        )
        site.params = QuantParams(
            scale, site.params.zero_point, learnable=True
        )


def stage_one_optimize(
    model: ToyTransformer, batches: Batches, optim: OptimConfig
) -> xr.Dataset:
    """Jointly optimize rotations and stage-one quantization parameters.

    The loss is the MSE between the logits of the stage-one-quantized model
    and the fp32 logits, plus the local quantization error of the stage-one
    activation sites during the warmup steps. Each site contributes its
    mean squared reconstruction error, so the term is on the same
    per-element footing as the output MSE. Scale gradients are multiplied
    by the gradient scaling factor before the SGD step; zero-points are
    not trained.

    Parameters
    ----------
    model : ToyTransformer
        A model whose stage-one sites are initialized. Updated in place.
    batches : sequence of numpy.ndarray
        Calibration token batches, used round-robin.
    optim : OptimConfig
        Hyper-parameters.

    Returns
    -------
    xarray.Dataset
        The loss trace along dimension ``step``: ``total``, ``mse`` and
        ``local`` losses and the learning rates ``lr_rotation`` and
        ``lr_quant``.

    Raises
    ------
    ValueError
        If no batches are given or a stage-one site is uninitialized.
    FloatingPointError
        If the loss becomes NaN or infinite; the message names the step.

    """
    _check_batches(batches)
    sites = [s for s in model.sites_in_stage("one") if s.enabled]
    missing = [s.site_id for s in sites if s.params is None]
    if missing:
        raise log_error(
            ValueError, f"Stage-one sites are not initialized: {missing}."
        )
    teachers = [model.teacher_logits(batch) for batch in batches]
    columns: dict[str, list[float]] = {
        "total": [],
        "mse": [],
        "local": [],
        "lr_rotation": [],
        "lr_quant": [],
    }
    for step in tqdm(
        range(optim.steps), desc="Stage one", disable=not optim.progress
    ):
        tape = ad.Tape()
        bindings = _bind_parameters(model, tape, sites, optim)
        index = step % len(batches)
        forward = model.forward(
            batches[index], stages=("one",), tape=tape, bindings=bindings
        )
        mse = ad.mean(ad.square(ad.sub(forward.logits, teachers[index])))
        loss, local_value = mse, 0.0
        if step < optim.warmup_local_loss_steps and forward.site_inputs:
            local_terms = [
                local_quant_loss_on_tape(
                    x,
                    scale,
                    zero_point,
                    model.sites[site_id].spec,
                    reduction="mean",
                )
                for site_id, (x, scale, zero_point) in (
                    forward.site_inputs.items()
                )
            ]
            local = local_terms[0]
            for term in local_terms[1:]:
                local = ad.add(local, term)
            local_value = float(local.value)
            loss = ad.add(mse, local)
        total = float(loss.value)
        if not np.isfinite(total):
            raise log_error(
                FloatingPointError,
                f"Stage one aborted: non-finite loss at step {step}.",
            )
        grads = tape.backward(loss)
        lr_rotation = optim.learning_rate(optim.lr_rotation, step)
        lr_quant = optim.learning_rate(optim.lr_quant, step)
        _apply_updates(
            model, sites, grads, forward.site_inputs, lr_rotation, lr_quant
        )
        for name, value in (
            ("total", total),
            ("mse", float(mse.value)),
            ("local", local_value),
            ("lr_rotation", lr_rotation),
            ("lr_quant", lr_quant),
        ):
            columns[name].append(value)
        logger.debug(f"step {step}: loss {total:.6g}")
    trace = xr.Dataset(
        {name: ("step", np.asarray(v)) for name, v in columns.items()},
        coords={"step": np.arange(optim.steps)},
        attrs={
            "steps": optim.steps,
            "warmup_local_loss_steps": optim.warmup_local_loss_steps,
        },
    )
    if optim.steps:
        logger.info(
            f"Stage one: loss {columns['total'][0]:.6g} -> "
            f"{columns['total'][-1]:.6g} over {optim.steps} steps."
        )
    return trace


def stage_two_calibrate(
    model: ToyTransformer, batches: Batches
) -> dict[str, QuantParams]:
    """Statically calibrate every stage-two site with Max-Min.

    Calibration runs through the stage-one-quantized model. Each site is
    treated as unrotated, so its bit-width is at least 8.

    Returns
    -------
    dict
        The new parameters keyed by site id.

    """
    _check_batches(batches)
    sites = [s for s in model.sites_in_stage("two") if s.enabled]
    stats = _collect_activation_stats(
        model, batches, {s.site_id for s in sites}, ("one",)
    )
    calibrated = {}
    for site in sites:
        policy = select_policy("unrotated", site.spec.bits)
        site.spec = policy.apply(site.spec)
        site.params = max_min_init(stats[site.site_id], site.spec)
        site.init_method = "max_min"
        calibrated[site.site_id] = site.params
    logger.info(f"Calibrated {len(sites)} stage-two sites.")
    return calibrated


def evaluate(model: ToyTransformer, batches: Batches) -> EvaluationReport:
    """Compare the quantized model with its fp32 counterpart.

    Returns
    -------
    EvaluationReport
        Logit MSE, per-site relative errors and the summed error
        decomposition of the activation sites.

    """
    _check_batches(batches)
    squared = 0.0
    count = 0
    errors: dict[str, list[float]] = {}
    decomposition = ErrorDecomposition.zero()

    def observe(site_id, value):
        nonlocal decomposition
        site = model.sites[site_id]
        if not model.is_active(site):
            return
        x = np.asarray(value, dtype=np.float32)
        diff = fake_quantize(x, site.params, site.spec).astype(np.float64) - x
        totals = errors.setdefault(site_id, [0.0, 0.0])
        totals[0] += float(np.sum(diff**2))
        totals[1] += float(np.sum(x.astype(np.float64) ** 2))
        if not site.is_weight:
            decomposition = decomposition + error_decomposition(
                x, site.params, site.spec
            )

    for batch in batches:
        teacher = model.teacher_logits(batch).astype(np.float64)
        logits = model.forward(batch, observer=observe).logits.value
        squared += float(np.sum((logits.astype(np.float64) - teacher) ** 2))
        count += teacher.size
    rows = [
        {
            "site_id": site_id,
            "role": model.sites[site_id].role,
            "stage": model.sites[site_id].stage,
            "bits": model.sites[site_id].spec.bits,
            "relative_error": err / ref if ref > 0 else err,
        }
        for site_id, (err, ref) in errors.items()
    ]
    per_site = pd.DataFrame(
        rows,
        columns=["site_id", "role", "stage", "bits", "relative_error"],
    ).set_index("site_id")
    report = EvaluationReport(squared / count, per_site, decomposition)
    logger.info(f"Evaluation: output MSE {report.mse:.6e}.")
    return report


def calibrate(
    model: ToyTransformer,
    batches: Batches,
    optim: OptimConfig,
    promote_fraction: float = 0.10,
    probe_bits: int = 8,
    respect_bit_floor: bool = True,
) -> CalibrationResult:
    """Run the full pipeline: init, precision plan, stage one, stage two.

    Parameters
    ----------
    model : ToyTransformer
        The model, calibrated in place.
    batches : sequence of numpy.ndarray
        Calibration token batches.
    optim : OptimConfig
        Stage One hyper-parameters (including ``init_override``).
    promote_fraction : float, optional
        Fraction of ``down_proj`` inputs promoted to 16 bits. Default 0.10.
    probe_bits : int, optional
        Bit-width of the sensitivity probe. Default 8.
    respect_bit_floor : bool, optional
        See :func:`initialize_sites`. Default True.

    Returns
    -------
    CalibrationResult
        The plan, sensitivity reports, policies, loss trace and the
        stage-two parameters.

    """
    policies = initialize_sites(
        model,
        batches,
        init_override=optim.init_override,
        respect_bit_floor=respect_bit_floor,
        override_bits=optim.init_override_bits,
    )
    reports = probe_sensitivity(model, batches, probe_bits)
    plan = plan_mixed_precision(reports, promote_fraction, low_bits=8)
    apply_precision_plan(model, plan)
    trace = stage_one_optimize(model, batches, optim)
    stage_two = stage_two_calibrate(model, batches)
    return CalibrationResult(plan, reports, policies, trace, stage_two)
