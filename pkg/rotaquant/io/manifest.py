"""Save and load calibration manifests.

A manifest is the deployable record of a calibrated model: the model
configuration and seed, the learned rotations, every quantization site with
its static parameters, the precision plan and the evaluation metrics. It is
written as JSON with sorted keys, so equal models give byte-identical files.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from attrs import evolve

from rotaquant import __version__
from rotaquant.io.validators import ValidFile, ValidManifest
from rotaquant.logging import log_error
from rotaquant.model import ToyTransformer, ToyTransformerConfig, build_model
from rotaquant.quantizer import QuantParams, QuantSpec
from rotaquant.rotation import RotationHandle
from rotaquant.sensitivity import PrecisionPlan

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def matrix_digest(matrix: np.ndarray) -> str:
    """SHA-256 of a matrix's little-endian float32 bytes."""
    data = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    return hashlib.sha256(data).hexdigest()


def _to_list(value: np.ndarray) -> Any:
    # float32 -> Python float is exact, so values survive a JSON round trip
    return np.asarray(value).tolist()


def _rotation_entry(handle: RotationHandle) -> dict[str, Any]:
    return {
        "kind": handle.kind,
        "site": handle.site,
        "size": handle.size,
        "seed": handle.seed,
        "cayley_params": _to_list(handle.cayley_params),
        "digest": matrix_digest(handle.matrix),
    }


def _site_entry(site) -> dict[str, Any]:
    spec = site.spec
    params = site.params
    return {
        "role": site.role,
        "stage": site.stage,
        "bits": spec.bits,
        "granularity": spec.granularity,
        "axis": spec.axis,
        "symmetric": spec.symmetric,
        "signed": spec.signed,
        "tensor_class": spec.tensor_class,
        "enabled": site.enabled,
        "init_method": site.init_method,
        "scale": None if params is None else _to_list(params.scale),
        "zero_point": (
            None if params is None else _to_list(params.zero_point)
        ),
    }


def build_manifest(
    model: ToyTransformer,
    plan: Optional[PrecisionPlan] = None,
    metrics: Optional[dict[str, float]] = None,
    data: Optional[dict[str, Any]] = None,
) -> dict[str, Any]:
    """Describe a calibrated model as a JSON-serializable dictionary.

    Parameters
    ----------
    model : ToyTransformer
        The calibrated model.
    plan : PrecisionPlan, optional
        The mixed-precision plan used during calibration.
    metrics : dict, optional
        Evaluation results, e.g. ``{"output_mse": ...}``.
    data : dict, optional
        Where the calibration data came from.

    Returns
    -------
    dict
        The manifest. Every site of the model appears exactly once.

    """
    return {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "seed": model.seed,
        "rotated": model.rotated,
        "model_config": model.config.to_dict(),
        "rotations": {
            name: _rotation_entry(rotation.handle())
            for name, rotation in model.rotations.items()
        },
        "sites": {
            site_id: _site_entry(site)
            for site_id, site in model.sites.items()
        },
        "precision_plan": None if plan is None else plan.to_dict(),
        "metrics": dict(metrics or {}),
        "data": data,
    }


def manifest_to_json(manifest: dict[str, Any]) -> str:
    """Serialize a manifest with sorted keys and a trailing newline."""
    return json.dumps(manifest, sort_keys=True, indent=2) + "\n"


def save_manifest(
    manifest: dict[str, Any], file_path: Union[str, Path]
) -> Path:
    """Write a manifest to a new ``.json`` file."""
    file = ValidFile(
        file_path, expected_permission="w", expected_suffix=[".json"]
    )
    file.path.write_text(manifest_to_json(manifest))
    logger.info(
        f"Saved manifest with {len(manifest['sites'])} sites to {file.path}."
    )
    return file.path


def load_manifest(file_path: Union[str, Path]) -> dict[str, Any]:
    """Read and validate a manifest file.

    Raises
    ------
    ValueError
        If the file is not valid JSON or misses a required field.

    """
    file = ValidFile(
        file_path, expected_permission="r", expected_suffix=[".json"]
    )
    try:
        content = json.loads(file.path.read_text())
    except json.JSONDecodeError as error:
        raise log_error(
            ValueError, f"Manifest {file.path} is not valid JSON: {error}"
        ) from error
    ValidManifest(content)
    logger.debug(f"Loaded manifest from {file.path}.")
    return content


def _restore_rotations(model: ToyTransformer, entries: dict) -> None:
    if set(entries) != set(model.rotations):
        raise log_error(
            ValueError,
            f"Manifest rotations {sorted(entries)} do not match the "
            f"model's {sorted(model.rotations)}.",
        )
    for name, entry in entries.items():
        rotation = model.rotations[name]
        if entry["size"] != rotation.size or entry["seed"] != (
            rotation.base.seed
        ):
            raise log_error(
                ValueError,
                f"Manifest rotation '{name}' was drawn for a different "
                "model (size or seed differ).",
            )
        theta = np.asarray(entry["cayley_params"], dtype=np.float32)
        if theta.shape != rotation.theta.shape:
            raise log_error(
                ValueError,
                f"Manifest rotation '{name}' has {theta.size} parameters, "
                f"expected {rotation.theta.size}.",
            )
        rotation.theta = theta
        if matrix_digest(rotation.matrix) != entry["digest"]:
            raise log_error(
                ValueError,
                f"Manifest rotation '{name}' does not reproduce its digest.",
            )


def _restore_site(site, entry: dict) -> None:
    if entry["role"] != site.role or entry["stage"] != site.stage:
        raise log_error(
            ValueError,
            f"Manifest site '{site.site_id}' has role/stage "
            f"{entry['role']}/{entry['stage']}, the model has "
            f"{site.role}/{site.stage}.",
        )
    spec = QuantSpec(
        entry["bits"],
        symmetric=entry["symmetric"],
        granularity=entry["granularity"],
        axis=entry["axis"],
        signed=entry["signed"],
        tensor_class=entry["tensor_class"],
    )
    params = None
    if entry["scale"] is not None:
        params = QuantParams(entry["scale"], entry["zero_point"])
    site.spec = spec
    site.params = params
    site.init_method = entry["init_method"]
    site.enabled = bool(entry["enabled"])


def apply_manifest(model: ToyTransformer, manifest: dict[str, Any]) -> None:
    """Load the rotations and site parameters of a manifest into a model.

    Raises
    ------
    ValueError
        If the manifest was produced for a different model: another
        configuration, seed, rotation layout or set of sites.

    """
    ValidManifest(manifest)
    config = ToyTransformerConfig.from_dict(manifest["model_config"])
    if config != model.config or manifest["seed"] != model.seed:
        raise log_error(
            ValueError,
            "Manifest model_config/seed do not match the model.",
        )
    if bool(manifest["rotated"]) != model.rotated:
        raise log_error(
            ValueError, "Manifest and model disagree on `rotated`."
        )
    sites = manifest["sites"]
    if set(sites) != set(model.sites):
        missing = sorted(set(model.sites) - set(sites))
        extra = sorted(set(sites) - set(model.sites))
        raise log_error(
            ValueError,
            f"Manifest sites do not match the model: missing {missing}, "
            f"unexpected {extra}.",
        )
    _restore_rotations(model, manifest["rotations"])
    for site_id, site in model.sites.items():
        _restore_site(site, sites[site_id])
    logger.info(f"Applied manifest with {len(sites)} sites to {model!r}.")


def model_from_manifest(
    manifest: dict[str, Any],
    config: Optional[ToyTransformerConfig] = None,
) -> ToyTransformer:
    """Rebuild the calibrated model a manifest describes.

    Parameters
    ----------
    manifest : dict
        A manifest as returned by :func:`load_manifest`.
    config : ToyTransformerConfig, optional
        A configuration to check the manifest against. Bit-widths are not
        compared, since calibration may override them.

    """
    recorded = ToyTransformerConfig.from_dict(manifest["model_config"])
    if config is not None and evolve(config, bits={}) != evolve(
        recorded, bits={}
    ):
        raise log_error(
            ValueError,
            "Manifest was produced for a different model config.",
        )
    model = build_model(
        recorded, int(manifest["seed"]), rotated=bool(manifest["rotated"])
    )
    apply_manifest(model, manifest)
    return model
