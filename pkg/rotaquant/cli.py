"""Command-line interface: ``rotaquant {calibrate,sensitivity,eval,...}``.

Exit codes are a stable contract: 0 on success, 2 for bad input (missing
or malformed files, invalid configuration), 3 for a numeric failure
(non-finite loss, singular Cayley system).
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from rotaquant import __version__
from rotaquant.initialization import INIT_METHODS
from rotaquant.io.manifest import (
    build_manifest,
    load_manifest,
    model_from_manifest,
    save_manifest,
)
from rotaquant.io.qtns import load_tensor, save_tensor
from rotaquant.io.validators import (
    ValidFile,
    ValidTokenArray,
    load_model_config,
)
from rotaquant.logging import log_error
from rotaquant.model import ToyTransformerConfig, build_model
from rotaquant.pipeline import (
    OptimConfig,
    calibrate,
    evaluate,
    probe_sensitivity,
)
from rotaquant.sample_data import (
    DEFAULT_NUM_BATCHES,
    calibration_batches,
    make_batches,
    synthetic_tokens,
)
from rotaquant.sensitivity import format_sensitivity_report
from rotaquant.utils.reports import emit_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_NUMERIC_ERROR = 3

DEFAULT_WARMUP_STEPS = 128


def _model_config(args: argparse.Namespace) -> ToyTransformerConfig:
    content = {}
    if args.model_config is not None:
        content = load_model_config(args.model_config)
    config = ToyTransformerConfig.from_dict(content)
    return config.with_bits(
        getattr(args, "weight_bits", None), getattr(args, "act_bits", None)
    )


def _load_token_batches(
    path: Path, config: ToyTransformerConfig, batch_size: int
) -> list[np.ndarray]:
    tokens = load_tensor(path)
    ValidTokenArray(
        tokens=tokens, vocab_size=config.vocab_size, seq_len=config.seq_len
    )
    return make_batches(tokens, batch_size)


def _batches(
    args: argparse.Namespace, config: ToyTransformerConfig
) -> tuple[list[np.ndarray], dict[str, Any]]:
    """Calibration batches and the manifest entry that reproduces them."""
    if args.data is not None:
        path = ValidFile(args.data, expected_suffix=[".qtns"]).path
        data = {
            "source": "file",
            "path": str(path),
            "batch_size": args.batch_size,
        }
        return _load_token_batches(path, config, args.batch_size), data
    data = {
        "source": "synthetic",
        "seed": args.seed,
        "num_batches": args.num_batches,
        "batch_size": args.batch_size,
        "seq_len": config.seq_len,
    }
    return _batches_from_record(data, config), data


def _batches_from_record(
    data: dict[str, Any], config: ToyTransformerConfig
) -> list[np.ndarray]:
    if data["source"] == "file":
        return _load_token_batches(
            Path(data["path"]), config, data["batch_size"]
        )
    if data["source"] == "synthetic":
        return calibration_batches(
            config,
            data["seed"],
            num_batches=data["num_batches"],
            batch_size=data["batch_size"],
            seq_len=data["seq_len"],
        )
    raise log_error(
        ValueError, f"Unknown data source '{data['source']}' in manifest."
    )


def cmd_calibrate(args: argparse.Namespace) -> int:
    """Calibrate a toy model and write its manifest."""
    config = _model_config(args)
    # fail before the run if the output cannot be written
    ValidFile(args.out, expected_permission="w", expected_suffix=[".json"])
    batches, data = _batches(args, config)
    model = build_model(config, args.seed, rotated=not args.no_rotation)
    optim = OptimConfig(
        steps=args.steps,
        warmup_local_loss_steps=min(DEFAULT_WARMUP_STEPS, args.steps),
        lr_rotation=args.lr_rotation,
        lr_quant=args.lr_quant,
        batch_size=args.batch_size,
        seed=args.seed,
        init_override=args.init_override,
        progress=args.progress,
    )
    result = calibrate(
        model, batches, optim, promote_fraction=args.promote_fraction
    )
    report = evaluate(model, batches)
    d = report.decomposition
    metrics = {
        "output_mse": report.mse,
        "e_rounding": d.e_rounding,
        "e_clipping": d.e_clipping,
        "e_total": d.e_total,
    }
    save_manifest(build_manifest(model, result.plan, metrics, data), args.out)
    emit_report(f"output_mse: {report.mse:.6e}", print_report=True)
    return EXIT_OK


def cmd_sensitivity(args: argparse.Namespace) -> int:
    """Write the sensitivity ratio of every probe site."""
    config = _model_config(args)
    out = None
    if args.out is not None:
        out = ValidFile(
            args.out, expected_permission="w", expected_suffix=[".txt"]
        ).path
    batches, _ = _batches(args, config)
    model = build_model(config, args.seed, rotated=not args.no_rotation)
    reports = probe_sensitivity(model, batches, args.probe_bits)
    text = format_sensitivity_report(reports)
    if out is not None:
        out.write_text(text + "\n")
        logger.info(f"Saved sensitivity report to {out}.")
    emit_report(text, print_report=out is None)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluate a manifest against the fp32 model."""
    manifest = load_manifest(args.manifest)
    config = None
    if args.model_config is not None:
        config = ToyTransformerConfig.from_dict(
            load_model_config(args.model_config)
        )
    model = model_from_manifest(manifest, config)
    if args.data is not None:
        path = ValidFile(args.data, expected_suffix=[".qtns"]).path
        batch_size = (manifest.get("data") or {}).get("batch_size", 4)
        batches = _load_token_batches(path, model.config, batch_size)
    elif manifest.get("data") is not None:
        batches = _batches_from_record(manifest["data"], model.config)
    else:
        raise log_error(
            ValueError,
            "Manifest records no calibration data; pass --data.",
        )
    report = evaluate(model, batches)
    emit_report(report.to_text(), print_report=True)
    return EXIT_OK


def cmd_synth_data(args: argparse.Namespace) -> int:
    """Write seeded synthetic token sequences to a QTNS file."""
    config = _model_config(args)
    tokens = synthetic_tokens(
        args.num_sequences,
        args.seq_len or config.seq_len,
        config.vocab_size,
        args.seed,
    )
    save_tensor(tokens, args.out)
    return EXIT_OK


def _add_model_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--model-config",
        type=Path,
        default=None,
        help="JSON/YAML model configuration (defaults if omitted)",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--weight-bits", type=int, choices=[4, 8])
    parser.add_argument("--act-bits", type=int, choices=[4, 8])


def _add_data_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--data",
        type=Path,
        default=None,
        help="QTNS file of int32 token ids (synthetic data if omitted)",
    )
    parser.add_argument("--batch-size", type=int, default=4)
    parser.add_argument(
        "--num-batches", type=int, default=DEFAULT_NUM_BATCHES
    )
    parser.add_argument(
        "--no-rotation",
        action="store_true",
        help="quantize the model without R1/R2 rotations",
    )


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with one subcommand per operation."""
    parser = argparse.ArgumentParser(
        prog="rotaquant",
        description="Static integer quantization with learnable rotations.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="calibrate and write a manifest")
    _add_model_arguments(p)
    _add_data_arguments(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=512)
    p.add_argument("--promote-fraction", type=float, default=0.10)
    p.add_argument("--lr-rotation", type=float, default=0.1)
    p.add_argument("--lr-quant", type=float, default=0.01)
    p.add_argument("--init-override", choices=sorted(INIT_METHODS))
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sensitivity", help="rank sites by sensitivity")
    _add_model_arguments(p)
    _add_data_arguments(p)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--probe-bits", type=int, default=8, choices=[4, 8, 16])
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("eval", help="evaluate a manifest")
    p.add_argument("--model-config", type=Path, default=None)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth-data", help="write synthetic token ids")
    p.add_argument("--model-config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-sequences", type=int, default=32)
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Run the command line and return its exit code."""
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FloatingPointError, np.linalg.LinAlgError) as error:
        # LinAlgError subclasses ValueError, so it is handled first
        print(f"rotaquant: numeric failure: {error}", file=sys.stderr)
        return EXIT_NUMERIC_ERROR
    except (
        ValueError,
        TypeError,
        OSError,
        KeyError,
        yaml.YAMLError,
    ) as error:
        print(f"rotaquant: input error: {error}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
