#!/usr/bin/env python3
"""
Ablation sweep: run the pipeline once per component toggle and merge the results.

Usage: scripts/ablation_sweep.py [CONFIG] [ROOT]
"""

import sys
from pathlib import Path
from typing import Any

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from wsolkit.config import PIPELINE_STAGES, apply_overrides, load_config
from wsolkit.exceptions import WsolkitError
from wsolkit.logging import configure_logging, get_logger, log_error
from wsolkit.pipeline import execute_stage

VARIANTS: dict[str, dict[str, Any]] = {
    "full": {},
    "no-as": {"mining": {"activation_weight": 0.0}},
    "no-mil": {"mil": {"enabled": False}},
    "no-seg": {"refine": {"enabled": False}},
    "whole-out": {"mining": {"mask_out": "whole-out"}},
}


def main() -> int:
    """Run every variant into its own work directory, then report from ``full``."""
    configure_logging(verbose=False)
    logger = get_logger(__name__)

    config_path = Path(sys.argv[1]) if len(sys.argv) > 1 else None
    root = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("runs/ablation")  # noqa: PLR2004
    base = load_config(config_path)

    for name, overrides in VARIANTS.items():
        config, applied = apply_overrides(base, overrides)
        workdir = root / name
        logger.info("Running variant", variant=name, workdir=str(workdir), overrides=applied)
        try:
            for stage in PIPELINE_STAGES[:-1]:
                execute_stage(stage, config, applied, workdir=workdir)
        except WsolkitError as exc:
            log_error(exc, {"variant": name})
            return 1

    others = [root / name / "eval.json" for name in VARIANTS if name != "full"]
    execute_stage("report", base, workdir=root / "full", include=others)
    logger.info("Sweep complete", report=str(root / "full" / "report.md"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
