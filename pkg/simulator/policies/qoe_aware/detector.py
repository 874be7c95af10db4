import functools
import logging
from typing import Callable, Dict, Optional

from policies.base import OBJECTIVES, EngineView, PolicySettings, ScheduleDecision

from .universal import decide

logger = logging.getLogger(__name__)

DecideFn = Callable[[EngineView, PolicySettings], ScheduleDecision]

# Map solver names directly to their decide variants
VARIANT_MAP: Dict[str, DecideFn] = {
    "greedy": functools.partial(decide, solver="greedy"),
    "dp": functools.partial(decide, solver="dp"),
}


def detect_variant(settings: PolicySettings) -> Optional[DecideFn]:
    if settings.objective not in OBJECTIVES:
        logger.warning(f"Unknown objective '{settings.objective}'")
        return None
    variant = VARIANT_MAP.get(settings.solver)
    if variant is None:
        logger.warning(f"Unknown solver '{settings.solver}'")
        return None
    logger.debug(
        f"Detected variant: solver={settings.solver} objective={settings.objective} "
        f"refiner={'on' if settings.refiner else 'off'}"
    )
    return variant
