import importlib
import logging
from dataclasses import dataclass, replace
from typing import Callable

from policies.base import EngineView, PolicySettings, ScheduleDecision
from utils import ConfigError

logger = logging.getLogger(__name__)

POLICY_ALIASES = {"andes": "qoe_aware", "qoe-aware": "qoe_aware"}
POLICY_NAMES = ("qoe_aware", "fcfs", "lqsf")


@dataclass(frozen=True)
class Policy:
    name: str
    settings: PolicySettings
    decide_fn: Callable[[EngineView, PolicySettings], ScheduleDecision]

    def decide(self, view: EngineView) -> ScheduleDecision:
        return self.decide_fn(view, self.settings)


def canonical_name(name: str) -> str:
    key = name.strip().lower()
    key = POLICY_ALIASES.get(key, key.replace("-", "_"))
    if key not in POLICY_NAMES:
        raise ConfigError(
            f"unknown policy '{name}' (choose from andes, {', '.join(POLICY_NAMES)})"
        )
    return key


def load_policy(name: str, settings: PolicySettings = PolicySettings()) -> Policy:
    """Resolves policies.<name>.detector, falling back to policies.<name>.universal."""
    key = canonical_name(name)
    settings = replace(settings, name=key)
    package = f"policies.{key}"

    decide_fn = None
    try:
        detector = importlib.import_module(f"{package}.detector")
        detect_variant = getattr(detector, "detect_variant")
    except (ImportError, AttributeError):
        logger.debug(f"No variant detector for policy '{key}'")
        detect_variant = None

    if detect_variant is not None:
        decide_fn = detect_variant(settings)

    if decide_fn is None:
        try:
            universal = importlib.import_module(f"{package}.universal")
            decide_fn = getattr(universal, "decide")
        except (ImportError, AttributeError) as e:
            raise ConfigError(f"policy '{key}' has no decide entry point") from e

    logger.debug(f"Loaded policy {key}: {decide_fn}")
    return Policy(key, settings, decide_fn)
