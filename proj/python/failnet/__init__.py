"""Failure detection for autonomous vehicles from externally observed poses.

Typical run::

    import failnet
    cfg = failnet.load_config("", ["data.minutes_per_mode=5"])
    failnet.generate(cfg, "run")
    failnet.train(cfg, "run")
    print(failnet.evaluate(cfg, "run")["table"])
"""

from ._core import (
    Detector,
    IntersectionManager,
    ProtocolError,
    RunConfig,
    bce_loss,
    classify_zone,
    evaluate,
    fft_yaw_power,
    format_pose,
    generate,
    grad_check,
    known_keys,
    load_config,
    load_detector,
    parse_config,
    parse_message,
    replay,
    train,
)

__all__ = [
    "Detector",
    "IntersectionManager",
    "ProtocolError",
    "RunConfig",
    "bce_loss",
    "classify_zone",
    "evaluate",
    "fft_yaw_power",
    "format_pose",
    "generate",
    "grad_check",
    "known_keys",
    "load_config",
    "load_detector",
    "parse_config",
    "parse_message",
    "replay",
    "train",
]
