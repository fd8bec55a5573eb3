"""Speech-driven joint expression and gesture generation with diffusion models.

Training happens on fixed-length motion clips conditioned on per-frame
audio features; arbitrary-length output is produced clip by clip, where
each new clip is outpainted against the tail of the previous one.
"""

from .diffusion import NoiseSchedule, build_schedule

__all__ = ["NoiseSchedule", "build_schedule"]
