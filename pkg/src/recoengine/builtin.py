"""Custom rules shipped with the engine."""

from __future__ import annotations

import math
import random
import zlib

from .rules import Rule
from .store import schema


def heat_index(temp_c: float, rh: float) -> float:
    """Apparent temperature (deg C) from air temperature (deg C) and relative humidity (%).

    US National Weather Service procedure: Steadman's simple estimate, replaced
    by the Rothfusz regression (with its low/high humidity adjustments) once
    the estimate reaches 80 F.
    """
    t = temp_c * 9.0 / 5.0 + 32.0
    hi = 0.5 * (t + 61.0 + (t - 68.0) * 1.2 + rh * 0.094)
    if (hi + t) / 2.0 >= 80.0:
        hi = (-42.379 + 2.04901523 * t + 10.14333127 * rh
              - 0.22475541 * t * rh - 6.83783e-3 * t * t - 5.481717e-2 * rh * rh
              + 1.22874e-3 * t * t * rh + 8.5282e-4 * t * rh * rh
              - 1.99e-6 * t * t * rh * rh)
        if rh < 13.0 and 80.0 <= t <= 112.0:
            hi -= (13.0 - rh) / 4.0 * math.sqrt((17.0 - abs(t - 95.0)) / 17.0)
        elif rh > 85.0 and 80.0 <= t <= 87.0:
            hi += (rh - 85.0) / 10.0 * (87.0 - t) / 5.0
    return (hi - 32.0) * 5.0 / 9.0


class ComfortIndex(Rule):
    """Fires when the heat index of temperature + humidity exceeds ``threshold`` (deg C)."""

    schema = schema("ComfortIndex", temperature_uri="uri*", humidity_uri="uri*", threshold="number*")

    def condition(self, cache, now):
        t = cache.value(self.fields["temperature_uri"])
        rh = cache.value(self.fields["humidity_uri"])
        return heat_index(t, rh) > self.fields["threshold"]


class PowerFactorRule(Rule):
    """Fires when the measured power factor drops below ``threshold``."""

    schema = schema("PowerFactorRule", powerfactor_uri="uri*", threshold="number*")

    def condition(self, cache, now):
        return cache.value(self.fields["powerfactor_uri"]) < self.fields["threshold"]


class LuminosityRule(Rule):
    """Fires when it is bright outside while lights draw power."""

    schema = schema("LuminosityRule", luminosity_uri="uri*", active_power_uri="uri*",
                    lux_threshold="number*", power_threshold="number*")

    def condition(self, cache, now):
        lux = cache.value(self.fields["luminosity_uri"])
        power = cache.value(self.fields["active_power_uri"])
        return lux > self.fields["lux_threshold"] and power > self.fields["power_threshold"]


class RandomRule(Rule):
    """Triggers with probability ``probability``; used by the benchmark graphs.

    The generator is seeded from ``seed`` when present, otherwise from the rid,
    so runs are reproducible.
    """

    schema = schema("RandomRule", probability="number*", seed="integer")

    def setup(self):
        p = self.fields.get("probability")
        seed = self.fields.get("seed", zlib.crc32(self.rid.encode()))
        self.rng = random.Random(seed)
        if not 0.0 <= p <= 1.0:
            return ["probability must be within [0, 1]"]
        return []

    def condition(self, cache, now):
        return self.rng.random() < self.fields["probability"]


BUILTIN_RULES = (ComfortIndex, PowerFactorRule, LuminosityRule, RandomRule)
