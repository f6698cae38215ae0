"""Learnable physical parameters in raw (unconstrained) space.

Every parameter is stored raw and squashed into its physical range on
use, so one learning rate serves all of them.  Raw 0 lands mid-range,
which is the documented default initialization.
"""

import math

from . import autodiff as ad
from .errors import UsageError

# name -> (lo, hi, activation)
RANGES = {
    # robot (non-contact) group
    "rod_mass": (0.01, 20.0, "sigmoid"),
    "cable_stiffness": (0.0, 5000.0, "sigmoid"),
    "cable_damping": (0.0, 1000.0, "sigmoid"),
    "motor_speed": (0.0, 0.01, "sigmoid"),
    "motor_scale": (0.0, 0.01, "sigmoid"),
    # contact group
    "contact_bias": (0.0, 1.0, "sigmoid"),
    "restitution": (-1.0, 1.0, "tanh"),
    "slide_damping": (0.0, 1.0, "sigmoid"),
    "friction": (0.0, 1.0, "sigmoid"),
    "twist_damping": (0.0, 0.01, "sigmoid"),
}

NONCONTACT_KEYS = ("rod_mass", "cable_stiffness", "cable_damping",
                   "motor_speed", "motor_scale")
CONTACT_KEYS = ("contact_bias", "restitution", "slide_damping",
                "friction", "twist_damping")
ALL_KEYS = NONCONTACT_KEYS + CONTACT_KEYS


def default_raw():
    """Raw values whose squashed defaults sit mid-range (bias 0.5,
    restitution 0, twist damping 0.005, ...)."""
    return {k: 0.0 for k in ALL_KEYS}


def squash_param(name, raw):
    lo, hi, kind = RANGES[name]
    return ad.squash(raw, (lo, hi), kind)


def squash_all(raw_params):
    """Squash a dict of raw values (floats or tape leaves)."""
    return {k: squash_param(k, v) for k, v in raw_params.items()}


def raw_for(name, value):
    """Inverse squash: the raw number that maps to ``value``."""
    lo, hi, kind = RANGES[name]
    if not lo < value < hi:
        raise UsageError(f"{name}={value} outside its open range ({lo},{hi})")
    if kind == "sigmoid":
        u = (value - lo) / (hi - lo)
        return math.log(u / (1.0 - u))
    u = (value - 0.5 * (lo + hi)) / (0.5 * (hi - lo))
    return math.atanh(u)
