"""Desk-scale surrogate network, inflow template, and tuning-case mappings.

The two-outlet bifurcation network uses published nominal RCR values for
its outlets; the vessel segments and the inflow template are sized so the
nominal configuration lands near 120/80 mmHg with a 42/58 flow split.
Case mappings translate low-dimensional boundary-condition vectors into
per-outlet (rp, c, rd) triples:

* ``rc``    -- total resistance and total capacitance (2 parameters),
* ``rcr4``  -- per-branch totals with a fixed proximal/distal ratio (4),
* ``rcr6``  -- full proximal/distal/capacitance per branch (6).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuit import build_network, stenosis_from_severity
from .inflow import fit_fourier, pulse_waveform

# nominal outlet boundary conditions (cgs)
NOMINAL_RCR6 = {
    "left": {"rp": 281.2, "c": 1.775e-4, "rd": 4308.0},
    "right": {"rp": 233.2, "c": 3.161e-4, "rd": 3126.0},
}
NOMINAL_RCR4 = {
    "left": {"r_tot": 4399.0, "c": 3.678e-4},
    "right": {"r_tot": 3228.0, "c": 5.949e-4},
}
PROX_DIST_RATIO = 8.84e-2
NOMINAL_R_TOT = 1861.0
NOMINAL_C_TOT = 9.61e-4

# desk vessel segments (calibrated together with the inflow template so the
# nominal outlets land near 120/80 mmHg; the aortic compliance dominates pulse
# smoothing, which keeps the outlet capacitance weakly identified from
# pressure targets alone)
DESK_VESSELS = {
    "aorta": {"r": 80.0, "c": 6.0e-4, "l": 0.0},
    "left_iliac": {"r": 50.0, "c": 6.0e-5, "l": 0.0},
    "right_iliac": {"r": 50.0, "c": 6.0e-5, "l": 0.0},
}

# desk inflow template
DESK_PERIOD = 1.0
DESK_MEAN_FLOW = 62.0
DESK_PULSATILITY = 2.8

STENOSIS_SITES = {
    "A": ("left_iliac", 0), "B": ("left_iliac", 0), "C": ("left_iliac", 0),
    "D": ("right_iliac", 0), "E": ("right_iliac", 0), "F": ("right_iliac", 0),
}
STENOSIS_AREA_REF = 1.0  # cm^2, iliac lumen reference


def desk_network(stenosis_site=None, severity=0.0):
    """Aorto-iliac surrogate; optionally carries one stenosis at a tagged site."""
    branches = [
        {"name": "aorta", "parent": None, "segments": [DESK_VESSELS["aorta"]]},
        {"name": "left_iliac", "parent": "aorta",
         "segments": [DESK_VESSELS["left_iliac"]],
         "outlet": dict(NOMINAL_RCR6["left"], p_ref=0.0)},
        {"name": "right_iliac", "parent": "aorta",
         "segments": [DESK_VESSELS["right_iliac"]],
         "outlet": dict(NOMINAL_RCR6["right"], p_ref=0.0)},
    ]
    if stenosis_site is not None:
        if stenosis_site not in STENOSIS_SITES:
            raise ValueError(f"unknown stenosis site {stenosis_site!r}, expected A..F")
        branch, seg = STENOSIS_SITES[stenosis_site]
        sten = stenosis_from_severity(severity, STENOSIS_AREA_REF)
        for spec in branches:
            if spec["name"] == branch:
                spec["stenosis"] = {"r_lin": sten.r_lin, "s_quad": sten.s_quad,
                                    "site": stenosis_site, "segment": seg}
    return build_network({"name": "aorto_iliac_desk", "branches": branches})


_DESK_INFLOW = None


def desk_inflow():
    """Fitted Fourier representation of the desk pulse template (cached)."""
    global _DESK_INFLOW
    if _DESK_INFLOW is None:
        t = np.linspace(0.0, DESK_PERIOD, 512, endpoint=False)
        q = pulse_waveform(t, DESK_PERIOD, DESK_MEAN_FLOW, pulsatility=DESK_PULSATILITY)
        _DESK_INFLOW = fit_fourier(t, q, DESK_PERIOD)
    return _DESK_INFLOW


# --- case mappings ---------------------------------------------------------

def _split_fraction():
    rl = NOMINAL_RCR4["left"]["r_tot"]
    rr = NOMINAL_RCR4["right"]["r_tot"]
    f_left = (1.0 / rl) / (1.0 / rl + 1.0 / rr)
    return f_left, 1.0 - f_left


def _c_fraction():
    cl = NOMINAL_RCR4["left"]["c"]
    cr = NOMINAL_RCR4["right"]["c"]
    return cl / (cl + cr), cr / (cl + cr)


def _rcr_from_totals(r_tot, c, ratio=PROX_DIST_RATIO):
    rp = r_tot * ratio / (1.0 + ratio)
    rd = r_tot / (1.0 + ratio)
    return rp, c, rd


@dataclass(frozen=True)
class CaseSpec:
    """Mapping from a boundary-condition vector to per-outlet RCR triples."""

    name: str
    dim: int
    param_names: tuple
    units: tuple
    nominal: np.ndarray
    target_names: tuple

    def to_rcr(self, x):
        """(n, dim) parameter rows -> (n, 2, 3) outlet [rp, c, rd] triples."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise ValueError(f"case {self.name!r} expects {self.dim} columns, got {x.shape[1]}")
        n = x.shape[0]
        out = np.empty((n, 2, 3))
        if self.name == "rc":
            f_left, f_right = _split_fraction()
            cf_left, cf_right = _c_fraction()
            for col, (f, cf) in enumerate([(f_left, cf_left), (f_right, cf_right)]):
                rp, c, rd = _rcr_from_totals(x[:, 0] / f, x[:, 1] * cf)
                out[:, col, 0], out[:, col, 1], out[:, col, 2] = rp, c, rd
        elif self.name == "rcr4":
            for col, base in enumerate([0, 2]):
                rp, c, rd = _rcr_from_totals(x[:, base], x[:, base + 1])
                out[:, col, 0], out[:, col, 1], out[:, col, 2] = rp, c, rd
        elif self.name == "rcr6":
            # ordering: rp_left, rd_left, c_left, rp_right, rd_right, c_right
            out[:, 0, 0], out[:, 0, 2], out[:, 0, 1] = x[:, 0], x[:, 1], x[:, 2]
            out[:, 1, 0], out[:, 1, 2], out[:, 1, 1] = x[:, 3], x[:, 4], x[:, 5]
        else:
            raise ValueError(f"unknown case {self.name!r}")
        return out


CASES = {
    "rc": CaseSpec(
        name="rc", dim=2,
        param_names=("R_tot", "C_tot"),
        units=("dyn.s/cm5", "cm5/dyn"),
        nominal=np.array([NOMINAL_R_TOT, NOMINAL_C_TOT]),
        target_names=("P_dia", "P_sys"),
    ),
    "rcr4": CaseSpec(
        name="rcr4", dim=4,
        param_names=("R_tot_left", "C_left", "R_tot_right", "C_right"),
        units=("dyn.s/cm5", "cm5/dyn", "dyn.s/cm5", "cm5/dyn"),
        nominal=np.array([
            NOMINAL_RCR4["left"]["r_tot"], NOMINAL_RCR4["left"]["c"],
            NOMINAL_RCR4["right"]["r_tot"], NOMINAL_RCR4["right"]["c"],
        ]),
        target_names=("P_dia", "P_sys", "Q_mean_left", "Q_mean_right"),
    ),
    "rcr6": CaseSpec(
        name="rcr6", dim=6,
        param_names=("Rp_left", "Rd_left", "C_left", "Rp_right", "Rd_right", "C_right"),
        units=("dyn.s/cm5", "dyn.s/cm5", "cm5/dyn",
               "dyn.s/cm5", "dyn.s/cm5", "cm5/dyn"),
        nominal=np.array([
            NOMINAL_RCR6["left"]["rp"], NOMINAL_RCR6["left"]["rd"], NOMINAL_RCR6["left"]["c"],
            NOMINAL_RCR6["right"]["rp"], NOMINAL_RCR6["right"]["rd"], NOMINAL_RCR6["right"]["c"],
        ]),
        target_names=("P_dia", "P_sys", "Q_mean_left", "Q_mean_right"),
    ),
}

# default relative noise per clinical target column
DEFAULT_NOISE = {
    "P_dia": 0.05, "P_sys": 0.05,
    "Q_mean_left": 0.10, "Q_mean_right": 0.10,
    "flow_split_left": 0.10,
}

# global physical bounds for the six-parameter tuner
GLOBAL_BOUNDS_RCR6 = np.array([
    [50.0, 1500.0],    # rp_left
    [800.0, 2.0e4],    # rd_left
    [1.0e-5, 1.0e-2],  # c_left
    [50.0, 1500.0],    # rp_right
    [800.0, 2.0e4],    # rd_right
    [1.0e-5, 1.0e-2],  # c_right
])
