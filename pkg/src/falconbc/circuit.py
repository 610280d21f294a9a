"""Zero-dimensional lumped-parameter blood flow solver.

A network is a tree of branches. Each branch holds an ordered chain of
vessel segments (series resistance and optional inertance feeding a
compliance node), at most one nonlinear stenosis element in series with
one of its segments, and, on leaves, an RCR outlet boundary. A periodic
Fourier inflow drives the root.

States are the compliance-node pressures, the flows through inductive
segments, and the RCR capacitor pressures. Integration is explicit RK4
with a fixed step, a stability guard based on the fastest node time
constant, and a cycle-to-cycle periodicity check on the inlet pressure.
The solver accepts a batch of parameter sets (outlet RCR values,
stenosis coefficients, inflow features) and integrates all rows
simultaneously, which is how dataset generation and optimizer loops
stay fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyTrace,
    InvalidTopology,
    NonConvergent,
    NumericalBlowup,
    UnstableTimestep,
)
from .inflow import (
    N_HARMONICS,
    FourierInflow,
    eval_fourier_deriv,
    eval_fourier_packed,
    pack_features,
    unpack_features,
)

MMHG = 1333.22  # dyn/cm^2 per mmHg

# default expansion-loss closure for stenosis coefficients
STENOSIS_K = 1.52
BLOOD_DENSITY = 1.06  # g/cm^3


@dataclass
class VesselElement:
    """Series resistance/inertance into a compliance node (cgs units)."""

    r: float
    c: float
    l: float = 0.0


@dataclass
class StenosisElement:
    """Pressure drop r_lin*q + s_quad*q*|q| in series with a segment."""

    r_lin: float = 0.0
    s_quad: float = 0.0


@dataclass
class RcrBoundary:
    """Three-element outlet: proximal R, capacitor, distal R to a reference pressure."""

    rp: float
    c: float
    rd: float
    p_ref: float = 0.0


@dataclass
class Branch:
    name: str
    segments: list
    parent: str | None = None
    outlet: RcrBoundary | None = None
    stenosis: StenosisElement | None = None
    stenosis_site: str | None = None
    stenosis_segment: int = 0


def stenosis_dp(q, sten):
    """Pressure drop across a stenosis element (odd in q)."""
    q = np.asarray(q, dtype=float)
    dp = sten.r_lin * q + sten.s_quad * q * np.abs(q)
    return float(dp) if dp.ndim == 0 else dp


def stenosis_from_severity(severity, area_ref, k=STENOSIS_K, rho=BLOOD_DENSITY, r_lin=0.0):
    """Expansion-loss closure: quadratic coefficient from an area reduction.

    ``severity`` is the fractional area reduction in [0, 1); the throat
    area is area_ref*(1 - severity).
    """
    if not 0.0 <= severity < 1.0:
        raise ValueError(f"severity must lie in [0, 1), got {severity}")
    if severity == 0.0:
        return StenosisElement(r_lin=r_lin, s_quad=0.0)
    a_s = area_ref * (1.0 - severity)
    s_quad = k * rho / (2.0 * a_s ** 2) * (area_ref / a_s - 1.0) ** 2
    return StenosisElement(r_lin=r_lin, s_quad=s_quad)


@dataclass
class SimSettings:
    dt: float = 2e-3
    n_cycles: int = 10
    periodicity_tol: float = 1e-4
    strict: bool = True
    blowup_guard: float = 1e12
    check_stability: bool = True


@dataclass
class TimeTraces:
    """Final-cycle traces on a uniform grid spanning one period (inclusive ends)."""

    t: np.ndarray
    p_in: np.ndarray
    q_out: np.ndarray  # (n_out, n+1)
    p_out: np.ndarray  # (n_out, n+1)
    outlet_names: list
    converged: bool = True
    residual: float = 0.0
    cycles_run: int = 0
    final_state: np.ndarray = None


@dataclass
class BatchTraces:
    """Row-per-parameter-set traces; grids may differ by row period."""

    t: np.ndarray  # (b, n+1)
    p_in: np.ndarray  # (b, n+1)
    q_out: np.ndarray  # (b, n_out, n+1)
    p_out: np.ndarray
    outlet_names: list
    converged: np.ndarray = None
    residual: np.ndarray = None
    cycles_run: int = 0
    final_state: np.ndarray = None

    def row(self, i):
        return TimeTraces(
            t=self.t[i], p_in=self.p_in[i], q_out=self.q_out[i], p_out=self.p_out[i],
            outlet_names=self.outlet_names, converged=bool(self.converged[i]),
            residual=float(self.residual[i]), cycles_run=self.cycles_run,
            final_state=self.final_state[i],
        )


@dataclass
class ClinicalTargets:
    """Cycle summary: pressures in mmHg, flows in cm^3/s, split in percent."""

    p_dia: float
    p_sys: float
    q_mean: np.ndarray
    flow_split_left: float


@dataclass
class CircuitNetwork:
    """Validated tree of branches; root first, parents before children."""

    branches: list
    outlet_names: list = field(default_factory=list)
    name: str = "network"

    def branch(self, name):
        for b in self.branches:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def stenosis_branch(self):
        for b in self.branches:
            if b.stenosis is not None:
                return b
        return None


def _positive(value, what):
    if not (np.isfinite(value) and value > 0):
        raise InvalidTopology(f"{what} must be positive and finite, got {value}")
    return float(value)


def _nonnegative(value, what):
    if not (np.isfinite(value) and value >= 0):
        raise InvalidTopology(f"{what} must be nonnegative and finite, got {value}")
    return float(value)


def build_network(config):
    """Build and validate a network from a config dict.

    Config layout::

        {"name": ..., "branches": [
            {"name": "aorta", "parent": null,
             "segments": [{"r": 80.0, "c": 3e-4, "l": 0.0}]},
            {"name": "left_iliac", "parent": "aorta",
             "segments": [...],
             "outlet": {"rp": 281.2, "c": 1.775e-4, "rd": 4308.0, "p_ref": 0.0},
             "stenosis": {"r_lin": 0.0, "s_quad": 46.9, "site": "B", "segment": 0}},
            ...]}

    Branch order must list parents before children. Leaves carry outlets.
    """
    if not isinstance(config, dict) or "branches" not in config:
        raise InvalidTopology("config must be a dict with a 'branches' list")
    raw = config["branches"]
    if not raw:
        raise InvalidTopology("network needs at least one branch")
    names = [b.get("name") for b in raw]
    if len(set(names)) != len(names) or any(not n for n in names):
        raise InvalidTopology(f"branch names must be unique and nonempty, got {names}")
    branches = []
    seen = set()
    has_children = set()
    for spec in raw:
        parent = spec.get("parent")
        if parent is None:
            if branches:
                raise InvalidTopology("exactly one root branch (parent null) allowed, listed first")
        else:
            if parent not in seen:
                raise InvalidTopology(
                    f"branch {spec['name']!r}: parent {parent!r} must be declared earlier "
                    "(cycles and forward references are invalid)"
                )
            has_children.add(parent)
        segments = []
        for k, s in enumerate(spec.get("segments", [])):
            segments.append(VesselElement(
                r=_positive(s.get("r", 0.0), f"{spec['name']}.segments[{k}].r"),
                c=_positive(s.get("c", 0.0), f"{spec['name']}.segments[{k}].c"),
                l=_nonnegative(s.get("l", 0.0), f"{spec['name']}.segments[{k}].l"),
            ))
        outlet = None
        if "outlet" in spec:
            o = spec["outlet"]
            outlet = RcrBoundary(
                rp=_positive(o.get("rp", 0.0), f"{spec['name']}.outlet.rp"),
                c=_positive(o.get("c", 0.0), f"{spec['name']}.outlet.c"),
                rd=_positive(o.get("rd", 0.0), f"{spec['name']}.outlet.rd"),
                p_ref=float(o.get("p_ref", 0.0)),
            )
        stenosis = None
        site = None
        sten_seg = 0
        if "stenosis" in spec:
            s = spec["stenosis"]
            stenosis = StenosisElement(
                r_lin=_nonnegative(s.get("r_lin", 0.0), f"{spec['name']}.stenosis.r_lin"),
                s_quad=_nonnegative(s.get("s_quad", 0.0), f"{spec['name']}.stenosis.s_quad"),
            )
            site = s.get("site")
            sten_seg = int(s.get("segment", 0))
            if not segments:
                raise InvalidTopology(f"branch {spec['name']!r}: stenosis needs a vessel segment")
            if not 0 <= sten_seg < len(segments):
                raise InvalidTopology(
                    f"branch {spec['name']!r}: stenosis segment index {sten_seg} out of range"
                )
        branches.append(Branch(
            name=spec["name"], segments=segments, parent=parent, outlet=outlet,
            stenosis=stenosis, stenosis_site=site, stenosis_segment=sten_seg,
        ))
        seen.add(spec["name"])
    if branches[0].parent is not None:
        raise InvalidTopology("first branch must be the root (parent null)")
    outlet_names = []
    for b in branches:
        is_leaf = b.name not in has_children
        if is_leaf and b.outlet is None:
            raise InvalidTopology(f"leaf branch {b.name!r} is missing its outlet boundary")
        if not is_leaf and b.outlet is not None:
            raise InvalidTopology(f"interior branch {b.name!r} must not carry an outlet")
        if not is_leaf and not b.segments:
            raise InvalidTopology(f"branch {b.name!r} has children and needs >= 1 segment")
        if is_leaf:
            outlet_names.append(b.name)
    if not outlet_names:
        raise InvalidTopology("network needs at least one outlet")
    more_sten = [b.name for b in branches if b.stenosis is not None]
    if len(more_sten) > 1:
        raise InvalidTopology(f"at most one stenosis per network supported, got {more_sten}")
    return CircuitNetwork(branches=branches, outlet_names=outlet_names,
                          name=config.get("name", "network"))


# --- compiled representation ----------------------------------------------

class _Compiled:
    """Flat arrays for the RHS: segments in topological order, root chain first."""

    def __init__(self, net):
        seg_branch = []
        self.seg_r, self.seg_c, self.seg_l = [], [], []
        self.sten_rlin, self.sten_squad = [], []
        self.up_node = []
        self.branch_first_seg = {}
        self.branch_last_node = {}
        self.sten_seg_idx = None
        node_of_branch_end = {}
        for b in net.branches:
            up = -1 if b.parent is None else node_of_branch_end[b.parent]
            for k, seg in enumerate(b.segments):
                idx = len(self.seg_r)
                if k == 0:
                    self.branch_first_seg[b.name] = idx
                seg_branch.append(b.name)
                self.seg_r.append(seg.r)
                self.seg_c.append(seg.c)
                self.seg_l.append(seg.l)
                if b.stenosis is not None and k == b.stenosis_segment:
                    self.sten_rlin.append(b.stenosis.r_lin)
                    self.sten_squad.append(b.stenosis.s_quad)
                    self.sten_seg_idx = idx
                else:
                    self.sten_rlin.append(0.0)
                    self.sten_squad.append(0.0)
                self.up_node.append(up)
                up = idx
            node_of_branch_end[b.name] = up
            self.branch_last_node[b.name] = up
        self.n_seg = len(self.seg_r)
        self.seg_r = np.asarray(self.seg_r)
        self.seg_c = np.asarray(self.seg_c)
        self.seg_l = np.asarray(self.seg_l)
        self.sten_rlin = np.asarray(self.sten_rlin)
        self.sten_squad = np.asarray(self.sten_squad)
        self.up_node = np.asarray(self.up_node, dtype=int)
        # inductive segments (root-first prescribed-flow segment excluded)
        self.ind_segs = [i for i in range(self.n_seg)
                         if self.seg_l[i] > 0 and self.up_node[i] >= 0]
        self.ind_slot = {i: k for k, i in enumerate(self.ind_segs)}
        self.n_ind = len(self.ind_segs)
        # outlets
        self.out_leaf_node = []
        self.rcr_rp, self.rcr_c, self.rcr_rd, self.rcr_pref = [], [], [], []
        self.out_branch = []
        for name in net.outlet_names:
            b = net.branch(name)
            self.out_leaf_node.append(self.branch_last_node[name])
            self.rcr_rp.append(b.outlet.rp)
            self.rcr_c.append(b.outlet.c)
            self.rcr_rd.append(b.outlet.rd)
            self.rcr_pref.append(b.outlet.p_ref)
            self.out_branch.append(name)
        self.n_out = len(self.out_leaf_node)
        self.out_leaf_node = np.asarray(self.out_leaf_node, dtype=int)
        self.rcr_rp = np.asarray(self.rcr_rp)
        self.rcr_c = np.asarray(self.rcr_c)
        self.rcr_rd = np.asarray(self.rcr_rd)
        self.rcr_pref = np.asarray(self.rcr_pref)
        # downstream bookkeeping per node
        self.child_segs = [[] for _ in range(self.n_seg)]
        for i in range(self.n_seg):
            if self.up_node[i] >= 0:
                self.child_segs[self.up_node[i]].append(i)
        self.node_outlets = [[] for _ in range(self.n_seg)]
        for o, node in enumerate(self.out_leaf_node):
            if node >= 0:
                self.node_outlets[node].append(o)
        self.root_has_segments = self.n_seg > 0
        if not self.root_has_segments and self.n_out != 1:
            raise InvalidTopology("a network without vessel segments must have exactly one outlet")
        self.branches = net.branches
        self.seg_branch = seg_branch
        self.n_states = self.n_seg + self.n_ind + self.n_out
        # vectorized-RHS bookkeeping
        self.res_segs = np.array(
            [i for i in range(self.n_seg)
             if self.up_node[i] >= 0 and i not in self.ind_slot], dtype=int)
        self.res_up = self.up_node[self.res_segs]
        self.ind_segs_arr = np.asarray(self.ind_segs, dtype=int)
        self.ind_up = self.up_node[self.ind_segs_arr] if self.n_ind else \
            np.zeros(0, dtype=int)
        # child_mat[j, i] = 1 when segment j drains node i; out_mat[o, i] likewise
        self.child_mat = np.zeros((self.n_seg, self.n_seg))
        for j in range(self.n_seg):
            if self.up_node[j] >= 0:
                self.child_mat[j, self.up_node[j]] = 1.0
        self.out_mat = np.zeros((self.n_out, self.n_seg))
        for o, node in enumerate(self.out_leaf_node):
            if node >= 0:
                self.out_mat[o, node] = 1.0


class _Params:
    """Per-row parameter arrays (batch dim b; b=1 for a single simulation)."""

    def __init__(self, comp, b, rcr=None, stenosis=None):
        def tile(a):
            return np.broadcast_to(a, (b,) + a.shape).copy()

        self.seg_r = tile(comp.seg_r)
        self.seg_c = tile(comp.seg_c)
        self.seg_l = tile(comp.seg_l)
        self.sten_rlin = tile(comp.sten_rlin)
        self.sten_squad = tile(comp.sten_squad)
        self.rp = tile(comp.rcr_rp)
        self.c_rcr = tile(comp.rcr_c)
        self.rd = tile(comp.rcr_rd)
        self.p_ref = tile(comp.rcr_pref)
        if rcr is not None:
            rcr = np.asarray(rcr, dtype=float)
            if rcr.shape != (b, comp.n_out, 3):
                raise ValueError(f"rcr overrides must have shape ({b}, {comp.n_out}, 3)")
            if np.any(rcr <= 0):
                raise InvalidTopology("rcr overrides must be positive")
            self.rp = rcr[:, :, 0].copy()
            self.c_rcr = rcr[:, :, 1].copy()
            self.rd = rcr[:, :, 2].copy()
        if stenosis is not None:
            if comp.sten_seg_idx is None:
                raise InvalidTopology("network has no stenosis element to override")
            sten = np.asarray(stenosis, dtype=float)
            if sten.shape != (b, 2):
                raise ValueError(f"stenosis overrides must have shape ({b}, 2)")
            self.sten_rlin[:, comp.sten_seg_idx] = sten[:, 0]
            self.sten_squad[:, comp.sten_seg_idx] = sten[:, 1]
        # series linear resistance per segment (vessel + stenosis linear part)
        self.r_lin_tot = self.seg_r + self.sten_rlin


def _solve_series(dp, r, s):
    """Flow through a series linear+quadratic resistor from its pressure drop.

    Uses the cancellation-free root 2|dp| / (r + sqrt(r^2 + 4 s |dp|)),
    which reduces to dp/r when s = 0.
    """
    mag = np.abs(dp)
    return np.sign(dp) * 2.0 * mag / (r + np.sqrt(r * r + 4.0 * s * mag))


def stability_limit(net, rcr=None, stenosis=None):
    """Smallest node time constant (s); explicit RK4 needs dt below this."""
    comp = _Compiled(net)
    b = 1
    if rcr is not None:
        rcr = np.asarray(rcr, dtype=float)
        if rcr.ndim == 2:
            rcr = rcr[None]
        b = rcr.shape[0]
    if stenosis is not None:
        stenosis = np.asarray(stenosis, dtype=float)
        if stenosis.ndim == 1:
            stenosis = stenosis[None]
        b = max(b, stenosis.shape[0])
        stenosis = np.broadcast_to(stenosis, (b, 2))
    if rcr is not None:
        rcr = np.broadcast_to(rcr, (b, comp.n_out, 3))
    par = _Params(comp, b, rcr=rcr, stenosis=stenosis)
    return float(_tau_min(comp, par))


def _tau_rows(comp, par):
    """Per-row smallest node time constant (b,)."""
    taus = []
    for i in range(comp.n_seg):
        g = 1.0 / par.r_lin_tot[:, i]
        for j in comp.child_segs[i]:
            g = g + 1.0 / par.r_lin_tot[:, j]
        for o in comp.node_outlets[i]:
            g = g + 1.0 / par.rp[:, o]
        taus.append(par.seg_c[:, i] / g)
    for o in range(comp.n_out):
        g = 1.0 / par.rp[:, o] + 1.0 / par.rd[:, o]
        taus.append(par.c_rcr[:, o] / g)
    for i in comp.ind_segs:
        taus.append(par.seg_l[:, i] / par.r_lin_tot[:, i])
    return np.min(np.stack(taus), axis=0)


def _tau_min(comp, par):
    return np.min(_tau_rows(comp, par))


def _dc_state(comp, par, q_mean):
    """Warm start: linear resistive DC solution at the mean inflow."""
    b = q_mean.shape[0]
    branch_names = [br.name for br in comp.branches]
    children = {n: [] for n in branch_names}
    for br in comp.branches:
        if br.parent is not None:
            children[br.parent].append(br.name)
    seg_ids = {n: [] for n in branch_names}
    for i, n in enumerate(comp.seg_branch):
        seg_ids[n].append(i)
    out_idx = {n: o for o, n in enumerate(comp.out_branch)}

    r_eff = {}
    for br in reversed(comp.branches):
        own = np.zeros(b)
        for i in seg_ids[br.name]:
            own = own + par.r_lin_tot[:, i]
        if br.name in out_idx:
            o = out_idx[br.name]
            down = par.rp[:, o] + par.rd[:, o]
        else:
            inv = np.zeros(b)
            for ch in children[br.name]:
                inv = inv + 1.0 / r_eff[ch]
            down = 1.0 / inv
        r_eff[br.name] = own + down

    flow = {branch_names[0]: q_mean.copy()}
    for br in comp.branches:
        kids = children[br.name]
        if not kids:
            continue
        inv = np.stack([1.0 / r_eff[ch] for ch in kids])
        share = inv / inv.sum(axis=0)
        for k, ch in enumerate(kids):
            flow[ch] = flow[br.name] * share[k]

    p_ref_mean = par.p_ref.mean(axis=1)
    state = np.zeros((b, comp.n_states))
    p_up = p_ref_mean + q_mean * r_eff[branch_names[0]]
    node_p = np.zeros((b, comp.n_seg))
    p_at_branch_inlet = {branch_names[0]: p_up}
    for br in comp.branches:
        p = p_at_branch_inlet[br.name]
        q = flow[br.name]
        for i in seg_ids[br.name]:
            p = p - par.r_lin_tot[:, i] * q
            node_p[:, i] = p
        for ch in children[br.name]:
            p_at_branch_inlet[ch] = p
        if br.name in out_idx:
            o = out_idx[br.name]
            state[:, comp.n_seg + comp.n_ind + o] = par.p_ref[:, o] + par.rd[:, o] * flow[br.name]
    state[:, :comp.n_seg] = node_p
    for slot, i in enumerate(comp.ind_segs):
        state[:, comp.n_seg + slot] = flow[comp.seg_branch[i]]
    return state


def _harmonic_state(comp, par, feats):
    """Periodic steady state of the linearized network at t = 0.

    Solves the network per Fourier harmonic with complex impedances
    (quadratic stenosis terms ignored), so a linear network starts on its
    periodic orbit and only nonlinear corrections remain transient.
    """
    b = feats.shape[0]
    state = _dc_state(comp, par, feats[:, 0])
    branch_names = [br.name for br in comp.branches]
    children = {n: [] for n in branch_names}
    for br in comp.branches:
        if br.parent is not None:
            children[br.parent].append(br.name)
    seg_ids = {n: [] for n in branch_names}
    for i, n in enumerate(comp.seg_branch):
        seg_ids[n].append(i)
    out_idx = {n: o for o, n in enumerate(comp.out_branch)}

    for n in range(1, N_HARMONICS + 1):
        omega = 2.0 * np.pi * n / feats[:, -1]
        q_root = feats[:, n] - 1j * feats[:, N_HARMONICS + n]
        if not np.any(q_root):
            continue
        # bottom-up sweep: per node, the shunted impedance and what lies past it
        z_at_node = {}
        z_down = {}
        z_in = {}  # branch -> impedance looking into its first series element
        for br in reversed(comp.branches):
            if br.name in out_idx:
                o = out_idx[br.name]
                z = par.rp[:, o] + par.rd[:, o] / (
                    1.0 + 1j * omega * par.rd[:, o] * par.c_rcr[:, o])
            else:
                inv = np.zeros(b, dtype=complex)
                for ch in children[br.name]:
                    inv = inv + 1.0 / z_in[ch]
                z = 1.0 / inv
            for i in reversed(seg_ids[br.name]):
                z_down[i] = z
                z_node = 1.0 / (1j * omega * par.seg_c[:, i] + 1.0 / z)
                z_at_node[i] = z_node
                z = par.r_lin_tot[:, i] + 1j * omega * par.seg_l[:, i] + z_node
            z_in[br.name] = z
        # top-down sweep: series currents and node pressure phasors
        q_in = {branch_names[0]: q_root.astype(complex)}
        for br in comp.branches:
            q = q_in[br.name]
            p_node = None
            for i in seg_ids[br.name]:
                if i in comp.ind_slot:
                    state[:, comp.n_seg + comp.ind_slot[i]] += q.real
                p_node = q * z_at_node[i]
                state[:, i] += p_node.real
                q = p_node / z_down[i]
            if br.name in out_idx:
                o = out_idx[br.name]
                p_rcr = q * par.rd[:, o] / (1.0 + 1j * omega * par.rd[:, o] * par.c_rcr[:, o])
                state[:, comp.n_seg + comp.n_ind + o] += p_rcr.real
            else:
                for ch in children[br.name]:
                    src = p_node if p_node is not None else None
                    q_in[ch] = src / z_in[ch]
    return state


def _rhs(comp, par, y, q_now):
    b = y.shape[0]
    P = y[:, :comp.n_seg]
    Qi = y[:, comp.n_seg:comp.n_seg + comp.n_ind]
    Pr = y[:, comp.n_seg + comp.n_ind:]
    Q = np.empty((b, comp.n_seg))
    if comp.root_has_segments:
        Q[:, 0] = q_now
    if comp.res_segs.size:
        cols = comp.res_segs
        Q[:, cols] = _solve_series(P[:, comp.res_up] - P[:, cols],
                                   par.r_lin_tot[:, cols], par.sten_squad[:, cols])
    if comp.n_ind:
        Q[:, comp.ind_segs_arr] = Qi
    if comp.root_has_segments:
        Qo = (P[:, comp.out_leaf_node] - Pr) / par.rp
    else:
        Qo = np.asarray(q_now, dtype=float).reshape(b, 1)
    dy = np.empty_like(y)
    dy[:, :comp.n_seg] = (Q - Q @ comp.child_mat - Qo @ comp.out_mat) / par.seg_c
    if comp.n_ind:
        cols = comp.ind_segs_arr
        drive = (P[:, comp.ind_up] - P[:, cols]
                 - par.r_lin_tot[:, cols] * Qi
                 - par.sten_squad[:, cols] * Qi * np.abs(Qi))
        dy[:, comp.n_seg:comp.n_seg + comp.n_ind] = drive / par.seg_l[:, cols]
    dy[:, comp.n_seg + comp.n_ind:] = (Qo - (Pr - par.p_ref) / par.rd) / par.c_rcr
    return dy


def _integrate_cycle(comp, par, y0, q_half, dt):
    """RK4 over one cycle; q_half holds inflow at half-step resolution (2n+1,b)."""
    n_steps = (q_half.shape[0] - 1) // 2
    hist = np.empty((y0.shape[0], n_steps + 1, y0.shape[1]))
    hist[:, 0] = y0
    y = y0
    h = dt[:, None]
    for k in range(n_steps):
        q0, qh, q1 = q_half[2 * k], q_half[2 * k + 1], q_half[2 * k + 2]
        k1 = _rhs(comp, par, y, q0)
        k2 = _rhs(comp, par, y + 0.5 * h * k1, qh)
        k3 = _rhs(comp, par, y + 0.5 * h * k2, qh)
        k4 = _rhs(comp, par, y + h * k3, q1)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        hist[:, k + 1] = y
    return hist


def _traces_from_history(comp, par, hist, q_samples, dq_samples):
    """Inlet pressure and outlet flows/pressures at the sample points."""
    P = hist[:, :, :comp.n_seg]
    Pr = hist[:, :, comp.n_seg + comp.n_ind:]
    q = q_samples.T  # (b, n+1)
    if comp.root_has_segments:
        i = 0
        p_in = (P[:, :, i]
                + par.r_lin_tot[:, i:i + 1] * q
                + par.sten_squad[:, i:i + 1] * q * np.abs(q)
                + par.seg_l[:, i:i + 1] * dq_samples.T)
    else:
        p_in = Pr[:, :, 0] + par.rp[:, 0:1] * q
    b, npts = p_in.shape
    q_out = np.empty((b, comp.n_out, npts))
    p_out = np.empty((b, comp.n_out, npts))
    for o in range(comp.n_out):
        node = comp.out_leaf_node[o]
        if node < 0:
            q_out[:, o] = q
        else:
            q_out[:, o] = (P[:, :, node] - Pr[:, :, o]) / par.rp[:, o:o + 1]
        p_out[:, o] = Pr[:, :, o] + par.rp[:, o:o + 1] * q_out[:, o]
    return p_in, q_out, p_out


def simulate_batch(net, inflows, rcr=None, stenosis=None, settings=None,
                   initial_state=None):
    """Integrate the network for a batch of parameter rows.

    ``inflows`` is a FourierInflow (shared) or an (b, 20) array of packed
    features; ``rcr`` optionally overrides outlet values as (b, n_out, 3)
    [rp, c, rd]; ``stenosis`` overrides the stenosis element as (b, 2)
    [r_lin, s_quad]. Returns :class:`BatchTraces` for the final cycle.
    """
    settings = settings or SimSettings()
    comp = _Compiled(net)
    if isinstance(inflows, FourierInflow):
        feats = pack_features(inflows)[None, :]
    else:
        feats = np.asarray(inflows, dtype=float)
        if feats.ndim == 1:
            feats = feats[None, :]
    b = feats.shape[0]
    for arr in (rcr, stenosis):
        if arr is not None:
            b = max(b, np.asarray(arr).shape[0])
    if feats.shape[0] == 1 and b > 1:
        feats = np.broadcast_to(feats, (b, feats.shape[1]))
    if rcr is not None:
        rcr = np.broadcast_to(np.asarray(rcr, dtype=float), (b, comp.n_out, 3))
    if stenosis is not None:
        stenosis = np.broadcast_to(np.asarray(stenosis, dtype=float), (b, 2))
    par = _Params(comp, b, rcr=rcr, stenosis=stenosis)

    periods = feats[:, -1]
    if np.any(periods <= 0):
        raise ValueError("inflow periods must be positive")
    if settings.n_cycles < 2:
        raise ValueError("n_cycles must be >= 2")
    t_min = periods.min()
    if settings.dt >= t_min / 100.0:
        raise ValueError(
            f"dt={settings.dt} too coarse: needs dt < T/100 = {t_min / 100.0:.3g}"
        )
    n_steps = int(np.ceil(periods.max() / settings.dt))
    dt_rows = periods / n_steps
    if settings.check_stability:
        tau = _tau_min(comp, par)
        if dt_rows.max() > tau:
            raise UnstableTimestep(
                f"dt={dt_rows.max():.3g} exceeds stability estimate {tau:.3g}; "
                "reduce settings.dt"
            )

    phase = np.linspace(0.0, 1.0, 2 * n_steps + 1)
    q_half = eval_fourier_packed(feats, phase).T  # (2n+1, b)
    q_samples = q_half[::2]  # (n+1, b)
    if comp.root_has_segments and comp.seg_l[0] > 0:
        dq_samples = np.stack([
            eval_fourier_deriv(unpack_features(feats[i]), phase[::2] * periods[i])
            for i in range(b)
        ], axis=1)
    else:
        dq_samples = np.zeros_like(q_samples)

    if initial_state is None:
        y = _harmonic_state(comp, par, feats)
    else:
        y = np.array(initial_state, dtype=float)
        if y.ndim == 1:
            y = np.broadcast_to(y, (b, comp.n_states)).copy()

    prev_pin = None
    residual = np.full(b, np.inf)
    cycles = 0
    hist = None
    for cycle in range(settings.n_cycles):
        hist = _integrate_cycle(comp, par, y, q_half, dt_rows)
        y = hist[:, -1].copy()
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > settings.blowup_guard:
            raise NumericalBlowup(
                f"state magnitude exceeded guard {settings.blowup_guard:g} "
                f"in cycle {cycle + 1}"
            )
        p_in, q_out, p_out = _traces_from_history(comp, par, hist, q_samples, dq_samples)
        cycles = cycle + 1
        if prev_pin is not None:
            scale = np.max(np.abs(p_in), axis=1)
            scale = np.where(scale > 0, scale, 1.0)
            residual = np.max(np.abs(p_in - prev_pin), axis=1) / scale
            if np.all(residual < settings.periodicity_tol):
                break
        prev_pin = p_in
    converged = residual < settings.periodicity_tol
    if settings.strict and not np.all(converged):
        worst = float(residual.max())
        raise NonConvergent(
            f"periodicity tol {settings.periodicity_tol:g} unmet after "
            f"{cycles} cycles (worst residual {worst:.3g})"
        )
    t_grid = np.linspace(0.0, 1.0, n_steps + 1)[None, :] * periods[:, None]
    return BatchTraces(
        t=t_grid, p_in=p_in, q_out=q_out, p_out=p_out,
        outlet_names=list(net.outlet_names),
        converged=converged, residual=residual, cycles_run=cycles,
        final_state=y,
    )


def simulate(net, inflow, settings=None, initial_state=None):
    """Single-parameter-set simulation; returns final-cycle :class:`TimeTraces`."""
    batch = simulate_batch(net, inflow, settings=settings, initial_state=initial_state)
    return batch.row(0)


def summarize(traces):
    """Cycle summary statistics from final-cycle traces."""
    if traces.t is None or len(np.atleast_1d(traces.t)) == 0:
        raise EmptyTrace("traces contain no samples")
    p_in = np.asarray(traces.p_in, dtype=float)
    if p_in.size == 0:
        raise EmptyTrace("traces contain no samples")
    t = np.asarray(traces.t, dtype=float)
    period = t[-1] - t[0]
    q_mean = np.array([np.trapezoid(q, t) / period for q in traces.q_out])
    total = q_mean.sum()
    split = 100.0 * q_mean[0] / total if total != 0 else np.nan
    return ClinicalTargets(
        p_dia=float(p_in.min() / MMHG),
        p_sys=float(p_in.max() / MMHG),
        q_mean=q_mean,
        flow_split_left=float(split),
    )


def summarize_batch(batch):
    """Vectorized summaries: dict of arrays over the batch dimension."""
    t = batch.t
    period = t[:, -1] - t[:, 0]
    q_mean = np.trapezoid(batch.q_out, t[:, None, :], axis=2) / period[:, None]
    total = q_mean.sum(axis=1)
    return {
        "p_dia": batch.p_in.min(axis=1) / MMHG,
        "p_sys": batch.p_in.max(axis=1) / MMHG,
        "q_mean": q_mean,
        "flow_split_left": 100.0 * q_mean[:, 0] / total,
    }


def traces_to_csv(traces, path):
    """Write (t, p_in, q_out_i, p_out_i) columns."""
    header = ["t", "p_in"]
    cols = [traces.t, traces.p_in]
    for name, q, p in zip(traces.outlet_names, traces.q_out, traces.p_out):
        header += [f"q_out_{name}", f"p_out_{name}"]
        cols += [q, p]
    data = np.column_stack(cols)
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="")
