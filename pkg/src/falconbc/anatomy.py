"""Point-cloud shape embedding for stenosed bifurcation anatomies.

Clouds are normalized against a template bounding box, subsampled for
augmentation, and encoded by a shared pointwise feature network with
per-branch max pooling into a stenosis-location distribution (6 logits)
and a severity in [0, 1]. A pointwise decoder conditioned on multiscale
sinusoidal features of the current position and the 6-slot latent
deforms template points by Euler-integrating a predicted velocity field.
Training minimizes symmetric Chamfer distance plus severity and location
supervision, end to end.

A procedural generator supplies a desk-scale corpus: a tube bifurcation
with Gaussian radial necking at six axial stations (three per iliac
branch), severity given as fractional area reduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import nn
from .errors import (
    DegenerateTemplate,
    EmptyCloud,
    EmptyDataset,
    OutOfRange,
    TooFewPoints,
    UnlabeledPoints,
)

BRANCH_NAMES = ("aorta", "left_iliac", "right_iliac")
N_MODES = 6
SITES = ("A", "B", "C", "D", "E", "F")
# site -> (branch label, station along the branch axis)
SITE_PLACEMENT = {
    "A": (1, 0.30), "B": (1, 0.50), "C": (1, 0.70),
    "D": (2, 0.30), "E": (2, 0.50), "F": (2, 0.70),
}
NECK_WIDTH = 0.07  # Gaussian necking width in branch arclength units


@dataclass
class PointCloud:
    """N x 3 coordinates with optional per-point branch labels."""

    points: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise EmptyCloud(f"points must be (N, 3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise EmptyCloud("cloud has no points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if self.labels.shape[0] != self.points.shape[0]:
                raise UnlabeledPoints("labels must cover every point")

    @property
    def n(self):
        return self.points.shape[0]


@dataclass
class AnatomyLatent:
    """Six-slot location/severity code; one active slot scaled by severity."""

    z: np.ndarray
    mode: int
    severity: float


def onehot_latent(mode, severity):
    if not 0 <= mode < N_MODES:
        raise OutOfRange(f"mode must be in 0..{N_MODES - 1}, got {mode}")
    if not 0.0 <= severity <= 1.0:
        raise OutOfRange(f"severity must lie in [0, 1], got {severity}")
    z = np.zeros(N_MODES)
    z[mode] = severity
    return AnatomyLatent(z=z, mode=int(mode), severity=float(severity))


def normalize_points(template, cloud):
    """Center and scale a cloud by the template's bounding box.

    The template's box midpoint maps to the origin and its longest
    half-extent to 1, so the template lands inside [-1, 1]^3.
    """
    tpts = template.points
    lo, hi = tpts.min(axis=0), tpts.max(axis=0)
    scale = float((hi - lo).max()) / 2.0
    if scale <= 0.0:
        raise DegenerateTemplate("template has zero extent")
    center = (lo + hi) / 2.0
    return PointCloud(points=(cloud.points - center) / scale, labels=cloud.labels)


def subsample_augment(cloud, n, copies, seed=0, replace=False):
    """``copies`` independent uniform subsamples of size ``n``."""
    if not replace and n > cloud.n:
        raise TooFewPoints(
            f"asked for {n} of {cloud.n} points without replacement")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(copies):
        idx = rng.choice(cloud.n, size=n, replace=replace)
        labels = None if cloud.labels is None else cloud.labels[idx]
        out.append(PointCloud(points=cloud.points[idx], labels=labels))
    return out


def fourier_features(p, n_bands):
    """Multiscale sinusoidal features: per band [sin(w p), cos(w p)], w = 2^l pi."""
    if n_bands < 1:
        raise ValueError("n_bands must be >= 1")
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p[None, :] if single else p
    blocks = []
    for level in range(n_bands):
        w = (2.0 ** level) * np.pi
        blocks.append(np.sin(w * pts))
        blocks.append(np.cos(w * pts))
    out = np.concatenate(blocks, axis=1)
    return out[0] if single else out


def _fourier_features_grad(dydf, pts, n_bands):
    """Chain rule through the sinusoidal features: (N, 6F) upstream -> (N, 3)."""
    dp = np.zeros_like(pts)
    for level in range(n_bands):
        w = (2.0 ** level) * np.pi
        sin_slice = dydf[:, 6 * level:6 * level + 3]
        cos_slice = dydf[:, 6 * level + 3:6 * level + 6]
        dp += sin_slice * w * np.cos(w * pts) - cos_slice * w * np.sin(w * pts)
    return dp


# --- Chamfer distance --------------------------------------------------------

def chamfer(cloud_a, cloud_b):
    """Symmetric Chamfer distance: sum of directed mean nearest-neighbor distances."""
    a = cloud_a.points if isinstance(cloud_a, PointCloud) else np.asarray(cloud_a, dtype=float)
    b = cloud_b.points if isinstance(cloud_b, PointCloud) else np.asarray(cloud_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptyCloud("chamfer needs nonempty clouds")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float(d_ab.mean() + d_ba.mean())


def chamfer_bruteforce(cloud_a, cloud_b):
    """O(N^2) scan used as the oracle for the accelerated version."""
    a = cloud_a.points if isinstance(cloud_a, PointCloud) else np.asarray(cloud_a, dtype=float)
    b = cloud_b.points if isinstance(cloud_b, PointCloud) else np.asarray(cloud_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptyCloud("chamfer needs nonempty clouds")
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    return float(np.sqrt(d2.min(axis=1)).mean() + np.sqrt(d2.min(axis=0)).mean())


def _chamfer_batch_with_grad(pred, target):
    """Batched Chamfer losses plus gradients w.r.t. the predicted points.

    ``pred`` (B, n, 3), ``target`` (B, m, 3) -> losses (B,), grads like pred.
    """
    d2 = np.sum((pred[:, :, None, :] - target[:, None, :, :]) ** 2, axis=3)
    d = np.sqrt(np.maximum(d2, 1e-30))
    b, n, m = d.shape
    jstar = d.argmin(axis=2)           # (B, n) nearest target per pred point
    istar = d.argmin(axis=1)           # (B, m) nearest pred point per target
    bi = np.arange(b)[:, None]
    d_fwd = d[bi, np.arange(n)[None, :], jstar]
    d_bwd = d[bi, istar, np.arange(m)[None, :]]
    losses = d_fwd.mean(axis=1) + d_bwd.mean(axis=1)
    # forward term gradient
    diff_fwd = pred - target[bi, jstar]                 # (B, n, 3)
    grad = diff_fwd / (np.maximum(d_fwd, 1e-12)[..., None] * n)
    # backward term: scatter over matched pred points
    diff_bwd = pred[bi, istar] - target                 # (B, m, 3)
    contrib = diff_bwd / (np.maximum(d_bwd, 1e-12)[..., None] * m)
    flat_idx = (bi * n + istar).ravel()
    scat = np.zeros((b * n, 3))
    np.add.at(scat, flat_idx, contrib.reshape(-1, 3))
    grad += scat.reshape(b, n, 3)
    return losses, grad


# --- procedural geometry ------------------------------------------------------

# branch axes of the desk template: start point, direction, length, radius
_BRANCH_FRames = None


def _branch_frames():
    global _BRANCH_FRames
    if _BRANCH_FRames is None:
        frames = []
        for start, end, radius in [
            ((0.0, 0.0, 1.6), (0.0, 0.0, 0.0), 0.30),     # aorta
            ((0.0, 0.0, 0.0), (-1.0, 0.0, -1.4), 0.20),   # left iliac
            ((0.0, 0.0, 0.0), (1.0, 0.0, -1.4), 0.20),    # right iliac
        ]:
            start = np.asarray(start)
            end = np.asarray(end)
            axis = end - start
            length = float(np.linalg.norm(axis))
            tangent = axis / length
            ref = np.array([0.0, 1.0, 0.0])
            n1 = np.cross(tangent, ref)
            n1 /= np.linalg.norm(n1)
            n2 = np.cross(tangent, n1)
            frames.append((start, tangent, length, radius, n1, n2))
        _BRANCH_FRames = frames
    return _BRANCH_FRames


def _surface_points(rng, n_points, site=None, severity=0.0):
    """Sample the bifurcation surface; optional Gaussian necking at a site."""
    frames = _branch_frames()
    weights = np.array([f[2] * f[3] for f in frames])
    weights = weights / weights.sum()
    counts = rng.multinomial(n_points, weights)
    radius_scale = np.sqrt(1.0 - severity) if severity else 1.0
    pts, labels = [], []
    for branch, ((start, tangent, length, radius, n1, n2), cnt) in enumerate(
            zip(frames, counts)):
        s = rng.uniform(0.0, 1.0, size=cnt)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=cnt)
        r = np.full(cnt, radius)
        if site is not None:
            sb, station = SITE_PLACEMENT[site]
            if sb == branch:
                neck = 1.0 - (1.0 - radius_scale) * np.exp(
                    -0.5 * ((s - station) / NECK_WIDTH) ** 2)
                r = r * neck
        ring = (np.cos(theta)[:, None] * n1 + np.sin(theta)[:, None] * n2)
        pts.append(start + s[:, None] * length * tangent + r[:, None] * ring)
        labels.append(np.full(cnt, branch))
    return PointCloud(points=np.vstack(pts), labels=np.concatenate(labels))


def bifurcation_template(n_points=4096, seed=0):
    """Healthy template cloud (already labeled by construction)."""
    return _surface_points(np.random.default_rng(seed), n_points)


def lesion_cloud(site, severity, n_points=4096, seed=0):
    """Diseased cloud with an area reduction ``severity`` at the tagged site."""
    if site not in SITE_PLACEMENT:
        raise OutOfRange(f"unknown site {site!r}, expected one of {SITES}")
    if not 0.0 <= severity < 1.0:
        raise OutOfRange(f"severity must lie in [0, 1), got {severity}")
    return _surface_points(np.random.default_rng(seed), n_points,
                           site=site, severity=severity)


def assign_branch_labels(points, template=None):
    """Label points by the nearest branch axis of the desk template."""
    pts = np.asarray(points, dtype=float)
    best = np.full(pts.shape[0], np.inf)
    labels = np.zeros(pts.shape[0], dtype=int)
    for branch, (start, tangent, length, radius, _, _) in enumerate(_branch_frames()):
        rel = pts - start
        along = np.clip(rel @ tangent, 0.0, length)
        closest = start + along[:, None] * tangent
        dist = np.linalg.norm(pts - closest, axis=1)
        take = dist < best
        best[take] = dist[take]
        labels[take] = branch
    return labels


@dataclass
class CorpusEntry:
    cloud: PointCloud          # normalized, labeled dense cloud
    mode: int
    severity: float
    site: str


def geometry_corpus(per_site=8, n_points=4096, seed=2024,
                    severity_range=(0.15, 0.85)):
    """Deterministic desk corpus: per_site lesions at each of the six sites."""
    template = bifurcation_template(n_points=n_points, seed=seed)
    entries = []
    rng = np.random.default_rng(seed + 1)
    for m, site in enumerate(SITES):
        severities = np.sort(rng.uniform(*severity_range, size=per_site))
        for k, severity in enumerate(severities):
            raw = lesion_cloud(site, float(severity), n_points=n_points,
                               seed=seed + 10 + 100 * m + k)
            cloud = normalize_points(template, raw)
            entries.append(CorpusEntry(cloud=cloud, mode=m,
                                       severity=float(severity), site=site))
    template_norm = normalize_points(template, template)
    return template_norm, entries


# --- embedding model -----------------------------------------------------------

@dataclass
class EmbeddingModel:
    point_net: nn.MlpParams    # [p, gamma(p)] -> feature width, shared across points
    mode_head: nn.MlpParams    # 3*width -> 6 logits
    sev_head: nn.MlpParams     # 3*width -> 1 (sigmoid severity)
    decoder: nn.MlpParams      # 6F + 3 + 6 -> 3 velocity
    n_bands: int = 6
    encoder_bands: int = 2
    n_euler_steps: int = 8
    lambda_sev: float = 1.0
    lambda_mode: float = 0.1
    template_points: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def feature_width(self):
        return self.point_net.widths[-1]

    def point_features(self, pts):
        """Pointwise encoder input: raw coordinates plus low-frequency
        sinusoidal features (high bands oscillate below the sampling scale
        and make branch-wise max pooling fingerprint subsampling noise)."""
        return np.concatenate([pts, fourier_features(pts, self.encoder_bands)], axis=1)


def build_embedding_model(feature_width=64, head_hidden=64, decoder_hidden=(64, 64),
                          n_bands=6, encoder_bands=2, n_euler_steps=8,
                          lambda_sev=1.0, lambda_mode=0.1, seed=0,
                          template_points=None):
    enc_in = 3 + 6 * encoder_bands
    dec_in = 6 * n_bands + 3 + N_MODES
    return EmbeddingModel(
        point_net=nn.mlp_init([enc_in, feature_width, feature_width],
                              rng_seed=seed),
        mode_head=nn.mlp_init([3 * feature_width, head_hidden, N_MODES],
                              rng_seed=seed + 1),
        sev_head=nn.mlp_init([3 * feature_width, head_hidden, 1],
                             rng_seed=seed + 2),
        decoder=nn.mlp_init([dec_in, *decoder_hidden, 3], rng_seed=seed + 3,
                            zero_final_layer=True),
        n_bands=n_bands, encoder_bands=encoder_bands, n_euler_steps=n_euler_steps,
        lambda_sev=lambda_sev, lambda_mode=lambda_mode,
        template_points=template_points,
    )


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def _pool_branchwise(features, labels, width):
    """Per-branch max pooling: (N, width) features -> (3*width,) plus winners."""
    pooled = np.zeros(3 * width)
    winners = np.full(3 * width, -1, dtype=int)
    for branch in range(3):
        mask = labels == branch
        if not np.any(mask):
            continue
        idx = np.flatnonzero(mask)
        sub = features[idx]
        arg = sub.argmax(axis=0)
        pooled[branch * width:(branch + 1) * width] = sub[arg, np.arange(width)]
        winners[branch * width:(branch + 1) * width] = idx[arg]
    return pooled, winners


def encode(model, cloud):
    """Mode logits and severity for one labeled cloud (permutation invariant)."""
    if cloud.labels is None:
        raise UnlabeledPoints("encode requires per-point branch labels")
    feats = nn.mlp_forward(model.point_net, model.point_features(cloud.points))
    pooled, _ = _pool_branchwise(feats, cloud.labels, model.feature_width)
    logits = nn.mlp_forward(model.mode_head, pooled)
    sev = float(_sigmoid(nn.mlp_forward(model.sev_head, pooled)[0]))
    return logits, sev


def latent_from_encoder(logits, severity, phase="evaluation"):
    """Latent from encoder outputs: soft in training, one-hot at evaluation.

    Argmax ties break toward the lowest index.
    """
    probs = _softmax(np.asarray(logits, dtype=float))
    if phase == "training":
        return severity * probs
    if phase == "evaluation":
        z = np.zeros(N_MODES)
        z[int(np.argmax(probs))] = severity
        return z
    raise ValueError(f"unknown phase {phase!r}")


def decode_deform(model, template_points, z, n_steps=None):
    """Euler-integrate the decoder's velocity field from the template points."""
    steps = model.n_euler_steps if n_steps is None else int(n_steps)
    if steps < 1:
        raise ValueError("need at least one integration step")
    h = 1.0 / steps
    s = np.asarray(template_points, dtype=float).copy()
    z = np.asarray(z, dtype=float)
    for _ in range(steps):
        inp = np.concatenate([
            fourier_features(s, model.n_bands), s,
            np.broadcast_to(z, (s.shape[0], N_MODES)),
        ], axis=1)
        s = s + h * nn.mlp_forward(model.decoder, inp)
    return s


# --- training -------------------------------------------------------------------

def _encoder_forward_batch(model, points, labels):
    """Stacked clouds (B, N, 3) -> pooled (B, 3w), logits, severity, caches."""
    b, n, _ = points.shape
    width = model.feature_width
    flat = model.point_features(points.reshape(b * n, 3))
    feats, cache_pts = nn.mlp_forward_cached(model.point_net, flat)
    feats = feats.reshape(b, n, width)
    pooled = np.zeros((b, 3 * width))
    winners = np.zeros((b, 3 * width), dtype=int)
    for i in range(b):
        pooled[i], winners[i] = _pool_branchwise(feats[i], labels[i], width)
    logits, cache_mode = nn.mlp_forward_cached(model.mode_head, pooled)
    sev_act, cache_sev = nn.mlp_forward_cached(model.sev_head, pooled)
    severity = _sigmoid(sev_act[:, 0])
    return {
        "pooled": pooled, "winners": winners, "logits": logits,
        "severity": severity, "sev_act": sev_act,
        "cache_pts": cache_pts, "cache_mode": cache_mode, "cache_sev": cache_sev,
        "shape": (b, n, width),
    }


def _decoder_forward_batch(model, template_points, z_rows):
    """Deform the template for each latent row, keeping per-step caches."""
    b = z_rows.shape[0]
    n = template_points.shape[0]
    s = np.broadcast_to(template_points, (b, n, 3)).reshape(b * n, 3).copy()
    z_flat = np.repeat(z_rows, n, axis=0)
    h = 1.0 / model.n_euler_steps
    caches = []
    for _ in range(model.n_euler_steps):
        inp = np.concatenate([fourier_features(s, model.n_bands), s, z_flat], axis=1)
        vel, cache = nn.mlp_forward_cached(model.decoder, inp)
        caches.append((s, cache))
        s = s + h * vel
    return s.reshape(b, n, 3), caches


def _decoder_backward_batch(model, caches, d_pred, b, n):
    """Backprop through the Euler steps; returns decoder grads and dz."""
    h = 1.0 / model.n_euler_steps
    ds = d_pred.reshape(b * n, 3)
    f_dim = 6 * model.n_bands
    dec_grads = nn.zero_grads(model.decoder)
    dz_flat = np.zeros((b * n, N_MODES))
    for s_in, cache in reversed(caches):
        g = nn.mlp_backward(model.decoder, cache, h * ds)
        for acc, new in zip(dec_grads.weights, g.weights):
            acc += new
        for acc, new in zip(dec_grads.biases, g.biases):
            acc += new
        du = g.x_grad
        dz_flat += du[:, f_dim + 3:]
        ds = ds + du[:, f_dim:f_dim + 3] + _fourier_features_grad(
            du[:, :f_dim], s_in, model.n_bands)
    dz = dz_flat.reshape(b, n, N_MODES).sum(axis=1)
    return dec_grads, dz


def embedding_loss_and_grads(model, points, labels, modes, severities,
                             template_points):
    """Composite loss (Chamfer + weighted severity/mode terms) and gradients.

    ``points`` is (B, N, 3) with matching ``labels`` (B, N); the latent fed
    to the decoder is the training-phase soft latent, so reconstruction
    gradients reach the encoder.
    """
    b, n, _ = points.shape
    enc = _encoder_forward_batch(model, points, labels)
    probs = _softmax(enc["logits"])
    sev = enc["severity"]
    z_rows = sev[:, None] * probs
    pred, dec_caches = _decoder_forward_batch(model, template_points, z_rows)
    cd_losses, d_pred = _chamfer_batch_with_grad(pred, points)
    onehot = np.zeros((b, N_MODES))
    onehot[np.arange(b), modes] = 1.0
    ce = -np.log(np.maximum(probs[np.arange(b), modes], 1e-300))
    sev_err = sev - severities
    loss = float(cd_losses.mean() + model.lambda_sev * np.mean(sev_err ** 2)
                 + model.lambda_mode * ce.mean())

    # backward: chamfer -> decoder -> latent; plus direct head terms
    n_tmpl = np.asarray(template_points).shape[0]
    dec_grads, dz = _decoder_backward_batch(model, dec_caches, d_pred / b, b, n_tmpl)
    # z = sev * softmax(logits)
    d_sev_from_z = np.sum(dz * probs, axis=1)
    inner = np.sum(dz * probs, axis=1, keepdims=True)
    d_logits = sev[:, None] * probs * (dz - inner)
    d_logits += model.lambda_mode * (probs - onehot) / b
    d_sev = d_sev_from_z + model.lambda_sev * 2.0 * sev_err / b
    d_sev_act = (d_sev * sev * (1.0 - sev))[:, None]

    g_mode = nn.mlp_backward(model.mode_head, enc["cache_mode"], d_logits)
    g_sev = nn.mlp_backward(model.sev_head, enc["cache_sev"], d_sev_act)
    d_pooled = g_mode.x_grad + g_sev.x_grad

    # scatter pooled gradients to the winning points
    width = model.feature_width
    d_feats = np.zeros((b, n, width))
    for i in range(b):
        win = enc["winners"][i]
        valid = win >= 0
        cols = np.tile(np.arange(width), 3)[valid]
        d_feats[i, win[valid], cols] += d_pooled[i, valid]
    g_pts = nn.mlp_backward(model.point_net, enc["cache_pts"],
                            d_feats.reshape(b * n, width))
    grads = {"point_net": g_pts, "mode_head": g_mode, "sev_head": g_sev,
             "decoder": dec_grads}
    parts = {"chamfer": float(cd_losses.mean()),
             "severity": float(np.mean(sev_err ** 2)),
             "mode": float(ce.mean())}
    return loss, grads, parts


DEFAULT_EMBED_HYPER = {
    "feature_width": 64,
    "head_hidden": 64,
    "decoder_hidden": (64, 64),
    "lr": 2e-3,
    "lr_decay": 0.9999,
    "batch": 16,
    "epochs": 200,
    "patience": 40,
    "tol": 1e-4,
    "seed": 0,
}


def train_embedding(points, labels, modes, severities, template_points,
                    val_idx=None, lambda_sev=1.0, lambda_mode=0.1,
                    n_bands=6, encoder_bands=2, n_euler_steps=8, hyper=None):
    """Train the encoder/decoder on stacked clouds.

    ``points`` is (B, N, 3); ``val_idx`` marks clouds used only for the
    early-stopping monitor. Returns the best-validation model and history.
    """
    hp = dict(DEFAULT_EMBED_HYPER)
    hp.update(hyper or {})
    points = np.asarray(points, dtype=float)
    if points.ndim != 3 or points.shape[0] == 0:
        raise EmptyDataset("need a (B, N, 3) stack of clouds")
    labels = np.asarray(labels, dtype=int)
    modes = np.asarray(modes, dtype=int)
    severities = np.asarray(severities, dtype=float)
    b_all = points.shape[0]
    if val_idx is None:
        train_idx = np.arange(b_all)
        val_idx = np.zeros(0, dtype=int)
    else:
        val_idx = np.asarray(val_idx, dtype=int)
        train_idx = np.setdiff1d(np.arange(b_all), val_idx)
    model = build_embedding_model(
        feature_width=hp["feature_width"], head_hidden=hp["head_hidden"],
        decoder_hidden=tuple(hp["decoder_hidden"]), n_bands=n_bands,
        encoder_bands=encoder_bands,
        n_euler_steps=n_euler_steps, lambda_sev=lambda_sev,
        lambda_mode=lambda_mode, seed=hp["seed"],
        template_points=np.asarray(template_points, dtype=float),
    )
    nets = ("point_net", "mode_head", "sev_head", "decoder")
    states = {k: nn.adam_init(getattr(model, k), lr=hp["lr"]) for k in nets}
    rng = np.random.default_rng(hp["seed"])
    batch = max(1, min(hp["batch"], train_idx.size))
    best_val = np.inf
    best_nets = {k: getattr(model, k).copy() for k in nets}
    best_epoch = 0
    wait = 0
    hist = {"train": [], "val": [], "parts": []}
    epoch = 0
    for epoch in range(1, hp["epochs"] + 1):
        perm = rng.permutation(train_idx)
        epoch_loss = 0.0
        n_batches = 0
        for at in range(0, perm.size, batch):
            sel = perm[at:at + batch]
            loss, grads, parts = embedding_loss_and_grads(
                model, points[sel], labels[sel], modes[sel], severities[sel],
                model.template_points)
            for k in nets:
                new_p, states[k] = nn.adam_step(states[k], getattr(model, k),
                                                grads[k])
                setattr(model, k, new_p)
            epoch_loss += loss
            n_batches += 1
        for k in nets:
            states[k].lr = hp["lr"] * hp["lr_decay"] ** epoch
        hist["train"].append(epoch_loss / n_batches)
        if val_idx.size:
            val_loss, _, parts = embedding_loss_and_grads(
                model, points[val_idx], labels[val_idx], modes[val_idx],
                severities[val_idx], model.template_points)
            hist["val"].append(val_loss)
            monitor = val_loss
        else:
            monitor = hist["train"][-1]
        hist["parts"].append(parts)
        if monitor < best_val - hp["tol"]:
            best_val = monitor
            best_nets = {k: getattr(model, k).copy() for k in nets}
            best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= hp["patience"]:
                break
    for k in nets:
        setattr(model, k, best_nets[k])
    model.meta = {"best_epoch": best_epoch, "best_val": float(best_val),
                  "stopped_epoch": epoch, "hyper": {k: (list(v) if isinstance(v, tuple) else v)
                                                    for k, v in hp.items()}}
    return model, hist


# --- estimator --------------------------------------------------------------------

class AnatomyEmbedder(TransformerMixin, BaseEstimator):
    """Shape-to-latent estimator over labeled point clouds.

    ``fit`` takes a list of labeled clouds with (mode, severity) targets;
    ``transform`` maps clouds to evaluation-phase latents (one active slot).
    """

    def __init__(self, n_points=256, n_bands=6, encoder_bands=2, n_euler_steps=8,
                 lambda_sev=1.0, lambda_mode=0.1, feature_width=64,
                 head_hidden=64, decoder_hidden=(64, 64), lr=2e-3,
                 batch_size=16, epochs=200, patience=40, val_fraction=0.2,
                 seed=0):
        self.n_points = n_points
        self.n_bands = n_bands
        self.encoder_bands = encoder_bands
        self.n_euler_steps = n_euler_steps
        self.lambda_sev = lambda_sev
        self.lambda_mode = lambda_mode
        self.feature_width = feature_width
        self.head_hidden = head_hidden
        self.decoder_hidden = decoder_hidden
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.seed = seed

    def _stack(self, clouds):
        pts = np.stack([c.points for c in clouds])
        labels = np.stack([c.labels for c in clouds])
        return pts, labels

    def fit(self, clouds, y, template=None, val_idx=None):
        """``y`` is an iterable of (mode, severity) pairs."""
        modes = np.array([m for m, _ in y], dtype=int)
        sevs = np.array([s for _, s in y], dtype=float)
        for c in clouds:
            if c.labels is None:
                raise UnlabeledPoints("fit requires labeled clouds")
        if template is None:
            raise ValueError("fit needs a template cloud")
        pts, labels = self._stack(clouds)
        rng = np.random.default_rng(self.seed)
        tsel = rng.choice(template.n, size=min(self.n_points, template.n),
                          replace=False)
        if val_idx is None and self.val_fraction > 0 and len(clouds) >= 5:
            n_val = max(1, int(round(self.val_fraction * len(clouds))))
            perm = rng.permutation(len(clouds))
            val_idx = perm[:n_val]
        hyper = {"feature_width": self.feature_width,
                 "head_hidden": self.head_hidden,
                 "decoder_hidden": self.decoder_hidden, "lr": self.lr,
                 "batch": self.batch_size, "epochs": self.epochs,
                 "patience": self.patience, "seed": self.seed}
        self.model_, self.history_ = train_embedding(
            pts, labels, modes, sevs, template.points[tsel], val_idx=val_idx,
            lambda_sev=self.lambda_sev, lambda_mode=self.lambda_mode,
            n_bands=self.n_bands, encoder_bands=self.encoder_bands,
            n_euler_steps=self.n_euler_steps,
            hyper=hyper)
        self.template_ = template
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("AnatomyEmbedder is not fitted")

    def encode_details(self, cloud):
        self._check_fitted()
        return encode(self.model_, cloud)

    def transform(self, clouds):
        """Evaluation-phase latents, one row per cloud."""
        self._check_fitted()
        out = np.zeros((len(clouds), N_MODES))
        for i, cloud in enumerate(clouds):
            logits, sev = encode(self.model_, cloud)
            out[i] = latent_from_encoder(logits, sev, phase="evaluation")
        return out

    def mean_latent(self, cloud, copies=50, seed=0):
        """Average evaluation latent over uniform subsample augmentations."""
        self._check_fitted()
        subs = subsample_augment(cloud, min(self.n_points, cloud.n), copies,
                                 seed=seed)
        return self.transform(subs).mean(axis=0)

    def reconstruct(self, z, n_points=None):
        """Deform a template subsample by a latent code."""
        self._check_fitted()
        pts = self.model_.template_points
        if n_points is not None and self.template_ is not None:
            rng = np.random.default_rng(self.seed + 1)
            sel = rng.choice(self.template_.n, size=min(n_points, self.template_.n),
                             replace=False)
            pts = self.template_.points[sel]
        return PointCloud(points=decode_deform(self.model_, pts, z))
