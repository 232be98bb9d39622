"""Point-cloud autoencoder: staged neighbourhood-MLP encoder, anchor decoder, composite loss.

Each encoder stage farthest-point samples the previous level, gathers every
sample's k nearest points from that level, runs a shared two-layer MLP on
``[neighbour feature, scaled relative offset]`` and max-pools. The first
stage sees offsets only. The last
stage emits the feature latent ``z``, a coordinate latent ``z_xyz`` (a
learned linear code of the anchor positions plus a feature term) and the
per-anchor point counts ``d``.

The decoder recovers anchors from ``z_xyz``, predicts a soft point count per
anchor conditioned on ``d`` and emits that many offsets from a fixed pool of
candidates per anchor.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from . import geometry
from .density import DensityStats, compute_density_stats
from .entropy import FactorizedEntropyModel
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import MLP, Linear, Module, Parameter
from .pcio import PointCloud

ALLOWED_FACTORS = (Fraction(1, 2), Fraction(1, 3), Fraction(1, 4))


class LossError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    C: int = 32
    C_xyz: int = 16
    stages: tuple = ("1/2", "1/3", "1/4")
    k: int = 8
    hidden: int = 64
    seed: int = 0
    max_upsample: int = 8
    # scales anchor coordinates before the coordinate code so unit rounding is fine-grained
    coord_scale: float = 64.0
    # same idea for the feature latent: quantization step relative to the natural feature scale
    latent_scale: float = 1.0
    # C_xyz == 3 and z_xyz is the scaled anchor position itself
    literal_xyz: bool = False

    def __post_init__(self):
        self.stages = tuple(str(Fraction(f).limit_denominator(16)) for f in self.stages)
        if self.C < 2 or self.C_xyz < 2:
            raise ValueError("C and C_xyz must be at least 2")
        if self.C > 255 or self.C_xyz > 255:
            raise ValueError("channel counts above 255 do not fit the bitstream header")
        for f in self.factors:
            if f not in ALLOWED_FACTORS:
                raise ValueError(f"stage factor {f} not in {{1/2, 1/3, 1/4}}")
        if self.literal_xyz and self.C_xyz != 3:
            raise ValueError("literal coordinate mode needs C_xyz == 3")

    @property
    def factors(self) -> tuple:
        return tuple(Fraction(f) for f in self.stages)

    @property
    def pool(self) -> int:
        """Candidate points per anchor: four times the nominal expansion, within the per-stage bound."""
        overall = math.prod(self.factors)
        return int(min(self.max_upsample ** len(self.stages), 4 * math.ceil(1 / overall)))

    def level_sizes(self, n: int) -> list:
        sizes = [n]
        for f in self.factors:
            sizes.append(int(math.ceil(f * sizes[-1])))
        return sizes

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: (tuple(v) if k == "stages" else v) for k, v in d.items() if k in names})


@dataclass
class Scaffold:
    """Parameter-independent geometry of one cloud: FPS levels, neighbourhoods, density."""

    coords: np.ndarray
    levels: list
    sample_idx: list
    nbrs: list
    gains: list
    assignment: geometry.AssignmentMap
    stats: DensityStats

    @property
    def anchors(self) -> np.ndarray:
        return self.levels[-1]

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def m(self) -> int:
        return len(self.levels[-1])


def _gain(n: int) -> float:
    # inverse of the typical neighbour spacing on a surface sampled with n points
    return 0.5 * math.sqrt(n)


def build_scaffold(pc, cfg: ModelConfig) -> Scaffold:
    coords = pc.coords if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    n = len(coords)
    if n < 1:
        raise ValueError("cannot encode an empty cloud")
    levels = [coords]
    sample_idx, nbrs = [], []
    for f in cfg.factors:
        prev = levels[-1]
        idx, ds = geometry.downsample(prev, f)
        sample_idx.append(idx)
        levels.append(ds.coords)
        nbrs.append(geometry.knn(prev, ds.coords, min(cfg.k, len(prev))).indices)
    gains = [_gain(len(lv)) for lv in levels]
    assignment = geometry.nearest_assignment(coords, levels[-1])
    stats = compute_density_stats(assignment, coords, levels[-1])
    return Scaffold(coords, levels, sample_idx, nbrs, gains, assignment, stats)



class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        h = cfg.hidden
        self.cfg = cfg
        self.stage_mlps = [MLP([3 if s == 0 else h + 3, h, h], rng) for s in range(len(cfg.factors))]
        self.head_z = Linear(h, cfg.C, rng)
        if not cfg.literal_xyz:
            self.head_xyz = Linear(h, cfg.C_xyz, rng, gain=0.1)
            self.coord_proj = Parameter(_coord_code_init(cfg.C_xyz, rng), "coord_proj")

    def __call__(self, sc: Scaffold):
        cfg = self.cfg
        feat = None
        for s, mlp in enumerate(self.stage_mlps):
            prev = sc.levels[s]
            cur = sc.levels[s + 1]
            nb = sc.nbrs[s]
            rel = (prev[nb] - cur[:, None, :]) * sc.gains[s + 1]
            x = Tensor(rel) if feat is None else ag.concat([ag.gather(feat, nb), rel], axis=-1)
            feat = ag.reduce_max(mlp(x), axis=1)
        z = self.head_z(feat) * cfg.latent_scale
        centred = (sc.anchors - 0.5) * cfg.coord_scale
        if cfg.literal_xyz:
            z_xyz = Tensor(centred)
        else:
            z_xyz = ag.matmul(centred, self.coord_proj) + self.head_xyz(feat)
        return z, z_xyz


def _coord_code_init(c_xyz: int, rng) -> np.ndarray:
    # orthonormal rows with geometrically decaying channel scale: early channels carry
    # most of the position, later ones refine it
    q, _ = np.linalg.qr(rng.normal(size=(c_xyz, 3)))
    decay = 0.6 ** np.arange(c_xyz)
    w = q.T * decay[None, :]
    return w / np.linalg.norm(w, axis=1, keepdims=True)


@dataclass
class DecodeOutput:
    points: Tensor
    counts: Tensor
    anchors: Tensor
    emitted: np.ndarray


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, coord_proj: Optional[np.ndarray]):
        h = cfg.hidden
        self.cfg = cfg
        if not cfg.literal_xyz:
            self.coord_inv = Parameter(np.linalg.pinv(coord_proj), "coord_inv")
            self.anchor_res = MLP([cfg.C_xyz, h, 3], rng, out_gain=0.01)
        self.body = MLP([cfg.C + cfg.C_xyz + 1, h, h], rng)
        self.count_head = Linear(h, 1, rng, gain=0.0)
        self.offset_head = Linear(h, cfg.pool * 3, rng, gain=0.1)

    def anchors(self, z_xyz) -> Tensor:
        cfg = self.cfg
        scaled = ag.as_tensor(z_xyz) * (1.0 / cfg.coord_scale)
        if cfg.literal_xyz:
            return scaled + 0.5
        return ag.matmul(scaled, self.coord_inv) + self.anchor_res(scaled) + 0.5

    def __call__(self, z, z_xyz, d, m_gain: float) -> DecodeOutput:
        cfg = self.cfg
        z = ag.as_tensor(z)
        z_xyz = ag.as_tensor(z_xyz)
        d = np.asarray(d, dtype=np.float64).reshape(-1)
        m = z.shape[0]
        anchors = self.anchors(z_xyz)
        inp = ag.concat([z * (1.0 / cfg.latent_scale), z_xyz * (1.0 / cfg.coord_scale), Tensor(np.log1p(d)[:, None])], axis=-1)
        g = self.body(inp)
        counts = ag.sigmoid(self.count_head(g)).reshape(m) * (2.0 * d)
        offsets = self.offset_head(g).reshape(m, cfg.pool, 3) * (1.0 / m_gain)
        cand = (anchors.reshape(m, 1, 3) + offsets).reshape(m * cfg.pool, 3)
        emitted = np.clip(np.round(counts.data), 1, cfg.pool).astype(np.int64)
        flat = np.concatenate([i * cfg.pool + np.arange(e) for i, e in enumerate(emitted)])
        return DecodeOutput(ag.gather(cand, flat), counts, anchors, emitted)


@dataclass
class LatentCode:
    """Encoder output for one cloud; ``z`` is ``C x M`` and ``z_xyz`` is ``C_xyz x M``."""

    z: np.ndarray
    z_xyz: np.ndarray
    d: np.ndarray
    sample_coords: np.ndarray
    n_points: int

    @property
    def M(self) -> int:
        return self.z.shape[1]


class Codec(Module):
    """Encoder, decoder and the two entropy bottlenecks."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        proj = None if cfg.literal_xyz else self.encoder.coord_proj.data
        self.decoder = Decoder(cfg, rng, proj)
        self.bottleneck_z = FactorizedEntropyModel(cfg.C, seed=cfg.seed + 1)
        self.bottleneck_xyz = FactorizedEntropyModel(cfg.C_xyz, seed=cfg.seed + 2)

    def scaffold(self, pc) -> Scaffold:
        return build_scaffold(pc, self.cfg)

    def encode(self, pc) -> LatentCode:
        sc = pc if isinstance(pc, Scaffold) else self.scaffold(pc)
        with ag.no_grad():
            z, z_xyz = self.encoder(sc)
        return LatentCode(z.data.T.copy(), z_xyz.data.T.copy(), sc.stats.d_num.copy(),
                          sc.anchors.copy(), sc.n)

    def decode(self, z, z_xyz, d) -> PointCloud:
        """Reconstruct from channel-major (possibly masked, integer) latents."""
        z = np.asarray(z, dtype=np.float64)
        z_xyz = np.asarray(z_xyz, dtype=np.float64)
        if z.shape[0] != self.cfg.C or z_xyz.shape[0] != self.cfg.C_xyz or z.shape[1] != z_xyz.shape[1]:
            raise ag.DimensionError(
                f"latent shapes {z.shape}, {z_xyz.shape} do not match C={self.cfg.C}, C_xyz={self.cfg.C_xyz}")
        m = z.shape[1]
        with ag.no_grad():
            out = self.decoder(z.T, z_xyz.T, d, _gain(m))
        return PointCloud(out.points.data)


# ---------------------------------------------------------------------------
# losses

@dataclass
class LossWeights:
    sigma: float = 1e-4
    omega: float = 5e-5
    eta: float = 1e-3
    lam: float = 1e-3


@dataclass
class LossBreakdown:
    cd: float
    dens: float
    coord: float
    points: float
    bpp: float
    weights: LossWeights = field(default_factory=LossWeights)
    total: float = 0.0
    tensor: Optional[Tensor] = field(default=None, repr=False)

    def recompute(self) -> float:
        w = self.weights
        return self.cd + w.sigma * self.dens + w.omega * self.coord + w.eta * self.points + w.lam * self.bpp


def chamfer_loss(points: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable squared Chamfer distance between ``points`` and a fixed target cloud."""
    p = points.data
    nn_or = geometry.knn(p, target, 1).indices[:, 0]
    nn_ro = geometry.knn(target, p, 1).indices[:, 0]
    d_or = ag.gather(points, nn_or) - target
    d_ro = points - target[nn_ro]
    return ag.reduce_mean(ag.reduce_sum(ag.square(d_or), axis=1)) + \
        ag.reduce_mean(ag.reduce_sum(ag.square(d_ro), axis=1))


def total_loss(cd, dens, coord, points, bpp, weights: LossWeights) -> LossBreakdown:
    """Weighted sum ``cd + sigma dens + omega coord + eta points + lam bpp``.

    Terms may be tensors (the total keeps their graph) or floats.
    """
    terms = {"cd": cd, "dens": dens, "coord": coord, "points": points, "bpp": bpp}
    values = {}
    for name, t in terms.items():
        v = float(t.data) if isinstance(t, Tensor) else float(t)
        if not math.isfinite(v):
            raise LossError(f"loss term {name!r} is not finite ({v})")
        values[name] = v
    w = weights
    tot = ag.as_tensor(cd) + ag.as_tensor(dens) * w.sigma + ag.as_tensor(coord) * w.omega \
        + ag.as_tensor(points) * w.eta + ag.as_tensor(bpp) * w.lam
    out = LossBreakdown(weights=w, tensor=tot, **values)
    out.total = float(tot.data)
    return out
