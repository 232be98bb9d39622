"""Training, compression, progressive decoding, evaluation and RD sweeps as library calls.

The command-line verbs in :mod:`tailpcc.cli` are thin wrappers around the
``cmd_*`` functions here.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import bitstream as bsm
from . import metrics
from .codec import Codec, LossError
from .config import RunConfig
from .density import NormalizationState
from .entropy import QuantizedLatent, quantize
from .geometry import estimate_normals
from .nn.checkpoint import CheckpointError, read_records, write_records
from .nn.optim import Adam, AdamState
from .pcio import PointCloud, load_pointcloud, normalize_to_unit_cube, save_pointcloud, synthetic_dataset
from .taildrop import apply_tail_drop, channel_importance
from .train import Trainer

log = logging.getLogger("tailpcc")

CHECKPOINT_FORMAT = "tailpcc-checkpoint"
CHECKPOINT_VERSION = 1
RD_SCHEMA = 1
RD_COLUMNS = ("strategy", "lambda", "cloud", "alpha", "k_z", "k_xyz", "entropy_bpp", "file_bpp",
              "cd", "psnr_d1", "psnr_d2", "n_out")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    model: Codec
    run: RunConfig
    adam: AdamState
    norm: NormalizationState
    epoch: int


def save_checkpoint(path, model: Codec, run: RunConfig, opt: Adam, norm: NormalizationState, epoch: int) -> None:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"adam.m/{k}": v for k, v in opt.state.m.items()})
    tensors.update({f"adam.v/{k}": v for k, v in opt.state.v.items()})
    st = opt.state
    docs = {
        "meta": {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "epoch": epoch},
        "run_config": run.to_flat(),
        "adam": {"beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "lr": st.lr, "step": st.step},
        "norm": {"d_max": norm.d_max, "m_max": norm.m_max, "gamma": norm.gamma, "t": norm.t},
    }
    write_records(path, tensors, docs)


def load_checkpoint(path) -> Checkpoint:
    tensors, docs = read_records(path)
    meta = docs.get("meta", {})
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint {meta}")
    run = RunConfig.from_flat(docs["run_config"])
    model = Codec(run.model)

    def section(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    model.load_state_dict(section("param/"))
    a = docs["adam"]
    adam = AdamState(a["beta1"], a["beta2"], a["eps"], a["lr"], a["step"], section("adam.m/"), section("adam.v/"))
    n = docs["norm"]
    norm = NormalizationState(n["d_max"], n["m_max"], n["gamma"], n["t"])
    return Checkpoint(model, run, adam, norm, int(meta["epoch"]))


# ---------------------------------------------------------------------------
# data

def prepare_cloud(pc: PointCloud, normalize: bool = True) -> PointCloud:
    return normalize_to_unit_cube(pc)[0] if normalize else pc


def resolve_dataset(run: RunConfig) -> tuple:
    """``(train, test)`` clouds; the last ``data.test_count`` clouds form the test split."""
    d = run.data
    if d.paths:
        clouds = [prepare_cloud(load_pointcloud(p), d.normalize) for p in d.paths]
    else:
        clouds = synthetic_dataset(d.count, d.points, d.seed)
    t = min(d.test_count, len(clouds))
    train = clouds[:-t] if len(clouds) > t else clouds
    return train, clouds[len(clouds) - t:]


# ---------------------------------------------------------------------------
# train

def cmd_train(run: RunConfig, out_path, resume: Optional[str] = None, clouds: Optional[Sequence] = None,
              log_path=None) -> Checkpoint:
    """Train a model and write a checkpoint after every epoch plus a per-epoch CSV log.

    On divergence the last completed epoch's checkpoint is left in place and
    :class:`TrainingDiverged` is raised.
    """
    if resume:
        ck = load_checkpoint(resume)
        model, norm, start = ck.model, ck.norm, ck.epoch
    else:
        model, norm, start = Codec(run.model), None, 0
    if clouds is None:
        clouds, _ = resolve_dataset(run)
    scaffolds = [model.scaffold(pc) for pc in clouds]
    trainer = Trainer(model, run.train, norm)
    trainer.epoch = start
    if resume:
        trainer.opt = Adam(model.parameters(), state=ck.adam)
    log_path = log_path or os.fspath(out_path) + ".log.csv"
    with open(log_path, "a" if resume else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not resume:
            writer.writerow(["epoch", "lr", "steps", "loss", "cd", "dens", "coord", "points", "bpp", "rho"])

        def on_epoch(epoch, records):
            mean = lambda attr: float(np.mean([getattr(r.loss, attr) for r in records]))  # noqa: E731
            writer.writerow([epoch, records[0].lr, len(records), mean("total"), mean("cd"), mean("dens"),
                             mean("coord"), mean("points"), mean("bpp"), float(np.mean([r.rho for r in records]))])
            fh.flush()
            save_checkpoint(out_path, model, run, trainer.opt, trainer.norm, epoch + 1)
            log.info("epoch %d lr %.3g loss %.6f cd %.6f bpp %.3f", epoch, records[0].lr, mean("total"),
                     mean("cd"), mean("bpp"))

        remaining = run.train.epochs - start
        try:
            if remaining > 0:
                trainer.fit(scaffolds, remaining, on_epoch=on_epoch)
        except (LossError, FloatingPointError) as exc:
            raise TrainingDiverged(f"training diverged in epoch {trainer.epoch}: {exc}") from exc
    if remaining <= 0:
        save_checkpoint(out_path, model, run, trainer.opt, trainer.norm, trainer.epoch)
    return Checkpoint(model, run, trainer.opt.state, trainer.norm, trainer.epoch)


# ---------------------------------------------------------------------------
# compress / decompress

@dataclass
class CompressStats:
    n: int
    m: int
    entropy_bpp: float
    file_bpp: float

    def line(self) -> str:
        return f"N={self.n} M={self.m} entropy_bpp={self.entropy_bpp:.6f} file_bpp={self.file_bpp:.6f}"


def compress_cloud(model: Codec, pc: PointCloud, run: RunConfig) -> tuple:
    """Full-ratio stream for an already normalized cloud; returns ``(stream, quantized latent)``."""
    lat = model.encode(pc)
    q = QuantizedLatent(quantize(lat.z), quantize(lat.z_xyz))
    beta = run.train.beta
    bs = bsm.serialize_progressive(q, channel_importance(lat.z, beta), channel_importance(lat.z_xyz, beta),
                                   model.bottleneck_z, model.bottleneck_xyz, lat.d, lat.n_points,
                                   feature_only=run.train.strategy == "feature_only")
    return bs, q


def masked_decode(model: Codec, pc: PointCloud, alpha: float, run: RunConfig) -> PointCloud:
    """In-memory reference: round, zero the dropped channels, decode."""
    lat = model.encode(pc)
    beta = run.train.beta
    k_z, _ = bsm.retained_layers(alpha, model.cfg.C, model.cfg.C_xyz)
    # the tail-drop ratio that keeps exactly k_z of C channels
    rho = 1.0 - k_z / model.cfg.C
    z, zx = apply_tail_drop(quantize(lat.z), quantize(lat.z_xyz), rho, channel_importance(lat.z, beta),
                            channel_importance(lat.z_xyz, beta), run.train.strategy)
    return model.decode(z, zx, lat.d)


def cmd_compress(checkpoint, input_path, output_path) -> CompressStats:
    ck = load_checkpoint(checkpoint)
    pc = prepare_cloud(load_pointcloud(input_path), ck.run.data.normalize)
    bs, q = compress_cloud(ck.model, pc, ck.run)
    data = bs.to_bytes()
    with open(output_path, "wb") as fh:
        fh.write(data)
    ebpp = bsm.entropy_bpp(bs, ck.model.bottleneck_z, ck.model.bottleneck_xyz, q)
    return CompressStats(bs.n_points, bs.m, ebpp, 8.0 * len(data) / bs.n_points)


def snap_alpha(alpha: float, C: int) -> float:
    """Round ``alpha`` up to the ``1/C`` grid, warning when it moves."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"progressive ratio must lie in (0, 1], got {alpha}")
    k = bsm._ceil_guarded(alpha * C)
    if abs(k - alpha * C) > 1e-9:
        log.warning("progressive ratio %g is off the 1/%d grid; using %d/%d", alpha, C, k, C)
    return k / C


def cmd_decompress(checkpoint, stream_path, output_path, alpha: float = 1.0) -> PointCloud:
    ck = load_checkpoint(checkpoint)
    with open(stream_path, "rb") as fh:
        bs = bsm.ProgressiveBitstream.from_bytes(fh.read())
    if bs.C != ck.model.cfg.C or bs.C_xyz != ck.model.cfg.C_xyz:
        raise bsm.VersionError(f"stream has C={bs.C}, C_xyz={bs.C_xyz}; checkpoint has "
                               f"C={ck.model.cfg.C}, C_xyz={ck.model.cfg.C_xyz}")
    bs = bsm.truncate(bs, snap_alpha(alpha, bs.C))
    k_z, k_xyz = bs.retained
    log.info("consumed %d feature layer(s) and %d coordinate layer(s)", k_z, k_xyz)
    rec = bsm.progressive_decode(bs, ck.model)
    save_pointcloud(rec, output_path, double=True)
    return rec


def cmd_truncate(stream_path, output_path, alpha: float) -> bsm.ProgressiveBitstream:
    """Cut a stored stream down to ratio ``alpha`` without decoding it."""
    with open(stream_path, "rb") as fh:
        bs = bsm.ProgressiveBitstream.from_bytes(fh.read())
    out = bsm.truncate(bs, snap_alpha(alpha, bs.C))
    with open(output_path, "wb") as fh:
        fh.write(out.to_bytes())
    return out


# ---------------------------------------------------------------------------
# evaluation

def quality(original: PointCloud, recon: PointCloud, conventional: bool = False) -> dict:
    return {
        "cd": metrics.chamfer_distance(original, recon),
        "psnr_d1": metrics.psnr_d(original, recon, "D1", conventional),
        "psnr_d2": metrics.psnr_d(original, recon, "D2", conventional),
    }


def with_normals(pc: PointCloud) -> PointCloud:
    return pc if pc.normals is not None else estimate_normals(pc)


def evaluate_cloud(model: Codec, pc: PointCloud, run: RunConfig, alphas: Sequence[float],
                   label: str = "") -> list:
    """One RD row per ratio in ``alphas`` for a normalized cloud."""
    ref = with_normals(pc)
    full, q = compress_cloud(model, pc, run)
    rows = []
    for alpha in alphas:
        bs = bsm.truncate(full, alpha)
        rec = bsm.progressive_decode(bs, model)
        k_z, k_xyz = bs.retained
        row = {"strategy": run.train.strategy, "lambda": run.train.weights.lam, "cloud": label,
               "alpha": float(alpha), "k_z": k_z, "k_xyz": k_xyz,
               "entropy_bpp": bsm.entropy_bpp(bs, model.bottleneck_z, model.bottleneck_xyz, q),
               "file_bpp": bsm.file_bpp(bs), "n_out": rec.n}
        row.update(quality(ref, rec))
        rows.append(row)
    return rows


def alpha_grid(C: int) -> list:
    return [k / C for k in range(1, C + 1)]


def cmd_evaluate(original_path, reconstruction_path, conventional: bool = False, normalize: bool = False) -> dict:
    """Quality of a reconstruction file against its original."""
    orig = load_pointcloud(original_path)
    if normalize:
        orig = prepare_cloud(orig)
    return quality(with_normals(orig), load_pointcloud(reconstruction_path), conventional)


# ---------------------------------------------------------------------------
# RD sweep

def write_rd_report(path, rows: Sequence[dict]) -> None:
    rows = sorted(rows, key=lambda r: (r["lambda"], r["strategy"], r["cloud"], r["alpha"]))
    with open(path, "w", newline="") as fh:
        fh.write(f"# rd-report schema {RD_SCHEMA}\n")
        w = csv.DictWriter(fh, fieldnames=RD_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in RD_COLUMNS})


def read_rd_report(path) -> list:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# rd-report schema"):
            raise ValueError(f"{path}: not an RD report")
        if int(first.split()[-1]) != RD_SCHEMA:
            raise ValueError(f"{path}: unsupported RD report schema {first.split()[-1]}")
        rows = []
        for r in csv.DictReader(fh):
            out = dict(r)
            for k in ("lambda", "alpha", "entropy_bpp", "file_bpp", "cd", "psnr_d1", "psnr_d2"):
                out[k] = float(r[k]) if r[k] not in ("", "missing") else math.nan
            for k in ("k_z", "k_xyz", "n_out"):
                out[k] = int(r[k]) if r[k] not in ("", "missing") else -1
            rows.append(out)
    return rows


def mean_curve(rows: Sequence[dict], strategy: str, lam: float, rate: str = "entropy_bpp",
               quality_key: str = "psnr_d2") -> list:
    """Per-ratio means over clouds, as :class:`~tailpcc.metrics.RDPoint` sorted by ratio."""
    sel = [r for r in rows if r["strategy"] == strategy and r["lambda"] == lam and math.isfinite(r[quality_key])]
    alphas = sorted({r["alpha"] for r in sel})
    return [metrics.RDPoint(float(np.mean([r[rate] for r in sel if r["alpha"] == a])),
                            float(np.mean([r[quality_key] for r in sel if r["alpha"] == a])), f"alpha={a!r}")
            for a in alphas]


def write_gnuplot_data(path, rows: Sequence[dict]) -> None:
    """Mean RD curves as whitespace columns, one index block per (strategy, lambda)."""
    with open(path, "w") as fh:
        fh.write("# alpha entropy_bpp file_bpp psnr_d1 psnr_d2 cd\n")
        for strategy, lam in sorted({(r["strategy"], r["lambda"]) for r in rows}):
            fh.write(f"# strategy={strategy} lambda={lam!r}\n")
            sel = [r for r in rows if r["strategy"] == strategy and r["lambda"] == lam]
            for a in sorted({r["alpha"] for r in sel}):
                cell = [r for r in sel if r["alpha"] == a]
                cols = [np.mean([r[k] for r in cell]) for k in ("entropy_bpp", "file_bpp", "psnr_d1", "psnr_d2", "cd")]
                fh.write(" ".join(repr(float(v)) for v in [a, *cols]) + "\n")
            fh.write("\n\n")


def bd_summaries(rows: Sequence[dict]) -> list:
    """BD-rate of feature-only against combined drop for every shared lambda."""
    out = []
    lams = sorted({r["lambda"] for r in rows if r["strategy"] == "combined"}
                  & {r["lambda"] for r in rows if r["strategy"] == "feature_only"})
    for lam in lams:
        anchor = mean_curve(rows, "combined", lam)
        test = mean_curve(rows, "feature_only", lam)
        try:
            value = metrics.bd_rate(anchor, test)
        except ValueError as exc:
            log.warning("BD-rate for lambda=%g undefined: %s", lam, exc)
            value = math.nan
        out.append({"anchor": "combined", "test": "feature_only", "lambda": lam, "bd_rate": value})
    return out


def cmd_rd_sweep(checkpoints: Sequence[str], out_path, alphas: Optional[Sequence[float]] = None,
                 run_override: Optional[RunConfig] = None) -> tuple:
    """Evaluate every (checkpoint, cloud, ratio) cell on each checkpoint's test split.

    Writes the RD report CSV, ``<out>.dat`` with gnuplot-ready mean curves and,
    whenever both drop strategies are present, ``<out>.bd.csv`` with BD-rate
    summaries.
    """
    if not checkpoints:
        raise ValueError("rd-sweep needs at least one checkpoint")
    rows = []
    for path in checkpoints:
        ck = load_checkpoint(path)
        run = ck.run
        data_run = run_override or run
        _, test = resolve_dataset(data_run)
        grid = alphas or alpha_grid(run.model.C)
        for i, pc in enumerate(test):
            label = pc.source_id or f"cloud-{i}"
            try:
                rows.extend(evaluate_cloud(ck.model, pc, run, grid, label))
            except (bsm.BitstreamError, metrics.MetricUndefinedError) as exc:
                log.warning("cell %s/%s failed: %s", path, label, exc)
                rows.extend({"strategy": run.train.strategy, "lambda": run.train.weights.lam, "cloud": label,
                             "alpha": float(a), **{k: "missing" for k in RD_COLUMNS[4:]}} for a in grid)
    write_rd_report(out_path, rows)
    complete = [r for r in rows if not isinstance(r.get("cd"), str)]
    write_gnuplot_data(os.fspath(out_path) + ".dat", complete)
    summaries = bd_summaries(complete)
    if summaries:
        with open(os.fspath(out_path) + ".bd.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=("anchor", "test", "lambda", "bd_rate"))
            w.writeheader()
            for s in summaries:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in s.items()})
    return rows, summaries


def cmd_synth_data(out_dir, count: int = 64, points: int = 2048, seed: int = 0, fmt: str = "ply_binary_le") -> list:
    os.makedirs(out_dir, exist_ok=True)
    ext = {"ply_ascii": ".ply", "ply_binary_le": ".ply", "kitti_bin": ".bin", "csv_xyz": ".csv"}[fmt]
    paths = []
    for pc in synthetic_dataset(count, points, seed):
        path = os.path.join(out_dir, pc.source_id + ext)
        save_pointcloud(pc, path, fmt, double=True)
        paths.append(path)
    return paths
