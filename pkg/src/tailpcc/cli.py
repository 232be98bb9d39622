"""``tailpcc`` command line: train, compress, decompress, evaluate, rd-sweep, synth-data.

Config keys (``model.C``, ``train.lambda``, ``drop.beta`` ...) come from an
optional ``--config`` file and may be overridden with ``--key=value``.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .bitstream import BitstreamError, VersionError
from .config import ConfigError, load_run_config
from .entropy import ModelIntegrityError
from .metrics import MetricUndefinedError
from .nn.autograd import DimensionError
from .nn.checkpoint import CheckpointError
from .pcio import FORMATS, ParseError, RangeError
from .rangecoder import RangeCoderError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_MODEL = 4
EXIT_IO = 5
EXIT_DIVERGED = 6

log = logging.getLogger("tailpcc")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tailpcc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train a model; extra --key=value flags override config keys")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume", help="continue from this checkpoint")

    c = sub.add_parser("compress", help="encode a cloud into a full-ratio progressive stream")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)

    d = sub.add_parser("decompress", help="decode a stream, optionally truncated to ratio --pr")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--pr", type=float, default=1.0, help="progressive ratio in (0, 1]")

    tr = sub.add_parser("truncate", help="cut a stream to ratio --pr without decoding")
    tr.add_argument("--input", required=True)
    tr.add_argument("--output", required=True)
    tr.add_argument("--pr", type=float, required=True)

    e = sub.add_parser("evaluate", help="CD, PSNR-D1 and PSNR-D2 of a reconstruction")
    e.add_argument("original")
    e.add_argument("reconstruction")
    e.add_argument("--conventional", action="store_true", help="single-square PSNR peak")
    e.add_argument("--normalize", action="store_true", help="map the original into the unit cube first")

    r = sub.add_parser("rd-sweep", help="RD report over checkpoints and progressive ratios")
    r.add_argument("--checkpoints", nargs="+", required=True)
    r.add_argument("--out", required=True, help="RD report CSV")
    r.add_argument("--alphas", type=float, nargs="*", help="ratios (default: every k/C)")
    r.add_argument("--config", help="evaluate on this config's test split instead of each checkpoint's")

    s = sub.add_parser("synth-data", help="write a seeded synthetic dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--points", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=FORMATS, default="ply_binary_le")
    return p


def _run(args, extra) -> int:
    if extra and args.verb not in ("train", "rd-sweep"):
        raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
    if args.verb == "train":
        run = load_run_config(args.config, extra)
        ck = harness.cmd_train(run, args.out, resume=args.resume)
        print(f"trained {ck.epoch} epochs -> {args.out}")
    elif args.verb == "compress":
        print(harness.cmd_compress(args.checkpoint, args.input, args.output).line())
    elif args.verb == "decompress":
        rec = harness.cmd_decompress(args.checkpoint, args.input, args.output, args.pr)
        print(f"N'={rec.n} -> {args.output}")
    elif args.verb == "truncate":
        bs = harness.cmd_truncate(args.input, args.output, args.pr)
        print(f"k_z={bs.retained[0]} k_xyz={bs.retained[1]} -> {args.output}")
    elif args.verb == "evaluate":
        q = harness.cmd_evaluate(args.original, args.reconstruction, args.conventional, args.normalize)
        print(" ".join(f"{k}={v:.6g}" for k, v in q.items()))
    elif args.verb == "rd-sweep":
        override = load_run_config(args.config, extra) if (args.config or extra) else None
        rows, bd = harness.cmd_rd_sweep(args.checkpoints, args.out, args.alphas, override)
        print(f"{len(rows)} rows -> {args.out}")
        for s in bd:
            print(f"BD-rate {s['test']} vs {s['anchor']} (lambda={s['lambda']:g}): {s['bd_rate']:.2f}%")
    elif args.verb == "synth-data":
        paths = harness.cmd_synth_data(args.out, args.count, args.points, args.seed, args.format)
        print(f"{len(paths)} clouds -> {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _run(args, extra)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except harness.TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except (VersionError, CheckpointError, DimensionError, ModelIntegrityError) as exc:
        log.error("model error: %s", exc)
        return EXIT_MODEL
    except (ParseError, RangeError, BitstreamError, RangeCoderError, MetricUndefinedError) as exc:
        log.error("parse error: %s", exc)
        return EXIT_PARSE
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("invalid argument: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
