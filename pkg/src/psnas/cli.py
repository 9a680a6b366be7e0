"""``psnas`` command line: gen-data, search, train, eval, infer.

Exit codes: 0 success, 2 invalid input or configuration, 3 divergence abort.
Logs go to stderr; results are written to files only.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .bilevel import DivergenceError
from .checkpoint import CheckpointError
from .scene import ContainerError, RankDeficientLighting
from .search_space import GenotypeError

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("psnas")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _pair(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition(",")
    try:
        return int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="psnas", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = P.DataConfig()
    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--scenes", type=int, default=d.scenes)
    g.add_argument("--resolution", type=int, default=d.resolution)
    g.add_argument("--lights", type=int, default=d.lights,
                   help="lights per search/train/val scene (full scale: choose 32)")
    g.add_argument("--test-lights", type=int, default=d.test_lights)
    g.add_argument("--blobs", type=_pair, default=d.blobs, help="blob count range LO,HI")
    g.add_argument("--noise", type=float, default=d.noise)
    g.add_argument("--force", action="store_true")

    s = sub.add_parser("search", help="bi-level architecture search on a supernet")
    sc = P.SearchRunConfig()
    s.add_argument("--network", choices=P.NETWORKS, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=sc.seed)
    s.add_argument("--epochs", type=int, default=sc.epochs)
    s.add_argument("--batch-size", type=int, default=sc.batch_size)
    s.add_argument("--order", choices=["first", "second"], default=sc.order)
    s.add_argument("--xi", type=float, default=None, help="inner step size (default: weight lr)")
    s.add_argument("--fd-scale", type=float, default=sc.fd_scale)
    s.add_argument("--channels", type=int, default=sc.channels)
    s.add_argument("--include-zero", action="store_true",
                   help="let discretization pick the zero op")
    s.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train a discrete network from a genotype")
    tc = P.TrainRunConfig()
    t.add_argument("--network", choices=P.NETWORKS, required=True)
    t.add_argument("--genotype", type=Path, required=True)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int, default=tc.seed)
    t.add_argument("--epochs", type=int, default=None, help="default: 6 light / 3 normal")
    t.add_argument("--batch-size", type=int, default=None,
                   help="scenes per batch (default: 4 light / 1 normal)")
    t.add_argument("--lr", type=float, default=tc.lr)
    t.add_argument("--weight-decay", type=float, default=tc.weight_decay)
    t.add_argument("--lambda-aux", type=float, default=tc.lambda_aux)
    t.add_argument("--augment", action="store_true",
                   help="apply a random dihedral transform to each training scene")
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", help="two-stage evaluation on a dataset split")
    e.add_argument("--light-ckpt", type=Path, required=True)
    e.add_argument("--normal-ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--num-images", type=int, default=None)
    e.add_argument("--gt-lights", action="store_true",
                   help="feed ground-truth lights to the normal network")
    e.add_argument("--force", action="store_true")

    i = sub.add_parser("infer", help="estimate lights and normals for one image set")
    i.add_argument("--light-ckpt", type=Path, required=True)
    i.add_argument("--normal-ckpt", type=Path, required=True)
    i.add_argument("--images", type=Path, required=True)
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--force", action="store_true")
    return p


def _run(args) -> None:
    if args.command == "gen-data":
        cfg = P.DataConfig(seed=args.seed, scenes=args.scenes, resolution=args.resolution,
                           lights=args.lights, test_lights=args.test_lights, blobs=args.blobs,
                           noise=args.noise)
        P.generate_dataset(args.out, cfg, args.force)
    elif args.command == "search":
        cfg = P.SearchRunConfig(args.network, args.seed, args.epochs, args.batch_size, args.order,
                                args.xi, args.fd_scale, args.channels, not args.include_zero)
        P.run_search(args.data, args.out, cfg, args.force)
    elif args.command == "train":
        cfg = P.TrainRunConfig(args.network, args.seed, args.epochs, args.batch_size, args.lr,
                               weight_decay=args.weight_decay, lambda_aux=args.lambda_aux,
                               augment=args.augment)
        P.run_train(args.data, args.genotype, args.out, cfg, args.force)
    elif args.command == "eval":
        P.run_eval(args.light_ckpt, args.normal_ckpt, args.data, args.out, args.num_images,
                   args.gt_lights, args.split, args.force)
    elif args.command == "infer":
        P.run_infer(args.light_ckpt, args.normal_ckpt, args.images, args.out, args.force)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        return EXIT_DIVERGED
    except (ValueError, FileNotFoundError, ContainerError, CheckpointError, GenotypeError,
            RankDeficientLighting, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
