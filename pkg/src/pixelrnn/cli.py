"""Command-line driver: ``pixelrnn {train,eval,sample,complete,rf,ablate}``.

Exit status is 0 on success, 1 on usage or configuration errors and 2 on
data or numeric errors.
"""

import argparse
import csv
import sys
from dataclasses import fields

import numpy as np

from . import imageio
from .data import binarize, crop, load_config, load_images, split, subsample, write_raw
from .errors import ConfigurationError, DataError, NumericError
from .likelihood import write_report
from .network import HEADS, KINDS, Network, NetworkSpec
from .sampling import complete, sample
from .training import RunConfig, ablation_grid, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

SPEC_KEYS = {f.name for f in fields(NetworkSpec)}
RUN_KEYS = {f.name for f in fields(RunConfig)}
DATA_KEYS = {"data", "binarize", "crop", "subsample", "validation", "limit"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage().strip()}")


def _position(text):
    try:
        parts = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected row,col[,channel], got {text!r}") from None
    if len(parts) not in (2, 3):
        raise argparse.ArgumentTypeError(f"expected row,col[,channel], got {text!r}")
    return parts


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_data_args(p):
    p.add_argument("--data", help="IDX or raw dump image file")
    p.add_argument("--binarize", choices=("none", "stochastic", "threshold"),
                   help="default: stochastic for the bernoulli head, none otherwise")
    p.add_argument("--crop", type=int, help="centre crop to this side before subsampling")
    p.add_argument("--subsample", type=int, help="keep every k-th row and column")
    p.add_argument("--limit", type=int, help="use only the first N images")


def _add_spec_args(p):
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--depth", type=int)
    p.add_argument("--h", type=int)
    p.add_argument("--output-head", dest="output_head", choices=tuple(HEADS))
    p.add_argument("--head-width", dest="head_width", type=int)
    p.add_argument("--no-residual", dest="use_residual", action="store_const", const=False)
    p.add_argument("--no-skip", dest="use_skip", action="store_const", const=False)


def _add_run_args(p):
    p.add_argument("--config", help="key = value file; flags override its entries")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--time-budget", dest="time_budget", type=float)
    p.add_argument("--validation", type=int, help="validation images held out (default 10%%)")


def build_parser():
    parser = _Parser(prog="pixelrnn", description="Autoregressive image models: train, evaluate, sample.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="fit a network with RMSProp")
    _add_data_args(p)
    _add_spec_args(p)
    _add_run_args(p)
    p.add_argument("--checkpoint", default="model.pxsq", help="best-validation checkpoint path")
    p.add_argument("--metrics", help="per-step metrics CSV")

    p = sub.add_parser("eval", help="exact NLL report as CSV")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="CSV path (default: standard output)")

    p = sub.add_parser("sample", help="generate images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--argmax", action="store_true", help="most probable value at every step")
    p.add_argument("--out", default="samples", help="directory for PGM/PPM files")
    p.add_argument("--raw", help="also write a raw u8 dump here")

    p = sub.add_parser("complete", help="fill the occluded part of images")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="which image of --data to complete")
    p.add_argument("--image", help="PGM/PPM image instead of --data")
    p.add_argument("--occlude", default="bottom", help="bottom, center, or rows:K (keep the first K rows)")
    p.add_argument("--mode", choices=("auto", "exact", "clamp"), default="auto")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="completions")

    p = sub.add_parser("rf", help="print the dependency field of one output position")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--pos", type=_position, required=True, help="row,col[,channel]")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--output-head", dest="output_head", choices=tuple(HEADS), default="bernoulli")
    p.add_argument("--h", type=int, default=3)

    p = sub.add_parser("ablate", help="residual x skip grid and depth sweep")
    _add_data_args(p)
    _add_spec_args(p)
    _add_run_args(p)
    p.add_argument("--depths", type=_int_list, default=(1, 2, 3))
    p.add_argument("--grid-out", default="ablation_grid.csv")
    p.add_argument("--depth-out", default="ablation_depth.csv")
    return parser


# ---------------------------------------------------------------------------
# option plumbing


def _settings(args):
    """Merge the optional config file with command-line flags (flags win)."""
    conf = load_config(args.config) if getattr(args, "config", None) else {}
    unknown = set(conf) - SPEC_KEYS - RUN_KEYS - DATA_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in SPEC_KEYS | RUN_KEYS | DATA_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            conf[key] = value
    return conf


def _spec_from(conf):
    raw = {k: conf[k] for k in SPEC_KEYS if k in conf}
    spec = NetworkSpec.from_header({k: str(v) for k, v in raw.items()})
    return spec


def _dataset(conf, head):
    if not conf.get("data"):
        raise ConfigurationError("--data is required")
    ds = load_images(conf["data"])
    if conf.get("limit"):
        ds = ds.take(int(conf["limit"]))
    mode = conf.get("binarize") or ("stochastic" if HEADS[head][1] == 2 else "none")
    if mode != "none":
        ds = binarize(ds, mode, int(conf.get("seed", 0)))
    if conf.get("crop"):
        ds = crop(ds, int(conf["crop"]))
    if conf.get("subsample"):
        ds = subsample(ds, int(conf["subsample"]))
    if ds.channels != HEADS[head][0] or ds.levels != HEADS[head][1]:
        raise DataError(f"data with {ds.channels} channel(s) and {ds.levels} levels does not fit head {head!r}")
    return ds


def _train_val(conf, ds):
    val = conf.get("validation")
    val = int(val) if val is not None else max(1, len(ds) // 10)
    return split(ds, val, int(conf.get("seed", 0)))


def _run_config(conf):
    return RunConfig.from_mapping({k: conf[k] for k in RUN_KEYS if k in conf})


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, out):
    conf = _settings(args)
    spec = _spec_from(conf)
    cfg = _run_config(conf)
    ds = _dataset(conf, spec.output_head)
    train_set, val_set = _train_val(conf, ds)
    net = Network(spec, ds.side, cfg.seed)
    result = train(net, train_set, val_set, cfg, args.checkpoint, args.metrics, log=lambda m: print(m, file=out))
    print(f"best validation NLL {result.best_val_nll:.4f} nats at step {result.best_step}; "
          f"checkpoint {args.checkpoint}", file=out)


def _load_net(path):
    return Network.load(path)


def cmd_eval(args, out):
    net = _load_net(args.checkpoint)
    conf = _settings(args)
    ds = _dataset(conf, net.spec.output_head)
    report = evaluate(net, ds, split=args.split)
    if args.out:
        write_report(args.out, [report])
        print(f"{report.split}: {report.nats_per_image:.4f} nats/image, {report.bits_per_dim:.4f} bits/dim",
              file=out)
    else:
        w = csv.writer(out)
        w.writerow(report.FIELDS)
        w.writerow(report.row())


def cmd_sample(args, out):
    net = _load_net(args.checkpoint)
    result = sample(net, args.count, args.seed, args.temperature, argmax=args.argmax)
    paths = imageio.write_images(args.out, result.images, levels=net.spec.levels)
    if args.raw:
        write_raw(args.raw, result.images)
    print(f"wrote {len(paths)} images to {args.out}", file=out)


def _occlusion(spec, n):
    occ = np.ones((n, n), dtype=bool)
    if spec == "bottom":
        occ[n // 2:] = False
    elif spec == "center":
        q = n // 4
        occ[q:n - q, q:n - q] = False
    elif spec.startswith("rows:"):
        try:
            k = int(spec[5:])
        except ValueError:
            raise ConfigurationError(f"bad occlusion {spec!r}") from None
        occ[k:] = False
    else:
        raise ConfigurationError(f"occlusion must be bottom, center or rows:K, got {spec!r}")
    return occ


def cmd_complete(args, out):
    net = _load_net(args.checkpoint)
    if args.image:
        image = imageio.read_pnm(args.image).astype(np.int64)
        if net.spec.levels == 2:
            image = (image >= 128).astype(np.int64)
    else:
        ds = _dataset(_settings(args), net.spec.output_head)
        if not 0 <= args.index < len(ds):
            raise ConfigurationError(f"--index {args.index} out of range for {len(ds)} images")
        image = ds.images[args.index].astype(np.int64)
    occ = _occlusion(args.occlude, net.n)
    result, mode = complete(net, image, occ, args.seed, args.count, args.mode)
    levels = net.spec.levels
    masked = image.copy()
    masked[:, ~occ] = 0
    imageio.write_images(args.out, masked[None], prefix="occluded", levels=levels)
    imageio.write_images(args.out, image[None], prefix="original", levels=levels)
    paths = imageio.write_images(args.out, result.images, prefix="completion", levels=levels)
    print(f"{mode} completion: wrote {len(paths)} images to {args.out}", file=out)


def render_field(field, n, channels, position):
    """ASCII grid per channel: ``#`` depended on, ``@`` the queried sub-pixel, ``.`` otherwise."""
    row, col = position[0], position[1]
    ch = position[2] if len(position) > 2 else 0
    names = "RGB" if channels == 3 else "X"
    lines = []
    for c in range(channels):
        if channels > 1:
            lines.append(f"[{names[c]}]")
        for r in range(n):
            cells = []
            for k in range(n):
                if (r, k, c) == (row, col, ch):
                    cells.append("@")
                else:
                    cells.append("#" if (r, k, c) in field else ".")
            lines.append(" ".join(cells))
    return "\n".join(lines)


def cmd_rf(args, out):
    from .network import preceding_set

    G = HEADS[args.output_head][0]
    h = args.h * G if args.h % G else args.h
    spec = NetworkSpec(kind=args.kind, depth=args.depth, h=h, output_head=args.output_head, head_width=4 * G)
    net = Network(spec, args.n, 0)
    field = net.dependency_field(args.pos)
    pos = tuple(args.pos) + ((0,) if len(args.pos) == 2 else ())
    full = preceding_set(args.n, pos, G)
    print(render_field(field, args.n, G, pos), file=out)
    status = "full preceding context" if field == full else f"{len(full - field)} preceding sub-pixels unreachable"
    print(f"{len(field)} of {len(full)} preceding sub-pixels: {status}", file=out)


def cmd_ablate(args, out):
    conf = _settings(args)
    spec = _spec_from(conf)
    cfg = _run_config(conf)
    ds = _dataset(conf, spec.output_head)
    train_set, val_set = _train_val(conf, ds)
    result = ablation_grid(spec, ds.side, train_set, val_set, cfg, depths=args.depths,
                           log=lambda m: print(m, file=out))
    result.write_csv(args.grid_out, args.depth_out)
    print(f"wrote {args.grid_out} and {args.depth_out}", file=out)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample, "complete": cmd_complete,
            "rf": cmd_rf, "ablate": cmd_ablate}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(exc, file=err)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"pixelrnn: error: {exc}", file=err)
        return EXIT_USAGE
    except (DataError, NumericError, OSError) as exc:
        print(f"pixelrnn: error: {exc}", file=err)
        return EXIT_DATA
    return EXIT_OK


def entry():
    sys.exit(main())
