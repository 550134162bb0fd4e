"""Command-line entry point: pca-fit, reconstruct, evaluate, ablate, serve.

Flag values override --config file entries, which override built-in defaults;
the merged configuration is echoed to effective_config.json in the output
directory of every command that writes one. Exit codes: 0 success, 1 error,
2 usage, 3 budget exhausted, 4 connection failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import eigenspace, netbox, verify
from .eigenspace import EigenBasis, ImageTensor, fit_pca, load_basis, read_png, save_basis, synthesize, write_png
from .optimizer import OptimizerConfig, darkerbb, write_trace_csv
from .oracle import (
    BudgetExhausted,
    OracleError,
    SimilarityOracle,
    SyntheticEmbedder,
    cosine,
    make_cosine_oracle,
    quantize_pixels_f32,
    wrap_noise,
    wrap_quantize,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_BUDGET = 3
EXIT_CONNECTION = 4

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}

# (name, built-in default) for every option that --config may supply.
_MERGED_DEFAULTS = {
    "seed": 0,
    "sigma": 0.3,
    "lr": None,
    "restarts": 10,
    "restart_iters": 500,
    "main_iters": 15000,
    "trace_every": 1,
    "init_stddev": 0.0,
    "clamp_probes": False,
    "budget": None,
    "quantize_bits": None,
    "noise_std": None,
    "embed_dim": 128,
    "flip_concat": False,
    "oracle": None,
    "target": None,
    "transfer_seed": None,
    "trials": 3,
    "folds": 10,
}


def parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise ValueError(f"resolution must look like 64x64, got {text!r}") from exc


def parse_oracle_spec(spec: str) -> tuple[str, str]:
    kind, _, rest = spec.partition(":")
    if kind not in ("builtin", "remote") or not rest:
        raise ValueError(
            f"oracle spec must be builtin:<seed> or remote:<host:port>, got {spec!r}"
        )
    return kind, rest


def list_image_files(directory: str) -> list[str]:
    names = sorted(
        n for n in os.listdir(directory)
        if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS
    )
    if not names:
        raise ValueError(f"no decodable images in {directory}")
    return [os.path.join(directory, n) for n in names]


def load_enrollment(directory: str, size: tuple[int, int], grayscale: bool) -> dict[str, ImageTensor]:
    images = {}
    for path in list_image_files(directory):
        stem = os.path.splitext(os.path.basename(path))[0]
        images[stem] = read_png(path, size=size, grayscale=grayscale)
    return images


def merged_options(args: argparse.Namespace) -> dict:
    """flags > config file > defaults, restricted to the merged option table."""
    config = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            config = json.load(fh)
        unknown = set(config) - set(_MERGED_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    merged = {}
    for key, default in _MERGED_DEFAULTS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
        elif key in config:
            merged[key] = config[key]
        else:
            merged[key] = default
    return merged


def optimizer_config(opts: dict) -> OptimizerConfig:
    return OptimizerConfig(
        sigma=float(opts["sigma"]),
        learning_rate=None if opts["lr"] is None else float(opts["lr"]),
        n_restarts=int(opts["restarts"]),
        restart_iters=int(opts["restart_iters"]),
        main_iters=int(opts["main_iters"]),
        seed=int(opts["seed"]),
        trace_every=int(opts["trace_every"]),
        init_stddev=float(opts["init_stddev"]),
        clamp_probes=bool(opts["clamp_probes"]),
    )


def build_builtin_oracle(
    opts: dict, enrollment: dict[str, ImageTensor], dims: tuple[int, int, int]
) -> SimilarityOracle:
    w, h, c = dims
    embedder = SyntheticEmbedder(
        seed=int(opts["oracle_seed"]),
        embed_dim=int(opts["embed_dim"]),
        width=w,
        height=h,
        channels=c,
        flip_concat=bool(opts["flip_concat"]),
    )
    oracle: SimilarityOracle = make_cosine_oracle(embedder, enrollment, opts["budget"])
    if opts["noise_std"]:
        oracle = wrap_noise(oracle, float(opts["noise_std"]), int(opts["seed"]))
    if opts["quantize_bits"]:
        oracle = wrap_quantize(oracle, int(opts["quantize_bits"]))
    return oracle


def echo_config(out_dir: str, opts: dict, extra: dict | None = None) -> None:
    payload = dict(opts)
    if extra:
        payload.update(extra)
    with open(os.path.join(out_dir, "effective_config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_pca_fit(args) -> int:
    size = parse_resolution(args.resolution)
    images = [
        read_png(p, size=size, grayscale=args.grayscale)
        for p in list_image_files(args.image_dir)
    ]
    basis = fit_pca(images, args.rank)
    data = np.stack([img.pixels for img in images])
    total_var = float(((data - data.mean(axis=0)) ** 2).sum() / (len(images) - 1))
    retained = float((basis.component_stds**2).sum() / total_var)
    save_basis(basis, args.out)
    print(f"d={basis.dim} k={basis.rank} retained_variance={retained:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _final_score(trace) -> float | None:
    return trace.rows[-1].score if trace.rows else None


def cmd_reconstruct(args) -> int:
    opts = merged_options(args)
    if opts["oracle"] is None or opts["target"] is None:
        raise ValueError("reconstruct needs --oracle and --target")
    basis = load_basis(args.basis)
    enrollment = None
    if args.enroll_dir:
        enrollment = load_enrollment(
            args.enroll_dir, (basis.width, basis.height), basis.channels == 1
        )
    kind, rest = parse_oracle_spec(opts["oracle"])
    if kind == "builtin":
        if enrollment is None:
            raise ValueError("builtin oracle needs --enroll-dir")
        opts["oracle_seed"] = int(rest)
        oracle = build_builtin_oracle(
            opts, enrollment, (basis.width, basis.height, basis.channels)
        )
    else:
        oracle = netbox.remote_oracle(rest, opts["target"], opts["budget"])

    transfer_scorer = None
    if opts["transfer_seed"] is not None:
        if enrollment is None or opts["target"] not in enrollment:
            raise ValueError("--transfer-seed needs --enroll-dir containing the target")
        transfer = SyntheticEmbedder(
            seed=int(opts["transfer_seed"]),
            embed_dim=int(opts["embed_dim"]),
            width=basis.width,
            height=basis.height,
            channels=basis.channels,
            flip_concat=bool(opts["flip_concat"]),
        )
        genuine_emb = transfer.embed(quantize_pixels_f32(enrollment[opts["target"]]))

        def transfer_scorer(img):
            return cosine(transfer.embed(quantize_pixels_f32(img)), genuine_emb)

    config = optimizer_config(opts)
    os.makedirs(args.out_dir, exist_ok=True)
    echo_config(args.out_dir, opts, {"basis": args.basis, "out_dir": args.out_dir})

    try:
        image, trace = darkerbb(
            basis, oracle, opts["target"], config, transfer_scorer=transfer_scorer
        )
    except netbox.ConnectionFailed as exc:
        if exc.partial_trace is not None:
            write_trace_csv(exc.partial_trace, os.path.join(args.out_dir, "trace.csv"))
        raise

    write_png(image, os.path.join(args.out_dir, "reconstruction.png"))
    coords = np.asarray(trace.final_coords, dtype="<f4")
    with open(os.path.join(args.out_dir, "coords.f32"), "wb") as fh:
        fh.write(coords.tobytes())
    write_trace_csv(trace, os.path.join(args.out_dir, "trace.csv"))
    print(
        f"queries={oracle.ledger.used} selected_restart={trace.selected_restart} "
        f"final_score={_final_score(trace)}"
    )
    if trace.exhausted:
        print("budget exhausted before the schedule completed", file=sys.stderr)
        return EXIT_BUDGET
    return EXIT_OK


def cmd_evaluate(args) -> int:
    opts = merged_options(args)
    if opts["oracle"] is None:
        raise ValueError("evaluate needs --oracle builtin:<seed> for the embedder")
    kind, rest = parse_oracle_spec(opts["oracle"])
    if kind != "builtin":
        raise ValueError("evaluate embeds locally; only builtin:<seed> is supported")
    records = verify.read_pairs_file(args.pairs)
    if not records:
        raise ValueError(f"{args.pairs}: no pair rows")

    cache: dict[str, ImageTensor] = {}

    def load(path: str) -> ImageTensor:
        if path not in cache:
            cache[path] = read_png(path)
        return cache[path]

    positives, negatives = [], []
    for rec in records:
        if rec.label == 1:
            recon_path = os.path.join(args.recon_dir, f"{rec.id_a}.png")
            if not os.path.exists(recon_path):
                raise ValueError(f"missing reconstruction for {rec.id_a}: {recon_path}")
            positives.append((load(recon_path), load(rec.path_b)))
        else:
            negatives.append((load(rec.path_a), load(rec.path_b)))

    first = next(iter(cache.values()))
    dims = {(img.width, img.height, img.channels) for img in cache.values()}
    if len(dims) != 1:
        raise ValueError(f"pair images disagree on dimensions: {sorted(dims)}")
    embedder = SyntheticEmbedder(
        seed=int(rest),
        embed_dim=int(opts["embed_dim"]),
        width=first.width,
        height=first.height,
        channels=first.channels,
        flip_concat=bool(opts["flip_concat"]),
    )
    report = verify.evaluate_replacement(positives, negatives, embedder, int(opts["folds"]))
    os.makedirs(args.out_dir, exist_ok=True)
    echo_config(args.out_dir, opts, {"pairs": args.pairs, "recon_dir": args.recon_dir})
    out_path = os.path.join(args.out_dir, "report.csv")
    verify.write_fold_report(report, out_path)
    print(f"mean_accuracy={report.mean_accuracy:.4f} folds={report.folds}")
    print(f"wrote {out_path}")
    return EXIT_OK


def _parse_sweep(text: str | None, cast) -> list:
    return [cast(v) for v in text.split(",")] if text else []


def cmd_ablate(args) -> int:
    opts = merged_options(args)
    if opts["oracle"] is None or opts["target"] is None:
        raise ValueError("ablate needs --oracle builtin:<seed> and --target")
    kind, rest = parse_oracle_spec(opts["oracle"])
    if kind != "builtin":
        raise ValueError("ablate sweeps rebuild oracles; only builtin:<seed> is supported")
    opts["oracle_seed"] = int(rest)
    transfer_seed = opts["transfer_seed"]
    if transfer_seed is None:
        transfer_seed = int(rest) + 1000

    axes: list[tuple[str, list]] = []
    if args.sweep_k:
        axes.append(("k", _parse_sweep(args.sweep_k, int)))
    if args.sweep_sigma:
        axes.append(("sigma", _parse_sweep(args.sweep_sigma, float)))
    if args.sweep_restarts:
        axes.append(("restarts", _parse_sweep(args.sweep_restarts, int)))
    if args.sweep_iters:
        axes.append(("main_iters", _parse_sweep(args.sweep_iters, int)))
    if not axes:
        raise ValueError("ablate needs at least one sweep axis")
    if any(axis == "k" for axis, _ in axes) and not args.train_dir:
        raise ValueError("sweeping k refits the basis; pass --train-dir")
    if not any(axis == "k" for axis, _ in axes) and not args.basis:
        raise ValueError("pass --basis (or sweep k with --train-dir)")

    base_basis = load_basis(args.basis) if args.basis else None
    train_images: list[ImageTensor] | None = None
    if args.train_dir:
        size = parse_resolution(args.resolution)
        train_images = [
            read_png(p, size=size, grayscale=args.grayscale)
            for p in list_image_files(args.train_dir)
        ]

    os.makedirs(args.out_dir, exist_ok=True)
    echo_config(args.out_dir, opts, {"axes": {a: v for a, v in axes}})
    out_path = os.path.join(args.out_dir, "ablate.csv")
    rows = ["axis,value,seed,target_similarity,transfer_similarity"]

    for axis, values in axes:
        for value in values:
            if axis == "k":
                max_rank = min(train_images[0].dim, len(train_images) - 1)
                if not 1 <= value <= max_rank:
                    print(f"skip k={value}: rank must be in [1, {max_rank}]", file=sys.stderr)
                    continue
                basis = fit_pca(train_images, value)
            else:
                basis = base_basis if base_basis is not None else fit_pca(
                    train_images, min(train_images[0].dim, len(train_images) - 1)
                )
            enrollment = load_enrollment(
                args.enroll_dir, (basis.width, basis.height), basis.channels == 1
            )
            if opts["target"] not in enrollment:
                raise ValueError(f"target {opts['target']!r} not in {args.enroll_dir}")
            genuine = enrollment[opts["target"]]
            dims = (basis.width, basis.height, basis.channels)
            transfer = SyntheticEmbedder(
                seed=int(transfer_seed),
                embed_dim=int(opts["embed_dim"]),
                width=dims[0], height=dims[1], channels=dims[2],
                flip_concat=bool(opts["flip_concat"]),
            )
            genuine_t = transfer.embed(quantize_pixels_f32(genuine))
            for trial in range(int(opts["trials"])):
                run = dict(opts)
                run["seed"] = int(opts["seed"]) + trial
                if axis == "sigma":
                    run["sigma"] = value
                elif axis == "restarts":
                    run["restarts"] = value
                elif axis == "main_iters":
                    run["main_iters"] = value
                oracle = build_builtin_oracle(run, enrollment, dims)
                config = optimizer_config(run)
                image, _ = darkerbb(basis, oracle, opts["target"], config)
                target_emb = oracle  # builtin cosine oracle scores without budget
                target_sim = _rescore(target_emb, image, opts["target"])
                transfer_sim = cosine(
                    transfer.embed(quantize_pixels_f32(image)), genuine_t
                )
                rows.append(
                    f"{axis},{value},{run['seed']},{target_sim!r},{transfer_sim!r}"
                )
    with open(out_path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"wrote {out_path} ({len(rows) - 1} rows)")
    return EXIT_OK


def _rescore(oracle: SimilarityOracle, image: ImageTensor, target: str) -> float:
    """Final similarity without spending budget: re-embed with the oracle's embedder."""
    inner = oracle
    while not hasattr(inner, "embedder"):
        inner = inner.inner
    probe = inner.embedder.embed(quantize_pixels_f32(image))
    return cosine(probe, inner._enrolled[target])


def cmd_serve(args) -> int:
    opts = merged_options(args)
    if opts["oracle"] is None:
        raise ValueError("serve needs --oracle builtin:<seed>")
    kind, rest = parse_oracle_spec(opts["oracle"])
    if kind != "builtin":
        raise ValueError("serve hosts a builtin oracle; got a remote spec")
    opts["oracle_seed"] = int(rest)
    size = parse_resolution(args.resolution)
    enrollment = load_enrollment(args.enroll_dir, size, args.grayscale)
    dims = (size[0], size[1], 1 if args.grayscale else 3)
    run = dict(opts)
    run["budget"] = None  # per-target budgets are enforced by the server
    oracle = build_builtin_oracle(run, enrollment, dims)
    server = netbox.OracleServer(
        oracle, bind_address=args.bind, per_target_budget=opts["budget"]
    )
    print(f"serving on {server.address} (protocol v{netbox.PROTOCOL_VERSION})")
    print(f"targets: {' '.join(sorted(enrollment))}")
    try:
        server.run_forever()
    except KeyboardInterrupt:
        print("interrupted, shutting down")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser, *, config: bool = True) -> None:
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    if config:
        parser.add_argument("--config", default=None, help="JSON file of option defaults")


def _add_optimizer_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--sigma", type=float, default=None, help="perturbation scale (default 0.3)")
    parser.add_argument("--lr", type=float, default=None, help="learning rate (default 0.02/rank)")
    parser.add_argument("--restarts", type=int, default=None, help="short climbs to try first (default 10)")
    parser.add_argument("--restart-iters", type=int, default=None, help="iterations per restart (default 500)")
    parser.add_argument("--main-iters", type=int, default=None, help="iterations of the main phase (default 15000)")
    parser.add_argument("--trace-every", type=int, default=None, help="log every Nth iteration (default 1)")
    parser.add_argument("--init-stddev", type=float, default=None, help="Gaussian restart init stddev (default 0 = zero vector)")
    parser.add_argument("--clamp-probes", action=argparse.BooleanOptionalAction, default=None, help="clip probe images to [0,1] before querying")


def _add_oracle_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--oracle", default=None, help="builtin:<seed> or remote:<host:port>")
    parser.add_argument("--budget", type=int, default=None, help="query budget (default unlimited)")
    parser.add_argument("--embed-dim", type=int, default=None, help="synthetic embedding width (default 128)")
    parser.add_argument("--flip-concat", action=argparse.BooleanOptionalAction, default=None, help="concatenate the mirrored image's embedding")
    parser.add_argument("--quantize-bits", type=int, default=None, help="quantize scores to 2/2^bits steps")
    parser.add_argument("--noise-std", type=float, default=None, help="add seeded Gaussian score noise")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simrecon",
        description="Reconstruct images from similarity-only black-box feedback.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pca-fit", help="fit an eigenbasis from an image directory")
    p.add_argument("image_dir")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--resolution", default="64x64")
    p.add_argument("--grayscale", action="store_true")
    p.add_argument("--out", required=True, help="basis file to write")
    p.set_defaults(func=cmd_pca_fit)

    p = sub.add_parser("reconstruct", help="run the full multi-start reconstruction")
    p.add_argument("--basis", required=True)
    p.add_argument("--target", default=None)
    p.add_argument("--enroll-dir", default=None)
    p.add_argument("--transfer-seed", type=int, default=None,
                   help="also log similarity under a second embedder with this seed")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    _add_oracle_flags(p)
    _add_optimizer_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="K-fold verification accuracy with replacement")
    p.add_argument("--pairs", required=True, help="CSV of id_a,path_a,id_b,path_b,label")
    p.add_argument("--recon-dir", required=True, help="directory of <id>.png reconstructions")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    _add_oracle_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="hyperparameter sweeps with transfer scoring")
    p.add_argument("--basis", default=None)
    p.add_argument("--train-dir", default=None, help="training images (required for k sweeps)")
    p.add_argument("--resolution", default="64x64")
    p.add_argument("--grayscale", action="store_true")
    p.add_argument("--target", default=None)
    p.add_argument("--enroll-dir", required=True)
    p.add_argument("--transfer-seed", type=int, default=None)
    p.add_argument("--trials", type=int, default=None, help="seeds per grid point (default 3)")
    p.add_argument("--sweep-k", default=None, help="comma list of ranks")
    p.add_argument("--sweep-sigma", default=None, help="comma list of sigmas")
    p.add_argument("--sweep-restarts", default=None, help="comma list of restart counts")
    p.add_argument("--sweep-iters", default=None, help="comma list of main iteration counts")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    _add_oracle_flags(p)
    _add_optimizer_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="host an oracle over HTTP")
    p.add_argument("--enroll-dir", required=True)
    p.add_argument("--resolution", default="64x64")
    p.add_argument("--grayscale", action="store_true")
    p.add_argument("--bind", default="127.0.0.1:8650")
    _add_common(p)
    _add_oracle_flags(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BudgetExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except netbox.ConnectionFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONNECTION
    except (OracleError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
