"""Command-line front end: flow, eval, bench, train.

Configuration is a flat key=value text file; command-line flags override
file values. Exit codes: 0 success, 2 usage error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import costvol, crf, io, learn, report
from .descriptors import (
    census_transform,
    load_descriptor_field,
    load_theta,
    quantize,
    tiny_extractor_forward,
    write_theta,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Effective run configuration; dump() round-trips through parse()."""

    d: int = 128
    alpha: float = 8.5
    tau1: float = 0.25
    tau2: float = 25.0
    it_inner: int = 8
    it_outer: int = 5
    mode: str = "Q"
    variant: str = "QQ"
    descriptor: str = "census"
    threads: int = 0
    seed: int = 0
    scale_note: str = ""  # informational only, e.g. "inputs downscaled to 1/2"

    def validate(self) -> None:
        problems = []
        if self.d <= 0 or self.d % 2:
            problems.append(f"d must be an even positive integer, got {self.d}")
        if self.mode not in ("F", "Q"):
            problems.append(f"mode must be F or Q, got {self.mode!r}")
        if self.variant not in costvol.VARIANTS:
            problems.append(f"variant must be one of {costvol.VARIANTS}, got {self.variant!r}")
        if self.it_inner < 1:
            problems.append(f"it_inner must be >= 1, got {self.it_inner}")
        if self.it_outer < 0:
            problems.append(f"it_outer must be >= 0, got {self.it_outer}")
        if self.tau1 <= 0:
            problems.append(f"tau1 must be positive, got {self.tau1}")
        if self.tau2 <= 0:
            problems.append(f"tau2 must be positive, got {self.tau2}")
        if self.threads < 0:
            problems.append(f"threads must be >= 0, got {self.threads}")
        desc = self.descriptor
        if not (desc == "census" or desc.startswith("file:") or desc.startswith("tiny:")):
            problems.append(f"descriptor must be census, file:<path> or tiny:<path>, got {desc!r}")
        if problems:
            raise UsageError("; ".join(problems))

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    casts = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in casts:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        kind = casts[key]
        try:
            if kind in ("int", int):
                updates[key] = int(value)
            elif kind in ("float", float):
                updates[key] = float(value)
            else:
                updates[key] = value
        except ValueError as exc:
            raise UsageError(f"config line {lineno}: bad value for {key}: {value!r}") from exc
    return replace(cfg, **updates)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            raise UsageError(f"cannot read config file {args.config!r}: {exc}") from exc
        cfg = parse_config_text(text, cfg)
    overrides = {}
    for key in ("d", "alpha", "tau1", "tau2", "it_inner", "it_outer", "mode", "variant", "descriptor", "threads", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    cfg = replace(cfg, **overrides)
    cfg.validate()
    if cfg.threads:
        import numba

        numba.set_num_threads(min(cfg.threads, numba.config.NUMBA_NUM_THREADS))
    return cfg


def _build_descriptors(img1, img2, cfg: RunConfig):
    """Returns (float fields or None, packed fields or None) per config."""
    desc = cfg.descriptor
    if desc == "census":
        return None, (census_transform(img1), census_transform(img2))
    if desc.startswith("tiny:"):
        theta = load_theta(desc[5:])
        f1 = tiny_extractor_forward(img1, theta)
        f2 = tiny_extractor_forward(img2, theta)
        return (f1, f2), (quantize(f1), quantize(f2))
    if desc.startswith("file:"):
        spec = desc[5:]
        if "," not in spec:
            raise UsageError(f"descriptor file:{spec!r} needs two comma-separated paths, one per image")
        path1, path2 = (s.strip() for s in spec.split(",", 1))
        f1 = load_descriptor_field(path1)
        f2 = load_descriptor_field(path2)
        return (f1, f2), (quantize(f1), quantize(f2))
    raise UsageError(f"bad descriptor spec {desc!r}")


def cmd_flow(args) -> int:
    cfg = _config_from_args(args)
    for path in (args.image1, args.image2):
        if not os.path.exists(path):
            print(f"error: input file not found: {path}", file=sys.stderr)
            return EXIT_DATA
    img1 = io.load_image(args.image1)
    img2 = io.load_image(args.image2)
    if img1.shape != img2.shape:
        print(f"error: image shapes differ: {img1.shape} vs {img2.shape}", file=sys.stderr)
        return EXIT_DATA

    t0 = time.perf_counter()
    floats, packed = _build_descriptors(img1, img2, cfg)
    t_feat = time.perf_counter() - t0
    if cfg.mode == "F" and floats is None:
        print("error: mode=F requires float descriptors (census provides only bits)", file=sys.stderr)
        return EXIT_USAGE
    window = costvol.SearchWindow(cfg.d)

    variant = cfg.variant
    if floats is None and variant != "QQ":
        print(f"error: variant={variant} requires float descriptors, census provides only bits", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    pair = costvol.min_project(
        floats[0] if floats else None,
        floats[1] if floats else None,
        window,
        variant,
        desc1_q=packed[0] if packed else None,
        desc2_q=packed[1] if packed else None,
    )
    u, v = costvol.wta(pair)
    t_wta = time.perf_counter() - t0

    t_full = 0.0
    trace = None
    if cfg.it_outer > 0:
        params = crf.CrfParams(
            d=cfg.d, alpha=cfg.alpha, tau1=cfg.tau1, tau2=cfg.tau2,
            it_inner=cfg.it_inner, it_outer=cfg.it_outer, mode=cfg.mode,
        )
        d1, d2 = (packed if cfg.mode == "Q" else floats)
        t0 = time.perf_counter()
        (u, v), trace, _ = crf.optimize(d1, d2, img1, params, record_energy=bool(args.trace))
        t_full = time.perf_counter() - t0

    io.write_flo(args.output, u, v)
    if args.color:
        io.write_image(args.color, io.flow_to_color(u, v))
    if args.trace and trace is not None:
        with open(args.trace, "w", encoding="utf-8") as f:
            f.write("\n".join(trace.csv_lines()) + "\n")
        figure = os.path.splitext(args.trace)[0] + ".png"
        report.save_trace_figure(
            figure,
            [r.step for r in trace.records],
            [r.psi for r in trace.records],
            [r.energy for r in trace.records],
        )
    print(f"feature extraction: {t_feat:.3f} s")
    print(f"wta:                {t_wta:.3f} s")
    print(f"full model:         {t_full:.3f} s")
    return EXIT_OK


def cmd_eval(args) -> int:
    u, v = io.read_flo(args.flow)
    gu, gv = io.read_flo(args.gt)
    mask = io.read_mask(args.mask) if args.mask else None
    stats = io.endpoint_error(u, v, gu, gv, mask)
    print(f"{stats.epe_noc:.2f} ({stats.epe_all:.2f})")
    return EXIT_OK


def _parse_sizes(tokens: list[str]) -> list[tuple[int, int]]:
    sizes = []
    for tok in tokens:
        try:
            h, w = (int(x) for x in tok.lower().split("x"))
        except ValueError as exc:
            raise UsageError(f"bad size {tok!r}, expected HxW") from exc
        sizes.append((h, w))
    return sizes


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    sizes = _parse_sizes(args.sizes)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    window = costvol.SearchWindow(cfg.d)
    if sizes:
        # warm every kernel on a tiny slice so compilation stays out of timings
        wb = rng.integers(0, 2**64, (2, 8, 8), dtype=np.uint64)
        wf = rng.uniform(-1, 1, (2, 8, 8, 64))
        wwin = costvol.SearchWindow(4)
        costvol.min_project(None, None, wwin, "QQ", desc1_q=wb[0], desc2_q=wb[1])
        costvol.min_project(wf[0], wf[1], wwin, "FF")
        wz = np.zeros((8, 8, 4))
        crf.pass_v_to_u(wz, wz, wb[0], wb[1], wwin, "Q")
        crf.pass_v_to_u(wz, wz, wf[0], wf[1], wwin, "F")
    for h, w in sizes:
        bits = rng.integers(0, 2**64, (2, h, w), dtype=np.uint64)
        signs1 = ((bits[0][:, :, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1))
        signs2 = ((bits[1][:, :, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1))
        f1 = np.where(signs1 == 1, 1.0, -1.0)
        f2 = np.where(signs2 == 1, 1.0, -1.0)

        t0 = time.perf_counter()
        pair_q = costvol.min_project(None, None, window, "QQ", desc1_q=bits[0], desc2_q=bits[1])
        t_q = time.perf_counter() - t0

        t0 = time.perf_counter()
        pair_f = costvol.min_project(f1, f2, window, "FF")
        t_f = time.perf_counter() - t0

        # correctness guard: on +-1 embeddings the two kernels agree
        uq, vq = costvol.wta(pair_q)
        uf, vf = costvol.wta(pair_f)
        if not (np.array_equal(uq, uf) and np.array_equal(vq, vf)):
            print("error: Q and F winner-takes-all disagree on +-1 embeddings", file=sys.stderr)
            return EXIT_NUMERIC

        lam3 = np.zeros((h, w, cfg.d))
        lam4 = np.zeros((h, w, cfg.d))
        t0 = time.perf_counter()
        crf.pass_v_to_u(lam3, lam4, bits[0], bits[1], window, "Q")
        t_pass_q = time.perf_counter() - t0
        t0 = time.perf_counter()
        crf.pass_v_to_u(lam3, lam4, f1, f2, window, "F")
        t_pass_f = time.perf_counter() - t0

        rows.append({"kernel": "minproj_Q", "height": h, "width": w, "d": cfg.d, "seconds": t_q, "speedup": t_f / t_q})
        rows.append({"kernel": "minproj_F", "height": h, "width": w, "d": cfg.d, "seconds": t_f, "speedup": 1.0})
        rows.append({"kernel": "pass_Q", "height": h, "width": w, "d": cfg.d, "seconds": t_pass_q, "speedup": t_pass_f / t_pass_q})
        rows.append({"kernel": "pass_F", "height": h, "width": w, "d": cfg.d, "seconds": t_pass_f, "speedup": 1.0})

    lines = ["kernel,H,W,D,seconds,speedup"]
    for r in rows:
        lines.append(f"{r['kernel']},{r['height']},{r['width']},{r['d']},{r['seconds']:.9f},{r['speedup']:.3f}")
    text = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            f.write(text)
        report.save_bench_figure(os.path.splitext(args.output)[0] + ".png", rows)
    print(text, end="")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    train_cfg = learn.TrainConfig(
        learning_rate=args.lr, steps=args.steps, scheme=args.scheme, seed=cfg.seed, d=cfg.d, k=args.k
    )
    window = costvol.SearchWindow(cfg.d)
    samples = []
    if not os.path.isdir(args.dataset):
        print(f"error: dataset directory not found: {args.dataset}", file=sys.stderr)
        return EXIT_DATA
    for name in sorted(os.listdir(args.dataset)):
        sub = os.path.join(args.dataset, name)
        if not os.path.isdir(sub):
            continue
        paths = [os.path.join(sub, fn) for fn in ("img1.ppm", "img2.ppm", "gt.flo")]
        if not all(os.path.exists(p) for p in paths):
            continue
        try:
            img1 = io.load_image(paths[0])
            img2 = io.load_image(paths[1])
            gu, gv = io.read_flo(paths[2])
        except io.FormatError as exc:
            print(f"error: bad sample {name!r}: {exc}", file=sys.stderr)
            return EXIT_DATA
        samples.append((img1, img2, learn.TargetFlow.from_flow(gu, gv, window)))
    if not samples:
        print(f"error: no samples (img1.ppm, img2.ppm, gt.flo) under {args.dataset!r}", file=sys.stderr)
        return EXIT_DATA
    try:
        theta, losses = learn.train(samples, train_cfg)
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_theta(args.output, theta)
    if args.loss_csv:
        with open(args.loss_csv, "w", encoding="utf-8") as f:
            f.write("step,loss\n")
            for i, loss in enumerate(losses):
                f.write(f"{i},{loss!r}\n")
        report.save_loss_figure(os.path.splitext(args.loss_csv)[0] + ".png", losses)
    if losses:
        print(f"steps: {len(losses)}  initial loss: {losses[0]:.6f}  final loss: {losses[-1]:.6f}")
    else:
        print("steps: 0 (checkpoint equals initialization)")
    return EXIT_OK


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key=value config file; flags override")
    sub.add_argument("--d", type=int, help="search window size (even)")
    sub.add_argument("--alpha", type=float, help="contrast weight strength")
    sub.add_argument("--tau1", type=float, help="penalty slope")
    sub.add_argument("--tau2", type=float, help="penalty truncation")
    sub.add_argument("--it-inner", dest="it_inner", type=int, help="in-plane sweeps per step")
    sub.add_argument("--it-outer", dest="it_outer", type=int, help="outer iterations (0 = local model only)")
    sub.add_argument("--mode", choices=("F", "Q"), help="cost mode for the joint model")
    sub.add_argument("--variant", choices=costvol.VARIANTS, help="local model variant")
    sub.add_argument("--descriptor", help="census | file:<path> | tiny:<theta path>")
    sub.add_argument("--threads", type=int, help="worker threads (0 = library default)")
    sub.add_argument("--seed", type=int, help="seed for synthetic data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="binflow", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("flow", help="estimate flow for an image pair")
    p.add_argument("image1")
    p.add_argument("image2")
    p.add_argument("-o", "--output", required=True, help="output .flo path")
    p.add_argument("--color", help="write a color visualization image here")
    p.add_argument("--trace", help="write the bound trace CSV (and .png figure) here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_flow)

    p = subs.add_parser("eval", help="endpoint error of a flow against ground truth")
    p.add_argument("flow")
    p.add_argument("gt")
    p.add_argument("--mask", help="non-occlusion mask image (nonzero = counted)")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("bench", help="time F vs Q kernels on synthetic data")
    p.add_argument("sizes", nargs="*", default=[], help="sizes like 256x128")
    p.add_argument("-o", "--output", help="CSV output path (figure written alongside)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = subs.add_parser("train", help="train the tiny extractor on sample directories")
    p.add_argument("dataset", help="directory of sample subdirs (img1.ppm, img2.ppm, gt.flo)")
    p.add_argument("-o", "--output", required=True, help="THT1 checkpoint path")
    p.add_argument("--loss-csv", help="loss trace CSV path (figure written alongside)")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--scheme", choices=learn.SCHEMES, default="FF")
    p.add_argument("--k", type=int, default=4, help="hidden channels of the extractor")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except io.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
