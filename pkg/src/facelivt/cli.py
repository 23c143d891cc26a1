"""Command-line surface: build, fuse, verify, cost, bench, embed, compare.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 I/O or
archive-format error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import platform
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .archive import ArchiveFormatError, load_model, save_model
from .blocks import FormError
from .config import variant_config
from .model import (
    Model,
    cosine_similarity,
    cost_report,
    build_model,
    forward,
    reparameterize_model,
)
from .ops import FiniteError, ShapeError
from .reparam import FusionOptions

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_FORMAT = 3

MAX_ABS_TOL = 1e-4
MIN_COSINE = 0.9999

# Reported deployment budgets (params, MACs) for the released
# configurations, keyed by (variant, heads). Deviations against these are
# printed by `cost`; tolerances live with the tests, which absorb the
# structural details the release never pinned down.
REFERENCE_BUDGETS: dict[tuple[str, int], tuple[float, float]] = {
    ("s", 16): (5.89e6, 237e6),
    ("m", 16): (14.3e6, 569e6),
    ("s-li", 16): (5.05e6, 160e6),
    ("m-li", 16): (9.75e6, 386e6),
    ("s-li", 8): (4.09e6, 157e6),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class BenchResult:
    variant: str
    form: str
    iterations: int
    warmup: int
    mean_us: float
    median_us: float
    p95_us: float
    host: str
    threads: int = 1
    throughput_per_s: float = 0.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.median_us > self.p95_us:
            raise ValueError("median latency cannot exceed the 95th percentile")

    def render(self) -> str:
        lines = [
            f"variant:    {self.variant} ({self.form} form)",
            f"iterations: {self.iterations} (+{self.warmup} warmup)",
            f"latency:    mean {self.mean_us:.1f} us, median {self.median_us:.1f} us, "
            f"p95 {self.p95_us:.1f} us",
            f"host:       {self.host}",
        ]
        if self.threads > 1:
            lines.append(
                f"throughput: {self.throughput_per_s:.2f} forwards/s over {self.threads} threads"
            )
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "form": self.form,
            "iterations": self.iterations,
            "warmup": self.warmup,
            "mean_us": self.mean_us,
            "median_us": self.median_us,
            "p95_us": self.p95_us,
            "threads": self.threads,
            "throughput_per_s": self.throughput_per_s,
            "host": self.host,
        }


def _host_descriptor() -> str:
    return f"{platform.platform()} / python {platform.python_version()} / numpy {np.__version__}"


def _probe_images(model: Model, count: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    size = model.config.input_size
    return [rng.uniform(-1.0, 1.0, (1, 3, size, size)).astype(np.float32) for _ in range(count)]


@contextlib.contextmanager
def _pinned_blas():
    """Single-threaded BLAS during timing: medians stay scheduler-stable."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def run_bench(model: Model, iters: int, warmup: int, threads: int = 1, seed: int = 0) -> BenchResult:
    """Time repeated forwards; with threads > 1, also measure aggregate throughput."""
    images = _probe_images(model, max(threads, 1), seed)
    with _pinned_blas():
        for _ in range(warmup):
            forward(model, images[0])
        samples = []
        for _ in range(iters):
            t0 = time.perf_counter()
            forward(model, images[0])
            samples.append((time.perf_counter() - t0) * 1e6)
        throughput = 0.0
        if threads > 1:
            def stream(image):
                for _ in range(iters):
                    forward(model, image)
            t0 = time.perf_counter()
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(stream, images[:threads]))
            throughput = threads * iters / (time.perf_counter() - t0)
    return BenchResult(
        variant=model.config.variant,
        form=model.form,
        iterations=iters,
        warmup=warmup,
        mean_us=statistics.fmean(samples),
        median_us=statistics.median(samples),
        p95_us=float(np.percentile(samples, 95)),
        host=_host_descriptor(),
        threads=threads,
        throughput_per_s=throughput,
    )


def compare_latency(
    models: dict[str, Model], iters: int, warmup: int, seed: int = 0
) -> dict[str, float]:
    """Median forward latency (us) per model, sampled round-robin.

    Interleaving the candidates makes the comparison robust against load
    drift on shared hosts; use this for orderings, ``run_bench`` for
    absolute profiles.
    """
    with _pinned_blas():
        images = {name: _probe_images(m, 1, seed)[0] for name, m in models.items()}
        for _ in range(max(warmup, 1)):
            for name, model in models.items():
                forward(model, images[name])
        samples: dict[str, list[float]] = {name: [] for name in models}
        for _ in range(iters):
            for name, model in models.items():
                t0 = time.perf_counter()
                forward(model, images[name])
                samples[name].append((time.perf_counter() - t0) * 1e6)
    return {name: statistics.median(ts) for name, ts in samples.items()}


def verify_pair(train: Model, deploy: Model, probes: int, seed: int = 0) -> tuple[float, float]:
    """Worst absolute embedding deviation and worst cosine over probe inputs."""
    if train.config != deploy.config:
        raise UsageError("train and deploy archives disagree on the model configuration")
    max_abs, min_cos = 0.0, 1.0
    for image in _probe_images(train, probes, seed):
        a, b = forward(train, image), forward(deploy, image)
        max_abs = max(max_abs, float(np.abs(a - b).max()))
        min_cos = min(min_cos, cosine_similarity(a, b))
    return max_abs, min_cos


# ---------------------------------------------------------------------------
# Image and embedding files
# ---------------------------------------------------------------------------

_RAW_SUFFIXES = {".raw", ".bin", ".f32", ".dat"}


def load_image_tensor(path: str | Path, size: int) -> np.ndarray:
    """Read a probe image: raw float32 CHW in [-1, 1], or an 8-bit image.

    8-bit inputs must already be aligned crops of exactly ``size x size``
    pixels; they map to [-1, 1] via v / 127.5 - 1.
    """
    path = Path(path)
    expected_bytes = 3 * size * size * 4
    if path.suffix.lower() in _RAW_SUFFIXES or (
        path.stat().st_size == expected_bytes and path.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp"}
    ):
        blob = path.read_bytes()
        if len(blob) != expected_bytes:
            raise ArchiveFormatError(
                f"raw image payload is {len(blob)} bytes, expected {expected_bytes} "
                f"(3x{size}x{size} float32)"
            )
        tensor = np.frombuffer(blob, dtype="<f4").reshape(1, 3, size, size)
        if not np.isfinite(tensor).all():
            raise FiniteError("raw image contains non-finite values")
        return tensor.astype(np.float32)
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise ArchiveFormatError(f"cannot decode image {path}: {exc}") from exc
    if rgb.size != (size, size):
        raise ShapeError("spatial", f"image is {rgb.size[0]}x{rgb.size[1]}, expected {size}x{size} (pre-aligned)")
    pixels = np.asarray(rgb, dtype=np.float32)  # [h, w, 3]
    tensor = pixels.transpose(2, 0, 1)[None] / 127.5 - 1.0
    return np.ascontiguousarray(tensor, dtype=np.float32)


def read_embedding(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) == 0 or len(blob) % 4 != 0:
        raise ArchiveFormatError(f"embedding payload of {len(blob)} bytes is not float32 data")
    return np.frombuffer(blob, dtype="<f4").astype(np.float32)


def write_embedding(path: str | Path, embedding: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(embedding, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _load(path: str) -> Model:
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise ArchiveFormatError(f"cannot read archive {path}: {exc}") from exc


def _cmd_build(args) -> int:
    try:
        config = variant_config(args.variant)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    if args.heads is not None:
        config = config.with_heads(args.heads)
    model = build_model(config, seed=args.seed)
    save_model(args.out, model)
    report = cost_report(model)
    print(
        f"built {config.variant} (heads={config.heads}, seed={args.seed}): "
        f"{report.total_params} params, train form -> {args.out}"
    )
    return EXIT_OK


def _cmd_reparam(args) -> int:
    model = _load(args.infile)
    options = FusionOptions(
        fuse_bn=not args.no_fuse_bn,
        fold_residual=not args.no_res_rep,
        merge_1x1=not args.no_dw1x1,
    )
    deploy, report = reparameterize_model(
        model, options=options, probes=args.probes, probe_seed=args.seed
    )
    save_model(args.out, deploy)
    print(report.render())
    print(f"deploy form -> {args.out}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    train = _load(args.train)
    deploy = _load(args.deploy)
    max_abs, min_cos = verify_pair(train, deploy, probes=args.probes, seed=args.seed)
    ok = max_abs < MAX_ABS_TOL and min_cos >= MIN_COSINE
    print(
        f"probes={args.probes} max_abs={max_abs:.3e} (tol {MAX_ABS_TOL:.0e}) "
        f"cosine={min_cos:.6f} (min {MIN_COSINE}) -> {'PASS' if ok else 'FAIL'}"
    )
    return EXIT_OK if ok else EXIT_VERIFY


def _cmd_cost(args) -> int:
    if bool(args.variant) == bool(args.infile):
        raise UsageError("pass exactly one of --variant or --in")
    if args.infile:
        model = _load(args.infile)
        report = cost_report(model)
        heads = model.config.heads
    else:
        try:
            config = variant_config(args.variant)
        except KeyError as exc:
            raise UsageError(str(exc)) from exc
        if args.heads is not None:
            config = config.with_heads(args.heads)
        report = cost_report(config, form=args.form, seed=args.seed)
        heads = config.heads
    reference = None
    budget = REFERENCE_BUDGETS.get((report.variant, heads))
    if budget is not None:
        p_ref, f_ref = budget
        reference = {
            "params": p_ref,
            "flops": f_ref,
            "param_deviation_pct": 100.0 * (report.total_params - p_ref) / p_ref,
            "flop_deviation_pct": 100.0 * (report.total_flops - f_ref) / f_ref,
        }
    if args.format == "json":
        payload = {
            "variant": report.variant,
            "form": report.form,
            "heads": heads,
            "total_params": report.total_params,
            "total_flops": report.total_flops,
            "per_stage": [
                {"stage": s, "params": p, "flops": f} for s, p, f in report.per_stage
            ],
            "per_kind": [{"kind": k, "params": p, "flops": f} for k, p, f in report.per_kind],
            "reference": reference,
        }
        print(json.dumps(payload, indent=2))
    else:
        print(f"variant {report.variant} ({report.form} form, heads={heads})")
        print(f"total params: {report.total_params}")
        print(f"total flops:  {report.total_flops} (multiply-accumulates)")
        print(f"{'row':<10} {'params':>12} {'flops':>14}")
        for label, params, flops in report.per_stage:
            print(f"{label:<10} {params:>12} {flops:>14}")
        print("by kind:")
        for kind, params, flops in report.per_kind:
            print(f"{kind:<10} {params:>12} {flops:>14}")
        if reference is not None:
            print(
                f"reference: {reference['params']:.3g} params "
                f"({reference['param_deviation_pct']:+.2f}% deviation), "
                f"{reference['flops']:.3g} flops "
                f"({reference['flop_deviation_pct']:+.2f}% deviation)"
            )
    return EXIT_OK


def _cmd_bench(args) -> int:
    model = _load(args.infile)
    result = run_bench(
        model, iters=args.iters, warmup=args.warmup, threads=args.threads, seed=args.seed
    )
    if args.format == "json":
        print(json.dumps(result.to_json(), indent=2))
    else:
        print(result.render())
    return EXIT_OK


def _cmd_embed(args) -> int:
    model = _load(args.infile)
    image = load_image_tensor(args.image, model.config.input_size)
    embedding = forward(model, image)
    write_embedding(args.out, embedding)
    print(f"wrote {embedding.size}-float embedding -> {args.out}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    a = read_embedding(args.a)
    b = read_embedding(args.b)
    if a.shape != b.shape:
        raise ArchiveFormatError(
            f"embedding sizes differ: {a.size} vs {b.size} values"
        )
    try:
        score = cosine_similarity(a, b)
    except ValueError as exc:
        raise ArchiveFormatError(str(exc)) from exc
    print(f"cosine={score:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="facelivt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a seeded train-form weight archive")
    p.add_argument("--variant", required=True, help="s | m | s-li | m-li")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heads", type=int, default=None, help="override the attention head count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("reparam", help="fuse a train-form archive into deploy form")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-fuse-bn", action="store_true", help="keep batch norms unfused")
    p.add_argument("--no-res-rep", action="store_true", help="keep the residual at runtime")
    p.add_argument("--no-dw1x1", action="store_true", help="keep the 1x1 branch unmerged")
    p.add_argument("--probes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0, help="probe-input seed")
    p.set_defaults(func=_cmd_reparam)

    p = sub.add_parser("verify", help="check train/deploy equivalence")
    p.add_argument("--train", required=True)
    p.add_argument("--deploy", required=True)
    p.add_argument("--probes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("cost", help="parameter/FLOP report")
    p.add_argument("--variant", default=None)
    p.add_argument("--in", dest="infile", default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--form", choices=["train", "deploy"], default="deploy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(func=_cmd_cost)

    p = sub.add_parser("bench", help="time forward passes")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("embed", help="compute an embedding for one image")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("compare", help="cosine similarity of two embedding files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArchiveFormatError, ShapeError, FiniteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
