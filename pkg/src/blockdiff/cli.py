"""Command-line entry point: ``blockdiff <command> [options]``.

Every command exits 0 on success. On failure a single JSON object
``{"error": <kind>, "message": <text>}`` is written to stderr and the exit
code is nonzero (2 for usage/config problems, 1 for everything else).

The JSON config file (path from ``--config`` or $BLOCKDIFF_CONFIG) may hold
three sections, ``run``, ``model`` and ``train``, whose keys mirror
RunConfig, ModelConfig and TrainConfig. Explicit flags win over file values.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .checkpoint import CheckpointError, checkpoint_load
from .diffusion import EDMConfig
from .engine import (MemoryBudgetError, RunConfig, UpsampleStats, default_config_path, iterative_upsample,
                     load_config_file, plan_report, upsample, verify_equivalence)
from .geometry import GeometryError
from .imaging import ImageFormatError, load_image, psnr, quantize, save_image, ssim
from .model import DiT, ModelConfig
from .semantic import EmbeddingFormatError
from .training import TrainConfig, train_toy

log = logging.getLogger("blockdiff")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args) -> dict:
    path = getattr(args, "config", None) or default_config_path()
    return load_config_file(path) if path else {}


def _run_config(args, file_cfg: dict) -> RunConfig:
    run = dict(file_cfg.get("run", {}))
    edm = dict(run.pop("edm", {}))
    if args.steps is not None:
        edm["steps"] = args.steps
    if args.sampler is not None:
        edm["sampler"] = args.sampler
    flags = {
        "factor": args.factor, "tiles_n": args.tiles_n, "trajectory": args.trajectory, "seed": args.seed,
        "prompt_pos": args.prompt_pos, "prompt_neg": args.prompt_neg, "alpha": args.alpha,
        "embedding_file": args.embedding_file, "memory_budget_bytes": args.memory_budget,
    }
    run.update({k: v for k, v in flags.items() if v is not None})
    if args.plain_noise_init:
        run["plain_noise_init"] = True
    return RunConfig(edm=EDMConfig(**edm), **run)


def _load_model(path) -> DiT:
    cfg, params, _, _ = checkpoint_load(path)
    return DiT(cfg, params)


def cmd_upsample(args) -> int:
    rc = _run_config(args, _config(args))
    model = _load_model(args.checkpoint)
    img = load_image(args.input)
    stats = UpsampleStats()
    if args.cmd == "iterate":
        out = iterative_upsample(img, args.rounds, model, rc)
    else:
        out = upsample(img, model, rc, stats=stats)
    save_image(out, args.output)
    info = {"output": args.output, "shape": list(out.shape)}
    if args.cmd == "upsample":
        info.update(cache_high_water_blocks=stats.high_water_blocks, cache_bound_blocks=stats.bound_blocks,
                    cache_high_water_bytes=stats.high_water_bytes)
    print(json.dumps(info))
    return 0


def cmd_train(args) -> int:
    file_cfg = _config(args)
    mc = ModelConfig.from_dict({**ModelConfig.toy().to_dict(), **file_cfg.get("model", {})})
    tc = TrainConfig.from_dict(file_cfg.get("train", {}))
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    state = train_toy(args.data, args.out, mc, tc, log_every=args.log_every)
    last = state.history[-1] if state.history else None
    print(json.dumps({"checkpoint": args.out, "steps": state.step, "final_loss": None if last is None else last[1]}))
    return 0


def cmd_plan(args) -> int:
    file_cfg = _config(args)
    mc = ModelConfig.from_dict({**ModelConfig.toy().to_dict(), **file_cfg.get("model", {})})
    if args.checkpoint:
        mc = checkpoint_load(args.checkpoint)[0]
    itemsize = 8 if args.precision == 64 else 4
    print(plan_report(args.height, args.width, mc, args.tiles_n, args.trajectory, itemsize).render())
    return 0


def cmd_verify(args) -> int:
    rows = verify_equivalence(seed=args.seed, precision=args.precision)
    ok = True
    for r in rows:
        ok &= r.passed
        print(f"grid {r.h}x{r.w} n={r.n} max_abs={r.max_abs:.3e} tol={r.tolerance:.0e} {'PASS' if r.passed else 'FAIL'}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_metrics(args) -> int:
    ref = quantize(load_image(args.ref))
    test = quantize(load_image(args.test))
    if ref.shape != test.shape:
        raise UsageError(f"image shapes differ: {ref.shape} vs {test.shape}")
    print(json.dumps({"psnr": psnr(ref, test), "ssim": ssim(ref, test)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blockdiff", description="Block-streamed diffusion upsampler.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    for name in ("upsample", "iterate"):
        s = sub.add_parser(name)
        s.add_argument("--input", required=True)
        s.add_argument("--output", required=True)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--config")
        s.add_argument("--factor", type=int)
        s.add_argument("--tiles-n", type=int)
        s.add_argument("--trajectory", choices=("auto", "row_major", "column_major"))
        s.add_argument("--steps", type=int)
        s.add_argument("--sampler", choices=("euler", "heun"))
        s.add_argument("--seed", type=int)
        s.add_argument("--prompt-pos")
        s.add_argument("--prompt-neg")
        s.add_argument("--alpha", type=float)
        s.add_argument("--embedding-file")
        s.add_argument("--plain-noise-init", action="store_true")
        s.add_argument("--memory-budget", type=int, help="byte budget for the estimated peak")
        if name == "iterate":
            s.add_argument("--rounds", type=int, required=True)
        s.set_defaults(func=cmd_upsample)

    s = sub.add_parser("train-toy")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("plan")
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--tiles-n", type=int, default=1)
    s.add_argument("--trajectory", default="auto", choices=("auto", "row_major", "column_major"))
    s.add_argument("--checkpoint")
    s.add_argument("--config")
    s.add_argument("--precision", type=int, default=32, choices=(32, 64))
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("verify")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--precision", type=int, default=64, choices=(32, 64))
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("metrics")
    s.add_argument("--ref", required=True)
    s.add_argument("--test", required=True)
    s.set_defaults(func=cmd_metrics)
    return p


def _fail(kind: str, exc, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, TypeError, json.JSONDecodeError) as exc:
        return _fail("config", exc, 2)
    except (CheckpointError, ImageFormatError, EmbeddingFormatError) as exc:
        return _fail("format", exc, 1)
    except MemoryBudgetError as exc:
        return _fail("memory_budget", exc, 1)
    except (GeometryError, ValueError) as exc:
        return _fail("invalid_input", exc, 1)
    except OSError as exc:
        return _fail("io", exc, 1)
    except Exception as exc:  # noqa: BLE001 - last-resort machine-readable report
        return _fail("internal", f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
