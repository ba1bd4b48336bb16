"""Command-line entry point.

Verbs: gen-data, train-ae, train, sample, eval, ablate.
Outputs go under ``$MVPOSEDIFF_OUTPUT_ROOT`` (default ``./runs``) unless a
path is given. Exit codes: 0 ok, 2 validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
ENV_OUTPUT_ROOT = "MVPOSEDIFF_OUTPUT_ROOT"


class ValidationError(ValueError):
    pass


def output_root() -> Path:
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "runs"))


def parse_resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValidationError(f"resolution must look like 64x48, got {text!r}") from None
    if h < 16 or w < 16:
        raise ValidationError(f"resolution must be at least 16x16, got {h}x{w}")
    return h, w


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def echo_config(cfg, stream=None) -> None:
    stream = stream or sys.stdout
    stream.write(f"# config (hash {cfg.hash()})\n{cfg.dumps()}")
    stream.flush()


def _resolve_config(args):
    from .config import RunConfig, apply_ablation, load_config, make_config

    overrides = parse_overrides(getattr(args, "set", None))
    for key in ("seed", "steps", "batch_size", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        d = cfg.to_dict()
        d.update(overrides)
        cfg = RunConfig.from_dict(d)
        ablation = getattr(args, "ablate", None)
        return apply_ablation(cfg, ablation) if ablation else cfg
    return make_config(args.profile, getattr(args, "ablate", None) or "full", **overrides)


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .synthdata import generate_dataset

    res = parse_resolution(args.resolution)
    out = Path(args.out) if args.out else output_root() / "data"
    manifest = generate_dataset(args.n_identities, args.seed, res, out, workers=args.workers)
    print(f"# gen-data n_identities={args.n_identities} seed={args.seed} "
          f"resolution={res[0]}x{res[1]} out={out}")
    print(f"wrote {len(manifest['records'])} records (4 views each) to {out}, "
          f"config hash {manifest['config_hash']}")
    return EXIT_OK


def cmd_train_ae(args) -> int:
    import torch

    from .gridcodec import CodecConfig, compose_grid, train_autoencoder
    from .pipeline import load_records, to_signed

    records = load_records(args.data)
    grids = torch.from_numpy(np.stack([compose_grid(r.images) for r in records])).permute(0, 3, 1, 2)
    grids = to_signed(grids.float())
    n_val = max(1, len(records) // 8)
    cfg = CodecConfig(kind="ae", f=args.f, d_V=args.d_v)
    print(f"# train-ae {json.dumps(cfg.to_dict())} steps={args.steps} lr={args.lr} seed={args.seed}")
    codec, meta = train_autoencoder(grids[n_val:] if len(records) > 1 else grids, cfg,
                                    steps=args.steps, lr=args.lr, seed=args.seed,
                                    val_grids=grids[:n_val], log_every=args.log_every)
    out = Path(args.out) if args.out else output_root() / "ae" / "ae.pt"
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": codec.state_dict(), "codec_cfg": cfg.to_dict(), "meta": meta}, out)
    print(f"val PSNR {meta['val_psnr']:.2f} dB, threshold {meta['psnr_threshold']:.2f} dB -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import Trainer, load_records

    if not Path(args.data, "manifest.json").is_file():
        raise ValidationError(f"dataset not found: {args.data}")
    records = load_records(args.data)
    if args.resume:
        trainer = Trainer.resume(args.resume, records, args.out or Path(args.resume).parent)
        cfg = trainer.cfg
        if args.steps is not None:
            cfg.steps = args.steps
        print(f"# resuming at step {trainer.step + 1}")
    else:
        cfg = _resolve_config(args)
        out = Path(args.out) if args.out else output_root() / f"train_{cfg.profile}_{cfg.ablation}"
        out.mkdir(parents=True, exist_ok=True)
        trainer = Trainer(cfg, records, out)
    echo_config(cfg)
    trainer.out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(trainer.out_dir / "config.txt")
    trainer.run()
    print(f"finished at step {trainer.step}; checkpoint {trainer.out_dir / 'last.pt'}")
    return EXIT_OK


def _read_image(path) -> np.ndarray:
    from .synthdata import _read_png

    return _read_png(Path(path))


def cmd_sample(args) -> int:
    import torch
    from PIL import Image

    from . import gridcodec as gc
    from .pipeline import file_hash, load_checkpoint, make_batch, to_unit
    from .synthdata import SampleRecord, quantize

    refs: dict[int, np.ndarray] = {}
    poses: list[np.ndarray] | None = None
    text = args.text
    if args.record:
        rec_dir = Path(args.record)
        n = args.n_refs
        if not 1 <= n <= 3:
            raise ValidationError(f"--n-refs must be 1..3, got {n}")
        for s in range(n):
            refs[s] = _read_image(rec_dir / f"view{s}.png")
        poses = [_read_image(rec_dir / f"pose{k}.png") for k in range(4)]
        if text is None:
            text = (rec_dir / "text.txt").read_text().strip()
    for item in args.ref or []:
        slot, _, path = item.rpartition(":")
        slot = int(slot) if slot else len(refs)
        refs[slot] = _read_image(path)
    if args.pose:
        if len(args.pose) != 4:
            raise ValidationError("--pose needs exactly 4 pose maps (slots 0..3)")
        poses = [_read_image(p) for p in args.pose]
    if not 1 <= len(refs) <= 3:
        raise ValidationError(f"need 1-3 reference views, got {len(refs)}")
    if poses is None:
        raise ValidationError("pose maps are required (--pose x4 or --record)")
    mask = gc.mask_from_refs(list(refs))

    model, payload = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    omega = cfg.omega if args.omega is None else args.omega
    gcfg = cfg.guidance().__class__(omega, cfg.pose_in_cond_branch, cfg.extrapolate)
    shape = poses[0].shape
    blank = np.zeros(shape, dtype=np.float32)
    views = [refs.get(s, blank) for s in range(4)]
    for s, v in refs.items():
        if v.shape != shape:
            raise ValidationError(f"reference {s} has shape {v.shape}, pose maps have {shape}")
    rec = SampleRecord(views, poses, text or "", -1)
    rng = np.random.default_rng([args.seed, 1])
    batch = make_batch([rec], cfg, model.vocab, rng, masks=[mask], drop=False)
    model.eval()
    g = torch.Generator().manual_seed(args.seed)
    grid = model.generate(batch, g, gcfg, args.sampler, args.steps)
    grid_img = to_unit(grid[0]).clamp(0, 1).permute(1, 2, 0).numpy()
    target = gc.decompose_grid(grid_img)[gc.TARGET_SLOT]

    out = Path(args.out) if args.out else output_root() / "samples"
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(target), mode="RGB").save(out / "target.png", format="PNG")
    Image.fromarray(quantize(grid_img), mode="RGB").save(out / "grid.png", format="PNG")
    meta = {
        "omega": omega,
        "seed": args.seed,
        "sampler": args.sampler or cfg.sampler,
        "steps": args.steps or cfg.sample_steps,
        "ref_slots": sorted(refs),
        "text": text,
        "checkpoint_hash": file_hash(args.checkpoint),
        "config_hash": payload["config_hash"],
        "schedule": payload["schedule"],
        "guidance": gcfg.to_dict(),
    }
    (out / "target.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(json.dumps(meta, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalmetrics import REPORT_FIELDS, write_report
    from .pipeline import evaluate, load_checkpoint, load_records

    records = load_records(args.data, args.limit)
    rows = []
    for ck in args.checkpoint:
        if not Path(ck).is_file():
            print(f"absent: {ck}")
            rows.append({"variant": f"absent:{ck}", "ssim": "", "pdist": "", "ffd": "",
                         "n_samples": 0, "seed": args.seed, "config_hash": ""})
            continue
        model, payload = load_checkpoint(ck)
        res = evaluate(model, records, seed=args.seed, steps=args.steps)
        row = {"variant": model.cfg.ablation, "config_hash": payload["config_hash"], **res}
        rows.append(row)
        print("\t".join(str(row[k]) for k in REPORT_FIELDS))
    out = Path(args.out) if args.out else output_root() / "eval_report.tsv"
    write_report(out, rows, fields=REPORT_FIELDS + ("config_hash",))
    print(f"report -> {out}")
    return EXIT_OK


def run_ablation(data, profile="toy", steps=None, seed=0, out_dir=None, limit=None,
                 sample_steps=None, overrides=None, echo=print) -> list[dict]:
    """Train and evaluate the full model and the three ablations under one seed."""
    from .config import ABLATIONS, make_config
    from .pipeline import Trainer, evaluate, load_records

    records = load_records(data)
    eval_records = records[:limit] if limit else records
    rows = []
    for name in ABLATIONS:
        kw = dict(overrides or {})
        kw["seed"] = seed
        if steps is not None:
            kw["steps"] = steps
        cfg = make_config(profile, name, **kw)
        echo(f"== variant {name} (config hash {cfg.hash()})")
        run_dir = Path(out_dir) / name if out_dir else None
        tr = Trainer(cfg, records, run_dir)
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            cfg.save(run_dir / "config.txt")
        tr.run(echo=echo)
        hist = [v for _, v in tr.history]
        res = evaluate(tr.model, eval_records, seed=seed, steps=sample_steps)
        rows.append({"variant": name, **res, "loss_step0": hist[0] if hist else float("nan"),
                     "loss_final": float(np.mean(hist[-20:])) if hist else float("nan"),
                     "config_hash": cfg.hash()})
    return rows


ABLATE_FIELDS = ("variant", "ssim", "pdist", "ffd", "n_samples", "seed", "loss_step0",
                 "loss_final", "config_hash")


def cmd_ablate(args) -> int:
    from .evalmetrics import write_report

    out = Path(args.out) if args.out else output_root() / "ablate"
    rows = run_ablation(args.data, args.profile, args.steps, args.seed, out, args.limit,
                        args.sample_steps, parse_overrides(args.set))
    write_report(out / "ablation.tsv", rows, fields=ABLATE_FIELDS)
    print("\t".join(ABLATE_FIELDS))
    for r in rows:
        print("\t".join(f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k]) for k in ABLATE_FIELDS))
    print(f"table -> {out / 'ablation.tsv'}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .config import ABLATIONS, PROFILES

    p = argparse.ArgumentParser(prog="mvposediff", description=__doc__,
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="cmd", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen-data", help="write the synthetic multi-view dataset", formatter_class=fmt)
    g.add_argument("--n-identities", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", default="64x48", help="per-view HxW")
    g.add_argument("--out", default=None, help="dataset dir (default $ROOT/data)")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("train-ae", help="fit the lossy 'ae' latent codec", formatter_class=fmt)
    a.add_argument("--data", required=True)
    a.add_argument("--f", type=int, default=2)
    a.add_argument("--d-v", type=int, default=4)
    a.add_argument("--steps", type=int, default=2000)
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--log-every", type=int, default=200)
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_train_ae)

    t = sub.add_parser("train", help="train the diffusion model", formatter_class=fmt)
    t.add_argument("--data", required=True)
    t.add_argument("--profile", choices=sorted(PROFILES), default="toy",
                   help="paper: lr 1e-5, batch 1, T 1000; toy: lr 1e-4, batch 8, T 200")
    t.add_argument("--ablate", choices=ABLATIONS, default=None)
    t.add_argument("--config", default=None, help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate a target view", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--record", default=None, help="dataset record dir supplying refs, poses and text")
    s.add_argument("--n-refs", type=int, default=3, help="with --record: use slots 0..n-1 as refs")
    s.add_argument("--ref", action="append", metavar="[SLOT:]PNG", help="reference view (1-3)")
    s.add_argument("--pose", nargs="+", metavar="PNG", help="4 pose maps, slots 0..3")
    s.add_argument("--text", default=None)
    s.add_argument("--omega", type=float, default=None, help="guidance weight (default from checkpoint)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sampler", choices=("ddim", "ddpm"), default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="metric report for checkpoints", formatter_class=fmt)
    e.add_argument("--checkpoint", nargs="+", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int, default=None, help="sampling steps")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("ablate", help="train + evaluate full model and the three ablations",
                       formatter_class=fmt)
    b.add_argument("--data", required=True)
    b.add_argument("--profile", choices=sorted(PROFILES), default="toy")
    b.add_argument("--steps", type=int, default=None)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--limit", type=int, default=None, help="records used for evaluation")
    b.add_argument("--sample-steps", type=int, default=None)
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
