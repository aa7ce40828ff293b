"""Command-line entrypoint: gen-data, train, sample, eval, ablate.

Configuration is a key/value tree: a named profile (``desk`` or ``paper``)
optionally merged with a YAML file and dotted ``-o key=value`` overrides.
The effective config, seed and code version are echoed into every run
directory. Only this module ever terminates the process; library modules
raise instead.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from . import metrics as M
from .phantom import load_split, make_dataset, read_manifest, MANIFEST_NAME
from .sampler import SamplerConfig, sample
from .schedule import make_linear_schedule
from .training import TrainConfig, fit
from .unet import NetworkConfig, SkeletalDenoiser, count_parameters, load_checkpoint

PROFILES = {
    "desk": {
        "data": {"n": 145, "resolution": 64},
        "diffusion": {"T": 200, "beta_1": 1e-4, "beta_T": 0.02},
        "network": {
            "base_channels": 32, "channel_mult": [1, 2, 3], "res_blocks_per_level": 1,
            "dropout": 0.1, "attention_resolution": 16, "attention_heads": 1,
            "in_channels": 2, "out_channels": 1, "image_size": 64,
            "variance_mode": "fixed_posterior",
        },
        "training": {
            "learning_rate": 1e-4, "batch_size": 2, "max_steps": 2000,
            "eval_interval": 500, "eval_samples": 2, "seed": 0,
            "diff_domain": True, "ema_decay": None,
        },
        "sampler": {
            "psi": 0.5, "blur_kernel": 3, "blur_sigma": 0.3,
            "enable_multiscale": True, "enable_attention": True,
            "enable_diff_domain": True,
        },
    },
    "paper": {
        "data": {"n": 145, "resolution": 512},
        "diffusion": {"T": 1000, "beta_1": 1e-4, "beta_T": 0.02},
        "network": {
            "base_channels": 64, "channel_mult": [1, 2, 3, 4], "res_blocks_per_level": 2,
            "dropout": 0.3, "attention_resolution": 64, "attention_heads": 1,
            "in_channels": 2, "out_channels": 1, "image_size": 512,
            "variance_mode": "fixed_posterior",
        },
        "training": {
            "learning_rate": 1e-5, "batch_size": 2, "max_steps": 100000,
            "eval_interval": 5000, "eval_samples": 2, "seed": 0,
            "diff_domain": True, "ema_decay": None,
        },
        "sampler": {
            "psi": 0.5, "blur_kernel": 3, "blur_sigma": 0.3,
            "enable_multiscale": True, "enable_attention": True,
            "enable_diff_domain": True,
        },
    },
}


class ConfigError(ValueError):
    pass


def _merge_into(base: dict, update: dict, path=""):
    for key, value in update.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a mapping")
            _merge_into(base[key], value, here)
        else:
            base[key] = value


def _apply_override(config: dict, spec: str):
    if "=" not in spec:
        raise ConfigError(f"override must look like section.key=value, got {spec!r}")
    key, raw = spec.split("=", 1)
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {key}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {key}")
    node[parts[-1]] = yaml.safe_load(raw)


def build_config(profile: str, config_file=None, overrides=()) -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    config = copy.deepcopy(PROFILES[profile])
    if config_file:
        loaded = yaml.safe_load(Path(config_file).read_text()) or {}
        _merge_into(config, loaded)
    for spec in overrides or ():
        _apply_override(config, spec)
    return config


def code_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, cwd=Path(__file__).parent, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return f"skeldiff-{__version__}"


def _write_run_info(out_dir: Path, config: dict, seed: int):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.yaml").write_text(yaml.safe_dump(config, sort_keys=True))
    (out_dir / "run_info.json").write_text(json.dumps(
        {"seed": seed, "version": code_version(), "argv": sys.argv[1:]},
        indent=2, sort_keys=True) + "\n")


def _build_parts(config: dict, diff_domain=None, enable_multiscale=None,
                 enable_attention=None):
    sched = make_linear_schedule(**config["diffusion"])
    net_config = NetworkConfig(**config["network"])
    s = dict(config["sampler"])
    if diff_domain is not None:
        s["enable_diff_domain"] = diff_domain
    if enable_multiscale is not None:
        s["enable_multiscale"] = enable_multiscale
    if enable_attention is not None:
        s["enable_attention"] = enable_attention
    return sched, net_config, SamplerConfig(**s)


def _save_png(path: Path, img: np.ndarray):
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr[0]
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def _triptych(path: Path, condition, generated, target=None):
    panels = [condition, generated] + ([target] if target is not None else [])
    planes = [np.asarray(p)[0] if np.asarray(p).ndim == 3 else np.asarray(p) for p in panels]
    h = planes[0].shape[0]
    gap = np.ones((h, 2))
    row = []
    for i, p in enumerate(planes):
        if i:
            row.append(gap)
        row.append(p)
    _save_png(path, np.concatenate(row, axis=1))


def evaluate_images(pairs, generated, tau: float = 0.65,
                    detector=None, extractor=None) -> M.MetricReport:
    """Score generated images (clipped, raw) against their paired targets."""
    detector = detector or M.PhantomKeypointDetector()
    extractor = extractor or M.RandomConvExtractor()
    report = M.MetricReport()
    for pair, (clipped, raw) in zip(pairs, generated):
        gt = pair.x.data
        report.image_ids.append(pair.sample_id)
        report.ssim.append(M.ssim(clipped, gt))
        report.psnr.append(M.psnr(clipped, gt))
        report.mae.append(M.mae(raw, gt))  # unclipped output by convention
        report.lpips.append(M.lpips(clipped, gt, extractor))
        report.kcc.append(M.kcc(detector.detect(clipped), tau).kcc)
    if len(report.ssim) >= 2:  # FID needs at least two images per side
        real_stats = M.feature_stats([p.x.data for p in pairs], extractor)
        gen_stats = M.feature_stats([g[0] for g in generated], extractor)
        report.fid = M.fid(real_stats, gen_stats)
    return report


def sample_split(pairs, model, sched, sampler_config, seed: int):
    out = []
    for i, pair in enumerate(pairs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 500 + i]))
        out.append(sample(pair.c.data, model, sched, sampler_config, rng))
    return out


# --- subcommands ----------------------------------------------------------

def cmd_gen_data(args) -> int:
    make_dataset(args.n, args.resolution, args.seed, args.out)
    print(f"wrote dataset ({args.n} samples, {args.resolution}x{args.resolution}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = build_config(args.profile, args.config, args.override)
    if args.seed is not None:
        config["training"]["seed"] = args.seed
    out_dir = Path(args.out)
    _write_run_info(out_dir, config, config["training"]["seed"])

    sched, net_config, sampler_config = _build_parts(
        config, diff_domain=config["training"]["diff_domain"])
    torch.manual_seed(config["training"]["seed"])  # seeds weight init
    model = SkeletalDenoiser(net_config, sched)
    print(f"model parameters: {count_parameters(net_config):,}")

    train_pairs = load_split(args.data, "train")
    val_pairs = load_split(args.data, "val")
    train_config = TrainConfig(**config["training"])
    result = fit(train_pairs, val_pairs, model, sched, train_config,
                 sampler_config, out_dir)
    print(f"best checkpoint: {result.best_checkpoint} "
          f"(step {result.best_step}, val SSIM {result.best_ssim:.4f})")
    return 0


def cmd_sample(args) -> int:
    config = build_config(args.profile, args.config, args.override)
    out_dir = Path(args.out)
    _write_run_info(out_dir, config, args.seed)
    sched, _, sampler_config = _build_parts(config)
    model, _ = load_checkpoint(args.checkpoint, schedule=sched)

    pairs = load_split(args.data, args.split)
    generated = sample_split(pairs, model, sched, sampler_config, args.seed)
    for pair, (clipped, _) in zip(pairs, generated):
        _save_png(out_dir / f"{pair.sample_id}_gen.png", clipped)
        _triptych(out_dir / f"{pair.sample_id}_triptych.png",
                  pair.c.data, clipped, pair.x.data)
    print(f"wrote {len(generated)} generated images to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    config = build_config(args.profile, args.config, args.override)
    out_dir = Path(args.out)
    _write_run_info(out_dir, config, args.seed)
    pairs = load_split(args.data, args.split)

    if args.generated:
        from .phantom import _from_png
        gen_dir = Path(args.generated)
        generated = []
        for pair in pairs:
            path = gen_dir / f"{pair.sample_id}_gen.png"
            if not path.exists():
                raise FileNotFoundError(f"no generated image for {pair.sample_id} at {path}")
            img = _from_png(path)
            generated.append((img, img))
    elif args.checkpoint:
        sched, _, sampler_config = _build_parts(config)
        model, _ = load_checkpoint(args.checkpoint, schedule=sched)
        generated = sample_split(pairs, model, sched, sampler_config, args.seed)
    else:
        raise ConfigError("eval needs --checkpoint or --generated")

    report = evaluate_images(pairs, generated)
    report.save(out_dir / "report.txt")
    (out_dir / "report.json").write_text(
        json.dumps(report.aggregate(), indent=2, sort_keys=True) + "\n")
    print(report.to_text())
    return 0


ABLATION_VARIANTS = (
    ("full", {}),
    ("wo_diff_domain", {"diff_domain": False}),
    ("wo_multiscale", {"enable_multiscale": False}),
    ("wo_attention", {"enable_attention": False}),
)


def cmd_ablate(args) -> int:
    config = build_config(args.profile, args.config, args.override)
    if args.seed is not None:
        config["training"]["seed"] = args.seed
    out_dir = Path(args.out)
    _write_run_info(out_dir, config, config["training"]["seed"])

    manifest_hash = hashlib.sha256(
        (Path(args.data) / MANIFEST_NAME).read_bytes()).hexdigest()
    train_pairs = load_split(args.data, "train")
    val_pairs = load_split(args.data, "val")
    test_pairs = load_split(args.data, "test")

    # multi-scale and attention are sampling-time toggles, so the three
    # diff-domain variants share one training run (identical seed and data
    # would reproduce the same weights anyway); only the diff-domain
    # ablation needs its own training pass
    models = {}
    for domain_flag in (True, False):
        sched, net_config, sampler_config = _build_parts(config, diff_domain=domain_flag)
        torch.manual_seed(config["training"]["seed"])  # seeds weight init
        model = SkeletalDenoiser(net_config, sched)
        tconf_kw = dict(config["training"])
        tconf_kw["diff_domain"] = domain_flag
        tag = "diff" if domain_flag else "direct"
        fit(train_pairs, val_pairs, model, sched, TrainConfig(**tconf_kw),
            sampler_config, out_dir / f"train_{tag}")
        models[domain_flag] = (model, sched)

    rows = {}
    for name, toggles in ABLATION_VARIANTS:
        domain_flag = toggles.get("diff_domain", True)
        model, sched = models[domain_flag]
        _, _, sampler_config = _build_parts(
            config,
            diff_domain=domain_flag,
            enable_multiscale=toggles.get("enable_multiscale"),
            enable_attention=toggles.get("enable_attention"),
        )
        generated = sample_split(test_pairs, model, sched, sampler_config,
                                 config["training"]["seed"])
        report = evaluate_images(test_pairs, generated)
        report.save(out_dir / f"report_{name}.txt")
        rows[name] = report.aggregate()

    header = f"{'variant':<18}" + "".join(f"{c.upper():>10}" for c in M.COLUMNS)
    lines = [f"dataset manifest sha256: {manifest_hash}", header, "-" * len(header)]
    for name, _ in ABLATION_VARIANTS:
        agg = rows[name]
        cells = "".join(
            f"{agg[c]:>10.4f}" if np.isfinite(agg[c]) else f"{'inf':>10}" for c in M.COLUMNS)
        lines.append(f"{name:<18}" + cells)
    table = "\n".join(lines) + "\n"
    (out_dir / "ablation.txt").write_text(table)
    (out_dir / "ablation.json").write_text(json.dumps(
        {"manifest_sha256": manifest_hash, "rows": rows}, indent=2, sort_keys=True) + "\n")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skeldiff",
        description="Skeleton-guided conditional diffusion for foot X-ray synthesis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_data=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--profile", default="desk", choices=sorted(PROFILES))
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("-o", "--override", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override")
        if needs_data:
            p.add_argument("--data", required=True, help="dataset root directory")

    p = sub.add_parser("gen-data", help="generate a paired phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the denoiser")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate X-rays for a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate generated images against a split")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--generated", default=None, help="directory of *_gen.png images")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the four ablation variants")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
