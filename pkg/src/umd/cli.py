"""Command-line entry point: ``umd {pretrain,finetune,sample,probe,ablate}``.

Configs are flat YAML files of dotted keys (see ``RunConfig.to_flat``);
``--set key=value`` overrides are applied after the file. Every subcommand
writes the resolved config next to its outputs. Failures print a single JSON
line on stderr and exit with 2 (config), 3 (I/O) or 4 (numerical abort).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from .config import RunConfig, apply_overrides, load_config, parse_set_args, save_config
from .data import load_dataset, train_test_split_stratified
from .evaluation import probe_model, probe_timestep, sample_fidelity, train_oracle_classifier
from .exceptions import ConfigError, NumericalAbort
from .sampler import SamplerConfig, ddim_sample
from .schedules import make_schedule
from .trainer import finetune, load_checkpoint, model_from_checkpoint, pretrain

log = logging.getLogger("umd")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

# Rows of the ablation grid; "low" and "high" values are our choice since the
# source table names the settings without numbers.
ABLATIONS = {
    "base": {},
    "x0_only": {"objective.head_mode": "x0_only"},
    "eps_only": {"objective.head_mode": "eps_only"},
    "low_r_t0": {"objective.r_t0": 0.1},
    "high_m": {"objective.m_tge1": 0.75},
    "m_zero": {"objective.m_tge1": 0.0},
    "no_adaln": {"model.use_adaln": False},
}

SPLIT_SEED = 0


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig.desk()
    config = load_config(args.config, base) if args.config else base
    config = apply_overrides(config, parse_set_args(args.set))
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def load_splits(config: RunConfig):
    """Fixed stratified train/test split of the configured corpus."""
    m = config.model
    try:
        data = load_dataset(config.dataset, m.image_size, m.channels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if data.labels is None:
        return data, None
    tr, te = train_test_split_stratified(data.labels, 0.25, SPLIT_SEED)
    return data.subset(tr), data.subset(te)


def _out_dir(args) -> Path:
    out = Path(args.out or f"runs/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-test"
    probe.write_text("")
    probe.unlink()
    return out


def _checkpoint_config(path) -> tuple[dict, RunConfig]:
    ckpt = load_checkpoint(path)
    return ckpt, apply_overrides(RunConfig.desk(), ckpt["config"])


def save_grid(images: torch.Tensor, path, nrow: int) -> None:
    """Tile ``(n, C, H, W)`` images in [-1, 1] into one PNG."""
    from PIL import Image

    x = ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    n, c, h, w = x.shape
    ncol = -(-n // nrow)
    grid = torch.zeros(c, ncol * h, nrow * w, dtype=torch.uint8)
    for i in range(n):
        r, q = divmod(i, nrow)
        grid[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = x[i]
    arr = grid.permute(1, 2, 0).numpy()
    Image.fromarray(arr[..., 0] if c == 1 else arr).save(path)


def cmd_pretrain(args) -> dict:
    config = resolve_config(args)
    out = _out_dir(args)
    save_config(config, out / "config.yaml")
    train, _ = load_splits(config)
    t0 = time.time()
    trainer = pretrain(config, train, out, max_steps=args.max_steps, resume=args.checkpoint)
    return {"checkpoint": str(out / "pretrain.pt"), "steps": trainer.step,
            "seconds": round(time.time() - t0, 2)}


def cmd_finetune(args) -> dict:
    _, base = _checkpoint_config(args.checkpoint)
    config = resolve_config(args, base)
    out = _out_dir(args)
    save_config(config, out / "config.yaml")
    train, _ = load_splits(config)
    if train.labels is None:
        raise ConfigError("finetuning needs a labeled corpus")
    trainer = finetune(args.checkpoint, config, train, out, max_steps=args.max_steps)
    path = trainer.save(out / "finetune.pt")
    return {"checkpoint": str(path), "steps": trainer.step}


def cmd_sample(args) -> dict:
    ckpt, base = _checkpoint_config(args.checkpoint)
    config = resolve_config(args, base)
    over = {k: v for k, v in {"sampler.cfg_scale": args.cfg_scale, "sampler.n_steps": args.steps,
                              "sampler.eta": args.eta}.items() if v is not None}
    config = apply_overrides(config, over)
    out = _out_dir(args)
    save_config(config, out / "config.yaml")
    model = model_from_checkpoint(ckpt, use_ema=True)
    n_classes = model.config.n_classes
    if args.label:
        labels = torch.tensor([lab for lab in args.label for _ in range(args.n)])
        if n_classes is None or labels.max() >= n_classes or labels.min() < 0:
            raise ConfigError(f"labels {args.label} are outside the model's vocabulary")
    elif n_classes is not None:
        labels = torch.arange(n_classes).repeat_interleave(args.n)
    else:
        labels = None
    s = config.sampler
    sc = SamplerConfig(s.n_steps, s.eta, s.cfg_scale, s.predict_mode, s.clip)
    stats: dict = {}
    gen = torch.Generator().manual_seed(config.seed)
    samples = ddim_sample(model, make_schedule(config.schedule, config.T), sc, labels=labels,
                          n_samples=None if labels is not None else args.n, generator=gen, stats=stats)
    save_grid(samples, out / "samples.png", nrow=args.n if labels is not None else min(args.n, 10))
    torch.save(samples, out / "samples.pt")
    meta = {"checkpoint": str(args.checkpoint), "seed": config.seed, "cfg_scale": sc.cfg_scale,
            "n_steps": sc.n_steps, "eta": sc.eta, "predict_mode": sc.predict_mode,
            "labels": None if labels is None else labels.tolist(), "model_evals": stats.get("model_evals"),
            "grid": "samples.png"}
    (out / "samples.json").write_text(json.dumps(meta, indent=2))
    return {"grid": str(out / "samples.png"), "n": len(samples)}


def cmd_probe(args) -> dict:
    ckpt, base = _checkpoint_config(args.checkpoint)
    config = resolve_config(args, base)
    if args.shots is not None:
        config = apply_overrides(config, {"probe.shots": args.shots})
    out = _out_dir(args)
    save_config(config, out / "config.yaml")
    train, test = load_splits(config)
    if test is None:
        raise ConfigError("probing needs a labeled corpus")
    model = model_from_checkpoint(ckpt, use_ema=False)
    t = probe_timestep(config.objective, config.probe.noised_t)
    res = probe_model(model, train, test, config.probe.shots, seed=config.seed,
                      ridge_lambda=config.probe.ridge_lambda, t=t,
                      schedule=make_schedule(config.schedule, config.T))
    rec = {"kind": "probe", "accuracy": res.accuracy, "shots": res.n_shots, "t": t,
           "ridge_lambda": res.ridge_lambda, "checkpoint": str(args.checkpoint)}
    with (out / "probe.jsonl").open("a") as fh:
        fh.write(json.dumps(rec) + "\n")
    print(res.summary())
    return rec


def cmd_ablate(args) -> dict:
    config = resolve_config(args)
    out = _out_dir(args)
    save_config(config, out / "config.yaml")
    rows = args.rows or list(ABLATIONS)
    unknown = [r for r in rows if r not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}; choose from {list(ABLATIONS)}")
    train, test = load_splits(config)
    schedule = make_schedule(config.schedule, config.T)
    oracle = train_oracle_classifier(train, test, config.seed) if args.fidelity else None
    table = []
    for name in rows:
        cfg = apply_overrides(config, ABLATIONS[name])
        row_dir = out / name
        row_dir.mkdir(exist_ok=True)
        save_config(cfg, row_dir / "config.yaml")
        trainer = pretrain(cfg, train, row_dir, max_steps=args.max_steps)
        t = probe_timestep(cfg.objective, cfg.probe.noised_t)
        shots = args.shots or cfg.probe.shots
        res = probe_model(trainer.model, train, test, shots, seed=cfg.seed,
                          ridge_lambda=cfg.probe.ridge_lambda, t=t, schedule=schedule)
        enc = sum(r["enc_token_steps"] for r in trainer.history if r["kind"] == "epoch")
        row = {"row": name, "probe": res.accuracy, "enc_token_steps": enc}
        if oracle is not None:
            ft = finetune(trainer.state(), cfg, train, row_dir, max_steps=args.max_steps)
            ema = model_from_checkpoint(ft.state(), use_ema=True)
            s = cfg.sampler
            sc = SamplerConfig(s.n_steps, s.eta, s.cfg_scale, s.predict_mode, s.clip)
            row["fidelity"] = sample_fidelity(ema, schedule, sc, oracle, args.n, cfg.seed)["accuracy"]
        table.append(row)
        log.info("ablation %s: %s", name, row)
    (out / "ablation.json").write_text(json.dumps(table, indent=2))
    cols = ["row", "probe", "enc_token_steps"] + (["fidelity"] if oracle is not None else [])
    lines = ["\t".join(cols)] + ["\t".join(
        f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols) for r in table]
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return {"rows": len(table), "table": str(out / "ablation.tsv")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_required=False):
        p.add_argument("--config", help="flat YAML config of dotted keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", required=checkpoint_required)
        return p

    p = common(sub.add_parser("pretrain", help="self-supervised pretraining"))
    p.add_argument("--max_steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("finetune", help="class-conditional finetuning"), True)
    p.add_argument("--max_steps", type=int)
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("sample", help="guided DDIM sampling"), True)
    p.add_argument("--cfg_scale", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--label", type=int, action="append", help="class id (repeatable)")
    p.add_argument("--n", type=int, default=8, help="samples per label")
    p.set_defaults(func=cmd_sample)

    p = common(sub.add_parser("probe", help="few-shot linear probe"), True)
    p.add_argument("--shots", type=int)
    p.set_defaults(func=cmd_probe)

    p = common(sub.add_parser("ablate", help="train and probe each ablation row"))
    p.add_argument("--rows", nargs="+")
    p.add_argument("--shots", type=int)
    p.add_argument("--max_steps", type=int)
    p.add_argument("--fidelity", action="store_true", help="also finetune and score guided samples")
    p.add_argument("--n", type=int, default=20, help="samples per class for fidelity")
    p.set_defaults(func=cmd_ablate)
    return parser


def _fail(kind: str, exc: BaseException, code: int) -> int:
    rec = {"error": kind, "message": str(exc).replace("\n", " "), "exit_code": code}
    if isinstance(exc, NumericalAbort):
        rec["snapshot"] = exc.snapshot
    print(json.dumps(rec, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = args.func(args)
    except (ConfigError, ValueError) as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except NumericalAbort as exc:
        return _fail("numerical", exc, EXIT_NUMERICAL)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)
    print(json.dumps({"ok": True, "command": args.command, **result}, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
