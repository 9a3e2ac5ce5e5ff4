"""Command-line entry point.

Progress goes to stderr; tables and artifacts go to files under ``--out``.
Exit status: 0 success, 1 configuration/contract failure, 2 I/O or corruption.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


from .config import from_mapping, read_config, to_mapping, write_config
from .engine import load_checkpoint, save_checkpoint
from .errors import CorruptionError, FormatError, PathFusionError
from .mfef import MFEFNet, ModelConfig
from .preprocess import PreprocessConfig
from .scene import SceneConfig, build_scene, generate_routes
from .sensors import CameraConfig, DatasetConfig, LidarConfig, generate_dataset, load_dataset, save_dataset
from .harness.gradgate import run_gradient_gate
from .harness.metrics import evaluate
from .harness.report import _write_csv, emit_report
from .harness.suites import DEFAULT_COMBOS, combo_name, lighting_suite, ablation_suite, parse_combo
from .harness.training import TrainConfig, prepare, train
from .harness import checks

DEFAULT_MODEL = {"width_mult": "0.25"}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


class _Ctx:
    def __init__(self, args):
        self.args = args
        config = getattr(args, "config", None)
        self.values = read_config(config) if config else {}
        self.seed = getattr(args, "seed", 0)
        self.out = Path(getattr(args, "out", "out"))

    def build(self, cls, defaults: dict | None = None, **overrides):
        values = {**(defaults or {}), **self.values}
        if "seed" in {f for f in cls.__dataclass_fields__}:
            overrides.setdefault("seed", self.seed)
        return from_mapping(cls, values, **overrides)

    def prepared(self, data_dir: str):
        ds = load_dataset(data_dir)
        _log(f"loaded {len(ds)} samples from {data_dir}")
        return prepare(ds, self.build(PreprocessConfig), progress=_log)

    def model_cfg(self) -> ModelConfig:
        return self.build(ModelConfig, DEFAULT_MODEL)


def cmd_generate(ctx: _Ctx) -> int:
    scfg = ctx.build(SceneConfig)
    dcfg = ctx.build(DatasetConfig)
    scene = build_scene(scfg)
    routes = generate_routes(scene, dcfg.route_count, seed=dcfg.seed)
    ds = generate_dataset(
        scene, routes, dcfg.n_samples, dcfg.gps_window, dcfg.seed,
        camera=ctx.build(CameraConfig), lidar=ctx.build(LidarConfig),
        arc_step_m=dcfg.arc_step_m, gps_noise_m=dcfg.gps_noise_m, shadowing=dcfg.shadowing,
        config_digest=scfg.digest(), progress=lambda i, n: _log(f"rendered {i}/{n} samples"),
    )
    ds.meta = {"scene": {k: repr(v) for k, v in to_mapping(scfg).items()}}
    save_dataset(ds, ctx.out)
    _log(f"wrote {len(ds)} samples to {ctx.out}; checksum {ds.checksum()}")
    return 0


def cmd_preprocess_check(ctx: _Ctx) -> int:
    rows = checks.preprocessing_checks(seed=ctx.seed)
    ctx.out.mkdir(parents=True, exist_ok=True)
    _write_csv(ctx.out / "preprocess_check.csv", ["check", "value", "limit", "passed"],
               [[n, repr(v), repr(lim), ok] for n, v, lim, ok in rows])
    failed = [n for n, _, _, ok in rows if not ok]
    for n, v, lim, ok in rows:
        _log(f"{'PASS' if ok else 'FAIL'} {n}: {v:.3e} (limit {lim:.1e})")
    return 1 if failed else 0


def _save_model(model: MFEFNet, directory: Path, name: str = "model") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(directory / f"{name}.ckpt", model.state_dict())
    write_config(directory / f"{name}.cfg", to_mapping(model.cfg))


def _load_model(ckpt: Path) -> MFEFNet:
    cfg_path = ckpt.with_suffix(".cfg")
    if not cfg_path.is_file():
        raise FormatError(f"missing model config {cfg_path}")
    model = MFEFNet(from_mapping(ModelConfig, read_config(cfg_path)))
    model.load_state_dict(load_checkpoint(ckpt))
    return model.eval()


def cmd_train(ctx: _Ctx) -> int:
    data = ctx.prepared(ctx.args.data)
    tcfg = ctx.build(TrainConfig)
    model, hist = train(data, ctx.model_cfg(), tcfg, progress=_log)
    _save_model(model, ctx.out)
    _write_csv(ctx.out / "history.csv", ["epoch", "train_loss", "val_loss"],
               [[i, repr(t), repr(hist.val_loss[i]) if i < len(hist.val_loss) else "n/a"]
                for i, t in enumerate(hist.train_loss)])
    return 0


def cmd_eval(ctx: _Ctx) -> int:
    data = ctx.prepared(ctx.args.data)
    model = _load_model(Path(ctx.args.model))
    alpha = ctx.args.night_alpha
    m = evaluate(model, data, ctx.args.split, alpha)
    ctx.out.mkdir(parents=True, exist_ok=True)
    _write_csv(ctx.out / "metrics.csv", ["split", "night_alpha", "rmse_db"],
               [[ctx.args.split, "n/a" if alpha is None else repr(alpha), repr(m.rmse_db)]])
    _write_csv(ctx.out / "cdf.csv", ["abs_error_db", "fraction"], [[repr(e), repr(f)] for e, f in m.cdf])
    _log(f"RMSE {m.rmse_db:.4f} dB on {ctx.args.split}")
    return 0


def _combos(ctx: _Ctx):
    if ctx.args.combos:
        return [parse_combo(c) for c in ctx.args.combos.split(",")]
    return list(DEFAULT_COMBOS)


def cmd_ablate(ctx: _Ctx) -> int:
    data = ctx.prepared(ctx.args.data)
    night = ctx.build(PreprocessConfig).night_alpha
    result = ablation_suite(data, _combos(ctx), ctx.model_cfg(), ctx.build(TrainConfig), night, progress=_log)
    for name, model in result.models.items():
        _save_model(model, ctx.out / "models", name)
    lighting = lighting_suite(data, result.models, (1.0, night))
    emit_report(result, ctx.out, lighting)
    _log(f"report written to {ctx.out}")
    return 0


def cmd_light_sweep(ctx: _Ctx) -> int:
    data = ctx.prepared(ctx.args.data)
    alphas = [float(a) for a in ctx.args.alphas.split(",")]
    models = {}
    if ctx.args.models:
        for mask in _combos(ctx):
            name = combo_name(mask)
            models[name] = _load_model(Path(ctx.args.models) / f"{name}.ckpt")
    else:
        result = ablation_suite(data, _combos(ctx), ctx.model_cfg(), ctx.build(TrainConfig), progress=_log)
        models = result.models
    rep = lighting_suite(data, models, alphas)
    ctx.out.mkdir(parents=True, exist_ok=True)
    _write_csv(ctx.out / "lighting.csv", ["combo", "alpha", "rmse_db"],
               [[c, repr(a), repr(v)] for c, vals in rep.rmse.items() for a, v in zip(rep.alphas, vals)])
    _write_csv(ctx.out / "reductions.csv", ["combo", "baseline", "alpha", "reduction_pct"],
               [[r.combo, r.baseline, repr(r.alpha), repr(r.reduction_pct)] for r in rep.reductions])
    return 0


def cmd_gradcheck(ctx: _Ctx) -> int:
    results = run_gradient_gate(seed=ctx.seed)
    rows = []
    for name, rep in results:
        rows.append([name, repr(rep.max_rel_err), sum(c.kinks for c in rep.inputs), rep.passed])
        _log(f"{'PASS' if rep.passed else 'FAIL'} {name}: max rel err {rep.max_rel_err:.2e}")
    ctx.out.mkdir(parents=True, exist_ok=True)
    _write_csv(ctx.out / "gradcheck.csv", ["op", "max_rel_err", "kinks_skipped", "passed"], rows)
    return 0 if all(r.passed for _, r in results) else 1


COMMANDS = {
    "generate": cmd_generate,
    "preprocess-check": cmd_preprocess_check,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "light-sweep": cmd_light_sweep,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are configuration errors: exit 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS so a flag given before the subcommand is not reset by the subparser
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every generator (default 0)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default ./out)")
    parser = _Parser(prog="pathfusion", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train", "eval", "ablate", "light-sweep"):
            p.add_argument("--data", required=True, help="dataset directory from `generate`")
        if name == "eval":
            p.add_argument("--model", required=True, help="checkpoint written by `train`")
            p.add_argument("--split", default="test")
            p.add_argument("--night-alpha", type=float, default=None)
        if name in ("ablate", "light-sweep"):
            p.add_argument("--combos", help="comma-separated, e.g. image,image+gps")
        if name == "light-sweep":
            p.add_argument("--alphas", default="1.0,0.5,0.3,0.14")
            p.add_argument("--models", help="directory of per-combination checkpoints from `ablate`")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](_Ctx(args))
    except (FormatError, CorruptionError, OSError) as exc:
        _log(f"error: {exc}")
        return 2
    except PathFusionError as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
