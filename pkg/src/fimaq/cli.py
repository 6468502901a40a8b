"""Command-line experiment runner: ``fimaq run`` sweeps a TOML config into
results.csv plus per-block JSONL, loss traces and heatmap CSVs; ``fimaq
report`` summarizes a results file into a markdown table."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import time
import traceback
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import fim
from .recon import QuantConfig, ReconConfig, quantize_model
from .zoo import Checkpoint, SyntheticDataSpec, ToyViTConfig, evaluate_top1, gen_dataset, pretrain

log = logging.getLogger("fimaq")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

RESULT_COLUMNS = [
    "loss_kind", "w_bits", "a_bits", "rank", "alpha", "probe_samples", "recon_samples", "seed",
    "status", "fp_top1", "q_top1", "block_final_losses", "block_loss_used", "rank_reached",
    "edge_bits", "calib_method", "interval", "max_iter", "batch_size", "p_drop", "lr_v", "lr_scale",
    "reg_weight", "epochs", "seconds", "error",
]
VOLATILE_COLUMNS = ("seconds",)
HEATMAP_PANELS = ("exact", "diag", "lowrank", "dplr")
HEATMAP_SAMPLES = 16


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainSpec:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 64


@dataclass
class SweepAxes:
    loss_kinds: list = field(default_factory=lambda: ["dplr"])
    ranks: list = field(default_factory=lambda: [15])
    alphas: list = field(default_factory=lambda: [0.5])
    seeds: list = field(default_factory=lambda: [0])
    bits: list = field(default_factory=lambda: [[4, 4]])
    probe_samples: list = field(default_factory=lambda: [0])
    recon_samples: list = field(default_factory=lambda: [0])


@dataclass
class OutputSpec:
    dir: str = "results"
    heatmaps: bool = False
    traces: bool = True


@dataclass
class ExperimentConfig:
    model: ToyViTConfig
    data: SyntheticDataSpec
    pretrain: PretrainSpec
    quant: QuantConfig
    recon: ReconConfig
    sweep: SweepAxes
    output: OutputSpec

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            d = asdict(getattr(self, f.name))
            out[f.name] = {k: v for k, v in d.items() if v is not None}
        return out


SECTIONS = {
    "model": ToyViTConfig,
    "data": SyntheticDataSpec,
    "pretrain": PretrainSpec,
    "quant": QuantConfig,
    "recon": ReconConfig,
    "sweep": SweepAxes,
    "output": OutputSpec,
}


def _typed(cls, section: str, values: dict):
    known = {f.name: f for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown field '{section}.{key}'")
    kwargs = {}
    for key, raw in values.items():
        default = known[key].default
        if default is MISSING and known[key].default_factory is not MISSING:
            default = known[key].default_factory()
        if isinstance(default, bool) and not isinstance(raw, bool):
            raise ConfigError(f"field '{section}.{key}' must be true or false")
        if isinstance(default, list) and not (isinstance(raw, list) and raw):
            raise ConfigError(f"field '{section}.{key}' must be a non-empty list")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                raise ConfigError(f"field '{section}.{key}' must be a number")
            if isinstance(default, int) and not isinstance(raw, int):
                raise ConfigError(f"field '{section}.{key}' must be an integer")
        kwargs[key] = raw
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section [{section}]: {exc}") from None


def parse_config(data: dict) -> ExperimentConfig:
    for name in data:
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(data[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    parts = {name: _typed(cls, name, data.get(name, {})) for name, cls in SECTIONS.items()}
    cfg = ExperimentConfig(**parts)
    _validate_sweep(cfg)
    return cfg


def _validate_sweep(cfg: ExperimentConfig) -> None:
    sw = cfg.sweep
    for kind in sw.loss_kinds:
        if kind not in fim.LOSS_KINDS:
            raise ConfigError(f"field 'sweep.loss_kinds': unknown loss {kind!r}")
    for a in sw.alphas:
        if not isinstance(a, (int, float)) or not 0.0 <= a <= 1.0:
            raise ConfigError(f"field 'sweep.alphas': {a!r} outside [0, 1]")
    for name in ("ranks", "seeds", "probe_samples", "recon_samples"):
        for v in getattr(sw, name):
            if not isinstance(v, int) or isinstance(v, bool) or v < (1 if name == "ranks" else 0):
                raise ConfigError(f"field 'sweep.{name}': invalid entry {v!r}")
    for b in sw.bits:
        pair = [b, b] if isinstance(b, int) else b
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(x, int) for x in pair)):
            raise ConfigError(f"field 'sweep.bits': entry {b!r} must be an int or [w, a]")
        try:
            replace(cfg.quant, w_bits=pair[0], a_bits=pair[1])
        except ValueError as exc:
            raise ConfigError(f"field 'sweep.bits': {exc}") from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data)


# -- sweep -------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Combo:
    loss_kind: str
    w_bits: int
    a_bits: int
    rank: int
    alpha: float
    probe_samples: int
    recon_samples: int
    seed: int

    @property
    def key(self) -> str:
        return (f"{self.loss_kind}_w{self.w_bits}a{self.a_bits}_r{self.rank}_al{self.alpha:g}"
                f"_p{self.probe_samples}_n{self.recon_samples}_s{self.seed}")


def combinations(sw: SweepAxes) -> list[Combo]:
    bits = [(b, b) if isinstance(b, int) else tuple(b) for b in sw.bits]
    combos = {
        Combo(k, w, a, r, float(al), p, n, s)
        for k, (w, a), r, al, p, n, s in itertools.product(
            sw.loss_kinds, bits, sw.ranks, sw.alphas, sw.probe_samples, sw.recon_samples, sw.seeds
        )
    }
    return sorted(combos)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fim_panels(model, qmodel, calib_x) -> dict[str, np.ndarray]:
    """Class-token blocks of exact, diagonal, low-rank and DPLR FIMs of the final block."""
    cfgm = model.config
    b = cfgm.blocks - 1
    state = qmodel.states[b]
    tail = model.tail(b)
    zs = state.z[:HEATMAP_SAMPLES]
    exact = sum(fim.exact_fim(tail, z) for z in zs) / len(zs)
    est = state.estimate
    panels = {"exact": exact, "diag": np.diag(est.diag)}
    lowrank = state.bank.matrix()
    panels["lowrank"] = lowrank
    panels["dplr"] = est.alpha * lowrank + (1.0 - est.alpha) * np.diag(est.diag)
    return {k: fim.class_token_fim_heatmap(v, cfgm.tokens, cfgm.dim) for k, v in panels.items()}


class Runner:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self._ckpts: dict[int, tuple[Checkpoint, object]] = {}

    def checkpoint(self, seed: int):
        if seed not in self._ckpts:
            data = gen_dataset(replace(self.cfg.data, seed=seed))
            p = self.cfg.pretrain
            ck = pretrain(self.cfg.model, data, p.epochs, seed, p.lr, p.batch_size)
            self._ckpts[seed] = (ck, data)
        return self._ckpts[seed]

    def run_combo(self, combo: Combo) -> tuple[dict, list[dict], dict]:
        t0 = time.perf_counter()
        ck, data = self.checkpoint(combo.seed)
        qcfg = replace(self.cfg.quant, w_bits=combo.w_bits, a_bits=combo.a_bits)
        rcfg = replace(self.cfg.recon, loss_kind=combo.loss_kind, rank=combo.rank, alpha=combo.alpha,
                       probe_samples=combo.probe_samples, recon_samples=combo.recon_samples,
                       seed=combo.seed)
        model = ck.model()
        want_maps = self.cfg.output.heatmaps and combo.loss_kind in ("rankk", "dplr")
        qmodel, reports = quantize_model(model, data.calib.x, qcfg, rcfg, keep_states=True)
        row = self._base_row(combo)
        row.update(
            status="ok",
            fp_top1=ck.meta.get("val_top1", evaluate_top1(model, data.val)),
            q_top1=evaluate_top1(qmodel, data.val),
            block_final_losses=";".join(_fmt(r["final_loss"]) for r in reports),
            block_loss_used=";".join(r.get("loss_used", combo.loss_kind) for r in reports),
            rank_reached=";".join(str(r["rank_reached"]) for r in reports),
            seconds=round(time.perf_counter() - t0, 3),
        )
        traces = {s.index: list(s.trace) for s in qmodel.states}
        extra = {"traces": traces}
        if want_maps and qmodel.states[-1].bank is not None:
            extra["heatmaps"] = _fim_panels(model, qmodel, data.calib.x)
        return row, reports, extra

    def _base_row(self, combo: Combo) -> dict:
        r, q = self.cfg.recon, self.cfg.quant
        qcfg = replace(q, w_bits=combo.w_bits, a_bits=combo.a_bits)
        row = {c: "" for c in RESULT_COLUMNS}
        row.update(asdict(combo))
        row.update(edge_bits=qcfg.edge, calib_method=q.calib_method, interval=r.interval,
                   max_iter=r.max_iter, batch_size=r.batch_size, p_drop=r.p_drop, lr_v=r.lr_v,
                   lr_scale=r.lr_scale, reg_weight=r.reg_weight, epochs=self.cfg.pretrain.epochs)
        return row

    def failure_row(self, combo: Combo, exc: BaseException, seconds: float) -> dict:
        row = self._base_row(combo)
        row.update(status="failed", seconds=round(seconds, 3),
                   error=f"{type(exc).__name__}: {exc}".replace("\n", " ")[:500])
        return row


def run_experiment(cfg: ExperimentConfig, out: Path) -> int:
    """Run every sweep combination; returns the process exit code."""
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.toml", "wb") as fh:
        tomli_w.dump(cfg.to_dict(), fh)
    runner = Runner(cfg, out)
    failed = 0
    combos = combinations(cfg.sweep)
    log.info("%d combinations -> %s", len(combos), out)
    with open(out / "results.csv", "w", newline="") as res_fh, open(out / "blocks.jsonl", "w") as blk_fh:
        writer = csv.DictWriter(res_fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for combo in combos:
            t0 = time.perf_counter()
            try:
                row, reports, extra = runner.run_combo(combo)
            except Exception as exc:  # recorded as a failure row, sweep continues
                failed += 1
                log.error("combination %s failed: %s", combo.key, exc)
                log.debug("%s", traceback.format_exc())
                writer.writerow({k: _fmt(v) for k, v in runner.failure_row(combo, exc, time.perf_counter() - t0).items()})
                res_fh.flush()
                continue
            writer.writerow({k: _fmt(v) for k, v in row.items()})
            res_fh.flush()
            for rep in reports:
                blk_fh.write(json.dumps({"combo": combo.key, **rep}, sort_keys=True) + "\n")
            blk_fh.flush()
            if cfg.output.traces:
                tdir = out / "traces"
                tdir.mkdir(exist_ok=True)
                with open(tdir / f"{combo.key}.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["block", "iteration", "loss"])
                    for b, trace in sorted(extra["traces"].items()):
                        w.writerows((b, i, repr(v)) for i, v in enumerate(trace))
            if "heatmaps" in extra:
                hdir = out / "heatmaps" / combo.key
                hdir.mkdir(parents=True, exist_ok=True)
                for name, mat in extra["heatmaps"].items():
                    fim.write_heatmap_csv(hdir / f"{name}.csv", mat)
            log.info("%s: top-1 %.4f (fp %.4f)", combo.key, row["q_top1"], row["fp_top1"])
    return EXIT_RUNTIME if failed else EXIT_OK


# -- report ------------------------------------------------------------------

@dataclass
class Summary:
    table: str
    skipped: int
    cells: dict


def summarize(results_path) -> Summary:
    cells: dict[tuple, list[float]] = {}
    skipped = 0
    with open(results_path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                if row.get("status") != "ok":
                    raise ValueError("not ok")
                key = (row["loss_kind"], int(row["w_bits"]), int(row["a_bits"]))
                acc = float(row["q_top1"])
                if not 0.0 <= acc <= 1.0:
                    raise ValueError("accuracy out of range")
            except (KeyError, TypeError, ValueError):
                skipped += 1
                continue
            cells.setdefault(key, []).append(acc)
    lines = ["| loss | W/A | top-1 (%) mean ± std | runs |", "|---|---|---|---|"]
    stats = {}
    for key in sorted(cells):
        vals = np.array(cells[key]) * 100.0
        mean, std = float(vals.mean()), float(vals.std())
        stats[key] = (mean, std, len(vals))
        lines.append(f"| {key[0]} | {key[1]}/{key[2]} | {mean:.2f} ± {std:.2f} | {len(vals)} |")
    if skipped:
        lines.append("")
        lines.append(f"{skipped} malformed or failed row(s) skipped.")
    return Summary("\n".join(lines) + "\n", skipped, stats)


def heatmap_bundle(results_dir: Path) -> dict[str, dict[str, np.ndarray]]:
    """Every complete set of four panels found under ``heatmaps/``."""
    bundles = {}
    root = results_dir / "heatmaps"
    if not root.is_dir():
        return bundles
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = {n: sub / f"{n}.csv" for n in HEATMAP_PANELS}
        if not all(f.exists() for f in files.values()):
            continue
        mats = {n: fim.read_heatmap_csv(f) for n, f in files.items()}
        if len({m.shape for m in mats.values()}) != 1:
            raise ValueError(f"{sub}: heatmap panels differ in shape")
        bundles[sub.name] = mats
    return bundles


def report(results_path: Path, heatmaps: bool = False) -> str:
    summary = summarize(results_path)
    text = "# Quantized top-1 by loss and bit width\n\n" + summary.table
    if heatmaps:
        bundles = heatmap_bundle(results_path.parent)
        text += "\n# FIM heatmaps (class token, final block)\n\n"
        if not bundles:
            text += "No heatmap bundles found.\n"
        for key, mats in bundles.items():
            text += f"## {key}\n\n| panel | shape | Frobenius norm | max abs |\n|---|---|---|---|\n"
            for name in HEATMAP_PANELS:
                m = mats[name]
                text += f"| {name} | {m.shape[0]}x{m.shape[1]} | {np.linalg.norm(m):.4g} | {np.abs(m).max():.4g} |\n"
            text += "\n"
    return text


# -- entry point -------------------------------------------------------------

def _recon_defaults() -> str:
    rc = ReconConfig()
    return "\n".join(f"  {f.name} = {getattr(rc, f.name)!r}" for f in fields(rc))


class _Parser(argparse.ArgumentParser):
    """Usage errors (unknown flags included) exit with the config-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="fimaq",
        description="FIM-guided block-wise post-training quantization experiments on toy ViTs.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run_p = sub.add_parser(
        "run", help="run a sweep from a TOML config",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="[recon] defaults:\n" + _recon_defaults(),
    )
    run_p.add_argument("--config", required=True, type=Path, help="TOML experiment config")
    run_p.add_argument("--out", type=Path, help="output directory (overrides [output].dir)")
    run_p.add_argument("--seed", type=int, help="run only this seed (overrides sweep.seeds)")
    rep_p = sub.add_parser("report", help="summarize a results.csv")
    rep_p.add_argument("--results", required=True, type=Path, help="results.csv from a run")
    rep_p.add_argument("--heatmaps", action="store_true", help="include the FIM heatmap bundle")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "run":
        try:
            cfg = load_config(args.config)
            if args.seed is not None:
                if args.seed < 0:
                    raise ConfigError("--seed must be non-negative")
                cfg.sweep.seeds = [args.seed]
            if args.out is not None:
                cfg.output.dir = str(args.out)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            return run_experiment(cfg, Path(cfg.output.dir))
        except OSError as exc:
            print(f"runtime error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
    try:
        text = report(args.results, args.heatmaps)
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = args.results.parent / "summary.md"
    out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
