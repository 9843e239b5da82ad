"""``forgetlab`` command-line runner: one subcommand per experiment.

Exit codes: 0 on success, 2 on configuration errors, 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

from . import forensics as fo
from .config import ExperimentConfig, load_config
from .nanoformer import ConfigError, Grouping, build_model, load_checkpoint, save_checkpoint
from .trainer import TrainLog, continual_train, run_strategy_sweep, sweep_to_csv, train
from .metrics import evaluate_bleu

log = logging.getLogger("forgetlab")

SUBCOMMANDS = ("forgetting", "modules", "importance", "erasure", "drift")


class Run:
    """Output directory of one subcommand invocation."""

    def __init__(self, cfg: ExperimentConfig, command: str, overwrite: bool):
        self.cfg = cfg
        self.hash = cfg.config_hash()
        root = Path(cfg.output_dir)
        path = root / f"{command}-{self.hash[:12]}"
        if path.exists():
            if overwrite:
                shutil.rmtree(path)
            else:
                path = root / f"{command}-{self.hash[:12]}-{time.strftime('%Y%m%dT%H%M%S')}"
                k = 1
                while path.exists():
                    path = path.with_name(f"{path.name.split('~')[0]}~{k}")
                    k += 1
        path.mkdir(parents=True)
        self.path = path
        self.timings: list[str] = []
        (path / "config.yaml").write_text(cfg.dump_yaml(), encoding="utf-8")

    def write_csv(self, name: str, body: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(f"# config_hash={self.hash}\n" + body, encoding="utf-8")
        return p

    def write_json(self, name: str, obj: dict) -> Path:
        p = self.path / name
        p.write_text(json.dumps({"config_hash": self.hash, **obj}, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return p

    def time(self, label: str, t0: float) -> None:
        self.timings.append(f"{label}\t{time.perf_counter() - t0:.3f}s")

    def finish(self) -> None:
        # wall-clock numbers live apart from the byte-deterministic outputs
        (self.path / "timings.txt").write_text("\n".join(self.timings) + "\n", encoding="utf-8")


def _data(cfg: ExperimentConfig):
    g, i, cg, ci = cfg.build_data()
    return cg, ci, cg.vocab


def _general_model(cfg, run: Run, cg, ci, vocab):
    t0 = time.perf_counter()
    if cfg.g_checkpoint:
        model = load_checkpoint(cfg.g_checkpoint)
        glog = None
    else:
        model = build_model(cfg.model_config(vocab.src_size, vocab.tgt_size))
        glog = train(model, cg, cfg.train, {"G": cg.dev, "I": ci.dev})
    save_checkpoint(model, run.path / "model_G.ckpt", meta={"config_hash": run.hash})
    run.time("general training", t0)
    return model, glog


def _continual_model(cfg, run: Run, model_g, cg, ci):
    t0 = time.perf_counter()
    model_i = model_g.copy()
    ilog = continual_train(model_i, ci, None, cfg.continual, {"G": cg.dev, "I": ci.dev})
    save_checkpoint(model_i, run.path / "model_I.ckpt", meta={"config_hash": run.hash})
    run.time("continual training", t0)
    return model_i, ilog


def _merge_csv(logs: list[TrainLog]) -> str:
    parts = [lg.to_csv() for lg in logs if lg is not None]
    if not parts:
        return ""
    head = parts[0].splitlines()[0]
    rows = [line for p in parts for line in p.splitlines()[1:]]
    return "\n".join([head] + rows) + "\n"


def cmd_forgetting(cfg: ExperimentConfig, run: Run, args) -> dict:
    cg, ci, vocab = _data(cfg)
    model_g, glog = _general_model(cfg, run, cg, ci, vocab)
    before = {"G": evaluate_bleu(model_g, cg.test).bleu, "I": evaluate_bleu(model_g, ci.test).bleu}
    model_i, ilog = _continual_model(cfg, run, model_g, cg, ci)
    after = {"G": evaluate_bleu(model_i, cg.test).bleu, "I": evaluate_bleu(model_i, ci.test).bleu}
    run.write_csv("forgetting.csv", _merge_csv([glog, ilog]))
    summary = {"test_bleu_before": before, "test_bleu_after": after}
    run.write_json(
        "forgetting.json",
        {"general": glog.to_dict() if glog else None, "continual": ilog.to_dict(), **summary},
    )
    return summary


def cmd_modules(cfg: ExperimentConfig, run: Run, args) -> dict:
    cg, ci, vocab = _data(cfg)
    model_g, _ = _general_model(cfg, run, cg, ci, vocab)
    groupings = [args.grouping] if getattr(args, "grouping", None) else [cfg.analysis.grouping]
    out = {}
    for grouping in groupings:
        t0 = time.perf_counter()
        rows = run_strategy_sweep(
            model_g, Grouping(grouping), ci, cfg.continual,
            dev_sets={"G": cg.dev, "I": ci.dev}, test_sets={"G": cg.test, "I": ci.test},
            jobs=args.jobs, attach_ln=cfg.analysis.attach_ln,
        )
        run.time(f"sweep {grouping}", t0)
        run.write_csv(f"modules_{grouping}.csv", sweep_to_csv(rows))
        run.write_json(f"modules_{grouping}.json", {"grouping": grouping, "rows": [r.__dict__ for r in rows]})
        out[grouping] = len(rows)
    return {"rows": out}


def _safe(tag: str) -> str:
    return tag.replace("/", "_").replace("-", "x").replace(".", "_")


def cmd_importance(cfg: ExperimentConfig, run: Run, args) -> dict:
    cg, ci, vocab = _data(cfg)
    model_g, _ = _general_model(cfg, run, cg, ci, vocab)
    t0 = time.perf_counter()
    imp_g = fo.accumulate_importance(model_g, cg, cfg.analysis.t_limit, "G")
    run.time("importance G", t0)
    imp_g.save(run.path / "importance_G.ckpt", model_g)
    model_i, _ = _continual_model(cfg, run, model_g, cg, ci)
    t0 = time.perf_counter()
    imp_i = fo.accumulate_importance(model_i, ci, cfg.analysis.t_limit, "I")
    run.time("importance I", t0)
    imp_i.save(run.path / "importance_I.ckpt", model_i)
    rows = ["matrix,spearman_G_vs_I"]
    corr = {}
    for tag in fo.analysis_matrices(model_g, cfg.analysis.matrices):
        key = tag.key()
        for label, imp in (("G", imp_g), ("I", imp_i)):
            fo.export_heatmap(
                imp, tag, run.path / "heatmaps" / f"{_safe(key)}_{label}", {"config_hash": run.hash}
            )
        corr[key] = fo.map_correlation(imp_g[tag], imp_i[tag])
        rows.append(f"{key},{corr[key]!r}")
    run.write_csv("importance_correlation.csv", "\n".join(rows) + "\n")
    run.write_json("importance.json", {"t_limit": cfg.analysis.t_limit, "spearman_G_vs_I": corr})
    return {"matrices": len(corr)}


def cmd_erasure(cfg: ExperimentConfig, run: Run, args) -> dict:
    cg, ci, vocab = _data(cfg)
    model_g, _ = _general_model(cfg, run, cg, ci, vocab)
    t0 = time.perf_counter()
    imp_g = fo.accumulate_importance(model_g, cg, cfg.analysis.t_limit, "G")
    run.time("importance G", t0)
    curves, summary = [], {}
    t0 = time.perf_counter()
    for tag in fo.analysis_matrices(model_g, cfg.analysis.matrices):
        key = tag.key()
        desc = fo.erase_and_eval(model_g, imp_g, key, "descending", cfg.analysis.fractions, cg.test)
        asc = fo.erase_and_eval(model_g, imp_g, key, "ascending", cfg.analysis.fractions, cg.test)
        curves += [desc, asc]
        summary[key] = {"mean_bleu_descending": desc.mean_bleu(), "mean_bleu_ascending": asc.mean_bleu()}
    run.time("erasure", t0)
    run.write_csv("erasure.csv", fo.curves_to_csv(curves))
    run.write_json("erasure.json", {"curves": [c.__dict__ for c in curves], "summary": summary})
    return {"curves": len(curves)}


def cmd_drift(cfg: ExperimentConfig, run: Run, args) -> dict:
    cg, ci, vocab = _data(cfg)
    model_g, _ = _general_model(cfg, run, cg, ci, vocab)
    t0 = time.perf_counter()
    imp_g = fo.accumulate_importance(model_g, cg, cfg.analysis.t_limit, "G")
    run.time("importance G", t0)
    model_i, _ = _continual_model(cfg, run, model_g, cg, ci)
    report = fo.decile_drift(model_g, model_i, imp_g)
    run.write_csv("drift.csv", report.to_csv())
    run.write_json("drift.json", json.loads(report.to_json()))
    return {"top": report.distances[0], "bottom": report.distances[-1]}


COMMANDS = {
    "forgetting": cmd_forgetting,
    "modules": cmd_modules,
    "importance": cmd_importance,
    "erasure": cmd_erasure,
    "drift": cmd_drift,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forgetlab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="YAML or JSON experiment config")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers for sweep cells")
    parser.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
    parser.add_argument("--grouping", choices=[g.value for g in Grouping], help="override analysis.grouping (modules)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config)
        run = Run(cfg, args.command, args.overwrite)
        result = COMMANDS[args.command](cfg, run, args)
        run.finish()
    except ConfigError as exc:
        print(f"forgetlab: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("run failed", exc_info=True)
        print(f"forgetlab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"run_dir": str(run.path), **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
