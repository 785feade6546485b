"""Command-line front end: simulate, label, train, evaluate, sweep.

Every command takes ``--config`` (JSON), ``--seed`` and ``--out-dir``;
flags win over the file. Exit codes: 0 success, 1 I/O or other failure,
2 configuration error, 3 data-contract error, 4 numeric error.
"""

from __future__ import annotations

import json
import sys
import time
from importlib import resources
from pathlib import Path

import click
import jsonschema
import numpy as np

from .config import RunConfig, load_config
from .counterfactual import CounterfactualLabelSet
from .data import atomic_write_text, load_csv, partition_spaces, write_csv
from .errors import ContractError, EscimError
from .evaluation import (ExperimentData, ablation_sweep_result, alpha_sweep, evaluate, experiment_threshold_sweep,
                         fit, latent_report, make_labels, label_stats, posterior_ablation, prepare_experiment,
                         export_histograms, latent_conversion_subset)
from .model import file_digest, load_checkpoint, predict, save_checkpoint
from .objectives import ObjectiveKind
from .simulator import generate_log, load_oracle_csv, write_oracle_csv


class RunManifest:
    """Records the effective config, input and output hashes, seeds and wall-clock of one command."""

    def __init__(self, command: str, config: RunConfig):
        self.command = command
        self.config = config
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self._t0 = time.perf_counter()

    def input(self, path):
        self.inputs[str(path)] = file_digest(path)
        return path

    def output(self, path):
        self.outputs[str(path)] = file_digest(path)
        return path

    def write(self, out_dir: Path, suffix: str = "") -> Path:
        doc = {
            "command": self.command,
            "config": self.config.to_json(),
            "seeds": list(self.config.seeds) if self.command == "sweep" else [self.config.seed],
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "wall_clock_seconds": round(time.perf_counter() - self._t0, 3),
        }
        path = out_dir / f"manifest_{self.command}{suffix}.json"
        atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


# -- shared plumbing -----------------------------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir)


def _log_path(cfg):
    return Path(cfg.data.log_path) if cfg.data.log_path else _out_dir(cfg) / "log.csv"


def _oracle_path(cfg):
    if cfg.data.oracle_path:
        return Path(cfg.data.oracle_path)
    default = _out_dir(cfg) / "oracle.csv"
    return default if default.exists() else None


def _labels_paths(cfg):
    csv = Path(cfg.data.labels_path) if cfg.data.labels_path else \
        _out_dir(cfg) / f"labels_{cfg.counterfactual.method}.csv"
    return csv, csv.with_suffix(".json")


def _checkpoint_path(cfg, kind: ObjectiveKind):
    if cfg.data.checkpoint_path:
        return Path(cfg.data.checkpoint_path)
    return _out_dir(cfg) / f"checkpoint_{kind.value}_s{cfg.seed}.bin"


def _load_experiment(cfg: RunConfig, manifest: RunManifest) -> ExperimentData:
    schema = cfg.schema()
    log_path = _log_path(cfg)
    if not log_path.exists():
        raise FileNotFoundError(f"log file not found: {log_path} (run `escim simulate` or set data.log_path)")
    log = load_csv(manifest.input(log_path), schema)
    oracle = None
    oracle_path = _oracle_path(cfg)
    if oracle_path is not None:
        oracle = load_oracle_csv(manifest.input(oracle_path))
        if len(oracle) != len(log):
            raise ContractError(f"oracle has {len(oracle)} rows but the log has {len(log)}")
    d = cfg.data
    return prepare_experiment(log, oracle, d.test_fraction, d.val_fraction, d.downsample_ratio, d.split_seed)


def _read_labels(cfg: RunConfig, data: ExperimentData, manifest: RunManifest) -> np.ndarray:
    """Counterfactual labels aligned with the training view (-1 on clicked rows)."""
    csv, sidecar = _labels_paths(cfg)
    if not csv.exists():
        raise ContractError(f"objective escim needs counterfactual labels; {csv} not found (run `escim label`)")
    ls = CounterfactualLabelSet.read(manifest.input(csv), manifest.input(sidecar))
    pos = np.searchsorted(data.train_idx, ls.indices)
    pos = np.minimum(pos, len(data.train_idx) - 1)
    if not np.array_equal(data.train_idx[pos], ls.indices):
        raise ContractError("label file rows are not part of this training view (different log or split?)")
    if not np.array_equal(np.sort(pos), partition_spaces(data.train).N):
        raise ContractError("label file does not cover exactly the non-clicked rows of the training view")
    out = np.full(len(data.train), -1, dtype=np.int8)
    out[pos] = ls.labels
    return out


def _dump(path: Path, doc) -> Path:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def validate_metric_report(doc: dict) -> None:
    schema = json.loads(resources.files("escim").joinpath("schemas/metric_report.schema.json").read_text())
    jsonschema.validate(doc, schema)


# -- commands --------------------------------------------------------------------------------------


def common_options(fn):
    fn = click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Run seed (overrides the config).")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="JSON run configuration.")(fn)
    return fn


def _config(config_path, seed, out_dir, section_overrides=None) -> RunConfig:
    cfg = load_config(config_path, seed=seed, out_dir=out_dir)
    if section_overrides and any(v is not None for v in section_overrides.values()):
        doc = cfg.to_json()
        for (section, key), value in section_overrides.items():
            if value is not None:
                doc[section][key] = value
        from .config import config_from_dict

        cfg = config_from_dict(doc)
    _out_dir(cfg).mkdir(parents=True, exist_ok=True)
    return cfg


@click.group()
def cli():
    """Counterfactual CVR estimation pipeline."""


@cli.command()
@common_options
def simulate(config_path, seed, out_dir):
    """Draw a synthetic log and its oracle from the ground-truth SCM."""
    cfg = _config(config_path, seed, out_dir)
    manifest = RunManifest("simulate", cfg)
    log, oracle = generate_log(cfg.scm_config())
    out = _out_dir(cfg)
    write_csv(log, out / "log.csv")
    write_oracle_csv(oracle, out / "oracle.csv")
    atomic_write_text(out / "schema.json", json.dumps(log.schema.to_json(), indent=2) + "\n")
    for name in ("log.csv", "oracle.csv", "schema.json"):
        manifest.output(out / name)
    sp = partition_spaces(log)
    ctr = sp.C.size / max(len(log), 1)
    cvr = sp.V.size / max(sp.C.size, 1)
    click.echo(f"|D|={len(log)} |C|={sp.C.size} |N|={sp.N.size} |V|={sp.V.size} "
               f"ctr={ctr:.4f} cvr_given_click={cvr:.4f}")
    manifest.write(out)


@cli.command()
@common_options
@click.option("--method", type=click.Choice(["max", "ratio"]), default=None, help="Label transform.")
def label(config_path, seed, out_dir, method):
    """Pre-train, abduct, intervene and transform: counterfactual labels for the training non-clicks."""
    cfg = _config(config_path, seed, out_dir, {("counterfactual", "method"): method})
    manifest = RunManifest("label", cfg)
    data = _load_experiment(cfg, manifest)
    if partition_spaces(data.train).C.size == 0:
        raise ContractError("the training view has no clicked samples; counterfactual labels need a non-empty "
                            "click space (check the click column, or lower data.test_fraction)")
    run = make_labels(data, cfg.seed, cfg.settings())
    ls = run.labelset
    full = CounterfactualLabelSet(data.train_idx[ls.indices], ls.labels, ls.method, ls.threshold_or_k, ls.pcvr_cf,
                                  cfg.seed)
    csv, sidecar = _labels_paths(cfg)
    full.write(csv, sidecar)
    manifest.output(csv)
    manifest.output(sidecar)
    stats = label_stats(data, ls)
    click.echo(" ".join(f"{k}={v}" for k, v in sorted(stats.items())))
    manifest.write(_out_dir(cfg), f"_{ls.method}")


@cli.command(name="train")
@common_options
@click.option("--objective", default=None, help="Objective kind (esmm, escm2_ips, escm2_dr, dcmt, escim, naive, ideal).")
def train_cmd(config_path, seed, out_dir, objective):
    """Train one objective and write its best-validation checkpoint and loss trace."""
    cfg = _config(config_path, seed, out_dir, {("objective", "kind"): objective})
    kind = ObjectiveKind.parse(cfg.objective.kind)
    manifest = RunManifest("train", cfg)
    data = _load_experiment(cfg, manifest)
    if kind == ObjectiveKind.IDEAL and data.oracle is None:
        raise ContractError("objective ideal needs the oracle CSV")
    cf = _read_labels(cfg, data, manifest) if kind == ObjectiveKind.ESCIM and cfg.objective.alpha_cf > 0 else None
    result = fit(data, kind, cfg.seed, cfg.settings(), cf_labels=cf)
    ckpt = _checkpoint_path(cfg, kind)
    save_checkpoint(result.model, ckpt)
    trace = _dump(_out_dir(cfg) / f"trace_{kind.value}_s{cfg.seed}.json",
                  {"objective": kind.value, "seed": cfg.seed, "best_epoch": result.best_epoch, "trace": result.trace})
    manifest.output(ckpt)
    manifest.output(trace)
    click.echo(f"objective={kind.value} best_epoch={result.best_epoch} checkpoint={ckpt}")
    manifest.write(_out_dir(cfg), f"_{kind.value}_s{cfg.seed}")


@cli.command(name="evaluate")
@common_options
@click.option("--objective", default=None, help="Objective whose checkpoint to evaluate.")
def evaluate_cmd(config_path, seed, out_dir, objective):
    """Test-split metrics for a checkpoint, with oracle and latent-conversion sub-reports."""
    cfg = _config(config_path, seed, out_dir, {("objective", "kind"): objective})
    kind = ObjectiveKind.parse(cfg.objective.kind)
    manifest = RunManifest("evaluate", cfg)
    ckpt = _checkpoint_path(cfg, kind)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt} (run `escim train` first)")
    data = _load_experiment(cfg, manifest)
    model = load_checkpoint(manifest.input(ckpt), data.log.schema)
    report = evaluate(model, data.test, data.oracle_of(data.test_idx), cfg.seed)
    report.latent = latent_report(model, data.train_full, data.val, data.test)
    doc = report.to_json()
    validate_metric_report(doc)
    out = _out_dir(cfg)
    tag = f"{kind.value}_s{cfg.seed}"
    manifest.output(_dump(out / f"metrics_{tag}.json", doc))
    idx = latent_conversion_subset(data.train_full, data.val, data.test)
    sub = data.test.subset(idx)
    both = (sub.click == 1) & (sub.conversion == 1)
    pred = predict(model, sub)
    for name, values in (("pcvr", pred.p_cvr[both]), ("pctcvr", pred.p_ctcvr[both])):
        path = out / f"hist_{name}_{tag}.csv"
        atomic_write_text(path, export_histograms(values).to_csv())
        manifest.output(path)
    click.echo(f"cvr_auc={report.cvr_auc:.4f} ctcvr_auc={report.ctcvr_auc:.4f}"
               + (f" oracle_cvr_auc_d={report.oracle_cvr_auc_d:.4f}" if report.oracle_cvr_auc_d is not None else ""))
    manifest.write(out, f"_{tag}")


@cli.command()
@common_options
@click.option("--kind", type=click.Choice(["threshold", "alpha", "ablation"]), default=None, help="Which sweep.")
def sweep(config_path, seed, out_dir, kind):
    """Threshold, alpha_cf or posterior-ablation sweep over the configured seeds."""
    cfg = _config(config_path, seed, out_dir, {("sweep", "kind"): kind})
    manifest = RunManifest("sweep", cfg)
    data = _load_experiment(cfg, manifest)
    settings = cfg.settings()
    seeds = list(cfg.seeds)
    kind = cfg.sweep.kind
    if kind == "threshold":
        result = experiment_threshold_sweep(data, seeds, settings, tuple(cfg.sweep.threshold_grid))
    elif kind == "alpha":
        result = alpha_sweep(data, seeds, settings, tuple(cfg.sweep.alpha_grid))
    else:
        result = ablation_sweep_result(posterior_ablation(data, seeds, settings), seeds)
    path = _out_dir(cfg) / f"sweep_{kind}.json"
    result.write(path)
    manifest.output(path)
    for row in result.grid:
        click.echo(f"{row.name}: cvr_auc={row.mean_cvr_auc:.4f}+-{row.std_cvr_auc:.4f} "
                   f"ctcvr_auc={row.mean_ctcvr_auc:.4f}+-{row.std_ctcvr_auc:.4f}")
    manifest.write(_out_dir(cfg), f"_{kind}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="escim", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except EscimError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except jsonschema.ValidationError as exc:
        click.echo(f"error: metric report failed schema validation: {exc.message}", err=True)
        return 1
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


def run():
    sys.exit(main())
