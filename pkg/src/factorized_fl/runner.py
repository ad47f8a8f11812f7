"""Config-driven experiment orchestration and artifact writing.

Outputs of ``run_experiment`` (all deterministic given config and seed):

- ``config.yaml``: the normalized config echo
- ``metrics.csv``: one row per round, mean and per-client metrics, cost
- ``ledger.json``: communication ledger, one entry per charge
- ``similarity/round_NNN.json`` and ``similarity/frequency.json`` for
  factorized strategies
- ``final_models.bin`` (``save_models: true``): ``numpy.savez`` archive

Wall-clock timings go to ``timing.csv`` so that ``metrics.csv`` stays
byte-identical across re-runs.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import SCENARIOS, default_share_classifier, dump_config, normalize, strategy_config, train_config
from .engine import Federation, RoundReport, formula_cost, transmitted_params, STRATEGIES
from .errors import ConfigError
from .factorized import build_net
from .nn import infer_shapes
from .probes import PAIRINGS, divergence_probe, heatmap_series, matching_frequency, probe_pairings, \
    uv_divergence_probe, NORMALIZATION

log = logging.getLogger(__name__)

METRIC_KEYS = ("val_acc", "val_loss", "test_acc", "test_loss")


def _num(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- building

def build_dataset(cfg: dict) -> data_mod.Dataset:
    params = {k: v for k, v in cfg["dataset"].items() if k != "kind"}
    return data_mod.make_desk_dataset(cfg["dataset"]["kind"], params, cfg["global_seed"])


def build_partitions(cfg: dict, d: data_mod.Dataset) -> list:
    seed = cfg["global_seed"]
    scenario = cfg["scenario"]
    K = cfg["clients"]
    if scenario == "domain_hetero":
        n_dom = cfg["domains"]["count"]
        per = d.num_classes // n_dom
        specs = [data_mod.DomainSpec(f"domain{i}", tuple(range(i * per, (i + 1) * per)),
                                     cfg["domains"]["clients_per_domain"]) for i in range(n_dom)]
        return data_mod.split_domains(d, specs, seed=[seed, 4], global_seed=seed,
                                      fractions=tuple(cfg["split"]))
    train, val, test = data_mod.train_val_test_split(len(d), tuple(cfg["split"]), seed=[seed, 2])
    if scenario.endswith("noniid"):
        parts = data_mod.split_dirichlet(d, K, cfg["dirichlet_alpha"], seed=[seed, 3], indices=train)
    else:
        parts = data_mod.split_iid(d, K, seed=[seed, 3], indices=train)
    parts = [p.with_splits(val, test) for p in parts]
    if scenario.startswith("permuted"):
        parts = [data_mod.permute_labels(p, seed) for p in parts]
    return parts


def build_net_for(cfg: dict, d: data_mod.Dataset | None = None) -> list:
    kwargs = {k: v for k, v in cfg["net"].items() if k != "name"}
    name = cfg["net"]["name"]
    if d is not None:
        classes = d.num_classes
        if cfg["scenario"] == "domain_hetero":
            classes //= cfg["domains"]["count"]
        kwargs.setdefault("num_classes", classes)
        kwargs.setdefault("in_channels", d.input_shape[-1])
        if name != "resnet9":
            if d.input_shape[0] != d.input_shape[1]:
                raise ConfigError("dataset: desk nets need square inputs")
            kwargs.setdefault("input_hw", d.input_shape[0])
    net = build_net(name, **kwargs)
    if d is not None:
        infer_shapes(net, d.input_shape)
    return net


# ---------------------------------------------------------------- single run

@dataclass
class RunResult:
    config: dict
    reports: list
    partitions: list
    federation: Federation
    out_dir: Path | None
    files: list = field(default_factory=list)

    @property
    def domains(self) -> list:
        return [p.domain for p in self.partitions]

    def final(self, key: str = "test_acc") -> float:
        return self.reports[-1].mean(key)

    def best_val_test(self) -> float:
        """Mean test accuracy at the round with the best mean validation accuracy."""
        vals = [r.mean("val_acc") for r in self.reports]
        return self.reports[int(np.argmax(vals))].mean("test_acc")


def metrics_rows(reports: list[RoundReport], client_ids: list[int]):
    header = ["round", "participants", "mean_val_acc", "mean_val_loss", "mean_test_acc", "mean_test_loss",
              "s2c_params", "c2s_params", "round_bytes", "cumulative_bytes", "nonzero_mu"]
    header += [f"client{k}_{m}" for k in client_ids for m in METRIC_KEYS]
    rows = []
    for r in reports:
        row = [r.round, len(r.participants)] + [_num(r.mean(m)) for m in METRIC_KEYS]
        row += [r.s2c_params, r.c2s_params, r.round_bytes, r.cumulative_bytes,
                "" if r.nonzero_mu is None else r.nonzero_mu]
        row += [_num(r.metrics[k][m]) for k in client_ids for m in METRIC_KEYS]
        rows.append(row)
    return header, rows


def _write_similarity(out: Path, result: RunResult) -> list[Path]:
    sim = out / "similarity"
    sim.mkdir(exist_ok=True)
    series = heatmap_series(result.reports)
    files = []
    for r, U, V, rep in zip(series.rounds, series.u_cos, series.v_cos, result.reports):
        path = sim / f"round_{r:03d}.json"
        _write_json(path, {"round": r, "tau": series.tau, "u_cos": U.tolist(), "v_cos": V.tolist(),
                           "sigma": None if rep.sigma is None else rep.sigma.tolist()})
        files.append(path)
    summary = matching_frequency(series, result.domains)
    path = sim / "frequency.json"
    _write_json(path, {"tau": series.tau, "frequency": summary.frequency.tolist(), "domains": result.domains,
                       "within_domain_fraction": summary.within_fraction, "vacuous": summary.vacuous})
    files.append(path)
    return files


def _save_models(path: Path, fed: Federation) -> None:
    arrays = {}
    for c in fed.clients:
        for j, ((block, name), leaf) in enumerate(zip(c.model.leaf_tags(), c.model.leaves())):
            arrays[f"client{c.client_id}/layer{block}/{name}"] = leaf
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def run_experiment(cfg: dict, out_dir=None, threads: int = 1) -> RunResult:
    """Run one normalized config for ``cfg['rounds']`` rounds and write artifacts.

    ``out_dir=None`` skips writing (library use).
    """
    cfg, errors = normalize(cfg)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    d = build_dataset(cfg)
    net = build_net_for(cfg, d)
    parts = build_partitions(cfg, d)
    scfg = strategy_config(cfg)
    fed = Federation(net, d, parts, scfg, train_config(cfg), cfg["global_seed"], v_init=cfg["v_init"],
                     threads=threads)
    timings = []
    for _ in range(cfg["rounds"]):
        t0 = time.perf_counter()
        report = fed.run_round()
        timings.append((report.round, time.perf_counter() - t0))
        log.info("round %d mean test acc %.4f", report.round, report.mean("test_acc"))
    result = RunResult(cfg, fed.reports, parts, fed, None)
    if out_dir is None:
        return result
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.out_dir = out
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    header, rows = metrics_rows(fed.reports, [c.client_id for c in fed.clients])
    _write_csv(out / "metrics.csv", header, rows)
    _write_csv(out / "timing.csv", ["round", "seconds"], [[r, f"{s:.6f}"] for r, s in timings])
    ledger = fed.server.ledger.to_dict()
    s2c, c2s = transmitted_params(net, scfg)
    ledger.update({"strategy": scfg.strategy, "clients": cfg["clients"], "rounds": cfg["rounds"],
                   "per_client_round_params": {"s2c": s2c, "c2s": c2s},
                   "formula_bytes": formula_cost(net, scfg, cfg["clients"], cfg["rounds"])})
    _write_json(out / "ledger.json", ledger)
    result.files = [out / n for n in ("config.yaml", "metrics.csv", "timing.csv", "ledger.json")]
    if scfg.factorized:
        result.files += _write_similarity(out, result)
    if cfg["save_models"]:
        _save_models(out / "final_models.bin", fed)
        result.files.append(out / "final_models.bin")
    return result


# ---------------------------------------------------------------- suite

SUMMARY_HEADER = ["scenario", "strategy", "trials", "final_test_acc_mean", "final_test_acc_std",
                  "best_val_test_acc_mean", "best_val_test_acc_std", "total_bytes", "status", "error"]


def suite_cells(suite: dict) -> tuple[list[dict], list[str]]:
    """Expand ``{base, grid: {scenario: [...], strategy: [...]}, trials}`` into cell configs."""
    errors = []
    if not isinstance(suite, dict):
        return [], ["<root>: suite must be a mapping"]
    base = suite.get("base", {})
    grid = suite.get("grid", {})
    if not isinstance(base, dict):
        errors.append("base: must be a mapping")
    if not isinstance(grid, dict) or not grid.get("scenario") or not grid.get("strategy"):
        errors.append("grid: needs non-empty scenario and strategy lists")
    if errors:
        return [], errors
    cells = []
    for scenario in grid["scenario"]:
        for strategy in grid["strategy"]:
            strat = {"name": strategy} if isinstance(strategy, str) else dict(strategy)
            extra = base.get("strategy", {})
            if isinstance(extra, dict):
                strat = {**{k: v for k, v in extra.items() if k != "name"}, **strat}
            cell = {**base, "scenario": scenario, "strategy": strat}
            if "trials" in suite:
                cell["trials"] = suite["trials"]
            cells.append(cell)
    return cells, errors


def run_suite(suite: dict, out_dir, threads: int = 1, seed: int | None = None) -> tuple[Path, int]:
    """Run every cell for ``trials`` seeds (``global_seed + t``) and write
    ``summary.csv`` (population std over trials). Returns ``(path, failures)``."""
    cells, errors = suite_cells(suite)
    if errors:
        raise ConfigError("invalid suite:\n  " + "\n  ".join(errors))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    failures = 0
    for cell in cells:
        if seed is not None:
            cell["global_seed"] = seed
        cfg, errs = normalize(cell)
        scenario = cell.get("scenario")
        name = cell["strategy"].get("name")
        if errs:
            failures += 1
            rows.append([scenario, name, 0, "", "", "", "", "", "failed", "; ".join(errs)])
            continue
        finals, bests, cost = [], [], 0
        try:
            for t in range(cfg["trials"]):
                trial = {**cfg, "global_seed": cfg["global_seed"] + t}
                res = run_experiment(trial, out / f"{scenario}__{name}" / f"trial_{t}", threads)
                finals.append(res.final())
                bests.append(res.best_val_test())
                cost = res.reports[-1].cumulative_bytes
        except Exception as exc:  # a failed cell is recorded and the suite moves on
            failures += 1
            rows.append([scenario, name, len(finals), "", "", "", "", "", "failed", str(exc)])
            continue
        rows.append([scenario, name, len(finals), _num(np.mean(finals)), _num(np.std(finals)),
                     _num(np.mean(bests)), _num(np.std(bests)), cost, "ok", ""])
    path = out / "summary.csv"
    _write_csv(path, SUMMARY_HEADER, rows)
    return path, failures


# ---------------------------------------------------------------- probes

PROBE_DEFAULTS = {
    "pairings": list(PAIRINGS),
    "epochs": 10,
    "examples": 600,
    "classes": 10,
    "noise": 0.75,
    "depth": 3,
    "side": 8,
    "lr": 0.01,
    "momentum": 0.0,
    "weight_decay": 0.0,
    "batch_size": 32,
}


def probe_settings(cfg: dict) -> tuple[dict, list[str]]:
    errors = []
    probe = {**PROBE_DEFAULTS, **(cfg.get("probe") or {})}
    for key in sorted(set(probe) - set(PROBE_DEFAULTS)):
        errors.append(f"probe.{key}: unknown field")
    bad = [p for p in probe["pairings"] if p not in PAIRINGS]
    if bad:
        errors.append(f"probe.pairings: unknown {bad}; choose from {list(PAIRINGS)}")
    for key in ("epochs", "examples", "classes", "depth", "side", "batch_size"):
        if not isinstance(probe[key], int) or probe[key] < 1:
            errors.append(f"probe.{key}: must be an integer >= 1")
    if not isinstance(probe["lr"], (int, float)) or probe["lr"] <= 0:
        errors.append("probe.lr: must be positive")
    return probe, errors


def _probe_inputs(cfg: dict, seed: int):
    probe, errors = probe_settings(cfg)
    if errors:
        raise ConfigError("invalid probe config:\n  " + "\n  ".join(errors))
    net_cfg = cfg.get("net") or {"name": "desk_shallow", "width": 8}
    kwargs = {k: v for k, v in net_cfg.items() if k != "name"}
    kwargs.setdefault("num_classes", probe["classes"])
    kwargs.setdefault("in_channels", probe["depth"])
    kwargs.setdefault("input_hw", probe["side"])
    net = build_net(net_cfg.get("name", "desk_shallow"), **kwargs)
    infer_shapes(net, (probe["side"], probe["side"], probe["depth"]))
    pairs = probe_pairings(seed, probe["classes"], probe["examples"], probe["noise"], probe["depth"],
                           probe["side"])
    train_kwargs = {k: probe[k] for k in ("lr", "momentum", "weight_decay", "batch_size")}
    return probe, net, pairs, train_kwargs


def run_divergence_probe(cfg: dict, seed: int, out_dir=None) -> dict:
    """Plain-model divergence of each pairing against the reference set."""
    probe, net, pairs, kw = _probe_inputs(cfg, seed)
    traces = {p: divergence_probe(net, pairs["a"], pairs[p], probe["epochs"], seed, labels=("a", p), **kw)
              for p in probe["pairings"]}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = list(traces)
        rows = [[e] + [_num(traces[p].distances[i]) for p in names]
                for i, e in enumerate(range(1, probe["epochs"] + 1))]
        _write_csv(out / "divergence.csv", ["epoch"] + names, rows)
        _write_json(out / "divergence.json", {"seed": seed, "normalization": NORMALIZATION, "probe": probe,
                                              "traces": {p: t.distances for p, t in traces.items()}})
    return traces


def run_uv_probe(cfg: dict, seed: int, out_dir=None) -> dict:
    """Factorized-model ``u`` and ``v`` divergence per pairing."""
    probe, net, pairs, kw = _probe_inputs(cfg, seed)
    names = [p for p in probe["pairings"] if p != "same"] or list(probe["pairings"])
    traces = {p: uv_divergence_probe(net, pairs["a"], pairs[p], probe["epochs"], seed, labels=("a", p), **kw)
              for p in names}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = [[e, p, _num(tu.distances[i]), _num(tv.distances[i])]
                for p, (tu, tv) in traces.items() for i, e in enumerate(tu.epochs)]
        _write_csv(out / "uv_divergence.csv", ["epoch", "pairing", "trace_u", "trace_v"], rows)
        _write_json(out / "uv_divergence.json", {
            "seed": seed, "normalization": NORMALIZATION, "probe": probe,
            "traces": {p: {"u": tu.distances, "v": tv.distances} for p, (tu, tv) in traces.items()}})
    return traces


# ---------------------------------------------------------------- cost

def cost_table(cfg: dict) -> list[dict]:
    """Formula cost of every strategy on the config's net, K and R."""
    cfg, errors = normalize(cfg)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    # resnet9 is accounting-only; desk nets take their shapes from the data
    net = build_net_for(cfg, None if cfg["net"]["name"] == "resnet9" else build_dataset(cfg))
    rows = []
    for name in STRATEGIES:
        strat = {**cfg["strategy"], "name": name}
        if name != cfg["strategy"]["name"]:
            strat["share_classifier"] = default_share_classifier(cfg["scenario"], name)
        scfg = strategy_config({**cfg, "strategy": strat})
        s2c, c2s = transmitted_params(net, scfg)
        total = formula_cost(net, scfg, cfg["clients"], cfg["rounds"])
        rows.append({"strategy": name, "s2c_params": s2c, "c2s_params": c2s, "bytes": total,
                     "gigabytes": total / 1e9, "configured": name == cfg["strategy"]["name"]})
    ref = next(r["bytes"] for r in rows if r["strategy"] == "fedavg")
    for r in rows:
        r["ratio_to_fedavg"] = r["bytes"] / ref if ref else float("nan")
    return rows


__all__ = ["SCENARIOS", "RunResult", "build_dataset", "build_partitions", "build_net_for", "run_experiment",
           "run_suite", "suite_cells", "run_divergence_probe", "run_uv_probe", "cost_table", "metrics_rows"]
