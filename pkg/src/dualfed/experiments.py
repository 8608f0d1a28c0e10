"""Experiment drivers: single runs, grids over seeds/targets, and the sweeps.

Every driver writes into a caller-chosen directory and returns the same
numbers it writes. Files carry no timestamps, so identical (config, seed)
inputs give byte-identical outputs.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .config import ABLATION_ROWS, HARD_DOMAIN_ROWS, TrainConfig, validate_config
from .datagen import ClientData, DomainDataset, from_csv, leave_one_out, make_domains, partition_clients
from .errors import DualFedError
from .federation import (ClientState, CommCostModel, LocalTrainConfig, RunArtifacts, ServerState,
                         SGD, audit_transcript, comm_cost_report, logits_share_sweep, read_transcript,
                         run_rounds, server_init, write_transcript)
from .losses import LossConfig, cross_entropy
from .model import (AdapterParams, BackboneParams, DualAdapterModel, FusionStrategy, backbone_forward,
                    build_model, head_forward, init_projection)
from .tensor import Tensor

METRIC_FIELDS = ["round", "target_acc", "target_acc_client_mean", "target_acc_ensemble", "acc_di",
                 "acc_dw", "ce", "kl_di", "kl_dw", "alpha", "lr", "comm_bytes"]
BRANCHES = ("backbone", "A_di-only", "A_dw-only", "fused")
REFERENCE_TRANSFER_PCT = {("Art Painting", "Sketch"): 97.07, ("Sketch", "Sketch"): 94.94}


class FileError(DualFedError, OSError):
    kind = "file_error"


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


# ---------------------------------------------------------------- setup


def load_domains(cfg: TrainConfig, seed: int, extra: int = 0) -> list[DomainDataset]:
    ds = cfg.dataset
    if ds.csv:
        return from_csv(ds.csv)
    return make_domains(ds.n_domains + extra, ds.n_classes, ds.n_per_class, ds.d_in, ds.shift_strength,
                        seed=ds.seed if ds.seed is not None else seed, noise=ds.noise,
                        generator=ds.generator)


def warm_start(backbone: BackboneParams, cfg: TrainConfig, seed: int) -> None:
    """Supervised pretraining of the encoder on an extra held-out domain, then freeze."""
    if cfg.dataset.csv:
        raise DualFedError("warm start needs generated data, not an imported CSV")
    pre = load_domains(cfg, seed, extra=1)[-1]
    params = backbone.tensors()
    for p in params:
        p.requires_grad = True
    opt = SGD(params, momentum=0.9)
    rng = _rng(seed, 23)
    for _ in range(cfg.model.warm_start_epochs):
        order = rng.permutation(pre.n_train)
        for s in range(0, pre.n_train, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss = cross_entropy(head_forward(backbone, backbone_forward(backbone, pre.x_train[idx])),
                                 pre.y_train[idx])
            opt.zero_grad()
            T.backward(loss)
            opt.step(0.05)
    for p in params:
        p.requires_grad = False
        p.grad = None


def make_backbone(cfg: TrainConfig, seed: int, d_in: int, n_classes: int) -> BackboneParams:
    m = cfg.model
    bb = BackboneParams.init(d_in, m.d_h, n_classes, m.d_layers, _rng(seed, 11))
    if m.warm_start_epochs:
        warm_start(bb, cfg, seed)
    return bb


def build_clients(cfg: TrainConfig, seed: int, client_data: Sequence[ClientData],
                  backbone: BackboneParams) -> tuple[ServerState, list[ClientState]]:
    m, t = cfg.model, cfg.toggles
    layers = m.layer_indices()
    strategy = FusionStrategy(cfg.fusion.variant, cfg.fusion.lam)
    a_di0 = ({ly: AdapterParams.init(m.d_h, m.rank, _rng(seed, 13, ly)) for ly in layers}
             if t.a_di else None)
    server = server_init(len(client_data), a_di0, layers)
    clients = []
    for cd in client_data:
        model = build_model(backbone, _rng(seed, 17, cd.client_id), rank=m.rank, heads=m.heads,
                            kia_layers=layers, use_di=False, use_dw=t.a_dw, use_mhsa=t.mhsa,
                            strategy=strategy, nonlinearity=m.nonlinearity)
        if strategy.variant == "concat-project" and model.projection is None and (t.a_di or t.a_dw):
            model.projection = {ly: init_projection(m.d_h) for ly in layers}
        clients.append(ClientState(cd.client_id, cd, model, _rng(seed, 19, cd.client_id),
                                   momentum=cfg.optim.momentum))
    return server, clients


def loss_config(cfg: TrainConfig) -> LossConfig:
    ls = cfg.loss
    return LossConfig(ls.alpha_mode, ls.alpha, ls.alpha_max, ls.tau, ls.temperature, ls.ce_target,
                      bkd=cfg.toggles.bkd)


def local_config(cfg: TrainConfig) -> LocalTrainConfig:
    o = cfg.optim
    return LocalTrainConfig(cfg.local_epochs, cfg.batch_size, o.lr, o.momentum, o.schedule,
                            o.step_fraction, o.gamma, loss_config(cfg))


def bare(model: DualAdapterModel) -> DualAdapterModel:
    return replace(model, a_di=None, a_dw=None, fusion=None, projection=None)


def _acc(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(logits.argmax(axis=1) == y))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class Evaluator:
    """Target-domain accuracies of every client's model with the current global adapter."""

    def __init__(self, template: DualAdapterModel, x: np.ndarray, y: np.ndarray,
                 eval_mode: str = "client-mean"):
        self.trunk = Tensor(template.trunk(x).data)
        self.y = np.asarray(y)
        self.eval_mode = eval_mode
        self.backbone_acc = _acc(bare(template).forward_from_trunk(self.trunk)[1].data, self.y)

    def views(self, server: ServerState, clients: Sequence[ClientState]) -> list[DualAdapterModel]:
        return [replace(c.model, a_di=server.a_di_global) for c in clients]

    def __call__(self, rnd: int, server: ServerState, clients: Sequence[ClientState]) -> dict:
        views = self.views(server, clients)
        fused = [v.forward_from_trunk(self.trunk)[1].data for v in views]
        client_mean = float(np.mean([_acc(z, self.y) for z in fused]))
        ensemble = _acc(np.mean([_softmax(z) for z in fused], axis=0), self.y)
        di = _acc(views[0].forward_from_trunk(self.trunk, use_dw=False)[1].data, self.y)
        dw = float(np.mean([_acc(v.forward_from_trunk(self.trunk, use_di=False)[1].data, self.y)
                            for v in views]))
        return {"target_acc": client_mean if self.eval_mode == "client-mean" else ensemble,
                "target_acc_client_mean": client_mean, "target_acc_ensemble": ensemble,
                "acc_di": di, "acc_dw": dw}


@dataclass
class RunSetup:
    cfg: TrainConfig
    seed: int
    target: int
    domains: list[DomainDataset]
    target_data: DomainDataset
    backbone: BackboneParams
    server: ServerState
    clients: list[ClientState]
    evaluator: Evaluator


def prepare_run(cfg: TrainConfig, seed: int, target: int) -> RunSetup:
    domains = load_domains(cfg, seed)
    sources, tgt = leave_one_out(domains, target)
    cds = partition_clients(sources, cfg.n_clients(), seed, cfg.partition)
    backbone = make_backbone(cfg, seed, domains[0].d_in, cfg.dataset.n_classes)
    server, clients = build_clients(cfg, seed, cds, backbone)
    ev = Evaluator(clients[0].model, tgt.x_test, tgt.y_test, cfg.eval_mode)
    return RunSetup(cfg, seed, target, domains, tgt, backbone, server, clients, ev)


@dataclass
class RunResult:
    setup: RunSetup
    artifacts: RunArtifacts
    summary: dict

    @property
    def metrics(self) -> list[dict]:
        return self.artifacts.metrics


def run_single(cfg: TrainConfig, seed: int, target: int, keep_history: bool = False) -> RunResult:
    """One leave-one-domain-out federated run."""
    st = prepare_run(cfg, seed, target)
    art = run_rounds(st.server, st.clients, cfg.rounds, local_config(cfg), st.evaluator,
                     participation=cfg.participation, seed=seed, client_workers=cfg.client_workers,
                     keep_history=keep_history)
    audit = audit_transcript(art.transcript, st.server.layers, cfg.model.d_h, cfg.model.rank,
                             art.private_fingerprints)
    last = art.metrics[-1]
    n_src = sum(d.n_train for i, d in enumerate(st.domains) if i != target)
    summary = {
        "seed": seed, "target": target,
        "final_target_acc": last["target_acc"],
        "final_acc_di": last["acc_di"], "final_acc_dw": last["acc_dw"],
        "final_target_acc_ensemble": last["target_acc_ensemble"],
        "round0_target_acc": art.metrics[0]["target_acc"],
        "backbone_acc": st.evaluator.backbone_acc,
        "n_clients": len(st.clients),
        "n_k": {str(c.client_id): c.n_k for c in st.clients},
        "total_n_k": sum(c.n_k for c in st.clients),
        "n_source_samples": n_src,
        "transcript_bytes": sum(m.byte_length for m in art.transcript),
        "audit_passed": audit.passed,
    }
    return RunResult(st, art, summary)


# ---------------------------------------------------------------- persistence


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_csv(path, rows: Sequence[dict], fields: Sequence[str] | None = None) -> None:
    fields = list(fields) if fields is not None else (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(f, "")) for f in fields])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_params(result: RunResult, path) -> None:
    arrays = {}
    g = result.artifacts.global_adapter
    if g is not None:
        for ly, a in sorted(g.items()):
            for i, p in enumerate(a.parameters()):
                arrays[f"global/{ly}/{i}"] = p.data
    for c in result.setup.clients:
        for j, p in enumerate(c.model.private_parameters()):
            arrays[f"client{c.client_id}/{j}"] = p.data
    np.savez(path, **arrays)


def write_run(result: RunResult, run_dir) -> Path:
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_csv(d / "metrics.csv", result.metrics, METRIC_FIELDS)
    write_transcript(result.artifacts.transcript, d / "transcript.bin", d / "transcript.txt")
    save_params(result, d / "model.npz")
    write_json(d / "run.json", {"summary": result.summary, "config": result.setup.cfg.model_dump(),
                                "seed": result.setup.seed, "target": result.setup.target})
    return d


def load_run(run_dir) -> tuple[RunSetup, dict]:
    """Rebuild a finished run's models from its directory."""
    d = Path(run_dir)
    if not (d / "run.json").exists() or not (d / "model.npz").exists():
        raise FileError(f"{d} is not a run directory (missing run.json or model.npz)")
    meta = json.loads((d / "run.json").read_text())
    cfg = validate_config(meta["config"])
    st = prepare_run(cfg, meta["seed"], meta["target"])
    with np.load(d / "model.npz") as npz:
        if st.server.a_di_global is not None:
            glob = {}
            for ly in st.server.layers:
                parts = [Tensor(npz[f"global/{ly}/{i}"]) for i in range(4)]
                glob[ly] = AdapterParams(*parts)
            st.server.a_di_global = glob
        for c in st.clients:
            for j, p in enumerate(c.model.private_parameters()):
                p.data = np.array(npz[f"client{c.client_id}/{j}"])
    return st, meta


# ---------------------------------------------------------------- grids


def _cell_dir(out, seed, target):
    return None if out is None else Path(out) / f"seed_{seed}" / f"target_{target}"


def _run_job(args) -> dict:
    cfg, seed, target, out = args
    res = run_single(cfg, seed, target)
    if out is not None:
        write_run(res, out)
    return res.summary


def run_grid(cfg: TrainConfig, out=None, workers: int = 1) -> list[dict]:
    """Run every (seed, target) cell; returns per-run summaries in grid order."""
    jobs = [(cfg, s, t, _cell_dir(out, s, t)) for s in cfg.seeds for t in cfg.targets()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def summarize(runs: Sequence[dict], key: str = "final_target_acc") -> dict:
    """Mean over targets per seed, then mean and std over seeds."""
    per_seed: dict[int, list[float]] = {}
    per_target: dict[int, list[float]] = {}
    for r in runs:
        per_seed.setdefault(r["seed"], []).append(r[key])
        per_target.setdefault(r["target"], []).append(r[key])
    seed_means = {s: float(np.mean(v)) for s, v in sorted(per_seed.items())}
    vals = list(seed_means.values())
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
            "per_seed": {str(s): v for s, v in seed_means.items()},
            "per_target": {str(t): float(np.mean(v)) for t, v in sorted(per_target.items())},
            "n_runs": len(runs)}


def _out(out, *parts):
    if out is None:
        return None
    p = Path(out).joinpath(*parts)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- commands


def cmd_train(cfg: TrainConfig, out=None, workers: int = 1) -> dict:
    runs = run_grid(cfg, _out(out), workers)
    summary = {"runs": runs, "target_acc": summarize(runs),
               "backbone_acc": summarize(runs, "backbone_acc"),
               "toggles": cfg.toggles.model_dump()}
    if out is not None:
        write_json(Path(out) / "summary.json", summary)
    return summary


def _toggle_cfg(cfg: TrainConfig, row) -> TrainConfig:
    bkd, mhsa, a_di, a_dw = row
    return cfg.updated(**{"toggles.bkd": bkd, "toggles.mhsa": mhsa, "toggles.a_di": a_di,
                          "toggles.a_dw": a_dw})


def _row_fields(n_targets):
    return (["table", "row", "bkd", "mhsa", "a_di", "a_dw", "effective", "mean", "std"]
            + [f"target_{t}" for t in range(n_targets)])


def cmd_ablate(cfg: TrainConfig, out=None, hard_domains: bool = False, workers: int = 1) -> dict:
    """Component ablation over the standard toggle grid, optionally the hard-domain grid too."""
    cache: dict[tuple, list[dict]] = {}

    def runs_for(row):
        if row not in cache:
            label = "".join("1" if b else "0" for b in row)
            cache[row] = run_grid(_toggle_cfg(cfg, row), _out(out, f"row_{label}"), workers)
        return cache[row]

    tables = {"ablation": list(ABLATION_ROWS)}
    if hard_domains:
        tables["hard_domains"] = list(HARD_DOMAIN_ROWS)
    result: dict = {}
    all_rows = []
    for name, rows in tables.items():
        table_rows = []
        for i, row in enumerate(rows, start=1):
            effective = row
            if row[1] and not row[3]:
                effective = (row[0], False, row[2], row[3])
            s = summarize(runs_for(effective))
            rec = {"table": name, "row": i, "bkd": row[0], "mhsa": row[1], "a_di": row[2], "a_dw": row[3],
                   "effective": "".join("1" if b else "0" for b in effective),
                   "mean": s["mean"], "std": s["std"]}
            for t, v in s["per_target"].items():
                rec[f"target_{t}"] = v
            table_rows.append(rec)
        if name == "hard_domains":
            full = table_rows[0]
            per_t = {k: v for k, v in full.items() if k.startswith("target_")}
            hardest = min(per_t, key=per_t.get)
            for rec in table_rows:
                rec["hardest_target"] = hardest
                rec["hardest_target_acc"] = rec[hardest]
        result[name] = table_rows
        all_rows += table_rows
    if out is not None:
        fields = _row_fields(cfg.dataset.n_domains)
        write_csv(Path(out) / "ablation.csv", result["ablation"], fields)
        if hard_domains:
            write_csv(Path(out) / "ablation_hard.csv", result["hard_domains"],
                      fields + ["hardest_target", "hardest_target_acc"])
        write_json(Path(out) / "ablation.json", result)
    return result


def cmd_sweep_alpha(cfg: TrainConfig, alphas: Iterable[float], out=None, workers: int = 1) -> list[dict]:
    rows = []
    for a in alphas:
        c = cfg.updated(**{"loss.alpha_mode": "fixed", "loss.alpha": float(a), "toggles.bkd": True})
        s = summarize(run_grid(c, _out(out, f"alpha_{a}"), workers))
        rows.append({"alpha": float(a), "mean": s["mean"], "std": s["std"],
                     **{f"target_{t}": v for t, v in s["per_target"].items()}})
    if out is not None:
        write_csv(Path(out) / "sweep_alpha.csv", rows,
                  ["alpha", "mean", "std"] + [f"target_{t}" for t in range(cfg.dataset.n_domains)])
    return rows


def cmd_sweep_alpha_dynamic(cfg: TrainConfig, alpha_maxes: Iterable[float], taus: Iterable[float],
                            out=None, workers: int = 1) -> list[dict]:
    """Dynamic distillation weight grid with MHSA switched off."""
    alpha_maxes, taus = list(alpha_maxes), list(taus)
    if not alpha_maxes or not taus:
        raise DualFedError("sweep-alpha-dynamic needs nonempty alpha_max and tau grids")
    base = _toggle_cfg(cfg, (True, False, True, True))
    rows = []
    for am in alpha_maxes:
        for tau in taus:
            c = base.updated(**{"loss.alpha_mode": "dynamic", "loss.alpha_max": float(am),
                                "loss.tau": float(tau)})
            s = summarize(run_grid(c, _out(out, f"amax_{am}_tau_{tau}"), workers))
            rows.append({"alpha_max": float(am), "tau": float(tau), "mean": s["mean"], "std": s["std"]})
    if out is not None:
        write_csv(Path(out) / "sweep_alpha_dynamic.csv", rows, ["alpha_max", "tau", "mean", "std"])
    return rows


def cmd_sweep_clients(cfg: TrainConfig, ks: Iterable[int], out=None, workers: int = 1) -> list[dict]:
    rows = []
    for k in ks:
        runs = run_grid(cfg.updated(clients=int(k)), _out(out, f"K_{k}"), workers)
        for t in cfg.targets():
            sel = [r for r in runs if r["target"] == t]
            accs = [r["final_target_acc"] for r in sel]
            rows.append({"K": int(k), "target": t, "mean": float(np.mean(accs)), "std": float(np.std(accs)),
                         "total_n_k": sel[0]["total_n_k"], "n_source_samples": sel[0]["n_source_samples"],
                         "n_clients": sel[0]["n_clients"]})
    if out is not None:
        write_csv(Path(out) / "sweep_clients.csv", rows,
                  ["K", "target", "mean", "std", "total_n_k", "n_source_samples", "n_clients"])
    return rows


def cmd_fusion_sweep(cfg: TrainConfig, lambdas: Iterable[float], concat: bool = True, out=None,
                     workers: int = 1) -> list[dict]:
    cells = [("weighted-sum", float(lam)) for lam in lambdas]
    if concat:
        cells.append(("concat-project", 1.0))
    rows = []
    for variant, lam in cells:
        c = cfg.updated(**{"fusion.variant": variant, "fusion.lam": lam})
        name = f"weight_{lam}" if variant == "weighted-sum" else "concat"
        s = summarize(run_grid(c, _out(out, name), workers))
        label = name
        if variant == "weighted-sum" and lam == 1.0:
            label = "weight_1.0 (default equal weighting)"
        rows.append({"strategy": variant, "lam": lam, "label": label, "mean": s["mean"], "std": s["std"],
                     **{f"target_{t}": v for t, v in s["per_target"].items()}})
    if out is not None:
        write_csv(Path(out) / "fusion_sweep.csv", rows,
                  ["strategy", "lam", "label", "mean", "std"]
                  + [f"target_{t}" for t in range(cfg.dataset.n_domains)])
    return rows


def cmd_motivation(cfg: TrainConfig, out=None) -> dict:
    """Single-source adapters evaluated on every domain's test split.

    Cell (s, t) trains one invariant adapter on domain ``s`` alone (one
    client, no distillation) and scores it on the test split of ``t``; the
    diagonal is the in-domain baseline.
    """
    c = _toggle_cfg(cfg, (False, False, True, False))
    n = c.dataset.n_domains
    acc = np.zeros((len(c.seeds), n, n))
    for si, seed in enumerate(c.seeds):
        domains = load_domains(c, seed)
        backbone = make_backbone(c, seed, domains[0].d_in, c.dataset.n_classes)
        for s, dom in enumerate(domains):
            cd = [ClientData(0, dom.domain_id, dom.x_train, dom.y_train)]
            server, clients = build_clients(c, seed, cd, backbone)
            ev = Evaluator(clients[0].model, dom.x_test, dom.y_test, c.eval_mode)
            run_rounds(server, clients, c.rounds, local_config(c), None, seed=seed)
            for t, tgt in enumerate(domains):
                view = replace(clients[0].model, a_di=server.a_di_global)
                z = view.forward_from_trunk(Tensor(view.trunk(tgt.x_test).data))[1].data
                acc[si, s, t] = _acc(z, tgt.y_test)
            del ev
    matrix = acc.mean(axis=0)
    cells = [{"source": s, "target": t, "accuracy": float(matrix[s, t]), "diagonal": s == t}
             for s in range(n) for t in range(n)]
    beats = [{"target": t, "diagonal": float(matrix[t, t]),
              "best_off_diagonal": float(max(matrix[s, t] for s in range(n) if s != t)),
              "off_diagonal_wins": int(sum(matrix[s, t] > matrix[t, t] for s in range(n) if s != t))}
             for t in range(n)]
    report = {"matrix": matrix.tolist(), "cells": cells, "columns": beats,
              "spread": float(matrix.max() - matrix.min()),
              "reference_pct": {f"{a}->{b}": v for (a, b), v in REFERENCE_TRANSFER_PCT.items()}}
    if out is not None:
        o = _out(out)
        write_csv(o / "motivation.csv", cells, ["source", "target", "accuracy", "diagonal"])
        mrows = [{"source": s, **{f"target_{t}": float(matrix[s, t]) for t in range(n)}} for s in range(n)]
        write_csv(o / "motivation_matrix.csv", mrows, ["source"] + [f"target_{t}" for t in range(n)])
        write_json(o / "motivation.json", report)
    return report


def export_features(model: DualAdapterModel, x: np.ndarray, y: np.ndarray, domain_id: int) -> list[dict]:
    """Penultimate representation per sample for the four branch variants."""
    trunk = Tensor(model.trunk(x).data)
    feats = {
        "backbone": bare(model).forward_from_trunk(trunk)[0].data,
        "A_di-only": model.forward_from_trunk(trunk, use_dw=False)[0].data,
        "A_dw-only": model.forward_from_trunk(trunk, use_di=False)[0].data,
        "fused": model.forward_from_trunk(trunk)[0].data,
    }
    rows = []
    for i in range(len(y)):
        for b in BRANCHES:
            rows.append({"domain_id": domain_id, "y": int(y[i]), "branch": b,
                         **{f"f_{j}": float(v) for j, v in enumerate(feats[b][i])}})
    return rows


def cmd_export_features(cfg: TrainConfig | None = None, out=None, run_dir=None, client: int = 0) -> list[dict]:
    """Export target-domain features of a finished run (or of a fresh run of ``cfg``)."""
    if run_dir is not None:
        st, _ = load_run(run_dir)
    else:
        st = run_single(cfg, cfg.seeds[0], cfg.targets()[0]).setup
    c = next((cl for cl in st.clients if cl.client_id == client), None)
    if c is None:
        raise DualFedError(f"no client {client} in run")
    view = replace(c.model, a_di=st.server.a_di_global)
    tgt = st.target_data
    rows = export_features(view, tgt.x_test, tgt.y_test, tgt.domain_id)
    if out is not None:
        write_csv(_out(out) / "features.csv", rows,
                  ["domain_id", "y", "branch"] + [f"f_{j}" for j in range(st.backbone.d_h)])
    return rows


def cmd_comm_report(run_dir, out=None, bytes_per_param: int = 8, include_logits: bool = False) -> dict:
    d = Path(run_dir)
    tpath = d / "transcript.bin"
    if not tpath.exists():
        raise FileError(f"missing transcript {tpath}")
    transcript = read_transcript(tpath)
    n_classes, batch, epochs = 5, 32, 3
    if (d / "run.json").exists():
        cfgd = json.loads((d / "run.json").read_text())["config"]
        n_classes, batch, epochs = cfgd["dataset"]["n_classes"], cfgd["batch_size"], cfgd["local_epochs"]
    cm = CommCostModel(bytes_per_param, include_logits, n_classes, batch, epochs)
    rep = comm_cost_report(transcript, cm)
    rows = [{"kind": "client-round", "label": f"round {r['round']} client {r['client_id']}", **r,
             "megabytes": r["total_bytes"] / 1e6} for r in rep.rows]
    for rnd, tot in sorted(rep.round_totals.items()):
        rows.append({"kind": "round-total", "label": f"round {rnd}", "round": rnd, "total_bytes": tot,
                     "megabytes": tot / 1e6})
    rows.append({"kind": "setup", "label": "registration", "total_bytes": rep.setup_bytes,
                 "megabytes": rep.setup_bytes / 1e6})
    rows.append({"kind": "total", "label": "simulator total", "total_bytes": rep.total_bytes,
                 "megabytes": rep.total_bytes / 1e6})
    for name, mb in rep.reference_mb.items():
        rows.append({"kind": "reference", "label": f"reference per-client per-round: {name}",
                     "megabytes": mb, "total_bytes": int(round(mb * 1e6))})
    n_k = [int.from_bytes(m.payload, "little") for m in transcript if m.kind == "register_n_k"]
    lv = max((math.ceil(n / batch) * epochs * n_classes for n in n_k), default=0)
    sweep = logits_share_sweep([10 ** p for p in range(2, 8)], lv, bytes_per_param)
    result = {"rows": rows, "total_bytes": rep.total_bytes, "transcript_bytes": rep.transcript_bytes,
              "logits_share_sweep": sweep}
    if out is not None:
        o = _out(out)
        write_csv(o / "comm_report.csv", rows,
                  ["kind", "label", "round", "client_id", "down_bytes", "up_bytes", "logits_bytes",
                   "total_bytes", "megabytes"])
        write_csv(o / "logits_share.csv", sweep, ["adapter_params", "adapter_bytes", "logits_bytes",
                                                  "logits_share"])
    return result
