import argparse
import json
import os
import sys
import time
from typing import Dict, List, Optional, Tuple

import pandas as pd
from rich.console import Console
from rich.panel import Panel

from src.correlated_vae import CorrelatedVAE, VAEConfig, train
from src.data_pipeline import (
    DelayDataset,
    generate_dataset,
    ingest_compute_trace,
    make_windows,
    stack_windows,
)
from src.delay_simulator import SampleBank, reference_plan
from src.experiment import (
    METHODS,
    ExperimentReport,
    cdf_grid,
    cost_tables,
    evaluate_plan,
    gaussian_inputs,
    plan_method,
    probe,
    resimulator,
    run_selftest,
    sweep_f_max,
    sweep_n_ue,
    write_manifest,
)
from src.scenario import (
    AllocationPlan,
    PlanShapeError,
    build_risk_spec,
    build_scenario,
    build_task_model,
    dump_scenario,
    require_valid,
)
from src.utils import (
    config_hash,
    create_directories,
    load_config,
    print_banner,
    print_method_summary,
    print_plan_summary,
    save_frame,
    setup_logging,
)

console = Console()


class RiskEdgeEngine:
    """
    Main orchestrator for the RiskEdge toolkit.

    Pipeline (one verb per stage, artifacts exchanged through the output directory):
    1. simulate: delay datasets and the probe bank of every (UE, BS) pair
    2. train:    one correlated VAE per BS (or a pooled model)
    3. plan:     CVaR cost tables, task assignment and frequency allocation
    4. evaluate: fresh Monte-Carlo evaluation of every saved plan
    5. sweep:    delay versus f_max and versus the number of UEs
    """

    def __init__(
        self,
        config_path: str = "config/config.yaml",
        scale: Optional[str] = None,
        seed: int = 0,
        out_dir: Optional[str] = None,
    ):
        self.config = load_config(config_path, scale)
        self.seed = seed

        experiment = self.config.experiment
        setup_logging(experiment.log_path)
        self.out_dir = out_dir or experiment.output_dir
        create_directories(self.out_dir)

        self.config_hash = config_hash(self.config)
        self.scenario = require_valid(build_scenario(self.config, seed))
        self.task_model = self._build_task_model()
        self.risk = build_risk_spec(self.config)

        console.print(
            Panel(
                f"[green]RiskEdge Engine initialized[/green]\n"
                f"{self.scenario.n_bs} BSs, {self.scenario.n_ue} UEs, seed {seed}, "
                f"config {self.config_hash[:12]}",
                border_style="green",
            )
        )

    def _build_task_model(self):
        model = build_task_model(self.config)
        compute = self.config.compute
        if compute.trace_path:
            trace = ingest_compute_trace(compute.trace_path)
            model = model.with_trace(trace.to_cycles(compute.trace_ref_freq_ghz * 1e9))
        return model

    def _path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _record(self, files: List[str]):
        write_manifest(self.out_dir, files, self.config_hash, self.seed)

    def _require(self, name: str) -> str:
        path = self._path(name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path} not found; run the earlier stage first")
        return path

    def _load_bank(self) -> SampleBank:
        probes = pd.read_csv(self._require("probe.csv"), encoding="utf-8")
        cycles = pd.read_csv(self._require("cycles.csv"), encoding="utf-8")
        return SampleBank.from_frames(probes, cycles, self.scenario.n_ue, self.scenario.n_bs, self.scenario.tti_ms)

    # ==========================================
    # SIMULATE
    # ==========================================
    def run_simulate(self) -> List[str]:
        experiment, training = self.config.experiment, self.config.training
        load_floor = training.load_floor if training.mixed_load else None

        console.print(f"[bold blue]Simulating {experiment.n_drops} drops...[/bold blue]")
        dataset = generate_dataset(
            self.scenario,
            reference_plan(self.scenario),
            self.task_model,
            experiment.n_drops,
            self.seed,
            load_floor=load_floor,
            workers=experiment.workers,
        )
        dataset.to_csv(self._path("samples.csv"))
        save_frame(dataset.dropped, self._path("dropped.csv"))

        console.print(f"[bold blue]Probing every (UE, BS) pair over {experiment.probe_drops} drops...[/bold blue]")
        bank = probe(self.scenario, self.task_model, experiment.probe_drops, self.seed, workers=experiment.workers)
        probes, cycles = bank.to_frames()
        save_frame(probes, self._path("probe.csv"))
        save_frame(cycles, self._path("cycles.csv"))

        with open(self._path("scenario.yaml"), "w", encoding="utf-8") as f:
            f.write(dump_scenario(self.scenario))

        files = ["samples.csv", "dropped.csv", "probe.csv", "cycles.csv", "scenario.yaml"]
        self._record(files)
        console.print(
            f"[green]✓ {len(dataset)} delay records, {len(dataset.dropped)} dropped, "
            f"probe drop rate {bank.drop_rate():.2%}[/green]"
        )
        return files

    # ==========================================
    # TRAIN
    # ==========================================
    def _training_data(self) -> DelayDataset:
        source = self.config.training.data_source
        if source == "probe":
            return DelayDataset.from_bank(self._load_bank())
        if source == "samples":
            return DelayDataset.from_csv(self._require("samples.csv"), self.scenario.tti_ms)
        raise ValueError(f"training.data_source must be 'probe' or 'samples', got {source!r}")

    def _train_one(
        self, data: DelayDataset, bs_id: int, vae_config: VAEConfig
    ) -> Tuple[CorrelatedVAE, pd.DataFrame, pd.DataFrame]:
        training = self.config.training
        train_part, val_part = data.split(training.validation_fraction, self.seed)
        windows = stack_windows(make_windows(train_part, training.window, training.stride, train_part.normalization))
        validation = None
        if len(val_part) >= training.window:
            try:
                validation = stack_windows(
                    make_windows(val_part, training.window, training.stride, train_part.normalization)
                )
            except ValueError:
                validation = None
        model, history = train(windows, vae_config, self.seed, train_part.normalization, bs_id, validation)
        curve = history.curve.assign(bs_id=bs_id)
        return model, curve, history.scatter

    def run_train(self) -> List[str]:
        training = self.config.training
        vae_config = VAEConfig.from_training(training)
        data = self._training_data()
        if len(data) == 0:
            raise ValueError("training dataset is empty")

        groups = [(-1, data)] if training.pooled else [(n, data.for_bs(n)) for n in data.bs_ids()]
        curves, scatters, files = [], [], []
        for bs_id, subset in groups:
            label = "pooled" if bs_id < 0 else f"BS {bs_id}"
            console.print(f"[bold blue]Training {label} on {len(subset)} records...[/bold blue]")
            model, curve, scatter = self._train_one(subset, bs_id, vae_config)
            name = "models/pooled.npz" if bs_id < 0 else f"models/bs_{bs_id}.npz"
            model.save(self._path(name))
            files.append(name)
            curves.append(curve)
            scatters.append(scatter)

        loss = pd.concat(curves, ignore_index=True)
        # per-epoch mean across models
        loss = loss.groupby("epoch", as_index=False)[["mean_loss", "mean_rho", "mean_s"]].mean()
        save_frame(loss, self._path("loss_curve.csv"))
        save_frame(pd.concat(scatters, ignore_index=True), self._path("latent_scatter.csv"))
        files += ["loss_curve.csv", "latent_scatter.csv"]
        self._record(files)
        return files

    def _load_models(self) -> Dict[int, CorrelatedVAE]:
        models = {}
        directory = self._path("models")
        if os.path.isdir(directory):
            for name in sorted(os.listdir(directory)):
                if name == "pooled.npz":
                    models[-1] = CorrelatedVAE.load(os.path.join(directory, name))
                elif name.startswith("bs_") and name.endswith(".npz"):
                    models[int(name[3:-4])] = CorrelatedVAE.load(os.path.join(directory, name))
        if not models:
            raise FileNotFoundError(f"no checkpoints in {directory}; run 'train' first")
        return models

    # ==========================================
    # PLAN
    # ==========================================
    def run_plan(self, method: str = "proposed") -> List[str]:
        experiment = self.config.experiment
        bank = self._load_bank()

        models, windows = None, None
        if experiment.cost_source == "gaussian":
            models = self._load_models()
            windows = gaussian_inputs(models, bank, self.config.training.window)
        elif experiment.cost_source != "empirical":
            raise ValueError(f"experiment.cost_source must be 'empirical' or 'gaussian', got {experiment.cost_source!r}")
        tables = cost_tables(self.scenario, self.risk, bank, models, windows)

        refresh = None
        if experiment.coupling == "resimulate":
            refresh = {
                metric: resimulator(
                    self.scenario, self.task_model, self.risk, experiment.probe_drops, self.seed, metric, experiment.workers
                )
                for metric in ("cvar", "mean", "mean+cvar")
            }

        started = time.perf_counter()
        result = plan_method(
            method,
            self.scenario,
            tables,
            experiment.max_iters,
            experiment.coupling,
            experiment.solver,
            refresh,
            experiment.workers,
        )
        diagnostics = {**result.diagnostics(), "duration_s": time.perf_counter() - started}

        plan_df = result.plan.to_frame()
        save_frame(plan_df, self._path(f"plan_{method}.csv"))
        with open(self._path(f"plan_{method}.json"), "w", encoding="utf-8") as f:
            json.dump(diagnostics, f, indent=2, sort_keys=True)

        print_plan_summary(plan_df, method, result.objective, result.converged)
        files = [f"plan_{method}.csv", f"plan_{method}.json"]
        self._record(files)
        return files

    # ==========================================
    # EVALUATE
    # ==========================================
    def _load_plan(self, method: str) -> AllocationPlan:
        frame = pd.read_csv(self._require(f"plan_{method}.csv"), encoding="utf-8")
        plan = AllocationPlan.from_frame(frame, self.scenario.n_ue, self.scenario.n_bs)
        if len(plan.served_ues()) != self.scenario.n_ue:
            raise PlanShapeError(
                f"plan_{method}.csv serves {len(plan.served_ues())} of {self.scenario.n_ue} UEs; "
                "it was made for another scenario"
            )
        return plan

    def run_evaluate(self, method: Optional[str] = None) -> ExperimentReport:
        experiment = self.config.experiment
        methods = [method] if method else [m for m in METHODS if os.path.exists(self._path(f"plan_{m}.csv"))]
        if not methods:
            raise FileNotFoundError(f"no plan_<method>.csv in {self.out_dir}; run 'plan' first")

        report = ExperimentReport(self.seed, self.config_hash, self.risk.alpha)
        e2e_by_method, files = {}, []
        for name in methods:
            plan = self._load_plan(name)
            started = time.perf_counter()
            metrics, samples = evaluate_plan(
                self.scenario,
                plan,
                self.task_model,
                self.risk,
                experiment.eval_drops,
                self.seed,
                tau_grid=[self.risk.tau_th_ms, *experiment.tau_grid_ms],
                method=name,
                workers=experiment.workers,
            )
            report.durations_s[name] = time.perf_counter() - started
            report.metrics[name] = metrics
            diag_path = self._path(f"plan_{name}.json")
            if os.path.exists(diag_path):
                with open(diag_path, encoding="utf-8") as f:
                    report.planner[name] = json.load(f)

            samples_name = f"eval_samples_{name}.csv"
            save_frame(samples, self._path(samples_name))
            files.append(samples_name)
            e2e_by_method[name] = (
                samples["tau_t_ttis"].to_numpy(dtype=float) * self.scenario.tti_ms
                + samples["tau_p_ms"].to_numpy(dtype=float)
            )

        save_frame(cdf_grid(e2e_by_method, experiment.tau_grid_ms), self._path("cdf.csv"))
        report.to_json(self._path("report.json"))
        files += ["cdf.csv", "report.json"]
        self._record(files)

        summary = report.summary_frame()
        summary["reliability"] = [report.metrics[m].reliability[self.risk.tau_th_ms] for m in summary["method"]]
        print_method_summary(summary, self.risk.tau_th_ms)
        return report

    # ==========================================
    # SWEEP
    # ==========================================
    def run_sweep(self, method: Optional[str] = None) -> List[str]:
        experiment = self.config.experiment
        seeds = [self.seed + k for k in range(experiment.seeds)]
        methods = [method] if method else ["proposed", "baseline1", "baseline2"]

        console.print(f"[bold blue]f_max sweep over {len(seeds)} seed(s)...[/bold blue]")
        fmax = sweep_f_max(self.config, seeds, experiment.f_max_sweep_ghz, methods)
        save_frame(fmax, self._path("fmax_sweep.csv"))

        console.print(f"[bold blue]UE-count sweep over {len(seeds)} seed(s)...[/bold blue]")
        ues = sweep_n_ue(self.config, seeds, experiment.ue_sweep, methods)
        save_frame(ues, self._path("ue_sweep.csv"))

        files = ["fmax_sweep.csv", "ue_sweep.csv"]
        self._record(files)
        return files


def report_selftest(seed: int) -> bool:
    """Print every check; failures also go to stderr as error lines."""
    checks = run_selftest(seed)
    for name, ok, detail in checks:
        mark = "[green]✓[/green]" if ok else "[red]✗[/red]"
        console.print(f"{mark} {name}: {detail}")
        if not ok:
            print(f"error: SelfTestFailure: {name}: {detail}", file=sys.stderr)
    return all(ok for _, ok, _ in checks)


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default="config/config.yaml", help="Path to config file")
    common.add_argument("--seed", type=int, default=0, help="Master seed (unsigned 64-bit)")
    common.add_argument("--out", type=str, default=None, help="Output directory (default: experiment.output_dir)")
    common.add_argument("--method", type=str, choices=METHODS, default=None, help="Planning method")
    common.add_argument("--scale", type=str, choices=["desk", "paper"], default=None, help="Scenario size preset")

    parser = argparse.ArgumentParser(
        description="RiskEdge: risk-aware task offloading for multi-access edge computing"
    )
    verbs = parser.add_subparsers(dest="verb", required=True)
    verbs.add_parser("simulate", parents=[common], help="Generate delay datasets and probe banks")
    verbs.add_parser("train", parents=[common], help="Train the correlated VAE per BS")
    verbs.add_parser("plan", parents=[common], help="Plan task assignment and compute frequencies")
    verbs.add_parser("evaluate", parents=[common], help="Monte-Carlo evaluation of saved plans")
    verbs.add_parser("sweep", parents=[common], help="Delay versus f_max and versus the UE count")
    verbs.add_parser("selftest", parents=[common], help="Run built-in numeric checks")

    args = parser.parse_args(argv)
    if not 0 <= args.seed < 2**64:
        parser.error(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
    return args


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_arguments(argv)

    try:
        if args.verb == "selftest":
            return 0 if report_selftest(args.seed) else 1

        print_banner()
        engine = RiskEdgeEngine(args.config, args.scale, args.seed, args.out)
        if args.verb == "simulate":
            engine.run_simulate()
        elif args.verb == "train":
            engine.run_train()
        elif args.verb == "plan":
            engine.run_plan(args.method or "proposed")
        elif args.verb == "evaluate":
            engine.run_evaluate(args.method)
        elif args.verb == "sweep":
            engine.run_sweep(args.method)

    except KeyboardInterrupt:
        console.print("\n[yellow]Interrupted by user[/yellow]")
        return 130
    except Exception as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
