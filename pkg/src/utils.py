"""
Utility Functions for RiskEdge
==============================
Includes: Config loading, logging, directory creation, and result display
"""

import hashlib
import logging
import os
from datetime import datetime
from typing import Dict, Mapping, Optional

import pandas as pd
import yaml
from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from src.scenario import RiskEdgeConfig, ScenarioError, Violation

console = Console()

ENV_PREFIX = "RISKEDGE_"

# Scale presets, merged under the config file's own values
SCALE_PRESETS: Dict[str, dict] = {
    "desk": {"network": {"n_bs": 4, "n_ue": 16}},
    "paper": {
        "network": {"n_bs": 10, "n_ue": 40},
        "radio": {
            "p_bs_mw": 100.0,
            "p_ue_mw": 10.0,
            "gain_bs": 1.0,
            "gain_ue": 1.0,
            "bandwidth_mhz": 100.0,
            # -90 dBm of noise over the 100 MHz band
            "noise_psd_dbm_hz": -170.0,
        },
        "compute": {"f_max_ghz": 20.0},
    },
}


def _merge(base: dict, override: Mapping) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def env_overrides(environ: Optional[Mapping[str, str]] = None, prefix: str = ENV_PREFIX) -> dict:
    """
    RISKEDGE_<SECTION>__<KEY>=<yaml value> variables as a nested dict.
    Values are parsed as YAML so numbers, booleans and lists keep their types.
    """
    environ = os.environ if environ is None else environ
    overrides: dict = {}
    for name, raw in environ.items():
        if not name.startswith(prefix):
            continue
        path = name[len(prefix):].lower().split("__")
        if len(path) != 2 or not all(path):
            raise ScenarioError([Violation(name, "expected RISKEDGE_<SECTION>__<KEY>")])
        section, key = path
        overrides.setdefault(section, {})[key] = yaml.safe_load(raw)
    return overrides


def load_config(
    config_path: str = "config/config.yaml",
    scale: Optional[str] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RiskEdgeConfig:
    """Load and validate configuration: preset, then file, then environment."""
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"Config file not found: {config_path}")

    with open(config_path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ScenarioError([Violation(config_path, "top level must be a mapping of sections")])

    if scale is not None:
        if scale not in SCALE_PRESETS:
            raise ScenarioError([Violation("scale", f"must be one of {sorted(SCALE_PRESETS)}")])
        # the preset fixes the sizes; an explicit position list would contradict it
        raw = _merge(raw, SCALE_PRESETS[scale])
        for key in ("bs_positions", "ue_positions"):
            raw.get("network", {}).pop(key, None)
        radio, compute = raw.get("radio", {}), raw.get("compute", {})
        if scale == "paper":
            radio.pop("bandwidth_hz", None)
            compute.pop("f_max_hz", None)

    if environ is None:
        load_dotenv()
    raw = _merge(raw, env_overrides(environ))

    try:
        return RiskEdgeConfig.model_validate(raw)
    except ValidationError as exc:
        violations = [
            Violation(".".join(str(p) for p in err["loc"]) or "config", err["msg"]) for err in exc.errors()
        ]
        raise ScenarioError(violations) from None


def config_hash(config: RiskEdgeConfig) -> str:
    """SHA-256 of the canonical YAML dump of a validated config."""
    text = yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def setup_logging(log_path: str = "logs/riskedge.log", level: int = logging.INFO):
    """Setup logging configuration."""
    directory = os.path.dirname(log_path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(log_path),
            logging.StreamHandler(),
        ],
        force=True,
    )


def create_directories(out_dir: str = "data/output"):
    """Create necessary directories for a run."""
    for directory in (out_dir, os.path.join(out_dir, "models")):
        os.makedirs(directory, exist_ok=True)


def get_timestamp() -> str:
    """Get current timestamp as string."""
    return datetime.now().strftime("%Y%m%d_%H%M%S")


def print_banner():
    """Print application banner."""
    banner = """
╭────────────────────────────────────╮
│ RiskEdge                           │
│ Risk-Aware Edge Task Planning      │
│                                    │
│ Simulate → Learn → Plan → Evaluate │
╰────────────────────────────────────╯
    """
    console.print(banner)


def print_method_summary(df: pd.DataFrame, tau_th_ms: Optional[float] = None):
    """
    Print a comparison table of evaluated methods.

    Expected columns: method, mean_delay_ms, var_ms, cvar_ms, drop_rate, n_samples,
    and optionally reliability.
    """
    if df.empty:
        console.print("[yellow]No results to display[/yellow]")
        return

    console.print("\n[bold cyan]E2E Delay by Method[/bold cyan]\n")

    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("Method", style="cyan", width=12)
    table.add_column("Mean (ms)", justify="right", width=10)
    table.add_column("VaR (ms)", justify="right", width=10)
    table.add_column("CVaR (ms)", justify="right", style="green", width=10)
    table.add_column("Drops", justify="right", width=8)
    table.add_column("Samples", justify="right", width=9)
    if "reliability" in df.columns:
        table.add_column(f"P(tau < {tau_th_ms:g} ms)", justify="right", style="yellow", width=16)

    best = df["cvar_ms"].min()
    for _, row in df.iterrows():
        cells = [
            row["method"],
            f"{row['mean_delay_ms']:.3f}",
            f"{row['var_ms']:.3f}",
            f"{row['cvar_ms']:.3f}",
            f"{row['drop_rate']:.2%}",
            f"{int(row['n_samples']):,}",
        ]
        if "reliability" in df.columns:
            cells.append(f"{row['reliability']:.4f}")
        style = "bold" if row["cvar_ms"] == best else None
        table.add_row(*cells, style=style)

    console.print(table)


def print_plan_summary(plan_df: pd.DataFrame, method: str, objective_ms: float, converged: bool):
    """Per-BS view of a plan: served UEs and allocated frequency."""
    console.print(f"\n[bold cyan]Plan: {method}[/bold cyan]\n")

    table = Table(show_header=True, header_style="bold magenta")
    table.add_column("BS", style="dim", width=4)
    table.add_column("UEs", width=40)
    table.add_column("f (GHz)", justify="right", width=10)

    served = plan_df[plan_df["bs_id"] >= 0]
    for bs_id, group in served.groupby("bs_id"):
        table.add_row(
            str(bs_id),
            ", ".join(str(u) for u in group["ue_id"]),
            f"{group['f_hz'].sum() / 1e9:.2f}",
        )
    console.print(table)

    status = "[green]converged[/green]" if converged else "[yellow]not converged[/yellow]"
    console.print(f"• Objective: [bold]{objective_ms:.3f} ms[/bold] ({status})")


def save_frame(df: pd.DataFrame, filepath: str):
    """Write a result frame as CSV."""
    directory = os.path.dirname(filepath)
    if directory:
        os.makedirs(directory, exist_ok=True)
    df.to_csv(filepath, index=False, encoding="utf-8", float_format="%.10g")
    console.print(f"[green]✓ Saved {filepath}[/green]")
