"""One-factor ablation plans, the run summary CSV, and accuracy plots."""
from __future__ import annotations

import csv
import json
import logging
import multiprocessing as mp
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from imed.config import RunConfig
from imed.errors import ConfigError

log = logging.getLogger("imed")

AXES = ("instance_aware", "fusion_kind", "h", "fusion_depth", "mu_factors", "alpha", "distill")

# Column order is part of the on-disk contract (checked against a golden file).
ABLATION_COLUMNS = (
    "axis",
    "value",
    "transfer",
    "model",
    "source_acc",
    "target_acc",
    "teacher_target_acc",
    "params",
    "teacher_params",
    "component_params",
    "status",
    "error",
)
SUMMARY_COLUMNS = ("transfer", "model", "source_acc", "target_acc", "params")


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("on", "true", "1", "yes"):
        return True
    if text in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off, got {value!r}")


def _mu_factors(value) -> dict:
    if isinstance(value, dict):
        unknown = set(value) - {"mu1", "mu2", "mu3"}
        if unknown:
            raise ConfigError(f"mu_factors: unknown keys {sorted(unknown)}")
        return {k: float(v) for k, v in value.items()}
    if isinstance(value, str):
        value = value.split("/")
    parts = [float(v) for v in value]
    if len(parts) != 3:
        raise ConfigError(f"mu_factors value needs mu1/mu2/mu3, got {value!r}")
    return dict(zip(("mu1", "mu2", "mu3"), parts))


def config_changes(axis: str, value) -> dict:
    """RunConfig overrides for one ablation value."""
    if axis == "instance_aware":
        return {"instance_aware": _as_bool(value)}
    if axis == "fusion_kind":
        return {"fusion_kind": str(value)}
    if axis == "h":
        return {"groups": int(value)}
    if axis == "fusion_depth":
        return {"fusion_depth": int(value)}
    if axis == "mu_factors":
        return _mu_factors(value)
    if axis == "alpha":
        return {"alpha": float(value)}
    if axis == "distill":
        return {"distill": _as_bool(value)}
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def value_label(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, dict):
        return "/".join(f"{value[k]:g}" for k in ("mu1", "mu2", "mu3") if k in value)
    if isinstance(value, (list, tuple)):
        return "/".join(str(v) for v in value)
    return str(value)


@dataclass
class AblationPlan:
    """Vary exactly one axis of a base config over ``values``."""

    base: RunConfig
    axis: str
    values: list = field(default_factory=list)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown ablation axis {self.axis!r}; choose from {AXES}")
        if not self.values:
            raise ConfigError("ablation plan needs at least one value")
        labels = [value_label(v) for v in self.values]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate ablation values {labels}")
        for v in self.values:
            config_changes(self.axis, v)

    @classmethod
    def load(cls, path: Path, base: RunConfig | None = None) -> "AblationPlan":
        """Plan file: ``{"base_config": path, "axis": ..., "values": [...]}``."""
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        missing = {"axis", "values"} - set(d)
        if missing:
            raise ConfigError(f"{path}: missing {sorted(missing)}")
        if base is None:
            if "base_config" not in d:
                raise ConfigError(f"{path}: no base_config given")
            base = RunConfig.load(path.parent / d["base_config"])
        return cls(base, d["axis"], list(d["values"]))

    def configs(self) -> list[tuple[str, RunConfig | ConfigError]]:
        """Child config per value; an invalid combination yields its error instead."""
        out = []
        for v in self.values:
            try:
                out.append((value_label(v), self.base.replace(**config_changes(self.axis, v))))
            except ConfigError as err:
                out.append((value_label(v), err))
        return out


def run_child(config_dict: dict, out_dir: str) -> dict:
    """Train one ablation child into ``out_dir`` and return its summary (process entry point)."""
    import torch

    from imed.data import load_dataset
    from imed.harness import run_experiment

    torch.set_num_threads(1)
    config = RunConfig.from_dict(config_dict)
    data = load_dataset(config.dataset)
    result = run_experiment(config, data, Path(out_dir))
    comp = result.teacher.components[0].inference_parameter_count()
    out = {
        "transfer": config.transfer_name,
        "teacher_source_acc": result.final["teacher"].source_acc,
        "teacher_target_acc": result.final["teacher"].target_acc,
        "teacher_params": result.teacher.inference_parameter_count(),
        "component_params": comp,
    }
    if result.student is not None:
        out.update(
            model="student",
            source_acc=result.final["student"].source_acc,
            target_acc=result.final["student"].target_acc,
            params=result.student.inference_parameter_count(),
        )
    else:
        out.update(
            model="teacher",
            source_acc=out["teacher_source_acc"],
            target_acc=out["teacher_target_acc"],
            params=out["teacher_params"],
        )
    return out


def _safe_child(args) -> dict:
    config_dict, out_dir = args
    try:
        return {"status": "ok", **run_child(config_dict, out_dir)}
    except Exception as err:  # noqa: BLE001 - a failed child must not sink the sweep
        return {"status": "failed", "error": f"{type(err).__name__}: {err}", "trace": traceback.format_exc()}


def run_plan(plan: AblationPlan, out_dir: Path, processes: bool = True) -> list[dict]:
    """One run per value into ``out_dir/<axis>=<value>``; returns rows in ABLATION_COLUMNS order.

    With ``processes=True`` each child runs in a fresh interpreter.
    """
    out_dir = Path(out_dir)
    jobs = []
    rows = []
    for label, cfg in plan.configs():
        row = {c: "" for c in ABLATION_COLUMNS}
        row.update(axis=plan.axis, value=label, transfer=plan.base.transfer_name)
        rows.append(row)
        if isinstance(cfg, ConfigError):
            row.update(status="failed", error=str(cfg).replace("\n", " "))
            continue
        jobs.append((row, (cfg.to_dict(), str(out_dir / f"{plan.axis}={label}"))))

    if processes and jobs:
        ctx = mp.get_context("spawn")
        with ctx.Pool(1, maxtasksperchild=1) as pool:
            results = pool.map(_safe_child, [a for _, a in jobs])
    else:
        results = [_safe_child(a) for _, a in jobs]

    for (row, _), res in zip(jobs, results):
        if res["status"] != "ok":
            log.warning("ablation child %s=%s failed: %s", plan.axis, row["value"], res["error"])
            row.update(status="failed", error=res["error"].replace("\n", " "))
            continue
        row.update({k: res[k] for k in ABLATION_COLUMNS if k in res})
        row["status"] = "ok"
    return rows


def write_csv(path: Path, rows: list[dict], columns=ABLATION_COLUMNS):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def plot_accuracy(rows: list[dict], axis: str, path: Path):
    """Line plot of target accuracy against the (categorical) axis value."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if ok:
        xs = list(range(len(ok)))
        ax.plot(xs, [float(r["target_acc"]) for r in ok], marker="o", label=ok[0]["model"])
        ax.plot(xs, [float(r["teacher_target_acc"]) for r in ok], marker="s", ls="--", label="teacher")
        ax.set_xticks(xs, [r["value"] for r in ok])
        ax.legend()
    ax.set_xlabel(axis)
    ax.set_ylabel("target accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def summary_rows(run_dirs: list[Path]) -> list[dict]:
    """Final-phase records of finished runs as SUMMARY_COLUMNS rows, sorted by (transfer, model)."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        path = d / "metrics.jsonl"
        if not path.exists():
            raise ConfigError(f"{d} has no metrics.jsonl")
        params = {}
        pfile = d / "params.json"
        if pfile.exists():
            params = json.loads(pfile.read_text())
        for line in path.read_text().splitlines():
            rec = json.loads(line)
            if rec["phase"] != "final":
                continue
            rows.append(
                {
                    "transfer": rec["transfer_name"],
                    "model": rec["model"],
                    "source_acc": rec["source_acc"],
                    "target_acc": rec["target_acc"],
                    "params": params.get(rec["model"], ""),
                }
            )
    return sorted(rows, key=lambda r: (r["transfer"], r["model"]))
