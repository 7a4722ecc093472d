"""CSV tables and YAML documents read and written by the pipeline."""

from __future__ import annotations

import math
import os

import numpy as np
import pandas as pd
import yaml

from extremal_partition.domain import compute_adjacency
from extremal_partition.errors import DataError
from extremal_partition.models import (
    DependenceField,
    FitResult,
    MaximaPanel,
    MergeTrace,
    PairSet,
    Partition,
    PenaltySpec,
    SandwichInfo,
    SiteSet,
)

VALUE_FORMAT = "%.17g"  # round-trips float64
TABLE_FORMAT = "%.10g"


def sidecar_path(csv_path: str) -> str:
    return os.path.splitext(csv_path)[0] + ".meta.yml"


def _read_csv(path: str, required: list[str]) -> pd.DataFrame:
    if not os.path.isfile(path):
        raise DataError("{} does not exist".format(path))
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError("{}: cannot parse CSV ({})".format(path, exc))
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError("{}: missing column(s) {}".format(path, ", ".join(missing)))
    return frame


def read_sites(path: str) -> SiteSet:
    frame = _read_csv(path, ["id", "x", "y"])
    return SiteSet(frame[["x", "y"]].to_numpy(dtype=float), frame["id"].astype(str).tolist())


def write_sites(path: str, sites: SiteSet) -> None:
    frame = pd.DataFrame({"id": sites.ids, "x": sites.coords[:, 0], "y": sites.coords[:, 1]})
    frame.to_csv(path, index=False, float_format=VALUE_FORMAT)


def read_partition(path: str, sites: SiteSet) -> Partition:
    """Site -> region table; region labels are renumbered 1..R in ascending order."""
    frame = _read_csv(path, ["id", "region"])
    lookup = dict(zip(frame["id"].astype(str), frame["region"]))
    missing = [i for i in sites.ids if i not in lookup]
    if missing:
        raise DataError("{}: no region for site(s) {}".format(path, ", ".join(missing[:5])))
    raw = np.asarray([lookup[i] for i in sites.ids])
    _, labels = np.unique(raw, return_inverse=True)
    return compute_adjacency(sites, Partition(labels + 1))


def write_partition(path: str, sites: SiteSet, partition: Partition) -> None:
    pd.DataFrame({"id": sites.ids, "region": partition.labels}).to_csv(path, index=False)


def read_panel(path: str, sites: SiteSet, scale: str | None = None) -> MaximaPanel:
    """Panel CSV with a ``time`` column and one column per site id.

    The scale comes from the ``.meta.yml`` sidecar unless given; without either it is raw.
    """
    frame = _read_csv(path, ["time"])
    missing = [i for i in sites.ids if i not in frame.columns]
    if missing:
        raise DataError("{}: no column for site(s) {}".format(path, ", ".join(missing[:5])))
    if scale is None:
        meta = read_yaml(sidecar_path(path)) if os.path.isfile(sidecar_path(path)) else {}
        scale = meta.get("scale", "raw")
    values = frame[list(sites.ids)].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    return MaximaPanel(values, scale, sites)


def write_panel(path: str, panel: MaximaPanel, meta: dict | None = None) -> list[str]:
    frame = pd.DataFrame(panel.values, columns=list(panel.sites.ids))
    frame.insert(0, "time", np.arange(1, panel.T + 1))
    frame.to_csv(path, index=False, float_format=VALUE_FORMAT)
    sidecar = dict(meta or {})
    sidecar["scale"] = panel.scale
    write_yaml(sidecar_path(path), sidecar)
    return [path, sidecar_path(path)]


def read_field(path: str, partition: Partition) -> DependenceField:
    frame = _read_csv(path, ["region", "sigma2", "phi"]).sort_values("region")
    if frame["region"].tolist() != list(range(1, partition.R + 1)):
        raise DataError("{}: regions must be 1..{}".format(path, partition.R))
    return DependenceField.from_values(partition, frame["sigma2"].to_numpy(), frame["phi"].to_numpy())


def write_field(path: str, field: DependenceField) -> None:
    frame = pd.DataFrame({
        "region": np.arange(1, field.partition.R + 1),
        "sigma2": field.sigma2,
        "phi": field.phi,
    })
    frame.to_csv(path, index=False, float_format=VALUE_FORMAT)


def read_pairs(path: str) -> PairSet:
    frame = _read_csv(path, ["i", "j"])
    return PairSet(frame[["i", "j"]].to_numpy())


def write_pairs(path: str, pairs: PairSet) -> None:
    pd.DataFrame({"i": pairs.i, "j": pairs.j}).to_csv(path, index=False)


def write_table(path: str, table: pd.DataFrame) -> None:
    table.to_csv(path, index=False, float_format=TABLE_FORMAT)


def read_yaml(path: str) -> dict:
    with open(path, "r") as f:
        return yaml.safe_load(f) or {}


def write_yaml(path: str, data: dict) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(data, f, sort_keys=False, default_flow_style=False)


def penalty_doc(spec: PenaltySpec) -> dict:
    return {"lambda1": plain_number(spec.lambda1), "lambda2": plain_number(spec.lambda2), "q": spec.q}


def field_doc(field: DependenceField) -> list[dict]:
    return [
        {"region": r + 1, "sigma2": plain_number(field.sigma2[r]), "phi": plain_number(field.phi[r])}
        for r in range(field.partition.R)
    ]


def fit_doc(result: FitResult, info: SandwichInfo | None = None,
            criteria: tuple[float, float] | None = None) -> dict:
    doc = {
        "regions": result.field_hat.partition.R,
        "penalty": penalty_doc(result.penalty),
        "pl": plain_number(result.pl_value),
        "ppl": plain_number(result.ppl_value),
        "converged": result.converged,
        "evaluations": result.n_evals,
        "condition": result.condition_flag,
        "field": field_doc(result.field_hat),
    }
    if info is not None:
        doc["sandwich"] = {
            "trace_JinvK": plain_number(info.trace_JinvK),
            "std_errors": [plain_number(x) for x in info.std_errors],
            "condition": info.condition_flag,
        }
    if criteria is not None:
        doc["clic"], doc["cbic"] = plain_number(criteria[0]), plain_number(criteria[1])
    return doc


def trace_doc(trace: MergeTrace) -> dict:
    steps = []
    for k, step in enumerate(trace.steps):
        steps.append({
            "step": k,
            "regions": step.partition.R,
            "penalty": penalty_doc(step.penalty),
            "holdout_ppl": plain_number(step.holdout_ppl),
            "thresholds_tried": [plain_number(x) for x in step.thresholds_tried],
            "accepted_threshold": None if step.accepted_threshold is None else plain_number(step.accepted_threshold),
        })
    return {"steps": steps, "final_regions": trace.final_partition.R}


def plain_number(x) -> float:
    """Plain float rounded for stable text output; inf stays inf."""
    x = float(x)
    if math.isinf(x) or math.isnan(x):
        return x
    return float("{:.12g}".format(x))
