import csv
import io
import json
from pathlib import Path

import numpy as np

from .engine import CENTRAL_HOLDER, FedResult, MetricsRecord, agreement

CSV_HEADER = ("round", "dataset_id", "holder_node", "accuracy")


def canonical_order(records):
    return sorted(records, key=lambda r: (r.round, r.dataset_id, r.holder_node))


def metrics_csv(records) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in canonical_order(records):
        w.writerow([r.round, r.dataset_id, r.holder_node, f"{r.accuracy:.6f}"])
    return out.getvalue()


def write_metrics_csv(records, path) -> None:
    Path(path).write_bytes(metrics_csv(records).encode())


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(int(r["round"]), int(r["dataset_id"]), int(r["holder_node"]), float(r["accuracy"])) for r in rows]


def agreement_series(records) -> list[dict]:
    rounds = sorted({r.round for r in records})
    series = []
    for t in rounds:
        for k, (mean, std) in sorted(agreement(records, t).items()):
            series.append({"round": t, "dataset_id": k, "mean": mean, "std": std})
    return series


def summary(result: FedResult, run_config: dict | None = None, build_id: str = "") -> dict:
    final = result.final_accuracy()
    return {
        "config": run_config if run_config is not None else result.config.__dict__,
        "build_id": build_id,
        "variant": result.config.variant,
        "final_accuracy": {str(k): v for k, v in sorted(final.items())},
        "mean_final_accuracy": float(np.mean(list(final.values()))) if final else None,
        "central": any(r.holder_node == CENTRAL_HOLDER for r in result.records),
        "agreement": agreement_series(result.records),
    }


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
