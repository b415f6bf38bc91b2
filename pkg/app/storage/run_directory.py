"""
Run directory layout and artifact writers
"""
import csv
import json
import logging
import os
import subprocess
from typing import Dict, Iterable, List, Optional

from pydantic import BaseModel

logger = logging.getLogger(__name__)

PACKAGE_VERSION = "0.1.0"

CONFIG_FILE = "config.json"
VERSION_FILE = "VERSION"
METRICS_FILE = "metrics.csv"
CHECKPOINT_DIR = "checkpoints"
METRIC_COLUMNS = ["iter", "lr", "total", "cls", "kp", "ctr", "hm", "box"]


def runs_root() -> str:
    return os.getenv("KPALIGN_RUNS_DIR", "runs")


def describe_version() -> str:
    """``git describe`` of the source tree, or the package version outside git."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return PACKAGE_VERSION


class MetricsWriter:
    """Appends one CSV row per call; the header is written once per file."""

    def __init__(self, path: str, columns: Optional[List[str]] = None):
        self.path = path
        self.columns = columns or METRIC_COLUMNS
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        if not os.path.exists(path):
            with open(path, "w", newline="") as f:
                csv.DictWriter(f, fieldnames=self.columns).writeheader()

    def log(self, row: Dict) -> None:
        with open(self.path, "a", newline="") as f:
            csv.DictWriter(f, fieldnames=self.columns).writerow({k: row.get(k) for k in self.columns})

    def truncate_after(self, iteration: int) -> None:
        """Drop rows past ``iteration`` so a resumed run does not duplicate them."""
        rows = read_csv(self.path)
        kept = [r for r in rows if int(r["iter"]) < iteration]
        with open(self.path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.columns)
            w.writeheader()
            w.writerows(kept)


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_csv(path: str, rows: Iterable[Dict], columns: List[str]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k) for k in columns})


class RunDirectory:
    """Everything one command invocation writes lives under ``path``."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(path, exist_ok=True)

    def file(self, *parts: str) -> str:
        return os.path.join(self.path, *parts)

    @property
    def metrics_path(self) -> str:
        return self.file(METRICS_FILE)

    @property
    def checkpoint_dir(self) -> str:
        return self.file(CHECKPOINT_DIR)

    def checkpoint_path(self, iteration: int) -> str:
        return os.path.join(self.checkpoint_dir, f"ckpt_{iteration:07d}")

    def latest_checkpoint(self) -> Optional[str]:
        if not os.path.isdir(self.checkpoint_dir):
            return None
        manifests = sorted(f for f in os.listdir(self.checkpoint_dir) if f.endswith(".json"))
        return os.path.join(self.checkpoint_dir, manifests[-1]) if manifests else None

    def echo_config(self, config: BaseModel, name: str = CONFIG_FILE) -> str:
        path = self.file(name)
        with open(path, "w") as f:
            f.write(config.model_dump_json(indent=2))
        return path

    def write_version(self) -> str:
        path = self.file(VERSION_FILE)
        with open(path, "w") as f:
            f.write(describe_version() + "\n")
        return path

    def write_json(self, name: str, payload) -> str:
        path = self.file(name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        if isinstance(payload, BaseModel):
            text = payload.model_dump_json(indent=2)
        else:
            text = json.dumps(payload, indent=2)
        with open(path, "w") as f:
            f.write(text)
        return path

    def metrics_writer(self, name: str = METRICS_FILE) -> MetricsWriter:
        return MetricsWriter(self.file(name))


def open_run_directory(config: BaseModel, output_dir: str, config_name: str = CONFIG_FILE) -> RunDirectory:
    """Create the run directory and write the provenance files.

    Commands that only read a run (eval, infer) pass their own ``config_name``
    so the config.json and VERSION of the run that produced it stay intact.
    """
    run = RunDirectory(output_dir)
    run.echo_config(config, config_name)
    if config_name == CONFIG_FILE or not os.path.exists(run.file(VERSION_FILE)):
        run.write_version()
    logger.info(f"Run directory ready: {output_dir}")
    return run
