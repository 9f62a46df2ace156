"""Run provenance: ``manifest.json`` plus a per-epoch ``metrics.csv``."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .checkpoint import atomic_write_bytes
from .training import EpochRow

METRIC_COLUMNS = ("epoch", "train_loss", "val_acc", "val_micro_f1", "val_macro_f1")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5, check=False)
    except (OSError, subprocess.SubprocessError):
        out = None
    if out is not None and out.returncode == 0 and out.stdout.strip():
        return f"hgmn-{__version__}-g{out.stdout.strip()}"
    return f"hgmn-{__version__}"


@dataclass
class RunManifest:
    config: dict
    inputs: dict[str, str]
    seed: int
    build: str = field(default_factory=build_id)
    rows: list[EpochRow] = field(default_factory=list)
    test_metrics: dict[str, float] | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def for_inputs(cls, config: dict, paths, seed: int, **extra) -> "RunManifest":
        return cls(config=dict(config), inputs={str(p): file_digest(p) for p in paths},
                   seed=seed, extra=extra)

    def append(self, row: EpochRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError(f"epoch {row.epoch} does not follow {self.rows[-1].epoch}")
        self.rows.append(row)

    def to_dict(self) -> dict:
        return {"config": self.config, "inputs": self.inputs, "seed": self.seed,
                "build": self.build, "rows": [asdict(r) for r in self.rows],
                "test_metrics": self.test_metrics, **self.extra}


def metrics_csv(manifest: RunManifest) -> str:
    """One row per epoch; a final ``test`` row carries the test metrics."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in manifest.rows:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_acc), repr(r.val_micro_f1),
                    repr(r.val_macro_f1)])
    if manifest.test_metrics is not None:
        t = manifest.test_metrics
        w.writerow(["test", repr(t["loss"]), repr(t["accuracy"]), repr(t["micro_f1"]),
                    repr(t["macro_f1"])])
    return buf.getvalue()


def write_report(manifest: RunManifest, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mpath, cpath = out / "manifest.json", out / "metrics.csv"
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(mpath, text.encode("utf-8"))
    atomic_write_bytes(cpath, metrics_csv(manifest).encode("utf-8"))
    return mpath, cpath
