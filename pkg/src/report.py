"""
Run directory writer and reader
Every output file is listed in run_manifest.json with its sha256 digest
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Union

import numpy as np
import pandas as pd

from .errors import ReportError
from .models import AccuracyRecord, PosteriorSummary, RunManifest, RunResults
from .prediction_engine import accuracy_frame, accuracy_mean

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"
Content = Union[pd.DataFrame, Mapping, str]


def file_digest(path: Union[str, Path]) -> str:
    """sha256 of a file's bytes"""
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as file:
            for chunk in iter(lambda: file.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as e:
        raise ReportError(f"Could not read {path}: {e}") from e
    return digest.hexdigest()


def combined_split_hash(split_hashes: Mapping[str, str]) -> Optional[str]:
    """The single plan hash, or a hash over category:hash pairs when there are several"""
    if not split_hashes:
        return None
    if len(split_hashes) == 1:
        return next(iter(split_hashes.values()))
    joined = ";".join(f"{category}:{value}" for category, value in sorted(split_hashes.items()))
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


class RunWriter:
    """Writes files under one run directory and records their digests"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.outputs: Dict[str, str] = {}
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ReportError(f"Could not create run directory {self.out_dir}: {e}") from e

    def write(self, relative: str, content: Content):
        path = self.out_dir / relative
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            if isinstance(content, pd.DataFrame):
                content.to_csv(path, index=False, lineterminator="\n")
            elif isinstance(content, str):
                path.write_text(content if content.endswith("\n") else content + "\n", encoding="utf-8")
            else:
                with open(path, "w", encoding="utf-8") as file:
                    json.dump(_jsonable(content), file, indent=2, sort_keys=True)
                    file.write("\n")
        except OSError as e:
            raise ReportError(f"Could not write {path}: {e}") from e
        self.outputs[relative] = file_digest(path)


def _jsonable(value):
    if isinstance(value, Mapping):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(item) for item in value.tolist()]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def emit_run(results: RunResults, out_dir: Union[str, Path], command: str = "", config: Optional[Dict] = None,
             input_files: Iterable[Union[str, Path]] = (), extra: Optional[Mapping[str, Content]] = None,
             timings: Optional[Dict[str, float]] = None, warning_count: int = 0) -> RunManifest:
    """
    Write every result table and the manifest

    Args:
        results: Fit or cv results
        out_dir: Run directory (created; existing files are overwritten)
        command: Subcommand that produced the results
        config: Configuration echo
        input_files: Files whose digests are recorded
        extra: Additional outputs, relative path -> DataFrame (CSV), mapping (JSON) or str (text)
        timings: Wall-clock seconds per stage (kept out of every digest)
        warning_count: Warnings logged during the run

    Returns:
        The written RunManifest
    """
    from . import __version__

    writer = RunWriter(out_dir)
    if not results.predictions.empty:
        writer.write("predictions.csv", results.predictions)
    if results.records:
        frame = accuracy_frame(results.records)
        for (condition, category), cell in frame.groupby(["condition", "category"], sort=True):
            writer.write(f"accuracy/{condition}__{category}.csv", cell.reset_index(drop=True))
        writer.write("accuracy_mean.csv", accuracy_mean(results.records))
    for (condition, category), summary in sorted(results.summaries.items()):
        writer.write(f"posterior/{condition}__{category}_summary.csv", summary.to_frame())
    for (condition, category, repeat), trace in sorted(results.traces.items()):
        writer.write(f"traces/{condition}__{category}__r{repeat}.csv", trace)
    if results.restarts:
        writer.write("restarts.json", {"restarts": results.restarts})
    for relative, content in sorted((extra or {}).items()):
        writer.write(relative, content)

    echo = dict(config or {})
    if results.split_hashes:
        echo["split_hashes"] = dict(results.split_hashes)
    manifest = RunManifest(
        version=__version__,
        command=command,
        config=echo,
        input_digests={str(path): file_digest(path) for path in sorted({str(p) for p in input_files})},
        split_hash=combined_split_hash(results.split_hashes),
        outputs=dict(sorted(writer.outputs.items())),
        timings=dict(timings or {}),
        warning_count=warning_count,
    )
    path = writer.out_dir / MANIFEST_NAME
    try:
        with open(path, "w", encoding="utf-8") as file:
            json.dump(_jsonable(manifest.to_dict()), file, indent=2, sort_keys=True)
            file.write("\n")
    except OSError as e:
        raise ReportError(f"Could not write {path}: {e}") from e
    logger.info(f"Wrote {len(manifest.outputs)} output files and {MANIFEST_NAME} to {writer.out_dir}")
    return manifest


def read_manifest(out_dir: Union[str, Path]) -> Dict:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        raise ReportError(f"No {MANIFEST_NAME} in {out_dir}")
    try:
        with open(path, "r", encoding="utf-8") as file:
            return json.load(file)
    except (OSError, json.JSONDecodeError) as e:
        raise ReportError(f"Could not read {path}: {e}") from e


def verify_run(out_dir: Union[str, Path]) -> Dict:
    """
    Recompute every output digest

    Returns:
        The manifest

    Raises:
        ReportError: On a missing file or a digest mismatch
    """
    manifest = read_manifest(out_dir)
    for relative, expected in manifest.get("outputs", {}).items():
        path = Path(out_dir) / relative
        if not path.exists():
            raise ReportError(f"Output {relative} listed in the manifest is missing from {out_dir}")
        actual = file_digest(path)
        if actual != expected:
            raise ReportError(f"Digest mismatch for {relative}: manifest {expected[:12]}, file {actual[:12]}")
    return manifest


# ==============================================================================
# --- READING A PRIOR RUN ---
# ==============================================================================

def _split_cell(stem: str, suffix: str = ""):
    if suffix and stem.endswith(suffix):
        stem = stem[: -len(suffix)]
    parts = stem.split("__")
    if len(parts) < 2:
        raise ReportError(f"Unexpected output file name '{stem}'")
    return parts


def load_run(run_dir: Union[str, Path]) -> RunResults:
    """Read summaries, traces, accuracy records and predictions of a prior fit or cv run"""
    run = Path(run_dir)
    manifest = read_manifest(run)
    results = RunResults()
    results.split_hashes = dict(manifest.get("config", {}).get("split_hashes", {}))

    for path in sorted((run / "posterior").glob("*_summary.csv")):
        condition, category = _split_cell(path.stem, "_summary")[:2]
        results.summaries[(condition, category)] = PosteriorSummary.from_frame(pd.read_csv(path))
    for path in sorted((run / "traces").glob("*.csv")):
        condition, category, repeat = _split_cell(path.stem)[:3]
        results.traces[(condition, category, int(repeat.lstrip("r")))] = pd.read_csv(path)
    for path in sorted((run / "accuracy").glob("*.csv")):
        frame = pd.read_csv(path, dtype={"condition": str, "category": str, "indicator": str})
        for row in frame.itertuples(index=False):
            results.records.append(AccuracyRecord(
                condition=row.condition, category=row.category, indicator=row.indicator,
                repeat_index=int(row.repeat), r=float(row.r), n_test=int(row.n_test), method=row.method,
            ))
    if (run / "predictions.csv").exists():
        results.predictions = pd.read_csv(run / "predictions.csv")

    if not results.summaries:
        raise ReportError(f"Run directory {run} has no posterior summaries to analyze")
    logger.info(f"Loaded run {run}: {len(results.summaries)} summaries, {len(results.traces)} traces, "
                f"{len(results.records)} accuracy records")
    return results
