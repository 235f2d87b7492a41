"""Model files (triplet text and JSON manifest) and result documents."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import IoError, ParseError, UnsupportedFormat
from .model import GeneratorModel, build_model

MANIFEST_FORMAT = "qmatrix-triplets-v1"


def _parse_rate(tok: str, line: int | None) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"rate {tok!r} is not a decimal number", line) from None
    if not math.isfinite(v):
        raise ParseError(f"rate {tok!r} is not finite", line)
    return v


def _parse_index(tok: str, line: int | None) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"state index {tok!r} is not an integer", line) from None


def parse_triplets(text: str) -> list[tuple[int, int, float]]:
    """Parse ``<i> <j> <rate>`` lines; ``#`` starts a comment line."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"expected 3 fields, got {len(parts)}", lineno)
        entries.append((_parse_index(parts[0], lineno), _parse_index(parts[1], lineno), _parse_rate(parts[2], lineno)))
    return entries


def _read(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc


def load_model(path) -> GeneratorModel:
    """Load a triplet file, or a JSON manifest wrapping one (inline or by path)."""
    path = Path(path)
    text = _read(path)
    if path.suffix != ".json" and not text.lstrip().startswith("{"):
        return build_model(parse_triplets(text))
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not valid JSON: {exc.msg}", exc.lineno) from None
    if not isinstance(manifest, dict) or manifest.get("format") != MANIFEST_FORMAT:
        got = manifest.get("format") if isinstance(manifest, dict) else None
        raise UnsupportedFormat(f"manifest format {got!r}; expected {MANIFEST_FORMAT!r}")
    entries = manifest.get("entries")
    if isinstance(entries, str):
        triplets = parse_triplets(_read(path.parent / entries))
    elif isinstance(entries, list):
        triplets = []
        for n, e in enumerate(entries):
            if not isinstance(e, (list, tuple)) or len(e) != 3:
                raise ParseError(f"manifest entry {n} is not an [i, j, rate] triple")
            triplets.append((_parse_index(str(e[0]), None), _parse_index(str(e[1]), None), _parse_rate(str(e[2]), None)))
    else:
        raise ParseError("manifest needs an 'entries' path or list")
    return build_model(triplets, n_states=manifest.get("states"))


def save_model(model: GeneratorModel, path) -> None:
    try:
        Path(path).write_text(model.to_text())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_result(doc: dict) -> str:
    """Canonical JSON: sorted keys, shortest round-trip floats, non-finite as null."""
    return json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_result(doc: dict, path) -> None:
    try:
        Path(path).write_text(dumps_result(doc))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def load_vector(path) -> np.ndarray:
    """A probability vector from JSON (list, or object with key ``u``) or one value per line."""
    text = _read(Path(path))
    if text.lstrip().startswith(("[", "{")):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"not valid JSON: {exc.msg}", exc.lineno) from None
        if isinstance(data, dict):
            data = data.get("u", data.get("outputs", {}).get("u"))
        if not isinstance(data, list):
            raise ParseError("expected a JSON list of numbers")
        return np.asarray([_parse_rate(str(v), None) for v in data])
    vals = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            vals.append(_parse_rate(line.split(",")[-1], lineno))
    return np.asarray(vals)


def result_schema() -> dict:
    """The JSON schema that every result document satisfies."""
    from importlib import resources

    return json.loads(resources.files("qsdlab").joinpath("schema/qsdlab-result-v1.json").read_text())
