"""Deterministic on-disk persistence for pilot runs and reduced bases.

Arrays are stored as individual ``.npy`` files (their bytes depend only on
shape, dtype, and contents, never on timestamps), metadata as canonical JSON
with sorted keys, so re-saving identical data rewrites identical bytes.
Caches are keyed by a hash of the pilot-scoped configuration; a mismatch
means the cached artifacts belong to a different study and must be rebuilt.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .control_variates import CVSetup, ReducedBasisPair, prepare_control_variates
from .errors import DataError
from .linalg import LeastSquaresOperator
from .mlmc import PilotLevel, PilotRun, _level_stats
from .models import LevelHierarchy

CACHE_SCHEMA = 1

_META = "meta.json"
_TIMINGS = "timings.json"


def canonical_json(obj) -> str:
    """Key-sorted, whitespace-free JSON; the hashing and file format basis."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_sha(obj) -> str:
    """Hex digest identifying a configuration object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _write_text(path: Path, text: str) -> None:
    path.write_text(text + "\n", encoding="utf-8")


def _save_array(path: Path, a: np.ndarray) -> None:
    np.save(path, np.ascontiguousarray(a), allow_pickle=False)


def _load_array(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"cache file missing: {path}")
    return np.load(path, allow_pickle=False)


def save_pilot_cache(cache_dir: Path, pilot: PilotRun, pilot_key: str) -> None:
    """Persist the pilot's inputs, per-level snapshots, and identity key."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema": CACHE_SCHEMA,
        "pilot_key": pilot_key,
        "master_seed": pilot.master_seed,
        "n_pilot": pilot.n_pilot,
        "n_levels": pilot.n_levels,
    }
    _write_text(cache_dir / _META, canonical_json(meta))
    _save_array(cache_dir / "xi.npy", pilot.xi)
    for data in pilot.levels:
        tag = f"level{data.level}"
        _save_array(cache_dir / f"{tag}_y.npy", data.y)
        _save_array(cache_dir / f"{tag}_qoi_fine.npy", data.qoi_fine)
        _save_array(cache_dir / f"{tag}_q_fine.npy", data.q_fine)
        if data.level > 0:
            _save_array(cache_dir / f"{tag}_qoi_coarse.npy", data.qoi_coarse)
            _save_array(cache_dir / f"{tag}_q_coarse.npy", data.q_coarse)


def save_measured_timings(cache_dir: Path, pilot: PilotRun) -> None:
    """Persist measured seconds per solve (measured cost mode only; these
    values are timing data, not reproducible from config and seed)."""
    cache_dir = Path(cache_dir)
    seconds = {
        str(s.level): [s.seconds_fine, s.seconds_coarse] for s in pilot.stats
    }
    _write_text(cache_dir / _TIMINGS, canonical_json(seconds))


def _read_meta(cache_dir: Path) -> dict:
    path = cache_dir / _META
    if not path.is_file():
        raise DataError(
            f"no pilot cache at {cache_dir}: run the pilot command first"
        )
    meta = json.loads(path.read_text(encoding="utf-8"))
    if meta.get("schema") != CACHE_SCHEMA:
        raise DataError(f"unsupported cache schema {meta.get('schema')!r}")
    return meta


def load_pilot_cache(
    cache_dir: Path, hierarchy: LevelHierarchy, pilot_key: str
) -> PilotRun:
    """Rebuild a PilotRun from disk, checking the identity key.

    Statistics are recomputed from the arrays with the same reductions the
    live pilot uses; measured timings are restored when present.
    """
    cache_dir = Path(cache_dir)
    meta = _read_meta(cache_dir)
    if meta["pilot_key"] != pilot_key:
        raise DataError(
            "pilot cache was built from a different configuration: "
            "re-run the pilot command"
        )
    if meta["n_levels"] != hierarchy.n_levels:
        raise DataError(
            f"pilot cache has {meta['n_levels']} levels, hierarchy "
            f"{hierarchy.n_levels}"
        )
    timings_path = cache_dir / _TIMINGS
    seconds = {}
    if timings_path.is_file():
        seconds = json.loads(timings_path.read_text(encoding="utf-8"))
    xi = _load_array(cache_dir / "xi.npy")
    levels: list[PilotLevel] = []
    run = PilotRun(
        master_seed=int(meta["master_seed"]),
        n_pilot=int(meta["n_pilot"]),
        xi=xi,
        levels=levels,
    )
    for ell in range(meta["n_levels"]):
        tag = f"level{ell}"
        data = PilotLevel(
            level=ell,
            y=_load_array(cache_dir / f"{tag}_y.npy"),
            qoi_fine=_load_array(cache_dir / f"{tag}_qoi_fine.npy"),
            q_fine=_load_array(cache_dir / f"{tag}_q_fine.npy"),
        )
        if ell > 0:
            data.qoi_coarse = _load_array(cache_dir / f"{tag}_qoi_coarse.npy")
            data.q_coarse = _load_array(cache_dir / f"{tag}_q_coarse.npy")
        levels.append(data)
        sec = seconds.get(str(ell), (0.0, 0.0))
        run.stats.append(
            _level_stats(hierarchy, ell, data, float(sec[0]), float(sec[1]))
        )
    return run


def save_bases(bases_dir: Path, setup: CVSetup) -> None:
    """Persist the reduced bases (selected columns and residuals) per level."""
    bases_dir = Path(bases_dir)
    bases_dir.mkdir(parents=True, exist_ok=True)
    index = {"schema": CACHE_SCHEMA, "levels": {}}
    for basis in setup.bases:
        if basis is None:
            continue
        tag = f"level{basis.level}"
        index["levels"][str(basis.level)] = {
            "rank": basis.rank,
            "id_residual": basis.id_residual,
        }
        _save_array(bases_dir / f"{tag}_coarse.npy", basis.coarse_basis)
        _save_array(bases_dir / f"{tag}_fine.npy", basis.fine_basis)
        _save_array(
            bases_dir / f"{tag}_selected.npy",
            basis.selected_pilot_indices.astype(np.int64),
        )
        _save_array(bases_dir / f"{tag}_inputs.npy", basis.selected_inputs)
    _write_text(bases_dir / _META, canonical_json(index))


def load_bases(bases_dir: Path) -> dict[int, ReducedBasisPair]:
    """Rebuild persisted bases; the least-squares factorization is recomputed
    from the stored coarse basis."""
    bases_dir = Path(bases_dir)
    path = bases_dir / _META
    if not path.is_file():
        raise DataError(
            f"no basis cache at {bases_dir}: run the pilot command first"
        )
    index = json.loads(path.read_text(encoding="utf-8"))
    if index.get("schema") != CACHE_SCHEMA:
        raise DataError(f"unsupported cache schema {index.get('schema')!r}")
    out: dict[int, ReducedBasisPair] = {}
    for key, entry in index["levels"].items():
        ell = int(key)
        tag = f"level{ell}"
        coarse = _load_array(bases_dir / f"{tag}_coarse.npy")
        out[ell] = ReducedBasisPair(
            level=ell,
            rank=int(entry["rank"]),
            coarse_basis=coarse,
            fine_basis=_load_array(bases_dir / f"{tag}_fine.npy"),
            selected_pilot_indices=_load_array(bases_dir / f"{tag}_selected.npy"),
            selected_inputs=_load_array(bases_dir / f"{tag}_inputs.npy"),
            id_residual=float(entry["id_residual"]),
            solver=LeastSquaresOperator(coarse),
        )
    return out


def load_setup(
    bases_dir: Path,
    hierarchy: LevelHierarchy,
    pilot: PilotRun,
    *,
    rank=None,
    tol: float | None = None,
    s2: float,
    force_rho2_zero: bool = False,
) -> CVSetup:
    """Recreate the control-variate setup against cached bases.

    The per-level parameters are recomputed from the pilot arrays (they are
    pure functions of them); the persisted bases are cross-checked against
    the freshly derived ones so a stale cache cannot silently change the
    estimator.
    """
    stored = load_bases(bases_dir)
    setup = prepare_control_variates(
        hierarchy,
        pilot,
        rank=rank,
        tol=tol,
        s2=s2,
        force_rho2_zero=force_rho2_zero,
    )
    for ell in range(1, hierarchy.n_levels):
        fresh = setup.bases[ell]
        kept = stored.get(ell)
        if (fresh is None) != (kept is None):
            raise DataError(
                f"basis cache disagrees with pilot at level {ell}: re-run pilot"
            )
        if fresh is not None and (
            fresh.rank != kept.rank
            or not np.array_equal(fresh.selected_pilot_indices, kept.selected_pilot_indices)
        ):
            raise DataError(
                f"basis cache is stale at level {ell}: re-run the pilot command"
            )
    return setup
