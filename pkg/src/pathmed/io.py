"""File formats: dataset CSV, chain archives, reports and config files.

A chain archive is a directory holding one CSV file per parameter block and a
``manifest.json`` describing dimensions, labels and sampler settings. Floats
are written with 17 significant digits so a round trip is exact. All writers
go through a temporary path followed by an atomic rename.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import InputError
from .graph import build_pathway_graph, read_reactions
from .model import Dataset, Hyperparameters
from .sampler import ChainOutput

__all__ = [
    "ARCHIVE_FORMAT",
    "ARCHIVE_VERSION",
    "TableData",
    "read_table",
    "load_inputs",
    "write_chain",
    "read_chain",
    "write_json",
    "write_csv",
    "read_config",
    "json_dumps",
]

ARCHIVE_FORMAT = "pathmed-chain"
ARCHIVE_VERSION = 1
FLOAT_FMT = "%.17g"

_BLOCKS = ("psi", "phi", "delta", "alpha", "alpha_Z", "gamma", "sigma_k2", "beta", "beta_Z", "theta", "sigma2", "rho")
_INT_BLOCKS = {"psi", "phi", "delta"}


# ---------------------------------------------------------------------------
# generic writers


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _clean(obj):
    """Recursively convert numpy types to JSON-native ones; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def json_dumps(obj) -> str:
    """Deterministic JSON text (sorted keys, fixed indentation, trailing newline)."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    _atomic_write_text(path, json_dumps(obj))


def _fmt_cell(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if not math.isfinite(v) else FLOAT_FMT % v
    return v


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    """Write dict rows as CSV; missing or non-finite values are left empty."""
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt_cell(r.get(c, "")) for c in columns])
    _atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# dataset CSV


@dataclass(frozen=True, eq=False)
class TableData:
    """Parsed dataset CSV.

    Columns are ``id, exposure, outcome``, then covariates, then metabolites.
    """

    ids: tuple
    exposure: np.ndarray
    outcome: np.ndarray
    covariate_names: tuple
    covariates: np.ndarray  # (n, p) without intercept
    metabolite_names: tuple
    metabolites: np.ndarray  # (n, K)

    def dataset(self, M=None) -> Dataset:
        return Dataset.from_arrays(
            self.exposure,
            self.outcome,
            self.metabolites if M is None else M,
            self.covariates if self.covariates.shape[1] else None,
        )


def _parse_column(name, values, lineno0):
    out = np.empty(len(values))
    for i, v in enumerate(values):
        if v == "":
            raise InputError(f"column {name!r}, data row {i + lineno0}: missing value")
        try:
            out[i] = float(v)
        except ValueError:
            raise InputError(f"column {name!r}, data row {i + lineno0}: not a number: {v!r}") from None
        if not math.isfinite(out[i]):
            raise InputError(f"column {name!r}, data row {i + lineno0}: missing or non-finite value")
    return out


def read_table(path, pathway_metabolites=None, covariates=None) -> TableData:
    """Read a dataset CSV.

    Parameters
    ----------
    path : path-like
    pathway_metabolites : collection of str, optional
        Metabolite ids referenced by the pathway file. Without an explicit
        ``covariates`` list, the metabolite block starts at the first column
        whose name is one of these ids.
    covariates : sequence of str, optional
        Explicit covariate column names; every other non-reserved column is
        then a metabolite.
    """
    try:
        with open(path, encoding="utf-8-sig", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if header[:3] != ["id", "exposure", "outcome"]:
        raise InputError(f"{path}: the first three columns must be id, exposure, outcome; got {header[:3]}")
    if len(set(header)) != len(header):
        dup = sorted({h for h in header if header.count(h) > 1})
        raise InputError(f"{path}: duplicate column names {dup}")
    for i, r in enumerate(body, 2):
        if len(r) != len(header):
            raise InputError(f"{path}: line {i} has {len(r)} fields, expected {len(header)}")
    rest = header[3:]
    if covariates is not None:
        covariates = list(covariates)
        unknown = [c for c in covariates if c not in rest]
        if unknown:
            raise InputError(f"{path}: covariate columns not found: {unknown}")
        cov_names = [c for c in rest if c in set(covariates)]
        met_names = [c for c in rest if c not in set(covariates)]
    else:
        known = set(pathway_metabolites or ())
        start = next((i for i, c in enumerate(rest) if c in known), len(rest) if known else 0)
        cov_names, met_names = rest[:start], rest[start:]
    if not met_names:
        raise InputError(f"{path}: no metabolite columns found")
    cols = {h: [r[j].strip() for r in body] for j, h in enumerate(header)}
    ids = tuple(cols["id"])
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate subject ids")
    col = lambda name: _parse_column(name, cols[name], 2)  # noqa: E731
    n = len(body)
    C = np.column_stack([col(c) for c in cov_names]) if cov_names else np.zeros((n, 0))
    M = np.column_stack([col(c) for c in met_names])
    return TableData(ids, col("exposure"), col("outcome"), tuple(cov_names), C, tuple(met_names), M)


def load_inputs(data_path, pathways_path, covariates=None, star_from: str = "raw"):
    """Read a dataset CSV and pathway file and check they agree.

    Returns
    -------
    table : TableData
    graph : PathwayGraph
        Built over the dataset's metabolite columns in file order.
    unmapped : list of str
        Metabolite columns that belong to no pathway.
    """
    reactions = read_reactions(pathways_path)
    if not reactions:
        raise InputError(f"{pathways_path}: no reactions")
    referenced = {m for r in reactions for m in (*r.substrates, *r.products)}
    table = read_table(data_path, referenced, covariates)
    missing = sorted(referenced - set(table.metabolite_names))
    if missing:
        raise InputError(f"pathway file references metabolites with no data column: {missing}")
    graph = build_pathway_graph(reactions, table.metabolite_names, star_from=star_from)
    covered = set()
    for idx in graph.membership.values():
        covered.update(idx.tolist())
    unmapped = [m for k, m in enumerate(graph.metabolites) if k not in covered]
    return table, graph, unmapped


# ---------------------------------------------------------------------------
# chain archive


def _columns(chain: ChainOutput, name: str) -> list[str]:
    mets, pids = chain.metabolites, chain.pathway_ids
    q = chain.beta_Z.shape[1]
    zcols = [f"z{j}" for j in range(q)]
    if name in ("psi", "phi", "alpha", "sigma_k2"):
        return list(mets)
    if name in ("delta", "theta"):
        return list(pids)
    if name == "alpha_Z":
        return [f"{m}:{z}" for m in mets for z in zcols]
    if name == "gamma":
        return [f"{mets[i]}->{mets[j]}" for i, j in chain.edges.tolist()]
    if name == "beta_Z":
        return zcols
    if name in ("beta", "sigma2"):
        return [name]
    if name == "rho":
        return ["psi0", "psi1", "phi0", "phi1"]
    raise KeyError(name)


def _block_matrix(chain: ChainOutput, name: str) -> np.ndarray:
    a = getattr(chain, name)
    return a.reshape(a.shape[0], int(np.prod(a.shape[1:], dtype=np.int64)))


def _matrix_csv(header, M, integer: bool) -> str:
    lines = [",".join(_quote(h) for h in header) + "\n"]
    fmt = "%d" if integer else FLOAT_FMT
    for row in M:
        lines.append(",".join(fmt % v for v in row.tolist()) + "\n")
    return "".join(lines)


def _quote(s: str) -> str:
    if any(c in s for c in ',"\n'):
        return '"' + s.replace('"', '""') + '"'
    return s


def write_chain(path, chain: ChainOutput, metadata: dict | None = None) -> None:
    """Write a chain archive directory, replacing any existing one atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        files = {}
        for name in _BLOCKS:
            M = _block_matrix(chain, name)
            fname = f"{name}.csv"
            (tmp / fname).write_text(_matrix_csv(_columns(chain, name), M, name in _INT_BLOCKS), encoding="utf-8")
            files[name] = fname
        rows = ["draw,pathway,metabolite,value\n"]
        for s in range(chain.n_samples):
            for t in range(chain.w_ptr[s], chain.w_ptr[s + 1]):
                rows.append(
                    f"{s},{_quote(chain.pathway_ids[chain.w_pathway[t]])},"
                    f"{_quote(chain.metabolites[chain.w_metabolite[t]])},{FLOAT_FMT % chain.w_value[t]}\n"
                )
        (tmp / "weights.csv").write_text("".join(rows), encoding="utf-8")
        files["weights"] = "weights.csv"
        manifest = {
            "format": ARCHIVE_FORMAT,
            "version": ARCHIVE_VERSION,
            "n_samples": chain.n_samples,
            "n_iter": chain.n_iter,
            "n_burnin": chain.n_burnin,
            "thin": chain.thin,
            "metabolites": list(chain.metabolites),
            "pathway_ids": list(chain.pathway_ids),
            "membership": {p: [chain.metabolites[k] for k in idx.tolist()] for p, idx in zip(chain.pathway_ids, chain.membership)},
            "edges": chain.edges.tolist(),
            "n_covariates": int(chain.beta_Z.shape[1]),
            "hyperparameters": chain.hyper.to_dict(),
            "accept": {k: list(v) for k, v in chain.accept.items()},
            "xi": chain.xi,
            "n_degenerate": chain.n_degenerate,
            "files": files,
            "metadata": metadata or {},
        }
        (tmp / "manifest.json").write_text(json_dumps(manifest), encoding="utf-8")
        if path.exists():
            old = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}.old."))
            os.replace(path, old / "chain")
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _read_matrix(path, ncol: int, integer: bool, n_rows: int) -> np.ndarray:
    dtype = np.int8 if integer else float
    if n_rows == 0:
        return np.zeros((0, ncol), dtype=dtype)
    a = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64 if integer else float, ndmin=2)
    if a.shape != (n_rows, ncol):
        raise InputError(f"{path}: expected shape {(n_rows, ncol)}, found {a.shape}")
    return a.astype(dtype)


def read_chain(path) -> tuple[ChainOutput, dict]:
    """Load a chain archive written by :func:`write_chain`.

    Returns the chain and the manifest's ``metadata`` dictionary.
    """
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise InputError(f"{path}: not a chain archive (manifest.json missing)")
    try:
        man = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{mpath}: invalid JSON ({exc.msg})") from None
    if man.get("format") != ARCHIVE_FORMAT:
        raise InputError(f"{path}: unrecognized archive format {man.get('format')!r}")
    if man.get("version") != ARCHIVE_VERSION:
        raise InputError(f"{path}: unsupported archive version {man.get('version')!r}")
    S = int(man["n_samples"])
    K = len(man["metabolites"])
    L = len(man["pathway_ids"])
    q = int(man["n_covariates"])
    edges = np.array(man["edges"], dtype=np.int64).reshape(-1, 2)
    E = len(edges)
    widths = {
        "psi": K, "phi": K, "delta": L, "alpha": K, "alpha_Z": K * q, "gamma": E,
        "sigma_k2": K, "beta": 1, "beta_Z": q, "theta": L, "sigma2": 1, "rho": 4,
    }
    blocks = {}
    for name in _BLOCKS:
        f = path / man["files"][name]
        if not f.is_file():
            raise InputError(f"{path}: block file {f.name} missing")
        blocks[name] = _read_matrix(f, widths[name], name in _INT_BLOCKS, S)
    blocks["alpha_Z"] = blocks["alpha_Z"].reshape(S, K, q)
    blocks["beta"] = blocks["beta"][:, 0]
    blocks["sigma2"] = blocks["sigma2"][:, 0]
    pidx = {p: i for i, p in enumerate(man["pathway_ids"])}
    midx = {m: i for i, m in enumerate(man["metabolites"])}
    draws, wl, wk, wv = [], [], [], []
    with open(path / man["files"]["weights"], encoding="utf-8", newline="") as fh:
        rd = csv.reader(fh)
        next(rd, None)
        for r in rd:
            draws.append(int(r[0]))
            wl.append(pidx[r[1]])
            wk.append(midx[r[2]])
            wv.append(float(r[3]))
    draws = np.array(draws, dtype=np.int64)
    w_ptr = np.concatenate([[0], np.cumsum(np.bincount(draws, minlength=S))]).astype(np.int64) if S else np.zeros(1, np.int64)
    chain = ChainOutput(
        metabolites=tuple(man["metabolites"]),
        pathway_ids=tuple(man["pathway_ids"]),
        membership=tuple(np.array([midx[m] for m in man["membership"][p]], dtype=np.int64) for p in man["pathway_ids"]),
        edges=edges,
        w_ptr=w_ptr,
        w_pathway=np.array(wl, dtype=np.int64),
        w_metabolite=np.array(wk, dtype=np.int64),
        w_value=np.array(wv, dtype=float),
        accept={k: tuple(v) for k, v in man["accept"].items()},
        xi={k: float(v) for k, v in man["xi"].items()},
        n_degenerate=int(man["n_degenerate"]),
        hyper=Hyperparameters(**man["hyperparameters"]),
        n_iter=int(man["n_iter"]),
        n_burnin=int(man["n_burnin"]),
        thin=int(man["thin"]),
        **blocks,
    )
    return chain, man.get("metadata", {})


# ---------------------------------------------------------------------------
# config files


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment.

    Keys use the long CLI flag names with dashes or underscores. Values stay
    strings; the CLI converts them with the same parsers as its flags.
    """
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise InputError(f"{path}:{lineno}: empty key")
        out[k.replace("-", "_")] = v
    return out
