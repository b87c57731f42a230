"""Artifact persistence: JSON schemas for games, monitors, reductions and
certificates, binary formats for kernels and policies, SHA-256 provenance
chaining, and the project configuration."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from sgsynth.abstraction import FiniteAbstraction, Grid, TransitionKernel
from sgsynth.dfa import Dfa, LabelMap
from sgsynth.errors import ArtifactMismatchError, ConfigurationError
from sgsynth.model import ReducedOrderGame, SlopeNonlinearity, StochasticGame
from sgsynth.relation import GammaTerms, RelationCertificate
from sgsynth.synthesis import PolicyTable

KERNEL_MAGIC = b"GDSG"
POLICY_MAGIC = b"GPOL"
FORMAT_VERSION = 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def provenance(**paths) -> dict:
    return {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in paths.items()}


def check_provenance(recorded: dict, base: Path):
    """Re-hash every recorded input; mismatch means stale artifacts."""
    for name, entry in recorded.items():
        p = Path(entry["path"])
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise ArtifactMismatchError(f"input {name} missing: {p}")
        actual = sha256_file(p)
        if actual != entry["sha256"]:
            raise ArtifactMismatchError(
                f"input {name} changed since this artifact was produced "
                f"({actual[:12]} != {entry['sha256'][:12]}); regenerate upstream stages"
            )


def _json_default(o):
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def _num(x):
    """JSON-safe numbers: +-inf as strings."""
    if isinstance(x, float) and not np.isfinite(x):
        return "inf" if x > 0 else "-inf"
    return x


def _unnum(x) -> float:
    if x == "inf":
        return np.inf
    if x == "-inf":
        return -np.inf
    return float(x)


def matrix_to_json(m) -> list:
    return np.asarray(m, dtype=float).tolist()


# ---------------------------------------------------------------------------
# Games and monitors


def game_to_json(game: StochasticGame) -> dict:
    phi = game.phi
    return {
        "A": matrix_to_json(game.A), "B": matrix_to_json(game.B), "C": matrix_to_json(game.C),
        "D": matrix_to_json(game.D), "E": matrix_to_json(game.E), "F": matrix_to_json(game.F),
        "R": matrix_to_json(game.R),
        "nonlinearity": {"kind": phi.kind, "param": phi.param,
                         "b_lower": phi.b_lower, "b_upper": phi.b_upper},
        "u_polytope": {"A_u": matrix_to_json(game.u_poly_A), "b_u": game.u_poly_b.tolist()},
        "w_box": {"lo": game.w_lo.tolist(), "hi": game.w_hi.tolist()},
        "x0_set": [list(x) for x in game.x0_set],
    }


def game_from_json(doc: dict) -> StochasticGame:
    nl = doc.get("nonlinearity", {"kind": "zero"})
    kind = nl.get("kind", "zero")
    if kind not in SlopeNonlinearity._BUILTINS:
        raise ConfigurationError(
            f"nonlinearity kind {kind!r} cannot be loaded from JSON; use the Python API for custom kinds"
        )
    phi = SlopeNonlinearity(kind=kind, param=float(nl.get("param", 1.0)))
    up = doc["u_polytope"]
    if "A_u" in up:
        Au, bu = up["A_u"], up["b_u"]
    else:
        lo = np.asarray(up["box_lo"], dtype=float).ravel()
        hi = np.asarray(up["box_hi"], dtype=float).ravel()
        m = lo.shape[0]
        Au = np.vstack([np.eye(m), -np.eye(m)]).tolist()
        bu = np.concatenate([hi, -lo]).tolist()
    return StochasticGame(
        A=doc["A"], B=doc["B"], C=doc["C"], D=doc["D"], E=doc["E"], F=doc["F"], R=doc["R"],
        phi=phi, u_poly_A=Au, u_poly_b=bu,
        w_lo=doc["w_box"]["lo"], w_hi=doc["w_box"]["hi"],
        x0_set=tuple(doc.get("x0_set", [])),
    )


def monitor_from_json(doc: dict) -> tuple[Dfa, LabelMap]:
    dfa = Dfa.from_transitions(
        n_states=int(doc["states"]),
        initial=int(doc["initial"]),
        alphabet=[str(s) for s in doc["alphabet"]],
        transitions=[(int(q), str(s), int(q2)) for q, s, q2 in doc["transitions"]],
        accepting=[int(q) for q in doc["accepting"]],
    )
    labels = doc["labels"]
    label_map = LabelMap(
        box_lo=[[_unnum(v) for v in r["box_lo"]] for r in labels],
        box_hi=[[_unnum(v) for v in r["box_hi"]] for r in labels],
        symbols=tuple(str(r["symbol"]) for r in labels),
        absorbing_symbol=str(doc["absorbing_symbol"]),
        alphabet=dfa.alphabet,
    )
    return dfa, label_map


def monitor_to_json(dfa: Dfa, label_map: LabelMap, notes: str = "") -> dict:
    transitions = [
        [q, dfa.alphabet[a], int(dfa.table[q, a])]
        for q in range(dfa.n_states)
        for a in range(len(dfa.alphabet))
    ]
    labels = [
        {"box_lo": [_num(float(v)) for v in label_map.box_lo[i]],
         "box_hi": [_num(float(v)) for v in label_map.box_hi[i]],
         "symbol": label_map.symbols[i]}
        for i in range(len(label_map.symbols))
    ]
    doc = {
        "states": dfa.n_states, "initial": dfa.initial,
        "accepting": sorted(dfa.accepting), "alphabet": list(dfa.alphabet),
        "transitions": transitions, "labels": labels,
        "absorbing_symbol": label_map.absorbing_symbol,
    }
    if notes:
        doc["notes"] = notes
    return doc


# ---------------------------------------------------------------------------
# Reduced-order model


def reduced_to_json(red: ReducedOrderGame, inputs: dict | None = None) -> dict:
    doc = {
        "artifact": "reduced_game",
        "P": matrix_to_json(red.P), "A_r": matrix_to_json(red.A_r), "B_r": matrix_to_json(red.B_r),
        "C_r": matrix_to_json(red.C_r), "D_r": matrix_to_json(red.D_r), "E_r": matrix_to_json(red.E_r),
        "F_r": matrix_to_json(red.F_r), "G": matrix_to_json(red.G), "Qm": matrix_to_json(red.Qm),
        "S": matrix_to_json(red.S),
        "R_r": None if red.R_r is None else matrix_to_json(red.R_r),
        "nonlinearity": {"kind": red.phi.kind, "param": red.phi.param},
    }
    if inputs:
        doc["inputs"] = inputs
    return doc


def reduced_from_json(doc: dict) -> ReducedOrderGame:
    nl = doc["nonlinearity"]
    phi = SlopeNonlinearity(kind=nl["kind"], param=float(nl.get("param", 1.0)))
    return ReducedOrderGame(
        P=doc["P"], A_r=doc["A_r"], B_r=doc["B_r"], C_r=doc["C_r"], D_r=doc["D_r"],
        E_r=doc["E_r"], F_r=doc["F_r"], G=doc["G"], Qm=doc["Qm"], S=doc["S"], phi=phi,
        R_r=doc.get("R_r"),
    )


# ---------------------------------------------------------------------------
# Kernel binary format ("GDSG")


def _write_varint(out: bytearray, value: int):
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _read_varint(buf: memoryview, pos: int) -> tuple[int, int]:
    shift, value = 0, 0
    while True:
        byte = buf[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7


def save_kernel(kernel: TransitionKernel, path):
    """GDSG container: magic, version, mode flag, dims, then a dense f64
    payload or per-row varint-delta sparse blocks with a truncation ledger."""
    with open(path, "wb") as f:
        mode = 0 if kernel.mode == "dense" else 1
        f.write(KERNEL_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, mode, 0))
        f.write(struct.pack("<QQQ", kernel.n_states, kernel.n_u, kernel.n_w))
        if mode == 0:
            f.write(np.ascontiguousarray(kernel.dense, dtype="<f8").tobytes())
        else:
            f.write(struct.pack("<d", kernel.threshold))
            rows = kernel.n_rows
            blob = bytearray()
            for r in range(rows):
                lo, hi = int(kernel.indptr[r]), int(kernel.indptr[r + 1])
                cols = kernel.indices[lo:hi]
                _write_varint(blob, hi - lo)
                prev = 0
                for c in cols:
                    _write_varint(blob, int(c) - prev)
                    prev = int(c)
            f.write(struct.pack("<Q", len(blob)))
            f.write(bytes(blob))
            f.write(np.ascontiguousarray(kernel.data, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(kernel.truncated, dtype="<f8").tobytes())


def load_kernel(path) -> TransitionKernel:
    raw = Path(path).read_bytes()
    if raw[:4] != KERNEL_MAGIC:
        raise ConfigurationError(f"{path} is not a kernel file")
    version, mode, _ = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported kernel format version {version}")
    n_states, n_u, n_w = struct.unpack_from("<QQQ", raw, 16)
    pos = 40
    kernel = TransitionKernel(n_states=int(n_states), n_u=int(n_u), n_w=int(n_w))
    if mode == 0:
        count = n_states * n_u * n_w * n_states
        kernel.dense = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(
            n_states, n_u, n_w, n_states
        ).copy()
    else:
        (kernel.threshold,) = struct.unpack_from("<d", raw, pos)
        pos += 8
        (blob_len,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        blob = memoryview(raw)[pos : pos + blob_len]
        pos += blob_len
        rows = int(n_states * n_u * n_w)
        counts = np.zeros(rows, dtype=np.int64)
        indices_list = []
        bpos = 0
        for r in range(rows):
            n, bpos = _read_varint(blob, bpos)
            counts[r] = n
            prev = 0
            row_cols = np.zeros(n, dtype=np.int64)
            for i in range(n):
                delta, bpos = _read_varint(blob, bpos)
                prev += delta
                row_cols[i] = prev
            indices_list.append(row_cols)
        kernel.indices = np.concatenate(indices_list) if indices_list else np.empty(0, dtype=np.int64)
        kernel.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        nnz = int(kernel.indptr[-1])
        kernel.data = np.frombuffer(raw, dtype="<f8", count=nnz, offset=pos).copy()
        pos += 8 * nnz
        kernel.truncated = np.frombuffer(raw, dtype="<f8", count=rows, offset=pos).copy()
    kernel.validate()
    return kernel


def grid_to_json(grid: Grid) -> dict:
    return {"lo": grid.lo.tolist(), "hi": grid.hi.tolist(), "eta": grid.eta.tolist()}


def grid_from_json(doc: dict) -> Grid:
    return Grid(lo=doc["lo"], hi=doc["hi"], eta=doc["eta"])


def abstraction_meta(abstraction: FiniteAbstraction) -> dict:
    return {
        "state_grid": grid_to_json(abstraction.grid),
        "u_grid": grid_to_json(abstraction.u_grid),
        "w_grid": grid_to_json(abstraction.w_grid),
        "u_prime_lo": None if abstraction.u_prime_lo is None else abstraction.u_prime_lo.tolist(),
        "u_prime_hi": None if abstraction.u_prime_hi is None else abstraction.u_prime_hi.tolist(),
        "output_matrix": None if abstraction.output_matrix is None else matrix_to_json(abstraction.output_matrix),
    }


def abstraction_from_meta(doc: dict, kernel: Optional[TransitionKernel] = None) -> FiniteAbstraction:
    return FiniteAbstraction(
        grid=grid_from_json(doc["state_grid"]),
        u_grid=grid_from_json(doc["u_grid"]),
        w_grid=grid_from_json(doc["w_grid"]),
        u_prime_lo=doc.get("u_prime_lo"),
        u_prime_hi=doc.get("u_prime_hi"),
        output_matrix=doc.get("output_matrix"),
        kernel=kernel,
    )


def save_abstraction(abstraction: FiniteAbstraction, bin_path, sidecar_path, inputs: dict | None = None):
    save_kernel(abstraction.kernel, bin_path)
    ledger = {}
    if abstraction.kernel.mode == "sparse":
        ledger = {
            "threshold": abstraction.kernel.threshold,
            "max_row_truncated": float(abstraction.kernel.truncated.max(initial=0.0)),
            "total_truncated": float(abstraction.kernel.truncated.sum()),
        }
    doc = {
        "artifact": "abstraction",
        **abstraction_meta(abstraction),
        "kernel_file": str(Path(bin_path).name),
        "kernel_sha256": sha256_file(bin_path),
        "kernel_mode": abstraction.kernel.mode,
        "truncation": ledger,
        "memory": abstraction.kernel.memory_report(),
        "R_r_used": None if abstraction.r_r_used is None else matrix_to_json(abstraction.r_r_used),
    }
    if inputs:
        doc["inputs"] = inputs
    dump_json(doc, sidecar_path)


def load_abstraction(sidecar_path, verify_inputs: bool = True) -> FiniteAbstraction:
    doc = load_json(sidecar_path)
    base = Path(sidecar_path).parent
    if verify_inputs and "inputs" in doc:
        check_provenance(doc["inputs"], base)
    bin_path = base / doc["kernel_file"]
    if sha256_file(bin_path) != doc["kernel_sha256"]:
        raise ArtifactMismatchError(f"kernel binary {bin_path} does not match its sidecar")
    kernel = load_kernel(bin_path)
    ab = abstraction_from_meta(doc, kernel)
    ab.r_r_used = None if doc.get("R_r_used") is None else np.asarray(doc["R_r_used"], dtype=float)
    return ab


# ---------------------------------------------------------------------------
# Certificates


def certificate_to_json(
    cert: RelationCertificate,
    abstraction: FiniteAbstraction | None = None,
    solver_meta: dict | None = None,
    verification: dict | None = None,
    inputs: dict | None = None,
    source: str = "solver",
) -> dict:
    doc = {
        "artifact": "certificate",
        "source": source,
        "M": matrix_to_json(cert.M),
        "eps": cert.eps,
        "delta": cert.delta,
        "K": matrix_to_json(cert.K),
        "L": matrix_to_json(cert.L),
        "R_tilde": matrix_to_json(cert.R_tilde),
        "kappa": cert.kappa,
        "M_w": matrix_to_json(cert.M_w),
        "eps_w": cert.eps_w,
        "gammas": cert.gammas.as_dict(),
        "tolerance": cert.tolerance,
    }
    if abstraction is not None:
        doc["abstraction"] = abstraction_meta(abstraction)
    if solver_meta:
        doc["solver"] = solver_meta
    if verification:
        doc["verification"] = verification
    if inputs:
        doc["inputs"] = inputs
    return doc


def certificate_from_json(doc: dict, lenient: bool = False) -> tuple[RelationCertificate, Optional[FiniteAbstraction]]:
    """Rebuild a certificate; ``lenient`` skips the budget invariant so a
    defective certificate can still be loaded for diagnosis."""
    g = doc["gammas"]
    cert = RelationCertificate(
        M=doc["M"], eps=float(doc["eps"]), delta=float(doc["delta"]),
        K=doc["K"], L=doc["L"], R_tilde=doc["R_tilde"], kappa=float(doc["kappa"]),
        M_w=doc["M_w"], eps_w=float(doc["eps_w"]),
        gammas=GammaTerms(g["gamma0"], g["gamma1"], g["gamma2"], g["gamma3"], g["gamma4"]),
        tolerance=np.inf if lenient else float(doc.get("tolerance", 1e-7)),
    )
    skeleton = abstraction_from_meta(doc["abstraction"]) if "abstraction" in doc else None
    return cert, skeleton


# ---------------------------------------------------------------------------
# Policy binary format ("GPOL")


def save_policy(policy: PolicyTable, path):
    with open(path, "wb") as f:
        f.write(POLICY_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        h, s, q = policy.choices.shape
        f.write(struct.pack("<QQQ", h, s, q))
        f.write(np.ascontiguousarray(policy.choices, dtype="<u4").tobytes())
        has_adv = policy.adversary is not None
        f.write(struct.pack("<I", 1 if has_adv else 0))
        if has_adv:
            f.write(np.ascontiguousarray(policy.adversary, dtype="<u4").tobytes())


def load_policy(path, problem: str) -> PolicyTable:
    raw = Path(path).read_bytes()
    if raw[:4] != POLICY_MAGIC:
        raise ConfigurationError(f"{path} is not a policy file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported policy format version {version}")
    h, s, q = struct.unpack_from("<QQQ", raw, 8)
    pos = 32
    count = h * s * q
    choices = np.frombuffer(raw, dtype="<u4", count=count, offset=pos).reshape(h, s, q).astype(np.int64)
    pos += 4 * count
    (has_adv,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    adversary = None
    if has_adv:
        adversary = np.frombuffer(raw, dtype="<u4", count=count, offset=pos).reshape(h, s, q).astype(np.int64)
    return PolicyTable(choices=choices, problem=problem, adversary=adversary)


# ---------------------------------------------------------------------------
# Project configuration


@dataclass
class ProjectConfig:
    """Single-file pipeline configuration; all paths resolve against the
    config file's directory so runs are relocatable."""

    base: Path
    raw: dict

    REQUIRED = ("game", "dfa", "abstraction", "relation", "synthesis", "simulation")

    @classmethod
    def load(cls, path) -> "ProjectConfig":
        path = Path(path)
        doc = load_json(path)
        cfg = cls(base=path.parent, raw=doc)
        cfg.validate()
        return cfg

    def validate(self):
        for key in ("game", "dfa"):
            if key not in self.raw:
                raise ConfigurationError(f"config is missing {key!r}")
            if not self.path(key).exists():
                raise ConfigurationError(f"config {key} file not found: {self.path(key)}")
        ab = self.raw.get("abstraction", {})
        for key in ("state_lo", "state_hi", "state_eta", "u_eta", "w_eta"):
            if key not in ab:
                raise ConfigurationError(f"abstraction block is missing {key!r}")
        rel = self.raw.get("relation", {})
        if not 0.0 <= float(rel.get("delta", 0.0)) < 1.0:
            raise ConfigurationError("relation delta must be in [0, 1)")
        if float(rel.get("eps_min", 0.05)) <= 0:
            raise ConfigurationError("eps_min must be positive")
        syn = self.raw.get("synthesis", {})
        if int(syn.get("horizon", 1)) < 1:
            raise ConfigurationError("horizon must be at least 1")
        if syn.get("problem", "satisfaction") not in ("satisfaction", "violation"):
            raise ConfigurationError("problem must be satisfaction or violation")
        sim = self.raw.get("simulation", {})
        if int(sim.get("runs", 1)) < 1:
            raise ConfigurationError("runs must be positive")

    def path(self, key: str) -> Path:
        p = Path(self.raw[key])
        return p if p.is_absolute() else self.base / p

    def block(self, name: str) -> dict:
        return self.raw.get(name, {})
