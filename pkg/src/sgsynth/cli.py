"""Pipeline command line: reduce, abstract, relate, check-relation,
synthesize, simulate, plot. Every stage writes a self-describing artifact
embedding the SHA-256 of its inputs and refuses to run on stale ones."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from sgsynth import artifacts as art
from sgsynth.abstraction import FiniteAbstraction, Grid, build_kernel
from sgsynth.errors import (
    ArtifactMismatchError,
    ConfigurationError,
    EmptyInteriorError,
    InfeasibleNoiseMismatch,
    NoInitialAbstractState,
    SgsynthError,
)
from sgsynth.model import reduce_model
from sgsynth.relation import check_lmi_conditions, compute_gammas, establish_relation, intersect_input_constraints
from sgsynth.runtime import simulate_closed_loop
from sgsynth.synthesis import guarantee_at, synthesize

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_MISMATCH = 3
EXIT_PARSE = 4


def _binom_se(rate: float, n: int) -> float:
    return float(np.sqrt(max(rate * (1.0 - rate), 0.0) / n)) if n else 0.0


def _outdir(args, cfg) -> Path:
    out = Path(args.out) if args.out else cfg.base / "out"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cached(out_path: Path, inputs: dict) -> bool:
    """True when the artifact exists and was produced from identical inputs."""
    if not out_path.exists():
        return False
    try:
        doc = art.load_json(out_path)
    except Exception:
        return False
    return doc.get("inputs") == inputs


def _load_reduction_matrices(cfg, game):
    block = cfg.block("reduction")
    s = game.A.shape[0]

    def mat(key, fallback=None):
        v = block.get(key)
        if v is None:
            return fallback
        if v == "identity":
            return np.eye(s)
        if v == "B":
            return game.B
        return np.asarray(v, dtype=float)

    P = mat("P", np.eye(s))
    return P, mat("B_r"), mat("A_r"), mat("E_r"), mat("D_r")


def _skeleton_from_config(cfg, red) -> FiniteAbstraction:
    ab = cfg.block("abstraction")
    game_doc = art.load_json(cfg.path("game"))
    w_box = game_doc["w_box"]
    return FiniteAbstraction(
        grid=Grid(lo=ab["state_lo"], hi=ab["state_hi"], eta=ab["state_eta"]),
        u_grid=Grid(lo=ab["u_lo"], hi=ab["u_hi"], eta=ab["u_eta"]),
        w_grid=Grid(lo=w_box["lo"], hi=w_box["hi"], eta=ab["w_eta"]),
        u_prime_lo=ab.get("u_prime_lo"),
        u_prime_hi=ab.get("u_prime_hi"),
        output_matrix=red.C_r,
    )


def cmd_reduce(args) -> int:
    cfg = art.ProjectConfig.load(args.config)
    out = _outdir(args, cfg)
    game = art.game_from_json(art.load_json(cfg.path("game")))
    inputs = art.provenance(game=cfg.path("game"))
    target = out / "reduced.json"
    if _cached(target, inputs):
        print(f"reduce: {target} is current; nothing to do")
        return EXIT_OK
    P, B_r, A_r, E_r, D_r = _load_reduction_matrices(cfg, game)
    red = reduce_model(game, P, B_r=B_r, A_r=A_r, E_r=E_r, D_r=D_r)
    red.check_matching(game)
    art.dump_json(art.reduced_to_json(red, inputs=inputs), target)
    print(f"reduce: wrote {target} (order {red.order})")
    return EXIT_OK


def cmd_relate(args) -> int:
    cfg = art.ProjectConfig.load(args.config)
    out = _outdir(args, cfg)
    game = art.game_from_json(art.load_json(cfg.path("game")))
    reduced_path = out / "reduced.json"
    red_doc = art.load_json(reduced_path)
    art.check_provenance(red_doc.get("inputs", {}), cfg.base)
    red = art.reduced_from_json(red_doc)
    skeleton = _skeleton_from_config(cfg, red)
    inputs = art.provenance(game=cfg.path("game"), reduced=reduced_path)
    target = out / "certificate.json"
    if _cached(target, inputs):
        print(f"relate: {target} is current; nothing to do")
        return EXIT_OK
    rel = cfg.block("relation")
    report: dict = {}
    try:
        found = establish_relation(
            game, red, skeleton,
            delta=float(rel.get("delta", 0.0)),
            eps_range=(float(rel.get("eps_min", 0.05)), float(rel.get("eps_max", 1.0))),
            M_w=None if rel.get("M_w") is None else np.asarray(rel["M_w"], dtype=float),
            eps_w=rel.get("eps_w"),
            n_eps=int(rel.get("n_eps", 24)),
            n_kappa=int(rel.get("n_kappa", 20)),
            R_tilde=None if rel.get("R_tilde") is None else np.asarray(rel["R_tilde"], dtype=float),
            report=report,
        )
    except (InfeasibleNoiseMismatch, EmptyInteriorError) as exc:
        print(f"relate: infeasible: {exc}")
        return EXIT_INFEASIBLE
    if found is None:
        mismatches = [a for a in report.get("attempts", []) if "mismatch" in a.get("outcome", "")]
        print("relate: no certificate found over the sample lattice")
        if mismatches:
            print(f"relate: {mismatches[0]['outcome']} (gamma2)")
        return EXIT_INFEASIBLE
    cert, red_n = found
    constraints = intersect_input_constraints(game, red_n, skeleton, cert.R_tilde)
    verification = check_lmi_conditions(
        game, red_n, cert.M, cert.K, cert.L, cert.eps, cert.delta,
        cert.gammas.total, tol=1e-7, constraints=constraints,
    )
    doc = art.certificate_to_json(
        cert, abstraction=skeleton,
        solver_meta={"lattice": [int(rel.get("n_eps", 24)), int(rel.get("n_kappa", 20))],
                     "attempts": len(report.get("attempts", []))},
        verification=verification, inputs=inputs,
    )
    doc["R_r"] = art.matrix_to_json(red_n.R_r)
    art.dump_json(doc, target)
    g = cert.gammas
    print(f"relate: certificate eps={cert.eps:.4f} delta={cert.delta} kappa_min={cert.kappa:.4f}")
    print(
        "relate: gamma breakdown "
        f"g0={g.g0:.5f} g1={g.g1:.5f} g2={g.g2:.5f} g3={g.g3:.5f} g4={g.g4:.5f} total={g.total:.5f}"
    )
    print(f"relate: wrote {target}")
    return EXIT_OK


def cmd_abstract(args) -> int:
    cfg = art.ProjectConfig.load(args.config)
    out = _outdir(args, cfg)
    reduced_path = out / "reduced.json"
    red_doc = art.load_json(reduced_path)
    art.check_provenance(red_doc.get("inputs", {}), cfg.base)
    red = art.reduced_from_json(red_doc)
    ab_cfg = cfg.block("abstraction")

    r_r = ab_cfg.get("R_r")
    prov = {"reduced": reduced_path}
    if r_r is None:
        cert_path = out / "certificate.json"
        if not cert_path.exists():
            print("abstract: no R_r in config and no certificate.json; run relate first or set abstraction.R_r")
            return EXIT_INFEASIBLE
        cert_doc = art.load_json(cert_path)
        r_r = cert_doc.get("R_r")
        if r_r is None:
            print("abstract: certificate carries no R_r")
            return EXIT_INFEASIBLE
        prov["certificate"] = cert_path
    inputs = art.provenance(game=cfg.path("game"), **prov)
    sidecar = out / "abstraction.json"
    if _cached(sidecar, inputs):
        print(f"abstract: {sidecar} is current; nothing to do")
        return EXIT_OK

    red = red.with_noise(np.asarray(r_r, dtype=float))
    skeleton = _skeleton_from_config(cfg, red)
    mode = ab_cfg.get("kernel_mode", "dense")
    kernel = build_kernel(red, skeleton, mode=mode, threshold=float(ab_cfg.get("threshold", 1e-12)))
    skeleton.kernel = kernel
    skeleton.r_r_used = red.R_r
    art.save_abstraction(skeleton, out / "kernel.bin", sidecar, inputs=inputs)
    mem = kernel.memory_report()
    print(
        f"abstract: {skeleton.n_states} states x {skeleton.u_points().shape[0]} inputs x "
        f"{skeleton.w_points().shape[0]} adversary inputs, {mode} kernel, "
        f"{mem['entries']} entries ({mem['bytes_f32'] / 1e9:.3g} GB at 4 B, {mem['bytes_f64'] / 1e9:.3g} GB at 8 B)"
    )
    print(f"abstract: wrote {out / 'kernel.bin'} and {sidecar}")
    return EXIT_OK


def _load_pipeline(cfg, out):
    game = art.game_from_json(art.load_json(cfg.path("game")))
    dfa, label_map = art.monitor_from_json(art.load_json(cfg.path("dfa")))
    red_doc = art.load_json(out / "reduced.json")
    red = art.reduced_from_json(red_doc)
    cert_doc = art.load_json(out / "certificate.json")
    cert, _ = art.certificate_from_json(cert_doc)
    red = red.with_noise(np.asarray(cert_doc["R_r"], dtype=float))
    abstraction = art.load_abstraction(out / "abstraction.json", verify_inputs=False)
    if abstraction.r_r_used is not None and not np.allclose(abstraction.r_r_used, red.R_r, atol=1e-12):
        raise ArtifactMismatchError("kernel was built with a different R_r than the certificate; rerun abstract")
    cert_grid = cert_doc.get("abstraction", {}).get("state_grid")
    if cert_grid is not None and cert_grid != art.grid_to_json(abstraction.grid):
        raise ArtifactMismatchError("certificate and kernel disagree on the state grid; rerun the pipeline")
    if abstraction.output_matrix is None:
        abstraction.output_matrix = red.C_r
    return game, dfa, label_map, red, cert, abstraction


def cmd_synthesize(args) -> int:
    cfg = art.ProjectConfig.load(args.config)
    out = _outdir(args, cfg)
    inputs = art.provenance(
        game=cfg.path("game"), dfa=cfg.path("dfa"),
        certificate=out / "certificate.json", abstraction=out / "abstraction.json",
    )
    sidecar = out / "policy.json"
    if _cached(sidecar, inputs):
        print(f"synthesize: {sidecar} is current; nothing to do")
        return EXIT_OK
    game, dfa, label_map, red, cert, abstraction = _load_pipeline(cfg, out)
    syn = cfg.block("synthesis")
    horizon = int(syn.get("horizon", 10))
    problem = syn.get("problem", "satisfaction")
    result = synthesize(abstraction, dfa, label_map, cert, horizon, problem, output_matrix=game.C)
    art.save_policy(result.policy, out / "policy.bin")

    guarantees = []
    for x0 in cfg.block("simulation").get("x0", [list(x) for x in game.x0_set]):
        try:
            g = guarantee_at(result, cert, red, abstraction, x0)
        except NoInitialAbstractState as exc:
            g = {"bound": None, "kind": "uncovered", "error": str(exc)}
        g["x0"] = list(x0)
        if g.get("bound") is not None:
            g["satisfaction_guarantee"] = (
                g["bound"] if problem == "satisfaction" else 1.0 - g["bound"]
            )
        guarantees.append(g)
    doc = {
        "artifact": "policy",
        "policy_file": "policy.bin",
        "policy_sha256": art.sha256_file(out / "policy.bin"),
        "horizon": horizon,
        "problem": problem,
        "eps": cert.eps,
        "delta": cert.delta,
        "guarantees": guarantees,
        "memory": {"entries": int(result.policy.choices.size), "bytes_u32": int(result.policy.choices.size) * 4},
        "inputs": inputs,
    }
    art.dump_json(doc, sidecar)
    for g in guarantees:
        if g.get("bound") is None:
            print(f"synthesize: x0={g['x0']} not coverable: {g['error']}")
        else:
            print(
                f"synthesize: x0={g['x0']} {g['kind']} bound={g['bound']:.6f} "
                f"satisfaction guarantee={g['satisfaction_guarantee']:.6f}"
            )
    print(f"synthesize: wrote {out / 'policy.bin'} and {sidecar}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = art.ProjectConfig.load(args.config)
    out = _outdir(args, cfg)
    game, dfa, label_map, red, cert, abstraction = _load_pipeline(cfg, out)
    policy_doc = art.load_json(out / "policy.json")
    art.check_provenance(
        {k: v for k, v in policy_doc.get("inputs", {}).items()}, cfg.base
    )
    policy = art.load_policy(out / policy_doc["policy_file"], policy_doc["problem"])
    import sgsynth.synthesis as syn_mod

    sim = cfg.block("simulation")
    seed = int(args.seed) if args.seed is not None else int(sim.get("seed", 0))
    runs = int(sim.get("runs", 1000))
    adversary = sim.get("adversary", {"kind": "uniform"})
    horizon = policy_doc["horizon"]

    # Rebuild a result shell around the stored policy for the runtime.
    values = np.zeros((abstraction.n_states, dfa.n_states))
    result = syn_mod.SynthesisResult(
        policy=policy,
        final_values=syn_mod.ValueTable(values=values, horizon=horizon),
        dfa=dfa, label_map=label_map, eps=cert.eps, problem=policy_doc["problem"],
        output_matrix=game.C,
    )
    reports = []
    for entry in policy_doc["guarantees"]:
        x0 = entry["x0"]
        if entry.get("bound") is None:
            continue
        sink = None
        traj_path = None
        if sim.get("trajectories"):
            traj_path = out / f"trajectories_{len(reports)}.csv"
            fh = open(traj_path, "w", newline="")
            sink = csv.writer(fh)
            sink.writerow(["run", "k", *[f"x{i}" for i in range(game.A.shape[0])], "y",
                           *[f"u{i}" for i in range(game.B.shape[1])], "w", "q", "xhat_index", "in_relation"])
        else:
            fh = None
        rep = simulate_closed_loop(
            result, cert, game, red, abstraction, dfa, label_map,
            x0, adversary, runs, seed, horizon=horizon,
            collect_outputs=bool(sim.get("collect_outputs", True)),
            trajectory_sink=sink, threads=int(args.threads),
        )
        if fh:
            fh.close()
        guarantee = entry["satisfaction_guarantee"]
        # rep.rate counts monitor acceptance; for a violation monitor the
        # accepting set marks bad prefixes, so satisfaction is its complement.
        violation_monitor = policy_doc["problem"] == "violation"
        empirical_satisfaction = 1.0 - rep.rate if violation_monitor else rep.rate
        payload = rep.deterministic_payload()
        payload["x0"] = x0
        payload["guarantee"] = guarantee
        payload["bound"] = entry["bound"]
        payload["bound_kind"] = entry["kind"]
        payload["empirical_satisfaction"] = empirical_satisfaction
        payload["sound"] = bool(
            rep.rate <= entry["bound"] + 3.0 * _binom_se(rep.rate, runs)
            if violation_monitor
            else rep.rate >= entry["bound"] - 3.0 * _binom_se(rep.rate, runs)
        )
        if traj_path:
            payload["trajectories"] = traj_path.name
        reports.append(payload)
        print(
            f"simulate: x0={x0} runs={runs} acceptance={rep.rate:.4f} "
            f"empirical satisfaction={empirical_satisfaction:.4f} guarantee={guarantee:.4f} "
            f"sound={payload['sound']} relation_violations={rep.relation_violations} "
            f"mean_step={rep.mean_step_ms:.4f} ms"
        )
    inputs = art.provenance(
        policy=out / "policy.json", certificate=out / "certificate.json",
        abstraction=out / "abstraction.json", game=cfg.path("game"), dfa=cfg.path("dfa"),
    )
    art.dump_json({"artifact": "report", "reports": reports, "inputs": inputs}, out / "report.json")
    print(f"simulate: wrote {out / 'report.json'}")
    return EXIT_OK


def cmd_check_relation(args) -> int:
    cert_doc = art.load_json(args.certificate)
    cert, skeleton = art.certificate_from_json(cert_doc, lenient=True)
    game = art.game_from_json(art.load_json(args.game))
    red = art.reduced_from_json(art.load_json(args.reduced))
    if cert_doc.get("R_r") is not None:
        red = red.with_noise(np.asarray(cert_doc["R_r"], dtype=float))
    if skeleton is None:
        print("check-relation: certificate carries no abstraction block")
        return EXIT_PARSE
    if skeleton.output_matrix is None:
        skeleton.output_matrix = red.C_r
    tol = float(args.tol) if args.tol is not None else (
        1e-2 if cert_doc.get("source") == "published" else 1e-7
    )
    gammas = compute_gammas(game, red, skeleton, cert.M, cert.delta, cert.R_tilde, cert.M_w, cert.eps_w)
    constraints = intersect_input_constraints(game, red, skeleton, cert.R_tilde)
    report = check_lmi_conditions(
        game, red, cert.M, cert.K, cert.L, cert.eps, cert.delta,
        gammas.total, tol=tol, constraints=constraints,
    )
    report["gammas"] = gammas.as_dict()
    report["tolerance"] = tol
    print(json.dumps(report, indent=2, sort_keys=True, default=float))
    for name, ok in report["checks"].items():
        print(f"check-relation: {name}: {'pass' if ok else 'FAIL'}")
    return EXIT_OK if report["feasible"] else EXIT_INFEASIBLE


def cmd_plot(args) -> int:
    cfg = art.ProjectConfig.load(args.config)
    out = _outdir(args, cfg)
    report_doc = art.load_json(out / "report.json")
    _, label_map = art.monitor_from_json(art.load_json(cfg.path("dfa")))
    plots = out / "plots"
    plots.mkdir(exist_ok=True)

    bands_path = plots / "bands.csv"
    with open(bands_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["symbol", "dim", "lo", "hi"])
        for i, sym in enumerate(label_map.symbols):
            for d in range(label_map.dim):
                w.writerow([sym, d, label_map.box_lo[i][d], label_map.box_hi[i][d]])

    quant_path = plots / "quantiles.csv"
    with open(quant_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["report", "k", "q05", "q25", "q50", "q75", "q95"])
        for ri, rep in enumerate(report_doc.get("reports", [])):
            q = rep.get("output_quantiles")
            if not q:
                continue
            for k in range(len(q["q50"])):
                w.writerow([ri, k, q["q05"][k], q["q25"][k], q["q50"][k], q["q75"][k], q["q95"][k]])
    print(f"plot: wrote {bands_path} and {quant_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgsynth",
        description="Finite-horizon controller synthesis for stochastic two-player games",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="project configuration JSON")
        p.add_argument("--out", default=None, help="artifact directory (default: <config dir>/out)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, default=None, help="override the simulation seed")

    for name, fn in (
        ("reduce", cmd_reduce), ("abstract", cmd_abstract), ("relate", cmd_relate),
        ("synthesize", cmd_synthesize), ("simulate", cmd_simulate), ("plot", cmd_plot),
    ):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("check-relation")
    p.add_argument("--certificate", required=True)
    p.add_argument("--game", required=True)
    p.add_argument("--reduced", required=True)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_check_relation)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ArtifactMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (InfeasibleNoiseMismatch, EmptyInteriorError, NoInitialAbstractState) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigurationError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except SgsynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
