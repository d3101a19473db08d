"""Command-line pipeline: parameter ingestion, per-stage subcommands, and
one-command reproduction of the four controller configurations.

Stage artifacts are plain JSON (plus CSV trajectories), each embedding the
tool version, input hashes, seed, and stage parameters; re-runs skip stages
whose inputs are unchanged.

Exit codes: 0 ok, 2 validation error, 3 synthesis infeasible, 4 numerical
failure.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import __version__
from .equilibrium import (ConvergenceError, EquilibriumTargets, linearize,
                          modal_analysis, solve_equilibrium)
from .models import (DieselModel, DfigModel, ModelError, PowerCurve,
                     ReferenceModel, load_dfig)
from .metrics import build_report, fit_emulated_inertia
from .sdp import SdpError
from .sim import (DelayPolicy, Disturbance, MrcGroup, Scenario,
                  SimulationError, Trajectory, simulate)
from .sma import partition, reduce as sma_reduce, select_relevant_mode
from .synthesis import (InfeasibleError, PolytopeSpec, SynthesisOptions,
                        assemble_augmented, assemble_plant, enumerate_vertices,
                        synthesize, synthesize_robust)

FIXTURE_DIR = Path(__file__).parent / "fixtures"

EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4


def _hash_obj(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=_jsonable).encode()).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    if isinstance(x, frozenset):
        return sorted(x)
    if hasattr(x, "__dataclass_fields__"):
        return asdict(x)
    raise TypeError(f"not jsonable: {type(x)}")


class StageRunner:
    """Content-hash cached stage execution."""

    def __init__(self, out_dir: Path, seed: int, force: bool = False):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.force = force
        self.executed: list[str] = []

    def run(self, name: str, inputs, producer):
        """producer() -> jsonable payload; cached on the inputs hash."""
        path = self.out / f"{name}.json"
        ih = _hash_obj(inputs)
        if not self.force and path.exists():
            try:
                old = json.loads(path.read_text())
                if old.get("meta", {}).get("input_hash") == ih:
                    return old
            except (json.JSONDecodeError, KeyError):
                pass
        payload = producer()
        doc = {"meta": {"tool_version": __version__, "input_hash": ih,
                        "seed": self.seed, "stage": name},
               **payload}
        path.write_text(json.dumps(doc, indent=2, default=_jsonable, sort_keys=True))
        self.executed.append(name)
        return json.loads(path.read_text())


def load_config(config_id: int | str, manifest: dict | None = None) -> dict:
    path = FIXTURE_DIR / f"config{config_id}.json"
    if manifest and "configs" in manifest:
        custom = Path(manifest["configs"]).expanduser() / f"config{config_id}.json"
        if custom.exists():
            path = custom
    if not path.exists():
        raise ModelError(f"no such config fixture: {path}")
    return json.loads(path.read_text())


def load_manifest(path: str | None) -> dict:
    if path is None:
        return {"models": str(FIXTURE_DIR / "models.json")}
    p = Path(path)
    if not p.exists():
        raise ModelError(f"manifest {path} does not exist")
    doc = json.loads(p.read_text())
    doc.setdefault("models", str(FIXTURE_DIR / "models.json"))
    return doc


def validate_inputs(manifest: dict) -> tuple[list[str], list[str]]:
    """Schema/invariant pre-checks; returns (errors, warnings)."""
    errors, warnings = [], []
    models_path = Path(manifest["models"])
    if not models_path.exists():
        errors.append(f"model file {models_path} missing")
        return errors, warnings
    doc = json.loads(models_path.read_text())
    for name, payload in doc.items():
        try:
            if name.startswith("dfig"):
                if "eta" not in payload:
                    warnings.append(f"{name}: eta omitted, default 1/1.1 applies")
                load_dfig(dict(payload))
            elif name.startswith("diesel"):
                DieselModel(**payload)
            elif name.startswith("reference"):
                ReferenceModel(**payload)
        except (ModelError, TypeError) as exc:
            errors.append(f"{name}: {exc}")
    for cid in manifest.get("config_ids", []):
        try:
            cfg = load_config(cid, manifest)
        except ModelError as exc:
            errors.append(str(exc))
            continue
        for gi, g in enumerate(cfg.get("groups", [])):
            if not g.get("pom_buses"):
                errors.append(
                    f"config {cid} group {gi}: an MRC group needs exactly one "
                    "point of measurement (pom_buses must be nonempty)")
    return errors, warnings


def _build_models(manifest: dict):
    doc = json.loads(Path(manifest["models"]).read_text())
    dfig = load_dfig(dict(doc["dfig"]))
    return dfig, doc


def _stage_equilibrium(runner, dfig, targets: EquilibriumTargets):
    def produce():
        op, mcal = solve_equilibrium(dfig, targets)
        return {
            "targets": asdict(targets),
            "state": asdict(op.state),
            "algebraic": asdict(op.algebraic),
            "max_residual": op.max_residual(mcal),
            "torque_scale": mcal.aero.torque_scale,
        }
    return runner.run("operating_point", {"dfig": asdict(dfig),
                                          "targets": asdict(targets)}, produce)


def _stage_linear(runner, dfig, op_doc):
    from .models import DfigState, DfigAlgebraic, DfigInputs
    from .equilibrium import DfigOperatingPoint

    def produce():
        mcal = dfig.with_aero(PowerCurve(
            tip_speed_gain=dfig.aero.tip_speed_gain,
            torque_scale=op_doc["torque_scale"]))
        op = DfigOperatingPoint(
            state=DfigState(**op_doc["state"]),
            algebraic=DfigAlgebraic(**op_doc["algebraic"]),
            inputs=DfigInputs(wind_speed=dfig.wind_speed))
        ss = linearize(mcal, op)
        ma = modal_analysis(ss.A)
        k = ss.state_labels.index("omega_r")
        return {
            "A": ss.A, "B": ss.B, "C": ss.C, "D": ss.D,
            "state_labels": list(ss.state_labels),
            "eigenvalues": [[l.real, l.imag] for l in ma.eigenvalues],
            "participation": ma.participation,
            "relevant_state": "omega_r",
            "lambda_r": select_relevant_mode(ma, k),
        }
    return runner.run("linear10", {"op": op_doc["meta"]["input_hash"],
                                   "torque_scale": op_doc["torque_scale"]}, produce)


def _stage_reduce(runner, lin_doc):
    def produce():
        from .models import LinearStateSpace
        ss = LinearStateSpace(
            A=np.array(lin_doc["A"]), B=np.array(lin_doc["B"]),
            E=np.zeros((10, 0)), C=np.array(lin_doc["C"]),
            D=np.array(lin_doc["D"]), F=np.zeros((1, 0)),
            state_labels=tuple(lin_doc["state_labels"]),
            input_labels=("u_ie",), output_labels=("dP_g",))
        parts = partition(ss, "omega_r")
        red = sma_reduce(parts, lin_doc["lambda_r"])
        return {"A_rd": red.A_rd, "B_rd": red.B_rd, "C_rd": red.C_rd,
                "D_rd": red.D_rd, "lambda_r": red.lambda_r,
                "delta_fraction": red.delta_fraction,
                "delta_nominal": red.delta_nominal,
                "b_rd_span": red.b_rd_span, "d_rd_span": red.d_rd_span}
    return runner.run("reduced", {"lin": lin_doc["meta"]["input_hash"],
                                  "lambda_r": lin_doc["lambda_r"]}, produce)


def _reduced_from_doc(doc):
    from .sma import ReducedModel
    return ReducedModel(
        A_rd=doc["A_rd"], B_rd=doc["B_rd"], C_rd=doc["C_rd"], D_rd=doc["D_rd"],
        delta_nominal=np.array(doc["delta_nominal"]),
        delta_fraction=doc["delta_fraction"], lambda_r=doc["lambda_r"],
        b_rd_span=doc["b_rd_span"], d_rd_span=doc["d_rd_span"])


def _stage_synthesis(runner, name, cfg, group_cfg, red_doc):
    diesel = DieselModel(**group_cfg["diesel"])
    ref = ReferenceModel(**group_cfg["reference"])
    red = _reduced_from_doc(red_doc)
    repro = cfg.get("reproduction", True)
    delays = (0.0, 0.0) if repro else tuple(cfg.get("delays", [0.05, 0.10]))
    options = SynthesisOptions(
        gamma_weight=cfg.get("gamma_weight", 1000.0 if repro else 1.0))

    def produce():
        plant = assemble_plant(diesel, red)
        if cfg.get("polytope"):
            spec = PolytopeSpec(
                theta={k: tuple(v) for k, v in cfg["polytope"].items()},
                include_delta=cfg.get("polytope_delta", True))
            vertices = enumerate_vertices(plant, spec)
            res = synthesize_robust(vertices, ref, delays, options)
            n_vertices = len(vertices)
        else:
            res = synthesize(assemble_augmented(plant, ref, delays), options)
            n_vertices = 1
        return {
            "K": res.K, "K_p": res.K_p, "K_r": res.K_r,
            "gamma": res.gamma, "k_a": res.k_a, "k_b": res.k_b,
            "tracking_bound": res.tracking_bound,
            "delays": list(delays), "n_vertices": n_vertices,
            "certificates": {"passed": res.certificates.passed,
                             "margins": res.certificates.margins,
                             "names": res.certificates.names},
            "solver_status": res.solution.status.value,
            "iterations": res.solution.iterations,
        }
    key = {"diesel": asdict(diesel), "ref": asdict(ref),
           "red": red_doc["meta"]["input_hash"], "delays": delays,
           "polytope": cfg.get("polytope"), "gamma_weight": options.gamma_weight}
    return runner.run(name, key, produce)


def _scenario_from_cfg(cfg, red_doc, synth_docs, seed, fidelity="reduced1",
                       delay_policy=None, dfig=None):
    red = _reduced_from_doc(red_doc)
    groups = []
    for gi, g in enumerate(cfg["groups"]):
        K = np.array(synth_docs[gi]["K"]) if synth_docs[gi] is not None else None
        groups.append(MrcGroup(
            diesel=DieselModel(**g["diesel"]),
            reference=ReferenceModel(**g["reference"]),
            reduced=red, K=K, n_wtg=g.get("n_wtg", 1),
            pom_buses=frozenset(g["pom_buses"]),
            served_buses=frozenset(g.get("served_buses", g["pom_buses"])),
            share=g.get("share", 1.0), dfig=dfig))
    disturbances = [Disturbance(**d) for d in cfg["disturbances"]]
    if delay_policy is None:
        if cfg.get("reproduction", True):
            delay_policy = DelayPolicy(kind="none")
        else:
            eta_m, kappa = cfg.get("delays", [0.05, 0.10])
            delay_policy = DelayPolicy(kind="worst", eta_m=eta_m, kappa=kappa,
                                       seed=seed)
    return Scenario(name=cfg.get("name", "scenario"), groups=groups,
                    disturbances=disturbances, delay=delay_policy,
                    fidelity=fidelity, duration=cfg.get("duration", 10.0))


def _stage_simulate(runner, cfg, scenario: Scenario):
    csv_path = runner.out / "trajectory.csv"
    key = {"cfg": cfg, "fidelity": scenario.fidelity,
           "delay": asdict(scenario.delay),
           "K": [None if g.K is None else g.K for g in scenario.groups]}

    def produce():
        traj = simulate(scenario)
        traj.to_csv(csv_path)
        return {"csv": csv_path.name, "samples": len(traj.t),
                "columns": list(traj.columns)}
    return runner.run("trajectory", key, produce)


def _stage_report(runner, cfg, traj_doc, synth_docs):
    csv_path = runner.out / traj_doc["csv"]

    def produce():
        traj = Trajectory.from_csv(csv_path)
        t_dist = min(d["time"] for d in cfg["disturbances"])
        out = {}
        for gi in range(len(cfg["groups"])):
            tag = f"g{gi}_" if len(cfg["groups"]) > 1 else ""
            bound = synth_docs[gi]["tracking_bound"] if synth_docs[gi] else None
            rep = build_report(traj, group_tag=tag,
                               inertia_window=(t_dist, t_dist + 2.0),
                               gain_bound=bound)
            out[f"group{gi}"] = {
                "nadir_hz": rep.nadir_hz, "time_of_nadir": rep.time_of_nadir,
                "max_rocof_hz_s": rep.max_rocof_hz_s,
                "steady_state_hz": rep.steady_state_hz,
                "tracking_rms": rep.tracking_rms,
                "tracking_peak": rep.tracking_peak,
                "H_ie": rep.inertia.H_ie if rep.inertia.identifiable else None,
                "H_ie_residual": rep.inertia.residual,
                "gain_ratio": rep.gain_ratio, "gain_bound": rep.gain_bound,
            }
        return {"reports": out}
    return runner.run("report", {"traj": traj_doc["meta"]["input_hash"],
                                 "csv": traj_doc["csv"]}, produce)


def _plot_trajectory(out_dir: Path, cfg, n_groups: int):
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    traj = Trajectory.from_csv(out_dir / "trajectory.csv")
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    for gi in range(n_groups):
        tag = f"g{gi}_" if n_groups > 1 else ""
        f_bar = cfg["groups"][gi]["diesel"].get("f_bar", 60.0)
        axes[0].plot(traj.t, f_bar + f_bar * traj[f"{tag}d_omega_d"],
                     label=f"DSG {gi + 1}")
        axes[0].plot(traj.t, f_bar + f_bar * traj[f"{tag}d_omega_hat"], "--",
                     label=f"reference {gi + 1}")
        axes[1].plot(traj.t, traj[f"{tag}dP_g"], label=f"WTG group {gi + 1}")
        axes[2].plot(traj.t, traj[f"{tag}u_ie"], label=f"u_ie {gi + 1}")
    axes[0].set_ylabel("frequency [Hz]")
    axes[1].set_ylabel("dP_g [p.u.]")
    axes[2].set_ylabel("u_ie [p.u.]")
    axes[2].set_xlabel("time [s]")
    for ax in axes:
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "trajectory.svg")
    plt.close(fig)


def run_pipeline(manifest: dict, config_id, out_dir: Path, seed: int = 0,
                 fidelity: str | None = None, delay_policy: str | None = None,
                 force: bool = False, plots: bool = False) -> dict:
    """equilibrium -> linearize -> reduce -> synthesize -> simulate -> report."""
    cfg = load_config(config_id, manifest)
    runner = StageRunner(Path(out_dir), seed=seed, force=force)
    dfig, _ = _build_models(manifest)

    op_doc = _stage_equilibrium(runner, dfig,
                                EquilibriumTargets(**cfg.get("targets", {})))
    lin_doc = _stage_linear(runner, dfig, op_doc)
    red_doc = _stage_reduce(runner, lin_doc)
    synth_docs = []
    for gi, g in enumerate(cfg["groups"]):
        if g.get("controller", "mrc") == "mrc":
            synth_docs.append(_stage_synthesis(
                runner, f"synthesis_g{gi}" if len(cfg["groups"]) > 1 else "synthesis",
                cfg, g, red_doc))
        else:
            synth_docs.append(None)
    policy = None
    if delay_policy is not None:
        eta_m, kappa = cfg.get("delays", [0.05, 0.10])
        kind = {"worst": "worst", "min": "min", "random": "random",
                "none": "none"}[delay_policy]
        policy = DelayPolicy(kind=kind, eta_m=eta_m, kappa=kappa, seed=seed)
    scenario = _scenario_from_cfg(cfg, red_doc, synth_docs, seed,
                                  fidelity=fidelity or cfg.get("fidelity", "reduced1"),
                                  delay_policy=policy,
                                  dfig=dfig)
    traj_doc = _stage_simulate(runner, cfg, scenario)
    rep_doc = _stage_report(runner, cfg, traj_doc, synth_docs)
    if plots:
        _plot_trajectory(runner.out, cfg, len(cfg["groups"]))
    return {"executed": runner.executed, "report": rep_doc["reports"],
            "out": str(runner.out)}


@click.group()
@click.option("--manifest", type=click.Path(), default=None,
              help="project manifest JSON (defaults to packaged fixtures)")
@click.option("--out", "out_dir", type=click.Path(), default="windmrc-out")
@click.option("--seed", type=int, default=0)
@click.pass_context
def main(ctx, manifest, out_dir, seed):
    """Model-reference inertia emulation toolkit."""
    ctx.ensure_object(dict)
    try:
        ctx.obj["manifest"] = load_manifest(manifest)
    except (ModelError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    ctx.obj["out"] = Path(out_dir)
    ctx.obj["seed"] = seed


def _guarded(fn):
    try:
        fn()
    except (ModelError, ValueError, KeyError) as exc:
        click.echo(f"validation error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    except InfeasibleError as exc:
        click.echo(f"infeasible: {exc}", err=True)
        sys.exit(EXIT_INFEASIBLE)
    except (SimulationError, SdpError, ConvergenceError, np.linalg.LinAlgError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)


@main.command()
@click.pass_context
def validate(ctx):
    """Validate model and config inputs."""
    manifest = dict(ctx.obj["manifest"])
    manifest.setdefault("config_ids", [1, 2, 3, 4])
    errors, warnings = validate_inputs(manifest)
    for w in warnings:
        click.echo(f"warning: {w}")
    for e in errors:
        click.echo(f"error: {e}", err=True)
    sys.exit(EXIT_VALIDATION if errors else 0)


@main.command()
@click.option("--p-g", type=float, default=0.8,
              help="active power target, turbine-rated per unit")
@click.option("--q-g", type=float, default=0.0)
@click.pass_context
def equilibrium(ctx, p_g, q_g):
    """Solve the DFIG operating point."""
    def body():
        dfig, _ = _build_models(ctx.obj["manifest"])
        runner = StageRunner(ctx.obj["out"], ctx.obj["seed"])
        doc = _stage_equilibrium(runner, dfig,
                                 EquilibriumTargets(P_g=p_g, Q_g=q_g))
        click.echo(json.dumps({k: v for k, v in doc.items() if k != "meta"},
                              indent=2, default=_jsonable))
    _guarded(body)


@main.command("linearize")
@click.pass_context
def linearize_cmd(ctx):
    """Linearize about the solved operating point; write the modal report."""
    def body():
        dfig, _ = _build_models(ctx.obj["manifest"])
        runner = StageRunner(ctx.obj["out"], ctx.obj["seed"])
        op_doc = _stage_equilibrium(runner, dfig, EquilibriumTargets())
        lin_doc = _stage_linear(runner, dfig, op_doc)
        eigs = [complex(re, im) for re, im in lin_doc["eigenvalues"]]
        click.echo("eigenvalues (sorted by |Re| ascending):")
        for lam in eigs:
            click.echo(f"  {lam.real: 12.4f} {lam.imag:+12.4f}j")
        click.echo(f"retained mode lambda_r = {lin_doc['lambda_r']:.4f}")
        part = np.array(lin_doc["participation"])
        k = lin_doc["state_labels"].index("omega_r")
        click.echo(f"omega_r participation in retained mode: "
                   f"{part[k].max():.4f}")
    _guarded(body)


@main.command("reduce")
@click.pass_context
def reduce_cmd(ctx):
    """First-order WTG model by selective modal reduction."""
    def body():
        dfig, _ = _build_models(ctx.obj["manifest"])
        runner = StageRunner(ctx.obj["out"], ctx.obj["seed"])
        op_doc = _stage_equilibrium(runner, dfig, EquilibriumTargets())
        lin_doc = _stage_linear(runner, dfig, op_doc)
        red_doc = _stage_reduce(runner, lin_doc)
        click.echo(json.dumps({k: red_doc[k] for k in
                               ("A_rd", "B_rd", "C_rd", "D_rd", "lambda_r")},
                              indent=2))
    _guarded(body)


@main.command("synthesize")
@click.option("--config", "config_id", type=int, default=1)
@click.pass_context
def synthesize_cmd(ctx, config_id):
    """Design the tracking controller for a configuration."""
    def body():
        manifest = ctx.obj["manifest"]
        cfg = load_config(config_id, manifest)
        dfig, _ = _build_models(manifest)
        runner = StageRunner(ctx.obj["out"] / f"config{config_id}",
                             ctx.obj["seed"])
        op_doc = _stage_equilibrium(runner, dfig,
                                    EquilibriumTargets(**cfg.get("targets", {})))
        lin_doc = _stage_linear(runner, dfig, op_doc)
        red_doc = _stage_reduce(runner, lin_doc)
        doc = _stage_synthesis(runner, "synthesis", cfg, cfg["groups"][0], red_doc)
        click.echo(json.dumps({k: doc[k] for k in
                               ("K", "gamma", "k_a", "k_b", "tracking_bound",
                                "certificates", "solver_status")},
                              indent=2, default=_jsonable))
    _guarded(body)


@main.command("simulate")
@click.option("--config", "config_id", type=int, default=1)
@click.option("--fidelity", type=click.Choice(["nonlinear", "linear10", "reduced1"]),
              default=None)
@click.option("--delay-policy", type=click.Choice(["worst", "min", "random", "none"]),
              default=None)
@click.option("--plots", is_flag=True, default=False)
@click.pass_context
def simulate_cmd(ctx, config_id, fidelity, delay_policy, plots):
    """Run the closed-loop scenario for a configuration."""
    def body():
        out = run_pipeline(ctx.obj["manifest"], config_id,
                           ctx.obj["out"] / f"config{config_id}",
                           seed=ctx.obj["seed"], fidelity=fidelity,
                           delay_policy=delay_policy, plots=plots)
        click.echo(json.dumps(out["report"], indent=2, default=_jsonable))
    _guarded(body)


@main.command("report")
@click.argument("csv_file", type=click.Path(exists=True))
@click.option("--window", nargs=2, type=float, default=(1.0, 3.0),
              help="inertia fit window [s]")
@click.pass_context
def report_cmd(ctx, csv_file, window):
    """Metrics from a trajectory CSV."""
    def body():
        traj = Trajectory.from_csv(csv_file)
        tags = sorted({c.split("_", 1)[0] + "_" for c in traj.columns
                       if c.startswith("g") and c[1].isdigit()}) or [""]
        for tag in tags:
            rep = build_report(traj, group_tag=tag, inertia_window=tuple(window))
            label = tag.rstrip("_") or "group0"
            click.echo(f"[{label}]")
            for line in rep.lines():
                click.echo("  " + line)
    _guarded(body)


@main.command("pipeline")
@click.option("--config", "config_id", default="1",
              help="config id 1-4 or 'all'")
@click.option("--fidelity", type=click.Choice(["nonlinear", "linear10", "reduced1"]),
              default=None)
@click.option("--delay-policy", type=click.Choice(["worst", "min", "random", "none"]),
              default=None)
@click.option("--force", is_flag=True, default=False, help="ignore stage cache")
@click.option("--plots", is_flag=True, default=False)
@click.pass_context
def pipeline_cmd(ctx, config_id, fidelity, delay_policy, force, plots):
    """Full pipeline: equilibrium through report."""
    def body():
        ids = [1, 2, 3, 4] if config_id == "all" else [int(config_id)]
        for cid in ids:
            out = run_pipeline(ctx.obj["manifest"], cid,
                               ctx.obj["out"] / f"config{cid}",
                               seed=ctx.obj["seed"], fidelity=fidelity,
                               delay_policy=delay_policy, force=force,
                               plots=plots)
            click.echo(f"config {cid}: stages executed {out['executed'] or '(all cached)'}")
            click.echo(json.dumps(out["report"], indent=2, default=_jsonable))
    _guarded(body)


if __name__ == "__main__":
    main()
