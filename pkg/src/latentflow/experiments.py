"""Pipeline stages for the two experiments.

Each stage reads what earlier stages left in the output directory
(checkpoints, ``trajectories.npz``), trains or recomputes anything missing,
writes its artifacts and a ``metrics_<stage>.json``. ``report`` folds all
metric files into ``summary.json``. Every random draw comes from a per-role
stream of the experiment seed, so a stage rerun alone reproduces the
numbers of a full run.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import analysis as an
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .csvio import fmt, write_csv
from .datasets import (
    GaussianData,
    factor_observations,
    mixing_matrices,
    sample_factor_dataset,
    sample_gaussian_mixture,
    train_test_split,
)
from .errors import ConfigError
from .flow import Conditioning, FlowModel, train_flow
from .ode import IntegratorConfig, Trajectory, generate, invert_to_base
from .rng import stream
from .vae import VaeModel, decode_array, encode_mean, train_vae

log = logging.getLogger(__name__)

STREAMS = {"data": 0, "split": 1, "vae": 2, "flow": 3, "probe": 4, "structure": 5,
           "generate": 6, "transfer": 7, "isolation": 8}
STAGES = ("train-vae", "train-flow", "invert", "probe", "transfer", "isolate", "report")


def rng_for(cfg: ExperimentConfig, role: str) -> np.random.Generator:
    return stream(cfg.seed, STREAMS[role])


class Run:
    """Output directory plus lazily loaded data and models for one config."""

    def __init__(self, cfg: ExperimentConfig, out: Path | None = None):
        self.cfg = cfg
        self.out = Path(out or cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._data = None
        self._vae = None
        self._flow = None
        self.timings: dict[str, float] = {}

    @property
    def gaussian(self) -> bool:
        return self.cfg.experiment == "gaussians2d"

    @property
    def comment(self) -> str:
        return self.cfg.provenance()

    def write_config(self) -> None:
        (self.out / "config.yaml").write_text(f"# {self.comment}\n" + self.cfg.to_yaml())

    # -- data -------------------------------------------------------------
    def data(self):
        if self._data is None:
            if self.gaussian:
                full = sample_gaussian_mixture(self.cfg.dataset, rng_for(self.cfg, "data"))
            else:
                full = sample_factor_dataset(self.cfg.dataset, rng_for(self.cfg, "data"))
            tr, te = train_test_split(len(full), self.cfg.test_fraction, rng_for(self.cfg, "split"))
            self._data = (full.subset(tr), full.subset(te))
        return self._data

    def eval_set(self):
        return self.data()[1].subset(slice(0, self.cfg.analysis.n_eval))

    def cond_of(self, d) -> Conditioning:
        if isinstance(d, GaussianData):
            return Conditioning(d.cls)
        return Conditioning(d.cls, d.rgb[:, :2])

    def latents(self, d) -> np.ndarray:
        return d.x if self.gaussian else encode_mean(self.vae(), d.x)

    # -- models -----------------------------------------------------------
    def vae(self) -> VaeModel:
        if self.gaussian:
            raise ConfigError("experiment gaussians2d has no VAE stage")
        if self._vae is None:
            path = self.out / "vae.ckpt"
            if path.exists():
                self._vae = load_checkpoint(path, "vae").model
            else:
                stage_train_vae(self)
        return self._vae

    def flow(self) -> FlowModel:
        if self._flow is None:
            path = self.out / "flow.ckpt"
            if path.exists():
                self._flow = load_checkpoint(path, "flow").model
            else:
                stage_train_flow(self)
        return self._flow

    def trajectories(self) -> dict[str, np.ndarray]:
        path = self.out / "trajectories.npz"
        if not path.exists():
            stage_invert(self)
        with np.load(path) as f:
            return {k: f[k] for k in f.files}

    def save_metrics(self, stage: str, metrics: dict) -> dict:
        dump_json(self.out / f"metrics_{stage}.json", metrics)
        return metrics


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _timed(run: Run, name: str):
    class _T:
        def __enter__(self):
            self.t0 = time.perf_counter()

        def __exit__(self, *exc):
            run.timings[name] = time.perf_counter() - self.t0

    return _T()


# -- stages -----------------------------------------------------------------
def stage_train_vae(run: Run) -> dict:
    cfg = run.cfg
    if run.gaussian:
        raise ConfigError("train-vae: experiment gaussians2d has no VAE (vae: none)")
    train, test = run.data()
    with _timed(run, "train-vae"):
        model, hist = train_vae(train.x, cfg.vae, rng_for(cfg, "vae"))
    run._vae = model
    save_checkpoint(model, run.out / "vae.ckpt", cfg.seed, cfg.echo())
    write_csv(run.out / "vae_loss.csv", ["epoch", "loss", "recon", "kl"],
              ([e, fmt(a), fmt(b), fmt(c)] for e, (a, b, c)
               in enumerate(zip(hist.epoch_loss, hist.epoch_recon, hist.epoch_kl))),
              run.comment)
    mu_tr = encode_mean(model, train.x)
    mu_te = encode_mean(model, test.x)
    recon = float(np.mean((decode_array(model, mu_te) - test.x) ** 2))
    data_var = float(np.mean(test.x.var(axis=0)))
    probe_r2 = {}
    for k, name in enumerate("rgb"):
        p = an.RidgeProbe.fit(mu_tr, train.rgb[:, k], cfg.analysis.ridge_lambda)
        probe_r2[name] = an.r2_score(test.rgb[:, k], p.predict(mu_te))
    acc = an.ClassProbe().fit(mu_tr, train.cls).score(mu_te, test.cls)
    return run.save_metrics("train-vae", {
        "epoch_loss_first": hist.epoch_loss[0],
        "epoch_loss_last": hist.epoch_loss[-1],
        "heldout_recon_mse": recon,
        "data_variance": data_var,
        "recon_to_variance": recon / data_var,
        "latent_probe_r2": probe_r2,
        "latent_class_accuracy": acc,
    })


def stage_train_flow(run: Run) -> dict:
    cfg = run.cfg
    train, _ = run.data()
    z = run.latents(train)
    with _timed(run, "train-flow"):
        model, hist = train_flow(z, run.cond_of(train), cfg.flow_model, cfg.flow_train,
                                 rng_for(cfg, "flow"))
    run._flow = model
    save_checkpoint(model, run.out / "flow.ckpt", cfg.seed, cfg.echo())
    write_csv(run.out / "flow_loss.csv", ["step", "loss"],
              ([i, fmt(v)] for i, v in enumerate(hist.step_loss)), run.comment)
    window = max(1, min(100, cfg.flow_train.steps // 10))
    smooth = hist.smoothed(window)
    return run.save_metrics("train-flow", {
        "n_parameters": model.num_parameters(),
        "loss_initial": smooth[0],
        "loss_final": smooth[-1],
        "loss_reduction": 1.0 - smooth[-1] / smooth[0],
        "smoothing_window": window,
    })


def _roundtrip(flow: FlowModel, z: np.ndarray, cond: Conditioning, steps, method: str) -> dict:
    out = {}
    for n in steps:
        c = IntegratorConfig(method, n)
        back = generate(flow, invert_to_base(flow, z, cond, c).end, cond, c).end
        rel = np.linalg.norm(back - z, axis=1) / np.linalg.norm(z, axis=1)
        out[str(n)] = float(np.median(rel))
    return out


def stage_invert(run: Run) -> dict:
    cfg = run.cfg
    a = cfg.analysis
    flow = run.flow()
    ev = run.eval_set()
    z1 = run.latents(ev)
    cond = run.cond_of(ev)
    with _timed(run, "invert"):
        tc = invert_to_base(flow, z1, cond, cfg.integrator)
        tu = invert_to_base(flow, z1, Conditioning.null(len(z1), flow.config.cont_dim), cfg.integrator)
    grid = np.linspace(0.0, 1.0, a.probe_points)
    idx = [int(np.argmin(np.abs(tc.times - t))) for t in grid]
    arrays = {"times": np.round(tc.times[idx], 12), "conditional": tc.states[idx], "unconditional": tu.states[idx],
              "cls": ev.cls}
    if run.gaussian:
        arrays["d"] = ev.d
    else:
        arrays["rgb"] = ev.rgb
    np.savez(run.out / "trajectories.npz", **arrays)
    k = min(a.trajectory_csv_samples, len(z1))
    for name, tr in (("conditional", tc), ("unconditional", tu)):
        sub = Trajectory(tr.times, tr.states[:, :k], tr.direction)
        sub.to_csv(run.out / f"trajectories_{name}.csv", times=grid, comment=run.comment)

    metrics: dict = {}
    n_rt = min(a.roundtrip_samples, len(z1))
    metrics["roundtrip_median_rel_error"] = _roundtrip(
        flow, z1[:n_rt], cond.take(slice(0, n_rt)), a.roundtrip_steps, cfg.integrator.method)
    if run.gaussian:
        metrics["generation"] = _generation_metrics(run)
    return run.save_metrics("invert", metrics)


def _generation_metrics(run: Run) -> dict:
    cfg = run.cfg
    flow = run.flow()
    rng = rng_for(cfg, "generate")
    n = cfg.analysis.n_generate_per_class
    means = np.asarray(cfg.dataset.means)
    target_cov = cfg.dataset.cov_scale * np.eye(2)
    per_class = []
    for c, m in enumerate(means):
        x = generate(flow, rng.standard_normal((n, 2)), Conditioning(np.full(n, c)), cfg.integrator).end
        cov = np.cov(x.T)
        per_class.append({
            "class": c,
            "mean": [float(v) for v in x.mean(axis=0)],
            "mean_error": float(np.linalg.norm(x.mean(axis=0) - m)),
            "cov": [[float(v) for v in row] for row in cov],
            "cov_rel_error": float(np.linalg.norm(cov - target_cov) / np.linalg.norm(target_cov)),
        })
    return {
        "per_class": per_class,
        "max_mean_error": max(p["mean_error"] for p in per_class),
        "max_cov_rel_error": max(p["cov_rel_error"] for p in per_class),
    }


def stage_probe(run: Run) -> dict:
    cfg = run.cfg
    a = cfg.analysis
    tj = run.trajectories()
    times = tj["times"]
    labels = tj["cls"]
    metrics: dict = {"class_structure": {}}
    if run.gaussian:
        targets = {"d": tj["d"]}
    else:
        targets = {name: tj["rgb"][:, k] for k, name in enumerate("rgb")}
    reports = []
    for kind in ("conditional", "unconditional"):
        traj = Trajectory(times, tj[kind], "backward")
        rep = an.linear_probe_r2(traj, targets, rng_for(cfg, "probe"), grid=times,
                                 n_train=a.n_train, n_repeats=a.n_repeats,
                                 lam=a.ridge_lambda, flow_kind=kind)
        reports.append(rep)
        metrics[f"probe_{kind}"] = rep.as_dict()
        z0 = traj.at(0.0)
        metrics["class_structure"][f"{kind}_t0"] = an.class_structure_score(
            z0, labels, rng_for(cfg, "structure"))
    metrics["class_structure"]["t1"] = an.class_structure_score(
        tj["conditional"][-1], labels, rng_for(cfg, "structure"))
    write_csv(run.out / "probes.csv", an.PROBE_HEADER,
              (row for rep in reports for row in rep.rows()), run.comment)

    if run.gaussian:
        metrics["distance"] = _distance_metrics(run, tj)

    for name, z in (("t1", tj["conditional"][-1]), ("conditional_t0", tj["conditional"][0]),
                    ("unconditional_t0", tj["unconditional"][0])):
        pca = an.pca_project(z, 2)
        write_csv(run.out / f"pca_{name}.csv", ["sample_id", "pc1", "pc2", "label"],
                  ([i, fmt(p[0]), fmt(p[1]), int(lab)] for i, (p, lab) in enumerate(zip(pca.coords, labels))),
                  run.comment)
        metrics.setdefault("pca_explained_ratio", {})[name] = [float(v) for v in pca.explained_ratio]
    return run.save_metrics("probe", metrics)


def _distance_metrics(run: Run, tj: dict) -> dict:
    """How well the within-Gaussian distance d is recovered from t = 0 latents.

    ``linear``: ridge regression of d on the raw t = 0 coordinates.
    ``radial``: regression of d on the Euclidean norm of the t = 0 latent.
    """
    a = run.cfg.analysis
    d = tj["d"]
    out = {}
    for kind in ("conditional", "unconditional"):
        z0 = tj[kind][0]
        rng = rng_for(run.cfg, "probe")
        lin, rad = [], []
        for _ in range(a.n_repeats):
            perm = rng.permutation(len(d))
            tr, te = perm[: a.n_train], perm[a.n_train :]
            p = an.RidgeProbe.fit(z0[tr], d[tr], a.ridge_lambda)
            lin.append(an.r2_score(d[te], p.predict(z0[te])))
            r = np.linalg.norm(z0, axis=1, keepdims=True)
            p = an.RidgeProbe.fit(r[tr], d[tr], a.ridge_lambda)
            rad.append(an.r2_score(d[te], p.predict(r[te])))
        out[kind] = {"linear_r2": float(np.mean(lin)), "radial_r2": float(np.mean(rad))}
    return out


def _factor_probes(run: Run):
    train, _ = run.data()
    mu = encode_mean(run.vae(), train.x)
    cls_probe = an.ClassProbe().fit(mu, train.cls)
    b_probe = an.RidgeProbe.fit(mu, train.b, run.cfg.analysis.ridge_lambda)
    return cls_probe, b_probe


def stage_transfer(run: Run) -> dict:
    cfg = run.cfg
    if run.gaussian:
        raise ConfigError("transfer: style transfer needs a VAE; use the factors experiment")
    vae, flow = run.vae(), run.flow()
    n = cfg.analysis.n_transfer
    src = run.eval_set().subset(slice(0, n))
    rng = rng_for(cfg, "transfer")
    n_classes = cfg.dataset.n_classes
    tgt = (src.cls + rng.integers(1, n_classes, size=len(src))) % n_classes
    cs = Conditioning(src.cls, src.rgb[:, :2])
    ct = Conditioning(tgt, src.rgb[:, :2])
    with _timed(run, "transfer"):
        x_new = an.style_transfer(vae, flow, src.x, cs, ct, cfg.integrator)
        x_same = an.style_transfer(vae, flow, src.x, cs, cs, cfg.integrator)
    cls_probe, b_probe = _factor_probes(run)
    z_new = encode_mean(vae, x_new)
    pred = cls_probe.predict(z_new)
    b_new = b_probe.predict(z_new)
    recon = decode_array(vae, encode_mean(vae, src.x))
    write_csv(run.out / "transfer.csv",
              ["sample_id", "source_class", "target_class", "predicted_class", "b_source", "b_probe"],
              ([i, int(s), int(t), int(p), fmt(b), fmt(bp)]
               for i, (s, t, p, b, bp) in enumerate(zip(src.cls, tgt, pred, src.b, b_new))),
              run.comment)
    return run.save_metrics("transfer", {
        "n": int(len(src)),
        "target_class_accuracy": float(np.mean(pred == tgt)),
        "b_mae": float(np.mean(np.abs(b_new - src.b))),
        "b_mae_reconstruction_baseline": float(np.mean(np.abs(b_probe.predict(encode_mean(vae, src.x)) - src.b))),
        "identity_transfer_max_abs_error": float(np.max(np.abs(x_same - recon))),
    })


def stage_isolate(run: Run) -> dict:
    cfg = run.cfg
    if run.gaussian:
        raise ConfigError("isolate: feature isolation needs a VAE; use the factors experiment")
    vae, flow = run.vae(), run.flow()
    spec = cfg.dataset
    n = cfg.analysis.n_isolation
    ref = cfg.analysis.isolation_reference_class
    rng = rng_for(cfg, "isolation")
    # noise-free samples from the same generative map, none from the reference class
    cls = (ref + rng.integers(1, spec.n_classes, size=n)) % spec.n_classes
    rgb = rng.uniform(spec.rgb_low, spec.rgb_high, size=(n, 3))
    x = factor_observations(spec, cls, rgb)
    a_mix, _ = mixing_matrices(spec)
    with _timed(run, "isolate"):
        rep = an.feature_isolation_residual(vae, flow, x, Conditioning(np.full(n, ref), rgb[:, :2]),
                                            cfg.integrator)
        own = an.feature_isolation_residual(vae, flow, x, Conditioning(cls, rgb[:, :2]), cfg.integrator)
    direction = (a_mix[:, cls] - a_mix[:, [ref]]).T
    cos = np.sum(rep.residual * direction, axis=1) / (
        np.linalg.norm(rep.residual, axis=1) * np.linalg.norm(direction, axis=1))
    rep.to_csv(run.out / "residuals.csv", comment=run.comment)
    return run.save_metrics("isolate", {
        "n": n,
        "reference_class": ref,
        "cosine_median": float(np.median(cos)),
        "cosine_min": float(np.min(cos)),
        "residual_norm_median": float(np.median(rep.residual_norm)),
        "self_residual_norm_median": float(np.median(own.residual_norm)),
    })


def stage_report(run: Run) -> dict:
    summary = {"experiment": run.cfg.experiment, "seed": run.cfg.seed,
               "config_sha256": run.cfg.digest(), "config": run.cfg.echo(), "metrics": {}}
    for stage in STAGES[:-1]:
        path = run.out / f"metrics_{stage}.json"
        if path.exists():
            summary["metrics"][stage] = json.loads(path.read_text())
    dump_json(run.out / "summary.json", summary)
    return summary


STAGE_FUNCS = {
    "train-vae": stage_train_vae,
    "train-flow": stage_train_flow,
    "invert": stage_invert,
    "probe": stage_probe,
    "transfer": stage_transfer,
    "isolate": stage_isolate,
    "report": stage_report,
}


def run_stage(cfg: ExperimentConfig, stage: str, out: Path | None = None) -> dict:
    run = Run(cfg, out)
    run.write_config()
    result = STAGE_FUNCS[stage](run)
    return result


def run_all(cfg: ExperimentConfig, out: Path | None = None) -> dict:
    run = Run(cfg, out)
    run.write_config()
    stages = ["train-flow", "invert", "probe"] if run.gaussian else [
        "train-vae", "train-flow", "invert", "probe", "transfer", "isolate"]
    for stage in stages:
        log.info("stage %s", stage)
        STAGE_FUNCS[stage](run)
    dump_json(run.out / "timings.json", {k: round(v, 3) for k, v in run.timings.items()})
    return stage_report(run)
