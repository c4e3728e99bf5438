"""Command-line pipeline: synth, featurize, train, predict, simulate, evaluate, gradcheck.

Every command reads its inputs from files under ``--out`` (or ``paths.data_dir``)
and writes its outputs there, so stages can be rerun independently.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig, load_config

log = logging.getLogger("lucmodel")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("synth", "featurize", "train", "predict", "simulate", "evaluate", "gradcheck",
            "pipeline")
PIPELINE = ("synth", "featurize", "train", "predict", "simulate", "evaluate")


class _KeyValueFormatter(logging.Formatter):
    def format(self, record):
        ts = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(record.created))
        return f"ts={ts} level={record.levelname.lower()} {record.getMessage()}"


def _kv(**fields) -> str:
    return " ".join(f"{k}={v}" for k, v in fields.items())


class Layout:
    """Artifact paths for one run directory."""

    def __init__(self, out: Path, cfg: PipelineConfig):
        self.out = out
        data = cfg["paths"]["data_dir"]
        self.synth = Path(data) if data else out / "synth"
        self.features = out / "features"
        self.model = out / "model"
        self.predict = out / "predict"
        self.simulate = out / "simulate"
        self.evaluate = out / "evaluate"

    @property
    def stack(self):
        return self.features / "features.lucf"

    @property
    def train_set(self):
        return self.features / "train.lucs"

    @property
    def validation_set(self):
        return self.features / "validation.lucs"

    @property
    def model_prefix(self):
        return self.model / "model"

    @property
    def probs(self):
        return self.predict / "probs.lucf"

    @property
    def sim_prefix(self):
        return self.simulate / "simulated"


def _transition(cfg):
    from .models import TRANSITIONS
    name = cfg["model"]["transition"]
    if name not in TRANSITIONS:
        raise ConfigError([f"model.transition {name!r} not one of {sorted(TRANSITIONS)}"])
    return name, TRANSITIONS[name]


def _train_config(cfg, steps=None, lr=None, batch=None, eval_every=None):
    from .nn.optim import TrainConfig
    t = cfg["train"]
    return TrainConfig(learning_rate=lr or t["learning_rate"], lr_decay_every=t["lr_decay_every"],
                       lr_decay_factor=t["lr_decay_factor"], momentum=t["momentum"],
                       gradient_noise_eta=t["gradient_noise_eta"],
                       gradient_noise_gamma=t["gradient_noise_gamma"],
                       batch_size=batch or t["batch_size"], max_steps=steps or t["max_steps"],
                       rng_seed=t["seed"], eval_every=eval_every or t["eval_every"])


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(cfg, lay: Layout):
    from .synth import PlantedRule, SynthConfig, make_scenario, save_scenario
    s = cfg["synth"]
    _, transition = _transition(cfg)
    config = SynthConfig(width=s["width"], height=s["height"], smoothing_radius=s["smoothing_radius"],
                         cell_size=s["cell_size"], image_noise_sd=s["image_noise_sd"],
                         psf_sigma=s["psf_sigma"], motif_density=s["motif_density"],
                         motif_amplitude=s["motif_amplitude"], n_roads=s["n_roads"],
                         n_stations=s["n_stations"], rng_seed=s["seed"])
    rule = PlantedRule(transition=transition, intercept=s["rule_intercept"],
                       coefficients=(("enrichment", s["beta_enrichment"]),
                                     ("dist_road", s["beta_dist_road"]),
                                     ("trigger", s["beta_trigger"])))
    paths = save_scenario(make_scenario(config, rule), lay.synth)
    log.info(_kv(command="synth", out=lay.synth, files=len(paths)))


def _load_inputs(lay: Layout):
    from .synth import load_scenario
    return load_scenario(lay.synth)


def cmd_featurize(cfg, lay: Layout):
    from .features import (assemble_dataset, build_feature_stack, left_columns_region,
                           region_split, save_dataset, save_feature_stack)
    from .models import CONV_PATCH
    from .synth import CATEGORY_NAMES
    grid_t0, grid_t1, image, aux, _ = _load_inputs(lay)
    _, transition = _transition(cfg)
    stack = build_feature_stack(grid_t0, aux, cfg["features"]["enrichment_window"], CATEGORY_NAMES)
    lay.features.mkdir(parents=True, exist_ok=True)
    save_feature_stack(stack, lay.stack)
    ds = assemble_dataset(grid_t0, grid_t1, stack, image, transition, CONV_PATCH)
    frac = cfg["features"]["validation_fraction"]
    train, validation = region_split(ds, left_columns_region(grid_t0.shape, frac), frac)
    save_dataset(train, lay.train_set)
    save_dataset(validation, lay.validation_set)
    log.info(_kv(command="featurize", features=stack.n_features, train=len(train),
                 validation=len(validation), train_positives=train.positive_indices.size))


def _load_sets(lay: Layout, image):
    from .features import load_dataset
    return load_dataset(lay.train_set, image), load_dataset(lay.validation_set, image)


def _build_spec(cfg, n_features):
    from .models import build_cdae, build_conv_net, build_geo_net
    m = cfg["model"]
    name, _ = _transition(cfg)
    if m["kind"] == "geo":
        return build_geo_net(n_features)
    if m["kind"] == "conv":
        return build_conv_net(name, n_features, m["width_scale"], filter_size=m["filter_size"],
                              spatial_weight=m["spatial_weight"], pooling=m["pooling"])
    return build_cdae(7, n_features, name, m["cdae_width_scale"], filter_size=m["filter_size"],
                      patch_size=m["cdae_patch_size"],
                      corruption_sigma=cfg["train"]["corruption_sigma"])


def _train_subset(train, limit, seed):
    if limit <= 0 or len(train) <= limit:
        return train
    rng = np.random.default_rng([seed, 7])
    pos, neg = train.positive_indices, train.negative_indices
    n_pos = min(pos.size, limit // 2)
    n_neg = min(neg.size, limit - n_pos)
    keep = np.sort(np.r_[rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    return train.subset(keep)


def cmd_train(cfg, lay: Layout):
    from .features import load_feature_stack
    from .models import build_model, save_trained_model, train_cdae, train_classifier
    from .synth import load_scenario
    _, _, image, _, _ = load_scenario(lay.synth)
    stack = load_feature_stack(lay.stack)
    train, validation = _load_sets(lay, image)
    spec = _build_spec(cfg, stack.n_features)
    t = cfg["train"]
    autoencoder = None
    lay.model.mkdir(parents=True, exist_ok=True)
    if spec.kind == "cdae":
        ae_cfg = _train_config(cfg, steps=t["cdae_steps"], lr=t["cdae_learning_rate"],
                               batch=t["cdae_batch_size"], eval_every=t["cdae_steps"])
        ae = train_cdae(spec, train, ae_cfg, t["corruption_sigma"])
        save_trained_model(ae, lay.model / "autoencoder")
        autoencoder = ae.model
        log.info(_kv(command="train", stage="cdae", final_mse=f"{ae.history[-1][2]:.6g}"))
        train = _train_subset(train, t["max_train_samples"], t["seed"])
    model = build_model(spec, t["seed"], autoencoder)
    trained = train_classifier(model, train, validation, _train_config(cfg),
                               jitter_strength=t["jitter_strength"],
                               max_validation=t["max_validation"])
    trained.feature_names = tuple(stack.names)
    trained.means, trained.sds = stack.means, stack.sds
    save_trained_model(trained, lay.model_prefix)
    for step, lr, tl, vl in trained.history:
        log.info(_kv(command="train", step=step, lr=f"{lr:.6g}", train_loss=f"{tl:.6g}",
                     validation_loss=f"{vl:.6g}"))


def cmd_predict(cfg, lay: Layout):
    from .features import Dataset, load_feature_stack
    from .models import export_activations, load_trained_model, probability_map
    from .raster import save_field
    from .synth import load_scenario
    grid_t0, _, image, _, _ = load_scenario(lay.synth)
    stack = load_feature_stack(lay.stack)
    trained = load_trained_model(lay.model_prefix)
    src = trained.transition[0]
    rows, cols = np.nonzero((grid_t0.data == src) & grid_t0.valid_mask())
    ds = Dataset(rows, cols, np.zeros(rows.size, dtype=np.uint8), stack.at(rows, cols),
                 tuple(trained.transition), 0, image)
    probs = probability_map(trained, ds, grid_t0.shape)
    lay.predict.mkdir(parents=True, exist_ok=True)
    save_field(np.nan_to_num(probs, nan=0.0), lay.probs, float64=True)
    if cfg["model"]["export_activations"] and trained.model.kind in ("conv", "cdae"):
        size = trained.model.patch_size
        patch = ds.patch_batch(np.array([0]), size)[0]
        act = export_activations(trained, patch, None, lay.predict / "activations.lucf")
        log.info(_kv(command="predict", activations=act.shape[0]))
    log.info(_kv(command="predict", cells=rows.size, mean_prob=f"{np.nanmean(probs):.6g}"))


def _ca_params(cfg):
    from .ca import CaParams
    c = cfg["ca"]
    return CaParams(threshold=c["threshold"], r=c["r"], expander_threshold_t=c["t"],
                    patch_size_mu=c["patch_size_mu"], patch_size_sigma=c["patch_size_sigma"],
                    isometry=c["isometry"], prune_factor=c["prune_factor"], rng_seed=c["seed"])


def cmd_simulate(cfg, lay: Layout):
    from .ca import TransitionProbMap, run_simulation, save_simulation
    from .models import load_trained_model
    from .raster import load_field
    from .synth import load_scenario
    grid_t0, _, _, _, _ = load_scenario(lay.synth)
    transition = load_trained_model(lay.model_prefix).transition
    probs = load_field(lay.probs)[0]
    pmap = TransitionProbMap.from_grid(grid_t0, transition, probs)
    params = _ca_params(cfg)
    simulated, alloc = run_simulation(grid_t0, [pmap], params)
    lay.simulate.mkdir(parents=True, exist_ok=True)
    save_simulation(simulated, alloc, lay.sim_prefix)
    log.info(_kv(command="simulate", quota=sum(alloc.transitioned(t) for t in [transition]),
                 patches=len(alloc.records), events=len(alloc.events)))


def cmd_evaluate(cfg, lay: Layout):
    from .metrics import evaluate_probability_map, evaluate_simulated_map
    from .raster import load_field, load_grid
    from .synth import load_scenario
    grid_t0, grid_t1, _, _, _ = load_scenario(lay.synth)
    simulated = load_grid(lay.sim_prefix.with_suffix(".lucr"))
    m = cfg["metrics"]
    report = evaluate_simulated_map(grid_t0, grid_t1, simulated, m["neighborhoods"], m["sigma"],
                                    m["shuffles"], m["seed"])
    _, (src, dst) = _transition(cfg)
    if lay.probs.exists():
        probs = load_field(lay.probs)[0]
        eligible = (grid_t0.data == src) & grid_t0.valid_mask()
        roc, pr = evaluate_probability_map(probs, eligible, grid_t1.data == dst)
        report.parameters["auc_roc"] = f"{roc:.12g}"
        report.parameters["auc_pr"] = f"{pr:.12g}"
    lay.evaluate.mkdir(parents=True, exist_ok=True)
    (lay.evaluate / "report.txt").write_text(report.to_text())
    (lay.evaluate / "report.csv").write_text(report.to_csv())
    log.info(_kv(command="evaluate", kappa=f"{report.kappa:.6g}",
                 kappa_simulation=f"{report.kappa_simulation:.6g}"))
    sys.stdout.write(report.to_text())


def cmd_gradcheck(cfg, lay: Layout) -> int:
    from .nn.gradcheck import layer_suite
    errors = layer_suite(cfg["train"]["seed"])
    worst = 0.0
    for name, err in errors.items():
        sys.stdout.write(f"{name:<22} {err:.3e}\n")
        worst = max(worst, err)
    ok = worst < 1e-5
    log.info(_kv(command="gradcheck", max_relative_error=f"{worst:.3e}", passed=ok))
    return EXIT_OK if ok else EXIT_NUMERIC


HANDLERS = {"synth": cmd_synth, "featurize": cmd_featurize, "train": cmd_train,
            "predict": cmd_predict, "simulate": cmd_simulate, "evaluate": cmd_evaluate,
            "gradcheck": cmd_gradcheck}


def run(command: str, cfg: PipelineConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"resolved_{command}.ini").write_text(cfg.to_ini())
    lay = Layout(out, cfg)
    steps = PIPELINE if command == "pipeline" else (command,)
    for step in steps:
        status = HANDLERS[step](cfg, lay)
        if status:
            return status
    return EXIT_OK


def _exit_code(exc: BaseException) -> int:
    """Exit status for a failure; unexpected exception types propagate."""
    from .features import EnrichmentError
    from .raster import RasterFormatError
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FloatingPointError):
        return EXIT_NUMERIC
    if isinstance(exc, (RasterFormatError, EnrichmentError, FileNotFoundError, KeyError,
                        ValueError, OSError)):
        return EXIT_DATA
    raise exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lucmodel", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="INI config file (defaults apply when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one key, e.g. --set train.max_steps=200 (repeatable)")
    p.add_argument("--out", type=Path, default=Path("lucmodel-out"), help="run directory")
    p.add_argument("--seed", type=int, help="derive every module seed from this value")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"lucmodel {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    log.propagate = False
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        for section, values in cfg.raw.items():
            log.info(_kv(config=section, **{k: str(v).replace(" ", "") for k, v in values.items()}))
        return run(args.command, cfg, args.out)
    except Exception as exc:
        code = _exit_code(exc)
        problems = getattr(exc, "problems", [str(exc)])
        for prob in problems:
            log.error(_kv(command=args.command, error=type(exc).__name__, detail=repr(prob)))
        return code


if __name__ == "__main__":
    sys.exit(main())
