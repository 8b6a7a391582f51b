"""Command-line driver: ingest, train, explain, interpolate, evaluate.

Instances are addressed by their position in the evaluation split, which is
the seeded shuffle of the dataset left over after the training fraction.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import evaluation as ev
from . import explain as ex
from . import imgio, neighgen, surrogate
from .aae import AaeModel, AaeTrainConfig, reconstruction_rmse, train_aae
from .blackbox import BuiltinBlackBox, ExternalBlackBox, train_builtin
from .datasets import Dataset, load_idx, split_indices
from .errors import ConfigError, LatexplainError
from .nncore import TrainConfig
from .seeding import derive_seed

log = logging.getLogger("latexplain")

NUM_CLASSES = 10
AAE_FILE = "aae.bin"
BB_FILE = "blackbox.mlp"


# -- plumbing ----------------------------------------------------------------------


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _dataset(cfg) -> Dataset:
    path = cfg.dataset_path
    if not path.is_file():
        raise ConfigError(f"missing dataset {path}; run `ingest` first", artifact=str(path))
    return Dataset.load(path)


def _splits(cfg, ds: Dataset):
    f = cfg.data.train_fraction
    if not 0.0 < f < 1.0:
        raise ConfigError("data.train_fraction must lie in (0, 1)", key="data.train_fraction")
    return split_indices(len(ds), [f, 1.0 - f], cfg.sub_seed("split"))


def _aae(cfg) -> AaeModel:
    path = Path(cfg.out) / AAE_FILE
    if not path.is_file():
        raise ConfigError(f"missing autoencoder checkpoint {path}; run `train-aae` first", artifact=str(path))
    return AaeModel.load(path)


def _blackbox(cfg, n: int):
    if cfg.blackbox.command:
        return ExternalBlackBox(cfg.blackbox.command, n, NUM_CLASSES, timeout=cfg.blackbox.timeout)
    path = Path(cfg.out) / BB_FILE
    if not path.is_file():
        raise ConfigError(f"missing black-box checkpoint {path}; run `train-bb` first", artifact=str(path))
    return BuiltinBlackBox.load(path)


def explain_config(cfg, instance: int) -> ex.ExplainConfig:
    """Per-instance explanation settings; seeds are derived from the global seed."""
    base = derive_seed(cfg.sub_seed("explain"), f"instance.{instance}")
    g = cfg.neighgen
    gen = neighgen.GenConfig(
        N=g.size, balance=g.balance, population=g.population, generations=g.generations,
        crossover_prob=g.crossover_prob, mutation_prob=g.mutation_prob, mutation_sigma=g.mutation_sigma,
        validity_threshold=cfg.aae.validity_threshold, tournament_size=g.tournament_size,
        elite_fraction=g.elite_fraction, oversampling=g.oversampling, seed=derive_seed(base, "neighgen"),
    )
    tree = surrogate.TreeConfig(max_depth=cfg.surrogate.max_depth, min_leaf=cfg.surrogate.min_leaf)
    e = cfg.explain
    return ex.ExplainConfig(gen=gen, tree=tree, n_exemplars=e.n_exemplars, n_counter=e.n_counter,
                            budget=e.budget, batch=e.batch, attempts=e.attempts, seed=derive_seed(base, "sampling"))


class _Context:
    """Dataset, split, models and cached explanations shared by one command."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.ds = _dataset(cfg)
        self.train_idx, self.eval_idx = _splits(cfg, self.ds)
        self.model = _aae(cfg)
        self.bb = _blackbox(cfg, self.ds.pixels.shape[1])
        if self.model.n != self.ds.pixels.shape[1]:
            raise ConfigError("autoencoder and dataset disagree on the image size")
        self._cache: dict[int, ex.Explanation | LatexplainError] = {}

    def image(self, pos: int) -> np.ndarray:
        if not 0 <= pos < len(self.eval_idx):
            raise ConfigError(f"instance {pos} outside the evaluation split (size {len(self.eval_idx)})")
        return self.ds.pixels[self.eval_idx[pos]].astype(np.float64) / 255.0

    def explain(self, pos: int) -> ex.Explanation:
        if pos not in self._cache:
            try:
                self._cache[pos] = ex.explain(self.image(pos), self.bb, self.model, explain_config(self.cfg, pos))
            except LatexplainError as err:
                self._cache[pos] = err
        got = self._cache[pos]
        if isinstance(got, LatexplainError):
            raise got
        return got

    def try_explain(self, pos: int):
        try:
            return self.explain(pos), None
        except LatexplainError as err:
            return None, err


# -- commands ----------------------------------------------------------------------


def cmd_ingest(cfg, args) -> dict:
    images = args.images or cfg.data.images
    labels = args.labels or cfg.data.labels
    if not images or not labels:
        raise ConfigError("ingest needs --images and --labels (or data.images / data.labels)")
    for p in (images, labels):
        if not Path(p).is_file():
            raise ConfigError(f"missing input file {p}", artifact=str(p))
    ds = load_idx(images, labels)
    out = Path(cfg.out)
    ds.save(out / "dataset.lxd")
    info = {"count": len(ds), "rows": ds.rows, "cols": ds.cols,
            "class_counts": np.bincount(ds.labels, minlength=NUM_CLASSES).tolist()}
    _write_json(out / "ingest.json", info)
    return info


def cmd_train_bb(cfg, args) -> dict:
    ds = _dataset(cfg)
    tr, te = _splits(cfg, ds)
    b = cfg.blackbox
    tcfg = TrainConfig(learning_rate=b.learning_rate, epochs=b.epochs, batch_size=b.batch_size,
                       seed=cfg.sub_seed("blackbox"))
    images = ds.images
    bb = train_builtin(images[tr], ds.labels[tr], hidden=b.hidden, cfg=tcfg, num_classes=NUM_CLASSES,
                       test=(images[te], ds.labels[te]))
    out = Path(cfg.out)
    bb.save(out / BB_FILE)
    metrics = {"train_accuracy": bb.report["train_accuracy"], "test_accuracy": bb.report["test_accuracy"],
               "epoch_loss": bb.report["train_loss"], "train_size": len(tr), "test_size": len(te)}
    _write_json(out / "blackbox_metrics.json", metrics)
    return {k: metrics[k] for k in ("train_accuracy", "test_accuracy")}


def aae_train_config(cfg) -> AaeTrainConfig:
    a = cfg.aae
    return AaeTrainConfig(
        k=a.k,
        recon_cfg=TrainConfig(learning_rate=a.learning_rate, epochs=a.epochs, batch_size=a.batch_size),
        reg_cfg=TrainConfig(learning_rate=a.reg_learning_rate, epochs=a.epochs, batch_size=a.batch_size,
                            beta1=a.reg_beta1),
        validity_threshold=a.validity_threshold, hidden=a.hidden, disc_hidden=a.disc_hidden,
    )


def cmd_train_aae(cfg, args) -> dict:
    ds = _dataset(cfg)
    tr, te = _splits(cfg, ds)
    images = ds.images
    model = train_aae(images[tr], aae_train_config(cfg), seed=cfg.sub_seed("aae"))
    out = Path(cfg.out)
    model.save(out / AAE_FILE)
    metrics = {"rmse_train": reconstruction_rmse(model, images[tr]),
               "rmse_test": reconstruction_rmse(model, images[te]),
               "k": model.k, "history": model.history}
    _write_json(out / "aae_metrics.json", metrics)
    return {k: metrics[k] for k in ("rmse_train", "rmse_test")}


def _parse_indices(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def write_explanation(expl: ex.Explanation, folder: Path, rows: int, cols: int) -> dict:
    folder.mkdir(parents=True, exist_ok=True)
    imgio.write_pgm(folder / "source.pgm", expl.source, rows, cols)
    ex_files = [f"exemplar_{i:02d}.pgm" for i in range(len(expl.exemplars))]
    for f, img in zip(ex_files, expl.exemplars.images):
        imgio.write_pgm(folder / f, img, rows, cols)
    cx_files = [f"counter_{i:02d}.pgm" for i in range(len(expl.counter_exemplars))]
    for f, img in zip(cx_files, expl.counter_exemplars.images):
        imgio.write_pgm(folder / f, img, rows, cols)
    (folder / "saliency.csv").write_text(imgio.saliency_csv(expl.saliency, cols))
    imgio.write_pgm(folder / "saliency_bands.pgm", imgio.bands_image(ex.saliency_bands(expl.saliency)), rows, cols)
    doc = ex.manifest(expl, "source.pgm", ex_files, cx_files, "saliency.csv")
    (folder / "manifest.json").write_text(ex.dumps_manifest(doc))
    return doc


def cmd_explain(cfg, args) -> dict:
    ctx = _Context(cfg)
    done = []
    for pos in _parse_indices(args.indices):
        expl = ctx.explain(pos)
        write_explanation(expl, Path(cfg.out) / "explain" / f"{pos:05d}", ctx.ds.rows, ctx.ds.cols)
        done.append({"instance": pos, "label": expl.source_label, "fidelity": expl.fidelity,
                     "exemplars": len(expl.exemplars), "counter_exemplars": len(expl.counter_exemplars)})
    return {"explained": done}


def cmd_interpolate(cfg, args) -> dict:
    ctx = _Context(cfg)
    expl = ctx.explain(args.instance)
    cfs = [c for c in expl.counterfactuals if c.label != expl.source_label]
    if not 0 <= args.counterfactual < len(cfs):
        raise ConfigError(f"instance {args.instance} has {len(cfs)} counterfactual rules", stage="interpolate")
    cf = cfs[args.counterfactual]
    ecfg = explain_config(cfg, args.instance)
    target = ex.generate_counter_exemplars([cf], ctx.model, ctx.bb, 1, ecfg.budget,
                                           derive_seed(ecfg.seed, "interpolate"),
                                           threshold=cfg.aae.validity_threshold, batch=ecfg.batch)
    steps = args.steps or cfg.explain.steps
    seq = ex.interpolate(expl.latent, target.latents[0], cf, steps, ctx.model, ctx.bb)
    folder = Path(cfg.out) / "interpolate" / f"{args.instance:05d}_{args.counterfactual}"
    folder.mkdir(parents=True, exist_ok=True)
    files = []
    for i, st in enumerate(seq.steps):
        files.append(f"step_{i:02d}.pgm")
        imgio.write_pgm(folder / files[-1], st.image, ctx.ds.rows, ctx.ds.cols)
    doc = {"instance": args.instance, "source_label": expl.source_label, "counterfactual": cf.to_json(),
           "steps": [{"file": f, "label": st.label, "satisfies": st.satisfies,
                      "latent": [float(v) for v in st.latent]} for f, st in zip(files, seq.steps)],
           "label_blocks": ex.label_blocks(seq.labels)}
    _write_json(folder / "interpolation.json", doc)
    return {"labels": seq.labels, "folder": str(folder)}


METRICS = ("fidelity", "knn", "relevance", "coherence", "stability")


def _explained(ctx, count: int):
    """First ``count`` evaluation instances with their explanation or failure."""
    rows, good = [], []
    for pos in range(count):
        expl, err = ctx.try_explain(pos)
        rows.append((pos, expl, err))
        if expl is not None:
            good.append((pos, expl))
    return rows, good


def _failure_row(pos, err) -> dict:
    return {"instance": pos, "error": type(err).__name__, "stage": err.stage or ""}


def cmd_evaluate(cfg, args) -> dict:
    ctx = _Context(cfg)
    count = args.instances or cfg.eval.instances
    out = Path(cfg.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    metric = args.metric
    summary: dict = {"metric": metric, "instances": count, "explainer": args.explainer}

    if metric == "fidelity":
        rows_raw, good = _explained(ctx, count)
        rows = []
        for pos, expl, err in rows_raw:
            if expl is None:
                rows.append(_failure_row(pos, err))
            else:
                rows.append({"instance": pos, "label": expl.source_label, "fidelity": expl.fidelity,
                             "neighborhood_size": expl.neighborhood_size, "warnings": ";".join(expl.warnings)})
        vals = np.array([e.fidelity for _, e in good])
        summary.update(_stats(vals), failures=count - len(good))
        columns = ["instance", "label", "fidelity", "neighborhood_size", "warnings", "error", "stage"]

    elif metric == "knn":
        _, good = _explained(ctx, count)
        test_pos = np.arange(count, min(count + cfg.eval.knn_test, len(ctx.eval_idx)))
        test_x = ctx.ds.images[ctx.eval_idx[test_pos]]
        test_y = ctx.ds.labels[ctx.eval_idx[test_pos]]
        rows = []
        for n in cfg.eval.knn_sizes:
            ref_x, ref_y = ev.exemplar_reference([e for _, e in good], n)
            rows.append({"n": n, "reference_size": len(ref_y),
                         "accuracy": ev.knn_exemplar_accuracy(ref_x, ref_y, test_x, test_y)})
        summary.update(test_size=len(test_y), explained=len(good), curve=rows)
        columns = ["n", "reference_size", "accuracy"]

    elif metric == "relevance":
        images, sals = _saliencies(ctx, count, args.explainer)
        rows = ev.relevance_curve(images, sals, ctx.bb, taus=cfg.eval.taus, colors=cfg.eval.colors)
        summary.update(explained=len(images), curve=rows)
        columns = ["color", "tau", "relevance"]

    else:
        rcfg = ev.RobustnessConfig(epsilon=cfg.eval.epsilon, noise_rate=cfg.eval.noise_rate,
                                   replicas=cfg.eval.replicas, max_tries=cfg.eval.max_tries,
                                   max_neighbors=cfg.eval.max_neighbors, seed=cfg.sub_seed("eval"))
        fn = _saliency_fn(ctx, args.explainer)
        images = ctx.ds.images[ctx.eval_idx[:count]]
        if metric == "coherence":
            pool = ctx.ds.images[ctx.eval_idx[count:]]
            report = ev.coherence(images, fn, pool, ctx.bb, rcfg)
        else:
            report = ev.stability(images, fn, ctx.bb, rcfg)
        rows = [{"instance": i, "lipschitz": v, "neighbors": c}
                for i, (v, c) in enumerate(zip(report.values, report.neighbors))]
        summary.update(report.summary())
        columns = ["instance", "lipschitz", "neighbors"]

    (out / f"{metric}.csv").write_text(ev.rows_to_csv(rows, columns))
    (out / f"{metric}.json").write_text(ev.summary_json(summary))
    return {k: v for k, v in summary.items() if k != "curve"}


def _stats(vals) -> dict:
    if not len(vals):
        return {"mean": None, "std": None, "median": None, "min": None, "count": 0}
    return {"mean": float(vals.mean()), "std": float(vals.std()), "median": float(np.median(vals)),
            "min": float(vals.min()), "count": int(len(vals))}


def _saliencies(ctx, count, explainer):
    if explainer == "random":
        fn = ev.random_saliency_explainer(ctx.cfg.sub_seed("random"))
        images = ctx.ds.images[ctx.eval_idx[:count]]
        return images, [fn(x) for x in images]
    _, good = _explained(ctx, count)
    return np.array([ctx.image(pos) for pos, _ in good]), [e.saliency for _, e in good]


def _saliency_fn(ctx, explainer):
    if explainer == "random":
        return ev.random_saliency_explainer(ctx.cfg.sub_seed("random"))
    ecfg = explain_config(ctx.cfg, 0)

    def fn(x):
        # one fixed seed: the explanation is a function of the image alone
        return ex.explain(x, ctx.bb, ctx.model, ecfg).saliency

    return fn


# -- entry point -------------------------------------------------------------------


COMMANDS = {
    "ingest": cmd_ingest,
    "train-bb": cmd_train_bb,
    "train-aae": cmd_train_aae,
    "explain": cmd_explain,
    "interpolate": cmd_interpolate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key, e.g. aae.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="latexplain", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("ingest", parents=[common], help="convert IDX files into a dataset file")
    s.add_argument("--images")
    s.add_argument("--labels")
    sub.add_parser("train-bb", parents=[common], help="train the built-in black-box classifier")
    sub.add_parser("train-aae", parents=[common], help="train the adversarial autoencoder")
    s = sub.add_parser("explain", parents=[common], help="explain evaluation-split instances")
    s.add_argument("--indices", default="0", help="e.g. 0,3,10-12")
    s = sub.add_parser("interpolate", parents=[common], help="latent morph toward a counterfactual")
    s.add_argument("--instance", type=int, default=0)
    s.add_argument("--counterfactual", type=int, default=0)
    s.add_argument("--steps", type=int)
    s = sub.add_parser("evaluate", parents=[common], help="run one evaluation metric")
    s.add_argument("--metric", choices=METRICS, required=True)
    s.add_argument("--instances", type=int)
    s.add_argument("--explainer", choices=("abele", "random"), default="abele")
    return p


def resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        config_mod.set_key(cfg, key.strip(), value)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config_mod.dumps(cfg))
        result = COMMANDS[args.command](cfg, args)
    except LatexplainError as err:
        print(json.dumps({"error": type(err).__name__, **err.to_dict()}, sort_keys=True, default=str), file=sys.stderr)
        return 2
    except (ValueError, OSError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
