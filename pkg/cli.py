#!/usr/bin/env python3
"""
Command-line entry point.

    python cli.py --config configs/desk.json gen-data
    python cli.py --config configs/desk.json train-zoo
    python cli.py --config configs/desk.json train-mux
    python cli.py --config configs/desk.json evaluate
    python cli.py --config configs/desk.json simulate
    python cli.py --out runs/desk show-runs

Outputs land under run.out: data/, models/, logs/, reports/ and embeddings.csv.
"""

import json
import logging
import os
import sys

import click
import numpy as np
import pandas as pd

import costsim
from config import load_config
from contrastive import distance_matrix, train_joint, venn_gap
from data import generate_planted, load_dataset, save_dataset, spec_from_config
from errors import ConfigError, MuxError, StorageError
from ledger import finish_run, init_ledger, record_epoch, start_run
from model_zoo import build_zoo, load_zoo, save_model
from multiplexer import MuxNet, load_mux, mux_flops, mux_forward, save_mux, train_mux
from router import RoutePolicy, sweep_threshold
from show_runs import show_runs
from tensor_core import Rng, Tensor

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


# ============================================================================
# Run layout
# ============================================================================

def dataset_path(config, split):
    return config.path("data", f"{split}.muxd")


def model_path(config, model_id):
    return config.path("models", f"{model_id}.muxc")


def mux_path(config):
    return config.path("models", "mux.muxc")


def reports_dir(config):
    return config.path("reports")


def _ensure_dirs(config, *names):
    for name in names:
        os.makedirs(config.path(name), exist_ok=True)


def _load_zoo(config):
    paths = [model_path(config, model_id) for model_id in config.model_ids]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise StorageError(f"missing model checkpoints: {', '.join(missing)} (run train-zoo first)")
    return load_zoo(paths)


def _load_mux(config, zoo):
    path = mux_path(config)
    if not os.path.exists(path):
        raise StorageError(f"missing multiplexer checkpoint {path} (run train-mux first)")
    mux = load_mux(path)
    ids = [c.id for c in zoo]
    if list(mux.model_ids) != ids:
        raise ConfigError(f"multiplexer was trained on {mux.model_ids}, config names {ids}")
    return mux


def _policy(config, mode=None):
    return RoutePolicy(
        mode=mode or config["router.mode"],
        threshold=config["router.threshold"],
        offload_threshold=config["router.offload_threshold"],
        average=config["router.average"],
    )


def _profile(config, zoo, mux, input_shape, num_classes):
    ids = [c.id for c in zoo]

    def index_of(key, default):
        model_id = config[key]
        if model_id is None:
            return default
        if model_id not in ids:
            raise ConfigError(f"{key} names unknown model {model_id!r}")
        return ids.index(model_id)

    payload = config["costs.payload_bytes"]
    response = config["costs.response_bytes"]
    return costsim.CostProfile.from_flops(
        model_ids=ids,
        model_flops=[c.flops for c in zoo],
        mux_flops=mux_flops(mux),
        payload_bytes=payload if payload is not None else 4 * int(np.prod(input_shape)),
        response_bytes=response if response is not None else 4 * num_classes,
        mobile_gflops=config["costs.mobile_gflops"],
        cloud_gflops=config["costs.cloud_gflops"],
        mobile_mj_per_mflop=config["costs.mobile_mj_per_mflop"],
        cloud_mj_per_mflop=config["costs.cloud_mj_per_mflop"],
        uplink_mbps=config["costs.uplink_mbps"],
        downlink_mbps=config["costs.downlink_mbps"],
        radio_mw_up=config["costs.radio_mw_up"],
        radio_mw_down=config["costs.radio_mw_down"],
        local_index=index_of("costs.local_model", 0),
        cloud_index=index_of("costs.cloud_model", None),
    )


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _run(ctx, command, body):
    """
    Load the config, open a ledger entry, run `body(config, run_uuid)` and
    map failures to exit codes.
    """
    opts = ctx.obj
    try:
        config = load_config(opts["config"], seed=opts["seed"], out=opts["out"])
    except MuxError as e:
        click.echo(f"❌ {e}", err=True)
        ctx.exit(e.exit_code)

    init_ledger(config.out)
    run_uuid = start_run(config.out, command, config.seed, config.to_dict())
    try:
        body(config, run_uuid)
    except MuxError as e:
        logger.error("%s failed: %s", command, e)
        finish_run(config.out, run_uuid, e.exit_code, str(e))
        click.echo(f"❌ {command}: {e}", err=True)
        ctx.exit(e.exit_code)
    except OSError as e:
        logger.error("%s failed: %s", command, e)
        finish_run(config.out, run_uuid, StorageError.exit_code, str(e))
        click.echo(f"❌ {command}: {e}", err=True)
        ctx.exit(StorageError.exit_code)
    finish_run(config.out, run_uuid, 0)


# ============================================================================
# Commands
# ============================================================================

@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config")
@click.option("--seed", type=int, default=None, help="Override run.seed")
@click.option("--out", type=click.Path(), default=None, help="Override run.out")
@click.option("--log-level", type=click.Choice(LOG_LEVELS, case_sensitive=False), default="INFO")
@click.pass_context
def cli(ctx, config_path, seed, out, log_level):
    """Runtime model multiplexing: data, training, routing and cost reports."""
    logging.basicConfig(level=getattr(logging, log_level.upper()),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config": config_path, "seed": seed, "out": out}


@cli.command("gen-data")
@click.pass_context
def cmd_gen_data(ctx):
    """Generate the planted-expertise train and val splits."""
    def body(config, run_uuid):
        spec = spec_from_config(config, config.seed)
        _ensure_dirs(config, "data")
        for split, key in (("train", "data.train_samples"), ("val", "data.val_samples")):
            dataset, annotations = generate_planted(spec, config[key], config.rng(f"data.{split}").seed, split)
            save_dataset(dataset_path(config, split), dataset)
            pd.DataFrame({"region": annotations.regions, "hardness": annotations.hardness}).to_csv(
                config.path("data", f"{split}_annotations.csv"), index_label="sample_id")
            click.echo(f"✅ {split}: {len(dataset)} samples -> {dataset_path(config, split)}")

    _run(ctx, "gen-data", body)


@cli.command("train-zoo")
@click.pass_context
def cmd_train_zoo(ctx):
    """Jointly train every model with cross-entropy plus the contrastive loss."""
    def body(config, run_uuid):
        train = load_dataset(dataset_path(config, "train"))
        val = load_dataset(dataset_path(config, "val"))
        zoo = build_zoo(config["zoo.models"], train.input_shape, train.num_classes, config["zoo.shared_dim"],
                        Rng(config.seed))

        def on_epoch(rows):
            for row in rows:
                record_epoch(config.out, run_uuid, "zoo", row["model"], row["epoch"], row["loss"], row["val_accuracy"])

        rows = train_joint(zoo, train, config["train.epochs"], config["train.batch_size"], config["train.alpha"],
                           config.rng("zoo.batches"), literal=config["loss.literal_eq2"],
                           eps=config["loss.epsilon"], val=val, on_epoch=on_epoch)

        _ensure_dirs(config, "models", "logs")
        pd.DataFrame(rows).to_csv(config.path("logs", "zoo_training.csv"), index=False)
        last = {row["model"]: row for row in rows[-len(zoo):]} if rows else {}
        for costed in zoo:
            metadata = {"epochs": config["train.epochs"], "alpha": config["train.alpha"],
                        "val_accuracy": last.get(costed.id, {}).get("val_accuracy")}
            save_model(model_path(config, costed.id), costed, config.seed, metadata)
            click.echo(f"✅ {costed.id}: {costed.flops} FLOPs, val accuracy "
                       f"{metadata['val_accuracy'] if metadata['val_accuracy'] is not None else float('nan'):.4f}")

    _run(ctx, "train-zoo", body)


@cli.command("train-mux")
@click.pass_context
def cmd_train_mux(ctx):
    """Train the multiplexer on the frozen zoo."""
    def body(config, run_uuid):
        train = load_dataset(dataset_path(config, "train"))
        zoo = _load_zoo(config)
        mux = MuxNet(train.input_shape, config["mux.layers"], config["mux.meta_dim"], [c.flops for c in zoo],
                     config["zoo.shared_dim"], rng=config.rng("mux.init"), model_ids=[c.id for c in zoo])

        def on_epoch(row):
            record_epoch(config.out, run_uuid, "mux", "mux", row["epoch"], row["loss"])

        rows = train_mux(mux, zoo, train, config["train.mux_epochs"], config["train.batch_size"],
                         config["train.mux_alpha"], config.rng("mux.batches"),
                         lambda_distill=config["train.lambda_distill"], eps=config["loss.epsilon"],
                         on_epoch=on_epoch)

        _ensure_dirs(config, "models", "logs")
        pd.DataFrame(rows).to_csv(config.path("logs", "mux_training.csv"), index=False)
        save_mux(mux_path(config), mux, config.seed,
                 {"epochs": config["train.mux_epochs"], "lambda_distill": config["train.lambda_distill"]})
        final = rows[-1]["loss"] if rows else float("nan")
        click.echo(f"✅ multiplexer: {mux_flops(mux)} FLOPs, final loss {final:.4f} -> {mux_path(config)}")

    _run(ctx, "train-mux", body)


def _embedding_exports(config, zoo, embeddings, bitmaps, present):
    """embeddings.csv and, when enabled, the 2-D PCA projection; zero embeddings are skipped"""
    frames = []
    for i, costed in enumerate(zoo):
        frame = pd.DataFrame(embeddings[i], columns=[f"e{k}" for k in range(embeddings[i].shape[1])])
        frame.insert(0, "model_id", costed.id)
        frame.insert(0, "sample_id", np.arange(len(frame)))
        frame["correct"] = bitmaps[i].astype(int)
        frames.append(frame[present[i]])
    table = pd.concat(frames, ignore_index=True)
    table.to_csv(config.path("embeddings.csv"), index=False)

    if config["evaluate.pca"] and len(table):
        values = np.concatenate([e[present[i]] for i, e in enumerate(embeddings)]).astype(np.float64)
        centered = values - values.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        components = vt[:2]
        # fix the sign of each component
        signs = np.sign(components[np.arange(len(components)), np.argmax(np.abs(components), axis=1)])
        projected = centered @ (components * signs[:, None]).T
        pca = table[["sample_id", "model_id", "correct"]].copy()
        pca["pc1"] = projected[:, 0]
        pca["pc2"] = projected[:, 1] if projected.shape[1] > 1 else 0.0
        pca.to_csv(config.path("embeddings_pca.csv"), index=False)


@cli.command("evaluate")
@click.pass_context
def cmd_evaluate(ctx):
    """Scenario reports, expertise matrix, hardness, embedding geometry and exports."""
    def body(config, run_uuid):
        val = load_dataset(dataset_path(config, "val"))
        zoo = _load_zoo(config)
        mux = _load_mux(config, zoo)
        batch_size = config["evaluate.batch_size"]
        ids = [c.id for c in zoo]

        probs = costsim.model_probabilities(zoo, val, batch_size)
        embeddings, present = costsim.model_embeddings(zoo, val, batch_size)
        bitmaps = costsim.correctness_bitmaps(probs, val.labels)
        profile = _profile(config, zoo, mux, val.input_shape, val.num_classes)

        reports = [
            costsim.evaluate_scenario(val, zoo, mux, _policy(config), profile, "mobile_only", bitmaps, batch_size),
            costsim.evaluate_scenario(val, zoo, mux, _policy(config), profile, "cloud_only", bitmaps, batch_size),
            costsim.evaluate_scenario(val, zoo, mux, _policy(config, "single"), profile, "cloud_hybrid_single",
                                      bitmaps, batch_size),
            costsim.evaluate_scenario(val, zoo, mux, _policy(config, "ensemble"), profile, "cloud_hybrid_ensemble",
                                      bitmaps, batch_size),
        ]
        if len(zoo) == 2:
            reports.append(costsim.evaluate_scenario(val, zoo, mux, _policy(config, "binary_offload"), profile,
                                                     "hybrid", bitmaps, batch_size))
        reports.append(costsim.oracle_report(bitmaps, profile))

        out = reports_dir(config)
        costsim.write_reports(reports, out)
        costsim.expertise_matrix(bitmaps, ids).to_csv(os.path.join(out, "expertise_matrix.csv"))
        histogram = costsim.hardness_histogram(bitmaps)
        pd.DataFrame({"hardness": np.arange(len(histogram)), "count": histogram}).to_csv(
            os.path.join(out, "hardness.csv"), index=False)

        predictions = np.argmax(probs, axis=-1).T
        gap, pull, push, n_pull, n_push = venn_gap(distance_matrix(embeddings), predictions, val.labels, present)
        _write_json(os.path.join(out, "embedding_geometry.json"), {
            "venn_gap": gap, "mean_distance_both_correct": pull, "mean_distance_one_correct": push,
            "both_correct_pairs": n_pull, "one_correct_pairs": n_push,
            "excluded_embeddings": int((~present).sum()),
        })

        weights = np.concatenate([mux_forward(mux, Tensor(val.inputs[s:s + batch_size])).weights
                                  for s in range(0, len(val), batch_size)])
        best, sweep = sweep_threshold(weights, probs, val.labels, [c.flops for c in zoo],
                                      average=config["router.average"])
        pd.DataFrame(sweep).to_csv(os.path.join(out, "threshold_sweep.csv"), index=False)

        _embedding_exports(config, zoo, embeddings, bitmaps, present)

        accuracies = {model_id: float(bitmaps[i].mean()) for i, model_id in enumerate(ids)}
        click.echo("📊 model accuracy: " + ", ".join(f"{k}={v:.4f}" for k, v in accuracies.items()))
        for report in reports:
            click.echo(f"📊 {report.scenario}: accuracy={report.accuracy:.4f} "
                       f"flops={report.expected_flops:.0f} latency={report.expected_latency_ms:.4f}ms "
                       f"local={report.fraction_local:.3f} tnr={report.true_negative_rate:.3f}")
        click.echo(f"📊 venn gap {gap:.4f}; best ensemble threshold {best}")
        click.echo(f"✅ reports written to {out}")

    _run(ctx, "evaluate", body)


def _simulated_profiles(config):
    for entry in config["simulate.profiles"]:
        if entry == "reference":
            yield "reference", costsim.reference_mobile_cloud_profile(), config["simulate.fraction_local"], None
        elif entry == "reference_cloud":
            called = [row[4] for row in costsim.REFERENCE_CLOUD_ZOO]
            yield "reference_cloud", costsim.reference_cloud_profile(), None, called
        elif isinstance(entry, dict):
            name = entry.get("name", "custom")
            profile = costsim.CostProfile.from_dict(entry)
            yield name, profile, entry.get("fraction_local", config["simulate.fraction_local"]), \
                entry.get("called", config["simulate.called"])
        else:
            raise ConfigError(f"unknown simulate profile {entry!r}")


@cli.command("simulate")
@click.pass_context
def cmd_simulate(ctx):
    """Replay the published cost tables and price the configured profiles."""
    def body(config, run_uuid):
        replay = costsim.replay_reference_tables()
        rows = []
        for name, profile, fraction_local, called in _simulated_profiles(config):
            rows.extend(costsim.profile_cost_rows(name, profile, fraction_local, called))

        out = reports_dir(config)
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "simulate_replay.json"), replay)
        pd.DataFrame(rows).to_csv(os.path.join(out, "simulate.csv"), index=False)
        _write_json(os.path.join(out, "simulate.json"), rows)

        mobile_cloud, cloud_zoo = replay["mobile_cloud"], replay["cloud_zoo"]
        click.echo(f"📊 hybrid latency {mobile_cloud['hybrid']['latency_ms']:.4f}ms, "
                   f"energy {mobile_cloud['hybrid']['energy_mj']:.2f}mJ "
                   f"(reported {mobile_cloud['reported_hybrid']['latency_ms']}ms)")
        click.echo(f"📊 expected FLOPs {cloud_zoo['expected_flops_computed'] / 1e9:.3f}G computed, "
                   f"{cloud_zoo['expected_flops_reported'] / 1e9:.2f}G reported")
        click.echo(f"📊 note: {cloud_zoo['discrepancy_note']}")
        click.echo(f"📊 resource saving {cloud_zoo['saving_factor_reported']:.2f}x")
        click.echo(f"✅ simulation written to {out}")

    _run(ctx, "simulate", body)


@cli.command("show-runs")
@click.pass_context
def cmd_show_runs(ctx):
    """List the runs recorded in the ledger."""
    opts = ctx.obj
    try:
        config = load_config(opts["config"], seed=opts["seed"], out=opts["out"])
    except MuxError as e:
        click.echo(f"❌ {e}", err=True)
        ctx.exit(e.exit_code)
    show_runs(config.out)


def main():
    cli(obj={})


if __name__ == "__main__":
    sys.exit(main())
