"""Shared desk-scale runs; each trains once per test session."""

from dataclasses import dataclass

import numpy as np
import pytest

from xvdistill.cli import load_config, train_config, world_config
from xvdistill.dataset import GeoRecord, generate_world, split_dataset
from xvdistill.evaluation import build_reference_db
from xvdistill.model import build_model
from xvdistill.training import fit_input_normalization, pretrain_backbone, train_heads


@dataclass
class Run:
    world: object
    train: list
    val: list
    test: list
    initial: object
    pretrained: object
    model: object
    history: list
    kl: list
    db: object
    config: object


def desk_config():
    return load_config("desk-scale")


def fresh_model(cfg, records):
    r = records[0]
    m = cfg["model"]
    return build_model(len(r.feature), len(r.ground.scene_dist), len(r.ground.image_dist),
                       len(r.ground.counts), hidden=m["hidden"],
                       backbone_widths=tuple(m["backbone_widths"]), seed=cfg["seed"])


def shuffle_labels(records, seed):
    perm = np.random.default_rng([seed, 99]).permutation(len(records))
    return [GeoRecord(r.id, r.lat, r.lon, r.feature, records[p].ground, r.latent_class)
            for r, p in zip(records, perm)]


def run_desk(cfg, shuffled=False):
    world = generate_world(world_config(cfg))
    train, val, test = split_dataset(world.records, cfg["split"], seed=cfg["seed"])
    tcfg = train_config(cfg)
    fit_on = shuffle_labels(train, cfg["seed"]) if shuffled else train
    initial = fit_input_normalization(fresh_model(cfg, world.records), fit_on)
    kl = []
    pretrained = pretrain_backbone(initial, fit_on, tcfg, kl)
    model, history = train_heads(pretrained, fit_on, val, tcfg)
    return Run(world, train, val, test, initial, pretrained, model, history, kl,
               build_reference_db(model, world.records), tcfg)


@pytest.fixture(scope="session")
def desk():
    return run_desk(desk_config())


@pytest.fixture(scope="session")
def desk_control():
    return run_desk(desk_config(), shuffled=True)


PIPELINE = [
    ["generate"],
    ["train"],
    ["eval"],
    ["retrieve", "--query-id", "7", "--k", "3"],
    ["search", "--primary", "image:3", "--secondary", "scene:5", "--top-n", "12"],
    ["heatmap", "--query-id", "7", "--rows", "20", "--cols", "40"],
]


def run_pipeline(out_dir, config="desk-scale", extra=()):
    from xvdistill.cli import main

    for step in PIPELINE:
        code = main(["--config", config, "--out-dir", str(out_dir), *extra, *step])
        assert code == 0, f"{step[0]} exited with {code}"
    return out_dir


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """Two independent end-to-end CLI runs of the desk-scale config."""
    return [run_pipeline(tmp_path_factory.mktemp(f"run{i}")) for i in range(2)]
