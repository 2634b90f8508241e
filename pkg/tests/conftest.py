"""Shared fixtures: tiny training scenes and the full-scale benchmark run.

The benchmark fixture (``bench``) builds one 8-object scene, trains the
progressive schedule plus the two comparison runs (appearance-frozen mode
and dropped-mask corruption), and hands the decoded results to every test
that scores segmentation quality. It is session-scoped because each
training run costs ~30 s.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from igsplat.scene_model import (
    ModelConfig,
    decode_gaussians,
    init_anchors,
    init_decoder,
    resolve_model_config,
)
from igsplat.synthdata import ObjectSpec, SceneSpec, generate_scene, load_scene_dir, write_scene_dir
from igsplat.trainer import DEFAULT_LEARNING_RATES, Schedule, TrainView, train

BENCH_PALETTE = [
    [0.85, 0.15, 0.15],
    [0.85, 0.15, 0.15],  # same color as object 0: the adjacent pair
    [0.20, 0.75, 0.25],
    [0.90, 0.70, 0.10],
    [0.60, 0.25, 0.75],
    [0.10, 0.75, 0.70],
    [0.90, 0.45, 0.15],
    [0.15, 0.55, 0.85],
]
BENCH_KINDS = ["sphere", "sphere", "box", "sphere", "box", "sphere", "box", "box"]
BENCH_RING_Z = [0.3, 0.72, 0.3, 0.72, 0.3, 0.72]
BENCH_NUM_CLASSES = 5
BENCH_EMBED_DIM = 32


def bench_objects() -> list[ObjectSpec]:
    """Eight objects: two same-color spheres almost touching at the center
    (voxel-adjacent, so only feature distance keeps them apart) plus six
    objects on a staggered ring."""
    half_sep = (2 * 0.36 + 0.2) / 2
    centers = [np.array([0.0, -half_sep, 0.5]), np.array([0.0, half_sep, 0.5])]
    centers += [
        np.array([1.35 * math.cos(2 * math.pi * k / 6 + 0.5),
                  1.35 * math.sin(2 * math.pi * k / 6 + 0.5),
                  BENCH_RING_Z[k]])
        for k in range(6)
    ]
    objs = []
    for k, center in enumerate(centers):
        size = [0.36] * 3 if BENCH_KINDS[k] == "sphere" else [0.33, 0.30, 0.36]
        objs.append(
            ObjectSpec(
                kind=BENCH_KINDS[k],
                center=center,
                size=np.array(size),
                color=np.array(BENCH_PALETTE[k]),
                class_id=k % BENCH_NUM_CLASSES,
            )
        )
    return objs


def bench_scene_spec() -> SceneSpec:
    return SceneSpec(
        objects=bench_objects(),
        points_per_object=250,  # 2000 anchors total
        num_cameras=20,
        image_size=64,
        orbit_radius=3.6,
        orbit_height=[2.4, -1.5],
        num_classes=BENCH_NUM_CLASSES,
        seed=3,
    )


def bench_schedule(mode: str = "progressive") -> Schedule:
    rates = dict(DEFAULT_LEARNING_RATES)
    rates.update(features=0.08, decoder=7e-4, embeddings=7e-4)
    return Schedule(
        total_steps=1000,
        t1=300,
        t2=600,
        learning_rates=rates,
        phase_learning_rates={"joint": {"features": 0.02}},
        mode=mode,
    )


BENCH_MODEL = dict(base_scale=0.08, anchor_seed=7, decoder_seed=8, train_seed=11)
BENCH_INSTANTIATE = dict(s=100, r=0.2, gamma=0.1, lambda_pos=1.75, seed=5)


def bench_config_json(out_dir: str) -> dict:
    """The same benchmark expressed as a CLI run config."""
    objs = [
        {
            "kind": o.kind,
            "center": [float(v) for v in o.center],
            "size": [float(v) for v in o.size],
            "color": [float(v) for v in o.color],
            "class_id": o.class_id,
        }
        for o in bench_objects()
    ]
    return {
        "scene": {
            "synth": {
                "objects": objs,
                "points_per_object": 250,
                "num_cameras": 20,
                "image_size": 64,
                "orbit_radius": 3.6,
                "orbit_height": [2.4, -1.5],
                "num_classes": BENCH_NUM_CLASSES,
                "seed": 3,
            },
            "embedding_dim": BENCH_EMBED_DIM,
            "embedding_sigma": 0.1,
            "embedding_seed": 9,
        },
        "model": {"embedding_dim": 16, "base_scale": 0.08, "seed": 7},
        "train": {
            "total_steps": 1000,
            "t1": 300,
            "t2": 600,
            "learning_rates": {"features": 0.08, "decoder": 7e-4, "embeddings": 7e-4},
            "phase_learning_rates": {"joint": {"features": 0.02}},
            "seed": 11,
            "freeze_positions": True,
        },
        "instantiate": {
            "samples": 100,
            "voxel_size": 0.2,
            "gamma": 0.1,
            "lambda_pos": 1.75,
            "seed": 5,
        },
        "output": out_dir,
    }


def train_bench(scene_dir: str, mode: str):
    """Train on an on-disk scene; returns (splats, anchors, decoder, gt arrays)."""
    (_, points, _, gt_inst, gt_cls, cameras, targets, masks) = load_scene_dir(scene_dir)
    model = ModelConfig(base_scale=BENCH_MODEL["base_scale"])
    d_e, rho, s0 = resolve_model_config(model, points)
    anchors = init_anchors(points, model, BENCH_MODEL["anchor_seed"])
    decoder = init_decoder(d_e, rho, s0, BENCH_MODEL["decoder_seed"])
    anchors.train_positions = False
    views = [TrainView(c, t, m) for c, t, m in zip(cameras, targets, masks)]
    train(anchors, decoder, views, bench_schedule(mode), BENCH_MODEL["train_seed"])
    return decode_gaussians(anchors, decoder), anchors, decoder, gt_inst, gt_cls


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    """Scene + three trained models (progressive, frozen, corrupted masks)."""
    root = tmp_path_factory.mktemp("bench")
    clean_dir = str(root / "clean")
    drop_dir = str(root / "drop")
    timings = {}

    t0 = time.time()
    write_scene_dir(
        generate_scene(bench_scene_spec()), clean_dir,
        embedding_dim=BENCH_EMBED_DIM, embedding_sigma=0.1, embedding_seed=9,
    )
    timings["generate"] = time.time() - t0

    t0 = time.time()
    splats, anchors, decoder, gt_inst, gt_cls = train_bench(clean_dir, "progressive")
    timings["train"] = time.time() - t0

    write_scene_dir(
        generate_scene(bench_scene_spec()), drop_dir,
        embedding_dim=BENCH_EMBED_DIM, embedding_sigma=0.1, embedding_seed=9,
        p_drop=0.1, corruption_seed=17,
    )
    splats_frozen, *_ = train_bench(clean_dir, "appearance_frozen")
    splats_drop, _, _, gt_inst_drop, _ = train_bench(drop_dir, "progressive")

    return {
        "scene_dir": clean_dir,
        "splats": splats,
        "anchors": anchors,
        "decoder": decoder,
        "gt_splat_instances": np.repeat(gt_inst, 5),
        "gt_splat_classes": np.repeat(gt_cls, 5),
        "splats_frozen": splats_frozen,
        "splats_drop": splats_drop,
        "gt_splat_instances_drop": np.repeat(gt_inst_drop, 5),
        "timings": timings,
    }


@pytest.fixture()
def tiny_scene(tmp_path):
    """A 3-object scene small enough for per-test training smoke checks."""
    spec = SceneSpec(
        num_objects=3,
        points_per_object=80,
        num_cameras=6,
        image_size=32,
        orbit_radius=2.4,
        orbit_height=[1.6, -1.0],
        center_height=0.3,
        placement_extent=0.7,
        num_classes=3,
        seed=2,
    )
    scene_dir = str(tmp_path / "scene")
    write_scene_dir(generate_scene(spec), scene_dir, embedding_dim=16,
                    embedding_sigma=0.05, embedding_seed=4)
    (_, points, _, gt_inst, gt_cls, cameras, targets, masks) = load_scene_dir(scene_dir)
    return {
        "dir": scene_dir,
        "points": points,
        "gt_instances": gt_inst,
        "gt_classes": gt_cls,
        "cameras": cameras,
        "targets": targets,
        "masks": masks,
        "views": [TrainView(c, t, m) for c, t, m in zip(cameras, targets, masks)],
    }
