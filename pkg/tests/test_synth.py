import hashlib
import os

import numpy as np
import pytest

from mpseg.synth import (GenerationError, SchemaVersionError, Scene, SynthConfig,
                         basis_prototypes, generate_scene, load_dataset,
                         random_unit_prototypes, save_dataset, synth_features)


def small_cfg(**kw):
    base = dict(height=16, width=16, num_categories=3, feat_dim=8,
                instance_range=(1, 3), size_range=(2, 5), noise_sigma=0.1, seed=42)
    base.update(kw)
    return SynthConfig(**base)


def test_determinism_same_seed_index():
    cfg = small_cfg()
    a = generate_scene(cfg, 5)
    b = generate_scene(cfg, 5)
    assert a == b


def test_different_index_differs():
    cfg = small_cfg()
    assert generate_scene(cfg, 0) != generate_scene(cfg, 1)


def test_single_instance_range():
    cfg = small_cfg(instance_range=(1, 1))
    for i in range(20):
        assert generate_scene(cfg, i).num_instances == 1


def test_property_scan_categories_disjoint_nonempty():
    cfg = SynthConfig(seed=7)
    for i in range(1000):
        scene = generate_scene(cfg, i)
        occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
        assert 1 <= scene.num_instances <= cfg.instance_range[1]
        for cat, mask in scene.instances:
            assert 0 <= cat < 4
            assert mask.area > 0
            assert not (mask.bits & occupied).any()
            occupied |= mask.bits


def test_features_sigma_zero_exact_prototypes():
    cfg = small_cfg(noise_sigma=0.0)
    scene = generate_scene(cfg, 0)
    pyr = synth_features(scene, cfg)
    grid = scene.category_grid(background_id=cfg.num_categories)
    protos = np.vstack([cfg.prototypes, cfg.background_proto[None, :]])
    assert np.array_equal(pyr.embed, protos[grid])


def test_features_orthonormal_dots():
    cfg = small_cfg(noise_sigma=0.0)
    scene = generate_scene(cfg, 1)
    pyr = synth_features(scene, cfg)
    grid = scene.category_grid(background_id=cfg.num_categories)
    flat = pyr.embed.reshape(-1, cfg.feat_dim)
    labels = grid.reshape(-1)
    dots = flat @ flat.T
    same = labels[:, None] == labels[None, :]
    assert np.all(dots[same] == 1.0)
    assert np.all(dots[~same] == 0.0)


def test_features_noisy_intra_beats_inter():
    protos, bg = random_unit_prototypes(3, 8, seed=9)
    cfg = small_cfg(noise_sigma=0.1, prototypes=protos, background_proto=bg)
    intra, inter = [], []
    for i in range(100):
        scene = generate_scene(cfg, i)
        pyr = synth_features(scene, cfg)
        labels = scene.category_grid(background_id=cfg.num_categories).reshape(-1)
        flat = pyr.embed.reshape(-1, cfg.feat_dim)
        dots = flat @ flat.T
        same = labels[:, None] == labels[None, :]
        off = ~np.eye(len(labels), dtype=bool)
        intra.append(dots[same & off].mean())
        inter.append(dots[~same].mean())
    assert np.mean(intra) > np.mean(inter)


def test_pyramid_shapes_and_pooling():
    cfg = SynthConfig(seed=1)
    scene = generate_scene(cfg, 0)
    pyr = synth_features(scene, cfg)
    assert [g.shape for g in pyr.scales] == [(8, 8, 32), (16, 16, 32), (32, 32, 32)]
    base = pyr.scales[2]
    pooled = base.reshape(16, 2, 16, 2, 32).mean(axis=(1, 3))
    assert np.array_equal(pyr.scales[1], pooled)


def test_dataset_roundtrip(tmp_path):
    cfg = small_cfg()
    scenes = [generate_scene(cfg, i) for i in range(10)]
    path = tmp_path / "ds.txt"
    save_dataset(path, scenes, cfg)
    loaded, cfg2 = load_dataset(path)
    assert len(loaded) == 10
    for a, b in zip(scenes, loaded):
        assert a == b
    assert cfg2.to_json() == cfg.to_json()


def test_dataset_wrong_version(tmp_path):
    cfg = small_cfg()
    path = tmp_path / "ds.txt"
    save_dataset(path, [generate_scene(cfg, 0)], cfg)
    text = path.read_text()
    path.write_text(text.replace("mpseg-dataset 1", "mpseg-dataset 99", 1))
    with pytest.raises(SchemaVersionError):
        load_dataset(path)


def test_dataset_size_bound(tmp_path):
    cfg = SynthConfig(seed=0)
    scenes = [generate_scene(cfg, i) for i in range(200)]
    path = tmp_path / "ds.txt"
    save_dataset(path, scenes, cfg)
    assert os.path.getsize(path) < 2 * 1024 * 1024


def test_dataset_bytes_pure_function_of_config(tmp_path):
    cfg = SynthConfig(seed=3)
    digests = []
    for run in range(2):
        scenes = [generate_scene(cfg, i) for i in range(25)]
        path = tmp_path / f"ds{run}.txt"
        data = save_dataset(path, scenes, cfg)
        digests.append(hashlib.sha256(data.encode()).hexdigest())
    assert digests[0] == digests[1]


def test_generation_error_names_index():
    cfg = small_cfg(height=8, width=8, instance_range=(30, 30), size_range=(4, 6))
    with pytest.raises(GenerationError) as exc:
        generate_scene(cfg, 17)
    assert "17" in str(exc.value)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(num_categories=0)
    with pytest.raises(ValueError):
        small_cfg(noise_sigma=-1.0)
    protos, bg = basis_prototypes(3, 8)
    protos[1] = protos[0]
    with pytest.raises(ValueError):
        small_cfg(prototypes=protos, background_proto=bg)
