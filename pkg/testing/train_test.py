# train_test.py
# Test training configuration, the stage chain, freezing and determinism

import sys
import os
import json
import tempfile
from pathlib import Path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'execution'))

import torch
from backbone_model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from sample_io import generate_dataset
from train import TrainConfig, resolution_at, warmup_cosine, train

TINY = ModelConfig(patch_size=8, embed_dim=32, decoder_dim=32, n_enc_blocks=1, n_dec_blocks=1, n_heads=2,
                   descriptor_dim=8, train_resolution=32)


def make_config(tmp_path, stage='stage1', steps=3, **overrides):
    data = tmp_path / 'data'
    if not data.exists():
        generate_dataset(data, 0, 3, 32)
    values = dict(stage=stage, dataset=str(data), batch_size=2, steps=steps, seed=0, model=TINY,
                  resolution_schedule=[[0, 32]], log_path=str(tmp_path / f'log_{stage}.json'),
                  output_checkpoint=str(tmp_path / f'{stage}.ckpt'))
    values.update(overrides)
    return TrainConfig(**values)


def same_tensors(a, b, prefix=''):
    return all(torch.equal(a.tensors[k], b.tensors[k]) for k in a.tensors if k.startswith(prefix))


def test_config_and_schedules():
    """Test 1: Train Config Validation and Schedules"""
    print("\n" + "="*60)
    print("TEST 1: TrainConfig / resolution_at / warmup_cosine")
    print("="*60)

    schedule = [[0, 64], [100, 128, 'A']]
    lookup = [resolution_at(0, schedule), resolution_at(99, schedule), resolution_at(100, schedule)]
    lookup_ok = lookup == [(64, None), (64, None), (128, 'A')]

    factor = warmup_cosine(100, 0.05)
    lr_ok = (abs(factor(0) - 0.2) < 1e-12 and factor(4) == 1.0 and factor(5) == 1.0
             and abs(factor(100)) < 1e-12 and factor(50) < factor(20))

    try:
        TrainConfig(stage='stage2', dataset='', batch_size=0, resolution_schedule=[[0, 60]]).validate()
        listed = []
    except ValueError as e:
        listed = str(e).split('; ')
    try:
        TrainConfig.from_dict({'stage': 'stage1', 'learning_rate': 0.1})
        unknown_rejected = False
    except ValueError as e:
        unknown_rejected = 'learning_rate' in str(e)

    loaded = TrainConfig.from_dict({'stage': 'heads-only', 'dataset': 'd', 'init_checkpoint': 'x.ckpt',
                                    'trainable_heads': ['depth'], 'weights': {'eta3': 0.5},
                                    'model': {'patch_size': 8, 'train_resolution': 32}})
    loaded.validate()
    nested_ok = loaded.weights.eta3 == 0.5 and loaded.model.patch_size == 8 and loaded.to_dict()['match']['tau'] == 10

    match = lr_ok and lookup_ok and len(listed) == 4 and unknown_rejected and nested_ok
    print(f"Schedule lookup: {lookup}")
    print(f"Warmup then cosine decay: {lr_ok}")
    print(f"All problems listed at once ({len(listed)}): {listed}")
    print(f"Unknown key rejected: {unknown_rejected}; nested blocks built: {nested_ok}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_zero_steps(tmp_path):
    """Test 2: Zero Steps Returns the Initialization"""
    print("\n" + "="*60)
    print("TEST 2: train with 0 steps")
    print("="*60)

    final, log = train(make_config(tmp_path, steps=0))
    unchanged = same_tensors(final, init_params(TINY, 0))
    with open(tmp_path / 'log_stage1.json') as f:
        written = json.load(f)

    match = unchanged and log == [] and written == [] and final.stage == 'stage1'
    print(f"Checkpoint equals seeded init: {unchanged}")
    print(f"Empty log: {log == [] and written == []}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_determinism(tmp_path):
    """Test 3: Same Seed, Same Checkpoint"""
    print("\n" + "="*60)
    print("TEST 3: Two identical runs -> bitwise-identical checkpoints")
    print("="*60)

    first, log_a = train(make_config(tmp_path, steps=3, output_checkpoint=str(tmp_path / 'a.ckpt')))
    second, log_b = train(make_config(tmp_path, steps=3, output_checkpoint=str(tmp_path / 'b.ckpt')))
    identical = same_tensors(first, second)
    same_bytes = (tmp_path / 'a.ckpt').read_bytes() == (tmp_path / 'b.ckpt').read_bytes()
    moved = not same_tensors(first, init_params(TINY, 0))
    finite = all(torch.isfinite(torch.tensor(entry['total'])) for entry in log_a)

    match = identical and same_bytes and moved and finite and log_a == log_b
    print(f"Final tensors bitwise identical: {identical}; checkpoint files identical: {same_bytes}")
    print(f"Parameters changed from init: {moved}")
    print(f"Logs identical and finite: {log_a == log_b and finite}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_stage_chain(tmp_path):
    """Test 4: stage1 -> stage2 -> heads-only"""
    print("\n" + "="*60)
    print("TEST 4: Stage chain - schedule, frozen heads, prerequisites")
    print("="*60)

    stage1, log1 = train(make_config(tmp_path, 'stage1', steps=2))
    components1 = sorted(log1[0]['components'])
    png = (tmp_path / 'log_stage1.png').exists()

    stage2, log2 = train(make_config(tmp_path, 'stage2', steps=3, init_checkpoint=str(tmp_path / 'stage1.ckpt'),
                                     resolution_schedule=[[0, 32], [2, 64, 'A']], tier_gating=True))
    resolutions = [entry['resolution'] for entry in log2]
    matching_frozen = same_tensors(stage1, stage2, 'heads.matching.')
    normal_trained = not same_tensors(stage1, stage2, 'heads.normal.')

    heads, _ = train(make_config(tmp_path, 'heads-only', steps=2, init_checkpoint=str(tmp_path / 'stage2.ckpt'),
                                 trainable_heads=['depth']))
    frozen = all(torch.equal(stage2.tensors[k], heads.tensors[k]) for k in stage2.tensors
                 if not k.startswith('heads.depth.'))
    depth_trained = not same_tensors(stage2, heads, 'heads.depth.')
    reloaded = load_checkpoint(tmp_path / 'heads-only.ckpt')
    stage_tags = (stage1.stage, stage2.stage, reloaded.stage) == ('stage1', 'stage2', 'heads-only')

    errors = 0
    for bad in (make_config(tmp_path, 'heads-only', init_checkpoint=str(tmp_path / 'stage1.ckpt'),
                            trainable_heads=['depth']),
                make_config(tmp_path, 'stage2', init_checkpoint=str(tmp_path / 'heads-only.ckpt')),
                make_config(tmp_path, 'stage2')):
        try:
            train(bad)
        except ValueError:
            errors += 1

    match = (components1 == ['glb', 'loc', 'match', 'pts_n'] and png and resolutions == [32, 32, 64]
             and matching_frozen and normal_trained and frozen and depth_trained and stage_tags and errors == 3)
    print(f"Stage 1 components: {components1}; loss curve written: {png}")
    print(f"Stage 2 resolutions per step: {resolutions}")
    print(f"Stage 2: matching head frozen {matching_frozen}, normal head trained {normal_trained}")
    print(f"Heads-only: everything but the depth head bitwise unchanged {frozen}, depth head trained {depth_trained}")
    print(f"Stage tags kept: {stage_tags}; prerequisite violations rejected: {errors}/3")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_non_finite_abort(tmp_path):
    """Test 5: Non-Finite Loss Aborts with the Component Named"""
    print("\n" + "="*60)
    print("TEST 5: NaN depth head -> abort, checkpoint retained")
    print("="*60)

    stage1_ckpt = init_params(TINY, 0)
    stage1_ckpt.stage = 'stage2'
    stage1_ckpt.tensors['heads.depth.proj.bias'] = torch.full_like(stage1_ckpt.tensors['heads.depth.proj.bias'],
                                                                  float('nan'))
    save_checkpoint(stage1_ckpt, tmp_path / 'poisoned.ckpt')

    cfg = make_config(tmp_path, 'heads-only', steps=2, init_checkpoint=str(tmp_path / 'poisoned.ckpt'),
                      trainable_heads=['depth'], output_checkpoint=str(tmp_path / 'last.ckpt'))
    try:
        train(cfg)
        message = ''
    except RuntimeError as e:
        message = str(e)

    retained = (tmp_path / 'last.ckpt').exists() and load_checkpoint(tmp_path / 'last.ckpt').stage == 'heads-only'
    match = "'depth'" in message and 'step 0' in message and retained
    print(f"Error: {message}")
    print(f"Last checkpoint retained: {retained}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def main():
    """Run all training tests."""
    print("\n" + "="*60)
    print("TRAINING - TESTS")
    print("="*60)

    tests = [
        ("Config and Schedules", test_config_and_schedules),
        ("Zero Steps", lambda: test_zero_steps(Path(tempfile.mkdtemp()))),
        ("Determinism", lambda: test_determinism(Path(tempfile.mkdtemp()))),
        ("Stage Chain", lambda: test_stage_chain(Path(tempfile.mkdtemp()))),
        ("Non-Finite Abort", lambda: test_non_finite_abort(Path(tempfile.mkdtemp()))),
    ]
    results = []
    for name, test in tests:
        try:
            test()
            results.append((name, True))
        except AssertionError:
            results.append((name, False))

    print("\n" + "="*60)
    print("TEST SUMMARY")
    print("="*60)

    for test_name, result in results:
        print(f"{test_name}: {'PASSED' if result else 'FAILED'}")

    passed = sum(1 for _, result in results if result)
    print(f"\nTotal: {passed}/{len(results)} tests passed")


if __name__ == "__main__":
    main()
