# matching_test.py
# Test descriptor matching, recall, pose from matched pointmaps and pose AUC

import sys
import os
import math
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'execution'))

import numpy as np
from geometry_core import Pointmap, rotation_about_axis
from matching import MatchResult, similarity, reciprocal_nn_match, match_recall_at_px, pose_from_matches, pose_auc


def unit_descriptors(seed, shape):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=shape)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def surface_pointmap(seed, size=8):
    """Pinhole-style pointmap of a random-depth surface, every pixel valid."""
    rng = np.random.default_rng(seed)
    v, u = np.mgrid[0:size, 0:size].astype(np.float64)
    z = rng.uniform(2.0, 3.0, size=(size, size))
    return np.stack([(u + 0.5 - size / 2) / size * z, (v + 0.5 - size / 2) / size * z, z], axis=-1)


def test_similarity():
    """Test 1: Temperature-Scaled Similarity"""
    print("\n" + "="*60)
    print("TEST 1: similarity - identical, orthogonal, monotone")
    print("="*60)

    d = np.eye(3)
    same = similarity(d, d, 0, 0, tau=1.0)
    ortho = similarity(d, d, 0, 1, tau=1.0)
    angles = [0.0, 0.5, 1.0, 1.5]
    query = np.array([[math.cos(a), math.sin(a), 0.0] for a in angles])
    values = [similarity(d, query, 0, k, tau=3.0) for k in range(len(angles))]
    monotone = all(x > y for x, y in zip(values, values[1:]))

    match = abs(same - math.e) < 1e-12 and abs(ortho - 1.0) < 1e-12 and monotone
    print(f"Identical, tau=1: {same:.5f} (e = {math.e:.5f})")
    print(f"Orthogonal, tau=1: {ortho:.5f}")
    print(f"Decreasing with angle: {monotone}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def brute_force_mutual(d1, d2):
    """Loop reference for mutual nearest neighbours with lowest-index ties."""
    f1, f2 = d1.reshape(-1, d1.shape[-1]), d2.reshape(-1, d2.shape[-1])
    pairs = []
    for i in range(len(f1)):
        j = int(np.argmax([np.dot(f1[i], f2[k]) for k in range(len(f2))]))
        back = int(np.argmax([np.dot(f1[k], f2[j]) for k in range(len(f1))]))
        if back == i:
            pairs.append((i, j))
    return pairs


def test_reciprocal_matching():
    """Test 2: Mutual Nearest-Neighbour Matching"""
    print("\n" + "="*60)
    print("TEST 2: reciprocal_nn_match - identity, permutation, ties, masks")
    print("="*60)

    d1 = unit_descriptors(0, (8, 8, 16))
    identity = reciprocal_nn_match(d1, d1)
    identity_ok = len(identity) == 64 and np.array_equal(identity.matches[:, 0], identity.matches[:, 1])

    perm = np.random.default_rng(1).permutation(8)
    d2 = d1[:, perm]
    permuted = reciprocal_nn_match(d1, d2)
    inverse = np.argsort(perm)
    expected = [(r * 8 + c, r * 8 + inverse[c]) for r in range(8) for c in range(8)]
    permutation_ok = sorted(map(tuple, permuted.matches.tolist())) == sorted(expected)

    noisy = unit_descriptors(2, (6, 6, 4))
    other = unit_descriptors(3, (6, 6, 4))
    brute = brute_force_mutual(noisy, other)
    fast = reciprocal_nn_match(noisy, other)
    brute_ok = sorted(map(tuple, fast.matches.tolist())) == sorted(brute)
    injective = (len(set(fast.matches[:, 0].tolist())) == len(fast)
                 and len(set(fast.matches[:, 1].tolist())) == len(fast))

    flat = np.zeros((4, 4, 3))
    flat[..., 0] = 1.0
    tied = reciprocal_nn_match(flat, flat)

    mask = np.ones((8, 8), bool)
    mask[2, 3] = False
    masked = reciprocal_nn_match(d1, d1, mask1=mask, mask2=mask)
    masked_ok = len(masked) == 63 and (2 * 8 + 3) not in masked.matches[:, 0].tolist()
    empty = reciprocal_nn_match(d1, d1, mask1=np.zeros((8, 8), bool))

    match = (identity_ok and permutation_ok and brute_ok and injective and len(tied) <= 1 and masked_ok
             and len(empty) == 0)
    print(f"desc2 = desc1 -> identity on all 64 pixels: {identity_ok}")
    print(f"Column permutation recovered: {permutation_ok}")
    print(f"Agrees with brute force ({len(brute)} pairs): {brute_ok}; injective: {injective}")
    print(f"All-identical descriptors -> {len(tied)} pair(s)")
    print(f"Invalid pixel excluded: {masked_ok}; empty mask -> {len(empty)} matches")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_match_recall():
    """Test 3: Match Recall at a Pixel Radius"""
    print("\n" + "="*60)
    print("TEST 3: match_recall_at_px")
    print("="*60)

    width = 10
    rows = np.arange(8)
    gt = np.stack([rows * width + 2, rows * width + 4], axis=1)
    exact = match_recall_at_px(MatchResult(gt, np.ones(len(gt))), gt, 2.0, width)
    shifted = MatchResult(np.stack([gt[:, 0], gt[:, 1] + 1], axis=1), np.ones(len(gt)))
    within = match_recall_at_px(shifted, gt, 2.0, width)
    outside = match_recall_at_px(shifted, gt, 0.5, width)
    nothing = match_recall_at_px(MatchResult(np.zeros((0, 2)), np.zeros(0)), gt, 2.0, width)
    half = match_recall_at_px(MatchResult(gt[:4], np.ones(4)), gt, 2.0, width)

    try:
        match_recall_at_px(shifted, np.zeros((0, 2)), 2.0, width)
        empty_rejected = False
    except ValueError:
        empty_rejected = True

    match = exact == 1.0 and within == 1.0 and outside == 0.0 and nothing == 0.0 and half == 0.5 and empty_rejected
    print(f"pred = gt: {exact}; 1 px displaced at r=2: {within}, at r=0.5: {outside}")
    print(f"Empty prediction: {nothing}; half the GT matched: {half}")
    print(f"Empty GT rejected: {empty_rejected}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_pose_from_matches():
    """Test 4: Relative Pose from Matched Pointmaps"""
    print("\n" + "="*60)
    print("TEST 4: pose_from_matches - exact, perturbed, RANSAC, errors")
    print("="*60)

    points = surface_pointmap(4)
    R = rotation_about_axis([0.2, 1.0, 0.1], math.radians(25))
    t = np.array([0.4, -0.1, 0.2])
    pm1 = Pointmap(points, 'view0')
    pm2 = Pointmap(points @ R.T + t, 'view1')
    same_pixels = np.stack([np.arange(64), np.arange(64)], axis=1)

    exact = pose_from_matches(pm1, pm2, same_pixels, gt_relative=(R, t))
    exact_ok = (np.abs(exact.transform.rotation - R).max() < 1e-6 and np.abs(exact.transform.translation - t).max() < 1e-6
                and abs(exact.transform.scale - 1.0) < 1e-6 and exact.rotation_error_deg < 1e-3)

    R5 = rotation_about_axis([0.0, 0.0, 1.0], math.radians(5))
    tilted = Pointmap((points @ R.T + t) @ R5.T, 'view1')
    perturbed = pose_from_matches(pm1, tilted, same_pixels, gt_relative=(R, t))
    five_ok = abs(perturbed.rotation_error_deg - 5.0) < 0.1 and perturbed.pose_error_deg <= 5.0 + 0.1

    corrupt = pm2.points.copy().reshape(-1, 3)
    outliers = np.random.default_rng(5).choice(64, size=12, replace=False)
    corrupt[outliers] += np.random.default_rng(6).uniform(-1.0, 1.0, size=(12, 3))
    robust = pose_from_matches(pm1, Pointmap(corrupt.reshape(8, 8, 3), 'view1'), same_pixels,
                               gt_relative=(R, t), ransac=True)
    robust_ok = robust.rotation_error_deg < 1e-3 and robust.inliers.sum() == 64 - 12

    try:
        pose_from_matches(pm1, pm2, same_pixels[:2])
        few_rejected = False
    except ValueError:
        few_rejected = True

    match = exact_ok and five_ok and robust_ok and few_rejected
    print(f"Noiseless GT pointmaps: exact to 1e-6: {exact_ok}")
    print(f"5° perturbation reported as {perturbed.rotation_error_deg:.4f}°")
    print(f"RANSAC with 12 outliers: rotation error {robust.rotation_error_deg:.2e}°, "
          f"inliers {int(robust.inliers.sum())}")
    print(f"2 matches rejected: {few_rejected}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_pose_auc():
    """Test 5: Pose AUC"""
    print("\n" + "="*60)
    print("TEST 5: pose_auc")
    print("="*60)

    thresholds = [5.0, 10.0, 20.0]
    perfect = pose_auc([0.0, 0.0, 0.0], thresholds)
    failed = pose_auc([25.0, 40.0], thresholds)
    half = pose_auc([5.0], [10.0])
    mixed = pose_auc([2.5, 30.0], [5.0])

    errors = 0
    for bad in ([], [-1.0]):
        try:
            pose_auc(bad, thresholds)
        except ValueError:
            errors += 1

    match = perfect == [1.0, 1.0, 1.0] and failed == [0.0, 0.0, 0.0] and half == [0.5] and mixed == [0.25] \
        and errors == 2
    print(f"All zero: {perfect}; all above 20°: {failed}")
    print(f"Error θ/2: {half}; mixed: {mixed}")
    print(f"Empty and negative errors rejected: {errors == 2}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def main():
    """Run all matching tests."""
    print("\n" + "="*60)
    print("MATCHING - TESTS")
    print("="*60)

    tests = [
        ("Similarity", test_similarity),
        ("Reciprocal Matching", test_reciprocal_matching),
        ("Match Recall", test_match_recall),
        ("Pose from Matches", test_pose_from_matches),
        ("Pose AUC", test_pose_auc),
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
