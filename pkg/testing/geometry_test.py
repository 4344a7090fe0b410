# geometry_test.py
# Test camera, pointmap, depth, normal and Procrustes geometry

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'execution'))

import numpy as np
from geometry_core import (
    CameraIntrinsics, RigidPose, Pointmap, DepthMap, unproject_depth_to_pointmap, pointmap_to_depth,
    transform_pointmap, normals_from_pointmap, norm_factor, recover_intrinsics_from_pointmap,
    relative_pose_procrustes, rotation_about_axis, rotation_angle_deg
)


def sphere_pointmap(K, center=(0.0, 0.0, 3.0), radius=1.0):
    """Ray-cast a sphere: (pointmap, analytic camera-facing normals)."""
    v, u = np.meshgrid(np.arange(K.height, dtype=float), np.arange(K.width, dtype=float), indexing='ij')
    d = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    c = np.asarray(center)
    a = (d * d).sum(-1)
    b = -2.0 * d @ c
    disc = b * b - 4 * a * (c @ c - radius ** 2)
    hit = disc > 0
    t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), 1.0)
    points = d * t[..., None]
    normals = (points - c) / radius
    return Pointmap(np.where(hit[..., None], points, 0.0), 'view0', hit), normals


def erode(mask, band):
    padded = np.pad(mask, band, constant_values=False)
    out = np.ones_like(mask)
    h, w = mask.shape
    for dy in range(2 * band + 1):
        for dx in range(2 * band + 1):
            out &= padded[dy:dy + h, dx:dx + w]
    return out


def random_pose(rng, frame):
    R = rotation_about_axis(rng.normal(size=3), rng.uniform(0.1, 2.0))
    return RigidPose(R, rng.normal(size=3), frame)


def test_unproject_pinhole():
    """Test 1: Pinhole Back-Projection"""
    print("\n" + "="*60)
    print("TEST 1: Unproject - p(u,v) = ((u-cx)·d/fx, (v-cy)·d/fy, d)")
    print("="*60)

    K1 = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)
    pm1 = unproject_depth_to_pointmap(DepthMap(np.ones((4, 4))), K1)
    K2 = CameraIntrinsics(2.0, 2.0, 0.0, 0.0, 4, 4)
    pm2 = unproject_depth_to_pointmap(DepthMap(np.full((4, 4), 4.0)), K2)

    principal = np.allclose(pm1.points[0, 0], [0.0, 0.0, 1.0])
    pixel = np.allclose(pm2.points[1, 2], [4.0, 2.0, 4.0])
    try:
        unproject_depth_to_pointmap(DepthMap(np.ones((3, 4))), K1)
        mismatch_rejected = False
    except ValueError:
        mismatch_rejected = True

    match = principal and pixel and mismatch_rejected
    print(f"Pixel (0,0), d=1: {pm1.points[0, 0]}")
    print(f"Pixel (2,1), d=4, f=2: {pm2.points[1, 2]}")
    print(f"Resolution mismatch rejected: {mismatch_rejected}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_depth_round_trip():
    """Test 2: Depth <-> Pointmap Round Trip and Positivity"""
    print("\n" + "="*60)
    print("TEST 2: pointmap_to_depth(unproject(D, K)) = D")
    print("="*60)

    rng = np.random.default_rng(0)
    K = CameraIntrinsics.centered(16, 12, 20.0)
    mask = rng.random((12, 16)) > 0.2
    depth = DepthMap(np.where(mask, rng.uniform(0.5, 5.0, (12, 16)), 0.0), mask)
    back = pointmap_to_depth(unproject_depth_to_pointmap(depth, K, 'view0'), 'view0')
    exact = np.array_equal(back.mask, depth.mask) and np.array_equal(back.depth[mask], depth.depth[mask])

    points = np.zeros((2, 2, 3))
    points[..., 2] = 1.0
    points[1, 1, 2] = -0.5
    negative = pointmap_to_depth(Pointmap(points, 'view0'), 'view0')
    masked = (not negative.mask[1, 1]) and negative.mask.sum() == 3 and np.all(negative.depth[negative.mask] == 1.0)

    try:
        pointmap_to_depth(Pointmap(points, 'world'), 'view0')
        world_rejected = False
    except ValueError:
        world_rejected = True
    try:
        pointmap_to_depth(Pointmap(points, 'view1'), 'view0')
        cross_rejected = False
    except ValueError as e:
        cross_rejected = 'view1' in str(e)

    match = exact and masked and world_rejected and cross_rejected
    print(f"Round trip exact: {exact}")
    print(f"Negative z masked: {masked}")
    print(f"World-frame pointmap rejected: {world_rejected}")
    print(f"Pointmap in another view's frame rejected: {cross_rejected}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_transform_pointmap():
    """Test 3: Frame Changes Against 4x4 Homogeneous Matrices"""
    print("\n" + "="*60)
    print("TEST 3: transform_pointmap = dst⁻¹ ∘ src")
    print("="*60)

    rng = np.random.default_rng(1)
    pa, pb, pc = random_pose(rng, 'a'), random_pose(rng, 'b'), random_pose(rng, 'c')
    pm = Pointmap(rng.normal(size=(5, 6, 3)), 'a')

    same = transform_pointmap(pm, pa, RigidPose(pa.rotation, pa.translation, 'a'))
    identity_ok = np.abs(same.points - pm.points).max() <= 1e-12

    moved = transform_pointmap(pm, pa, pb)
    M = np.linalg.inv(pb.matrix()) @ pa.matrix()
    homogeneous = np.concatenate([pm.points, np.ones((5, 6, 1))], axis=-1) @ M.T
    oracle_ok = np.abs(moved.points - homogeneous[..., :3]).max() < 1e-9 and moved.frame == 'b'

    back = transform_pointmap(moved, pb, pa)
    inverse_ok = np.abs(back.points - pm.points).max() < 1e-9
    chained = transform_pointmap(transform_pointmap(pm, pa, pb), pb, pc)
    direct = transform_pointmap(pm, pa, pc)
    compose_ok = np.abs(chained.points - direct.points).max() < 1e-9

    try:
        transform_pointmap(pm, pb, pc)
        mismatch_rejected = False
    except ValueError:
        mismatch_rejected = True

    match = identity_ok and oracle_ok and inverse_ok and compose_ok and mismatch_rejected
    print(f"Identity: {identity_ok}, 4x4 oracle: {oracle_ok}, inverse: {inverse_ok}, compose: {compose_ok}")
    print(f"Frame mismatch rejected: {mismatch_rejected}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_plane_normals():
    """Test 4: Fronto-Parallel Plane Normals"""
    print("\n" + "="*60)
    print("TEST 4: Plane z = 1 -> normals (0, 0, -1)")
    print("="*60)

    K = CameraIntrinsics.centered(8, 8, 8.0)
    pm = unproject_depth_to_pointmap(DepthMap(np.ones((8, 8))), K)
    nm = normals_from_pointmap(pm)
    plane_ok = nm.mask.all() and np.abs(nm.normals - np.array([0.0, 0.0, -1.0])).max() < 1e-6

    collinear = np.zeros((6, 6, 3))
    collinear[..., 0] = np.arange(6)[None, :] * 0.1
    collinear[..., 2] = 1.0
    degenerate_masked = not normals_from_pointmap(Pointmap(collinear, 'view0')).mask.any()

    try:
        normals_from_pointmap(Pointmap(np.zeros((4, 4, 3)), 'view0', np.zeros((4, 4), bool)))
        empty_rejected = False
    except ValueError:
        empty_rejected = True

    match = plane_ok and degenerate_masked and empty_rejected
    print(f"Plane normals exact: {plane_ok}")
    print(f"Collinear tangents masked: {degenerate_masked}")
    print(f"Empty pointmap rejected: {empty_rejected}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_sphere_normals():
    """Test 5: Finite-Difference Normals vs Analytic Sphere Normals"""
    print("\n" + "="*60)
    print("TEST 5: Sphere oracle - mean angular error < 2°")
    print("="*60)

    K = CameraIntrinsics.centered(64, 64, 80.0)
    pm, analytic = sphere_pointmap(K)
    nm = normals_from_pointmap(pm)
    interior = erode(pm.mask, 2) & nm.mask
    cos = np.clip((nm.normals[interior] * analytic[interior]).sum(-1), -1.0, 1.0)
    errors = np.degrees(np.arccos(cos))

    unit = np.abs(np.linalg.norm(nm.normals[nm.mask], axis=-1) - 1.0).max() < 1e-9
    facing = ((nm.normals * -pm.points).sum(-1)[nm.mask] >= 0).all()
    scaled = normals_from_pointmap(pm.scaled(7.5))
    scale_ok = np.array_equal(scaled.mask, nm.mask) and np.abs(scaled.normals - nm.normals).max() < 1e-6

    match = errors.mean() < 2.0 and unit and facing and scale_ok
    print(f"Interior pixels: {interior.sum()}")
    print(f"Mean angular error: {errors.mean():.4f}°, max {errors.max():.4f}°")
    print(f"Unit: {unit}, camera-facing: {facing}, scale invariant: {scale_ok}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_norm_factor():
    """Test 6: Normalization Factor z = mean ‖p‖"""
    print("\n" + "="*60)
    print("TEST 6: Norm factor - mean distance of valid points")
    print("="*60)

    pm1 = Pointmap(np.array([[[1.0, 0.0, 0.0]]]), 'v')
    pm2 = Pointmap(np.array([[[0.0, 3.0, 0.0], [0.0, 0.0, 5.0]]]), 'v')
    z = norm_factor(pm1, pm2)

    rng = np.random.default_rng(2)
    a = Pointmap(rng.normal(size=(4, 4, 3)), 'v')
    b = Pointmap(rng.normal(size=(4, 4, 3)), 'v')
    homogeneous = abs(norm_factor(a.scaled(3.7), b.scaled(3.7)) - 3.7 * norm_factor(a, b)) < 1e-9

    empty = Pointmap(np.ones((2, 2, 3)), 'v', np.zeros((2, 2), bool))
    try:
        norm_factor(empty, empty)
        empty_rejected = False
    except ValueError:
        empty_rejected = True

    match = abs(z - 3.0) < 1e-12 and homogeneous and empty_rejected
    print(f"(1 + 3 + 5) / 3 = {z}")
    print(f"1-homogeneous: {homogeneous}")
    print(f"Empty set rejected: {empty_rejected}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_recover_intrinsics():
    """Test 7: Pinhole Fit From a Local Pointmap"""
    print("\n" + "="*60)
    print("TEST 7: Intrinsics recovery - synthesize then fit")
    print("="*60)

    K = CameraIntrinsics(100.0, 100.0, 32.0, 24.0, 64, 48)
    u = np.arange(64)[None, :]
    depth = DepthMap(np.broadcast_to(2.0 + 0.01 * u, (48, 64)).copy())
    pm = unproject_depth_to_pointmap(depth, K)
    fixed = recover_intrinsics_from_pointmap(pm)
    free = recover_intrinsics_from_pointmap(pm, fix_principal_point=False)
    fixed_ok = abs(fixed.fx - 100.0) / 100.0 < 1e-3 and abs(fixed.fy - 100.0) / 100.0 < 1e-3
    free_ok = all(abs(got - want) < 1e-3 * max(1.0, want)
                  for got, want in ((free.fx, 100.0), (free.fy, 100.0), (free.cx, 32.0), (free.cy, 24.0)))

    K_sphere = CameraIntrinsics.centered(64, 64, 80.0)
    sphere, _ = sphere_pointmap(K_sphere)
    fit = recover_intrinsics_from_pointmap(sphere)
    sphere_ok = abs(fit.fx - 80.0) < 1e-6 and abs(fit.fy - 80.0) < 1e-6

    one_ray = np.zeros((8, 8, 3))
    one_ray[...] = np.array([0.1, 0.2, 1.0])
    one_ray *= np.linspace(1.0, 2.0, 64).reshape(8, 8, 1)
    try:
        recover_intrinsics_from_pointmap(Pointmap(one_ray, 'view0'))
        degenerate_rejected = False
    except ValueError:
        degenerate_rejected = True

    plane = unproject_depth_to_pointmap(DepthMap(np.full((48, 64), 2.0)), K)
    try:
        recover_intrinsics_from_pointmap(plane)
        plane_rejected = False
    except ValueError as e:
        plane_rejected = 'fronto-parallel' in str(e)

    match = fixed_ok and free_ok and sphere_ok and degenerate_rejected and plane_rejected
    print(f"Fixed principal point: fx={fixed.fx:.6f}, fy={fixed.fy:.6f}")
    print(f"Free: fx={free.fx:.6f}, fy={free.fy:.6f}, cx={free.cx:.6f}, cy={free.cy:.6f}")
    print(f"Sphere: fx={fit.fx:.9f}, fy={fit.fy:.9f}")
    print(f"All points on one ray rejected: {degenerate_rejected}")
    print(f"Single-depth fronto-parallel plane rejected: {plane_rejected}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def test_procrustes():
    """Test 8: Kabsch-Umeyama Similarity Fit"""
    print("\n" + "="*60)
    print("TEST 8: Procrustes - dst = s·R·src + t")
    print("="*60)

    rng = np.random.default_rng(3)
    src = rng.normal(size=(20, 3))
    ident = relative_pose_procrustes(src, src)
    identity_ok = (np.abs(ident.rotation - np.eye(3)).max() < 1e-9 and abs(ident.scale - 1.0) < 1e-9
                   and np.abs(ident.translation).max() < 1e-9 and ident.residual < 1e-9)

    R = rotation_about_axis([0.0, 0.0, 1.0], np.pi / 2)
    dst = 2.0 * src @ R.T + np.array([1.0, 0.0, 0.0])
    fit = relative_pose_procrustes(src, dst)
    known_ok = (abs(fit.scale - 2.0) < 1e-9 and np.abs(fit.rotation - R).max() < 1e-9
                and np.abs(fit.translation - [1.0, 0.0, 0.0]).max() < 1e-9)

    noisy = dst + 0.01 * rng.normal(size=dst.shape)
    Q = rotation_about_axis(rng.normal(size=3), 0.7)
    residual_invariant = abs(relative_pose_procrustes(src @ Q.T, noisy @ Q.T).residual
                             - relative_pose_procrustes(src, noisy).residual) < 1e-9

    rejected = 0
    for a, b in ((src[:2], dst[:2]), (np.outer(np.arange(5.0), [1.0, 2.0, 3.0]),) * 2):
        try:
            relative_pose_procrustes(a, b)
        except ValueError:
            rejected += 1

    match = identity_ok and known_ok and residual_invariant and rejected == 2
    print(f"Identity: {identity_ok}")
    print(f"Known transform: scale={fit.scale:.12f}, angle={rotation_angle_deg(fit.rotation):.9f}°")
    print(f"Residual invariant under pre-rotation: {residual_invariant}")
    print(f"Two-point and collinear inputs rejected: {rejected == 2}")
    print(f"Result: {'PASSED' if match else 'FAILED'}")
    assert match


def main():
    """Run all geometry tests."""
    print("\n" + "="*60)
    print("GEOMETRY CORE - MATHEMATICAL TESTS")
    print("="*60)

    tests = [
        ("Unproject Pinhole", test_unproject_pinhole),
        ("Depth Round Trip", test_depth_round_trip),
        ("Transform Pointmap", test_transform_pointmap),
        ("Plane Normals", test_plane_normals),
        ("Sphere Normals", test_sphere_normals),
        ("Norm Factor", test_norm_factor),
        ("Recover Intrinsics", test_recover_intrinsics),
        ("Procrustes", test_procrustes),
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
