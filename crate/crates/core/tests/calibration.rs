//! Distance field, threshold and component labeling against brute-force
//! oracles.

use std::collections::BTreeSet;

use csvd_core::anatomy::{distance_field, distance_field_with, Zone, ZoneMap};
use csvd_core::calibrate::{
    adaptive_threshold, binarize, binarize_flat, connected_components, CalibrationParams, Connectivity,
};
use csvd_core::par::Exec;
use csvd_core::volume::{diagonal_affine, BinaryMask, Geometry, ProbVolume, VoxelGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_geometry(rng: &mut ChaCha8Rng, max_dim: usize) -> Geometry {
    let dims = [0; 3].map(|_| rng.gen_range(1..=max_dim));
    let spacing = [0; 3].map(|_| rng.gen_range(0.3..2.5));
    let origin = [0; 3].map(|_| rng.gen_range(-20.0..20.0));
    Geometry::new(dims, spacing, diagonal_affine(spacing, origin)).unwrap()
}

fn random_zones(rng: &mut ChaCha8Rng, g: &Geometry, p_allowed: f64) -> ZoneMap {
    let mut zones: Vec<Zone> = (0..g.len())
        .map(|_| {
            if rng.gen_bool(p_allowed) {
                Zone::Allowed
            } else if rng.gen_bool(0.5) {
                Zone::Transition
            } else {
                Zone::Exclusion
            }
        })
        .collect();
    let forced = rng.gen_range(0..zones.len());
    zones[forced] = Zone::Allowed;
    ZoneMap::new(g.clone(), zones).unwrap()
}

fn world(g: &Geometry, idx: usize) -> [f64; 3] {
    g.index_to_world(g.unlinear(idx)).unwrap()
}

fn brute_distance(zones: &ZoneMap) -> Vec<f64> {
    let g = zones.geometry();
    let seeds: Vec<[f64; 3]> = (0..g.len()).filter(|&i| zones.zones()[i] == Zone::Allowed).map(|i| world(g, i)).collect();
    (0..g.len())
        .map(|i| {
            let x = world(g, i);
            seeds
                .iter()
                .map(|s| ((x[0] - s[0]).powi(2) + (x[1] - s[1]).powi(2) + (x[2] - s[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Components by breadth-first flood fill, as sets of linear indices.
fn flood_fill(mask: &BinaryMask, conn: Connectivity) -> Vec<BTreeSet<usize>> {
    let g = mask.geometry();
    let [nx, ny, nz] = g.dims();
    let mut seen = vec![false; g.len()];
    let mut out = Vec::new();
    for start in 0..g.len() {
        if !mask.bits()[start] || seen[start] {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = std::collections::VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            comp.insert(v);
            let [i, j, k] = g.unlinear(v);
            for dk in -1i64..=1 {
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let l1 = di.abs() + dj.abs() + dk.abs();
                        let limit = match conn {
                            Connectivity::Faces => 1,
                            Connectivity::Edges => 2,
                            Connectivity::Corners => 3,
                        };
                        if l1 == 0 || l1 > limit {
                            continue;
                        }
                        let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                        if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                            continue;
                        }
                        let n = g.linear([a as usize, b as usize, c as usize]);
                        if mask.bits()[n] && !seen[n] {
                            seen[n] = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

fn random_mask(rng: &mut ChaCha8Rng, max_dim: usize) -> BinaryMask {
    let g = random_geometry(rng, max_dim);
    let density = rng.gen_range(0.05..0.6);
    let bits = (0..g.len()).map(|_| rng.gen_bool(density)).collect();
    BinaryMask::new(g, bits).unwrap()
}

const CONNECTIVITIES: [Connectivity; 3] = [Connectivity::Faces, Connectivity::Edges, Connectivity::Corners];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn distance_field_matches_brute_force(seed in any::<u64>(), p_allowed in 0.0f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_geometry(&mut rng, 10);
        let zones = random_zones(&mut rng, &g, p_allowed);
        let oracle = brute_distance(&zones);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let d = distance_field_with(&zones, f64::INFINITY, exec).unwrap();
            for (a, b) in d.values().iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
        let cap = rng.gen_range(0.5..6.0);
        let d = distance_field(&zones, cap).unwrap();
        for (i, (a, b)) in d.values().iter().zip(&oracle).enumerate() {
            prop_assert!((a - b.min(cap)).abs() < 1e-9);
            prop_assert!(*a >= 0.0 && *a <= cap);
            prop_assert_eq!(*a == 0.0, zones.zones()[i] == Zone::Allowed);
        }
    }

    #[test]
    fn distance_field_is_lipschitz_and_monotone_in_cap(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_geometry(&mut rng, 9);
        let zones = random_zones(&mut rng, &g, 0.05);
        let lo = distance_field(&zones, 2.0).unwrap();
        let hi = distance_field(&zones, 4.0).unwrap();
        for (a, b) in lo.values().iter().zip(hi.values()) {
            prop_assert!(a <= b);
        }
        let [nx, ny, nz] = g.dims();
        let sp = g.spacing();
        let v = hi.values();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let here = g.linear([i, j, k]);
                    for (axis, next) in [(0, [i + 1, j, k]), (1, [i, j + 1, k]), (2, [i, j, k + 1])] {
                        if g.contains(next) {
                            prop_assert!((v[here] - v[g.linear(next)]).abs() <= sp[axis] + 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn components_match_flood_fill(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut rng, 12);
        let g = mask.geometry().clone();
        let mut counts = Vec::new();
        for conn in CONNECTIVITIES {
            let params = CalibrationParams { connectivity: conn, ..Default::default() };
            let lesions = connected_components(&mask, &params);
            let got: BTreeSet<BTreeSet<usize>> = lesions
                .iter()
                .map(|l| l.voxels.iter().map(|v| g.linear(*v)).collect())
                .collect();
            let want: BTreeSet<BTreeSet<usize>> = flood_fill(&mask, conn).into_iter().collect();
            prop_assert_eq!(&got, &want);
            prop_assert_eq!(lesions.len(), want.len());
            for (n, l) in lesions.iter().enumerate() {
                prop_assert_eq!(l.id, n + 1);
                prop_assert_eq!(l.voxel_count, l.voxels.len());
            }
            for w in lesions.windows(2) {
                let first = |l: &csvd_core::calibrate::Lesion| l.voxels.iter().map(|v| g.linear(*v)).min().unwrap();
                prop_assert!(
                    w[0].voxel_count > w[1].voxel_count
                        || (w[0].voxel_count == w[1].voxel_count && first(&w[0]) < first(&w[1]))
                );
            }
            counts.push(lesions.len());
        }
        prop_assert!(counts[0] >= counts[1] && counts[1] >= counts[2]);
    }

    #[test]
    fn minimum_size_filter_keeps_exactly_the_large_components(seed in any::<u64>(), min in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut rng, 10);
        let g = mask.geometry().clone();
        let params = CalibrationParams { connectivity: Connectivity::Faces, min_voxels: min, ..Default::default() };
        let kept: BTreeSet<usize> = connected_components(&mask, &params)
            .iter()
            .flat_map(|l| l.voxels.iter().map(|v| g.linear(*v)).collect::<Vec<_>>())
            .collect();
        let want: BTreeSet<usize> = flood_fill(&mask, Connectivity::Faces)
            .into_iter()
            .filter(|c| c.len() >= min)
            .flatten()
            .collect();
        prop_assert_eq!(kept, want);
    }

    #[test]
    fn threshold_is_monotone(d1 in 0.0f64..20.0, d2 in 0.0f64..20.0, l1 in 0.0f64..0.5, l2 in 0.0f64..0.5,
                             g1 in 0.01f64..3.0, g2 in 0.01f64..3.0) {
        let (dl, dh) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (ll, lh) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let (gl, gh) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let p = |lambda, gamma| CalibrationParams { lambda, gamma, ..Default::default() };
        prop_assert!(p(ll, gl).threshold_at(dl) <= p(ll, gl).threshold_at(dh));
        prop_assert!(p(ll, gl).threshold_at(dl) <= p(lh, gl).threshold_at(dl));
        prop_assert!(p(ll, gl).threshold_at(dl) <= p(ll, gh).threshold_at(dl));
        prop_assert!(p(lh, gh).threshold_at(dh) <= 1.0);
    }

    #[test]
    fn calibration_only_removes_foreground(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_geometry(&mut rng, 10);
        let zones = random_zones(&mut rng, &g, 0.2);
        let p = ProbVolume::new(VoxelGrid::new(g.clone(), (0..g.len()).map(|_| rng.gen::<f64>()).collect()).unwrap()).unwrap();
        let params = CalibrationParams::default();
        let d = distance_field(&zones, params.distance_cap_mm).unwrap();
        let t = adaptive_threshold(&d, &zones, &params).unwrap();
        let calibrated = binarize(&p, &t).unwrap();
        let flat = binarize_flat(&p, params.base);
        for (c, f) in calibrated.bits().iter().zip(flat.bits()) {
            prop_assert!(!c || *f);
        }
    }
}

#[test]
fn suppression_boundary_for_p_085_sits_at_the_inverted_threshold() {
    // Zone 1 is the slab x = 0, so D = x mm on a 1 mm grid
    let g = Geometry::from_spacing([12, 3, 3], [1.0; 3]).unwrap();
    let zones: Vec<Zone> = (0..g.len())
        .map(|i| if g.unlinear(i)[0] == 0 { Zone::Allowed } else { Zone::Exclusion })
        .collect();
    let zones = ZoneMap::new(g.clone(), zones).unwrap();
    let params = CalibrationParams::default();
    let d = distance_field(&zones, params.distance_cap_mm).unwrap();
    let t = adaptive_threshold(&d, &zones, &params).unwrap();
    let boundary = 2.0 * 0.7f64.atanh();
    assert!((boundary - 1.7346).abs() < 1e-4);

    let survives = |p: f64| {
        let prob = ProbVolume::new(VoxelGrid::filled(g.clone(), p)).unwrap();
        let mask = binarize(&prob, &t).unwrap();
        (0..12).take_while(|&x| mask.get([x, 1, 1])).count()
    };
    // kept voxels are x = 0 and x = 1; x = 2 lies past 1.7346 mm
    assert_eq!(survives(0.85), 2);
    assert!((survives(0.85) as f64 - boundary).abs() < 1.0);
    assert!(survives(0.95) > survives(0.85));
}

#[test]
fn spec_examples_for_components() {
    let g = Geometry::from_spacing([3, 3, 3], [1.0; 3]).unwrap();
    let two = BinaryMask::from_indices(g.clone(), &[[0, 0, 0], [1, 1, 1]]).unwrap();
    let with = |c| CalibrationParams { connectivity: c, ..Default::default() };
    assert_eq!(connected_components(&two, &with(Connectivity::Corners)).len(), 1);
    assert_eq!(connected_components(&two, &with(Connectivity::Faces)).len(), 2);
    assert!(connected_components(&BinaryMask::empty(g.clone()), &with(Connectivity::Corners)).is_empty());

    let cube = BinaryMask::new(g.clone(), vec![true; 27]).unwrap();
    let l = connected_components(&cube, &with(Connectivity::Corners));
    assert_eq!(l.len(), 1);
    assert_eq!(l[0].voxel_count, 27);
    assert_eq!(l[0].centroid_mm, [1.0, 1.0, 1.0]);
}
