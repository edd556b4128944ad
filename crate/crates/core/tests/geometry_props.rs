use chdqr::geometry::{nearest_index, voronoi_areas, voronoi_cells, BoundingBox};
use chdqr::quantizer::{hard_assign, soft_labels, PrototypeSet};
use chdqr::Matrix;
use proptest::prelude::*;

fn points_2d(max_k: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec([-5.0f64..5.0, -5.0f64..5.0], 1..=max_k).prop_filter(
        "distinct points",
        |pts| {
            pts.iter().enumerate().all(|(i, a)| {
                pts[..i]
                    .iter()
                    .all(|b| (a[0] - b[0]).hypot(a[1] - b[1]) > 1e-3)
            })
        },
    )
}

fn to_matrix(pts: &[[f64; 2]]) -> Matrix {
    Matrix::from_rows(pts).unwrap()
}

fn box2() -> BoundingBox {
    BoundingBox::new(vec![-6.0, -6.0], vec![6.0, 6.0]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn areas_sum_to_box_volume(pts in points_2d(120)) {
        let bbox = box2();
        let areas = voronoi_areas(&to_matrix(&pts), &bbox).unwrap();
        let total: f64 = areas.as_slice().iter().sum();
        prop_assert!((total - bbox.volume()).abs() <= 1e-9 * bbox.volume());
    }

    #[test]
    fn cells_partition_the_box(pts in points_2d(60), probes in prop::collection::vec([-6.0f64..6.0, -6.0f64..6.0], 20)) {
        let m = to_matrix(&pts);
        let cells = voronoi_cells(&m, &box2()).unwrap();
        for p in &probes {
            let owner = nearest_index(&m, p);
            prop_assert!(cells[owner].contains(p, 1e-9));
        }
    }

    #[test]
    fn translation_leaves_areas_unchanged(pts in points_2d(60), dx in -20.0f64..20.0, dy in -20.0f64..20.0) {
        let bbox = box2();
        let moved: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        let a = voronoi_areas(&to_matrix(&pts), &bbox).unwrap();
        let b = voronoi_areas(&to_matrix(&moved), &bbox.translated(&[dx, dy]).unwrap()).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-9 * bbox.volume());
        }
    }

    #[test]
    fn one_dimensional_areas_sum(xs in prop::collection::btree_set(-1000i32..1000, 1..50)) {
        let rows: Vec<[f64; 1]> = xs.iter().map(|x| [*x as f64 / 100.0]).collect();
        let bbox = BoundingBox::new(vec![-11.0], vec![11.0]).unwrap();
        let areas = voronoi_areas(&Matrix::from_rows(&rows).unwrap(), &bbox).unwrap();
        let total: f64 = areas.as_slice().iter().sum();
        prop_assert!((total - 22.0).abs() < 1e-9 * 22.0);
    }

    #[test]
    fn soft_labels_sum_to_one_and_follow_distance(
        pts in points_2d(40),
        y in [-6.0f64..6.0, -6.0f64..6.0],
        tau in 0.01f64..10.0,
    ) {
        let protos = PrototypeSet::new(to_matrix(&pts), box2()).unwrap();
        let q = soft_labels(&y, &protos, tau).unwrap();
        let sum: f64 = q.probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        let dist: Vec<f64> = pts.iter().map(|c| (c[0] - y[0]).hypot(c[1] - y[1])).collect();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                if dist[i] < dist[j] {
                    prop_assert!(q.probs[i] >= q.probs[j]);
                }
            }
        }
    }

    #[test]
    fn soft_labels_are_permutation_equivariant(
        pts in points_2d(30),
        y in [-6.0f64..6.0, -6.0f64..6.0],
        shift in 0usize..30,
    ) {
        let k = pts.len();
        let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
        let permuted: Vec<[f64; 2]> = perm.iter().map(|&i| pts[i]).collect();
        let a = soft_labels(&y, &PrototypeSet::new(to_matrix(&pts), box2()).unwrap(), 0.5).unwrap();
        let b = soft_labels(&y, &PrototypeSet::new(to_matrix(&permuted), box2()).unwrap(), 0.5).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            prop_assert!((b.probs[r] - a.probs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_temperature_matches_hard_assignment(pts in points_2d(40), y in [-6.0f64..6.0, -6.0f64..6.0]) {
        let protos = PrototypeSet::new(to_matrix(&pts), box2()).unwrap();
        let q = soft_labels(&y, &protos, 1e-6).unwrap();
        prop_assert_eq!(q.argmax(), hard_assign(&y, &protos).unwrap());
    }
}

#[test]
fn grid_of_points_has_equal_cells() {
    let mut rows = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            rows.push([-4.5 + 3.0 * i as f64, -4.5 + 3.0 * j as f64]);
        }
    }
    let bbox = BoundingBox::new(vec![-6.0, -6.0], vec![6.0, 6.0]).unwrap();
    let areas = voronoi_areas(&Matrix::from_rows(&rows).unwrap(), &bbox).unwrap();
    for a in areas.as_slice() {
        assert!((a - 9.0).abs() < 1e-9, "{a}");
    }
}
