use std::collections::BTreeSet;

use chdqr::data::{
    add_outliers, gen_uncond1d, gen_uncond2d, load_csv, split, write_csv, SplitSpec,
    UNCOND2D_COVS, UNCOND2D_MEANS,
};
use proptest::prelude::*;

#[test]
fn uncond1d_moments() {
    let n = 100_000;
    let ds = gen_uncond1d(n, 5).unwrap();
    let y = ds.targets.column(0);
    let nf = n as f64;
    let mean = y.iter().sum::<f64>() / nf;
    let var_true = 0.75f64.powi(2) + 0.05;
    assert!(mean.abs() < 3.0 * (var_true / nf).sqrt(), "mean {mean}");

    let m2 = y.iter().map(|v| v * v).sum::<f64>() / nf;
    let m4 = y.iter().map(|v| v.powi(4)).sum::<f64>() / nf;
    let se = ((m4 - m2 * m2) / nf).sqrt();
    assert!((m2 - var_true).abs() < 3.0 * se, "second moment {m2} vs {var_true}");
}

#[test]
fn uncond2d_mean_and_labels() {
    let n = 90_000;
    let ds = gen_uncond2d(n, 6).unwrap();
    let nf = n as f64;
    let expect = [0.0, -1.0 / 3.0];
    for j in 0..2 {
        let col = ds.targets.column(j);
        let mean = col.iter().sum::<f64>() / nf;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        assert!((mean - expect[j]).abs() < 3.0 * (var / nf).sqrt(), "coord {j}: {mean}");
    }
    let labels = ds.components.as_ref().unwrap();
    for c in 0..3 {
        let f = labels.iter().filter(|l| **l == c).count() as f64 / nf;
        let se = (1.0 / 3.0 * 2.0 / 3.0 / nf).sqrt();
        assert!((f - 1.0 / 3.0).abs() < 3.0 * se, "component {c}: {f}");
    }
}

#[test]
fn uncond2d_component_covariances() {
    let ds = gen_uncond2d(90_000, 7).unwrap();
    let labels = ds.components.as_ref().unwrap();
    for c in 0..3 {
        let rows: Vec<&[f64]> = ds
            .targets
            .iter_rows()
            .zip(labels)
            .filter(|(_, l)| **l == c)
            .map(|(r, _)| r)
            .collect();
        let n = rows.len() as f64;
        let mu = UNCOND2D_MEANS[c];
        let cov = UNCOND2D_COVS[c];
        for a in 0..2 {
            for b in 0..2 {
                let s = rows
                    .iter()
                    .map(|r| (r[a] - mu[a]) * (r[b] - mu[b]))
                    .sum::<f64>()
                    / n;
                // Var of a Gaussian product moment: s_aa s_bb + s_ab^2.
                let se = ((cov[a][a] * cov[b][b] + cov[a][b].powi(2)) / n).sqrt();
                assert!(
                    (s - cov[a][b]).abs() < 3.0 * se,
                    "component {c} entry ({a},{b}): {s} vs {}",
                    cov[a][b]
                );
            }
        }
    }
}

#[test]
fn outlier_fractions_for_both_regimes() {
    let base = gen_uncond2d(30_000, 1).unwrap();
    let small = add_outliers(&base, 100, 1).unwrap();
    let frac = 200.0 / small.len() as f64;
    assert!((frac - 0.0066).abs() < 0.0005, "{frac}");

    let large = add_outliers(&base, 1000, 1).unwrap();
    let labels = large.components.as_ref().unwrap();
    let n_out = labels.iter().filter(|l| **l >= 3).count();
    assert_eq!(n_out, 2000);
    let frac = n_out as f64 / large.len() as f64;
    assert!((frac - 0.066).abs() < 0.005, "{frac}");
}

#[test]
fn written_csv_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = gen_uncond2d(50, 2).unwrap();
    write_csv(&ds, &path).unwrap();
    assert!(dir.path().join("d.csv.provenance.json").exists());
    let back = load_csv(&path, &["y0".to_string(), "y1".to_string()], None).unwrap();
    assert_eq!(back.targets, ds.targets);
    assert_eq!(back.features, ds.features);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_are_disjoint_and_exhaustive(n in 10usize..400, seed in any::<u64>()) {
        let ds = gen_uncond1d(n, 0).unwrap();
        let s = split(&ds, &SplitSpec::standard(seed)).unwrap();
        let all: BTreeSet<usize> = s.train_idx.iter().chain(&s.cal_idx).chain(&s.test_idx).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(s.train_idx.len() + s.cal_idx.len() + s.test_idx.len(), n);
        prop_assert_eq!(s.train_idx.len(), n * 8 / 10);
        prop_assert_eq!(s.cal_idx.len(), n / 10);
        for (row, &i) in s.test_idx.iter().enumerate() {
            prop_assert_eq!(s.test.targets.row(row), ds.targets.row(i));
        }
    }
}
