use nfkit::data::*;
use nfkit::spatial::KdTree;
use nfkit::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn slide(coords: Vec<[f64; 2]>, dim: usize) -> Slide {
    let n = coords.len();
    Slide::new(0, coords, vec![0.0; n * dim], dim).unwrap()
}

fn grid_slide(side: usize, spacing: f64) -> Slide {
    let coords = (0..side * side).map(|i| [(i % side) as f64 * spacing, (i / side) as f64 * spacing]).collect();
    slide(coords, 1)
}

fn random_slide(rng: &mut ChaCha8Rng, n: usize) -> Slide {
    let coords = (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
    slide(coords, 1)
}

// --- cell table ---------------------------------------------------------

#[test]
fn three_rows_two_times() {
    let text = "# comment\ntime,x,y,f0\n1,0.5,0.5,3\n0,0,0,1\n0,1,1,2\n";
    let slides = parse_cell_table(text).unwrap();
    assert_eq!(slides.len(), 2);
    assert_eq!((slides[0].time_index, slides[0].len()), (0, 2));
    assert_eq!((slides[1].time_index, slides[1].len()), (1, 1));
    assert_eq!(slides[0].feature(1), &[2.0]);
}

#[test]
fn empty_table_is_no_cells() {
    for text in ["", "# only a comment\n", "time,x,y,f0\n"] {
        let err = parse_cell_table(text).unwrap_err();
        assert!(err.to_string().contains("no cells"), "{err}");
    }
}

#[test]
fn ragged_and_unknown_columns_are_format_errors() {
    let err = parse_cell_table("time,x,y,f0,f1\n0,0,0,1,2\n0,1,1,2\n").unwrap_err();
    assert!(matches!(err, Error::Format(ref m) if m.contains("line 3")), "{err}");
    let err = parse_cell_table("time,x,y,f0,colour\n0,0,0,1,red\n").unwrap_err();
    assert!(matches!(err, Error::Format(ref m) if m.contains("colour")), "{err}");
    assert!(parse_cell_table("time,x,y,f1\n0,0,0,1\n").is_err());
}

#[test]
fn synthetic_dataset_round_trips_through_files() {
    let ds = synth_generate(&SynthConfig { cells_per_slide: 60, num_timepoints: 3, ..Default::default() }, 4).unwrap();
    let dir = tempdir();
    let path = dir.join("cells.csv");
    save_dataset(&path, &ds).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn sample_ids_round_trip() {
    let mut s = slide(vec![[0.0, 1.0], [2.0, 3.0]], 2);
    s.sample_ids = Some(vec![7, 9]);
    let text = format_cell_table(&[s.clone()]).unwrap();
    assert!(text.starts_with("time,x,y,f0,f1,sample_id\n"));
    assert_eq!(parse_cell_table(&text).unwrap(), vec![s]);
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("nfkit-data-{}-{:?}", std::process::id(), std::thread::current().id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// --- preprocessing ------------------------------------------------------

#[test]
fn normalize_examples() {
    let mut x = vec![1.0, 1.0, 2.0, 2.0];
    total_count_normalize(&mut x, 2, Some(2.0)).unwrap();
    assert_eq!(x, vec![1.0, 1.0, 1.0, 1.0]);
    // lower median of {2, 4} is 2
    let mut x = vec![1.0, 1.0, 2.0, 2.0];
    assert_eq!(total_count_normalize(&mut x, 2, None).unwrap(), 2.0);
    let mut x = vec![3.0, 1.0];
    total_count_normalize(&mut x, 2, Some(4.0)).unwrap();
    assert_eq!(x, vec![3.0, 1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x: Vec<f64> = (0..20).map(|_| rng.random_range(0..10) as f64 + 1.0).collect();
    let target = total_count_normalize(&mut x, 4, None).unwrap();
    for row in x.chunks(4) {
        assert!((row.iter().sum::<f64>() - target).abs() < 1e-10);
    }
    let mut zero = vec![1.0, 0.0, 0.0, 0.0];
    let err = total_count_normalize(&mut zero, 2, None).unwrap_err();
    assert!(err.to_string().contains("cell 1"));
}

#[test]
fn log1p_examples() {
    let mut x = vec![0.0, std::f64::consts::E - 1.0];
    log1p_transform(&mut x).unwrap();
    assert_eq!(x[0], 0.0);
    assert!((x[1] - 1.0).abs() < 1e-15);
    assert!(matches!(log1p_transform(&mut [-1.0]), Err(Error::Domain(_))));
}

proptest! {
    #[test]
    fn log1p_preserves_order(mut v in prop::collection::vec(0.0f64..1e6, 2..30)) {
        let orig = v.clone();
        log1p_transform(&mut v).unwrap();
        for i in 0..v.len() {
            for j in 0..v.len() {
                if orig[i] < orig[j] {
                    prop_assert!(v[i] <= v[j]);
                }
            }
        }
    }
}

#[test]
fn pca_axis_aligned() {
    let x = vec![-2.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0];
    let p = pca(&x, 5, 2, 1).unwrap();
    assert!((p.component(0)[0] - 1.0).abs() < 1e-12);
    assert!(p.component(0)[1].abs() < 1e-12);
    assert!(p.explained_variance[1].abs() < 1e-12);
    assert!(matches!(pca(&x, 5, 2, 3), Err(Error::Dimension(_))));
}

#[test]
fn pca_full_reconstruction_and_sign_convention() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (rows, cols) = (20, 6);
    let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = pca(&x, rows, cols, cols).unwrap();
    for r in 0..rows {
        for g in 0..cols {
            let rec: f64 = (0..cols).map(|c| p.embedding[r * cols + c] * p.basis[g * cols + c]).sum::<f64>() + p.mean[g];
            assert!((rec - x[r * cols + g]).abs() < 1e-8);
        }
    }
    for c in 0..cols {
        let comp = p.component(c);
        let lead = comp.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        assert!(lead > 0.0);
        for c2 in 0..cols {
            let dot: f64 = comp.iter().zip(p.component(c2)).map(|(a, b)| a * b).sum();
            assert!((dot - if c == c2 { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
    }
    // Embedding covariance is diagonal with non-increasing entries.
    let n = rows as f64 - 1.0;
    let cov = |a: usize, b: usize| (0..rows).map(|r| p.embedding[r * cols + a] * p.embedding[r * cols + b]).sum::<f64>() / n;
    for a in 0..cols {
        assert!((cov(a, a) - p.explained_variance[a]).abs() < 1e-10);
        if a > 0 {
            assert!(cov(a, a) <= cov(a - 1, a - 1) + 1e-12);
        }
        for b in 0..cols {
            if a != b {
                assert!(cov(a, b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn pca_is_deterministic_under_row_negation_of_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let a = pca(&x, 10, 4, 2).unwrap();
    let b = pca(&neg, 10, 4, 2).unwrap();
    for (u, v) in a.basis.iter().zip(&b.basis) {
        assert!((u - v).abs() < 1e-10);
    }
}

#[test]
fn standardize_features_examples() {
    let mut s = vec![Slide::new(0, vec![[0.0, 0.0], [1.0, 1.0]], vec![0.0, 2.0], 1).unwrap()];
    standardize_features(&mut s).unwrap();
    assert_eq!(s[0].features, vec![-1.0, 1.0]);
    let before = s.clone();
    standardize_features(&mut s).unwrap();
    for (a, b) in s[0].features.iter().zip(&before[0].features) {
        assert!((a - b).abs() < 1e-10);
    }
    let mut flat = vec![Slide::new(0, vec![[0.0, 0.0], [1.0, 1.0]], vec![1.0, 3.0, 1.0, 4.0], 2).unwrap()];
    let err = standardize_features(&mut flat).unwrap_err();
    assert!(err.to_string().contains("dimension 0"));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut slides: Vec<Slide> = (0..3)
        .map(|t| {
            let n = 10 + t * 5;
            let f = (0..n * 3).map(|_| rng.random_range(-5.0..9.0)).collect();
            Slide::new(t, vec![[0.0, 0.0]; n], f, 3).unwrap()
        })
        .collect();
    standardize_features(&mut slides).unwrap();
    let all: Vec<&[f64]> = slides.iter().flat_map(|s| s.features.chunks(3)).collect();
    for d in 0..3 {
        let m = all.iter().map(|r| r[d]).sum::<f64>() / all.len() as f64;
        let v = all.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / all.len() as f64;
        assert!(m.abs() < 1e-10 && (v - 1.0).abs() < 1e-10);
    }
}

#[test]
fn standardize_coords_examples() {
    let mut s = vec![slide(vec![[0.0, 0.0], [2.0, 0.0]], 1)];
    let err = standardize_coords(&mut s).unwrap_err();
    assert!(err.to_string().contains("same y"));

    let mut sq = vec![slide(vec![[1.0, 1.0], [3.0, 1.0], [1.0, 3.0], [3.0, 3.0]], 1)];
    standardize_coords(&mut sq).unwrap();
    assert_eq!(sq[0].coords, vec![[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut r = vec![random_slide(&mut rng, 50), random_slide(&mut rng, 30)];
    standardize_coords(&mut r).unwrap();
    for s in &r {
        for a in 0..2 {
            let m = s.coords.iter().map(|c| c[a]).sum::<f64>() / s.len() as f64;
            let v = s.coords.iter().map(|c| (c[a] - m).powi(2)).sum::<f64>() / s.len() as f64;
            assert!(m.abs() < 1e-10 && (v - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn pipeline_records_stages_and_rejects_reapplication() {
    let ds = synth_generate(&SynthConfig { cells_per_slide: 80, feature_dim: 6, ..Default::default() }, 1).unwrap();
    let opts = PreprocessOptions {
        normalize: false,
        log1p: false,
        pca_components: Some(4),
        ..Default::default()
    };
    let out = preprocess(&ds, &opts).unwrap();
    assert_eq!(out.dim(), 4);
    assert!(out.meta.stages.pca && out.meta.stages.standardized_features && out.meta.stages.standardized_coords);
    assert!(!out.meta.stages.normalized);
    let err = preprocess(&out, &opts).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let half = preprocess(
        &ds,
        &PreprocessOptions {
            subsample: Some(0.5),
            normalize: false,
            log1p: false,
            pca_components: None,
            standardize_features: false,
            standardize_coords: false,
            seed: 3,
        },
    )
    .unwrap();
    for (a, b) in half.slides.iter().zip(&ds.slides) {
        assert!((a.len() as f64 - b.len() as f64 / 2.0).abs() <= 1.0);
    }
}

// --- microenvironments ---------------------------------------------------

#[test]
fn env_examples() {
    let one = slide(vec![[0.0, 0.0]], 1);
    let e = extract_microenvironments(&one, 1.0).unwrap();
    assert_eq!(e.len(), 1);
    assert_eq!(e[0].members, vec![0]);

    let two = slide(vec![[0.0, 0.0], [3.0, 0.0]], 1);
    let e = extract_microenvironments(&two, 1.0).unwrap();
    assert_eq!(e.iter().map(|x| x.members.clone()).collect::<Vec<_>>(), vec![vec![0], vec![1]]);

    let g = grid_slide(5, 1.0);
    let e = extract_microenvironments(&g, 1.0).unwrap();
    assert_eq!(e[12].members, vec![7, 11, 12, 13, 17]);
    for (i, env) in e.iter().enumerate() {
        let (x, y) = (i % 5, i / 5);
        if (1..4).contains(&x) && (1..4).contains(&y) {
            assert_eq!(env.members.len(), 5);
        }
    }
    assert!(extract_microenvironments(&g, 0.0).is_err());
}

#[test]
fn env_membership_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let s = random_slide(&mut rng, 400);
        let r = rng.random_range(0.1..1.0);
        let envs = extract_microenvironments(&s, r).unwrap();
        for (i, env) in envs.iter().enumerate() {
            let brute: Vec<usize> = (0..s.len())
                .filter(|&j| {
                    let d = (s.coords[i][0] - s.coords[j][0]).powi(2) + (s.coords[i][1] - s.coords[j][1]).powi(2);
                    d <= r * r
                })
                .collect();
            assert_eq!(env.members, brute);
            assert!(env.members.contains(&i));
        }
    }
}

fn env(center: usize, members: Vec<usize>) -> Microenvironment {
    let mask = vec![true; members.len()];
    Microenvironment { center, time_index: 0, members, mask }
}

#[test]
fn env_size_mode_and_subsampling() {
    let envs = vec![env(0, vec![0, 1, 2]), env(1, vec![0, 1, 2]), env(4, vec![2, 3, 4, 5, 6])];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (k, fixed) = standardize_env_size(&envs, &mut rng).unwrap();
    assert_eq!(k, 3);
    assert_eq!(fixed[0], envs[0]);
    assert_eq!(fixed[2].members.len(), 3);
    assert!(fixed[2].members.contains(&4));
    assert!(fixed[2].members.iter().all(|m| envs[2].members.contains(m)));

    let ties = vec![env(0, vec![0, 1]), env(1, vec![0, 1, 2])];
    assert_eq!(modal_env_size(&ties).unwrap(), 2);
    let (_, padded) = standardize_env_size(&ties, &mut rng).unwrap();
    assert_eq!(padded[1].members.len(), 2);

    let small = fix_env_size(&[env(3, vec![3])], 3, &mut rng).unwrap();
    assert_eq!(small[0].mask, vec![true, false, false]);

    let same = |seed| fix_env_size(&envs, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(same(11), same(11));
}

// --- k-means -------------------------------------------------------------

#[test]
fn kmeans_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pts: Vec<[f64; 2]> = (0..30).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let one = kmeans_partition(&pts, 1, 0).unwrap();
    assert!(one.labels.iter().all(|&l| l == 0));

    let all = kmeans_partition(&pts, pts.len(), 0).unwrap();
    let mut labels = all.labels.clone();
    labels.sort_unstable();
    labels.dedup();
    assert_eq!(labels.len(), pts.len());
    for (i, &l) in all.labels.iter().enumerate() {
        assert_eq!(all.centers[l], pts[i]);
    }
    assert!(matches!(kmeans_partition(&pts, 31, 0), Err(Error::Parameter(_))));

    let mut blobs = Vec::new();
    let mut truth = Vec::new();
    for i in 0..100 {
        let side = if i % 2 == 0 { -10.0 } else { 10.0 };
        blobs.push([side + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        truth.push(i % 2);
    }
    let km = kmeans_partition(&blobs, 2, 3).unwrap();
    let flip = km.labels[0] != truth[0];
    for (l, t) in km.labels.iter().zip(&truth) {
        assert_eq!(*l, if flip { 1 - t } else { *t });
    }
}

proptest! {
    #[test]
    fn kmeans_objective_never_increases_and_regions_nonempty(seed in 0u64..500, k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..60).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect();
        let km = kmeans_partition(&pts, k, seed).unwrap();
        for w in km.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
        prop_assert!(km.regions().iter().all(|r| !r.is_empty()));
        prop_assert_eq!(km, kmeans_partition(&pts, k, seed).unwrap());
    }
}

// --- evaluation grid -------------------------------------------------------

#[test]
fn grid_examples() {
    let one = slide(vec![[1.0, 1.0]], 1);
    let g = discretized_grid_envs(&one, 0.5, 0.1, 1, 0).unwrap();
    assert_eq!(g.envs.len(), 1);
    assert_eq!(g.envs[0].members, vec![0]);

    let lattice = grid_slide(6, 1.0);
    let g = discretized_grid_envs(&lattice, 1.0, 0.5, 10, 0).unwrap();
    assert_eq!(g.centers, (0..36).collect::<Vec<_>>());

    assert!(discretized_grid_envs(&lattice, 0.0, 1.0, 1, 0).is_err());
    // The middle cell is never nearest to a grid node and the radius is too
    // small for its neighbours to reach it, even after densifying.
    let hidden = slide(vec![[0.0, 0.0], [0.001, 0.0], [0.002, 0.0], [10.0, 10.0]], 1);
    let err = discretized_grid_envs(&hidden, 10.0, 1e-4, 0, 0).unwrap_err();
    assert!(err.to_string().contains("1 cells"), "{err}");
    assert!(discretized_grid_envs(&hidden, 10.0, 1e-4, 4, 0).is_ok());
}

#[test]
fn grid_covers_random_slides_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let s = random_slide(&mut rng, 300);
        let g = discretized_grid_envs(&s, 0.5, 0.4, 150, 42).unwrap();
        let mut covered = vec![false; s.len()];
        g.envs.iter().flat_map(|e| &e.members).for_each(|&m| covered[m] = true);
        assert!(covered.iter().all(|&c| c));
        assert!(g.centers.len() >= 150);
        assert_eq!(g, discretized_grid_envs(&s, 0.5, 0.4, 150, 42).unwrap());
        let tree = KdTree::new(&s.coords);
        for e in &g.envs {
            assert_eq!(e.members, tree.within(s.coords[e.center], 0.4));
        }
    }
}

// --- synthetic generator ------------------------------------------------------

fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn ks_pvalue(d: f64, n: usize, m: usize) -> f64 {
    let ne = (n * m) as f64 / (n + m) as f64;
    let l = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * l * l).exp();
    }
    p.clamp(0.0, 1.0)
}

#[test]
fn synth_single_type_drift() {
    let cfg = SynthConfig { num_types: 1, drift: [1.0, 0.0], cells_per_slide: 2000, ..Default::default() };
    let ds = synth_generate(&cfg, 5).unwrap();
    let mean = |s: &Slide, a: usize| s.coords.iter().map(|c| c[a]).sum::<f64>() / s.len() as f64;
    let tol = 3.0 * cfg.blob_sigma * (2.0 / 2000f64).sqrt();
    assert!((mean(&ds.slides[1], 0) - mean(&ds.slides[0], 0) - 1.0).abs() < tol);
    assert!((mean(&ds.slides[1], 1) - mean(&ds.slides[0], 1)).abs() < tol);
}

#[test]
fn synth_without_drift_or_growth_is_stationary() {
    let cfg = SynthConfig { drift: [0.0, 0.0], growth: 0.0, cells_per_slide: 1000, ..Default::default() };
    let ds = synth_generate(&cfg, 6).unwrap();
    let (a, b) = (&ds.slides[0], &ds.slides[1]);
    for axis in 0..2 {
        let xa: Vec<f64> = a.coords.iter().map(|c| c[axis]).collect();
        let xb: Vec<f64> = b.coords.iter().map(|c| c[axis]).collect();
        let p = ks_pvalue(ks_statistic(&xa, &xb), xa.len(), xb.len());
        assert!(p > 0.01, "axis {axis}: p = {p}");
    }
    let fa: Vec<f64> = a.features.chunks(a.dim).map(|r| r[0]).collect();
    let fb: Vec<f64> = b.features.chunks(b.dim).map(|r| r[0]).collect();
    assert!(ks_pvalue(ks_statistic(&fa, &fb), fa.len(), fb.len()) > 0.01);
}

#[test]
fn synth_is_bit_identical_per_seed() {
    let cfg = SynthConfig { num_timepoints: 3, growth: 0.2, ..Default::default() };
    let a = synth_generate(&cfg, 7).unwrap();
    let b = synth_generate(&cfg, 7).unwrap();
    assert_eq!(format_cell_table(&a.slides).unwrap(), format_cell_table(&b.slides).unwrap());
    assert_ne!(a, synth_generate(&cfg, 8).unwrap());
    assert_eq!(a.slides.len(), 3);
    assert!(a.slides[2].types.as_ref().unwrap().iter().filter(|&&t| t == 0).count() > 900);
}

#[test]
fn kd_tree_matches_brute_force_nearest() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pts: Vec<[f64; 2]> = (0..500).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let tree = KdTree::new(&pts);
    for _ in 0..200 {
        let q = [rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2)];
        let brute = (0..pts.len())
            .map(|i| (i, (pts[i][0] - q[0]).powi(2) + (pts[i][1] - q[1]).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .unwrap();
        assert_eq!(tree.nearest(q).unwrap(), brute);
    }
}
