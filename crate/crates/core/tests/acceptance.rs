//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so lines print as they complete. A failing criterion only
//! turns into a non-zero exit with `NFKIT_ACCEPTANCE_STRICT=1`, so the
//! workspace test run still reports every line.

use std::path::Path;
use std::rc::Rc;
use std::time::{Duration, Instant};

use nfkit::bench::{run_experiment, ExperimentOutcome, ExperimentSpec};
use nfkit::flow::{
    integrate_cfm, integrate_vfm, interpolate, loss_cfm, loss_glvfm, loss_gvfm, EnvState, FlowModel, ModelSpec, ObjectiveKind,
    TrainBatch, Variant,
};
use nfkit::metrics::{kde_likelihood, psd, spd, wasserstein, WassersteinConfig};
use nfkit::ot::{sinkhorn, SinkhornConfig};
use nfkit::tensor::{attention, gradient_check, Tape, Var};
use nfkit::transformer::{EnvBatch, Transformer, TransformerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = (bool, String);

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// --- 1: autodiff ----------------------------------------------------------------

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn for<'t> Fn(&[Var<'t, f64>]) -> nfkit::Result<Var<'t, f64>>>);

fn autodiff() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = Rc::new(uniform(&mut rng, 12, -1.0, 1.0));
    let att_mask = vec![true, true, false, true, true, false, true, true];
    // every non-scalar output is contracted with the last input
    let cases: Vec<Case> = vec![
        ("add", vec![vec![3, 4], vec![3, 4], vec![3, 4]], Box::new(|v| v[0].add(v[1])?.mul(v[2])?.sum())),
        ("add broadcast", vec![vec![3, 4], vec![4], vec![3, 4]], Box::new(|v| v[0].add(v[1])?.mul(v[2])?.sum())),
        ("sub", vec![vec![3, 4], vec![3, 4], vec![3, 4]], Box::new(|v| v[0].sub(v[1])?.mul(v[2])?.sum())),
        ("mul", vec![vec![3, 4], vec![3, 4], vec![3, 4]], Box::new(|v| v[0].mul(v[1])?.mul(v[2])?.sum())),
        ("mul_const", vec![vec![3, 4], vec![3, 4]], {
            let m = mask.clone();
            Box::new(move |v| v[0].mul_const(m.clone())?.mul(v[1])?.sum())
        }),
        ("scale", vec![vec![3, 4], vec![3, 4]], Box::new(|v| v[0].scale(-1.7)?.mul(v[1])?.sum())),
        ("add_scalar", vec![vec![3, 4], vec![3, 4]], Box::new(|v| v[0].add_scalar(0.3)?.square()?.mul(v[1])?.sum())),
        ("neg", vec![vec![3, 4], vec![3, 4]], Box::new(|v| v[0].neg()?.mul(v[1])?.sum())),
        ("leaky_relu", vec![vec![3, 4], vec![3, 4]], Box::new(|v| v[0].leaky_relu(0.1)?.mul(v[1])?.sum())),
        ("relu", vec![vec![3, 4], vec![3, 4]], Box::new(|v| v[0].relu()?.mul(v[1])?.sum())),
        ("abs", vec![vec![3, 4], vec![3, 4]], Box::new(|v| v[0].abs()?.mul(v[1])?.sum())),
        ("square", vec![vec![3, 4], vec![3, 4]], Box::new(|v| v[0].square()?.mul(v[1])?.sum())),
        ("sum", vec![vec![3, 4]], Box::new(|v| v[0].sum())),
        ("mean", vec![vec![3, 4]], Box::new(|v| v[0].mean())),
        ("matmul", vec![vec![3, 4], vec![4, 2], vec![3, 2]], Box::new(|v| v[0].matmul(v[1])?.mul(v[2])?.sum())),
        ("softmax rows", vec![vec![3, 4], vec![3, 4]], Box::new(|v| v[0].softmax(1)?.mul(v[1])?.sum())),
        ("softmax columns", vec![vec![3, 4], vec![3, 4]], Box::new(|v| v[0].softmax(0)?.mul(v[1])?.sum())),
        (
            "layer_norm",
            vec![vec![3, 4], vec![4], vec![4], vec![3, 4]],
            Box::new(|v| v[0].layer_norm(v[1], v[2], 1e-5)?.mul(v[3])?.sum()),
        ),
        ("concat", vec![vec![3, 2], vec![3, 3], vec![3, 5]], Box::new(|v| Var::concat(&[v[0], v[1]])?.mul(v[2])?.sum())),
        ("slice_last", vec![vec![3, 5], vec![3, 2]], Box::new(|v| v[0].slice_last(2, 2)?.mul(v[1])?.sum())),
        ("reshape", vec![vec![3, 4], vec![2, 6]], Box::new(|v| v[0].reshape(vec![2, 6])?.mul(v[1])?.sum())),
        ("repeat_rows", vec![vec![2, 3], vec![2, 3, 3]], Box::new(|v| v[0].repeat_rows(3)?.mul(v[1])?.sum())),
        ("cross_entropy", vec![vec![4, 3]], Box::new(|v| v[0].cross_entropy(&[0, 2, 1, 2]))),
        (
            "attention",
            vec![vec![4, 4], vec![8, 4], vec![8, 4], vec![4, 4]],
            Box::new(move |v| attention(v[0], v[1], v[2], &att_mask, 2, 2)?.mul(v[3])?.sum()),
        ),
    ];
    let composites: Vec<Case> = vec![
        (
            "composite: matmul, leaky_relu, layer_norm",
            vec![vec![3, 4], vec![4, 5], vec![5], vec![5], vec![3, 5]],
            Box::new(|v| v[0].matmul(v[1])?.leaky_relu(0.01)?.layer_norm(v[2], v[3], 1e-5)?.mul(v[4])?.sum()),
        ),
        (
            "composite: softmax attention block",
            vec![vec![4, 4], vec![4, 4], vec![4, 4]],
            Box::new(|v| {
                let s = v[0].matmul(v[1])?.scale(0.5)?.softmax(1)?;
                s.matmul(v[0])?.add(v[0])?.mul(v[2])?.mean()
            }),
        ),
        (
            "composite: mixed losses",
            vec![vec![3, 4], vec![3, 4], vec![4, 3]],
            Box::new(|v| {
                let r = v[0].sub(v[1])?;
                let l1 = r.slice_last(0, 2)?.abs()?.sum()?;
                let l2 = r.slice_last(2, 2)?.square()?.sum()?.scale(0.5)?;
                l1.add(l2)?.add(v[0].matmul(v[2])?.cross_entropy(&[2, 0, 1])?)
            }),
        ),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    let n = cases.len() + composites.len();
    for (name, shapes, f) in cases.iter().chain(&composites) {
        let inputs: Vec<(Vec<usize>, Vec<f64>)> =
            shapes.iter().map(|s| (s.clone(), uniform(&mut rng, s.iter().product(), -1.0, 1.0))).collect();
        match gradient_check(&inputs, 1e-5, |v| f(v)) {
            Ok(r) if r.rel_err > worst.0 => worst = (r.rel_err, name),
            Ok(_) => {}
            Err(e) => return (false, format!("{name}: {e}")),
        }
    }
    (worst.0 < 1e-4, format!("{n} checks, worst relative error {:.2e} ({})", worst.0, worst.1))
}

// --- 2: sinkhorn ------------------------------------------------------------------

fn sinkhorn_feasibility() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_violation = 0.0f64;
    for _ in 0..100 {
        let (n0, n1) = (rng.random_range(1..30), rng.random_range(1..30));
        let cost = uniform(&mut rng, n0 * n1, 0.0, 1.0);
        let plan = match sinkhorn(&cost, n0, n1, &SinkhornConfig::default()) {
            Ok(p) => p,
            Err(e) => return (false, format!("{n0}x{n1}: {e}")),
        };
        let rows = plan.row_sums().iter().zip(&plan.row_marginal).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let cols = plan.col_sums().iter().zip(&plan.col_marginal).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_violation = worst_violation.max(rows).max(cols);
    }
    let mut worst_gap = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..=6);
        let cost = uniform(&mut rng, n * n, 0.0, 1.0);
        let cfg = SinkhornConfig { relative_epsilon: 1e-3, ..Default::default() };
        let plan = match sinkhorn(&cost, n, n, &cfg) {
            Ok(p) => p,
            Err(e) => return (false, format!("{n}x{n} at small epsilon: {e}")),
        };
        let best = min_assignment(&cost, n) / n as f64;
        worst_gap = worst_gap.max((plan.transport_cost(&cost) - best).abs() / best);
    }
    (
        worst_violation < 1e-6 && worst_gap < 0.02,
        format!("max marginal violation {worst_violation:.2e}; max gap to optimal assignment {:.3}%", 100.0 * worst_gap),
    )
}

/// Optimal assignment by enumerating permutations.
fn min_assignment(cost: &[f64], n: usize) -> f64 {
    fn go(cost: &[f64], n: usize, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(cost, n, row + 1, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

// --- 3: loss formulas --------------------------------------------------------------

fn random_state(rng: &mut ChaCha8Rng, batch: usize, k: usize, dim: usize, mask: Option<&[bool]>) -> EnvState {
    let n = batch * k;
    let mask = mask.map_or_else(|| (0..n).map(|s| s % k == 0 || rng.random_bool(0.7)).collect(), |m| m.to_vec());
    EnvState::new(batch, k, dim, uniform(rng, 2 * n, -2.0, 2.0), uniform(rng, dim * n, -2.0, 2.0), mask).unwrap()
}

/// Per-slot scalar evaluation of the three objectives.
fn loss_formula(kind: ObjectiveKind, pred: &[f64], b: &TrainBatch) -> f64 {
    let d = b.m1.dim;
    let mut total = 0.0;
    for s in (0..b.m1.mask.len()).filter(|&s| b.m1.mask[s]) {
        let row = &pred[s * (d + 2)..(s + 1) * (d + 2)];
        let target = |j: usize| {
            let (m1, mz) = if j < 2 { (b.m1.coords[2 * s + j], b.mz.coords[2 * s + j]) } else { (b.m1.features[d * s + j - 2], b.mz.features[d * s + j - 2]) };
            if kind == ObjectiveKind::Cfm { m1 - mz } else { m1 }
        };
        for j in 0..d + 2 {
            let r = row[j] - target(j);
            total += match (kind, j < 2) {
                (ObjectiveKind::Glvfm, true) => r.abs(),
                _ => 0.5 * r * r,
            };
        }
    }
    total / b.m1.batch as f64
}

fn tiny_network(d: usize) -> TransformerConfig {
    TransformerConfig {
        feature_dim: d,
        num_timepoints: 2,
        embed_dim: 8,
        mlp_hidden: 12,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        time_frequencies: 4,
        ..Default::default()
    }
}

fn loss_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let (b, k, d) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
        let m1 = random_state(&mut rng, b, k, d, None);
        let m0 = random_state(&mut rng, b, k, d, None);
        let mz = random_state(&mut rng, b, k, d, Some(&m1.mask));
        let t: Vec<f64> = (0..b).map(|_| rng.random()).collect();
        let mt = interpolate(&mz, &m1, &t).unwrap();
        let batch =
            TrainBatch { m0, m1, mz, mt, t, source_position: vec![0; b], target_position: vec![1; b], num_timepoints: 2 };
        let spec = ModelSpec { objective: ObjectiveKind::Glvfm, variant: Variant::NicheFlow, k, radius: 0.1, network: tiny_network(d) };
        let model = FlowModel::new(spec, trial).unwrap();
        // predictions through the cached-encoding path, not the tape used by the losses
        let source = batch.source_batch().unwrap();
        let head = model.conditioned(&source).unwrap();
        let pred = head(&batch.noisy_batch().unwrap()).unwrap();
        for (kind, got) in [
            (ObjectiveKind::Cfm, loss_cfm(&batch, &model)),
            (ObjectiveKind::Gvfm, loss_gvfm(&batch, &model)),
            (ObjectiveKind::Glvfm, loss_glvfm(&batch, &model)),
        ] {
            match got {
                Ok(v) => worst = worst.max((v - loss_formula(kind, &pred, &batch)).abs()),
                Err(e) => return (false, format!("trial {trial} {kind}: {e}")),
            }
        }
    }
    (worst < 1e-10, format!("50 batches x 3 objectives, max abs difference {worst:.2e}"))
}

// --- 4: first-moment generation ------------------------------------------------------

fn first_moment_generation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m1 = random_state(&mut rng, 20, 4, 3, Some(&[true; 80]));
    let start = random_state(&mut rng, 20, 4, 3, Some(&[true; 80]));
    let target = m1.joined();
    let vfm = integrate_vfm(&start, 1000, 1e-4, |_, _| Ok(target.clone())).unwrap();
    let e_vfm = max_diff(&vfm.joined(), &target);
    let v: Vec<f64> = target.iter().zip(start.joined()).map(|(a, b)| a - b).collect();
    let cfm = integrate_cfm(&start, 1000, |_, _| Ok(v.clone())).unwrap();
    let e_cfm = max_diff(&cfm.joined(), &target);
    (e_vfm < 1e-2 && e_cfm < 1e-12, format!("20 environments: mean field L-inf {e_vfm:.2e}, constant field L-inf {e_cfm:.2e}"))
}

// --- 5: transformer symmetries ----------------------------------------------------------

fn env_batch(rng: &mut ChaCha8Rng, cfg: &TransformerConfig, b: usize, k: usize, timed: bool) -> EnvBatch {
    let f = cfg.input_feature_dim();
    let mask = (0..b * k).map(|i| i % k == 0 || rng.random_bool(0.7)).collect();
    let time = timed.then(|| uniform(rng, b, 0.0, 1.0));
    EnvBatch::new(b, k, f, uniform(rng, b * k * f, -2.0, 2.0), uniform(rng, b * k * 2, -2.0, 2.0), mask, time).unwrap()
}

fn permute(x: &EnvBatch, env: usize, perm: &[usize]) -> EnvBatch {
    let mut y = x.clone();
    let f = x.feature_dim;
    for (dst, &src) in perm.iter().enumerate() {
        let (ds, ss) = (env * x.k + dst, env * x.k + src);
        y.features[ds * f..(ds + 1) * f].copy_from_slice(&x.features[ss * f..(ss + 1) * f]);
        y.coords[ds * 2..ds * 2 + 2].copy_from_slice(&x.coords[ss * 2..ss * 2 + 2]);
        y.mask[ds] = x.mask[ss];
    }
    y
}

fn shuffled(rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

fn transformer_symmetries() -> Verdict {
    let cfg = TransformerConfig { encoder_layers: 2, decoder_layers: 2, dropout: 0.1, ..tiny_network(3) };
    let model = Transformer::<f64>::new(cfg.clone(), 5).unwrap();
    let predict = |noisy: &EnvBatch, src: &EnvBatch| {
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        model.predict(&p, &noisy.on_tape(&tape).unwrap(), &src.on_tape(&tape).unwrap(), None).unwrap().value()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = cfg.output_dim();
    let (mut inv, mut equi, mut leak) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let src = env_batch(&mut rng, &cfg, 2, 6, false);
        let noisy = env_batch(&mut rng, &cfg, 2, 5, true);
        let base = predict(&noisy, &src);
        let sp = shuffled(&mut rng, 6);
        inv = inv.max(max_diff(&base, &predict(&noisy, &permute(&src, 0, &sp))));
        let np = shuffled(&mut rng, 5);
        let moved = predict(&permute(&noisy, 1, &np), &src);
        for (dst, &s) in np.iter().enumerate() {
            let (d, s) = (5 + dst, 5 + s);
            equi = equi.max(max_diff(&moved[d * w..(d + 1) * w], &base[s * w..(s + 1) * w]));
        }
        let (mut s2, mut n2) = (src.clone(), noisy.clone());
        for slot in (0..src.mask.len()).filter(|&s| !src.mask[s]) {
            let f = s2.feature_dim;
            s2.features[slot * f..(slot + 1) * f].iter_mut().for_each(|v| *v = rng.random_range(-9.0..9.0));
            s2.coords[slot * 2] = rng.random_range(-9.0..9.0);
        }
        for slot in (0..noisy.mask.len()).filter(|&s| !noisy.mask[s]) {
            n2.features[slot * n2.feature_dim] = rng.random_range(-9.0..9.0);
            n2.coords[slot * 2 + 1] = rng.random_range(-9.0..9.0);
        }
        let out = predict(&n2, &s2);
        for slot in (0..noisy.mask.len()).filter(|&s| noisy.mask[s]) {
            leak = leak.max(max_diff(&out[slot * w..(slot + 1) * w], &base[slot * w..(slot + 1) * w]));
        }
    }
    (
        inv < 1e-8 && equi < 1e-8 && leak < 1e-10,
        format!("100 trials each: source permutation {inv:.1e}, noisy permutation {equi:.1e}, masked slots {leak:.1e}"),
    )
}

// --- 6: metric oracles ----------------------------------------------------------------------

fn brute_directed(from: &[[f64; 2]], to: &[[f64; 2]]) -> f64 {
    from.iter()
        .map(|p| to.iter().map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / from.len() as f64
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let points = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> { (0..50).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect() };
    let mut chamfer = 0.0f64;
    for _ in 0..50 {
        let (g, r) = (points(&mut rng), points(&mut rng));
        let (gs, rs) = (vec![g.clone()], vec![r.clone()]);
        chamfer = chamfer.max((psd(&gs, &rs).unwrap() - brute_directed(&g, &r)).abs());
        chamfer = chamfer.max((spd(&gs, &rs).unwrap() - brute_directed(&r, &g)).abs());
    }
    let mut kde = 0.0f64;
    for _ in 0..50 {
        let s = points(&mut rng);
        let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let sigma = rng.random_range(0.1..1.0);
        let direct = s.iter().map(|p| (-((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)) / (2.0 * sigma * sigma)).exp()).sum::<f64>() / 50.0;
        kde = kde.max((kde_likelihood(&s, q, sigma).unwrap() - direct).abs());
    }
    let mut w1 = 0.0f64;
    for d in [0.5f64, 1.0, 3.0] {
        let got = wasserstein(&[vec![0.0, 0.0]], &[vec![d, 0.0]], 1, &WassersteinConfig::default()).unwrap();
        w1 = w1.max((got - d).abs() / d);
    }
    (
        chamfer < 1e-12 && kde < 1e-12 && w1 < 0.01,
        format!("psd/spd vs brute force {chamfer:.1e}; kde vs direct sum {kde:.1e}; point-mass W1 relative error {w1:.1e}"),
    )
}

// --- 7 and 8: end to end ----------------------------------------------------------------------

fn ordering(out: &ExperimentOutcome, elapsed: Duration) -> Verdict {
    let within = elapsed <= Duration::from_secs(20 * 60);
    let mut parts: Vec<String> = out.checks.iter().map(|c| format!("{} {}: {}", if c.passed { "ok" } else { "FAILED" }, c.description, c.detail)).collect();
    parts.push(format!("runtime {:.0} s (limit 1200 s)", elapsed.as_secs_f64()));
    (out.passed() && within, parts.join("\n       "))
}

fn same_files(a: &Path, b: &Path, rel: &Path, diffs: &mut Vec<String>) {
    let Ok(entries) = std::fs::read_dir(a.join(rel)) else { return };
    let mut names: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.file_name()).collect();
    names.sort();
    for name in names {
        let r = rel.join(&name);
        if a.join(&r).is_dir() {
            same_files(a, b, &r, diffs);
        } else if r.starts_with("logs") {
            continue;
        } else if std::fs::read(a.join(&r)).ok() != std::fs::read(b.join(&r)).ok() {
            diffs.push(r.display().to_string());
        }
    }
}

fn determinism(first: &ExperimentOutcome, second: &ExperimentOutcome, a: &Path, b: &Path) -> Verdict {
    let mut diffs = Vec::new();
    same_files(a, b, Path::new(""), &mut diffs);
    let traces = first.runs.iter().filter(|r| !r.losses.is_empty()).count();
    let ok = first == second && diffs.is_empty();
    let detail = if ok {
        format!("{} reports and {traces} loss traces identical, files compared byte for byte", first.runs.len())
    } else {
        format!("outcomes equal: {}; differing files: {diffs:?}", first == second)
    };
    (ok, detail)
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored
    let started = Instant::now();
    let mut failures = 0;
    let mut report = |id: &str, title: &str, t: Instant, (ok, detail): Verdict| {
        println!("[{}] {id} {title} ({:.1} s)\n       {detail}", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        if !ok {
            failures += 1;
        }
    };
    let t = Instant::now();
    let v = autodiff();
    report("1", "autodiff matches central differences", t, (v.0 && t.elapsed() < Duration::from_secs(10), v.1));
    let t = Instant::now();
    let v = sinkhorn_feasibility();
    report("2", "sinkhorn feasibility and optimality", t, (v.0 && t.elapsed() < Duration::from_secs(30), v.1));
    let t = Instant::now();
    report("3", "loss formula oracles", t, loss_oracles());
    let t = Instant::now();
    report("4", "first-moment generation", t, first_moment_generation());
    let t = Instant::now();
    report("5", "transformer symmetries", t, transformer_symmetries());
    let t = Instant::now();
    report("6", "metric oracles", t, metric_oracles());

    let spec = ExperimentSpec::drift_ordering();
    let root = std::env::temp_dir().join(format!("nfkit-acceptance-{}", std::process::id()));
    let (dir_a, dir_b) = (root.join("first"), root.join("second"));
    let t = Instant::now();
    let first = run_experiment(&spec, Some(&dir_a));
    let elapsed = t.elapsed();
    match &first {
        Ok(out) => {
            report("7", "end-to-end ordering on drift data", t, ordering(out, elapsed));
            println!("       table: {}", dir_a.join("results.md").display());
            print_table(out);
        }
        Err(e) => report("7", "end-to-end ordering on drift data", t, (false, e.to_string())),
    }
    let t = Instant::now();
    match (&first, run_experiment(&spec, Some(&dir_b))) {
        (Ok(a), Ok(b)) => report("8", "bit-identical rerun", t, determinism(a, &b, &dir_a, &dir_b)),
        (_, Err(e)) => report("8", "bit-identical rerun", t, (false, e.to_string())),
        (Err(_), Ok(_)) => report("8", "bit-identical rerun", t, (false, "first run failed".into())),
    }
    println!("acceptance: {} of 8 criteria passed in {:.0} s", 8 - failures, started.elapsed().as_secs_f64());
    if failures > 0 && std::env::var("NFKIT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn print_table(out: &ExperimentOutcome) {
    for line in out.markdown().lines().filter(|l| l.starts_with("| ") && !l.starts_with("| model") && !l.starts_with("| criterion")) {
        if !line.contains("PASS |") && !line.contains("FAIL |") {
            println!("       {line}");
        }
    }
}
