//! Acceptance suite. Each test prints one PASS/FAIL line to stderr,
//! bypassing the test harness capture so the verdicts show up in plain
//! `cargo test` output.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use featsplat::diffcore::{ParamStore, Tape, Tensor};
use featsplat::featpipe::fuse_variance;
use featsplat::interact::{knn, AttentionBlock, NeighborGraph};
use featsplat::optim::{loss_total, train, LossWeights, Model, TrainConfig};
use featsplat::raster::{render, render_oracle, RasterConfig, SplatInputs};
use featsplat::scene::{covariance_from_scale_quat, Camera, FEATURE_DIM};
use featsplat::workbench::{evaluate_model, gen_scene, gradient_suite, RigSpec, SceneDataset};

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("{} [{n}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "[{n}] {name}: {detail}");
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- [1]

#[test]
fn gradient_suite_passes() {
    let t0 = Instant::now();
    let results = gradient_suite(0).unwrap();
    let elapsed = t0.elapsed();
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    let worst = results.iter().filter(|r| r.tolerance < 1e-3).map(|r| r.max_rel_err).fold(0.0, f64::max);
    let worst_raster = results.iter().filter(|r| r.tolerance >= 1e-3).map(|r| r.max_rel_err).fold(0.0, f64::max);
    let pass = failed.is_empty() && elapsed < Duration::from_secs(120);
    verdict(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} checks, worst rel err {worst:.2e} (ops, tol 1e-4), {worst_raster:.2e} (rasterizer, tol 1e-2), {:.1}s{}",
            results.len(),
            secs(elapsed),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(" | ")) }
        ),
    );
}

// ---------------------------------------------------------------- [2]

fn random_splats(seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=200);
    let (mut mu, mut cov, mut color, mut opacity) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        mu.extend((0..3).map(|_| rng.random_range(-0.7..0.7)));
        color.extend((0..3).map(|_| rng.random_range(0.0..1.0)));
        let s = [0; 3].map(|_| rng.random_range(0.01..0.2));
        let q = loop {
            let q = [0; 4].map(|_| rng.random_range(-1.0..1.0f64));
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-3 {
                break q.map(|v| v / norm);
            }
        };
        cov.extend(covariance_from_scale_quat(s, q));
        opacity.push(rng.random_range(0.05..0.99));
    }
    (
        Tensor::new(&[n, 3], mu).unwrap(),
        Tensor::new(&[n, 6], cov).unwrap(),
        Tensor::new(&[n, 3], color).unwrap(),
        Tensor::new(&[n, 1], opacity).unwrap(),
    )
}

#[test]
fn tiled_renderer_matches_oracle() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_default: f64 = 0.0;
    for seed in 0..100u64 {
        let (mu, cov, color, opacity) = random_splats(seed);
        let inputs = SplatInputs { mu: &mu, cov: &cov, color: &color, opacity: &opacity };
        let eye = [0.4 * (seed as f64).sin(), -0.3, -2.5];
        let cam = Camera::look_at(0, eye, [0.0; 3], (64, 64), 64.0).unwrap();
        let oracle = render_oracle(&inputs, &cam, &RasterConfig::exhaustive()).unwrap();
        let tiled = render(&inputs, &cam, &RasterConfig::exhaustive()).unwrap();
        let fast = render(&inputs, &cam, &RasterConfig::default()).unwrap();
        for (a, b) in tiled.image.iter().zip(&oracle.image) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in fast.image.iter().zip(&oracle.image) {
            worst_default = worst_default.max((a - b).abs());
        }
    }
    let elapsed = t0.elapsed();
    verdict(
        2,
        "tiled renderer vs oracle",
        worst < 1e-6 && elapsed < Duration::from_secs(120),
        &format!(
            "100 scenes, max abs diff {worst:.2e} (tol 1e-6); with early exit {worst_default:.2e}; {:.1}s",
            secs(elapsed)
        ),
    );
}

// ---------------------------------------------------------------- [3]

/// Independent loop evaluation of the attention formula.
fn attention_by_loops(store: &ParamStore<f64>, blk: &AttentionBlock, f: &Tensor<f64>, pts: &[[f64; 3]], g: &NeighborGraph) -> Vec<Vec<f64>> {
    let lin = |l: &featsplat::diffcore::nn::Linear, x: &[f64]| -> Vec<f64> {
        let w = store.get(l.weight).data();
        let b = store.get(l.bias).data();
        (0..l.fan_out).map(|o| b[o] + (0..l.fan_in).map(|i| x[i] * w[i * l.fan_out + o]).sum::<f64>()).collect()
    };
    let mlp = |m: &featsplat::diffcore::nn::Mlp, x: &[f64]| -> Vec<f64> {
        let h: Vec<f64> = lin(&m.layers[0], x).into_iter().map(|v| v.max(0.0)).collect();
        lin(&m.layers[1], &h)
    };
    let mut out = Vec::new();
    for i in 0..g.num_points {
        let q = lin(&blk.phi, f.row(i));
        let mut logits = Vec::new();
        let mut values = Vec::new();
        for &j in g.neighbors(i) {
            let offset: Vec<f64> = (0..3).map(|a| pts[i][a] - pts[j][a]).collect();
            let delta = mlp(&blk.theta, &offset);
            let k = lin(&blk.psi, f.row(j));
            let arg: Vec<f64> = (0..FEATURE_DIM).map(|c| q[c] - k[c] + delta[c]).collect();
            logits.push(mlp(&blk.gamma, &arg));
            let a = lin(&blk.alpha_transform, f.row(j));
            values.push((0..FEATURE_DIM).map(|c| a[c] + delta[c]).collect::<Vec<f64>>());
        }
        let row = (0..FEATURE_DIM)
            .map(|c| {
                let z: f64 = logits.iter().map(|l| l[c].exp()).sum();
                logits.iter().zip(&values).map(|(l, v)| l[c].exp() / z * v[c]).sum()
            })
            .collect();
        out.push(row);
    }
    out
}

fn random_block(seed: u64) -> (AttentionBlock, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blk = AttentionBlock::new(&mut store, &mut rng);
    for pm in store.iter_mut() {
        pm.value = pm.value.map(|v| 0.5 * v + 0.02);
    }
    (blk, store)
}

fn random_rows(m: usize, d: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(&[m, d], (0..m * d).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn attention_matches_loop_oracle() {
    let (blk, store) = random_block(3);
    let pts = [[0.1, 0.2, 0.3], [0.4, -0.1, 0.0], [-0.3, 0.2, 0.5]];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = random_rows(3, FEATURE_DIM, -1.0, 1.0, &mut rng);
    let g = knn(&pts, 2);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let pos = Tensor::new(&[3, 3], pts.iter().flatten().copied().collect()).unwrap();
    let got = blk.forward(&p, tape.constant(f.clone()), tape.constant(pos), &g).unwrap().value();
    let want = attention_by_loops(&store, &blk, &f, &pts, &g);
    let mut diff: f64 = 0.0;
    for (i, row) in want.iter().enumerate() {
        for c in 0..FEATURE_DIM {
            diff = diff.max((got.row(i)[c] - row[c]).abs());
        }
    }

    let mut worst_sum: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let m = rng.random_range(1..12);
        let k = rng.random_range(1..6);
        let (blk, store) = random_block(seed);
        let pts: Vec<[f64; 3]> = (0..m).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
        let f = random_rows(m, FEATURE_DIM, -2.0, 2.0, &mut rng);
        let g = knn(&pts, k);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let pos = Tensor::new(&[m, 3], pts.iter().flatten().copied().collect()).unwrap();
        let w = blk.attend(&p, tape.constant(f), tape.constant(pos), &g).unwrap().weights.value();
        let n = g.width;
        for i in 0..m {
            for c in 0..FEATURE_DIM {
                let s: f64 = (0..n).map(|j| w.data()[(i * n + j) * FEATURE_DIM + c]).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
        }
    }
    verdict(
        3,
        "attention vs loop oracle",
        diff < 1e-6 && worst_sum < 1e-6,
        &format!("3-point max abs diff {diff:.2e} (tol 1e-6); worst |Σw − 1| over 100 instances {worst_sum:.2e}"),
    );
}

// ---------------------------------------------------------------- [4]

#[test]
fn variance_fusion_properties() {
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views = rng.random_range(1..7);
        let dim = rng.random_range(1..9);
        let samples: Vec<Vec<f64>> = (0..views).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let flags: Vec<bool> = (0..views).map(|_| rng.random_bool(0.8)).collect();
        let got = fuse_variance(&samples, &flags);

        let seen: Vec<&Vec<f64>> = samples.iter().zip(&flags).filter(|(_, &f)| f).map(|(s, _)| s).collect();
        for c in 0..dim {
            let want = if seen.is_empty() {
                0.0
            } else {
                let n = seen.len() as f64;
                let mean = seen.iter().map(|s| s[c]).sum::<f64>() / n;
                seen.iter().map(|s| (s[c] - mean).powi(2)).sum::<f64>() / n
            };
            worst = worst.max((got[c] - want).abs());
            if got[c] < 0.0 {
                failures.push(format!("seed {seed}: negative variance {}", got[c]));
            }
        }

        let mut order: Vec<usize> = (0..views).collect();
        for i in (1..views).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let ps: Vec<Vec<f64>> = order.iter().map(|&i| samples[i].clone()).collect();
        let pf: Vec<bool> = order.iter().map(|&i| flags[i]).collect();
        let permuted = fuse_variance(&ps, &pf);
        if got.iter().zip(&permuted).any(|(a, b)| (a - b).abs() > 1e-12) {
            failures.push(format!("seed {seed}: permutation changed the result"));
        }

        let same = vec![samples[0].clone(); views];
        if fuse_variance(&same, &vec![true; views]).iter().any(|&v| v != 0.0) {
            failures.push(format!("seed {seed}: identical views give nonzero variance"));
        }
    }
    let pass = failures.is_empty() && worst < 1e-7;
    verdict(
        4,
        "variance fusion properties",
        pass,
        &format!("100 cases, max diff from direct formula {worst:.2e} (tol 1e-7){}", if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }),
    );
}

// ---------------------------------------------------------------- shared runs

struct Run {
    csv: String,
    model: Model<f32>,
    config: TrainConfig,
    elapsed: Duration,
}

fn train_run(data: &SceneDataset, config: TrainConfig) -> Run {
    let t0 = Instant::now();
    let mut csv = String::from(featsplat::optim::MetricsRow::CSV_HEADER);
    csv.push('\n');
    let model = train(config.clone(), data.train_data(), |row| {
        csv.push_str(&row.csv());
        csv.push('\n');
        Ok(())
    })
    .unwrap();
    Run { csv, model, config, elapsed: t0.elapsed() }
}

fn heldout(run: &Run, data: &SceneDataset, views: &[usize]) -> (f64, f64) {
    let r = evaluate_model(&run.model, &run.config.raster, data, views).unwrap();
    (r.mean_psnr, r.mean_ssim)
}

fn default_scene() -> &'static SceneDataset {
    static DATA: OnceLock<SceneDataset> = OnceLock::new();
    DATA.get_or_init(|| gen_scene(7, 200, &RigSpec::default()).unwrap().1)
}

fn default_config() -> TrainConfig {
    TrainConfig { iters: 2000, seed: 7, threads: 1, ..TrainConfig::default() }
}

/// Two identical single-threaded runs of the default experiment.
fn default_runs() -> &'static (Run, Run) {
    static RUNS: OnceLock<(Run, Run)> = OnceLock::new();
    RUNS.get_or_init(|| (train_run(default_scene(), default_config()), train_run(default_scene(), default_config())))
}

// ---------------------------------------------------------------- [5]

/// Calibrated on the default experiment (train 39.35 dB, held-out 30.42 dB,
/// SSIM 0.956) and frozen with a 1 dB / 0.05 margin, rounded down.
const TRAIN_PSNR_MIN: f64 = 38.0;
const HELDOUT_PSNR_MIN: f64 = 29.0;
const HELDOUT_SSIM_MIN: f64 = 0.90;

#[test]
fn desk_scale_overfit() {
    let data = default_scene();
    let (run, _) = default_runs();
    let (train_psnr, _) = heldout(run, data, &data.train);
    let (psnr, ssim) = heldout(run, data, &data.test);
    let pass = train_psnr >= TRAIN_PSNR_MIN
        && psnr >= HELDOUT_PSNR_MIN
        && ssim >= HELDOUT_SSIM_MIN
        && run.elapsed < Duration::from_secs(15 * 60);
    verdict(
        5,
        "desk-scale overfit",
        pass,
        &format!(
            "train PSNR {train_psnr:.2} dB (min {TRAIN_PSNR_MIN}), held-out PSNR {psnr:.2} dB (min {HELDOUT_PSNR_MIN}), SSIM {ssim:.3} (min {HELDOUT_SSIM_MIN}), {} points, {:.0}s",
            run.model.len(),
            secs(run.elapsed)
        ),
    );
}

// ---------------------------------------------------------------- [6]

#[test]
fn interaction_ablation_direction() {
    let t0 = Instant::now();
    let ks = [0usize, 3, 6];
    let mut sums = [0.0; 3];
    let mut per_seed = Vec::new();
    for seed in 1..=5u64 {
        let data = gen_scene(seed, 200, &RigSpec::default()).unwrap().1;
        let mut row = Vec::new();
        for (slot, &k) in ks.iter().enumerate() {
            let mut config = TrainConfig { iters: 2000, seed, threads: 1, ..TrainConfig::default() };
            config.model.k_neighbors = k;
            let run = train_run(&data, config);
            let (psnr, _) = heldout(&run, &data, &data.test);
            sums[slot] += psnr / 5.0;
            row.push(format!("{psnr:.2}"));
        }
        per_seed.push(format!("seed {seed}: {}", row.join("/")));
    }
    let [k0, k3, k6] = sums;
    let elapsed = t0.elapsed();
    verdict(
        6,
        "interaction ablation direction",
        k3 > k0 && k6 >= k0 && elapsed < Duration::from_secs(90 * 60),
        &format!(
            "mean held-out PSNR K=0 {k0:.3}, K=3 {k3:.3}, K=6 {k6:.3} dB ({}), {:.0}s",
            per_seed.join(", "),
            secs(elapsed)
        ),
    );
}

// ---------------------------------------------------------------- [7]

#[test]
fn loss_weights_and_ablations() {
    let w = LossWeights::default();
    let unit = w.total(w.l1 + w.ssim, 1.0, 1.0);
    let mut ok = (unit - 1.117).abs() < 1e-12;
    let no_depth = LossWeights { depth: 0.0, ..w };
    let no_smooth = LossWeights { smooth: 0.0, ..w };
    let neither = LossWeights { depth: 0.0, smooth: 0.0, ..w };
    ok &= (no_depth.total(1.0, 1.0, 1.0) - 1.067).abs() < 1e-12;
    ok &= (no_smooth.total(1.0, 1.0, 1.0) - 1.05).abs() < 1e-12;
    ok &= (neither.total(1.0, 1.0, 1.0) - 1.0).abs() < 1e-12;

    // the breakdown of a real evaluation follows the same weights
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layout = Tensor::new(&[8, 8, 5], (0..320).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let gt = Tensor::new(&[8, 8, 3], (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let prior = Tensor::new(&[8, 8], (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let tape = Tape::new();
    let (_, b) = loss_total(tape.constant(layout), &gt, &prior, &w).unwrap();
    let recomposed = 0.8 * b.l1 + 0.2 * (1.0 - b.ssim) + 0.05 * b.depth + 0.067 * b.smooth;
    let breakdown_err = (recomposed - b.total).abs();
    ok &= breakdown_err < 1e-12;

    let data = default_scene();
    let (base, _) = default_runs();
    let reference = heldout(base, data, &data.test);
    let mut lines = vec![format!("default {:.3} dB / {:.4}", reference.0, reference.1)];
    for (name, weights) in [("no depth", no_depth), ("no smooth", no_smooth), ("neither", neither)] {
        let config = TrainConfig { loss: weights, ..default_config() };
        let run = train_run(data, config);
        let m = heldout(&run, data, &data.test);
        ok &= m != reference;
        lines.push(format!("{name} {:.3} dB / {:.4}", m.0, m.1));
    }
    verdict(
        7,
        "loss weights and ablations",
        ok,
        &format!("unit sub-losses give {unit:.3}, breakdown err {breakdown_err:.1e}; held-out PSNR/SSIM: {}", lines.join(", ")),
    );
}

// ---------------------------------------------------------------- [8]

#[test]
fn single_thread_runs_are_bit_identical() {
    let (a, b) = default_runs();
    let rows = a.csv.lines().count() - 1;
    let same_model = a.model.store.ids().iter().all(|&id| a.model.store.get(id) == b.model.store.get(id));
    verdict(
        8,
        "determinism",
        a.csv == b.csv && same_model,
        &format!(
            "two runs, {rows} metrics rows, csv {}, final parameters {}",
            if a.csv == b.csv { "identical" } else { "differ" },
            if same_model { "identical" } else { "differ" }
        ),
    );
}

// ---------------------------------------------------------------- [9]

fn run_cli(args: &[&str], cwd: &Path) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_featsplat")).args(args).current_dir(cwd).output().unwrap();
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.success(), text)
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let steps: [&[&str]; 5] = [
        &["gen", "--seed", "7", "--gaussians", "200", "--views", "12", "--train-views", "3", "--size", "64", "--out", "data"],
        &["train", "--data", "data", "--iters", "300", "--no-densify", "--out", "run", "--threads", "1"],
        &["render", "--checkpoint", "run", "--data", "data", "--sweep", "0.5", "--out", "sweep.png"],
        &["eval", "--data", "data", "--checkpoint", "run"],
        &["gradcheck"],
    ];
    let mut failures = Vec::new();
    for args in steps {
        let (ok, text) = run_cli(args, cwd);
        if !ok {
            failures.push(format!("`{}` failed: {}", args.join(" "), text.trim()));
        }
    }
    let images = std::fs::read_dir(cwd.join("data/images")).map(|d| d.count()).unwrap_or(0);
    let json: Option<serde_json::Value> =
        std::fs::read_to_string(cwd.join("run/metrics.json")).ok().and_then(|s| serde_json::from_str(&s).ok());
    let views = json.as_ref().and_then(|j| j["views"].as_array()).map_or(0, |v| v.len());
    let scored = json.as_ref().and_then(|j| j["views"].as_array()).is_some_and(|v| {
        v.iter().all(|e| e["psnr"].as_f64().is_some_and(f64::is_finite) && e["ssim"].as_f64().is_some_and(f64::is_finite))
    });
    let outputs = ["run/model.ckpt", "run/metrics.csv", "sweep.png", "sweep_depth.png"].iter().all(|p| cwd.join(p).exists());
    let (usage_ok, _) = run_cli(&["train", "--bogus"], cwd);
    let usage_code = Command::new(env!("CARGO_BIN_EXE_featsplat")).args(["train", "--bogus"]).output().unwrap().status.code();
    let pass = failures.is_empty() && images == 12 && views == 9 && scored && outputs && !usage_ok && usage_code == Some(2);
    verdict(
        9,
        "command-line pipeline",
        pass,
        &format!(
            "{images} images, metrics.json with {views} scored views, unknown flag exits {usage_code:?}{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    );
}
