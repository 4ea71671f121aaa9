//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dmad_core::eval::{auroc, average_precision, f1max, EvalReport};
use dmad_core::feature_store::{decode_feature_grid, encode_feature_grid, FeatureGrid};
use dmad_core::knowledge::KnowledgeMode;
use dmad_core::learner::{
    grad_check, Checkpoint, GradCheckSpec, ModelParams, OptimizerConfig, OptimizerState, ParamGroup,
};
use dmad_core::memory_bank::{greedy_coreset, BankKind, CoresetConfig, MemoryBank, Mode};
use dmad_core::pipeline::{self, Ablation, RunConfig};
use dmad_core::synth::{self, ImagesPerObject, SynthSpec};
use dmad_core::Error;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome {
            pass: false,
            detail: format!("panicked: {msg}"),
        }
    });
    let verdict = if r.pass { "PASS" } else { "FAIL" };
    println!(
        "{verdict} {name}: {} [{:.2}s]",
        r.detail,
        t.elapsed().as_secs_f64()
    );
    r.pass
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

// ---------------------------------------------------------------- oracles

fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut ts = scores.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    ts.iter()
        .map(|&t| {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(s, &l)| **s >= t && l)
                .count();
            let fp = scores
                .iter()
                .zip(labels)
                .filter(|(s, &l)| **s >= t && !l)
                .count();
            (tp, fp)
        })
        .collect()
}

fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - p;
    let (mut prev_tpr, mut prev_fpr, mut area) = (0.0, 0.0, 0.0);
    for (tp, fp) in sweep(scores, labels) {
        let (tpr, fpr) = (tp as f64 / p, fp as f64 / n);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        (prev_tpr, prev_fpr) = (tpr, fpr);
    }
    area
}

fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let (mut prev_recall, mut ap) = (0.0, 0.0);
    for (tp, fp) in sweep(scores, labels) {
        let recall = tp as f64 / p;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    ap
}

fn f1_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    sweep(scores, labels)
        .into_iter()
        .filter(|&(tp, _)| tp > 0)
        .map(|(tp, fp)| 2.0 * tp as f64 / (p + (tp + fp) as f64))
        .fold(0.0, f64::max)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn covering_radius(points: &[Vec<f64>], centers: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|&c| dist(p, &points[c]))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

fn optimal_radius(points: &[Vec<f64>], m: usize) -> f64 {
    let k = points.len();
    (0u32..1 << k)
        .filter(|mask| mask.count_ones() as usize == m)
        .map(|mask| {
            let s: Vec<usize> = (0..k).filter(|i| mask >> i & 1 == 1).collect();
            covering_radius(points, &s)
        })
        .fold(f64::INFINITY, f64::min)
}

fn brute_nearest(bank: &Array2<f32>, q: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..bank.nrows() {
        let mut d = 0.0;
        for j in 0..bank.ncols() {
            let t = q[j] - bank[[i, j]] as f64;
            d += t * t;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------- criteria

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let report = grad_check(&GradCheckSpec::default(), 0).expect("grad check runs");
    let elapsed = t.elapsed();
    let groups: Vec<String> = ParamGroup::ALL
        .iter()
        .map(|g| {
            format!(
                "{g:?}={:.2e}",
                report.max_rel_error.get(g).copied().unwrap_or(f64::NAN)
            )
        })
        .collect();
    let all_ok = ParamGroup::ALL
        .iter()
        .all(|g| report.max_rel_error.get(g).is_some_and(|&e| e <= 1e-4));
    Outcome {
        pass: all_ok && elapsed < Duration::from_secs(10),
        detail: format!(
            "C=4 N=3 1 block, max rel error {} (limit 1e-4), {:.2}s (limit 10s)",
            groups.join(" "),
            elapsed.as_secs_f64()
        ),
    }
}

fn coreset_quality() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_ratio: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..200 {
        let k = rng.random_range(4..=10);
        let c = rng.random_range(1..=3);
        let m = rng.random_range(2..=3);
        let data: Vec<f32> = (0..k * c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let arr = Array2::from_shape_vec((k, c), data).unwrap();
        let cfg = CoresetConfig {
            retention: m as f64 / k as f64,
            seed: rng.random(),
            projection_dim: None,
        };
        let picked = greedy_coreset(arr.view(), &cfg).unwrap();
        let pts: Vec<Vec<f64>> = arr
            .outer_iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        let greedy = covering_radius(&pts, &picked);
        let opt = optimal_radius(&pts, m);
        if picked.len() != m || greedy > 2.0 * opt + 1e-9 {
            failures += 1;
        }
        if opt > 0.0 {
            worst_ratio = worst_ratio.max(greedy / opt);
        }
    }
    let elapsed = t.elapsed();
    Outcome {
        pass: failures == 0 && elapsed < Duration::from_secs(30),
        detail: format!("200 instances (k<=10, m in {{2,3}}), {failures} over 2x optimum, worst ratio {worst_ratio:.3}"),
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(2..=64);
        let levels = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        worst = worst
            .max((auroc(&scores, &labels).unwrap() - auroc_oracle(&scores, &labels)).abs())
            .max((average_precision(&scores, &labels).unwrap() - ap_oracle(&scores, &labels)).abs())
            .max((f1max(&scores, &labels).unwrap() - f1_oracle(&scores, &labels)).abs());
    }
    let a = auroc(&[0.2, 0.4, 0.6, 0.8], &[false, true, false, true]).unwrap();
    let ap = average_precision(&[3.0, 2.0, 1.0], &[true, false, true]).unwrap();
    let ap_want = (1.0 + 2.0 / 3.0) / 2.0;
    Outcome {
        pass: worst <= 1e-9 && a == 0.75 && (ap - ap_want).abs() < 1e-15,
        detail: format!("500 inputs, max |metric - oracle| {worst:.1e} (limit 1e-9); auroc example {a}, ap example {ap:.6}"),
    }
}

fn nearest_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut tied_queries = 0;
    for inst in 0..100 {
        let k = rng.random_range(1..=256);
        let n = rng.random_range(1..=64);
        let c = rng.random_range(1..=8);
        let lattice = inst % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if lattice {
                rng.random_range(-2..=2) as f64
            } else {
                rng.random_range(-3.0..3.0)
            }
        };
        let bank_rows: Vec<f32> = (0..k * c).map(|_| draw(&mut rng) as f32).collect();
        let bank_arr = Array2::from_shape_vec((k, c), bank_rows).unwrap();
        let queries = Array2::from_shape_fn((n, c), |_| draw(&mut rng));
        let bank = MemoryBank::new(BankKind::Normal, bank_arr.clone()).unwrap();
        let got = bank.nearest_batch(queries.view()).unwrap();
        for (i, q) in queries.outer_iter().enumerate() {
            let q = q.to_vec();
            let want = brute_nearest(&bank_arr, &q);
            if got[i] != want {
                mismatches += 1;
            }
            let best: f64 = dist(&q, &bank_arr.row(want).mapv(f64::from).to_vec());
            let ties = bank_arr
                .outer_iter()
                .filter(|r| dist(&q, &r.mapv(f64::from).to_vec()) == best)
                .count();
            if ties > 1 {
                tied_queries += 1;
            }
        }
    }
    Outcome {
        pass: mismatches == 0 && tied_queries > 0,
        detail: format!("100 instances (bank<=256, queries<=64), {mismatches} mismatches, {tied_queries} queries with tied nearest rows"),
    }
}

/// Reduced-schedule training used for the desk-scale experiments.
fn desk_config(dir: &Path, mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::for_mode(mode);
    cfg.paths.rebase(dir);
    cfg.train.epochs = 5;
    cfg.train.batch_size = 4;
    cfg.augment.noise_std = 0.1;
    cfg.threads = 1;
    cfg.deterministic = true;
    cfg
}

fn run_pipeline(cfg: &RunConfig) -> EvalReport {
    pipeline::build_banks(cfg).expect("banks");
    pipeline::train_stage(cfg).expect("training");
    pipeline::evaluate(cfg).expect("evaluation")
}

fn per_object(report: &EvalReport) -> String {
    report
        .per_object
        .iter()
        .map(|(id, m)| {
            format!(
                "{id} img {:.3} px {:.3}",
                m.image_auroc.unwrap_or(f64::NAN),
                m.pixel_auroc.unwrap_or(f64::NAN)
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn end_to_end_unsupervised(work: &Path) -> Outcome {
    let dir = work.join("e2e");
    synth::generate(&SynthSpec::default(), &dir).unwrap();
    let cfg = desk_config(&dir, Mode::Unsupervised);
    let t = Instant::now();
    let report = single_threaded(|| run_pipeline(&cfg));
    let elapsed = t.elapsed();
    let ok = report.per_object.values().all(|m| {
        m.image_auroc.is_some_and(|v| v >= 0.95) && m.pixel_auroc.is_some_and(|v| v >= 0.95)
    });
    Outcome {
        pass: ok && report.per_object.len() == 3 && elapsed < Duration::from_secs(120),
        detail: format!(
            "default synthetic spec, epochs=5 batch_size=4 noise_std=0.1, 1 thread, {:.1}s (limit 120s): {}",
            elapsed.as_secs_f64(),
            per_object(&report)
        ),
    }
}

const SEMI_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct SeedResult {
    unsup: f64,
    semi: f64,
    filter_on: f64,
    filter_off: f64,
    rows: usize,
}

fn semi_seed(data: &Path, seed: u64) -> SeedResult {
    let work = data.join(format!("seed_{seed}"));
    let config = |sub: &str, mode| {
        let mut cfg = desk_config(&work.join(sub), mode);
        cfg.paths = rebased_data_paths(data, &cfg);
        cfg.apply_seed(seed);
        cfg
    };
    let u = run_pipeline(&config("unsup", Mode::Unsupervised))
        .aggregate
        .image_auroc
        .unwrap();

    let mut semi = config("semi", Mode::SemiSupervised);
    semi.ablation = Ablation {
        filter: true,
        include_m_o: false,
        include_m_as: true,
        include_m_p: true,
    };
    semi.knowledge = KnowledgeMode {
        use_attention: false,
        use_distance: true,
    };
    let s = run_pipeline(&semi).aggregate.image_auroc.unwrap();

    let base = config("ablation", Mode::SemiSupervised);
    let grid = pipeline::run_ablation(&base, &pipeline::ablation_grid(), &work.join("ablation"))
        .expect("ablation grid");
    let img = |name: &str| {
        grid.iter()
            .find(|r| r.variant.name == name)
            .and_then(|r| r.image_auroc)
            .unwrap()
    };
    SeedResult {
        unsup: u,
        semi: s,
        filter_on: img("semi_mo_mas_dist"),
        filter_off: img("semi_nofilter_mo_mas_dist"),
        rows: grid.len(),
    }
}

fn semi_supervised_benefit(work: &Path) -> Outcome {
    let dir = work.join("semi");
    let spec = SynthSpec {
        images_per_object: ImagesPerObject {
            seen_anomalies: 10,
            ..ImagesPerObject::default()
        },
        ..SynthSpec::default()
    };
    synth::generate(&spec, &dir).unwrap();

    use rayon::prelude::*;
    let runs: Vec<SeedResult> = SEMI_SEEDS.par_iter().map(|&s| semi_seed(&dir, s)).collect();
    let mean = |f: fn(&SeedResult) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (u, s) = (mean(|r| r.unsup), mean(|r| r.semi));
    let (on, off) = (mean(|r| r.filter_on), mean(|r| r.filter_off));
    let gaps: Vec<String> = runs
        .iter()
        .map(|r| format!("{:+.3}", r.filter_on - r.filter_off))
        .collect();
    Outcome {
        pass: s >= u - 0.01 && on - off > 0.0 && runs.iter().all(|r| r.rows == 7),
        detail: format!(
            "10 seen anomalies/object, mean over seeds {SEMI_SEEDS:?}: semi (filter, M_as, M_p, no attention) image AUROC {s:.4} vs unsupervised {u:.4} (need >= {:.4}); 7-row ablation grid, filter on {on:.4} vs off {off:.4}, gap {:+.4} (per seed {})",
            u - 0.01,
            on - off,
            gaps.join(" ")
        ),
    }
}

/// Data paths point at the generated dataset; artifacts stay under `cfg`'s own directory.
fn rebased_data_paths(data: &Path, cfg: &RunConfig) -> pipeline::RunPaths {
    let mut paths = cfg.paths.clone();
    paths.train_manifest = data.join("train.json");
    paths.test_manifest = data.join("test.json");
    paths.outlier_dir = Some(data.join("outliers"));
    paths
}

fn hash_tree(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap()))));
            }
        }
    }
    out.sort();
    out
}

fn determinism(work: &Path) -> Outcome {
    let data = work.join("det_data");
    synth::generate(&SynthSpec::default(), &data).unwrap();
    let run = work.join("det_run");
    std::fs::create_dir_all(&run).unwrap();
    let cfg = run.join("config.json");
    std::fs::write(
        &cfg,
        r#"{"train":{"epochs":2,"batch_size":8},
            "paths":{"train_manifest":"../det_data/train.json","test_manifest":"../det_data/test.json",
                     "outlier_dir":"../det_data/outliers"}}"#,
    )
    .unwrap();
    let mut hashes = Vec::new();
    for _ in 0..2 {
        for cmd in ["build-banks", "train", "eval"] {
            let status = Command::new(env!("CARGO_BIN_EXE_dmad"))
                .args([cmd, "--config", cfg.to_str().unwrap(), "--deterministic"])
                .output()
                .unwrap();
            if !status.status.success() {
                return Outcome {
                    pass: false,
                    detail: format!("{cmd} failed: {}", String::from_utf8_lossy(&status.stderr)),
                };
            }
        }
        hashes.push(hash_tree(&run));
        for e in std::fs::read_dir(&run).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                std::fs::remove_dir_all(&p).unwrap();
            } else if p != cfg {
                std::fs::remove_file(&p).unwrap();
            }
        }
    }
    let differing = hashes[0]
        .iter()
        .zip(&hashes[1])
        .filter(|(a, b)| a != b)
        .count()
        + hashes[0].len().abs_diff(hashes[1].len());
    Outcome {
        pass: differing == 0 && hashes[0].len() >= 6,
        detail: format!(
            "build-banks + train + eval twice with --deterministic: {} files, {differing} differ",
            hashes[0].len()
        ),
    }
}

fn format_robustness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = FeatureGrid::new(
        "object",
        "image",
        (2, 3, 4),
        (16, 24),
        (0..24).map(|v| v as f32 * 0.1).collect(),
    )
    .unwrap();
    let feature = encode_feature_grid(&grid).unwrap();
    let bank = MemoryBank::new(
        BankKind::PseudoOutlier,
        Array2::from_shape_fn((6, 4), |(i, j)| (i + j) as f32),
    )
    .unwrap()
    .encode();
    let mode = KnowledgeMode {
        use_attention: true,
        use_distance: true,
    };
    let mut params = ModelParams::init(4, mode, 2, false, 5);
    let optimizer = OptimizerState::new(OptimizerConfig::default(), &mut params);
    let ckpt = Checkpoint { params, optimizer }.encode().unwrap();

    type Decode = fn(&[u8]) -> Result<Vec<u8>, Error>;
    let cases: [(&str, &[u8], usize, Decode); 3] = [
        ("dmft", &feature, 42, |b| {
            decode_feature_grid(b).and_then(|g| encode_feature_grid(&g))
        }),
        ("dmbk", &bank, 59, |b| {
            MemoryBank::decode(b).map(|m| m.encode())
        }),
        ("dmckpt", &ckpt, 40, |b| {
            Checkpoint::decode(b).and_then(|c| c.encode())
        }),
    ];
    let mut summary = Vec::new();
    let mut pass = true;
    for (name, bytes, header, decode) in cases {
        let (mut rejected, mut faithful, mut bad) = (0, 0, 0);
        for _ in 0..1000 {
            let mut b = bytes.to_vec();
            match rng.random_range(0..3) {
                0 => {
                    for _ in 0..rng.random_range(1..4) {
                        let i = rng.random_range(0..header);
                        b[i] ^= rng.random_range(1..=255u8);
                    }
                }
                1 => b.truncate(rng.random_range(0..b.len())),
                _ => {
                    let i = rng.random_range(0..header);
                    b[i..i + 4.min(header - i)].fill(0xff);
                }
            }
            match std::panic::catch_unwind(|| decode(&b)) {
                Ok(Err(Error::Format(_))) => rejected += 1,
                // a corruption that still parses must round-trip to the same bytes
                Ok(Ok(re)) if re == b => faithful += 1,
                _ => bad += 1,
            }
        }
        pass &= bad == 0;
        summary.push(format!(
            "{name} {rejected} rejected/{faithful} still-valid/{bad} bad"
        ));
    }
    Outcome {
        pass,
        detail: format!("1000 header corruptions each: {}", summary.join(", ")),
    }
}

fn main() {
    // criteria report failures themselves; keep panic noise off the report
    std::panic::set_hook(Box::new(|_| {}));
    let work = tempfile::tempdir().unwrap();
    let results = [
        check("gradient fidelity", gradient_fidelity),
        check("coreset quality", coreset_quality),
        check("metric oracles", metric_oracles),
        check("nearest-neighbour exactness", nearest_exactness),
        check("end-to-end unsupervised", || {
            end_to_end_unsupervised(work.path())
        }),
        check("semi-supervised benefit", || {
            semi_supervised_benefit(work.path())
        }),
        check("determinism", || determinism(work.path())),
        check("format robustness", format_robustness),
    ];
    let failed = results.iter().filter(|&&ok| !ok).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
