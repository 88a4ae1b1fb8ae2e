//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each, and fails if any criterion fails.
//!
//! Run with `cargo test -p windex-cli --test acceptance -- --nocapture` to see
//! the report.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use windex_core::config::parse_config;
use windex_core::env::ServiceClass;
use windex_core::net::{action_prob, score_coefficient, InputNorm, WhittleNetwork, NUM_PARAMS};
use windex_core::oracle::sweep::{sweep, uniform_grid, InstanceSampler};
use windex_core::oracle::{index_table, solve, TabularMdp};
use windex_core::scheduler::{bench_inference, run_scenario, run_scenario_traced};
use windex_core::scheduler::{ModelSet, Policy, SchedulerKind, Slice, SliceConfig};
use windex_core::trainer::{train, TabularEnv};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn configs() -> PathBuf {
    root().join("configs")
}

const SWEEP_SEED: u64 = 2024;

fn sweep_instances() -> Vec<TabularMdp> {
    InstanceSampler::default().instances(50, SWEEP_SEED)
}

fn indexability_suite() -> Verdict {
    let t = Instant::now();
    let report = sweep(&sweep_instances(), &uniform_grid(0.0, 3.0, 20)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let failed = report.failed().count();
    verdict(
        failed == 0 && report.instances.len() >= 50 && secs <= 120.0,
        format!(
            "{} instances, 20-point grid, {failed} failed, {secs:.1} s",
            report.instances.len()
        ),
    )
}

fn policy_value(mdp: &TabularMdp, policy: &[u8], lambda: f64) -> DVector<f64> {
    let n = mdp.num_states();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        let act = policy[s] as usize;
        r[s] = mdp.reward(s, act, lambda);
        for (next, p) in mdp.transitions(s, act) {
            a[(s, next)] -= mdp.gamma * p;
        }
    }
    a.lu().solve(&r).unwrap()
}

fn oracle_equivalence() -> Verdict {
    let instances = InstanceSampler {
        max_queue: (2, 8),
        ..InstanceSampler::default()
    }
    .instances(10, 77);
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let mut matched = 0;
    for mdp in &instances {
        let lambda = rng.random_range(0.05..2.5);
        let n = mdp.num_states();
        let mut best: Option<(Vec<u8>, f64)> = None;
        for mask in 0u32..(1 << n) {
            let p: Vec<u8> = (0..n).map(|s| ((mask >> s) & 1) as u8).collect();
            let total = policy_value(mdp, &p, lambda).sum();
            if best.as_ref().is_none_or(|(_, b)| total > *b) {
                best = Some((p, total));
            }
        }
        if solve(mdp, lambda).unwrap().policy == best.unwrap().0 {
            matched += 1;
        }
    }
    verdict(matched == 10, format!("{matched}/10 instances match exhaustive enumeration"))
}

fn dv_bound() -> Verdict {
    let grid = uniform_grid(0.0, 3.0, 31);
    let delta = grid[1] - grid[0];
    let report = sweep(&sweep_instances(), &grid).unwrap();
    let excess = report.max_dv_excess();
    verdict(
        delta <= 0.1 + 1e-12 && excess <= 1e-8,
        format!("δ = {delta:.3}, max DV excess over δ/γ = {excess:.3e}"),
    )
}

fn gradient_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut net = WhittleNetwork::new(InputNorm::new(40.0, 8.0), &mut rng);
        for p in net.params_mut().iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let x = [
            rng.random_range(0.0..40.0),
            rng.random_range(1.0..=15.0),
            rng.random_range(0.0..10.0),
            rng.random(),
            rng.random(),
        ];
        let (_, grad) = net.forward_grad(&x).unwrap();
        let h = 1e-6;
        for i in 0..NUM_PARAMS {
            let mut a = net.clone();
            a.params_mut()[i] += h;
            let mut b = net.clone();
            b.params_mut()[i] -= h;
            let fd = (a.forward(&x).unwrap() - b.forward(&x).unwrap()) / (2.0 * h);
            let scale = 1.0f64.max(grad[i].abs()).max(fd.abs());
            worst = worst.max((grad[i] - fd).abs() / scale);
        }
    }
    let mut worst_mean: f64 = 0.0;
    for _ in 0..1000 {
        let p = action_prob(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 5.0);
        let m = 5.0;
        let mean = p * score_coefficient(p, m, 1) + (1.0 - p) * score_coefficient(p, m, 0);
        worst_mean = worst_mean.max(mean.abs());
    }
    verdict(
        worst < 1e-4 && worst_mean <= 1e-10,
        format!("max relative error {worst:.2e} over 100 cases, score mean {worst_mean:.1e}"),
    )
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |x: &[f64]| {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn learning_sanity() -> Verdict {
    let cfg = parse_config(&configs().join("train_tiny.toml")).unwrap();
    let base = cfg.train.unwrap();
    let mdp = base.tabular.unwrap();
    let oracle = index_table(&mdp, (-1.0, 50.0), 1e-9).unwrap();
    let mut rhos = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in 0..3 {
        let mut tc = base.clone();
        tc.seed = seed;
        let t = Instant::now();
        let out = train(&tc, &TabularEnv::new(mdp), |_| {}).unwrap();
        slowest = slowest.max(t.elapsed().as_secs_f64());
        let learned: Vec<f64> = (0..=mdp.max_queue)
            .map(|s| out.net.forward(&[s as f64, 15.0, 0.0, 0.0, 0.0]).unwrap())
            .collect();
        rhos.push(spearman(&learned, &oracle.index));
    }
    let mut sorted = rhos.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[1];
    verdict(
        median >= 0.9 && slowest <= 600.0,
        format!(
            "Spearman per seed {rhos:.3?}, median {median:.3}; {} episodes, T={}, slowest seed {slowest:.1} s",
            base.episodes_total, base.episode_len
        ),
    )
}

fn scheduling_dominance() -> Verdict {
    let cfg = parse_config(&configs().join("scenario4.toml")).unwrap();
    let spec = cfg.scenario.unwrap();
    let none = ModelSet::default();
    let mut wins = [0usize; 4];
    for seed in 0..10 {
        let run = |k| {
            run_scenario(&spec, &Policy::Unsliced(k), &none, seed, &cfg.base_dir)
                .unwrap()
                .summed_violation_frac()
        };
        let oracle = run(SchedulerKind::Oracle);
        for (w, k) in wins.iter_mut().zip(SchedulerKind::BASELINES) {
            if oracle < run(k) {
                *w += 1;
            }
        }
    }
    let detail: Vec<String> = SchedulerKind::BASELINES
        .iter()
        .zip(&wins)
        .map(|(k, w)| format!("{k} {w}/10"))
        .collect();
    verdict(
        wins.iter().all(|&w| w >= 8),
        format!("oracle lower than {}", detail.join(", ")),
    )
}

fn slicing_equivalence() -> Verdict {
    let cfg = parse_config(&configs().join("scenario4.toml")).unwrap();
    let mut spec = cfg.scenario.unwrap();
    spec.horizon = 2000;
    let none = ModelSet::default();
    let mut identical = 0;
    let kinds = [
        SchedulerKind::Oracle,
        SchedulerKind::MaxWeight,
        SchedulerKind::MaxCqi,
        SchedulerKind::PropFair,
        SchedulerKind::RoundRobin,
    ];
    for kind in kinds {
        let trace = |policy: &Policy| {
            let mut t = Vec::new();
            let r = run_scenario_traced(&spec, policy, &none, 11, &cfg.base_dir, 1, |x| {
                t.push(x.clone())
            })
            .unwrap();
            (t, r.to_json())
        };
        let one = Policy::Sliced(SliceConfig {
            slices: vec![Slice {
                name: "all".into(),
                classes: ServiceClass::ALL.to_vec(),
                rbgs: spec.total_rbgs,
                scheduler: kind,
                top_r: None,
            }],
        });
        let (ta, ra) = trace(&Policy::Unsliced(kind));
        let (tb, rb) = trace(&one);
        let same_report = ra.replace(kind.as_str(), "") == rb.replace(&one.label(), "");
        if ta == tb && same_report {
            identical += 1;
        }
    }
    verdict(
        identical == kinds.len(),
        format!("{identical}/{} schedulers trajectory-identical", kinds.len()),
    )
}

fn inference_latency() -> Verdict {
    let r = bench_inference(20, 2, 20_000, 1).unwrap();
    verdict(
        r.single.p99_us < 50.0 && r.batch.p99_us < 500.0,
        format!(
            "single forward p99 {:.2} us, 20 UEs on 2 workers p99 {:.2} us",
            r.single.p99_us, r.batch.p99_us
        ),
    )
}

fn windex(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_windex"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn digest(paths: &[PathBuf]) -> String {
    let mut h = Sha256::new();
    for p in paths {
        h.update(std::fs::read(p).unwrap());
    }
    hex::encode(h.finalize())
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let c = |name: &str| configs().join(name).display().to_string();
    let mut notes = Vec::new();
    let mut all = true;
    let cases: Vec<(&str, Vec<String>, Vec<&str>)> = vec![
        (
            "train",
            vec!["train".into(), "--config".into(), c("train_tiny.toml"), "--seed".into(), "5".into(), "--episodes".into(), "400".into()],
            vec!["model", "log.csv"],
        ),
        (
            "run",
            vec!["run".into(), "--scenario".into(), c("scenario4.toml"), "--policy".into(), "oracle".into(), "--seed".into(), "3".into(), "--horizon".into(), "3000".into()],
            vec!["report.json"],
        ),
        (
            "run --slices",
            vec!["run".into(), "--scenario".into(), c("slicing_scenario.toml"), "--slices".into(), c("slicing2.toml"), "--policy".into(), "pf".into(), "--seed".into(), "3".into(), "--horizon".into(), "1000".into()],
            vec!["report.csv"],
        ),
        (
            "verify-oracle",
            vec!["verify-oracle".into(), "--config".into(), c("verify.toml"), "--seed".into(), "8".into(), "--jobs".into(), "2".into()],
            vec!["verify.json"],
        ),
        (
            "index-table",
            vec!["index-table".into(), "--config".into(), c("train_tiny.toml"), "--seed".into(), "1".into()],
            vec!["table.csv"],
        ),
    ];
    for (name, args, outputs) in cases {
        let mut hashes = Vec::new();
        for rep in 0..2 {
            let sub = dir.path().join(format!("{}-{rep}", name.replace(' ', "_")));
            std::fs::create_dir_all(&sub).unwrap();
            let files: Vec<PathBuf> = outputs.iter().map(|o| sub.join(o)).collect();
            let mut full = args.clone();
            match name {
                "train" => {
                    full.extend(["--out".into(), files[0].display().to_string()]);
                    full.extend(["--log".into(), files[1].display().to_string()]);
                }
                _ => full.extend(["--out".into(), files[0].display().to_string()]),
            }
            let refs: Vec<&str> = full.iter().map(String::as_str).collect();
            let out = windex(&refs);
            if !out.status.success() {
                all = false;
                notes.push(format!("{name}: exit {:?}", out.status.code()));
                break;
            }
            hashes.push(digest(&files));
        }
        if hashes.len() == 2 {
            let same = hashes[0] == hashes[1];
            all &= same;
            notes.push(format!("{name} {}", if same { "identical" } else { "DIFFERS" }));
        }
    }
    verdict(all, notes.join(", "))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("1 indexability suite", indexability_suite),
        ("2 oracle equivalence", oracle_equivalence),
        ("3 DV bound", dv_bound),
        ("4 gradient correctness", gradient_correctness),
        ("5 learning sanity", learning_sanity),
        ("6 scheduling dominance", scheduling_dominance),
        ("7 slicing equivalence", slicing_equivalence),
        ("8 inference latency", inference_latency),
        ("9 determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let v = check();
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
