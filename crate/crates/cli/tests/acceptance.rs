//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test --release -p truthlab-cli --test acceptance`.
//!
//! Environment switches:
//! - `TRUTHLAB_FULL_SCALE=1` runs the multi-hour full-scale emergence run.
//! - `TRUTHLAB_MAVEN=<path>` adds the MAVEN-FACT corpus check (JSON lines).
//! - `TRUTHLAB_ONLY=1,7,9` restricts the run to the listed criteria.
//! - `TRUTHLAB_ACCEPTANCE_STRICT=1` exits nonzero when any criterion fails;
//!   by default failures are reported in the tally but the run exits 0 so the
//!   workspace test run stays usable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::time::Instant;

use rand::Rng as _;
use truthlab::cooccur::{chi2_independence, corpus_stats, Corpus};
use truthlab::datagen::{sample_with_truth, WorldSpec};
use truthlab::dense::{dense_loss_and_grads, dense_train, DenseConfig, DenseParams, OnsetCriteria, TrainTrace};
use truthlab::rng::{self, Stream};
use truthlab::theory::{entropy_gap, run_suite, SuiteParams, TheoremReport};
use truthlab::toy::{
    fit_structured, minibatch_sgd_train, population_loss_and_grad, sequential_training, OneHotConfig, SgdConfig,
    ValueMatrix,
};

type Criterion = (u32, &'static str, fn() -> Verdict);

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(pass: bool, detail: String) -> Verdict {
    if pass {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn report<'a>(reports: &'a [TheoremReport], claim: &str) -> &'a TheoremReport {
    reports
        .iter()
        .find(|r| r.claim == claim)
        .unwrap_or_else(|| panic!("suite has no `{claim}` report"))
}

/// Monte-Carlo estimate of the entropy gap for predicting `y'`, with its
/// standard error: −ln q(y') under the truth-marginalized conditional minus
/// −ln p(y' | T).
fn entropy_gap_mc(rho: f64, n_attributes: usize, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng::stream(seed, Stream::Custom(40));
    let a = n_attributes as f64;
    let q_true = rho + (1.0 - rho) / a;
    let q_other = (1.0 - rho) / a;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let truth = rng.random_bool(rho);
        // attribute 0 plays g(x')
        let y = if truth { 0 } else { rng.random_range(0..n_attributes) };
        let without = -(if y == 0 { q_true } else { q_other }).ln();
        let with = if truth { 0.0 } else { a.ln() };
        let d = without - with;
        sum += d;
        sum_sq += d * d;
    }
    let k = samples as f64;
    let mean = sum / k;
    (mean, ((sum_sq / k - mean * mean) / k).sqrt())
}

fn criterion_1() -> Verdict {
    let reports = run_suite(&SuiteParams::default()).expect("suite runs");
    let zeta = report(&reports, "zeta_identity");
    let sharp = report(&reports, "sharpening");
    let sep = report(&reports, "linear_separation");
    let mid = report(&reports, "midpoint_witness");

    let zeta_ok = zeta.empirical <= 1e-12 && zeta.parameters["draws"] >= 100.0;
    let sharp_ok = sharp.pass && sharp.empirical >= 0.182_57;
    let margin_ok = (sep.empirical - 0.149_429).abs() <= 1e-6
        && (sep.empirical - sep.bound).abs() <= 1e-9
        && sep.parameters["misclassified_y"] == 0.0;
    let mid_ok = mid.empirical <= 1e-12;

    let small = entropy_gap(0.5, 2.0).expect("valid");
    let large = entropy_gap(0.5, 1e6).expect("valid");
    let (mc, se) = entropy_gap_mc(0.5, 2, 1_000_000, 0);
    let entropy_ok = (small.delta - 0.215_762).abs() <= 1e-6
        && (small.delta - mc).abs() <= 3.0 * se
        && (large.delta - std::f64::consts::LN_2).abs() <= 1e-3;

    let all_reports = reports.iter().all(|r| r.pass);
    verdict(
        zeta_ok && sharp_ok && margin_ok && mid_ok && entropy_ok && all_reports,
        format!(
            "zeta gap err {:.1e}; sharpening {:.5} ≥ 0.18257 (report pass: {}); margin {:.9} vs 0.149429, 0 misclassified: {}; \
             midpoint {:.1e}; Δ(0.5,2) {:.6} (MC {:.6} ± {:.1e}), Δ(0.5,1e6) {:.6}; suite {}/{} pass",
            zeta.empirical,
            sharp.empirical,
            sharp.pass,
            sep.empirical,
            sep.parameters["misclassified_y"] == 0.0,
            mid.empirical,
            small.delta,
            mc,
            se,
            large.delta,
            reports.iter().filter(|r| r.pass).count(),
            reports.len()
        ),
    )
}

fn criterion_2() -> Verdict {
    let run = |n: usize| {
        let config = OneHotConfig::euclidean_without_positions(n)
            .expect("valid n")
            .with_max_enumeration_n(128);
        let world = WorldSpec::toy(n, 0).expect("valid n");
        let it = sequential_training(&config, &world, 1.0, Some(n as f64)).expect("runs");
        let w2 = fit_structured(&config, &it.w2, &world).expect("fits");
        let w3 = fit_structured(&config, &it.w3, &world).expect("fits");
        (w2.blocks.ex_to_ugx, w3.residual_max)
    };
    let expected = 1.0 + 1.0 / (2.0 * 2f64.sqrt());
    let (mean20, off20) = run(20);
    let (_, off40) = run(40);
    let (_, off80) = run(80);
    let ratios = [off20 / off40, off40 / off80];
    let pass = (mean20 - expected).abs() <= 10.0 / 20.0 && ratios.iter().all(|r| (1.0..=4.0).contains(r));
    verdict(
        pass,
        format!(
            "W2 block mean {mean20:.4} vs {expected:.4} ± 0.5; off-structure max {off20:.4e}/{off40:.4e}/{off80:.4e}, \
             halving ratios {:.3}, {:.3}",
            ratios[0], ratios[1]
        ),
    )
}

fn criterion_3() -> Verdict {
    // toy population gradient
    let n = 6;
    let config = OneHotConfig::new(n).expect("valid");
    let world = WorldSpec::toy(n, 5).expect("valid");
    let d = config.d();
    let mut rng = rng::stream(3, Stream::Custom(41));
    let mut w = ValueMatrix::zeros(d);
    w.0.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    let mut toy_worst = 0.0f64;
    for t in 1..=3 {
        let est = population_loss_and_grad(&config, &w, &world, 0.6, t).expect("exact");
        for _ in 0..40 {
            let (i, j) = (rng.random_range(0..d), rng.random_range(0..d));
            let h = 1e-5;
            let loss_at = |delta: f64| {
                let mut p = w.clone();
                p.0[[i, j]] += delta;
                population_loss_and_grad(&config, &p, &world, 0.6, t).expect("exact").loss
            };
            let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let analytic = est.grad[[i, j]];
            toy_worst = toy_worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3));
        }
    }

    // dense reverse-mode gradient
    let mut dense_worst = 0.0f64;
    for layers in [1, 2] {
        let dc = DenseConfig {
            layers,
            d_model: 8,
            n_subjects: 6,
            n_attributes: 6,
            init_std: 0.3,
            ..DenseConfig::ci()
        };
        let params = DenseParams::init(&dc).expect("valid");
        let dworld = dc.world().expect("valid");
        let mut srng = rng::stream(4, Stream::Custom(42));
        let batch: Vec<[usize; 4]> = (0..3)
            .map(|_| {
                let truth = srng.random_bool(0.5);
                sample_with_truth(&dworld, truth, &mut srng).tokens()
            })
            .collect();
        let (_, grads) = dense_loss_and_grads(&params, &batch, dc.norm_epsilon).expect("finite");
        for (idx, (_, g)) in grads.tensors().into_iter().enumerate() {
            for _ in 0..12 {
                let flat = srng.random_range(0..g.len());
                let analytic = *g.iter().nth(flat).expect("in range");
                let loss_at = |delta: f64| {
                    let mut p = params.clone();
                    let mut tensors = p.tensors_mut();
                    *tensors[idx].1.iter_mut().nth(flat).expect("in range") += delta;
                    drop(tensors);
                    dense_loss_and_grads(&p, &batch, dc.norm_epsilon).expect("finite").0
                };
                let h = 1e-4;
                let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                dense_worst =
                    dense_worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
            }
        }
    }
    verdict(
        toy_worst <= 1e-5 && dense_worst <= 1e-4,
        format!("toy worst relative error {toy_worst:.2e} (≤ 1e-5); dense worst {dense_worst:.2e} (≤ 1e-4)"),
    )
}

fn describe_phases(trace: &TrainTrace) -> (truthlab::dense::PhaseSummary, String) {
    let s = trace.phase_summary(&OnsetCriteria::default()).expect("trace has sites");
    let main = trace.auc_series(trace.main_site().expect("site")).expect("site");
    let max_auc = main.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let last = trace.rows.last().expect("rows");
    let detail = format!(
        "memorization onset {:?}, AUC({}) onset {:?}, p_true_on_false {:?} → {:?} (drop {:?}); max AUC {:.3}, final mem {:.3} ptf {:.3}",
        s.memorization_onset,
        s.site,
        s.auc_onset,
        s.p_true_on_false_at_memorization.map(|v| (v * 1000.0).round() / 1000.0),
        s.p_true_on_false_at_auc.map(|v| (v * 1000.0).round() / 1000.0),
        s.p_true_on_false_drop.map(|v| (v * 1000.0).round() / 1000.0),
        max_auc,
        last.memorization,
        last.p_true_on_false,
    );
    (s, detail)
}

fn criterion_4() -> Verdict {
    let run = dense_train(&DenseConfig::ci()).expect("training runs");
    let (s, detail) = describe_phases(&run.trace);
    let pass = s.ordered() && s.p_true_on_false_drop.is_some_and(|d| d >= 0.5);
    verdict(pass, detail)
}

fn criterion_5() -> Verdict {
    if std::env::var("TRUTHLAB_FULL_SCALE").ok().as_deref() != Some("1") {
        return Verdict::Skip("set TRUTHLAB_FULL_SCALE=1 to run (hours of CPU)".into());
    }
    let run = dense_train(&DenseConfig::full()).expect("training runs");
    let (s, detail) = describe_phases(&run.trace);
    let pass = s.memorization_onset.is_some_and(|m| m <= 2_000)
        && s.auc_onset.is_some_and(|a| (3_000..=30_000).contains(&a));
    verdict(pass, detail)
}

fn criterion_6() -> Verdict {
    let config = DenseConfig {
        rho: 1.0,
        ..DenseConfig::ci()
    };
    let run = dense_train(&config).expect("training runs");
    let site = run.trace.main_site().expect("site");
    let main = run.trace.auc_series(site).expect("site");
    let max_main = main.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_any = run
        .trace
        .rows
        .iter()
        .flat_map(|r| r.auc.iter().cloned())
        .fold(f64::NEG_INFINITY, f64::max);
    verdict(
        max_any <= 0.6,
        format!(
            "max AUC over all sites and {1} checkpoints {max_any:.3} (≤ 0.6); max AUC({0}) {max_main:.3}",
            site.label(),
            main.len()
        ),
    )
}

fn criterion_7() -> Verdict {
    let n = 20;
    let config = OneHotConfig::new(n).expect("valid");
    let world = WorldSpec::toy(n, 0).expect("valid");
    let sgd = SgdConfig {
        rho: 0.8,
        lr: 1.0,
        batch_size: 16,
        steps: 3000,
        snapshot_every: 10,
        seed: 0,
    };
    let snaps = minibatch_sgd_train(&config, &world, &sgd).expect("trains");
    let steps: Vec<usize> = snaps.iter().map(|s| s.step).collect();
    let fits: Vec<_> = snaps
        .iter()
        .map(|s| fit_structured(&config, &s.w, &world).expect("fits"))
        .collect();
    let half = |values: Vec<f64>| {
        let target = 0.5 * values[values.len() - 1];
        (target > 0.0)
            .then(|| values.iter().position(|&v| v >= target).map(|i| steps[i]))
            .flatten()
    };
    let subject = half(fits.iter().map(|f| f.blocks.ex_to_ugx).collect());
    let attribute = half(fits.iter().map(|f| f.blocks.ey_to_eginv).collect());
    let pass = matches!((subject, attribute), (Some(s), Some(a)) if s < a);
    verdict(
        pass,
        format!("e_x→u_g(x) reaches half its final mean at step {subject:?}, e_y→e_g⁻¹(y) at {attribute:?}"),
    )
}

fn ks_uniform(mut pvals: Vec<f64>) -> f64 {
    pvals.sort_by(f64::total_cmp);
    let m = pvals.len() as f64;
    pvals
        .iter()
        .enumerate()
        .map(|(i, &p)| ((i + 1) as f64 / m - p).max(p - i as f64 / m))
        .fold(0.0, f64::max)
}

fn criterion_8() -> Verdict {
    let planted = Corpus::from_labels([
        ("a", vec![true, true]),
        ("b", vec![true, true]),
        ("c", vec![false, false]),
        ("d", vec![false, false]),
    ])
    .expect("valid");
    let stats = corpus_stats(&planted).expect("defined");
    let pair = Corpus::from_labels([("a", vec![true, true]), ("b", vec![false, false])]).expect("valid");
    let chi = chi2_independence(&pair).expect("defined");
    let planted_ok = stats.p == 0.5
        && stats.pairwise_false == 0.5
        && (stats.clustering_ratio - 2.0).abs() < 1e-12
        && (chi.chi2 - 4.0).abs() < 1e-12
        && (chi.p_value - 0.0455).abs() < 5e-5;

    let mut rng = rng::stream(0, Stream::Custom(43));
    let pvals: Vec<f64> = (0..1000)
        .map(|_| {
            let docs = (0..50).map(|i| (i.to_string(), (0..40).map(|_| rng.random_bool(0.3)).collect::<Vec<_>>()));
            chi2_independence(&Corpus::from_labels(docs).expect("valid"))
                .expect("defined")
                .p_value
        })
        .collect();
    let ks = ks_uniform(pvals);
    let mut detail = format!(
        "planted p {} pairwise {} ratio {} χ² {} p-value {:.4}; null KS {ks:.4} (≤ 0.05)",
        stats.p, stats.pairwise_false, stats.clustering_ratio, chi.chi2, chi.p_value
    );
    let mut pass = planted_ok && ks <= 0.05;
    match std::env::var("TRUTHLAB_MAVEN") {
        Ok(path) => {
            let file = std::fs::File::open(&path).expect("MAVEN corpus readable");
            let corpus = Corpus::from_jsonl(std::io::BufReader::new(file)).expect("valid corpus");
            let s = corpus_stats(&corpus).expect("defined");
            let c = chi2_independence(&corpus).expect("defined");
            let maven_ok = (c.chi2 / 4174.0 - 1.0).abs() <= 0.02
                && (s.p - 0.0209).abs() <= 5e-4
                && (s.clustering_ratio - 1.23).abs() <= 5e-3;
            detail.push_str(&format!(
                "; MAVEN χ² {:.1} (dof {}, p-value {:.2e}) p {:.4} ratio {:.3}",
                c.chi2, c.dof, c.p_value, s.p, s.clustering_ratio
            ));
            pass &= maven_ok;
        }
        Err(_) => detail.push_str("; MAVEN skipped (set TRUTHLAB_MAVEN)"),
    }
    verdict(pass, detail)
}

const DETERMINISM_CONFIG: &str = r#"
seed = 5

[generate]
n_subjects = 12
n_attributes = 12
size = 200

[toy]
n = 8
steps = 60
snapshot_every = 20

[dense]
n_subjects = 16
n_attributes = 16
d_model = 16
total_batches = 60
metric_every = 30
eval_size = 128
checkpoint_every = 30

[probe]
checkpoint = "OUT/checkpoints/dense_step000060.ckpt"
size = 128

[export]
toy_checkpoint = "OUT/checkpoints/toy_step000060.ckpt"
dense_checkpoint = "OUT/checkpoints/dense_step000060.ckpt"
kernel_k = 6
attention_samples = 32

[cooccur]
corpus = "corpus.jsonl"
"#;

fn run_all_commands(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let out = root.join("out");
    std::fs::write(
        root.join("exp.toml"),
        DETERMINISM_CONFIG.replace("OUT", out.to_str().ok_or("non-UTF-8 temp path")?),
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(
        root.join("corpus.jsonl"),
        "{\"doc_id\": \"a\", \"labels\": [1, 1, 0]}\n{\"doc_id\": \"b\", \"n\": 5, \"f\": 1}\n",
    )
    .map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_truthlab");
    for cmd in ["generate", "train-toy", "train-dense", "probe", "verify", "export", "cooccur"] {
        let status = Process::new(bin)
            .args([cmd, "--config"])
            .arg(root.join("exp.toml"))
            .args(["--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
    }
    let mut files = BTreeMap::new();
    let mut stack = vec![out.clone()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(&out).expect("under out").to_path_buf();
                files.insert(rel, std::fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

fn criterion_9() -> Verdict {
    let (a, b) = (tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir"));
    let (first, second) = match (run_all_commands(a.path()), run_all_commands(b.path())) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return Verdict::Fail(e),
    };
    let differing: Vec<String> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_names = first.keys().eq(second.keys());
    verdict(
        same_names && differing.is_empty() && !first.is_empty(),
        format!(
            "{} files from 7 subcommands across two runs; differing: {:?}",
            first.len(),
            differing
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a bare filter
    // argument is treated as a criterion list like TRUTHLAB_ONLY.
    let filter: Option<Vec<u32>> = std::env::var("TRUTHLAB_ONLY")
        .ok()
        .or_else(|| std::env::args().skip(1).find(|a| !a.starts_with('-')))
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [Criterion; 9] = [
        (1, "theorem suite", criterion_1),
        (2, "sequential dynamics", criterion_2),
        (3, "gradient correctness", criterion_3),
        (4, "two-phase emergence, CI scale", criterion_4),
        (5, "two-phase emergence, full scale", criterion_5),
        (6, "rho = 1 negative control", criterion_6),
        (7, "block emergence ordering", criterion_7),
        (8, "co-occurrence statistics", criterion_8),
        (9, "determinism", criterion_9),
    ];
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if filter.as_ref().is_some_and(|f| !f.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => ("FAIL", d),
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("{tag} [{id}] {name} ({secs:.1} s): {detail}");
        if matches!(v, Verdict::Fail(_)) {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all run criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        if std::env::var("TRUTHLAB_ACCEPTANCE_STRICT").ok().as_deref() == Some("1") {
            std::process::exit(1);
        }
    }
}
