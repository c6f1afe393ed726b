use std::path::{Path, PathBuf};

use ndarray::{Array2, Ix2};
use serde_json::{json, Value};
use truthlab::cooccur::{chi2_independence, corpus_stats, Corpus};
use truthlab::datagen::{make_balanced_probe_set, sample_batch, Batch, WorldSpec};
use truthlab::dense::{
    dense_train_with, diagonal_contrast, mean_attention, sorted_kernel_view, vo_kernel, DenseConfig, DenseModel,
    DenseParams,
};
use truthlab::io::{self as tio, IndexRange, Provenance};
use truthlab::probes::{collect_activations, fit_logistic_probe, pca_topk, ProbeSite};
use truthlab::rng::{self, Stream};
use truthlab::theory::run_suite;
use truthlab::toy::{
    fit_structured, minibatch_sgd_train, sequential_training, OneHotConfig, SgdConfig, StructuredFit, ValueMatrix,
};

use crate::config::{ExperimentConfig, ToyAlgorithm};
use crate::error::CliError;

const PCA_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    TrainToy,
    TrainDense,
    Probe,
    Verify,
    Cooccur,
    Export,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::TrainToy => "train-toy",
            Command::TrainDense => "train-dense",
            Command::Probe => "probe",
            Command::Verify => "verify",
            Command::Cooccur => "cooccur",
            Command::Export => "export",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    /// Files written, in creation order.
    pub files: Vec<PathBuf>,
    /// False only when `verify` found a failing claim.
    pub passed: bool,
    pub summary: Value,
}

fn core(section: &'static str) -> impl Fn(truthlab::Error) -> CliError {
    move |e| CliError::core(section, e)
}

/// Writes output files, attaching provenance to each.
struct Writer {
    dir: PathBuf,
    provenance: Provenance,
    command: &'static str,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(config: &ExperimentConfig, command: Command) -> Result<Self, CliError> {
        std::fs::create_dir_all(&config.output_dir).map_err(CliError::io(&config.output_dir))?;
        Ok(Writer {
            dir: config.output_dir.clone(),
            provenance: Provenance::new(config.hash()?, config.seed),
            command: command.name(),
            files: Vec::new(),
        })
    }

    fn extra(&self, extra: Value) -> Value {
        let mut out = json!({ "command": self.command });
        if let Value::Object(map) = extra {
            out.as_object_mut().expect("object").extend(map);
        }
        out
    }

    /// Data file plus `<name>.json` sidecar.
    fn file(&mut self, name: &str, contents: &str, extra: Value) -> Result<(), CliError> {
        let path = self.dir.join(name);
        tio::write_with_sidecar(&path, contents, &self.provenance, self.extra(extra))
            .map_err(|e| CliError::core("output", e))?;
        self.files.push(tio::sidecar_path(&path));
        self.files.push(path);
        Ok(())
    }

    /// JSON report with provenance embedded at the top level.
    fn report(&mut self, name: &str, body: Value) -> Result<(), CliError> {
        let mut doc = serde_json::to_value(&self.provenance)?;
        doc.as_object_mut().expect("object").extend(
            self.extra(body)
                .as_object()
                .expect("object")
                .iter()
                .map(|(k, v)| (k.clone(), v.clone())),
        );
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(CliError::io(&path))?;
        self.files.push(path);
        Ok(())
    }

    fn matrix(
        &mut self,
        name: &str,
        matrix: &Array2<f64>,
        n: usize,
        rows: &[IndexRange],
        cols: &[IndexRange],
    ) -> Result<(), CliError> {
        let layout = json!({
            "N": n,
            "rows": matrix.nrows(),
            "cols": matrix.ncols(),
            "layout": { "rows": rows, "cols": cols },
        });
        self.file(name, &tio::matrix_to_csv(matrix), layout)
    }

    fn checkpoint_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.dir.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        Ok(dir)
    }

    fn finish(self, passed: bool, summary: Value) -> Outcome {
        Outcome {
            files: self.files,
            passed,
            summary,
        }
    }
}

pub fn run(command: Command, config: &ExperimentConfig) -> Result<Outcome, CliError> {
    match command {
        Command::Generate => generate(config),
        Command::TrainToy => train_toy(config),
        Command::TrainDense => train_dense(config),
        Command::Probe => probe(config),
        Command::Verify => verify(config),
        Command::Cooccur => cooccur(config),
        Command::Export => export(config),
    }
}

fn generate(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let g = &config.generate;
    let world = WorldSpec::random(g.n_subjects, g.n_attributes, config.seed).map_err(core("generate"))?;
    let mut rng = rng::stream(config.seed, Stream::Train);
    let examples = sample_batch(&world, g.rho, g.size, &mut rng).map_err(core("generate"))?;
    let batch = Batch {
        examples,
        rho: g.rho,
        seed: config.seed,
    };
    let mut w = Writer::new(config, Command::Generate)?;
    w.file("world.json", &(world.to_json().map_err(core("generate"))? + "\n"), json!({}))?;
    let mut csv = Vec::new();
    batch.write_csv(&mut csv).map_err(core("generate"))?;
    w.file(
        "batch.csv",
        &String::from_utf8(csv).expect("ascii CSV"),
        json!({ "rho": g.rho, "size": g.size }),
    )?;
    let summary = json!({ "examples": batch.len(), "truth_rate": batch.truth_rate() });
    Ok(w.finish(true, summary))
}

fn toy_config(config: &ExperimentConfig) -> Result<OneHotConfig, CliError> {
    let t = &config.toy;
    if t.n == 0 {
        return Err(CliError::config("toy.n", "must be positive"));
    }
    let c = if t.positional {
        OneHotConfig::new(t.n)
    } else {
        OneHotConfig::euclidean_without_positions(t.n)
    };
    // population gradients for the sequential algorithm are exact sums
    Ok(c.map_err(core("toy"))?.with_max_enumeration_n(t.n.max(64)))
}

fn toy_layout(config: &OneHotConfig) -> Vec<IndexRange> {
    tio::layout_ranges(&config.layout().named_ranges())
}

fn fit_row(step: usize, loss: f64, fit: &StructuredFit) -> String {
    let c = &fit.coeffs;
    let b = &fit.blocks;
    let fields: Vec<String> = [
        loss, c.alpha1, c.alpha2, c.beta1, c.beta2, c.gamma1, c.gamma2, c.gamma3, b.ex_to_ugx, b.ex_to_ex, b.ey_to_uy,
        b.ey_to_eginv, fit.residual, fit.residual_max,
    ]
    .iter()
    .map(|v| v.to_string())
    .collect();
    format!("{step},{}\n", fields.join(","))
}

const TOY_TRACE_HEADER: &str = "step,loss,alpha1,alpha2,beta1,beta2,gamma1,gamma2,gamma3,\
ex_to_ugx,ex_to_ex,ey_to_uy,ey_to_eginv,residual,residual_max\n";

/// First recorded step at which `values` reaches half its last value.
fn half_time(steps: &[usize], values: &[f64]) -> Option<usize> {
    let last = *values.last()?;
    if last <= 0.0 {
        return None;
    }
    values.iter().position(|&v| v >= 0.5 * last).map(|i| steps[i])
}

fn train_toy(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let t = &config.toy;
    let cfg = toy_config(config)?;
    let world = WorldSpec::toy(t.n, config.seed).map_err(core("toy"))?;
    let layout = toy_layout(&cfg);
    let mut w = Writer::new(config, Command::TrainToy)?;
    let ckdir = w.checkpoint_dir()?;
    let save = |w: &mut Writer, name: String, m: &ValueMatrix, step: usize| -> Result<(), CliError> {
        let path = ckdir.join(name);
        let file = std::fs::File::create(&path).map_err(CliError::io(&path))?;
        tio::write_checkpoint(
            std::io::BufWriter::new(file),
            &[("w".to_string(), m.0.view().into_dyn())],
            &w.provenance,
            step,
        )
        .map_err(core("output"))?;
        w.files.push(path);
        Ok(())
    };
    let mut trace = TOY_TRACE_HEADER.to_string();
    let summary = match t.algorithm {
        ToyAlgorithm::Sgd => {
            let sgd = SgdConfig {
                rho: t.rho,
                lr: t.lr,
                batch_size: t.batch_size,
                steps: t.steps,
                snapshot_every: t.snapshot_every,
                seed: config.seed,
            };
            let snaps = minibatch_sgd_train(&cfg, &world, &sgd).map_err(core("toy"))?;
            let mut steps = Vec::new();
            let (mut subject, mut attribute) = (Vec::new(), Vec::new());
            for s in &snaps {
                let fit = fit_structured(&cfg, &s.w, &world).map_err(core("toy"))?;
                trace.push_str(&fit_row(s.step, s.loss, &fit));
                steps.push(s.step);
                subject.push(fit.blocks.ex_to_ugx);
                attribute.push(fit.blocks.ey_to_eginv);
                save(&mut w, format!("toy_step{:06}.ckpt", s.step), &s.w, s.step)?;
            }
            let last = snaps.last().expect("step-0 snapshot always present");
            w.matrix("toy_w.csv", &last.w.0, t.n, &layout, &layout)?;
            json!({
                "final_step": last.step,
                "half_time_subject_block": half_time(&steps, &subject),
                "half_time_attribute_block": half_time(&steps, &attribute),
            })
        }
        ToyAlgorithm::Sequential => {
            if t.positional {
                return Err(CliError::config(
                    "toy.positional",
                    "the sequential algorithm runs without positional embeddings; set positional = false",
                ));
            }
            let it = sequential_training(&cfg, &world, t.rho, t.eta).map_err(core("toy"))?;
            let mut fits = Vec::new();
            for (i, m) in [&it.w1, &it.w2, &it.w3].into_iter().enumerate() {
                let fit = fit_structured(&cfg, m, &world).map_err(core("toy"))?;
                trace.push_str(&fit_row(i + 1, f64::NAN, &fit));
                save(&mut w, format!("toy_w{}.ckpt", i + 1), m, i + 1)?;
                w.matrix(&format!("toy_w{}.csv", i + 1), &m.0, t.n, &layout, &layout)?;
                fits.push(fit);
            }
            json!({
                "w2_subject_block": fits[1].blocks.ex_to_ugx,
                "w3_off_structure_max": fits[2].residual_max,
            })
        }
    };
    w.file("toy_trace.csv", &trace, json!({ "n": t.n }))?;
    Ok(w.finish(true, summary))
}

fn dense_setup(config: &ExperimentConfig) -> Result<(DenseConfig, WorldSpec), CliError> {
    let dc = config.dense.resolve(config.seed)?;
    let world = dc.world().map_err(core("dense"))?;
    Ok((dc, world))
}

fn load_dense(dc: &DenseConfig, path: &Path, section: &'static str) -> Result<(DenseParams, usize), CliError> {
    let ck = tio::load_checkpoint(path).map_err(core(section))?;
    let mut params = DenseParams::zeros(dc.layers, dc.d_model, dc.vocab_size());
    ck.load_into(&mut params).map_err(core(section))?;
    Ok((params, ck.manifest.step))
}

fn train_dense(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (dc, world) = dense_setup(config)?;
    let every = config.dense.checkpoint_every;
    let mut w = Writer::new(config, Command::TrainDense)?;
    let ckdir = w.checkpoint_dir()?;
    let provenance = w.provenance.clone();
    let mut saved = Vec::new();
    let run = dense_train_with(&dc, |row, params| {
        if (every > 0 && row.step % every == 0) || row.step == dc.total_batches {
            let path = ckdir.join(format!("dense_step{:06}.ckpt", row.step));
            tio::save_dense_checkpoint(&path, params, &provenance, row.step)?;
            saved.push(path);
        }
        Ok(())
    })
    .map_err(core("dense"))?;
    w.files.extend(saved);
    w.file("world.json", &(world.to_json().map_err(core("dense"))? + "\n"), json!({}))?;
    let sites: Vec<String> = run.trace.sites.iter().map(|s| s.label()).collect();
    w.file("dense_trace.csv", &run.trace.to_csv(), json!({ "sites": sites }))?;
    let phases = run.trace.phase_summary(&config.dense.onset).map_err(core("dense"))?;
    let summary = json!({
        "config": dc,
        "onset_criteria": config.dense.onset,
        "phases": phases,
        "two_phase_order": phases.ordered(),
        "final": run.trace.rows.last(),
    });
    w.report("dense_summary.json", summary.clone())?;
    Ok(w.finish(true, summary))
}

fn probe(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (dc, world) = dense_setup(config)?;
    let p = &config.probe;
    let path = p
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("probe.checkpoint", "a dense checkpoint path is required"))?;
    if p.pca_k == 0 {
        return Err(CliError::config("probe.pca_k", "must be positive"));
    }
    p.settings.validate().map_err(core("probe.settings"))?;
    let (params, step) = load_dense(&dc, path, "probe")?;
    let set = make_balanced_probe_set(&world, p.size, config.seed).map_err(core("probe"))?;
    let (seqs, labels) = (set.sequences(), set.labels());
    let model = DenseModel {
        params: &params,
        norm_epsilon: dc.norm_epsilon,
    };

    let mut reports = String::from("step,layer,position,stage,auc,accuracy,weight_norm,iterations,converged\n");
    let mut pca_csv = String::from("step,layer,position,stage,sample,label");
    for i in 1..=p.pca_k {
        pca_csv.push_str(&format!(",pc{i}"));
    }
    pca_csv.push('\n');
    let mut explained = serde_json::Map::new();
    let mut aucs = serde_json::Map::new();
    for site in ProbeSite::all(dc.layers) {
        let key = format!("{step},{},{},{}", site.layer + 1, site.position.name(), site.stage.name());
        let acts = collect_activations(&model, "dense", &seqs, &labels, site).map_err(core("probe"))?;
        let (_, report) = fit_logistic_probe(&acts, &p.settings).map_err(core("probe.settings"))?;
        reports.push_str(&format!(
            "{key},{},{},{},{},{}\n",
            report.auc, report.accuracy, report.weight_norm, report.iterations, report.converged
        ));
        aucs.insert(site.label(), report.auc.into());
        let k = p.pca_k.min(acts.matrix.nrows()).min(acts.matrix.ncols());
        let pca = pca_topk(&acts.matrix, k, PCA_TOL).map_err(core("probe"))?;
        for (i, row) in pca.projections.rows().into_iter().enumerate() {
            pca_csv.push_str(&format!("{key},{i},{}", u8::from(labels[i])));
            for v in row {
                pca_csv.push_str(&format!(",{v}"));
            }
            for _ in k..p.pca_k {
                pca_csv.push(',');
            }
            pca_csv.push('\n');
        }
        explained.insert(site.label(), json!(pca.explained_ratio));
    }
    let mut w = Writer::new(config, Command::Probe)?;
    let source = path.file_name().map(|n| n.to_string_lossy().into_owned());
    w.file(
        "probe_reports.csv",
        &reports,
        json!({ "checkpoint": source, "step": step, "settings": p.settings }),
    )?;
    w.file(
        "pca.csv",
        &pca_csv,
        json!({ "checkpoint": source, "step": step, "explained_ratio": explained }),
    )?;
    Ok(w.finish(true, json!({ "step": step, "auc": aucs })))
}

fn verify(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let reports = run_suite(&config.verify.suite_params(config.seed)).map_err(core("verify"))?;
    let passed = reports.iter().all(|r| r.pass);
    let mut w = Writer::new(config, Command::Verify)?;
    let body = json!({ "all_pass": passed, "reports": reports });
    w.report("theory_reports.json", body.clone())?;
    Ok(w.finish(passed, body))
}

fn cooccur(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let path = config
        .cooccur
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::config("cooccur.corpus", "a JSON-lines corpus path is required"))?;
    let file = std::fs::File::open(path).map_err(CliError::io(path))?;
    let corpus = Corpus::from_jsonl(std::io::BufReader::new(file)).map_err(core("cooccur"))?;
    let (mentions, false_mentions) = corpus.totals();
    let stats = corpus_stats(&corpus).map_err(core("cooccur"))?;
    let chi2 = chi2_independence(&corpus).map_err(core("cooccur"))?;
    let body = json!({
        "documents": corpus.documents.len(),
        "mentions": mentions,
        "false_mentions": false_mentions,
        "stats": stats,
        "chi2": chi2,
    });
    let mut w = Writer::new(config, Command::Cooccur)?;
    w.report("cooccur.json", body.clone())?;
    Ok(w.finish(true, body))
}

fn single(name: &str, start: usize) -> IndexRange {
    IndexRange {
        name: name.into(),
        start,
        end: start + 1,
    }
}

fn export(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let e = &config.export;
    if e.toy_checkpoint.is_none() && e.dense_checkpoint.is_none() {
        return Err(CliError::config(
            "export",
            "set toy_checkpoint and/or dense_checkpoint",
        ));
    }
    let mut w = Writer::new(config, Command::Export)?;
    let mut summary = serde_json::Map::new();

    if let Some(path) = &e.toy_checkpoint {
        let cfg = toy_config(config)?;
        let ck = tio::load_checkpoint(path).map_err(core("export"))?;
        let m = ck
            .get("w")
            .ok_or_else(|| CliError::config("export.toy_checkpoint", "checkpoint has no tensor `w`"))?
            .clone()
            .into_dimensionality::<Ix2>()
            .map_err(|err| CliError::config("export.toy_checkpoint", err.to_string()))?;
        if m.dim() != (cfg.d(), cfg.d()) {
            return Err(CliError::config(
                "export.toy_checkpoint",
                format!("matrix is {:?}, [toy] n = {} needs {}×{}", m.dim(), config.toy.n, cfg.d(), cfg.d()),
            ));
        }
        let layout = toy_layout(&cfg);
        w.matrix("toy_w.csv", &m, config.toy.n, &layout, &layout)?;
        summary.insert("toy_step".into(), ck.manifest.step.into());
    }

    if let Some(path) = &e.dense_checkpoint {
        let (dc, world) = dense_setup(config)?;
        if e.kernel_k == 0 || e.kernel_k > world.n_subjects {
            return Err(CliError::config(
                "export.kernel_k",
                format!("must be in 1..={}", world.n_subjects),
            ));
        }
        if e.attention_samples == 0 {
            return Err(CliError::config("export.attention_samples", "must be positive"));
        }
        let (params, step) = load_dense(&dc, path, "export")?;
        summary.insert("dense_step".into(), step.into());
        let vocab = tio::layout_ranges(&[
            ("subject", 0, world.n_subjects),
            ("attribute", world.n_subjects, world.vocab_size()),
        ]);
        let sorted_layout = tio::layout_ranges(&[("x", 0, e.kernel_k), ("g_x", e.kernel_k, 2 * e.kernel_k)]);
        let mut contrasts = Vec::new();
        for (l, kernel) in vo_kernel(&params).iter().enumerate() {
            w.matrix(&format!("vo_kernel_l{}.csv", l + 1), kernel, world.n_subjects, &vocab, &vocab)?;
            let sorted = sorted_kernel_view(kernel, &world, e.kernel_k).map_err(core("export"))?;
            w.matrix(
                &format!("vo_kernel_sorted_l{}.csv", l + 1),
                &sorted.matrix,
                e.kernel_k,
                &sorted_layout,
                &sorted_layout,
            )?;
            let (diag, off_mean, off_std) = diagonal_contrast(&sorted.lower_left());
            contrasts.push(json!({ "layer": l + 1, "diag_mean": diag, "off_mean": off_mean, "off_std": off_std }));
        }
        summary.insert("kernel_lower_left".into(), contrasts.into());

        let set = make_balanced_probe_set(&world, 2 * e.attention_samples, config.seed).map_err(core("export"))?;
        let positions = [single("x", 0), single("y", 1), single("x_prime", 2), single("y_prime", 3)];
        for (truth, tag) in [(true, "true"), (false, "false")] {
            let seqs: Vec<[usize; 4]> = set
                .examples
                .iter()
                .filter(|ex| ex.truth == truth)
                .map(|ex| ex.tokens())
                .collect();
            let maps = mean_attention(&params, &seqs, dc.norm_epsilon).map_err(core("export"))?;
            for (l, map) in maps.iter().enumerate() {
                w.matrix(&format!("attention_{tag}_l{}.csv", l + 1), map, 4, &positions, &positions)?;
            }
        }
    }
    Ok(w.finish(true, Value::Object(summary)))
}
