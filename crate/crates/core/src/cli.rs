//! Command-line experiment runners. Each command is a library function so
//! that tests can drive it in-process; [`run`] adds argument parsing and the
//! exit-code contract.

use std::collections::VecDeque;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{load_pgm_dir, Dataset};
use crate::dealer::{deal, decode_randomness, read_randomness, write_randomness, Dealer, Material};
use crate::error::{Error, Result};
use crate::fedavg::{fl_run, metrics_csv, metrics_dat, secure_aggregate, Aggregation, FlOptions, FlRun, HospitalState};
use crate::model::{argmax_ring, fixed_point_forward, ModelParams};
use crate::model_io::{read_shared_pair, write_plain_model, write_shared_model};
use crate::mpc::MpcParty;
use crate::ring::{FixedPointConfig, RingElement};
use crate::secure_nn::{decrypt_model, plan_inference, InferenceRunner, MaterialSource};
use crate::sharing::{self, add_shares, reconstruct, ShareVector};
use crate::simnet::{Links, PartyProgram, Simulation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORT: i32 = 3;
pub const EXIT_SELFTEST: i32 = 4;

pub const PARTY_MODEL_FILES: [&str; 2] = ["model_party0.smpcmodl", "model_party1.smpcmodl"];
pub const PLAIN_MODEL_FILE: &str = "model_plain.smpcmodl";

/// Exit code for an error: protocol and training aborts are 3, everything
/// else (configuration, files) is 2.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_abort() || matches!(e, Error::Training(_)) {
        EXIT_ABORT
    } else {
        EXIT_CONFIG
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub struct Datasets {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Synthetic: three independently seeded draws. Pgm: a seeded shuffle of the
/// directory, split into validation, test, and the remaining training data.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => Ok(Datasets {
            train: d.blobs.generate(d.train_samples, cfg.seed)?,
            validation: d.blobs.generate(d.validation_samples, cfg.seed.wrapping_add(1))?,
            test: d.blobs.generate(d.test_samples, cfg.seed.wrapping_add(2))?,
        }),
        DataSource::Pgm => {
            let root = d.root.as_ref().expect("validated");
            let (all, _) = load_pgm_dir(root, d.blobs.side)?;
            let mut idx: Vec<usize> = (0..all.len()).collect();
            idx.shuffle(&mut ChaCha20Rng::seed_from_u64(cfg.seed));
            let (v, t) = (d.validation_samples, d.test_samples);
            if all.len() < v + t + cfg.train.hospitals {
                return Err(Error::Config(format!(
                    "{} holds {} images, need {v} validation + {t} test + at least one per hospital",
                    root.display(),
                    all.len()
                )));
            }
            Ok(Datasets {
                validation: all.subset(&idx[..v]),
                test: all.subset(&idx[v..v + t]),
                train: all.subset(&idx[v + t..]),
            })
        }
    }
}

pub fn initial_model(cfg: &ExperimentConfig, ds: &Dataset) -> ModelParams {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x696e_6974);
    ModelParams::reference_with(ds.shape, cfg.model.filters, cfg.model.hidden, ds.num_classes, &mut rng)
}

pub struct TrainReport {
    pub run: FlRun,
    pub metrics_csv: String,
    pub output_dir: PathBuf,
}

impl TrainReport {
    pub fn final_validation(&self) -> Option<f64> {
        self.run.accuracy_column("validation").last().copied()
    }
}

/// Federated training. Writes `metrics.csv`, `metrics.dat`, the plaintext and
/// per-party global model files, `train_transcript.jsonl` and
/// `train_summary.json` into the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    let data = build_datasets(cfg)?;
    let parts = data.train.partition(cfg.train.hospitals, cfg.seed)?;
    let model = initial_model(cfg, &data.train);
    let mut hospitals: Vec<HospitalState> = parts
        .into_iter()
        .enumerate()
        .map(|(id, data)| HospitalState { id, data, model: model.clone(), link: cfg.link_model() })
        .collect();
    let opts = FlOptions {
        ring: cfg.ring,
        party_link: cfg.link_model(),
        aggregation: cfg.train.aggregation,
        record_wall_time: cfg.record_wall_time,
        record_payloads: false,
    };
    log::info!("training {} hospitals for {} rounds ({:?} aggregation)", hospitals.len(), cfg.train.rounds, opts.aggregation);
    let run = fl_run(&mut hospitals, &cfg.training(), &data.validation, &opts)?;
    let csv = metrics_csv(&run.metrics);
    write_text(&out.join("metrics.csv"), &csv)?;
    write_text(&out.join("metrics.dat"), &metrics_dat(&run.metrics))?;
    write_plain_model(&out.join(PLAIN_MODEL_FILE), &run.global, cfg.ring)?;
    for (s, name) in run.shared.iter().zip(PARTY_MODEL_FILES) {
        write_shared_model(&out.join(name), s)?;
    }
    run.transcript.export(&out.join("train_transcript.jsonl"))?;
    let summary = serde_json::json!({
        "rounds_completed": run.accuracy_column("validation").len(),
        "final_validation_accuracy": run.accuracy_column("validation").last(),
        "aggregation": cfg.train.aggregation,
        "transcript_hash": run.transcript.hash(),
        "transcript_bytes": run.transcript.total_sent(),
        "abort": run.abort.as_ref().map(|a| serde_json::json!({"round": a.round, "error": a.error})),
    });
    write_text(&out.join("train_summary.json"), &(serde_json::to_string_pretty(&summary).unwrap() + "\n"))?;
    Ok(TrainReport { run, metrics_csv: csv, output_dir: out })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferRow {
    pub batch_size: usize,
    pub correct: usize,
    pub bytes_sent: u64,
    pub sim_time_ns: u64,
    pub wall_ms: Option<f64>,
    pub transcript_hash: String,
    pub predictions: Vec<usize>,
}

impl InferRow {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.batch_size as f64
    }
}

pub struct InferReport {
    pub rows: Vec<InferRow>,
    pub labels: Vec<usize>,
    /// Plaintext fixed-point and float argmax per test sample.
    pub fixed_point: Vec<usize>,
    pub float: Vec<usize>,
    /// Fixed-point logit gap (top minus runner-up) per sample, in LSBs.
    pub logit_gaps: Vec<f64>,
    pub error_budget: f64,
    pub infer_csv: String,
    pub predictions_csv: String,
}

fn logit_gap(cfg: FixedPointConfig, logits: &[RingElement]) -> f64 {
    let mut v: Vec<i128> = logits.iter().map(|&l| cfg.signed(l) as i128).collect();
    v.sort_unstable_by(|a, b| b.cmp(a));
    (v[0] - v.get(1).copied().unwrap_or(i128::MIN / 2)) as f64
}

/// Encrypted inference over each configured batch size, each on a fresh
/// simulation seeded identically, so sample `j` sees the same randomness in
/// every batch. Writes `infer.csv`, `infer.dat`, `predictions.csv` and the
/// transcript of the largest batch.
pub fn cmd_infer(cfg: &ExperimentConfig) -> Result<InferReport> {
    cfg.validate()?;
    let dir = cfg.model_dir();
    let paths = PARTY_MODEL_FILES.map(|f| dir.join(f));
    for p in &paths {
        if !p.is_file() {
            return Err(Error::Config(format!("missing party model file {}", p.display())));
        }
    }
    let models = read_shared_pair([&paths[0], &paths[1]])?;
    let ring = models[0].cfg;
    let plain = decrypt_model(&models)?;
    let test = build_datasets(cfg)?.test;
    let max_batch = *cfg.infer.batch_sizes.iter().max().unwrap();
    if max_batch > test.len() {
        return Err(Error::Config(format!("largest batch {max_batch} exceeds the {} test samples", test.len())));
    }
    // Each batch decodes its own copy, so sample j gets the same records in
    // every batch and no record object is shared between runs.
    let preloaded = match &cfg.infer.randomness_file {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let (file_cfg, _) = decode_randomness(&bytes, p)?;
            if file_cfg != ring {
                return Err(Error::Config(format!("{} uses a different ring than the model", p.display())));
            }
            Some((p.clone(), bytes))
        }
        None => None,
    };
    let out = cfg.output_dir.clone();
    create_dir(&out)?;

    let mut fixed_point = Vec::with_capacity(max_batch);
    let mut float = Vec::with_capacity(max_batch);
    let mut gaps = Vec::with_capacity(max_batch);
    for x in &test.samples[..max_batch] {
        let logits = fixed_point_forward(&plain, ring, x)?;
        fixed_point.push(argmax_ring(ring, &logits));
        gaps.push(logit_gap(ring, &logits));
        float.push(plain.predict(x)?);
    }

    let mut rows = Vec::new();
    let mut last_transcript = None;
    for &b in &cfg.infer.batch_sizes {
        let sim = Simulation::new(3, Links::uniform(cfg.link_model()), cfg.seed);
        sim.set_compute_rate(cfg.infer.compute_ops_per_sec);
        let source = match &preloaded {
            Some((p, bytes)) => MaterialSource::Preloaded(VecDeque::from(decode_randomness(bytes, p)?.1)),
            None => MaterialSource::Dealer(Dealer::new(ring, cfg.seed ^ 0x6465_616c)),
        };
        let mut runner = InferenceRunner::with_source(sim, [&models[0], &models[1]], source, cfg.seed)?;
        let started = Instant::now();
        let outcome = runner.run_batch(&test.samples[..b])?;
        let wall = cfg.record_wall_time.then(|| started.elapsed().as_secs_f64() * 1e3);
        let transcript = runner.simulation().take_transcript();
        let correct = outcome.predictions.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
        log::info!("batch {b}: {correct}/{b} correct, {} simulated ns", outcome.sim_time_ns);
        rows.push(InferRow {
            batch_size: b,
            correct,
            bytes_sent: outcome.bytes,
            sim_time_ns: outcome.sim_time_ns,
            wall_ms: wall,
            transcript_hash: transcript.hash(),
            predictions: outcome.predictions,
        });
        if b == max_batch {
            last_transcript = Some(transcript);
        }
    }
    if let Some(t) = &last_transcript {
        t.export(&out.join("infer_transcript.jsonl"))?;
    }

    let mut csv = String::from("batch_size,correct,accuracy,bytes_sent,sim_time_ms,wall_ms,transcript_hash\n");
    let mut dat = String::from("# batch_size sim_time_ms accuracy\n");
    let mut preds = String::from("batch_size,sample,label,encrypted,fixed_point,float\n");
    for r in &rows {
        let wall = r.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default();
        let ms = r.sim_time_ns as f64 / 1e6;
        writeln!(csv, "{},{},{:.6},{},{:.6},{},{}", r.batch_size, r.correct, r.accuracy(), r.bytes_sent, ms, wall, r.transcript_hash).unwrap();
        writeln!(dat, "{} {:.6} {:.6}", r.batch_size, ms, r.accuracy()).unwrap();
        for (j, p) in r.predictions.iter().enumerate() {
            writeln!(preds, "{},{},{},{},{},{}", r.batch_size, j, test.labels[j], p, fixed_point[j], float[j]).unwrap();
        }
    }
    write_text(&out.join("infer.csv"), &csv)?;
    write_text(&out.join("infer.dat"), &dat)?;
    write_text(&out.join("predictions.csv"), &preds)?;
    Ok(InferReport {
        rows,
        labels: test.labels[..max_batch].to_vec(),
        fixed_point,
        float,
        logit_gaps: gaps,
        error_budget: crate::model::logit_error_budget(&plain)?,
        infer_csv: csv,
        predictions_csv: preds,
    })
}

/// Correlated randomness for `randomness.inferences` runs of the configured
/// reference architecture, written to `randomness.file` (relative paths are
/// resolved against the output directory).
pub fn cmd_gen_randomness(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let shape = cfg.data.blobs.shape();
    let classes = match cfg.data.source {
        DataSource::Synthetic => cfg.data.blobs.num_classes,
        DataSource::Pgm => build_datasets(cfg)?.train.num_classes,
    };
    let probe = Dataset::new(shape, classes, vec![], vec![])?;
    let arch = initial_model(cfg, &probe);
    let plan = plan_inference(&arch)?;
    let mut dealer = Dealer::new(cfg.ring, cfg.seed ^ 0x6465_616c);
    let mut material = Vec::new();
    for _ in 0..cfg.randomness.inferences {
        material.extend(dealer.generate(&plan));
    }
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(&cfg.randomness.file);
    write_randomness(&path, cfg.ring, &material)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub detail: String,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
    pub csv: String,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed())
    }
}

/// Every (mask, input) pair of an 8-bit ring against the sign predicate.
pub fn suite_fss_exhaustive(seed: u64) -> Result<SuiteResult> {
    let cfg = FixedPointConfig::new(8, 4)?;
    let mut dealer = Dealer::new(cfg, seed);
    let n = cfg.modulus() as u64;
    let (mut cases, mut failures) = (0, 0);
    let mut detail = String::new();
    for a in 0..n {
        let pair = dealer.comparison_key_with_mask(&vec![RingElement(a); n as usize]);
        let xs: Vec<RingElement> = (0..n).map(|y| cfg.add(RingElement(y), RingElement(a))).collect();
        let [k0, k1] = pair.into_keys();
        let got = reconstruct(&[k0.eval_wrapped(&xs)?, k1.eval_wrapped(&xs)?])?;
        for y in 0..n {
            cases += 1;
            let want = (cfg.signed(RingElement(y)) <= 0) as u64;
            if got[y as usize].0 != want {
                failures += 1;
                if detail.is_empty() {
                    detail = format!("mask {a} input {y}: got {} want {want}", got[y as usize].0);
                }
            }
        }
    }
    Ok(SuiteResult { name: "fss-exhaustive-k8", cases, failures, detail, seconds: 0.0 })
}

/// Secure fixed-point products of `xs` and `ys` with one triple per entry of
/// `triples` (their lengths must add up to `xs.len()`).
pub fn secure_products(
    cfg: FixedPointConfig,
    xs: &[RingElement],
    ys: &[RingElement],
    triples: Vec<Material>,
    seed: u64,
) -> Result<Vec<RingElement>> {
    let lens: Vec<usize> = triples
        .iter()
        .map(|m| match m {
            Material::Triple(t) => Ok(t.len()),
            Material::Comparison(_) => Err(Error::Parameter("expected triples only".into())),
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sx = sharing::share(xs, 2, cfg, &mut rng)?;
    let sy = sharing::share(ys, 2, cfg, &mut rng)?;
    let [p0, p1] = deal(triples)?;
    let sim = Simulation::new(2, Links::default(), seed);
    let mut m0 = MpcParty::new(sim.context(0), cfg, p0)?;
    let mut m1 = MpcParty::new(sim.context(1), cfg, p1)?;
    fn body<'a>(m: &'a mut MpcParty, x: &'a ShareVector, y: &'a ShareVector, lens: &'a [usize]) -> PartyProgram<'a, ShareVector> {
        Box::pin(async move {
            let mut parts = Vec::new();
            let mut off = 0;
            for &l in lens {
                parts.push(m.mul_fixed(&x.slice(off..off + l), &y.slice(off..off + l)).await?);
                off += l;
            }
            ShareVector::concat(&parts.iter().collect::<Vec<_>>())
        })
    }
    let out = sim.run(vec![(0, body(&mut m0, &sx[0], &sy[0], &lens)), (1, body(&mut m1, &sx[1], &sy[1], &lens))])?;
    reconstruct(&out)
}

/// Beaver identity on every triple, then secure fixed-point products against
/// the float oracle with error at most `2^(1-f)`.
pub fn suite_beaver(cfg: FixedPointConfig, cases: usize, file: Option<&Path>, seed: u64) -> Result<SuiteResult> {
    let material = match file {
        Some(p) => {
            let (file_cfg, m) = read_randomness(p)?;
            if file_cfg != cfg {
                return Err(Error::Config(format!("{} uses ring k={} f={}", p.display(), file_cfg.bits(), file_cfg.frac_bits())));
            }
            m.into_iter().filter(|m| matches!(m, Material::Triple(_))).collect()
        }
        None => vec![Material::Triple(Dealer::new(cfg, seed).gen_triple(cases))],
    };
    let name = "beaver-oracle";
    for m in &material {
        if let Material::Triple(t) = m {
            if let Err(e) = t.verify() {
                return Ok(SuiteResult { name, cases: 0, failures: 1, detail: e.to_string(), seconds: 0.0 });
            }
        }
    }
    let total: usize = material.iter().map(|m| if let Material::Triple(t) = m { t.len() } else { 0 }).sum();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 1);
    // Operands up to 16 in magnitude. Local truncation fails when the shares
    // of the 2f-bit product straddle the wrap point, with probability about
    // |x*y| * 2^(2f) / 2^k per element: about 2^-24 here, 2^-12 for operands
    // near 1000.
    let bound = 1i64 << (4 + cfg.frac_bits());
    let xs: Vec<RingElement> = (0..total).map(|_| cfg.from_signed(rng.gen_range(-bound..=bound))).collect();
    let ys: Vec<RingElement> = (0..total).map(|_| cfg.from_signed(rng.gen_range(-bound..=bound))).collect();
    let got = secure_products(cfg, &xs, &ys, material, seed)?;
    let tol = 2f64.powi(1 - cfg.frac_bits() as i32);
    let (mut failures, mut detail) = (0, String::new());
    for j in 0..total {
        let want = cfg.decode(xs[j]) * cfg.decode(ys[j]);
        let err = (cfg.decode(got[j]) - want).abs();
        if err > tol {
            failures += 1;
            if detail.is_empty() {
                detail = format!("case {j}: error {err:e} exceeds {tol:e}");
            }
        }
    }
    Ok(SuiteResult { name, cases: total, failures, detail, seconds: 0.0 })
}

/// Random share/reconstruct round trips for n in {2, 3, 5}, plus the
/// two-input share-sum identity.
pub fn suite_share_roundtrip(cfg: FixedPointConfig, cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut total, mut failures, mut detail) = (0, 0, String::new());
    for n in [2usize, 3, 5] {
        for _ in 0..cases {
            let len = rng.gen_range(1..=4);
            let secret: Vec<RingElement> = (0..len).map(|_| cfg.random(&mut rng)).collect();
            let shares = sharing::share(&secret, n, cfg, &mut rng)?;
            total += 1;
            if sharing::reconstruct_n(&shares, n)? != secret {
                failures += 1;
                detail = format!("round trip failed for n={n}");
            }
        }
    }
    for _ in 0..cases.min(500) {
        let (m1, m2) = (cfg.random(&mut rng), cfg.random(&mut rng));
        let a = sharing::share(&[m1], 2, cfg, &mut rng)?;
        let b = sharing::share(&[m2], 2, cfg, &mut rng)?;
        let u = add_shares(&a[0], &b[0])?;
        let s = add_shares(&a[1], &b[1])?;
        total += 1;
        if reconstruct(&[u, s])? != vec![cfg.add(m1, m2)] {
            failures += 1;
            detail = "share-sum identity failed".into();
        }
    }
    Ok(SuiteResult { name: "share-roundtrip", cases: total, failures, detail, seconds: 0.0 })
}

/// Secure aggregation of 3..=8 random models against the plain mean of the
/// same encoded parameters (2 LSB per element), and the exact byte count.
pub fn suite_aggregation(cfg: FixedPointConfig, params: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut total, mut failures, mut detail) = (0, 0, String::new());
    let shape = crate::model::Shape3::flat(params - 1);
    for n in 3..=8usize {
        let models: Vec<ModelParams> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..params - 1).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let b = vec![rng.gen_range(-4.0..4.0)];
                ModelParams::new(
                    shape,
                    vec![crate::model::Layer::Dense { inputs: params - 1, outputs: 1, weights: w, bias: b }],
                )
            })
            .collect::<Result<_>>()?;
        let (shares, transcript) = secure_aggregate(&models, cfg, Links::default(), seed)?;
        let got = decrypt_model(&shares)?.flatten_params();
        let encoded: Vec<Vec<f64>> = models
            .iter()
            .map(|m| cfg.encode_slice(&m.flatten_params()).map(|e| cfg.decode_slice(&e)))
            .collect::<Result<_>>()?;
        for j in 0..params {
            total += 1;
            let mean = encoded.iter().map(|e| e[j]).sum::<f64>() / n as f64;
            if (got[j] - mean).abs() > 2.0 * cfg.lsb() {
                failures += 1;
                detail = format!("n={n} element {j}: {} vs {mean}", got[j]);
            }
        }
        let want_bytes = (n * 2 * params * cfg.element_bytes()) as u64;
        total += 1;
        if transcript.total_sent() != want_bytes {
            failures += 1;
            detail = format!("n={n}: {} bytes sent, expected {want_bytes}", transcript.total_sent());
        }
    }
    Ok(SuiteResult { name: "aggregation-exactness", cases: total, failures, detail, seconds: 0.0 })
}

/// Runs all suites and writes `selftest.csv` (without timings, which go to
/// the returned report only).
pub fn cmd_selftest(cfg: &ExperimentConfig, randomness: Option<&Path>) -> Result<SelftestReport> {
    cfg.validate()?;
    let file = randomness.or(cfg.selftest.randomness_file.as_deref());
    let timed = |f: &dyn Fn() -> Result<SuiteResult>| -> Result<SuiteResult> {
        let t = Instant::now();
        let mut r = f()?;
        r.seconds = t.elapsed().as_secs_f64();
        Ok(r)
    };
    let suites = vec![
        timed(&|| suite_fss_exhaustive(cfg.seed))?,
        timed(&|| suite_beaver(cfg.ring, cfg.selftest.beaver_cases, file, cfg.seed))?,
        timed(&|| suite_share_roundtrip(cfg.ring, cfg.selftest.share_cases, cfg.seed))?,
        timed(&|| suite_aggregation(cfg.ring, 1000, cfg.seed))?,
    ];
    let mut csv = String::from("suite,cases,failures,status,detail\n");
    for s in &suites {
        let status = if s.passed() { "pass" } else { "fail" };
        writeln!(csv, "{},{},{},{},\"{}\"", s.name, s.cases, s.failures, status, s.detail.replace('"', "'")).unwrap();
    }
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("selftest.csv"), &csv)?;
    Ok(SelftestReport { suites, csv })
}

#[derive(Parser, Debug)]
#[command(name = "smpc-fedsim", version, about = "Secret-shared federated learning and encrypted inference on a simulated network")]
pub struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Link preset between parties.
    #[arg(long, global = true, value_parser = ["6g", "4g"])]
    pub link: Option<String>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Aggregate local models in the clear instead of over shares.
    #[arg(long, global = true)]
    pub plain_aggregation: bool,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Federated training with secure aggregation.
    Train,
    /// Encrypted inference over the configured batch sizes.
    Infer,
    /// Exhaustive and randomized protocol checks.
    Selftest {
        /// Verify and use the triples in this randomness file.
        #[arg(long)]
        randomness: Option<PathBuf>,
    },
    /// Write dealer randomness for offline use.
    GenRandomness,
    /// Print the effective configuration.
    PrintConfig,
}

impl Cli {
    pub fn effective_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = &self.link {
            cfg.link = l.clone();
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        if self.plain_aggregation {
            cfg.train.aggregation = Aggregation::Plain;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let cfg = cli.effective_config()?;
    let Some(command) = &cli.command else {
        print!("{}", cfg.to_json());
        return Ok(EXIT_OK);
    };
    if cli.print_config {
        print!("{}", cfg.to_json());
        return Ok(EXIT_OK);
    }
    match command {
        Command::PrintConfig => print!("{}", cfg.to_json()),
        Command::Train => {
            let r = cmd_train(&cfg)?;
            for line in r.metrics_csv.lines().filter(|l| l.contains(",global,validation,")) {
                println!("{line}");
            }
            println!("transcript {}", r.run.transcript.hash());
            println!("outputs in {}", r.output_dir.display());
            if let Some(a) = &r.run.abort {
                eprintln!("aborted in round {}: {}", a.round, a.error);
                return Ok(EXIT_ABORT);
            }
        }
        Command::Infer => {
            let r = cmd_infer(&cfg)?;
            print!("{}", r.infer_csv);
        }
        Command::Selftest { randomness } => {
            let r = cmd_selftest(&cfg, randomness.as_deref())?;
            for s in &r.suites {
                let status = if s.passed() { "PASS" } else { "FAIL" };
                println!("{status} {:<22} {:>8} cases {:>4} failures {:>8.2}s {}", s.name, s.cases, s.failures, s.seconds, s.detail);
            }
            if !r.passed() {
                return Ok(EXIT_SELFTEST);
            }
        }
        Command::GenRandomness => {
            let p = cmd_gen_randomness(&cfg)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
