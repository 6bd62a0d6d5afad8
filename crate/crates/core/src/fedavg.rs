//! Federated averaging: plaintext local training at each hospital and
//! aggregation of the local models, either in the clear or over additive
//! shares held by the two computing parties.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{softmax, ModelParams};
use crate::mpc::{cost, div_public};
use crate::ring::{FixedPointConfig, RingElement};
use crate::secure_nn::{encrypt_model, SharedModel};
use crate::sharing::{self, add_shares, ShareVector};
use crate::simnet::{LinkModel, Links, MessageKind, PartyCtx, PartyProgram, Simulation, Transcript};

/// Network id of hospital `i` in an aggregation simulation.
pub fn hospital_net_id(i: usize) -> usize {
    2 + i
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hospitals: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { rounds: 15, local_epochs: 1, learning_rate: 0.1, batch_size: 8, seed: 7, hospitals: 4 }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 || self.hospitals == 0 {
            return Err(Error::Config("rounds, local_epochs, batch_size and hospitals must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HospitalState {
    pub id: usize,
    pub data: Dataset,
    pub model: ModelParams,
    /// Link from this hospital's edge server to each computing party.
    pub link: LinkModel,
}

/// Mean cross-entropy and accuracy of `model` on `ds`.
pub fn evaluate(model: &ModelParams, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Parameter("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (x, y) in ds.pairs() {
        let logits = model.forward(x)?;
        let p = softmax(&logits);
        loss += -p[y].max(1e-300).ln();
        if crate::model::argmax_f64(&logits) == y {
            correct += 1;
        }
    }
    Ok((correct as f64 / ds.len() as f64, loss / ds.len() as f64))
}

fn shuffle_rng(seed: u64, hospital: usize, round: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((hospital as u64) << 32) | round as u64);
    rng
}

/// Mini-batch SGD from `h.model` over `cfg.local_epochs` passes of the local
/// data. The sample order depends only on (seed, hospital id, round).
pub fn local_train(h: &HospitalState, cfg: &TrainingConfig, round: usize) -> Result<ModelParams> {
    if h.data.is_empty() {
        return Err(Error::Training(format!("hospital {} has an empty dataset", h.id)));
    }
    let mut model = h.model.clone();
    let mut rng = shuffle_rng(cfg.seed, h.id, round);
    let mut order: Vec<usize> = (0..h.data.len()).collect();
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&[f64], usize)> =
                chunk.iter().map(|&i| (h.data.samples[i].as_slice(), h.data.labels[i])).collect();
            let loss = model.sgd_step(&batch, cfg.learning_rate)?;
            if !loss.is_finite() || model.flatten_params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at hospital {}, round {round}, local epoch {epoch}, batch {b} (lr {})",
                    h.id, cfg.learning_rate
                )));
            }
        }
    }
    Ok(model)
}

/// Element-wise arithmetic mean of the parameters.
pub fn fedavg_plain(models: &[ModelParams]) -> Result<ModelParams> {
    let first = models.first().ok_or_else(|| Error::Parameter("no models to average".into()))?;
    let mut sum = vec![0.0; first.param_count()];
    for (i, m) in models.iter().enumerate() {
        if !m.same_shape(first) {
            return Err(Error::Shape(format!("model {i} differs in architecture from model 0")));
        }
        for (s, p) in sum.iter_mut().zip(m.flatten_params()) {
            *s += p;
        }
    }
    let n = models.len() as f64;
    first.with_params(&sum.iter().map(|s| s / n).collect::<Vec<_>>())
}

/// FedAvg over the fixed-point encodings: the exact ring sum of the encoded
/// parameters, decoded and divided by the model count in floating point.
/// Secure and plaintext rounds both produce the global model this way.
pub fn mean_of_ring_sum(arch: &ModelParams, sum: &[RingElement], n: usize, cfg: FixedPointConfig) -> Result<ModelParams> {
    arch.with_params(&sum.iter().map(|&v| cfg.decode(v) / n as f64).collect::<Vec<_>>())
}

/// Plaintext counterpart of [`Aggregator::aggregate_sum`].
pub fn encoded_sum(models: &[ModelParams], cfg: FixedPointConfig) -> Result<Vec<RingElement>> {
    let first = models.first().ok_or_else(|| Error::Parameter("no models to average".into()))?;
    let mut sum = vec![RingElement::ZERO; first.param_count()];
    for (i, m) in models.iter().enumerate() {
        if !m.same_shape(first) {
            return Err(Error::Shape(format!("model {i} differs in architecture from model 0")));
        }
        for (s, v) in sum.iter_mut().zip(cfg.encode_slice(&m.flatten_params())?) {
            *s = cfg.add(*s, v);
        }
    }
    Ok(sum)
}

/// Runs secure aggregation rounds on one simulation whose parties are the
/// two computing parties (0, 1) followed by the hospitals.
pub struct Aggregator {
    sim: Simulation,
    cfg: FixedPointConfig,
    parties: [PartyCtx; 2],
    hospitals: Vec<PartyCtx>,
}

impl Aggregator {
    pub fn new(sim: Simulation, hospitals: usize, cfg: FixedPointConfig) -> Result<Self> {
        if hospitals < 2 {
            return Err(Error::Parameter(format!("secure aggregation needs >= 2 hospitals, got {hospitals}")));
        }
        if sim.parties() < hospital_net_id(hospitals) {
            return Err(Error::Parameter(format!(
                "simulation has {} parties, aggregation needs {}",
                sim.parties(),
                hospital_net_id(hospitals)
            )));
        }
        let parties = [sim.context(0), sim.context(1)];
        let hospitals = (0..hospitals).map(|i| sim.context(hospital_net_id(i))).collect();
        Ok(Self { sim, cfg, parties, hospitals })
    }

    /// Links: `default` between computing parties, `per_hospital[i]` from
    /// hospital `i` to both computing parties.
    pub fn links(default: LinkModel, per_hospital: &[LinkModel]) -> Links {
        let mut links = Links::uniform(default);
        for (i, l) in per_hospital.iter().enumerate() {
            links = links.with(hospital_net_id(i), 0, l.clone()).with(hospital_net_id(i), 1, l.clone());
        }
        links
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    /// One aggregation: each hospital encodes its model and sends one share
    /// to each computing party; the parties add the shares and divide by the
    /// public hospital count. The result stays shared.
    pub fn aggregate(&self, session: u64, models: &[ModelParams]) -> Result<[SharedModel; 2]> {
        let [s0, s1] = self.aggregate_sum(session, models)?;
        let n = models.len() as u64;
        Ok([
            SharedModel::from_flat_shares(&models[0], 0, self.cfg, div_public(&s0, n).values())?,
            SharedModel::from_flat_shares(&models[0], 1, self.cfg, div_public(&s1, n).values())?,
        ])
    }

    /// Like [`Aggregator::aggregate`] but stops at the exact ring sum of the
    /// encoded models, flattened.
    pub fn aggregate_sum(&self, session: u64, models: &[ModelParams]) -> Result<[ShareVector; 2]> {
        let n = self.hospitals.len();
        if models.len() != n {
            return Err(Error::Parameter(format!("{} models for {n} hospitals", models.len())));
        }
        let arch = &models[0];
        for (i, m) in models.iter().enumerate() {
            if !m.same_shape(arch) {
                return Err(Error::Shape(format!("hospital {i} model differs in architecture from hospital 0")));
            }
        }
        let cfg = self.cfg;
        let encoded = models.iter().map(|m| cfg.encode_slice(&m.flatten_params())).collect::<Result<Vec<_>>>()?;
        let params = arch.param_count();

        let mut programs: Vec<(usize, PartyProgram<'_, Option<ShareVector>>)> = Vec::new();
        for (i, (ctx, enc)) in self.hospitals.iter().zip(encoded).enumerate() {
            let prog: PartyProgram<'_, Option<ShareVector>> = Box::pin(async move {
                ctx.set_session(session);
                let shares = ctx.with_rng(|rng| sharing::share(&enc, 2, cfg, rng))?;
                for (to, s) in shares.iter().enumerate() {
                    ctx.send(to, MessageKind::InputShare { owner: hospital_net_id(i) }, cfg.to_bytes(s.values()))?;
                }
                Ok(None)
            });
            programs.push((hospital_net_id(i), prog));
        }
        for (p, ctx) in self.parties.iter().enumerate() {
            let prog: PartyProgram<'_, Option<ShareVector>> = Box::pin(async move {
                ctx.set_session(session);
                let mut acc = ShareVector::zeros(p, params, cfg);
                for i in 0..n {
                    let from = hospital_net_id(i);
                    let msg = ctx.recv(from).await?;
                    if msg.kind != (MessageKind::InputShare { owner: from }) {
                        return Err(Error::Protocol(format!("expected a model share from {from}, got {:?}", msg.kind)));
                    }
                    let share = ShareVector::new(p, cfg.from_bytes(&msg.payload)?, cfg)?;
                    if share.len() != params {
                        return Err(Error::Protocol(format!(
                            "hospital {from} sent {} values, model has {params}",
                            share.len()
                        )));
                    }
                    acc = add_shares(&acc, &share)?;
                    ctx.compute(params as u64 * cost::RING_OP);
                }
                Ok(Some(acc))
            });
            programs.push((p, prog));
        }
        let mut outs = self.sim.run(programs)?;
        let s1 = outs.pop().flatten().expect("party 1 returns a share");
        let s0 = outs.pop().flatten().expect("party 0 returns a share");
        Ok([s0, s1])
    }
}

/// One-shot secure aggregation on a fresh simulation.
pub fn secure_aggregate(
    models: &[ModelParams],
    cfg: FixedPointConfig,
    links: Links,
    seed: u64,
) -> Result<([SharedModel; 2], Transcript)> {
    let sim = Simulation::new(hospital_net_id(models.len()), links, seed);
    let agg = Aggregator::new(sim, models.len(), cfg)?;
    let out = agg.aggregate(0, models)?;
    Ok((out, agg.simulation().take_transcript()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Secure,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Who {
    Hospital(usize),
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub who: Who,
    pub split: &'static str,
    pub accuracy: f64,
    pub loss: f64,
    pub bytes_sent: u64,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FlOptions {
    pub ring: FixedPointConfig,
    /// Link between the computing parties.
    pub party_link: LinkModel,
    pub aggregation: Aggregation,
    pub record_wall_time: bool,
    pub record_payloads: bool,
}

#[derive(Clone, Debug)]
pub struct FlAbort {
    pub round: usize,
    pub error: String,
    pub is_protocol: bool,
}

pub struct FlRun {
    pub metrics: Vec<MetricRow>,
    /// Global model as revealed to the hospitals after the last round.
    pub global: ModelParams,
    /// Cloud-resident shared copy of the global model.
    pub shared: [SharedModel; 2],
    pub transcript: Transcript,
    pub abort: Option<FlAbort>,
}

impl FlRun {
    pub fn accuracy_column(&self, split: &str) -> Vec<f64> {
        self.metrics
            .iter()
            .filter(|r| r.who == Who::Global && r.split == split)
            .map(|r| r.accuracy)
            .collect()
    }
}

/// Federated training. Each round every hospital trains locally from the
/// current global model, the local models are aggregated, and the global
/// model is revealed to the hospitals for the next round. The revealed model
/// is the exact ring sum divided by the public hospital count (see
/// [`mean_of_ring_sum`]), so secure and plain runs follow the same
/// trajectory; the cloud keeps shares of the truncated mean. With a single
/// hospital there is nothing to aggregate and the local model becomes the
/// global model.
///
/// In plain mode the hospital upload is accounted as one plaintext copy of
/// the encoded model; nothing is simulated.
///
/// Round failures do not return `Err`: the run stops and the failure is
/// reported in [`FlRun::abort`] together with the metrics collected so far.
pub fn fl_run(
    hospitals: &mut [HospitalState],
    cfg: &TrainingConfig,
    validation: &Dataset,
    opts: &FlOptions,
) -> Result<FlRun> {
    cfg.validate()?;
    let n = hospitals.len();
    if n == 0 {
        return Err(Error::Config("federation has no hospitals".into()));
    }
    for h in hospitals.iter() {
        if !h.model.same_shape(&hospitals[0].model) {
            return Err(Error::Shape(format!("hospital {} model differs in architecture", h.id)));
        }
    }
    let links = Aggregator::links(opts.party_link.clone(), &hospitals.iter().map(|h| h.link.clone()).collect::<Vec<_>>());
    let sim = Simulation::new(hospital_net_id(n), links, cfg.seed);
    sim.record_payloads(opts.record_payloads);
    let aggregator = if n >= 2 && opts.aggregation == Aggregation::Secure {
        Some(Aggregator::new(sim, n, opts.ring)?)
    } else {
        None
    };
    let union = Dataset::concat(&hospitals.iter().map(|h| &h.data).collect::<Vec<_>>())?;
    let model_bytes = (hospitals[0].model.param_count() * opts.ring.element_bytes()) as u64;
    let mut share_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6c6f_6361_6c21);

    let mut metrics = Vec::new();
    let mut global = hospitals[0].model.clone();
    let mut shared: Option<[SharedModel; 2]> = None;
    let mut abort = None;
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let result = (|| -> Result<(ModelParams, Option<[SharedModel; 2]>, Vec<MetricRow>, u64)> {
            let mut rows = Vec::new();
            let mut locals = Vec::with_capacity(n);
            for h in hospitals.iter() {
                let local = local_train(h, cfg, round)?;
                let (acc, loss) = evaluate(&local, &h.data)?;
                let bytes = match (&aggregator, n) {
                    (_, 1) => 0,
                    (Some(_), _) => 2 * model_bytes,
                    (None, _) => model_bytes,
                };
                rows.push(MetricRow {
                    round,
                    who: Who::Hospital(h.id),
                    split: "train",
                    accuracy: acc,
                    loss,
                    bytes_sent: bytes,
                    wall_ms: None,
                });
                locals.push(local);
            }
            let total_bytes = rows.iter().map(|r| r.bytes_sent).sum();
            let (g, s) = match &aggregator {
                Some(agg) => {
                    let [s0, s1] = agg.aggregate_sum(round as u64, &locals)?;
                    let sum = sharing::reconstruct(&[s0.clone(), s1.clone()])?;
                    let mean = |p: usize, s: &ShareVector| {
                        SharedModel::from_flat_shares(&locals[0], p, opts.ring, div_public(s, n as u64).values())
                    };
                    (mean_of_ring_sum(&locals[0], &sum, n, opts.ring)?, Some([mean(0, &s0)?, mean(1, &s1)?]))
                }
                None if n == 1 => (locals.pop().unwrap(), None),
                None => (mean_of_ring_sum(&locals[0], &encoded_sum(&locals, opts.ring)?, n, opts.ring)?, None),
            };
            Ok((g, s, rows, total_bytes))
        })();
        let (g, s, mut rows, total_bytes) = match result {
            Ok(v) => v,
            Err(e) => {
                abort = Some(FlAbort { round, is_protocol: e.is_abort(), error: e.to_string() });
                break;
            }
        };
        for h in hospitals.iter_mut() {
            h.model = g.clone();
        }
        let (tr_acc, tr_loss) = evaluate(&g, &union)?;
        let (va_acc, va_loss) = evaluate(&g, validation)?;
        let wall = opts.record_wall_time.then(|| started.elapsed().as_secs_f64() * 1e3);
        for r in rows.iter_mut() {
            r.wall_ms = wall;
        }
        metrics.extend(rows);
        for (split, accuracy, loss) in [("train", tr_acc, tr_loss), ("validation", va_acc, va_loss)] {
            metrics.push(MetricRow { round, who: Who::Global, split, accuracy, loss, bytes_sent: total_bytes, wall_ms: wall });
        }
        global = g;
        if s.is_some() {
            shared = s;
        }
    }
    let shared = match shared {
        Some(s) => s,
        None => encrypt_model(&global, opts.ring, &mut share_rng)?,
    };
    let transcript = match &aggregator {
        Some(a) => a.simulation().take_transcript(),
        None => Simulation::new(hospital_net_id(n), Links::default(), cfg.seed).take_transcript(),
    };
    Ok(FlRun { metrics, global, shared, transcript, abort })
}

pub const METRICS_HEADER: &str = "round,hospital_id,split,accuracy,loss,bytes_sent,wall_ms";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let who = match r.who {
            Who::Hospital(i) => i.to_string(),
            Who::Global => "global".into(),
        };
        let wall = r.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{},{}\n",
            r.round, who, r.split, r.accuracy, r.loss, r.bytes_sent, wall
        ));
    }
    out
}

/// Gnuplot data: round, global train accuracy, global validation accuracy,
/// global validation loss.
pub fn metrics_dat(rows: &[MetricRow]) -> String {
    let mut out = String::from("# round train_acc val_acc val_loss\n");
    let global: Vec<&MetricRow> = rows.iter().filter(|r| r.who == Who::Global).collect();
    for tr in global.iter().filter(|r| r.split == "train") {
        if let Some(va) = global.iter().find(|r| r.split == "validation" && r.round == tr.round) {
            out.push_str(&format!("{} {:.6} {:.6} {:.6}\n", tr.round, tr.accuracy, va.accuracy, va.loss));
        }
    }
    out
}
