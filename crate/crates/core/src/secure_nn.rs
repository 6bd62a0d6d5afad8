//! Secret-shared CNN inference between the two computing parties.
//!
//! Weights and inputs are additively shared. Linear layers lower to one
//! batched Beaver multiplication per layer followed by local truncation;
//! ReLU, max pooling and the final argmax use masked comparisons. Only the
//! predicted class index is ever opened in the clear.

use rand::Rng;

use crate::dealer::{deal, Dealer, Material, MaterialPlan, PartyPool};
use crate::error::{Error, Result};
use crate::model::{conv_taps, pool_window, Layer, LayerKind, ModelParams, Shape3};
use crate::mpc::MpcParty;
use crate::ring::{FixedPointConfig, RingElement};
use crate::sharing::{self, ShareVector};
use crate::simnet::{MessageKind, PartyCtx, PartyProgram, Simulation};

/// Network id of the data owner submitting inference queries.
pub const CLIENT: usize = 2;

/// One party's share of a tensor, plus its public shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecretTensor {
    pub shape: Shape3,
    pub share: ShareVector,
}

impl SecretTensor {
    pub fn new(shape: Shape3, share: ShareVector) -> Result<Self> {
        if shape.len() != share.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {} elements, share has {}",
                shape.len(),
                share.len()
            )));
        }
        Ok(SecretTensor { shape, share })
    }

    pub fn party(&self) -> usize {
        self.share.party()
    }
}

/// Splits a plaintext input between the two computing parties.
pub fn encrypt_input<R: Rng + ?Sized>(
    x: &[f64],
    shape: Shape3,
    cfg: FixedPointConfig,
    rng: &mut R,
) -> Result<[SecretTensor; 2]> {
    if x.len() != shape.len() {
        return Err(Error::Shape(format!(
            "input has {} values, shape {shape:?} needs {}",
            x.len(),
            shape.len()
        )));
    }
    let enc = cfg.encode_slice(x)?;
    let mut s = sharing::share(&enc, 2, cfg, rng)?.into_iter();
    Ok([
        SecretTensor { shape, share: s.next().unwrap() },
        SecretTensor { shape, share: s.next().unwrap() },
    ])
}

pub fn decrypt_tensor(parts: &[SecretTensor; 2]) -> Result<Vec<f64>> {
    let cfg = parts[0].share.cfg();
    let v = sharing::reconstruct(&[parts[0].share.clone(), parts[1].share.clone()])?;
    Ok(cfg.decode_slice(&v))
}

/// A layer whose parameters are one party's shares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SharedLayer {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        weights: ShareVector,
        bias: ShareVector,
    },
    Relu,
    MaxPool2,
    AvgPool2,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
        weights: ShareVector,
        bias: ShareVector,
    },
}

impl SharedLayer {
    pub fn kind(&self) -> LayerKind {
        match self {
            SharedLayer::Conv2d { .. } => LayerKind::Conv2d,
            SharedLayer::Relu => LayerKind::Relu,
            SharedLayer::MaxPool2 => LayerKind::MaxPool2,
            SharedLayer::AvgPool2 => LayerKind::AvgPool2,
            SharedLayer::Flatten => LayerKind::Flatten,
            SharedLayer::Dense { .. } => LayerKind::Dense,
        }
    }

    pub fn params(&self) -> Option<(&ShareVector, &ShareVector)> {
        match self {
            SharedLayer::Conv2d { weights, bias, .. } | SharedLayer::Dense { weights, bias, .. } => Some((weights, bias)),
            _ => None,
        }
    }

    /// Public architecture of the layer with zeroed float parameters.
    fn skeleton(&self) -> Layer {
        match self {
            SharedLayer::Conv2d { in_ch, out_ch, kernel, weights, bias } => Layer::Conv2d {
                in_ch: *in_ch,
                out_ch: *out_ch,
                kernel: *kernel,
                weights: vec![0.0; weights.len()],
                bias: vec![0.0; bias.len()],
            },
            SharedLayer::Relu => Layer::Relu,
            SharedLayer::MaxPool2 => Layer::MaxPool2,
            SharedLayer::AvgPool2 => Layer::AvgPool2,
            SharedLayer::Flatten => Layer::Flatten,
            SharedLayer::Dense { inputs, outputs, weights, bias } => Layer::Dense {
                inputs: *inputs,
                outputs: *outputs,
                weights: vec![0.0; weights.len()],
                bias: vec![0.0; bias.len()],
            },
        }
    }
}

/// One computing party's share of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedModel {
    pub party: usize,
    pub cfg: FixedPointConfig,
    pub input: Shape3,
    pub layers: Vec<SharedLayer>,
}

impl SharedModel {
    /// The public architecture (shapes only, parameters zeroed).
    pub fn architecture(&self) -> Result<ModelParams> {
        ModelParams::new(self.input, self.layers.iter().map(|l| l.skeleton()).collect())
    }

    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        self.architecture()?.shapes()
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap().len())
    }

    /// Concatenation of every parameter share, layer by layer.
    pub fn flatten_shares(&self) -> Vec<RingElement> {
        let mut out = Vec::new();
        for (w, b) in self.layers.iter().filter_map(|l| l.params()) {
            out.extend_from_slice(w.values());
            out.extend_from_slice(b.values());
        }
        out
    }

    /// Rebuilds a shared model with the architecture of `arch` from a flat
    /// share vector (inverse of [`Self::flatten_shares`]).
    pub fn from_flat_shares(arch: &ModelParams, party: usize, cfg: FixedPointConfig, flat: &[RingElement]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "architecture has {} parameters, share vector has {}",
                arch.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        let mut take = |n: usize| {
            let s = ShareVector::from_parts(party, flat[off..off + n].to_vec(), cfg);
            off += n;
            s
        };
        let layers = arch
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d { in_ch, out_ch, kernel, weights, bias } => SharedLayer::Conv2d {
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    kernel: *kernel,
                    weights: take(weights.len()),
                    bias: take(bias.len()),
                },
                Layer::Relu => SharedLayer::Relu,
                Layer::MaxPool2 => SharedLayer::MaxPool2,
                Layer::AvgPool2 => SharedLayer::AvgPool2,
                Layer::Flatten => SharedLayer::Flatten,
                Layer::Dense { inputs, outputs, weights, bias } => SharedLayer::Dense {
                    inputs: *inputs,
                    outputs: *outputs,
                    weights: take(weights.len()),
                    bias: take(bias.len()),
                },
            })
            .collect();
        Ok(SharedModel { party, cfg, input: arch.input, layers })
    }
}

/// Encodes and splits every weight and bias between the two parties.
pub fn encrypt_model<R: Rng + ?Sized>(model: &ModelParams, cfg: FixedPointConfig, rng: &mut R) -> Result<[SharedModel; 2]> {
    model.shapes()?;
    let enc = cfg.encode_slice(&model.flatten_params())?;
    let shares = sharing::share(&enc, 2, cfg, rng)?;
    Ok([
        SharedModel::from_flat_shares(model, 0, cfg, shares[0].values())?,
        SharedModel::from_flat_shares(model, 1, cfg, shares[1].values())?,
    ])
}

/// Reconstructs and decodes a shared model.
pub fn decrypt_model(parts: &[SharedModel; 2]) -> Result<ModelParams> {
    let [a, b] = parts;
    if a.party == b.party || a.cfg != b.cfg || a.input != b.input {
        return Err(Error::Reconstruction("model shares do not form a pair".into()));
    }
    let arch = a.architecture()?;
    if !arch.same_shape(&b.architecture()?) {
        return Err(Error::Reconstruction("model shares have different architectures".into()));
    }
    let cfg = a.cfg;
    let sa = ShareVector::new(a.party, a.flatten_shares(), cfg)?;
    let sb = ShareVector::new(b.party, b.flatten_shares(), cfg)?;
    let flat = sharing::reconstruct(&[sa, sb])?;
    arch.with_params(&cfg.decode_slice(&flat))
}

/// Correlated randomness one inference consumes, in consumption order.
pub fn plan_inference(arch: &ModelParams) -> Result<MaterialPlan> {
    let shapes = arch.shapes()?;
    let mut plan = MaterialPlan::default();
    for (i, layer) in arch.layers.iter().enumerate() {
        let s = shapes[i];
        match layer {
            Layer::Conv2d { in_ch, kernel, .. } => {
                plan.triple(shapes[i + 1].len() * in_ch * kernel * kernel);
            }
            Layer::Dense { inputs, outputs, .. } => plan.triple(inputs * outputs),
            Layer::Relu => {
                plan.comparison(s.len());
                plan.triple(s.len());
            }
            Layer::MaxPool2 => {
                let windows = s.len() / 4;
                plan.comparison(2 * windows);
                plan.triple(2 * windows);
                plan.comparison(windows);
                plan.triple(windows);
            }
            Layer::AvgPool2 | Layer::Flatten => {}
        }
    }
    for _ in 1..shapes.last().unwrap().len() {
        plan.comparison(1);
        plan.triple(2);
    }
    Ok(plan)
}

fn check_tensor(mpc: &MpcParty, x: &SecretTensor) -> Result<()> {
    if x.party() != mpc.party() {
        return Err(Error::Protocol(format!(
            "party {} was handed a tensor share of party {}",
            mpc.party(),
            x.party()
        )));
    }
    Ok(())
}

/// Sums consecutive groups of `group` elements.
fn group_sums(v: &ShareVector, group: usize) -> ShareVector {
    let cfg = v.cfg();
    let sums = v
        .values()
        .chunks(group)
        .map(|c| c.iter().fold(RingElement::ZERO, |a, &b| cfg.add(a, b)))
        .collect();
    ShareVector::from_parts(v.party(), sums, cfg)
}

/// Fixed-point `W x + b` with shared `W` (`outputs x inputs`) and `b`.
pub async fn secure_dense(
    mpc: &mut MpcParty,
    x: &SecretTensor,
    weights: &ShareVector,
    bias: &ShareVector,
    outputs: usize,
) -> Result<SecretTensor> {
    check_tensor(mpc, x)?;
    let inputs = x.share.len();
    if weights.len() != inputs * outputs || bias.len() != outputs {
        return Err(Error::Shape(format!(
            "dense {inputs}->{outputs} got {} weights and {} biases",
            weights.len(),
            bias.len()
        )));
    }
    let xi: Vec<usize> = (0..outputs).flat_map(|_| 0..inputs).collect();
    let lhs = x.share.gather(&xi);
    let prod = mpc.mul(&lhs, weights).await?;
    let acc = group_sums(&prod, inputs);
    mpc.charge(prod.len() as u64);
    let out = mpc.truncate(&acc);
    SecretTensor::new(Shape3::flat(outputs), sharing::add_shares(&out, bias)?)
}

/// Valid-padded, stride-1 convolution lowered through im2col.
pub async fn secure_conv2d(
    mpc: &mut MpcParty,
    x: &SecretTensor,
    weights: &ShareVector,
    bias: &ShareVector,
    out_ch: usize,
    kernel: usize,
) -> Result<SecretTensor> {
    check_tensor(mpc, x)?;
    let s = x.shape;
    if kernel == 0 || s.h < kernel || s.w < kernel {
        return Err(Error::Shape(format!("kernel {kernel} does not fit input {s:?}")));
    }
    let fan_in = s.c * kernel * kernel;
    if weights.len() != out_ch * fan_in || bias.len() != out_ch {
        return Err(Error::Shape(format!(
            "conv with {out_ch} filters of {fan_in} taps got {} weights and {} biases",
            weights.len(),
            bias.len()
        )));
    }
    let out_shape = Shape3::new(out_ch, s.h - kernel + 1, s.w - kernel + 1);
    let taps = conv_taps(s, s.c, out_ch, kernel);
    let (xi, wi): (Vec<usize>, Vec<usize>) = taps.iter().flatten().copied().unzip();
    let prod = mpc.mul(&x.share.gather(&xi), &weights.gather(&wi)).await?;
    let acc = group_sums(&prod, fan_in);
    mpc.charge(prod.len() as u64);
    let out = mpc.truncate(&acc);
    let per_channel = out_shape.h * out_shape.w;
    let bias_idx: Vec<usize> = (0..out_shape.len()).map(|n| n / per_channel).collect();
    SecretTensor::new(out_shape, sharing::add_shares(&out, &bias.gather(&bias_idx))?)
}

pub async fn secure_relu(mpc: &mut MpcParty, x: &SecretTensor) -> Result<SecretTensor> {
    check_tensor(mpc, x)?;
    let y = mpc.relu(&x.share).await?;
    SecretTensor::new(x.shape, y)
}

fn pool_corners(x: &SecretTensor) -> Result<(Shape3, [ShareVector; 4])> {
    let s = x.shape;
    if s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 {
        return Err(Error::Shape(format!("2x2 pooling needs even spatial dims, got {s:?}")));
    }
    let out = Shape3::new(s.c, s.h / 2, s.w / 2);
    let mut idx: [Vec<usize>; 4] = Default::default();
    for c in 0..s.c {
        for i in 0..out.h {
            for j in 0..out.w {
                for (k, off) in pool_window(s, c, i, j).into_iter().enumerate() {
                    idx[k].push(off);
                }
            }
        }
    }
    Ok((out, idx.map(|v| x.share.gather(&v))))
}

/// 2x2/stride-2 max pooling as a two-level tournament: three comparisons per
/// window.
pub async fn secure_maxpool2(mpc: &mut MpcParty, x: &SecretTensor) -> Result<SecretTensor> {
    check_tensor(mpc, x)?;
    let (out, [a, b, c, d]) = pool_corners(x)?;
    let n = out.len();
    let left = ShareVector::concat(&[&a, &c])?;
    let right = ShareVector::concat(&[&b, &d])?;
    let pairs = mpc.max(&left, &right).await?;
    let m = mpc.max(&pairs.slice(0..n), &pairs.slice(n..2 * n)).await?;
    SecretTensor::new(out, m)
}

/// 2x2/stride-2 average pooling: local sum, multiply by `encode(1/4)`,
/// truncate.
pub async fn secure_avgpool2(mpc: &mut MpcParty, x: &SecretTensor) -> Result<SecretTensor> {
    check_tensor(mpc, x)?;
    let cfg = mpc.cfg();
    let (out, [a, b, c, d]) = pool_corners(x)?;
    let sum = sharing::add_shares(&sharing::add_shares(&a, &b)?, &sharing::add_shares(&c, &d)?)?;
    let scaled = sharing::mul_public(&sum, cfg.encode(0.25)?);
    mpc.charge(4 * out.len() as u64);
    SecretTensor::new(out, mpc.truncate(&scaled))
}

/// Runs every layer and returns the shared logits.
pub async fn secure_forward(mpc: &mut MpcParty, model: &SharedModel, x: &SecretTensor) -> Result<SecretTensor> {
    if model.party != mpc.party() {
        return Err(Error::Protocol(format!(
            "party {} was handed the model share of party {}",
            mpc.party(),
            model.party
        )));
    }
    if x.shape != model.input {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match model input {:?}",
            x.shape, model.input
        )));
    }
    let mut act = x.clone();
    for layer in &model.layers {
        act = match layer {
            SharedLayer::Conv2d { out_ch, kernel, weights, bias, .. } => {
                secure_conv2d(mpc, &act, weights, bias, *out_ch, *kernel).await?
            }
            SharedLayer::Dense { outputs, weights, bias, .. } => secure_dense(mpc, &act, weights, bias, *outputs).await?,
            SharedLayer::Relu => secure_relu(mpc, &act).await?,
            SharedLayer::MaxPool2 => secure_maxpool2(mpc, &act).await?,
            SharedLayer::AvgPool2 => secure_avgpool2(mpc, &act).await?,
            SharedLayer::Flatten => SecretTensor::new(Shape3::flat(act.shape.len()), act.share)?,
        };
    }
    Ok(act)
}

/// Full encrypted inference: forward pass, secret argmax, reveal of the
/// class index only.
pub async fn encrypted_inference(mpc: &mut MpcParty, model: &SharedModel, x: &SecretTensor) -> Result<usize> {
    let logits = secure_forward(mpc, model, x).await?;
    mpc.argmax_reveal(&logits.share).await
}

/// Verifies a party's pool holds at least what `plan` consumes.
pub fn check_pool(mpc: &MpcParty, plan: &MaterialPlan) -> Result<()> {
    let (triples, comparisons) = mpc.pool().remaining();
    let need_t = plan
        .requests
        .iter()
        .filter(|r| matches!(r, crate::dealer::MaterialRequest::Triple(_)))
        .count();
    let need_c = plan.requests.len() - need_t;
    if triples < need_t || comparisons < need_c {
        return Err(Error::PoolExhausted(format!(
            "inference needs {need_t} triples ({} scalar products) and {need_c} comparison keys ({} comparisons); \
             party {} holds {triples} triples and {comparisons} keys",
            plan.triple_elements(),
            plan.comparison_elements(),
            mpc.party()
        )));
    }
    Ok(())
}

/// Per-sample outcome of a batch run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchOutcome {
    pub predictions: Vec<usize>,
    pub sim_time_ns: u64,
    pub bytes: u64,
}

/// Where per-sample correlated randomness comes from.
pub enum MaterialSource {
    /// Generated on demand by a seeded dealer.
    Dealer(Dealer),
    /// Read ahead of time (e.g. from a randomness file), consumed in order.
    Preloaded(std::collections::VecDeque<Material>),
}

impl MaterialSource {
    fn provision(&mut self, plan: &MaterialPlan) -> Result<[PartyPool; 2]> {
        match self {
            MaterialSource::Dealer(d) => Ok(d.provision(plan)),
            MaterialSource::Preloaded(q) => {
                if q.len() < plan.requests.len() {
                    return Err(Error::PoolExhausted(format!(
                        "preloaded randomness has {} records left, one inference needs {}",
                        q.len(),
                        plan.requests.len()
                    )));
                }
                deal(q.drain(..plan.requests.len()).collect())
            }
        }
    }
}

/// Drives batches of encrypted inference on a simulation with three parties:
/// the two computing parties and the client ([`CLIENT`]) that owns the
/// inputs. Fresh material is provisioned before each sample.
pub struct InferenceRunner<'m> {
    sim: Simulation,
    models: [&'m SharedModel; 2],
    source: MaterialSource,
    plan: MaterialPlan,
    client_rng_seed: u64,
    next_session: u64,
}

impl<'m> InferenceRunner<'m> {
    pub fn new(sim: Simulation, models: [&'m SharedModel; 2], dealer_seed: u64) -> Result<Self> {
        let dealer = Dealer::new(models[0].cfg, dealer_seed);
        Self::with_source(sim, models, MaterialSource::Dealer(dealer), dealer_seed)
    }

    pub fn with_source(
        sim: Simulation,
        models: [&'m SharedModel; 2],
        source: MaterialSource,
        client_seed: u64,
    ) -> Result<Self> {
        if sim.parties() < 3 {
            return Err(Error::Parameter("inference needs two computing parties and a client".into()));
        }
        let [m0, m1] = models;
        if m0.party != 0 || m1.party != 1 || m0.cfg != m1.cfg {
            return Err(Error::Parameter("model shares must be party 0 and party 1 with one ring".into()));
        }
        let arch = m0.architecture()?;
        if !arch.same_shape(&m1.architecture()?) {
            return Err(Error::Parameter("model shares have different architectures".into()));
        }
        let plan = plan_inference(&arch)?;
        Ok(InferenceRunner {
            sim,
            models,
            source,
            plan,
            client_rng_seed: client_seed ^ 0x5eed_c11e,
            next_session: 0,
        })
    }

    pub fn plan(&self) -> &MaterialPlan {
        &self.plan
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    /// Runs one inference per input, sequentially. Each sample is its own
    /// session.
    pub fn run_batch(&mut self, inputs: &[Vec<f64>]) -> Result<BatchOutcome> {
        let cfg = self.models[0].cfg;
        let shape = self.models[0].input;
        let start = self.sim.transcript();
        let start_clock = start.makespan_ns();
        let start_bytes = start.total_sent();
        let mut predictions = Vec::with_capacity(inputs.len());
        let client = self.sim.context(CLIENT);
        let mut client_rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(self.client_rng_seed);
        let mut m0 = MpcParty::new(self.sim.context(0), cfg, PartyPool::new(0))?;
        let mut m1 = MpcParty::new(self.sim.context(1), cfg, PartyPool::new(1))?;

        for x in inputs {
            let session = self.next_session;
            self.next_session += 1;
            let [p0, p1] = self.source.provision(&self.plan)?;
            m0.refill(p0)?;
            m1.refill(p1)?;
            check_pool(&m0, &self.plan)?;
            check_pool(&m1, &self.plan)?;
            let [s0, s1] = encrypt_input(x, shape, cfg, &mut client_rng)?;
            let outs = self.sim.run(vec![
                (CLIENT, client_program(&client, session, [s0, s1])),
                (0, party_program(&mut m0, self.models[0], session)),
                (1, party_program(&mut m1, self.models[1], session)),
            ])?;
            let (a, b) = (outs[1], outs[2]);
            if a != b {
                return Err(Error::Protocol(format!("parties revealed different classes {a:?} and {b:?}")));
            }
            predictions.push(a.expect("computing parties return a class"));
        }
        let end = self.sim.transcript();
        Ok(BatchOutcome {
            predictions,
            sim_time_ns: end.makespan_ns() - start_clock,
            bytes: end.total_sent() - start_bytes,
        })
    }
}

fn client_program<'a>(ctx: &'a PartyCtx, session: u64, shares: [SecretTensor; 2]) -> PartyProgram<'a, Option<usize>> {
    Box::pin(async move {
        ctx.set_session(session);
        let cfg = shares[0].share.cfg();
        for (to, s) in shares.into_iter().enumerate() {
            ctx.send(to, MessageKind::InputShare { owner: CLIENT }, cfg.to_bytes(s.share.values()))?;
        }
        Ok(None)
    })
}

fn party_program<'a>(mpc: &'a mut MpcParty, model: &'a SharedModel, session: u64) -> PartyProgram<'a, Option<usize>> {
    Box::pin(async move {
        mpc.ctx().set_session(session);
        let msg = mpc.ctx().recv(CLIENT).await?;
        if msg.kind != (MessageKind::InputShare { owner: CLIENT }) {
            return Err(Error::Protocol(format!("expected an input share, got {:?}", msg.kind)));
        }
        let values = model.cfg.from_bytes(&msg.payload)?;
        let share = ShareVector::new(mpc.party(), values, model.cfg)?;
        let x = SecretTensor::new(model.input, share)?;
        Ok(Some(encrypted_inference(mpc, model, &x).await?))
    })
}
