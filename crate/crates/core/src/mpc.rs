//! Online two-party protocols over additive shares: opening, Beaver
//! multiplication, local truncation, masked comparison and the selection
//! gadgets built on them (ReLU, pairwise max, argmax).
//!
//! Each computing party runs its own [`MpcParty`] inside a simulated network
//! program. Computing parties are network ids 0 and 1; a party only ever
//! holds its own shares and its own half of the dealer's material.

use std::collections::HashSet;

use crate::dealer::{ComparisonKey, PartyPool, TripleShare};
use crate::error::{Error, Result};
use crate::ring::{FixedPointConfig, RingElement};
use crate::sharing::{self, ShareVector};
use crate::simnet::{MessageKind, PartyCtx};

/// Abstract compute units charged to the simulated clock.
pub mod cost {
    /// One ring addition or multiplication on one element.
    pub const RING_OP: u64 = 1;
    /// One length-tripling PRG call in a comparison key evaluation.
    pub const PRG_CALL: u64 = 8;
}

/// A value both parties learned from an explicit opening.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpenedValue {
    pub values: Vec<RingElement>,
    pub round: u64,
}

/// Counters for one party's protocol activity.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub opened_elements: u64,
    pub multiplications: u64,
    pub comparisons: u64,
    pub truncations: u64,
    pub rounds: u64,
}

/// `floor(x / d)` on a shared `x`, computed locally.
///
/// Party 0 divides its share as an unsigned integer; party 1 divides the
/// negation of its share and negates back. The result is within one unit of
/// `x / d` unless the shares straddle the wrap point, which happens with
/// probability about `|x| / N`.
pub fn div_public(x: &ShareVector, d: u64) -> ShareVector {
    assert!(d > 0, "division by zero");
    let cfg = x.cfg();
    if x.party() == 0 {
        x.map(|v| RingElement(v.0 / d))
    } else {
        x.map(|v| cfg.neg(RingElement(cfg.neg(v).0 / d)))
    }
}

/// Fixed-point rescaling by `2^bits` (see [`div_public`] for the error model).
pub fn truncate(x: &ShareVector, bits: u32) -> ShareVector {
    if bits == 0 {
        return x.clone();
    }
    let cfg = x.cfg();
    if x.party() == 0 {
        x.map(|v| RingElement(v.0 >> bits))
    } else {
        x.map(|v| cfg.neg(RingElement(cfg.neg(v).0 >> bits)))
    }
}

/// One computing party's side of a two-party session.
pub struct MpcParty {
    ctx: PartyCtx,
    cfg: FixedPointConfig,
    pool: PartyPool,
    consumed: HashSet<u64>,
    stats: OpStats,
}

impl MpcParty {
    pub fn new(ctx: PartyCtx, cfg: FixedPointConfig, pool: PartyPool) -> Result<Self> {
        if ctx.id() > 1 {
            return Err(Error::Parameter(format!(
                "computing parties are network ids 0 and 1, got {}",
                ctx.id()
            )));
        }
        if pool.party() != ctx.id() {
            return Err(Error::Protocol(format!(
                "party {} was handed the pool of party {}",
                ctx.id(),
                pool.party()
            )));
        }
        Ok(MpcParty {
            ctx,
            cfg,
            pool,
            consumed: HashSet::new(),
            stats: OpStats::default(),
        })
    }

    pub fn party(&self) -> usize {
        self.ctx.id()
    }

    pub fn peer(&self) -> usize {
        1 - self.ctx.id()
    }

    pub fn cfg(&self) -> FixedPointConfig {
        self.cfg
    }

    pub fn ctx(&self) -> &PartyCtx {
        &self.ctx
    }

    pub fn stats(&self) -> &OpStats {
        &self.stats
    }

    pub fn pool(&self) -> &PartyPool {
        &self.pool
    }

    /// Replaces the randomness pool (e.g. at the start of a new session).
    pub fn refill(&mut self, pool: PartyPool) -> Result<()> {
        if pool.party() != self.party() {
            return Err(Error::Protocol("pool belongs to the other party".into()));
        }
        self.pool = pool;
        Ok(())
    }

    /// Charges `units` ring operations' worth of local work.
    pub fn charge(&self, units: u64) {
        self.ctx.compute(units * cost::RING_OP);
    }

    fn check_share(&self, x: &ShareVector) -> Result<()> {
        if x.party() != self.party() {
            return Err(Error::Protocol(format!(
                "party {} was handed a share of party {}",
                self.party(),
                x.party()
            )));
        }
        if x.cfg() != self.cfg {
            return Err(Error::Parameter("share uses a different ring".into()));
        }
        Ok(())
    }

    fn mark_consumed(&mut self, id: u64) -> Result<()> {
        if !self.consumed.insert(id) {
            return Err(Error::MaterialReuse { id });
        }
        Ok(())
    }

    /// Exchanges shares with the peer; both sides learn the sum.
    pub async fn open(&mut self, x: &ShareVector, kind: MessageKind) -> Result<OpenedValue> {
        self.check_share(x)?;
        let round = self.ctx.next_round();
        self.stats.rounds += 1;
        self.stats.opened_elements += x.len() as u64;
        self.ctx.send(self.peer(), kind, self.cfg.to_bytes(x.values()))?;
        let msg = self.ctx.recv(self.peer()).await?;
        if msg.kind != kind {
            return Err(Error::Protocol(format!(
                "expected {kind:?} from party {}, got {:?}",
                self.peer(),
                msg.kind
            )));
        }
        let theirs = self.cfg.from_bytes(&msg.payload)?;
        if theirs.len() != x.len() {
            return Err(Error::Protocol(format!(
                "peer opened {} elements, expected {}",
                theirs.len(),
                x.len()
            )));
        }
        let cfg = self.cfg;
        let values = x.values().iter().zip(&theirs).map(|(&a, &b)| cfg.add(a, b)).collect();
        self.charge(x.len() as u64);
        Ok(OpenedValue { values, round })
    }

    /// `x * y` (ring product, no rescaling) using the given triple.
    pub async fn beaver_mul_with(&mut self, x: &ShareVector, y: &ShareVector, t: TripleShare) -> Result<ShareVector> {
        self.check_share(x)?;
        self.check_share(y)?;
        if t.party() != self.party() {
            return Err(Error::Protocol(format!(
                "party {} was handed a triple share of party {}",
                self.party(),
                t.party()
            )));
        }
        if x.len() != y.len() || x.len() != t.len() {
            return Err(Error::Shape(format!(
                "beaver_mul operands have lengths {} and {}, triple {} covers {}",
                x.len(),
                y.len(),
                t.id,
                t.len()
            )));
        }
        self.mark_consumed(t.id)?;
        let n = x.len();
        let e_share = sharing::sub_shares(x, &t.a)?;
        let d_share = sharing::sub_shares(y, &t.b)?;
        let both = ShareVector::concat(&[&e_share, &d_share])?;
        let opened = self.open(&both, MessageKind::BeaverOpen { triple: t.id }).await?;
        let (e, d) = opened.values.split_at(n);

        let cfg = self.cfg;
        let first = self.party() == 0;
        let z: Vec<RingElement> = (0..n)
            .map(|j| {
                let mut z = cfg.add(t.c.values()[j], cfg.mul(e[j], t.b.values()[j]));
                z = cfg.add(z, cfg.mul(d[j], t.a.values()[j]));
                if first {
                    z = cfg.add(z, cfg.mul(e[j], d[j]));
                }
                z
            })
            .collect();
        self.stats.multiplications += n as u64;
        self.charge(6 * n as u64);
        Ok(ShareVector::from_parts(self.party(), z, cfg))
    }

    /// Ring product drawing the next triple from the pool.
    pub async fn mul(&mut self, x: &ShareVector, y: &ShareVector) -> Result<ShareVector> {
        let t = self.pool.take_triple(x.len())?;
        self.beaver_mul_with(x, y, t).await
    }

    /// Fixed-point product: ring product followed by truncation by `f`.
    pub async fn mul_fixed(&mut self, x: &ShareVector, y: &ShareVector) -> Result<ShareVector> {
        let z = self.mul(x, y).await?;
        Ok(self.truncate(&z))
    }

    pub fn truncate(&mut self, x: &ShareVector) -> ShareVector {
        self.truncate_by(x, self.cfg.frac_bits())
    }

    pub fn truncate_by(&mut self, x: &ShareVector, bits: u32) -> ShareVector {
        self.stats.truncations += x.len() as u64;
        self.charge(x.len() as u64);
        truncate(x, bits)
    }

    /// Shares of `1{signed(y) <= 0}` using the given key: open `y + mask`,
    /// then evaluate the key at the opened point.
    pub async fn compare_leq_zero_with(&mut self, y: &ShareVector, key: ComparisonKey) -> Result<ShareVector> {
        self.check_share(y)?;
        if key.party() != self.party() {
            return Err(Error::Protocol(format!(
                "party {} was handed a comparison key of party {}",
                self.party(),
                key.party()
            )));
        }
        if key.len() != y.len() {
            return Err(Error::Shape(format!(
                "comparison key {} covers {} elements, input has {}",
                key.id,
                key.len(),
                y.len()
            )));
        }
        self.mark_consumed(key.id)?;
        let masked = sharing::add_shares(y, &key.mask_share)?;
        let x = self.open(&masked, MessageKind::MaskedOpen { key: key.id }).await?;
        let bits = key.eval_wrapped(&x.values)?;
        self.stats.comparisons += y.len() as u64;
        self.ctx
            .compute(y.len() as u64 * 2 * self.cfg.bits() as u64 * cost::PRG_CALL);
        Ok(bits)
    }

    pub async fn compare_leq_zero(&mut self, y: &ShareVector) -> Result<ShareVector> {
        let key = self.pool.take_comparison(y.len())?;
        self.compare_leq_zero_with(y, key).await
    }

    /// Shares of `1{signed(y) > 0}`.
    pub async fn greater_than_zero(&mut self, y: &ShareVector) -> Result<ShareVector> {
        let leq = self.compare_leq_zero(y).await?;
        Ok(self.one_minus(&leq))
    }

    fn one_minus(&self, bit: &ShareVector) -> ShareVector {
        let ones = vec![RingElement::ONE; bit.len()];
        sharing::add_public(&sharing::neg_share(bit), &ones).expect("lengths match")
    }

    /// `max(0, y)`: one comparison and one bit-by-value product.
    pub async fn relu_with(&mut self, y: &ShareVector, key: ComparisonKey, t: TripleShare) -> Result<ShareVector> {
        let leq = self.compare_leq_zero_with(y, key).await?;
        let positive = self.one_minus(&leq);
        self.beaver_mul_with(&positive, y, t).await
    }

    pub async fn relu(&mut self, y: &ShareVector) -> Result<ShareVector> {
        let key = self.pool.take_comparison(y.len())?;
        let t = self.pool.take_triple(y.len())?;
        self.relu_with(y, key, t).await
    }

    /// Elementwise `max(u, v) = v + (u - v) * 1{u - v > 0}`.
    pub async fn max(&mut self, u: &ShareVector, v: &ShareVector) -> Result<ShareVector> {
        let diff = sharing::sub_shares(u, v)?;
        let gt = self.greater_than_zero(&diff).await?;
        let step = self.mul(&gt, &diff).await?;
        sharing::add_shares(v, &step)
    }

    /// Secret index of the largest entry (ties go to the lowest index),
    /// then opened with [`MessageKind::Reveal`]. The values themselves stay
    /// shared.
    pub async fn argmax_reveal(&mut self, logits: &ShareVector) -> Result<usize> {
        let idx = self.argmax_shared(logits).await?;
        let opened = self.open(&idx, MessageKind::Reveal).await?;
        let v = self.cfg.signed(opened.values[0]);
        usize::try_from(v)
            .ok()
            .filter(|&i| i < logits.len())
            .ok_or_else(|| Error::Protocol(format!("revealed class index {v} is out of range")))
    }

    /// Left-to-right tournament; a later entry replaces the running best only
    /// when strictly larger.
    pub async fn argmax_shared(&mut self, logits: &ShareVector) -> Result<ShareVector> {
        self.check_share(logits)?;
        if logits.is_empty() {
            return Err(Error::Shape("argmax of an empty vector".into()));
        }
        let cfg = self.cfg;
        let mut best = logits.slice(0..1);
        let mut idx = ShareVector::zeros(self.party(), 1, cfg);
        for j in 1..logits.len() {
            let cand = logits.slice(j..j + 1);
            let diff = sharing::sub_shares(&cand, &best)?;
            let gt = self.greater_than_zero(&diff).await?;
            let j_pub = ShareVector::from_public(self.party(), &[cfg.from_signed(j as i64)], cfg);
            let idx_diff = sharing::sub_shares(&j_pub, &idx)?;
            let sel = ShareVector::concat(&[&gt, &gt])?;
            let deltas = ShareVector::concat(&[&diff, &idx_diff])?;
            let step = self.mul(&sel, &deltas).await?;
            best = sharing::add_shares(&best, &step.slice(0..1))?;
            idx = sharing::add_shares(&idx, &step.slice(1..2))?;
        }
        Ok(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dealer::{Dealer, MaterialPlan};
    use crate::simnet::{Links, PartyProgram, Simulation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn div_public_small_values() {
        let cfg = FixedPointConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for x in [-1000i64, -7, -1, 0, 1, 9, 1000, 12345] {
            for d in [1u64, 2, 3, 7, 65536] {
                let s = sharing::share(&[cfg.from_signed(x)], 2, cfg, &mut rng).unwrap();
                let q: Vec<ShareVector> = s.iter().map(|v| div_public(v, d)).collect();
                let got = cfg.signed(sharing::reconstruct(&q).unwrap()[0]);
                let exact = x as f64 / d as f64;
                assert!((got as f64 - exact).abs() < 1.0 + 1e-9, "x={x} d={d} got={got}");
            }
        }
    }

    #[test]
    fn truncate_zero_and_product() {
        let cfg = FixedPointConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sharing::share(&[RingElement::ZERO], 2, cfg, &mut rng).unwrap();
        let t: Vec<_> = s.iter().map(|v| truncate(v, 16)).collect();
        assert!(cfg.signed(sharing::reconstruct(&t).unwrap()[0]).abs() <= 1);

        let prod = cfg.mul(cfg.encode(1.5).unwrap(), cfg.encode(2.0).unwrap());
        let s = sharing::share(&[prod], 2, cfg, &mut rng).unwrap();
        let t: Vec<_> = s.iter().map(|v| truncate(v, 16)).collect();
        let got = cfg.decode(sharing::reconstruct(&t).unwrap()[0]);
        assert!((got - 3.0).abs() <= cfg.lsb(), "{got}");
    }

    fn two_party<T: 'static>(
        cfg: FixedPointConfig,
        plan: &MaterialPlan,
        seed: u64,
        inputs: [Vec<ShareVector>; 2],
        body: fn(MpcParty, Vec<ShareVector>) -> PartyProgram<'static, T>,
    ) -> Result<Vec<T>> {
        let sim = Simulation::new(2, Links::default(), seed);
        let [p0, p1] = Dealer::new(cfg, seed).provision(plan);
        let [i0, i1] = inputs;
        let m0 = MpcParty::new(sim.context(0), cfg, p0)?;
        let m1 = MpcParty::new(sim.context(1), cfg, p1)?;
        sim.run(vec![(0, body(m0, i0)), (1, body(m1, i1))])
    }

    fn split(cfg: FixedPointConfig, v: &[RingElement], rng: &mut ChaCha8Rng) -> [ShareVector; 2] {
        let s = sharing::share(v, 2, cfg, rng).unwrap();
        [s[0].clone(), s[1].clone()]
    }

    #[test]
    fn beaver_worked_example() {
        // x=3, y=4 with a=1, b=2, c=2: e=2, d=2, z = 2 + 4 + 2 + 4 = 12.
        let cfg = FixedPointConfig::default();
        let sim = Simulation::new(2, Links::default(), 0);
        let mut dealer = Dealer::new(cfg, 0);
        let [t0, t1] = dealer
            .triple_from(vec![RingElement(1)], vec![RingElement(2)])
            .into_shares();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let [x0, x1] = split(cfg, &[RingElement(3)], &mut rng);
        let [y0, y1] = split(cfg, &[RingElement(4)], &mut rng);
        let mut m0 = MpcParty::new(sim.context(0), cfg, crate::dealer::PartyPool::new(0)).unwrap();
        let mut m1 = MpcParty::new(sim.context(1), cfg, crate::dealer::PartyPool::new(1)).unwrap();
        let out = sim
            .run(vec![
                (0, Box::pin(async move { m0.beaver_mul_with(&x0, &y0, t0).await }) as PartyProgram<_>),
                (1, Box::pin(async move { m1.beaver_mul_with(&x1, &y1, t1).await })),
            ])
            .unwrap();
        assert_eq!(sharing::reconstruct(&out).unwrap(), vec![RingElement(12)]);
        let t = sim.transcript();
        assert_eq!(t.records.len(), 2);
        // Two opened elements per product, each direction.
        assert_eq!(t.total_sent(), 2 * 2 * cfg.element_bytes() as u64);
    }

    #[test]
    fn reused_triple_is_rejected() {
        let cfg = FixedPointConfig::default();
        let mut dealer = Dealer::new(cfg, 5);
        let mut plan = MaterialPlan::default();
        plan.triple(1);
        let material = dealer.generate(&plan);
        let bytes = crate::dealer::encode_randomness(cfg, &material);
        let p = std::path::Path::new("mem");
        let (_, first) = crate::dealer::decode_randomness(&bytes, p).unwrap();
        let (_, second) = crate::dealer::decode_randomness(&bytes, p).unwrap();
        let mut all = first;
        all.extend(second);
        let [p0, p1] = crate::dealer::deal(all).unwrap();

        let sim = Simulation::new(2, Links::default(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let [x0, x1] = split(cfg, &[RingElement(3)], &mut rng);
        let mut m0 = MpcParty::new(sim.context(0), cfg, p0).unwrap();
        let mut m1 = MpcParty::new(sim.context(1), cfg, p1).unwrap();
        let err = sim
            .run(vec![
                (
                    0,
                    Box::pin(async move {
                        m0.mul(&x0, &x0).await?;
                        m0.mul(&x0, &x0).await
                    }) as PartyProgram<_>,
                ),
                (
                    1,
                    Box::pin(async move {
                        m1.mul(&x1, &x1).await?;
                        m1.mul(&x1, &x1).await
                    }),
                ),
            ])
            .unwrap_err();
        assert!(matches!(err, Error::MaterialReuse { id: 0 }), "{err}");
    }

    #[test]
    fn relu_and_max_small_cases() {
        let cfg = FixedPointConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<RingElement> = [-2.5, 2.5, 0.0, 1.0]
            .iter()
            .map(|&r| cfg.encode(r).unwrap())
            .collect();
        let mut plan = MaterialPlan::default();
        plan.comparison(4);
        plan.triple(4);
        let out = two_party(cfg, &plan, 8, split(cfg, &vals, &mut rng).map(|s| vec![s]), |mut m, i| {
            Box::pin(async move { m.relu(&i[0]).await })
        })
        .unwrap();
        let got = cfg.decode_slice(&sharing::reconstruct(&out).unwrap());
        assert_eq!(got, vec![0.0, 2.5, 0.0, 1.0]);

        let u = [cfg.encode(1.0).unwrap()];
        let v = [cfg.encode(3.0).unwrap()];
        let [u0, u1] = split(cfg, &u, &mut rng);
        let [v0, v1] = split(cfg, &v, &mut rng);
        let mut plan = MaterialPlan::default();
        plan.comparison(1);
        plan.triple(1);
        let out = two_party(cfg, &plan, 9, [vec![u0, v0], vec![u1, v1]], |mut m, i| {
            Box::pin(async move { m.max(&i[0], &i[1]).await })
        })
        .unwrap();
        assert_eq!(sharing::reconstruct(&out).unwrap(), v.to_vec());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let cfg = FixedPointConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (logits, want) in [
            (vec![0.5, 0.5, 0.5], 0usize),
            (vec![0.1, 0.9, 0.9], 1),
            (vec![-3.0, -1.0, -2.0], 1),
            (vec![1.0, -1.0, 4.0], 2),
        ] {
            let enc = cfg.encode_slice(&logits).unwrap();
            let mut plan = MaterialPlan::default();
            for _ in 1..logits.len() {
                plan.comparison(1);
                plan.triple(2);
            }
            let out = two_party(cfg, &plan, 11, split(cfg, &enc, &mut rng).map(|s| vec![s]), |mut m, i| {
                Box::pin(async move { m.argmax_reveal(&i[0]).await })
            })
            .unwrap();
            assert_eq!(out, vec![want, want], "{logits:?}");
        }
    }

    #[test]
    fn wrong_party_share_is_rejected() {
        let cfg = FixedPointConfig::default();
        let sim = Simulation::new(2, Links::default(), 0);
        let m0 = MpcParty::new(sim.context(0), cfg, crate::dealer::PartyPool::new(0)).unwrap();
        assert!(m0.check_share(&ShareVector::zeros(1, 1, cfg)).is_err());
        assert!(MpcParty::new(sim.context(1), cfg, crate::dealer::PartyPool::new(0)).is_err());
    }
}
