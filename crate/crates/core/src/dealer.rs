//! Trusted dealer: offline generation of correlated randomness for the two
//! computing parties.
//!
//! The dealer never takes part in the online phase. It hands out Beaver
//! triples for multiplication and comparison keys for the masked sign test,
//! each stamped with a unique id so the online parties can refuse reuse.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::fss::{eval_dcf, gen_dcf, DcfKey};
use crate::ring::{FixedPointConfig, RingElement};
use crate::sharing::{self, ShareVector};

/// Number of computing parties that run the online protocols.
pub const COMPUTING_PARTIES: usize = 2;

/// One party's half of a Beaver triple batch.
#[derive(Debug, PartialEq, Eq)]
pub struct TripleShare {
    pub id: u64,
    pub a: ShareVector,
    pub b: ShareVector,
    pub c: ShareVector,
}

impl TripleShare {
    pub fn party(&self) -> usize {
        self.a.party()
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Dealer-side view of a vector of triples: `c = a * b` elementwise after
/// reconstruction.
#[derive(Debug, PartialEq, Eq)]
pub struct BeaverTriple {
    pub id: u64,
    pub shares: [TripleShare; 2],
}

impl BeaverTriple {
    pub fn len(&self) -> usize {
        self.shares[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_shares(self) -> [TripleShare; 2] {
        self.shares
    }

    /// Reconstructs `(a, b, c)` and checks the multiplicative identity.
    pub fn verify(&self) -> Result<()> {
        let [s0, s1] = &self.shares;
        let cfg = s0.a.cfg();
        let a = sharing::reconstruct(&[s0.a.clone(), s1.a.clone()])?;
        let b = sharing::reconstruct(&[s0.b.clone(), s1.b.clone()])?;
        let c = sharing::reconstruct(&[s0.c.clone(), s1.c.clone()])?;
        for (j, ((&a, &b), &c)) in a.iter().zip(&b).zip(&c).enumerate() {
            if cfg.mul(a, b) != c {
                return Err(Error::Protocol(format!(
                    "Beaver identity violated: triple {} element {j} has c != a*b",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// One party's comparison key for a vector of masked sign tests.
///
/// The dealer samples a mask `a` and gives each party an additive share of it
/// plus two DCF key halves per element, for the thresholds `a` and
/// `a - N/2 - 1`. With the opened `x = y + a`, the difference of the two DCF
/// outputs plus the shared wrap bit is a share of `1{x in (a - N/2 - 1, a]}`
/// taken cyclically, which equals `1{signed(y) <= 0}` for every `y` in the
/// ring.
#[derive(Debug, PartialEq, Eq)]
pub struct ComparisonKey {
    pub id: u64,
    pub mask_share: ShareVector,
    pub upper: Vec<DcfKey>,
    pub lower: Vec<DcfKey>,
    pub wrap_share: ShareVector,
}

impl ComparisonKey {
    pub fn party(&self) -> usize {
        self.mask_share.party()
    }

    pub fn len(&self) -> usize {
        self.mask_share.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask_share.is_empty()
    }

    pub fn cfg(&self) -> FixedPointConfig {
        self.mask_share.cfg()
    }

    /// Share of `1{x <= a}` for each element, from the threshold-`a` key only.
    pub fn eval_leq_mask(&self, x: &[RingElement]) -> Result<ShareVector> {
        self.check_len(x)?;
        let cfg = self.cfg();
        let values = self
            .upper
            .iter()
            .zip(x)
            .map(|(k, &x)| eval_dcf(k, x, cfg))
            .collect();
        Ok(ShareVector::from_parts(self.party(), values, cfg))
    }

    /// Share of `1{x in (a - N/2 - 1, a]}` (cyclic interval) for each element.
    pub fn eval_wrapped(&self, x: &[RingElement]) -> Result<ShareVector> {
        self.check_len(x)?;
        let cfg = self.cfg();
        let values = self
            .upper
            .iter()
            .zip(&self.lower)
            .zip(x)
            .zip(self.wrap_share.values())
            .map(|(((hi, lo), &x), &w)| cfg.add(cfg.sub(eval_dcf(hi, x, cfg), eval_dcf(lo, x, cfg)), w))
            .collect();
        Ok(ShareVector::from_parts(self.party(), values, cfg))
    }

    fn check_len(&self, x: &[RingElement]) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::Shape(format!(
                "comparison key {} covers {} elements, input has {}",
                self.id,
                self.len(),
                x.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct ComparisonKeyPair {
    pub id: u64,
    pub keys: [ComparisonKey; 2],
}

impl ComparisonKeyPair {
    pub fn len(&self) -> usize {
        self.keys[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_keys(self) -> [ComparisonKey; 2] {
        self.keys
    }

    pub fn mask(&self) -> Result<Vec<RingElement>> {
        sharing::reconstruct(&[self.keys[0].mask_share.clone(), self.keys[1].mask_share.clone()])
    }
}

/// Additive share of the base comparison `1{x <= alpha}` held by `party`.
pub fn fss_eval(party: usize, key: &DcfKey, x: RingElement, cfg: FixedPointConfig) -> Result<RingElement> {
    if party > 1 || key.party as usize != party {
        return Err(Error::Parameter(format!(
            "party {party} cannot evaluate a key issued to party {}",
            key.party
        )));
    }
    Ok(eval_dcf(key, x, cfg))
}

/// What an online computation will consume, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaterialRequest {
    Triple(usize),
    Comparison(usize),
}

/// Ordered list of correlated-randomness requests, produced by a dry run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaterialPlan {
    pub requests: Vec<MaterialRequest>,
}

impl MaterialPlan {
    pub fn triple(&mut self, len: usize) {
        self.requests.push(MaterialRequest::Triple(len));
    }

    pub fn comparison(&mut self, len: usize) {
        self.requests.push(MaterialRequest::Comparison(len));
    }

    pub fn extend(&mut self, other: &MaterialPlan) {
        self.requests.extend_from_slice(&other.requests);
    }

    /// Total scalar multiplications covered by triples.
    pub fn triple_elements(&self) -> usize {
        self.requests
            .iter()
            .map(|r| match r {
                MaterialRequest::Triple(n) => *n,
                _ => 0,
            })
            .sum()
    }

    pub fn comparison_elements(&self) -> usize {
        self.requests
            .iter()
            .map(|r| match r {
                MaterialRequest::Comparison(n) => *n,
                _ => 0,
            })
            .sum()
    }
}

/// A party's queue of correlated randomness. Items are handed out in the
/// order the dealer generated them and moved out on use.
#[derive(Debug)]
pub struct PartyPool {
    party: usize,
    triples: VecDeque<TripleShare>,
    comparisons: VecDeque<ComparisonKey>,
}

impl PartyPool {
    pub fn new(party: usize) -> Self {
        PartyPool {
            party,
            triples: VecDeque::new(),
            comparisons: VecDeque::new(),
        }
    }

    pub fn party(&self) -> usize {
        self.party
    }

    pub fn push_triple(&mut self, t: TripleShare) -> Result<()> {
        if t.party() != self.party {
            return Err(Error::Protocol(format!(
                "triple share of party {} offered to party {}",
                t.party(),
                self.party
            )));
        }
        self.triples.push_back(t);
        Ok(())
    }

    pub fn push_comparison(&mut self, k: ComparisonKey) -> Result<()> {
        if k.party() != self.party {
            return Err(Error::Protocol(format!(
                "comparison key of party {} offered to party {}",
                k.party(),
                self.party
            )));
        }
        self.comparisons.push_back(k);
        Ok(())
    }

    pub fn take_triple(&mut self, len: usize) -> Result<TripleShare> {
        let t = self.triples.pop_front().ok_or_else(|| {
            Error::PoolExhausted(format!("party {} needs a triple of length {len}", self.party))
        })?;
        if t.len() != len {
            return Err(Error::Shape(format!(
                "next triple {} has length {}, protocol needs {len}",
                t.id,
                t.len()
            )));
        }
        Ok(t)
    }

    pub fn take_comparison(&mut self, len: usize) -> Result<ComparisonKey> {
        let k = self.comparisons.pop_front().ok_or_else(|| {
            Error::PoolExhausted(format!(
                "party {} needs a comparison key of length {len}",
                self.party
            ))
        })?;
        if k.len() != len {
            return Err(Error::Shape(format!(
                "next comparison key {} has length {}, protocol needs {len}",
                k.id,
                k.len()
            )));
        }
        Ok(k)
    }

    pub fn remaining(&self) -> (usize, usize) {
        (self.triples.len(), self.comparisons.len())
    }
}

/// A generated item of correlated randomness (both parties' halves).
#[derive(Debug, PartialEq, Eq)]
pub enum Material {
    Triple(BeaverTriple),
    Comparison(ComparisonKeyPair),
}

impl Material {
    pub fn id(&self) -> u64 {
        match self {
            Material::Triple(t) => t.id,
            Material::Comparison(k) => k.id,
        }
    }
}

/// The trusted third party. Deterministic given its seed.
pub struct Dealer {
    cfg: FixedPointConfig,
    rng: ChaCha20Rng,
    next_id: u64,
}

impl Dealer {
    pub fn new(cfg: FixedPointConfig, seed: u64) -> Self {
        Dealer {
            cfg,
            rng: ChaCha20Rng::seed_from_u64(seed),
            next_id: 0,
        }
    }

    pub fn cfg(&self) -> FixedPointConfig {
        self.cfg
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// `count` independent triples, each covering `len` scalar products.
    pub fn gen_beaver(&mut self, count: usize, len: usize) -> Vec<BeaverTriple> {
        (0..count).map(|_| self.gen_triple(len)).collect()
    }

    pub fn gen_triple(&mut self, len: usize) -> BeaverTriple {
        let cfg = self.cfg;
        let a: Vec<RingElement> = (0..len).map(|_| cfg.random(&mut self.rng)).collect();
        let b: Vec<RingElement> = (0..len).map(|_| cfg.random(&mut self.rng)).collect();
        self.triple_from(a, b)
    }

    /// Triple with chosen `a` and `b` (tests and fault injection).
    pub fn triple_from(&mut self, a: Vec<RingElement>, b: Vec<RingElement>) -> BeaverTriple {
        let cfg = self.cfg;
        let c: Vec<RingElement> = a.iter().zip(&b).map(|(&x, &y)| cfg.mul(x, y)).collect();
        let id = self.fresh_id();
        let [a0, a1] = self.split(&a);
        let [b0, b1] = self.split(&b);
        let [c0, c1] = self.split(&c);
        BeaverTriple {
            id,
            shares: [
                TripleShare { id, a: a0, b: b0, c: c0 },
                TripleShare { id, a: a1, b: b1, c: c1 },
            ],
        }
    }

    pub fn gen_comparison_key(&mut self, len: usize) -> ComparisonKeyPair {
        let cfg = self.cfg;
        let mask: Vec<RingElement> = (0..len).map(|_| cfg.random(&mut self.rng)).collect();
        self.comparison_key_with_mask(&mask)
    }

    /// Comparison keys around a chosen mask (exhaustive tests).
    pub fn comparison_key_with_mask(&mut self, mask: &[RingElement]) -> ComparisonKeyPair {
        let cfg = self.cfg;
        let half_plus_one = cfg.reduce(((cfg.modulus() / 2) as u64).wrapping_add(1));
        let mut upper = [Vec::with_capacity(mask.len()), Vec::with_capacity(mask.len())];
        let mut lower = [Vec::with_capacity(mask.len()), Vec::with_capacity(mask.len())];
        let mut wrap = Vec::with_capacity(mask.len());
        for &a in mask {
            let lo = cfg.sub(a, half_plus_one);
            let (u0, u1) = gen_dcf(a, RingElement::ONE, cfg, &mut self.rng);
            let (l0, l1) = gen_dcf(lo, RingElement::ONE, cfg, &mut self.rng);
            upper[0].push(u0);
            upper[1].push(u1);
            lower[0].push(l0);
            lower[1].push(l1);
            wrap.push(RingElement((lo.0 > a.0) as u64));
        }
        let id = self.fresh_id();
        let [m0, m1] = self.split(mask);
        let [w0, w1] = self.split(&wrap);
        let [u0, u1] = upper;
        let [l0, l1] = lower;
        ComparisonKeyPair {
            id,
            keys: [
                ComparisonKey { id, mask_share: m0, upper: u0, lower: l0, wrap_share: w0 },
                ComparisonKey { id, mask_share: m1, upper: u1, lower: l1, wrap_share: w1 },
            ],
        }
    }

    fn split(&mut self, secret: &[RingElement]) -> [ShareVector; 2] {
        let v = sharing::share(secret, COMPUTING_PARTIES, self.cfg, &mut self.rng)
            .expect("two parties is a valid sharing");
        let mut it = v.into_iter();
        [it.next().unwrap(), it.next().unwrap()]
    }

    /// Generates everything `plan` asks for, in order.
    pub fn generate(&mut self, plan: &MaterialPlan) -> Vec<Material> {
        plan.requests
            .iter()
            .map(|r| match *r {
                MaterialRequest::Triple(n) => Material::Triple(self.gen_triple(n)),
                MaterialRequest::Comparison(n) => Material::Comparison(self.gen_comparison_key(n)),
            })
            .collect()
    }

    /// Generates material for `plan` and deals it into the two party pools.
    pub fn provision(&mut self, plan: &MaterialPlan) -> [PartyPool; 2] {
        deal(self.generate(plan)).expect("freshly generated material is well formed")
    }
}

/// Splits generated material into per-party pools, preserving order.
pub fn deal(material: Vec<Material>) -> Result<[PartyPool; 2]> {
    let mut pools = [PartyPool::new(0), PartyPool::new(1)];
    for m in material {
        match m {
            Material::Triple(t) => {
                let [s0, s1] = t.into_shares();
                pools[0].push_triple(s0)?;
                pools[1].push_triple(s1)?;
            }
            Material::Comparison(k) => {
                let [k0, k1] = k.into_keys();
                pools[0].push_comparison(k0)?;
                pools[1].push_comparison(k1)?;
            }
        }
    }
    Ok(pools)
}

pub const RANDOMNESS_MAGIC: &[u8; 8] = b"SMPCFRND";
pub const RANDOMNESS_VERSION: u16 = 1;

const KIND_TRIPLE: u8 = 1;
const KIND_COMPARISON: u8 = 2;

/// Serializes correlated randomness.
///
/// Layout (little endian): magic `SMPCFRND`, version `u16`, `k: u8`, `f: u8`,
/// record count `u64`, then per record: kind `u8` (1 triple, 2 comparison),
/// id `u64`, length `u32`, and the payload. Triples store `a0 b0 c0 a1 b1 c1`
/// as `ceil(k/8)`-byte elements. Comparison keys store `mask0 mask1 wrap0
/// wrap1` followed by `upper0 upper1 lower0 lower1` DCF keys per element.
pub fn encode_randomness(cfg: FixedPointConfig, material: &[Material]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(RANDOMNESS_MAGIC);
    out.extend_from_slice(&RANDOMNESS_VERSION.to_le_bytes());
    out.push(cfg.bits() as u8);
    out.push(cfg.frac_bits() as u8);
    out.extend_from_slice(&(material.len() as u64).to_le_bytes());
    for m in material {
        match m {
            Material::Triple(t) => {
                out.push(KIND_TRIPLE);
                out.extend_from_slice(&t.id.to_le_bytes());
                out.extend_from_slice(&(t.len() as u32).to_le_bytes());
                for s in &t.shares {
                    for v in [&s.a, &s.b, &s.c] {
                        out.extend_from_slice(&cfg.to_bytes(v.values()));
                    }
                }
            }
            Material::Comparison(k) => {
                out.push(KIND_COMPARISON);
                out.extend_from_slice(&k.id.to_le_bytes());
                out.extend_from_slice(&(k.len() as u32).to_le_bytes());
                for key in &k.keys {
                    out.extend_from_slice(&cfg.to_bytes(key.mask_share.values()));
                }
                for key in &k.keys {
                    out.extend_from_slice(&cfg.to_bytes(key.wrap_share.values()));
                }
                for j in 0..k.len() {
                    k.keys[0].upper[j].write(&mut out);
                    k.keys[1].upper[j].write(&mut out);
                    k.keys[0].lower[j].write(&mut out);
                    k.keys[1].lower[j].write(&mut out);
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn shares(&mut self, party: usize, len: usize, cfg: FixedPointConfig) -> Result<ShareVector> {
        let raw = self.take(len * cfg.element_bytes())?;
        let values = cfg.from_bytes(raw)?;
        Ok(ShareVector::from_parts(party, values, cfg))
    }

    fn dcf(&mut self, cfg: FixedPointConfig, party: u8) -> Result<DcfKey> {
        let raw = self.take(DcfKey::encoded_len(cfg.bits()))?;
        let key = DcfKey::read(raw, cfg.bits())?;
        if key.party != party {
            return Err(Error::format(self.path, "DCF key stored under the wrong party"));
        }
        Ok(key)
    }
}

pub fn decode_randomness(bytes: &[u8], path: &Path) -> Result<(FixedPointConfig, Vec<Material>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != RANDOMNESS_MAGIC {
        return Err(Error::format(path, "missing SMPCFRND magic"));
    }
    let version = r.u16()?;
    if version != RANDOMNESS_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (k, f) = (r.u8()?, r.u8()?);
    let cfg = FixedPointConfig::new(k as u32, f as u32).map_err(|e| Error::format(path, e.to_string()))?;
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let kind = r.u8()?;
        let id = r.u64()?;
        let len = r.u32()? as usize;
        match kind {
            KIND_TRIPLE => {
                let mut parts = Vec::with_capacity(2);
                for party in 0..2 {
                    let a = r.shares(party, len, cfg)?;
                    let b = r.shares(party, len, cfg)?;
                    let c = r.shares(party, len, cfg)?;
                    parts.push(TripleShare { id, a, b, c });
                }
                let s1 = parts.pop().unwrap();
                let s0 = parts.pop().unwrap();
                out.push(Material::Triple(BeaverTriple { id, shares: [s0, s1] }));
            }
            KIND_COMPARISON => {
                let m0 = r.shares(0, len, cfg)?;
                let m1 = r.shares(1, len, cfg)?;
                let w0 = r.shares(0, len, cfg)?;
                let w1 = r.shares(1, len, cfg)?;
                let mut upper = [Vec::with_capacity(len), Vec::with_capacity(len)];
                let mut lower = [Vec::with_capacity(len), Vec::with_capacity(len)];
                for _ in 0..len {
                    upper[0].push(r.dcf(cfg, 0)?);
                    upper[1].push(r.dcf(cfg, 1)?);
                    lower[0].push(r.dcf(cfg, 0)?);
                    lower[1].push(r.dcf(cfg, 1)?);
                }
                let [u0, u1] = upper;
                let [l0, l1] = lower;
                out.push(Material::Comparison(ComparisonKeyPair {
                    id,
                    keys: [
                        ComparisonKey { id, mask_share: m0, upper: u0, lower: l0, wrap_share: w0 },
                        ComparisonKey { id, mask_share: m1, upper: u1, lower: l1, wrap_share: w1 },
                    ],
                }));
            }
            other => return Err(Error::format(path, format!("unknown record kind {other}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    Ok((cfg, out))
}

pub fn write_randomness(path: &Path, cfg: FixedPointConfig, material: &[Material]) -> Result<()> {
    let bytes = encode_randomness(cfg, material);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_randomness(path: &Path) -> Result<(FixedPointConfig, Vec<Material>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_randomness(&bytes, path)
}

/// Uniform sample helper used by callers that need dealer-independent masks.
pub fn random_vector<R: Rng + ?Sized>(cfg: FixedPointConfig, len: usize, rng: &mut R) -> Vec<RingElement> {
    (0..len).map(|_| cfg.random(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg8() -> FixedPointConfig {
        FixedPointConfig::new(8, 2).unwrap()
    }

    #[test]
    fn triple_identity_small_values() {
        let cfg = FixedPointConfig::default();
        let mut d = Dealer::new(cfg, 1);
        let t = d.triple_from(vec![RingElement(1), RingElement(0)], vec![RingElement(2), RingElement(77)]);
        t.verify().unwrap();
        let [s0, s1] = &t.shares;
        let c = sharing::reconstruct(&[s0.c.clone(), s1.c.clone()]).unwrap();
        assert_eq!(c, vec![RingElement(2), RingElement(0)]);
    }

    #[test]
    fn many_triples_satisfy_identity() {
        let mut d = Dealer::new(FixedPointConfig::default(), 2);
        let triples = d.gen_beaver(100, 100);
        assert_eq!(triples.len(), 100);
        for t in &triples {
            t.verify().unwrap();
        }
        let ids: std::collections::HashSet<_> = triples.iter().map(|t| t.id).collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn wrapped_comparison_matches_sign_everywhere() {
        let cfg = cfg8();
        let mut d = Dealer::new(cfg, 3);
        let all: Vec<RingElement> = (0..256).map(RingElement).collect();
        for a in [0u64, 1, 5, 127, 128, 129, 200, 255] {
            let pair = d.comparison_key_with_mask(&vec![RingElement(a); 256]);
            let xs: Vec<RingElement> = all.iter().map(|&y| cfg.add(y, RingElement(a))).collect();
            let s0 = pair.keys[0].eval_wrapped(&xs).unwrap();
            let s1 = pair.keys[1].eval_wrapped(&xs).unwrap();
            let out = sharing::reconstruct(&[s0, s1]).unwrap();
            for (y, bit) in all.iter().zip(out) {
                assert_eq!(bit.0, (cfg.signed(*y) <= 0) as u64, "a={a} y={}", y.0);
            }
        }
    }

    #[test]
    fn same_seed_same_keys() {
        let cfg = cfg8();
        let a = Dealer::new(cfg, 99).gen_comparison_key(4);
        let b = Dealer::new(cfg, 99).gen_comparison_key(4);
        assert_eq!(a, b);
        let c = Dealer::new(cfg, 100).gen_comparison_key(4);
        assert_ne!(a, c);
    }

    #[test]
    fn fss_eval_checks_party() {
        let cfg = cfg8();
        let mut d = Dealer::new(cfg, 4);
        let pair = d.gen_comparison_key(1);
        let k0 = &pair.keys[0].upper[0];
        assert!(fss_eval(0, k0, RingElement(3), cfg).is_ok());
        assert!(fss_eval(1, k0, RingElement(3), cfg).is_err());
        assert!(fss_eval(2, k0, RingElement(3), cfg).is_err());
    }

    #[test]
    fn pool_order_and_exhaustion() {
        let cfg = FixedPointConfig::default();
        let mut d = Dealer::new(cfg, 5);
        let mut plan = MaterialPlan::default();
        plan.triple(3);
        plan.comparison(2);
        let [mut p0, mut p1] = d.provision(&plan);
        assert!(matches!(p0.take_triple(4), Err(Error::Shape(_))));
        assert!(p1.take_triple(3).is_ok());
        assert!(p1.take_comparison(2).is_ok());
        assert!(matches!(p1.take_triple(3), Err(Error::PoolExhausted(_))));
        assert_eq!(plan.triple_elements(), 3);
        assert_eq!(plan.comparison_elements(), 2);
    }

    #[test]
    fn randomness_file_round_trip_and_corruption() {
        let cfg = FixedPointConfig::new(32, 12).unwrap();
        let mut d = Dealer::new(cfg, 6);
        let mut plan = MaterialPlan::default();
        plan.triple(5);
        plan.comparison(3);
        plan.triple(1);
        let material = d.generate(&plan);
        let bytes = encode_randomness(cfg, &material);
        let path = Path::new("mem");
        let (cfg2, back) = decode_randomness(&bytes, path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, material);

        assert!(decode_randomness(&bytes[..bytes.len() - 1], path).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_randomness(&bad, path).is_err());

        // Flip a byte inside the first triple's c0 share.
        let mut flipped = bytes.clone();
        let header = 8 + 2 + 2 + 8 + 1 + 8 + 4;
        flipped[header + 2 * 5 * 4] ^= 1;
        let (_, back) = decode_randomness(&flipped, path).unwrap();
        match &back[0] {
            Material::Triple(t) => assert!(t.verify().is_err()),
            _ => unreachable!(),
        }
    }
}
