//! Arithmetic in the ring of integers modulo `N = 2^k` and the signed
//! fixed-point embedding of reals into it.
//!
//! Every share, mask and opened value in the crate is a [`RingElement`]. The
//! ring is always a power of two so that reduction is a bit mask and the
//! comparison keys can walk the binary expansion of a public value.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A residue in `[0, N)`. The modulus lives in [`FixedPointConfig`]; the
/// element itself is a plain `u64` so vectors of shares stay compact.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(transparent)]
pub struct RingElement(pub u64);

impl RingElement {
    pub const ZERO: RingElement = RingElement(0);
    pub const ONE: RingElement = RingElement(1);

    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }
}

impl fmt::Display for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ring width `k` (so `N = 2^k`) and the number of fractional bits `f` used
/// by the fixed-point encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawConfig", into = "RawConfig")]
pub struct FixedPointConfig {
    k: u32,
    f: u32,
    mask: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    k: u32,
    f: u32,
}

impl TryFrom<RawConfig> for FixedPointConfig {
    type Error = Error;

    fn try_from(raw: RawConfig) -> Result<Self> {
        FixedPointConfig::new(raw.k, raw.f)
    }
}

impl From<FixedPointConfig> for RawConfig {
    fn from(cfg: FixedPointConfig) -> Self {
        RawConfig { k: cfg.k, f: cfg.f }
    }
}

impl Default for FixedPointConfig {
    /// 64-bit ring with 16 fractional bits. A fixed-point product carries
    /// `2f` fractional bits before truncation, so the ring must be wide
    /// enough to hold `2f` plus the magnitude bits of both operands.
    fn default() -> Self {
        FixedPointConfig::new(64, 16).expect("default ring configuration is valid")
    }
}

impl FixedPointConfig {
    pub const MIN_BITS: u32 = 6;
    pub const MAX_BITS: u32 = 64;

    pub fn new(k: u32, f: u32) -> Result<Self> {
        if !(Self::MIN_BITS..=Self::MAX_BITS).contains(&k) {
            return Err(Error::Config(format!(
                "ring width k={k} must lie in [{}, {}]",
                Self::MIN_BITS,
                Self::MAX_BITS
            )));
        }
        if f < 2 || f + 4 > k {
            return Err(Error::Config(format!(
                "fractional bits f={f} must satisfy 2 <= f <= k - 4 (k={k})"
            )));
        }
        let mask = if k == 64 { u64::MAX } else { (1u64 << k) - 1 };
        Ok(FixedPointConfig { k, f, mask })
    }

    #[inline]
    pub fn bits(&self) -> u32 {
        self.k
    }

    #[inline]
    pub fn frac_bits(&self) -> u32 {
        self.f
    }

    /// `N = 2^k` as a `u128` (it does not fit a `u64` when `k = 64`).
    #[inline]
    pub fn modulus(&self) -> u128 {
        1u128 << self.k
    }

    /// Bytes used to put one element on the wire: `ceil(k / 8)`.
    #[inline]
    pub fn element_bytes(&self) -> usize {
        self.k.div_ceil(8) as usize
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        (self.f as f64).exp2()
    }

    /// Smallest positive fixed-point step, `2^-f`.
    #[inline]
    pub fn lsb(&self) -> f64 {
        (-(self.f as f64)).exp2()
    }

    /// Exclusive bound on the magnitude of encodable reals, `2^(k-f-1)`.
    #[inline]
    pub fn max_magnitude(&self) -> f64 {
        ((self.k - self.f - 1) as f64).exp2()
    }

    #[inline]
    pub fn reduce(&self, v: u64) -> RingElement {
        RingElement(v & self.mask)
    }

    #[inline]
    pub fn contains(&self, x: RingElement) -> bool {
        x.0 & !self.mask == 0
    }

    #[inline]
    pub fn add(&self, x: RingElement, y: RingElement) -> RingElement {
        self.reduce(x.0.wrapping_add(y.0))
    }

    #[inline]
    pub fn sub(&self, x: RingElement, y: RingElement) -> RingElement {
        self.reduce(x.0.wrapping_sub(y.0))
    }

    #[inline]
    pub fn mul(&self, x: RingElement, y: RingElement) -> RingElement {
        self.reduce(x.0.wrapping_mul(y.0))
    }

    #[inline]
    pub fn neg(&self, x: RingElement) -> RingElement {
        self.reduce(x.0.wrapping_neg())
    }

    /// Signed reading of a residue: `v` if `v < N/2`, else `v - N`.
    #[inline]
    pub fn signed(&self, x: RingElement) -> i64 {
        let shift = 64 - self.k;
        ((x.0 << shift) as i64) >> shift
    }

    /// Embeds a signed integer, reducing it modulo `N`.
    #[inline]
    pub fn from_signed(&self, v: i64) -> RingElement {
        self.reduce(v as u64)
    }

    /// Uniform element of the ring.
    #[inline]
    pub fn random<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> RingElement {
        self.reduce(rng.next_u64())
    }

    /// `round(r * 2^f) mod N`, rounding half away from zero.
    pub fn encode(&self, r: f64) -> Result<RingElement> {
        let limit = self.max_magnitude();
        if !r.is_finite() || r.abs() >= limit {
            return Err(Error::Range { value: r, limit });
        }
        let scaled = (r * self.scale()).round();
        Ok(self.from_signed(scaled as i64))
    }

    pub fn encode_slice(&self, values: &[f64]) -> Result<Vec<RingElement>> {
        values.iter().map(|&r| self.encode(r)).collect()
    }

    #[inline]
    pub fn decode(&self, x: RingElement) -> f64 {
        self.signed(x) as f64 / self.scale()
    }

    pub fn decode_slice(&self, values: &[RingElement]) -> Vec<f64> {
        values.iter().map(|&x| self.decode(x)).collect()
    }

    /// Exact fixed-point rescaling: `floor(signed(x) / 2^bits)`.
    #[inline]
    pub fn shift_right_signed(&self, x: RingElement, bits: u32) -> RingElement {
        self.from_signed(self.signed(x) >> bits)
    }

    pub fn write_element(&self, x: RingElement, out: &mut Vec<u8>) {
        out.extend_from_slice(&x.0.to_le_bytes()[..self.element_bytes()]);
    }

    pub fn read_element(&self, bytes: &[u8]) -> RingElement {
        let mut buf = [0u8; 8];
        buf[..bytes.len()].copy_from_slice(bytes);
        self.reduce(u64::from_le_bytes(buf))
    }

    pub fn to_bytes(&self, values: &[RingElement]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.element_bytes());
        for &v in values {
            self.write_element(v, &mut out);
        }
        out
    }

    pub fn from_bytes(&self, bytes: &[u8]) -> Result<Vec<RingElement>> {
        let width = self.element_bytes();
        if bytes.len() % width != 0 {
            return Err(Error::Protocol(format!(
                "payload of {} bytes is not a whole number of {width}-byte elements",
                bytes.len()
            )));
        }
        Ok(bytes.chunks_exact(width).map(|c| self.read_element(c)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: u32, f: u32) -> FixedPointConfig {
        FixedPointConfig::new(k, f).unwrap()
    }

    #[test]
    fn small_ring_add_wraps() {
        let c = cfg(6, 2);
        assert_eq!(c.add(RingElement(5), RingElement(9)), RingElement(14));
        let n4 = cfg(8, 2);
        assert_eq!(n4.add(RingElement(255), RingElement(1)), RingElement(0));
    }

    #[test]
    fn wraparound_at_every_width() {
        for k in [8, 10, 32, 63, 64] {
            let c = cfg(k, 4);
            let top = RingElement((c.modulus() - 1) as u64);
            assert_eq!(c.add(top, RingElement::ONE), RingElement::ZERO, "k={k}");
            assert_eq!(c.sub(RingElement::ZERO, RingElement::ONE), top, "k={k}");
        }
    }

    #[test]
    fn mul_small() {
        assert_eq!(cfg(32, 16).mul(RingElement(3), RingElement(4)), RingElement(12));
    }

    #[test]
    fn encode_examples() {
        let c = cfg(32, 16);
        assert_eq!(c.encode(1.5).unwrap(), RingElement(98304));
        assert_eq!(c.encode(0.0).unwrap(), RingElement(0));
        assert_eq!(c.encode(-0.25).unwrap(), RingElement((1u64 << 32) - 16384));
        assert_eq!(c.decode(RingElement(98304)), 1.5);
        assert_eq!(c.decode(RingElement((1u64 << 32) - 16384)), -0.25);
    }

    #[test]
    fn encode_negation_is_additive_inverse() {
        let c = cfg(32, 16);
        for r in [0.5, 1.0, 3.25, 1234.0078125] {
            let pos = c.encode(r).unwrap();
            let neg = c.encode(-r).unwrap();
            assert_eq!(neg.0 as u128, c.modulus() - pos.0 as u128);
        }
    }

    #[test]
    fn encode_rounds_half_away_from_zero() {
        let c = cfg(16, 2);
        assert_eq!(c.signed(c.encode(0.125).unwrap()), 1);
        assert_eq!(c.signed(c.encode(-0.125).unwrap()), -1);
        assert_eq!(c.signed(c.encode(0.375).unwrap()), 2);
        assert_eq!(c.signed(c.encode(-0.375).unwrap()), -2);
    }

    #[test]
    fn encode_rejects_overflow() {
        let c = cfg(32, 16);
        assert!(c.encode(32767.0).is_ok());
        assert!(matches!(c.encode(32768.0), Err(Error::Range { .. })));
        assert!(matches!(c.encode(-32768.0), Err(Error::Range { .. })));
        assert!(c.encode(f64::NAN).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(FixedPointConfig::new(32, 1).is_err());
        assert!(FixedPointConfig::new(32, 29).is_err());
        assert!(FixedPointConfig::new(32, 28).is_ok());
        assert!(FixedPointConfig::new(65, 16).is_err());
        assert!(FixedPointConfig::new(5, 2).is_err());
    }

    #[test]
    fn config_json_rejects_invalid() {
        let ok: FixedPointConfig = serde_json::from_str(r#"{"k":32,"f":16}"#).unwrap();
        assert_eq!(ok, cfg(32, 16));
        assert!(serde_json::from_str::<FixedPointConfig>(r#"{"k":32,"f":30}"#).is_err());
        assert!(serde_json::from_str::<FixedPointConfig>(r#"{"k":32,"f":8,"q":1}"#).is_err());
    }

    #[test]
    fn round_trip_uniform_reals() {
        use rand::{Rng, SeedableRng};
        let c = cfg(32, 16);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let r: f64 = rng.gen_range(-100.0..100.0);
            worst = worst.max((c.decode(c.encode(r).unwrap()) - r).abs());
        }
        assert!(worst <= 2f64.powi(-17), "worst round-trip error {worst}");
    }

    #[test]
    fn bytes_round_trip_odd_width() {
        let c = cfg(10, 3);
        let vals = vec![RingElement(0), RingElement(1023), RingElement(512)];
        let bytes = c.to_bytes(&vals);
        assert_eq!(bytes.len(), 6);
        assert_eq!(c.from_bytes(&bytes).unwrap(), vals);
        assert!(c.from_bytes(&bytes[..5]).is_err());
    }
}
