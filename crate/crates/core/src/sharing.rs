//! n-party additive secret sharing over `Z_N`.
//!
//! A secret vector `s` is split into `s_1, ..., s_n` with
//! `s = (s_1 + ... + s_n) mod N`. Each [`ShareVector`] is tagged with the
//! party holding it, and the local operations refuse to combine shares held
//! by different parties.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{FixedPointConfig, RingElement};

/// Index of the party that absorbs public constants in [`add_public`].
pub const CONSTANT_PARTY: usize = 0;

/// One party's additive share of a secret vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareVector {
    party: usize,
    values: Vec<RingElement>,
    cfg: FixedPointConfig,
}

impl ShareVector {
    pub fn new(party: usize, values: Vec<RingElement>, cfg: FixedPointConfig) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !cfg.contains(**v)) {
            return Err(Error::Parameter(format!(
                "share element {v} is outside Z_2^{}",
                cfg.bits()
            )));
        }
        Ok(ShareVector { party, values, cfg })
    }

    /// Share of zero (every party may hold one; they sum to zero).
    pub fn zeros(party: usize, len: usize, cfg: FixedPointConfig) -> Self {
        ShareVector {
            party,
            values: vec![RingElement::ZERO; len],
            cfg,
        }
    }

    /// Party `party`'s share of a public vector: the constant party holds the
    /// values, everyone else holds zeros.
    pub fn from_public(party: usize, public: &[RingElement], cfg: FixedPointConfig) -> Self {
        if party == CONSTANT_PARTY {
            ShareVector {
                party,
                values: public.to_vec(),
                cfg,
            }
        } else {
            Self::zeros(party, public.len(), cfg)
        }
    }

    #[inline]
    pub fn party(&self) -> usize {
        self.party
    }

    #[inline]
    pub fn values(&self) -> &[RingElement] {
        &self.values
    }

    pub fn into_values(self) -> Vec<RingElement> {
        self.values
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn cfg(&self) -> FixedPointConfig {
        self.cfg
    }

    /// Elements `range` of this share, same party.
    pub fn slice(&self, range: std::ops::Range<usize>) -> ShareVector {
        ShareVector {
            party: self.party,
            values: self.values[range].to_vec(),
            cfg: self.cfg,
        }
    }

    /// Gathers elements at `indices` (used for im2col lowering and pooling).
    pub fn gather(&self, indices: &[usize]) -> ShareVector {
        ShareVector {
            party: self.party,
            values: indices.iter().map(|&i| self.values[i]).collect(),
            cfg: self.cfg,
        }
    }

    /// Concatenates shares held by one party.
    pub fn concat(parts: &[&ShareVector]) -> Result<ShareVector> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("cannot concatenate zero shares".into()))?;
        let mut values = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            check_colocated(first, p)?;
            values.extend_from_slice(&p.values);
        }
        Ok(ShareVector {
            party: first.party,
            values,
            cfg: first.cfg,
        })
    }

    pub(crate) fn map(&self, f: impl Fn(RingElement) -> RingElement) -> ShareVector {
        ShareVector {
            party: self.party,
            values: self.values.iter().map(|&v| f(v)).collect(),
            cfg: self.cfg,
        }
    }

    pub(crate) fn from_parts(party: usize, values: Vec<RingElement>, cfg: FixedPointConfig) -> Self {
        debug_assert!(values.iter().all(|v| cfg.contains(*v)));
        ShareVector { party, values, cfg }
    }
}

fn check_colocated(a: &ShareVector, b: &ShareVector) -> Result<()> {
    if a.party != b.party {
        return Err(Error::Protocol(format!(
            "shares of party {} and party {} cannot be combined locally",
            a.party, b.party
        )));
    }
    if a.cfg != b.cfg {
        return Err(Error::Parameter("shares use different ring configurations".into()));
    }
    Ok(())
}

fn check_same_shape(a: &ShareVector, b: &ShareVector) -> Result<()> {
    check_colocated(a, b)?;
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "share lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Splits `secret` into `n` additive shares. The first `n - 1` shares are
/// uniform; the last one closes the sum.
pub fn share<R: Rng + ?Sized>(
    secret: &[RingElement],
    n: usize,
    cfg: FixedPointConfig,
    rng: &mut R,
) -> Result<Vec<ShareVector>> {
    if n < 2 {
        return Err(Error::Parameter(format!("need at least 2 parties, got {n}")));
    }
    let mut last: Vec<RingElement> = secret.iter().map(|&s| cfg.reduce(s.0)).collect();
    let mut out = Vec::with_capacity(n);
    for party in 0..n - 1 {
        let values: Vec<RingElement> = (0..secret.len()).map(|_| cfg.random(rng)).collect();
        for (acc, &v) in last.iter_mut().zip(&values) {
            *acc = cfg.sub(*acc, v);
        }
        out.push(ShareVector { party, values, cfg });
    }
    out.push(ShareVector {
        party: n - 1,
        values: last,
        cfg,
    });
    Ok(out)
}

/// Elementwise sum of all parties' shares. Every party index in `[0, n)` must
/// appear exactly once.
pub fn reconstruct(shares: &[ShareVector]) -> Result<Vec<RingElement>> {
    reconstruct_n(shares, shares.len())
}

/// Like [`reconstruct`] but checks that exactly `n` parties contributed.
pub fn reconstruct_n(shares: &[ShareVector], n: usize) -> Result<Vec<RingElement>> {
    if n < 2 {
        return Err(Error::Reconstruction(format!("need at least 2 shares, got {n}")));
    }
    if shares.len() != n {
        return Err(Error::Reconstruction(format!(
            "expected {n} shares, got {}",
            shares.len()
        )));
    }
    let mut seen = vec![false; n];
    for s in shares {
        if s.party >= n || std::mem::replace(&mut seen[s.party], true) {
            return Err(Error::Reconstruction(format!(
                "party {} is out of range or duplicated",
                s.party
            )));
        }
    }
    let first = &shares[0];
    let cfg = first.cfg;
    let mut acc = vec![RingElement::ZERO; first.len()];
    for s in shares {
        if s.len() != first.len() || s.cfg != cfg {
            return Err(Error::Reconstruction(format!(
                "share of party {} has length {} (expected {}) or a different ring",
                s.party,
                s.len(),
                first.len()
            )));
        }
        for (a, &v) in acc.iter_mut().zip(&s.values) {
            *a = cfg.add(*a, v);
        }
    }
    Ok(acc)
}

pub fn add_shares(a: &ShareVector, b: &ShareVector) -> Result<ShareVector> {
    check_same_shape(a, b)?;
    let cfg = a.cfg;
    Ok(ShareVector {
        party: a.party,
        values: a.values.iter().zip(&b.values).map(|(&x, &y)| cfg.add(x, y)).collect(),
        cfg,
    })
}

pub fn sub_shares(a: &ShareVector, b: &ShareVector) -> Result<ShareVector> {
    check_same_shape(a, b)?;
    let cfg = a.cfg;
    Ok(ShareVector {
        party: a.party,
        values: a.values.iter().zip(&b.values).map(|(&x, &y)| cfg.sub(x, y)).collect(),
        cfg,
    })
}

/// Adds a public vector: the constant party adds it, the others pass through.
pub fn add_public(a: &ShareVector, c: &[RingElement]) -> Result<ShareVector> {
    if a.len() != c.len() {
        return Err(Error::Shape(format!(
            "public vector has length {}, share has {}",
            c.len(),
            a.len()
        )));
    }
    if a.party != CONSTANT_PARTY {
        return Ok(a.clone());
    }
    let cfg = a.cfg;
    Ok(ShareVector {
        party: a.party,
        values: a.values.iter().zip(c).map(|(&x, &y)| cfg.add(x, y)).collect(),
        cfg,
    })
}

/// Every party multiplies its share by the public scalar `c`.
pub fn mul_public(a: &ShareVector, c: RingElement) -> ShareVector {
    let cfg = a.cfg;
    a.map(|x| cfg.mul(x, c))
}

/// Elementwise product with a public vector.
pub fn mul_public_vec(a: &ShareVector, c: &[RingElement]) -> Result<ShareVector> {
    if a.len() != c.len() {
        return Err(Error::Shape(format!(
            "public vector has length {}, share has {}",
            c.len(),
            a.len()
        )));
    }
    let cfg = a.cfg;
    Ok(ShareVector {
        party: a.party,
        values: a.values.iter().zip(c).map(|(&x, &y)| cfg.mul(x, y)).collect(),
        cfg,
    })
}

pub fn neg_share(a: &ShareVector) -> ShareVector {
    let cfg = a.cfg;
    a.map(|x| cfg.neg(x))
}
