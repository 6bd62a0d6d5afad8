//! Distributed comparison function: a two-party function secret sharing of
//! `x -> beta * 1{x <= alpha}` over `Z_2^k`.
//!
//! Keys are built by walking a binary tree along the bits of `alpha` (most
//! significant first). Each party expands its seed with a length-tripling
//! PRG at every level; correction words keep the two parties' seeds equal off
//! the `alpha` path and accumulate `beta` on every left branch taken where
//! `alpha` goes right. Evaluation is a single root-to-leaf descent along the
//! bits of the public input.

use std::sync::OnceLock;

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{FixedPointConfig, RingElement};

/// Name recorded in transcript headers for reproducibility.
pub const PRG_NAME: &str = "aes128-mmo-fixed-key";

const FIXED_KEY: [u8; 16] = *b"smpc-fedsim-prg\x01";

fn cipher() -> &'static Aes128 {
    static CIPHER: OnceLock<Aes128> = OnceLock::new();
    CIPHER.get_or_init(|| Aes128::new(GenericArray::from_slice(&FIXED_KEY)))
}

/// Output of one PRG expansion: a (seed, value, control bit) triple for each
/// child.
struct Expansion {
    seed: [u128; 2],
    value: [u64; 2],
    bit: [bool; 2],
}

/// Matyas-Meyer-Oseas over fixed-key AES-128: `G(s)_i = AES_K(s ^ i) ^ s ^ i`
/// for `i = 0, 1, 2`.
fn expand(seed: u128) -> Expansion {
    let inputs = [seed, seed ^ 1, seed ^ 2];
    let mut blocks = inputs.map(|x| GenericArray::from(x.to_le_bytes()));
    cipher().encrypt_blocks(&mut blocks);
    let out: [u128; 3] = std::array::from_fn(|i| u128::from_le_bytes(blocks[i].into()) ^ inputs[i]);
    Expansion {
        seed: [out[0] & !1, out[1] & !1],
        bit: [out[0] & 1 == 1, out[1] & 1 == 1],
        value: [out[2] as u64, (out[2] >> 64) as u64],
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionWord {
    pub seed: u128,
    pub value: u64,
    pub bit_left: bool,
    pub bit_right: bool,
}

/// One party's half of a DCF key pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcfKey {
    pub party: u8,
    pub seed: u128,
    pub levels: Vec<CorrectionWord>,
    pub leaf: u64,
}

impl DcfKey {
    pub const LEVEL_BYTES: usize = 16 + 8 + 1;

    /// Serialized size for a `k`-bit domain.
    pub fn encoded_len(bits: u32) -> usize {
        1 + 16 + bits as usize * Self::LEVEL_BYTES + 8
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.push(self.party);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for cw in &self.levels {
            out.extend_from_slice(&cw.seed.to_le_bytes());
            out.extend_from_slice(&cw.value.to_le_bytes());
            out.push(cw.bit_left as u8 | (cw.bit_right as u8) << 1);
        }
        out.extend_from_slice(&self.leaf.to_le_bytes());
    }

    pub fn read(bytes: &[u8], bits: u32) -> Result<DcfKey> {
        if bytes.len() != Self::encoded_len(bits) {
            return Err(Error::Parameter(format!(
                "DCF key for {bits}-bit domain must be {} bytes, got {}",
                Self::encoded_len(bits),
                bytes.len()
            )));
        }
        let u128_at = |o: usize| u128::from_le_bytes(bytes[o..o + 16].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let party = bytes[0];
        if party > 1 {
            return Err(Error::Parameter(format!("DCF key party {party} is not 0 or 1")));
        }
        let seed = u128_at(1);
        let mut off = 17;
        let mut levels = Vec::with_capacity(bits as usize);
        for _ in 0..bits {
            let flags = bytes[off + 24];
            levels.push(CorrectionWord {
                seed: u128_at(off),
                value: u64_at(off + 16),
                bit_left: flags & 1 == 1,
                bit_right: flags & 2 == 2,
            });
            off += Self::LEVEL_BYTES;
        }
        Ok(DcfKey {
            party,
            seed,
            levels,
            leaf: u64_at(off),
        })
    }
}

#[inline]
fn bit_at(x: u64, level: usize, bits: u32) -> usize {
    ((x >> (bits as usize - 1 - level)) & 1) as usize
}

#[inline]
fn signed_by(cfg: &FixedPointConfig, negate: bool, v: RingElement) -> RingElement {
    if negate {
        cfg.neg(v)
    } else {
        v
    }
}

/// Key pair for `x -> beta * 1{x <= alpha}` on the `k`-bit domain of `cfg`.
pub fn gen_dcf<R: Rng + ?Sized>(
    alpha: RingElement,
    beta: RingElement,
    cfg: FixedPointConfig,
    rng: &mut R,
) -> (DcfKey, DcfKey) {
    let bits = cfg.bits();
    let root: [u128; 2] = [rng.gen::<u128>() & !1, rng.gen::<u128>() & !1];
    let mut seed = root;
    let mut ctrl = [false, true];
    let mut v_alpha = RingElement::ZERO;
    let mut levels = Vec::with_capacity(bits as usize);

    for level in 0..bits as usize {
        let e = [expand(seed[0]), expand(seed[1])];
        let keep = bit_at(alpha.0, level, bits);
        let lose = 1 - keep;
        let negate = ctrl[1];

        let s_cw = e[0].seed[lose] ^ e[1].seed[lose];
        let mut v_cw = cfg.sub(
            cfg.sub(cfg.reduce(e[1].value[lose]), cfg.reduce(e[0].value[lose])),
            v_alpha,
        );
        if lose == 0 {
            v_cw = cfg.add(v_cw, beta);
        }
        let v_cw = signed_by(&cfg, negate, v_cw);
        v_alpha = cfg.add(
            cfg.sub(v_alpha, cfg.reduce(e[1].value[keep])),
            cfg.add(cfg.reduce(e[0].value[keep]), signed_by(&cfg, negate, v_cw)),
        );

        let alpha_bit = keep == 1;
        let t_cw = [
            e[0].bit[0] ^ e[1].bit[0] ^ alpha_bit ^ true,
            e[0].bit[1] ^ e[1].bit[1] ^ alpha_bit,
        ];
        levels.push(CorrectionWord {
            seed: s_cw,
            value: v_cw.0,
            bit_left: t_cw[0],
            bit_right: t_cw[1],
        });
        for b in 0..2 {
            let old = ctrl[b];
            seed[b] = e[b].seed[keep] ^ if old { s_cw } else { 0 };
            ctrl[b] = e[b].bit[keep] ^ (old & t_cw[keep]);
        }
    }

    let leaf = cfg.add(
        cfg.sub(
            cfg.sub(cfg.reduce(seed[1] as u64), cfg.reduce(seed[0] as u64)),
            v_alpha,
        ),
        beta,
    );
    let leaf = signed_by(&cfg, ctrl[1], leaf).0;

    let make = |party: u8| DcfKey {
        party,
        seed: root[party as usize],
        levels: levels.clone(),
        leaf,
    };
    (make(0), make(1))
}

/// This party's additive share of `beta * 1{x <= alpha}` at the public point `x`.
pub fn eval_dcf(key: &DcfKey, x: RingElement, cfg: FixedPointConfig) -> RingElement {
    let bits = cfg.bits();
    debug_assert_eq!(key.levels.len(), bits as usize);
    let negate = key.party == 1;
    let mut seed = key.seed;
    let mut ctrl = key.party == 1;
    let mut acc = RingElement::ZERO;

    for (level, cw) in key.levels.iter().enumerate() {
        let mut e = expand(seed);
        if ctrl {
            e.seed[0] ^= cw.seed;
            e.seed[1] ^= cw.seed;
            e.bit[0] ^= cw.bit_left;
            e.bit[1] ^= cw.bit_right;
        }
        let dir = bit_at(x.0, level, bits);
        let mut term = cfg.reduce(e.value[dir]);
        if ctrl {
            term = cfg.add(term, RingElement(cw.value));
        }
        acc = cfg.add(acc, signed_by(&cfg, negate, term));
        seed = e.seed[dir];
        ctrl = e.bit[dir];
    }

    let mut term = cfg.reduce(seed as u64);
    if ctrl {
        term = cfg.add(term, cfg.reduce(key.leaf));
    }
    cfg.add(acc, signed_by(&cfg, negate, term))
}

/// Number of PRG expansions one evaluation costs (used by the compute model).
pub fn eval_cost(cfg: &FixedPointConfig) -> u64 {
    cfg.bits() as u64
}
