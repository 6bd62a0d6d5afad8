//! Transcript audit: checks that the only values crossing between the
//! computing parties are masked openings and the designated final output,
//! and that no computing party ever holds more than one share of an input.

use std::collections::{BTreeMap, BTreeSet};

use crate::ring::FixedPointConfig;
use crate::simnet::{MessageKind, Transcript, TranscriptRecord};
use crate::stats::{chi_square_uniform, top_bits_histogram, ChiSquare};

/// Ids of the two computing parties; every other id is an input provider.
pub const COMPUTING: [usize; 2] = [0, 1];

fn is_computing(id: usize) -> bool {
    COMPUTING.contains(&id)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub messages: usize,
    pub input_shares: usize,
    pub beaver_opens: usize,
    pub masked_opens: usize,
    pub reveals: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn describe(r: &TranscriptRecord) -> String {
    format!("session {} round {} {}->{} {:?}", r.session, r.round, r.from, r.to, r.kind)
}

/// Scans every message. `element_bytes` is the encoded width of one ring
/// element; a reveal must carry exactly one.
pub fn audit_transcript(t: &Transcript, element_bytes: usize) -> AuditReport {
    let mut rep = AuditReport { messages: t.records.len(), ..Default::default() };
    let mut inputs: BTreeSet<(u64, usize, usize)> = BTreeSet::new();
    let mut material: BTreeSet<(bool, u64, usize)> = BTreeSet::new();
    let mut reveals: BTreeSet<(u64, usize)> = BTreeSet::new();
    for r in &t.records {
        let who = describe(r);
        match (is_computing(r.from), is_computing(r.to), r.kind) {
            (false, true, MessageKind::InputShare { owner }) => {
                rep.input_shares += 1;
                if owner != r.from {
                    rep.violations.push(format!("{who}: provider forwards a share owned by {owner}"));
                }
                if !inputs.insert((r.session, owner, r.to)) {
                    rep.violations.push(format!("{who}: party {} received a second share of {owner}'s input", r.to));
                }
            }
            (false, _, _) => rep.violations.push(format!("{who}: input providers may only send input shares to computing parties")),
            (true, false, _) => rep.violations.push(format!("{who}: computing party sends to an input provider")),
            (true, true, MessageKind::BeaverOpen { triple }) => {
                rep.beaver_opens += 1;
                if !material.insert((true, triple, r.from)) {
                    rep.violations.push(format!("{who}: triple {triple} opened twice"));
                }
            }
            (true, true, MessageKind::MaskedOpen { key }) => {
                rep.masked_opens += 1;
                if !material.insert((false, key, r.from)) {
                    rep.violations.push(format!("{who}: comparison mask {key} opened twice"));
                }
            }
            (true, true, MessageKind::Reveal) => {
                rep.reveals += 1;
                if r.bytes != element_bytes {
                    rep.violations.push(format!("{who}: reveal carries {} bytes, expected one element", r.bytes));
                }
                if !reveals.insert((r.session, r.from)) {
                    rep.violations.push(format!("{who}: more than one reveal in session {}", r.session));
                }
            }
            (true, true, kind) => rep.violations.push(format!("{who}: {kind:?} between computing parties")),
        }
    }
    // Each opening must be answered by the peer, otherwise one party learned
    // nothing and the other protocol step is missing.
    for &(beaver, id, from) in &material {
        if !material.contains(&(beaver, id, 1 - from)) {
            rep.violations.push(format!("{} {id} opened by party {from} only", if beaver { "triple" } else { "mask" }));
        }
    }
    rep
}

/// Reconstructs every masked opening from recorded payloads: the sum of the
/// two parties' messages for one triple or key. Returns the opened ring
/// values in transcript order of the first message. Needs a transcript with
/// payloads.
pub fn opened_values(t: &Transcript, cfg: FixedPointConfig) -> crate::error::Result<Vec<u64>> {
    let mut halves: BTreeMap<(bool, u64), Vec<(usize, &[u8])>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in &t.records {
        let key = match r.kind {
            MessageKind::BeaverOpen { triple } => (true, triple),
            MessageKind::MaskedOpen { key } => (false, key),
            _ => continue,
        };
        let payload = r.payload.as_deref().ok_or_else(|| {
            crate::error::Error::Parameter("transcript was recorded without payloads".into())
        })?;
        let e = halves.entry(key).or_default();
        if e.is_empty() {
            order.push(key);
        }
        e.push((r.from, payload));
    }
    let mut out = Vec::new();
    for key in order {
        let parts = &halves[&key];
        if parts.len() != 2 {
            continue;
        }
        let a = cfg.from_bytes(parts[0].1)?;
        let b = cfg.from_bytes(parts[1].1)?;
        out.extend(a.iter().zip(&b).map(|(x, y)| cfg.add(*x, *y).0));
    }
    Ok(out)
}

/// Chi-square test of the top four bits of the given `k`-bit values against
/// the uniform distribution.
pub fn uniformity(values: &[u64], cfg: FixedPointConfig) -> ChiSquare {
    chi_square_uniform(&top_bits_histogram(values.iter().copied(), cfg.bits(), 4))
}
