//! Binary model files.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic        8 bytes  "SMPCMODL"
//! version      u16      1
//! k, f         u8, u8
//! mode         u8       0 = plaintext (encoded), 1 = shared
//! party        u8       party id for shared files, 0xFF for plaintext
//! input        u32 x 3  channels, height, width
//! layer count  u16
//! per layer:
//!   kind       u8       1 conv2d, 2 relu, 3 maxpool2, 4 avgpool2, 5 flatten, 6 dense
//!   ndims      u8
//!   dims       u32 x ndims   conv: out, in, kh, kw; dense: out, in
//!   nweights   u32, then nweights ring elements of ceil(k/8) bytes
//!   nbias      u32, then nbias ring elements
//! ```
//!
//! Plaintext files hold the fixed-point encoding of each parameter; shared
//! files hold one party's additive shares.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Layer, LayerKind, ModelParams, Shape3};
use crate::ring::{FixedPointConfig, RingElement};
use crate::secure_nn::SharedModel;

pub const MODEL_MAGIC: &[u8; 8] = b"SMPCMODL";
pub const MODEL_VERSION: u16 = 1;
const PLAIN_PARTY: u8 = 0xFF;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Plain,
    Shared { party: usize },
}

/// Layer as stored on disk: kind, dims and raw ring elements.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawLayer {
    pub kind: LayerKind,
    pub dims: Vec<u32>,
    pub weights: Vec<RingElement>,
    pub bias: Vec<RingElement>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawModel {
    pub cfg: FixedPointConfig,
    pub mode: ModelMode,
    pub input: Shape3,
    pub layers: Vec<RawLayer>,
}

pub fn encode_model_file(m: &RawModel) -> Vec<u8> {
    let cfg = m.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(cfg.bits() as u8);
    out.push(cfg.frac_bits() as u8);
    match m.mode {
        ModelMode::Plain => {
            out.push(0);
            out.push(PLAIN_PARTY);
        }
        ModelMode::Shared { party } => {
            out.push(1);
            out.push(party as u8);
        }
    }
    for d in [m.input.c, m.input.h, m.input.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(m.layers.len() as u16).to_le_bytes());
    for l in &m.layers {
        out.push(l.kind as u8);
        out.push(l.dims.len() as u8);
        for d in &l.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(l.weights.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg.to_bytes(&l.weights));
        out.extend_from_slice(&(l.bias.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg.to_bytes(&l.bias));
    }
    out
}

pub fn decode_model_file(bytes: &[u8], path: &Path) -> Result<RawModel> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::format(path, format!("truncated at byte {pos}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(8)? != MODEL_MAGIC {
        return Err(Error::format(path, "missing SMPCMODL magic"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (k, f) = (take(1)?[0], take(1)?[0]);
    let cfg = FixedPointConfig::new(k as u32, f as u32).map_err(|e| Error::format(path, e.to_string()))?;
    let (mode_byte, party) = (take(1)?[0], take(1)?[0]);
    let mode = match (mode_byte, party) {
        (0, PLAIN_PARTY) => ModelMode::Plain,
        (1, p @ (0 | 1)) => ModelMode::Shared { party: p as usize },
        _ => return Err(Error::format(path, format!("bad mode/party bytes {mode_byte}/{party}"))),
    };
    let u32s = |n: usize, take: &mut dyn FnMut(usize) -> Result<Vec<u8>>| -> Result<Vec<u32>> {
        let raw = take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let mut take_vec = |n: usize| take(n).map(|s| s.to_vec());
    let dims = u32s(3, &mut take_vec)?;
    let input = Shape3::new(dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let count = u16::from_le_bytes(take_vec(2)?.try_into().unwrap());
    let width = cfg.element_bytes();
    let mut layers = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let kind_byte = take_vec(1)?[0];
        let kind = LayerKind::from_u8(kind_byte)
            .ok_or_else(|| Error::format(path, format!("unknown layer kind {kind_byte}")))?;
        let nd = take_vec(1)?[0] as usize;
        let dims = u32s(nd, &mut take_vec)?;
        let nw = u32s(1, &mut take_vec)?[0] as usize;
        let weights = cfg.from_bytes(&take_vec(nw * width)?)?;
        let nb = u32s(1, &mut take_vec)?[0] as usize;
        let bias = cfg.from_bytes(&take_vec(nb * width)?)?;
        layers.push(RawLayer { kind, dims, weights, bias });
    }
    if take_vec(1).is_ok() {
        return Err(Error::format(path, "trailing bytes after last layer"));
    }
    Ok(RawModel { cfg, mode, input, layers })
}

fn raw_layers(model: &ModelParams, values: &[RingElement]) -> Vec<RawLayer> {
    let mut off = 0;
    model
        .layers
        .iter()
        .map(|l| {
            let (nw, nb) = l.params().map(|(w, b)| (w.len(), b.len())).unwrap_or((0, 0));
            let weights = values[off..off + nw].to_vec();
            let bias = values[off + nw..off + nw + nb].to_vec();
            off += nw + nb;
            RawLayer {
                kind: l.kind(),
                dims: l.param_dims().into_iter().map(|d| d as u32).collect(),
                weights,
                bias,
            }
        })
        .collect()
}

/// Float architecture described by raw layers, with zeroed parameters.
fn architecture(raw: &RawModel, path: &Path) -> Result<ModelParams> {
    let bad = |why: String| Error::format(path, why);
    let mut layers = Vec::with_capacity(raw.layers.len());
    for l in &raw.layers {
        let d = |i: usize| l.dims.get(i).copied().map(|v| v as usize);
        let layer = match l.kind {
            LayerKind::Conv2d => {
                let (Some(out_ch), Some(in_ch), Some(kh), Some(kw)) = (d(0), d(1), d(2), d(3)) else {
                    return Err(bad("conv layer needs 4 dims".into()));
                };
                if kh != kw {
                    return Err(bad(format!("only square kernels are supported, got {kh}x{kw}")));
                }
                Layer::Conv2d {
                    in_ch,
                    out_ch,
                    kernel: kh,
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                }
            }
            LayerKind::Dense => {
                let (Some(outputs), Some(inputs)) = (d(0), d(1)) else {
                    return Err(bad("dense layer needs 2 dims".into()));
                };
                Layer::Dense {
                    inputs,
                    outputs,
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                }
            }
            LayerKind::Relu => Layer::Relu,
            LayerKind::MaxPool2 => Layer::MaxPool2,
            LayerKind::AvgPool2 => Layer::AvgPool2,
            LayerKind::Flatten => Layer::Flatten,
        };
        if layer.params().is_none() && (!l.weights.is_empty() || !l.bias.is_empty()) {
            return Err(bad(format!("{:?} layer must not carry parameters", l.kind)));
        }
        layers.push(layer);
    }
    ModelParams::new(raw.input, layers).map_err(|e| bad(e.to_string()))
}

fn flat_values(raw: &RawModel) -> Vec<RingElement> {
    raw.layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
        .collect()
}

pub fn plain_to_raw(model: &ModelParams, cfg: FixedPointConfig) -> Result<RawModel> {
    let enc = cfg.encode_slice(&model.flatten_params())?;
    Ok(RawModel {
        cfg,
        mode: ModelMode::Plain,
        input: model.input,
        layers: raw_layers(model, &enc),
    })
}

pub fn shared_to_raw(model: &SharedModel) -> Result<RawModel> {
    let arch = model.architecture()?;
    Ok(RawModel {
        cfg: model.cfg,
        mode: ModelMode::Shared { party: model.party },
        input: model.input,
        layers: raw_layers(&arch, &model.flatten_shares()),
    })
}

pub fn raw_to_plain(raw: &RawModel, path: &Path) -> Result<ModelParams> {
    if raw.mode != ModelMode::Plain {
        return Err(Error::format(path, "expected a plaintext model file"));
    }
    let arch = architecture(raw, path)?;
    arch.with_params(&raw.cfg.decode_slice(&flat_values(raw)))
}

pub fn raw_to_shared(raw: &RawModel, path: &Path) -> Result<SharedModel> {
    let ModelMode::Shared { party } = raw.mode else {
        return Err(Error::format(path, "expected a shared model file"));
    };
    let arch = architecture(raw, path)?;
    SharedModel::from_flat_shares(&arch, party, raw.cfg, &flat_values(raw))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_raw(path: &Path) -> Result<RawModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model_file(&bytes, path)
}

pub fn write_plain_model(path: &Path, model: &ModelParams, cfg: FixedPointConfig) -> Result<()> {
    write_bytes(path, &encode_model_file(&plain_to_raw(model, cfg)?))
}

pub fn read_plain_model(path: &Path) -> Result<(FixedPointConfig, ModelParams)> {
    let raw = read_raw(path)?;
    Ok((raw.cfg, raw_to_plain(&raw, path)?))
}

pub fn write_shared_model(path: &Path, model: &SharedModel) -> Result<()> {
    write_bytes(path, &encode_model_file(&shared_to_raw(model)?))
}

pub fn read_shared_model(path: &Path) -> Result<SharedModel> {
    let raw = read_raw(path)?;
    raw_to_shared(&raw, path)
}

/// Reads both party files, checking that they form a pair.
pub fn read_shared_pair(paths: [&Path; 2]) -> Result<[SharedModel; 2]> {
    let a = read_shared_model(paths[0])?;
    let b = read_shared_model(paths[1])?;
    if a.party != 0 || b.party != 1 {
        return Err(Error::format(paths[0], "party files must hold party 0 and party 1"));
    }
    if a.cfg != b.cfg || a.input != b.input || a.layers.len() != b.layers.len() {
        return Err(Error::format(paths[1], "party files describe different models"));
    }
    Ok([a, b])
}
