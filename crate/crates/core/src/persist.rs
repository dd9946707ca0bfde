//! `GMA1` checkpoint container.
//!
//! Layout: magic `GMA1`, then chunks of `[tag: 4 bytes][len: u32 LE][payload]`,
//! then a CRC32 (u32 LE) of every preceding byte. Float payloads are
//! `[ndim: u32][dims: u32 x ndim][f32 LE data]`; MLP chunks hold four such
//! arrays (w1, b1, w2, b2) after a `u32` count.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::body::{build_procedural_body, BodyConfig, BodyParams};
use crate::decoders::{Activation, Decoders, MlpWeights};
use crate::error::{CheckpointError, Error, Result};
use crate::gma::{FeatureLayer, ModelConfig};
use crate::pipeline::{Avatar, FitMeta};

pub const MAGIC: &[u8; 4] = b"GMA1";
pub const FORMAT_VERSION: u32 = 1;

/// The persisted form of an avatar is the avatar itself.
pub type AvatarCheckpoint = Avatar;

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    body_config: BodyConfig,
    model: ModelConfig,
    canonical: BodyParams,
    n_faces: usize,
    activations: [String; 4],
    fit: FitMeta,
}

const MLP_TAGS: [&[u8; 4]; 4] = [b"W_FC", b"W_FF", b"W_TC", b"W_TS"];

fn q(v: f64) -> f64 {
    v as f32 as f64
}

impl Avatar {
    /// Copy with every stored float rounded to `f32`, i.e. exactly what a
    /// save/load round trip produces.
    pub fn quantized(&self) -> Self {
        let mut a = self.clone();
        a.features.geo.iter_mut().for_each(|v| *v = q(*v));
        a.features.tex.iter_mut().for_each(|v| *v = q(*v));
        for w in [&mut a.decoders.coarse, &mut a.decoders.fine, &mut a.decoders.color, &mut a.decoders.scale] {
            for p in w.params_mut() {
                p.iter_mut().for_each(|v| *v = q(*v));
            }
        }
        a
    }
}

fn put_array(buf: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    buf.extend((dims.len() as u32).to_le_bytes());
    for d in dims {
        buf.extend((*d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend((*v as f32).to_le_bytes());
    }
}

fn put_chunk(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend(tag);
    out.extend((payload.len() as u32).to_le_bytes());
    out.extend(payload);
}

fn mlp_payload(w: &MlpWeights) -> Vec<u8> {
    let mut p = Vec::new();
    p.extend(4u32.to_le_bytes());
    let [w1, b1, w2, b2] = w.params();
    put_array(&mut p, &[w.w1.nrows(), w.w1.ncols()], w1);
    put_array(&mut p, &[w.b1.len()], b1);
    put_array(&mut p, &[w.w2.nrows(), w.w2.ncols()], w2);
    put_array(&mut p, &[w.b2.len()], b2);
    p
}

/// Serialize to bytes. Deterministic: equal avatars give equal bytes.
pub fn to_bytes(a: &Avatar) -> Result<Vec<u8>> {
    a.check()?;
    let d = &a.decoders;
    let meta = Meta {
        format_version: FORMAT_VERSION,
        body_config: a.body_config.clone(),
        model: a.model.clone(),
        canonical: a.canonical.clone(),
        n_faces: a.features.n_faces,
        activations: [&d.coarse, &d.fine, &d.color, &d.scale].map(|w| w.activation.tag().to_string()),
        fit: a.meta.clone(),
    };
    let mut out = Vec::new();
    out.extend(MAGIC);
    put_chunk(&mut out, b"META", &serde_json::to_vec(&meta)?);
    let (n, k) = (a.features.n_faces, a.features.k);
    for (tag, data) in [(b"FGEO", &a.features.geo), (b"FTEX", &a.features.tex)] {
        let mut p = Vec::new();
        put_array(&mut p, &[n, k], data);
        put_chunk(&mut out, tag, &p);
    }
    for (tag, w) in MLP_TAGS.iter().zip([&d.coarse, &d.fine, &d.color, &d.scale]) {
        put_chunk(&mut out, tag, &mlp_payload(w));
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

pub fn save(a: &Avatar, path: &Path) -> Result<()> {
    let bytes = to_bytes(a)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Checkpoint(CheckpointError::Malformed(msg.into()))
}

fn dim_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(CheckpointError::Dimension(msg.into()))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(malformed(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn array(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let nd = self.u32()? as usize;
        if nd > 4 {
            return Err(malformed(format!("array with {nd} dimensions")));
        }
        let mut dims = Vec::with_capacity(nd);
        for _ in 0..nd {
            dims.push(self.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = self.take(count.checked_mul(4).ok_or_else(|| malformed("array too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok((dims, data))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn expect_dims(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(dim_err(format!("{what}: expected dims {want:?}, found {got:?}")));
    }
    Ok(())
}

fn read_mlp(payload: &[u8], tag: &str, input: usize, output: usize, act: Activation) -> Result<MlpWeights> {
    let mut r = Reader { buf: payload, pos: 0 };
    let count = r.u32()?;
    if count != 4 {
        return Err(malformed(format!("{tag}: expected 4 arrays, found {count}")));
    }
    let (d1, w1) = r.array()?;
    let (d2, b1) = r.array()?;
    let (d3, w2) = r.array()?;
    let (d4, b2) = r.array()?;
    if !r.done() {
        return Err(malformed(format!("{tag}: trailing bytes")));
    }
    let hidden = d1.first().copied().unwrap_or(0);
    expect_dims(&format!("{tag}.w1"), &d1, &[hidden, input])?;
    expect_dims(&format!("{tag}.b1"), &d2, &[hidden])?;
    expect_dims(&format!("{tag}.w2"), &d3, &[output, hidden])?;
    expect_dims(&format!("{tag}.b2"), &d4, &[output])?;
    Ok(MlpWeights {
        w1: Array2::from_shape_vec((hidden, input), w1).expect("dims checked"),
        b1: Array1::from_vec(b1),
        w2: Array2::from_shape_vec((output, hidden), w2).expect("dims checked"),
        b2: Array1::from_vec(b2),
        activation: act,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<Avatar> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(CheckpointError::BadMagic));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checkpoint(CheckpointError::Crc { stored, computed }));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let mut chunks: Vec<([u8; 4], &[u8])> = Vec::new();
    while !r.done() {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u32()? as usize;
        chunks.push((tag, r.take(len)?));
    }
    let find = |tag: &[u8; 4]| {
        chunks
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| *p)
            .ok_or_else(|| malformed(format!("missing chunk {}", String::from_utf8_lossy(tag))))
    };
    let meta: Meta = serde_json::from_slice(find(b"META")?).map_err(|e| malformed(format!("META: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(malformed(format!("unsupported format version {}", meta.format_version)));
    }
    meta.model.validate()?;
    meta.body_config.validate()?;
    let (n, k) = (meta.n_faces, meta.model.k);
    let body_faces = build_procedural_body(&meta.body_config)?.n_faces();
    if body_faces != n {
        return Err(dim_err(format!("META n_faces {n} but body config yields {body_faces} faces")));
    }
    let mut feats = Vec::new();
    for tag in [b"FGEO", b"FTEX"] {
        let mut fr = Reader { buf: find(tag)?, pos: 0 };
        let (dims, data) = fr.array()?;
        expect_dims(std::str::from_utf8(tag).expect("ascii"), &dims, &[n, k])?;
        feats.push(data);
    }
    let tex = feats.pop().expect("two");
    let geo = feats.pop().expect("two");
    let d_in = meta.model.decoder_input_dim();
    let n_k = meta.model.n_k;
    let outs = [meta.model.offset_mode.dim(), 3 * n_k, 3 * n_k, 2 * n_k];
    let mut mlps = Vec::new();
    for (i, tag) in MLP_TAGS.iter().enumerate() {
        let act = Activation::from_tag(&meta.activations[i])
            .ok_or_else(|| malformed(format!("unknown activation {:?}", meta.activations[i])))?;
        mlps.push(read_mlp(find(tag)?, std::str::from_utf8(*tag).expect("ascii"), d_in, outs[i], act)?);
    }
    let mut it = mlps.into_iter();
    let decoders = Decoders {
        coarse: it.next().expect("4"),
        fine: it.next().expect("4"),
        color: it.next().expect("4"),
        scale: it.next().expect("4"),
    };
    let avatar = Avatar {
        body_config: meta.body_config,
        model: meta.model,
        canonical: meta.canonical,
        features: FeatureLayer { n_faces: n, k, geo, tex },
        decoders,
        meta: meta.fit,
    };
    avatar.check().map_err(|e| dim_err(e.to_string()))?;
    Ok(avatar)
}

pub fn load(path: &Path) -> Result<Avatar> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
