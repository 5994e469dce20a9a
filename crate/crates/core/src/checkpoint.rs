//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LOBS" | u32 version | u32 section count
//! section*: [u8; 4] tag | u64 payload length | payload | u32 CRC-32 of payload
//! ```
//!
//! Sections, in order: `SPEC` (input shape and layer table), `MASK`
//! (bit-packed masks, LSB first), `PARM` (parameter values), `CONF` (run
//! config as text), `TRCE` (stage trace as text). A parameter tensor whose
//! pruned entries are all `+0.0` is stored sparsely: only its alive values
//! are written and the zeros are restored from the mask on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{LayerSpec, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LOBS";
pub const VERSION: u32 = 1;

const DENSE: u8 = 0;
const SPARSE: u8 = 1;

/// A model plus the text artefacts of the run that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// `key = value` run config.
    pub config: String,
    /// Human-readable stage trace.
    pub trace: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaveOptions {
    /// Elide pruned zeros where that is lossless.
    pub sparse: bool,
}

impl Default for SaveOptions {
    fn default() -> Self {
        Self { sparse: true }
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            corrupt(format!(
                "{}: truncated, needed {n} bytes at offset {} of {}",
                self.what,
                self.pos,
                self.buf.len()
            ))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt(format!("{}: invalid UTF-8", self.what)))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(corrupt(format!(
                "{}: {} unexpected trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn encode_spec(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(model.input_shape().len());
    for &d in model.input_shape() {
        w.u32(d);
    }
    w.u32(model.layers().len());
    for layer in model.layers() {
        match layer {
            LayerSpec::Dense {
                name,
                inputs,
                outputs,
            } => {
                w.u8(0);
                w.str(name);
                w.u32(*inputs);
                w.u32(*outputs);
            }
            LayerSpec::Conv {
                name,
                in_channels,
                filters,
                size,
            } => {
                w.u8(1);
                w.str(name);
                w.u32(*in_channels);
                w.u32(*filters);
                w.u32(*size);
            }
            LayerSpec::MaxPool2 => w.u8(2),
            LayerSpec::Relu => w.u8(3),
            LayerSpec::Flatten => w.u8(4),
        }
    }
    w.0
}

fn decode_spec(buf: &[u8]) -> Result<(Vec<usize>, Vec<LayerSpec>)> {
    let mut r = Reader::new(buf, "layer table");
    let ndim = r.u32()?;
    let input = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let count = r.u32()?;
    let mut layers = Vec::new();
    for _ in 0..count {
        layers.push(match r.u8()? {
            0 => LayerSpec::Dense {
                name: r.str()?,
                inputs: r.u32()?,
                outputs: r.u32()?,
            },
            1 => LayerSpec::Conv {
                name: r.str()?,
                in_channels: r.u32()?,
                filters: r.u32()?,
                size: r.u32()?,
            },
            2 => LayerSpec::MaxPool2,
            3 => LayerSpec::Relu,
            4 => LayerSpec::Flatten,
            k => return Err(corrupt(format!("layer table: unknown layer kind {k}"))),
        });
    }
    r.finish()?;
    Ok((input, layers))
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
}

/// Encodes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint, opts: SaveOptions) -> Vec<u8> {
    let model = &ckpt.model;
    let mut masks = Writer(Vec::new());
    let mut params = Writer(Vec::new());
    masks.u32(model.params().len());
    params.u32(model.params().len());
    for p in model.params() {
        masks.u32(p.mask.len());
        masks.0.extend_from_slice(&p.mask.to_packed());
        let elidable = p
            .value
            .data()
            .iter()
            .enumerate()
            .all(|(i, v)| p.mask.is_alive(i) || v.to_bits() == 0);
        params.u32(p.len());
        if opts.sparse && elidable {
            params.u8(SPARSE);
            for (i, &v) in p.value.data().iter().enumerate() {
                if p.mask.is_alive(i) {
                    params.f64(v);
                }
            }
        } else {
            params.u8(DENSE);
            p.value.data().iter().for_each(|&v| params.f64(v));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&5u32.to_le_bytes());
    section(&mut out, b"SPEC", &encode_spec(model));
    section(&mut out, b"MASK", &masks.0);
    section(&mut out, b"PARM", &params.0);
    section(&mut out, b"CONF", ckpt.config.as_bytes());
    section(&mut out, b"TRCE", ckpt.trace.as_bytes());
    out
}

/// Decodes a checkpoint; any structural problem is an error and no partial
/// model is returned.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(4).map_err(|_| corrupt("file too short for a checkpoint header"))? != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(corrupt(format!(
            "unsupported format version {version} (this build reads version {VERSION})"
        )));
    }
    let count = r.u32()?;
    let mut sections: Vec<([u8; 4], &[u8])> = Vec::new();
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let name = String::from_utf8_lossy(&tag).into_owned();
        let len = usize::try_from(r.u64()?).map_err(|_| corrupt(format!("section {name}: length overflow")))?;
        let payload = r
            .take(len)
            .map_err(|_| corrupt(format!("section {name}: truncated payload of {len} bytes")))?;
        let crc = u32::from_le_bytes(
            r.take(4)
                .map_err(|_| corrupt(format!("section {name}: missing checksum")))?
                .try_into()
                .unwrap(),
        );
        if crc != crc32fast::hash(payload) {
            return Err(corrupt(format!("section {name}: checksum mismatch")));
        }
        sections.push((tag, payload));
    }
    r.finish()?;
    let get = |tag: &[u8; 4]| {
        sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| *p)
            .ok_or_else(|| corrupt(format!("missing section {}", String::from_utf8_lossy(tag))))
    };

    let (input, layers) = decode_spec(get(b"SPEC")?)?;
    let mut model = Model::new(&input, layers, 0).map_err(|e| corrupt(format!("layer table: {e}")))?;

    let mut mr = Reader::new(get(b"MASK")?, "masks");
    let mut pr = Reader::new(get(b"PARM")?, "parameters");
    let n = model.params().len();
    if mr.u32()? != n || pr.u32()? != n {
        return Err(corrupt("parameter count does not match the layer table"));
    }
    for p in model.params_mut() {
        let len = mr.u32()?;
        if len != p.len() {
            return Err(corrupt(format!("mask of {}: length {len}, expected {}", p.name, p.len())));
        }
        let mask = Mask::from_packed(mr.take(len.div_ceil(8))?, len)
            .ok_or_else(|| corrupt(format!("mask of {}: malformed bits", p.name)))?;
        if pr.u32()? != len {
            return Err(corrupt(format!("values of {}: length mismatch", p.name)));
        }
        let mut data = vec![0.0; len];
        match pr.u8()? {
            DENSE => {
                for v in &mut data {
                    *v = pr.f64()?;
                }
            }
            SPARSE => {
                for (i, v) in data.iter_mut().enumerate() {
                    if mask.is_alive(i) {
                        *v = pr.f64()?;
                    }
                }
            }
            k => return Err(corrupt(format!("values of {}: unknown encoding {k}", p.name))),
        }
        p.value = Tensor::new(p.value.shape().to_vec(), data)?;
        p.mask = mask;
    }
    mr.finish()?;
    pr.finish()?;
    let text = |tag: &[u8; 4]| -> Result<String> {
        String::from_utf8(get(tag)?.to_vec()).map_err(|_| corrupt("embedded text is not UTF-8"))
    };
    Ok(Checkpoint {
        model,
        config: text(b"CONF")?,
        trace: text(b"TRCE")?,
    })
}

pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>, opts: SaveOptions) -> Result<()> {
    std::fs::write(path, encode(ckpt, opts))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_lenet300, build_lenet5};
    use crate::prune::apply_threshold;

    fn ckpt(model: Model) -> Checkpoint {
        Checkpoint {
            model,
            config: "lr = 0.1\n".into(),
            trace: "stage,pruned\n0,12\n".into(),
        }
    }

    fn bits(m: &Model) -> Vec<u64> {
        m.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for model in [build_lenet300(7).unwrap(), build_lenet5(7).unwrap()] {
            let mut pruned = model.clone();
            apply_threshold(&mut pruned, 0.03);
            for m in [model, pruned] {
                for sparse in [false, true] {
                    let c = ckpt(m.clone());
                    let back = decode(&encode(&c, SaveOptions { sparse })).unwrap();
                    assert_eq!(bits(&back.model), bits(&m));
                    assert_eq!(back, c);
                }
            }
        }
    }

    #[test]
    fn pruned_checkpoint_is_smaller() {
        let dense = build_lenet300(1).unwrap();
        let mut pruned = dense.clone();
        let mut mags: Vec<f64> = dense.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.abs())).collect();
        mags.sort_by(f64::total_cmp);
        apply_threshold(&mut pruned, mags[mags.len() * 9 / 10]);
        assert!(pruned.pruned_count() * 10 >= pruned.param_count() * 9);
        let a = encode(&ckpt(dense), SaveOptions::default()).len();
        let b = encode(&ckpt(pruned), SaveOptions::default()).len();
        assert!(b * 5 < a, "{b} vs {a}");
    }

    #[test]
    fn negative_zero_at_pruned_slot_survives() {
        let mut m = build_lenet300(2).unwrap();
        m.params_mut()[1].mask.prune(0);
        m.params_mut()[1].value.data_mut()[0] = -0.0;
        let back = decode(&encode(&ckpt(m.clone()), SaveOptions::default())).unwrap();
        assert_eq!(bits(&back.model), bits(&m));
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = encode(&ckpt(build_lenet300(3).unwrap()), SaveOptions::default());
        for cut in [0, 3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x10;
        let msg = decode(&flipped).unwrap_err().to_string();
        assert!(msg.contains("checksum"), "{msg}");
        let mut versioned = bytes.clone();
        versioned[4] = 9;
        assert!(decode(&versioned).unwrap_err().to_string().contains("version 9"));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
    }
}
