//! Little-endian binary file formats. Every file is
//! `magic[4] | version u16 | body | crc32 u32`, the checksum covering all
//! preceding bytes.
//!
//! | magic  | contents                                         |
//! |--------|--------------------------------------------------|
//! | `BATW` | binarized weights with their model configuration |
//! | `BATL` | latent checkpoint (binary64 weights) for splitting |
//! | `BATX` | batch of binary16 tensors                         |
//! | `BATD` | batch of binary16 tensors with u32 labels         |
//!
//! Shared pieces:
//! - model header: `layers, d_hid, d_inter, num_head, b_act` as u32, then
//!   `model_kind` u8 and `seq_len` u32.
//! - sign matrix: `rows, cols` u32 then packed bits, row-major, LSB-first.
//! - quantizer site: `scale, inv_scale, bias` binary16, `bits` u8,
//!   `signed` u8; eight per layer in site order.
//! - layer tail: LN1 gain, LN1 bias, LN2 gain, LN2 bias (binary16 x d_hid)
//!   then the eight sites.
//! - head: flag u8; when 1, `classes` u32, weights (d_hid x classes,
//!   row-major) and biases as binary16.
//!
//! `BATW` linear: tag u8 (0 binary, 1 split). Binary: scale then signs.
//! Split: scale1, signs1, scale2, signs2, then sigma1 and sigma2 as
//! binary32 x cols.
//! `BATL` linear: split flag u8, `rows, cols` u32, binary64 row-major.

use std::path::Path;

use ndarray::Array2;

use crate::checkpoint::{LatentCheckpoint, LatentLayer, LatentLinear};
use crate::error::{Error, Result};
use crate::f16::F16;
use crate::quantize::ElasticParams;
use crate::refmodel::{ClassifierHead, EncoderWeights, LayerWeights, Linear, ModelConfig, ModelKind, QuantSites, Sample};
use crate::tensor::{BinWeight, SignMatrix, Signedness};
use crate::wtws::SplitWeight;

pub const VERSION: u16 = 1;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"BATW";
pub const LATENT_MAGIC: &[u8; 4] = b"BATL";
pub const TENSOR_MAGIC: &[u8; 4] = b"BATX";
pub const DATASET_MAGIC: &[u8; 4] = b"BATD";

struct Enc(Vec<u8>);

impl Enc {
    fn new(magic: &[u8; 4]) -> Self {
        let mut v = magic.to_vec();
        v.extend_from_slice(&VERSION.to_le_bytes());
        Enc(v)
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f16(&mut self, v: F16) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn f16s(&mut self, v: &[F16]) {
        v.iter().for_each(|&x| self.f16(x));
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.0.extend_from_slice(&crc.to_le_bytes());
        self.0
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(Error::Format(format!("file of {} bytes is too short", bytes.len())));
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let crc = crc32fast::hash(body);
        if stored != crc {
            return Err(Error::Format(format!("checksum mismatch: stored {stored:08x}, computed {crc:08x}")));
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(Dec { buf: body, pos: 6 })
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {} (need {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f16(&mut self) -> Result<F16> {
        Ok(F16::from_bits(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes"))))
    }
    fn f16s(&mut self, n: usize) -> Result<Vec<F16>> {
        let raw = self.take(n.checked_mul(2).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| F16::from_bits(u16::from_le_bytes([c[0], c[1]])))
            .collect())
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes before the checksum",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_header(e: &mut Enc, cfg: &ModelConfig) {
    for v in [cfg.layers, cfg.d_hid, cfg.d_inter, cfg.num_head, cfg.b_act as usize] {
        e.u32(v);
    }
    e.u8(cfg.model_kind.code());
    e.u32(cfg.seq_len);
}

fn get_header(d: &mut Dec) -> Result<ModelConfig> {
    let layers = d.u32()?;
    let d_hid = d.u32()?;
    let d_inter = d.u32()?;
    let num_head = d.u32()?;
    let b_act = d.u32()? as u32;
    let model_kind = ModelKind::from_code(d.u8()?)?;
    let seq_len = d.u32()?;
    let cfg = ModelConfig {
        layers,
        d_hid,
        d_inter,
        num_head,
        b_act,
        model_kind,
        seq_len,
    };
    cfg.validate().map_err(|e| Error::Format(format!("model header: {e}")))?;
    Ok(cfg)
}

fn put_signs(e: &mut Enc, s: &SignMatrix) {
    e.u32(s.rows());
    e.u32(s.cols());
    e.0.extend_from_slice(s.packed());
}

fn get_signs(d: &mut Dec) -> Result<SignMatrix> {
    let rows = d.u32()?;
    let cols = d.u32()?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("sign matrix too large".into()))?;
    SignMatrix::from_packed(rows, cols, d.take(n.div_ceil(8))?.to_vec())
}

fn put_sites(e: &mut Enc, sites: &QuantSites) {
    for p in sites.all() {
        e.f16(p.scale);
        e.f16(p.inv_scale);
        e.f16(p.bias);
        e.u8(p.bit_width as u8);
        e.u8(p.signedness.is_signed() as u8);
    }
}

fn get_sites(d: &mut Dec) -> Result<QuantSites> {
    let mut out = Vec::with_capacity(8);
    for name in QuantSites::NAMES {
        let scale = d.f16()?;
        let inv = d.f16()?;
        let bias = d.f16()?;
        let bits = d.u8()? as u32;
        let signedness = match d.u8()? {
            0 => Signedness::Unsigned,
            1 => Signedness::Signed,
            v => return Err(Error::Format(format!("site {name}: bad signedness flag {v}"))),
        };
        out.push(
            ElasticParams::with_inv_scale(scale, inv, bias, bits, signedness)
                .map_err(|e| Error::Format(format!("site {name}: {e}")))?,
        );
    }
    Ok(QuantSites::from_array(out.try_into().expect("eight sites")))
}

struct LayerTail {
    ln: [Vec<F16>; 4],
    sites: QuantSites,
}

fn put_tail(e: &mut Enc, ln: [&[F16]; 4], sites: &QuantSites) {
    for v in ln {
        e.f16s(v);
    }
    put_sites(e, sites);
}

fn get_tail(d: &mut Dec, d_hid: usize) -> Result<LayerTail> {
    let ln = [d.f16s(d_hid)?, d.f16s(d_hid)?, d.f16s(d_hid)?, d.f16s(d_hid)?];
    Ok(LayerTail {
        ln,
        sites: get_sites(d)?,
    })
}

fn put_head(e: &mut Enc, head: &Option<ClassifierHead>) {
    match head {
        None => e.u8(0),
        Some(h) => {
            e.u8(1);
            e.u32(h.classes());
            e.f16s(&h.weight.iter().copied().collect::<Vec<_>>());
            e.f16s(&h.bias);
        }
    }
}

fn get_head(d: &mut Dec, d_hid: usize) -> Result<Option<ClassifierHead>> {
    match d.u8()? {
        0 => Ok(None),
        1 => {
            let c = d.u32()?;
            let w = d.f16s(d_hid.checked_mul(c).ok_or_else(|| Error::Format("head too large".into()))?)?;
            let bias = d.f16s(c)?;
            Ok(Some(ClassifierHead {
                weight: Array2::from_shape_vec((d_hid, c), w).expect("length matches"),
                bias,
            }))
        }
        v => Err(Error::Format(format!("bad head flag {v}"))),
    }
}

fn put_bin(e: &mut Enc, w: &BinWeight) {
    e.f16(w.scale);
    put_signs(e, &w.signs);
}

fn get_bin(d: &mut Dec) -> Result<BinWeight> {
    let scale = d.f16()?;
    let signs = get_signs(d)?;
    Ok(BinWeight { signs, scale })
}

pub fn encode_weights(cfg: &ModelConfig, w: &EncoderWeights) -> Result<Vec<u8>> {
    w.check_shapes(cfg)?;
    let mut e = Enc::new(WEIGHTS_MAGIC);
    put_header(&mut e, cfg);
    for lw in &w.layers {
        for lin in lw.linears() {
            match lin {
                Linear::Binary(b) => {
                    e.u8(0);
                    put_bin(&mut e, b);
                }
                Linear::Split(s) => {
                    e.u8(1);
                    put_bin(&mut e, &s.w1);
                    put_bin(&mut e, &s.w2);
                    s.sigma1.iter().for_each(|&v| e.f32(v));
                    s.sigma2.iter().for_each(|&v| e.f32(v));
                }
            }
        }
        put_tail(&mut e, [&lw.ln1_gain, &lw.ln1_bias, &lw.ln2_gain, &lw.ln2_bias], &lw.sites);
    }
    put_head(&mut e, &w.head);
    Ok(e.finish())
}

pub fn decode_weights(bytes: &[u8]) -> Result<(ModelConfig, EncoderWeights)> {
    let mut d = Dec::open(bytes, WEIGHTS_MAGIC)?;
    let cfg = get_header(&mut d)?;
    let mut layers = Vec::with_capacity(cfg.layers.min(1024));
    for _ in 0..cfg.layers {
        let mut lins = Vec::with_capacity(6);
        for _ in 0..6 {
            let lin = match d.u8()? {
                0 => Linear::Binary(get_bin(&mut d)?),
                1 => {
                    let w1 = get_bin(&mut d)?;
                    let w2 = get_bin(&mut d)?;
                    if w1.shape() != w2.shape() {
                        return Err(Error::Format("split halves differ in shape".into()));
                    }
                    let cols = w1.shape().1;
                    let sigma1 = d.f32s(cols)?;
                    let sigma2 = d.f32s(cols)?;
                    Linear::Split(SplitWeight { w1, w2, sigma1, sigma2 })
                }
                t => return Err(Error::Format(format!("bad linear tag {t}"))),
            };
            lins.push(lin);
        }
        let tail = get_tail(&mut d, cfg.d_hid)?;
        let [ln1_gain, ln1_bias, ln2_gain, ln2_bias] = tail.ln;
        let mut it = lins.into_iter();
        let mut next = || it.next().expect("six linears");
        layers.push(LayerWeights {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            wc: next(),
            wr1: next(),
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
            sites: tail.sites,
        });
    }
    let head = get_head(&mut d, cfg.d_hid)?;
    d.end()?;
    let w = EncoderWeights { layers, head };
    w.check_shapes(&cfg).map_err(|e| Error::Format(e.to_string()))?;
    Ok((cfg, w))
}

pub fn encode_latent(ck: &LatentCheckpoint) -> Result<Vec<u8>> {
    let mut e = Enc::new(LATENT_MAGIC);
    if ck.layers.len() != ck.cfg.layers {
        return Err(Error::ShapeMismatch(format!(
            "{} layers for a {}-layer config",
            ck.layers.len(),
            ck.cfg.layers
        )));
    }
    put_header(&mut e, &ck.cfg);
    for l in &ck.layers {
        e.u32(l.linears.len());
        for lin in &l.linears {
            e.u8(lin.split as u8);
            e.u32(lin.weight.nrows());
            e.u32(lin.weight.ncols());
            lin.weight.iter().for_each(|&v| e.f64(v));
        }
        put_tail(&mut e, [&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias], &l.sites);
    }
    put_head(&mut e, &ck.head);
    Ok(e.finish())
}

pub fn decode_latent(bytes: &[u8]) -> Result<LatentCheckpoint> {
    let mut d = Dec::open(bytes, LATENT_MAGIC)?;
    let cfg = get_header(&mut d)?;
    let mut layers = Vec::with_capacity(cfg.layers.min(1024));
    for _ in 0..cfg.layers {
        let n = d.u32()?;
        let mut linears = Vec::with_capacity(n.min(16));
        for _ in 0..n {
            let split = match d.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::Format(format!("bad split flag {v}"))),
            };
            let rows = d.u32()?;
            let cols = d.u32()?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format("latent matrix too large".into()))?;
            let data = d.f64s(n)?;
            linears.push(LatentLinear {
                split,
                weight: Array2::from_shape_vec((rows, cols), data).expect("length matches"),
            });
        }
        let tail = get_tail(&mut d, cfg.d_hid)?;
        let [ln1_gain, ln1_bias, ln2_gain, ln2_bias] = tail.ln;
        layers.push(LatentLayer {
            linears,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
            sites: tail.sites,
        });
    }
    let head = get_head(&mut d, cfg.d_hid)?;
    d.end()?;
    Ok(LatentCheckpoint { cfg, layers, head })
}

fn put_tensors(e: &mut Enc, xs: &[&Array2<F16>]) -> Result<()> {
    let (rows, cols) = xs.first().map_or((0, 0), |x| x.dim());
    if let Some(x) = xs.iter().find(|x| x.dim() != (rows, cols)) {
        return Err(Error::ShapeMismatch(format!(
            "tensor {:?} in a batch of {rows}x{cols}",
            x.dim()
        )));
    }
    e.u32(xs.len());
    e.u32(rows);
    e.u32(cols);
    for x in xs {
        x.iter().for_each(|&v| e.f16(v));
    }
    Ok(())
}

fn get_tensors(d: &mut Dec) -> Result<Vec<Array2<F16>>> {
    let n = d.u32()?;
    let rows = d.u32()?;
    let cols = d.u32()?;
    let each = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("tensor too large".into()))?;
    (0..n)
        .map(|_| Ok(Array2::from_shape_vec((rows, cols), d.f16s(each)?).expect("length matches")))
        .collect()
}

pub fn encode_tensors(xs: &[Array2<F16>]) -> Result<Vec<u8>> {
    let mut e = Enc::new(TENSOR_MAGIC);
    put_tensors(&mut e, &xs.iter().collect::<Vec<_>>())?;
    Ok(e.finish())
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Array2<F16>>> {
    let mut d = Dec::open(bytes, TENSOR_MAGIC)?;
    let xs = get_tensors(&mut d)?;
    d.end()?;
    Ok(xs)
}

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut e = Enc::new(DATASET_MAGIC);
    put_tensors(&mut e, &samples.iter().map(|s| &s.x).collect::<Vec<_>>())?;
    for s in samples {
        e.u32(s.label as usize);
    }
    Ok(e.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut d = Dec::open(bytes, DATASET_MAGIC)?;
    let xs = get_tensors(&mut d)?;
    let samples = xs
        .into_iter()
        .map(|x| Ok(Sample { x, label: d.u32()? as u32 }))
        .collect::<Result<Vec<_>>>()?;
    d.end()?;
    Ok(samples)
}

/// Magic of a file on disk, for dispatching on its type.
pub fn sniff(bytes: &[u8]) -> Option<[u8; 4]> {
    bytes.get(..4).map(|m| m.try_into().expect("4 bytes"))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::random_latent_checkpoint;
    use crate::refmodel::{random_input, random_weights};
    use crate::rng::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_hid: 12,
            d_inter: 20,
            num_head: 3,
            b_act: 2,
            model_kind: ModelKind::BMT,
            seq_len: 5,
        }
    }

    #[test]
    fn weights_round_trip_byte_exact() {
        let mut rng = Rng::new(1);
        for (split, head) in [(0.0, None), (0.5, Some(3)), (1.0, Some(2))] {
            let w = random_weights(&cfg(), &mut rng, split, head).unwrap();
            let bytes = encode_weights(&cfg(), &w).unwrap();
            let (c2, w2) = decode_weights(&bytes).unwrap();
            assert_eq!((c2, &w2), (cfg(), &w));
            assert_eq!(encode_weights(&c2, &w2).unwrap(), bytes);
        }
    }

    #[test]
    fn latent_round_trip_byte_exact() {
        let mut rng = Rng::new(2);
        let ck = random_latent_checkpoint(&cfg(), &mut rng, Some(2)).unwrap();
        let bytes = encode_latent(&ck).unwrap();
        let back = decode_latent(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_latent(&back).unwrap(), bytes);
    }

    #[test]
    fn tensors_and_datasets() {
        let mut rng = Rng::new(3);
        let xs: Vec<_> = (0..3).map(|_| random_input(&cfg(), &mut rng).unwrap()).collect();
        let bytes = encode_tensors(&xs).unwrap();
        assert_eq!(decode_tensors(&bytes).unwrap(), xs);
        let samples: Vec<_> = xs.iter().cloned().zip([0, 1, 7]).map(|(x, label)| Sample { x, label }).collect();
        let bytes = encode_dataset(&samples).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), samples);
        assert_eq!(decode_tensors(&encode_tensors(&[]).unwrap()).unwrap().len(), 0);
        let ragged = [xs[0].clone(), Array2::from_elem((1, 1), F16::ONE)];
        assert!(encode_tensors(&ragged).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let mut rng = Rng::new(4);
        let w = random_weights(&cfg(), &mut rng, 0.5, None).unwrap();
        let bytes = encode_weights(&cfg(), &w).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_weights(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(decode_weights(&bad).unwrap_err().to_string().contains("checksum"));
        assert!(decode_weights(&bytes[..bytes.len() - 9]).is_err());
        assert!(decode_weights(&bytes[..3]).is_err());
        assert!(decode_tensors(&bytes).is_err());
    }
}
