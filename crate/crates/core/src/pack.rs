//! Fixed-width index streams and the binary layout of one quantized layer.
//!
//! Indices are packed LSB-first: index `i` of a `b`-bit stream occupies bits
//! `i*b .. (i+1)*b` of the little-endian byte sequence, and the last byte is
//! zero-padded.
//!
//! Layer record layout (all integers little-endian):
//!
//! ```text
//! name_len        u16
//! name            name_len bytes, UTF-8
//! d_in            u32
//! d_out           u32
//! mask_mode       u8     0 = outlier values replace quantized values
//! threshold_flags u8     bit 0: low split present, bit 1: high split present
//! threshold_low   f64    0 when absent
//! threshold_high  f64    0 when absent
//! precision_map   ceil(d_in / 4) bytes of 2-bit codes, LSB-first
//!                 (0 = fp16, 1 = 2-bit, 2 = 3-bit, 3 = 4-bit)
//! for each quantized channel, ascending:
//!   k             u8     codebook entries, 1..=2^bits
//!   centroids     k x f16, strictly ascending
//!   indices       ceil(bits * d_out / 8) bytes
//! nnz             u32
//! row_ptr         (d_in + 1) x u32
//! col_idx         nnz x u32
//! values          nnz x f16
//! recon_mse       f64
//! nominal_bits    f64
//! effective_bits  f64
//! ```

use half::f16;

use crate::allocation::{ChannelPrecision, PrecisionMap, Thresholds};
use crate::error::{Error, Result};
use crate::outlier_guard::SparseMatrixCSR;
use crate::pipeline::{LayerStats, MaskMode, QuantizedChannel, QuantizedLayer};
use crate::quantizer::ChannelCodebook;

/// A stream of `bits`-wide unsigned indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedIndices {
    bits: u8,
    len: usize,
    bytes: Vec<u8>,
}

pub fn packed_len(bits: u8, len: usize) -> usize {
    (bits as usize * len).div_ceil(8)
}

impl PackedIndices {
    pub fn pack(indices: &[u8], bits: u8) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::Domain(format!("cannot pack {bits}-bit indices")));
        }
        let limit = 1u16 << bits;
        let mut bytes = vec![0u8; packed_len(bits, indices.len())];
        let mut acc: u32 = 0;
        let mut filled = 0u32;
        let mut out = 0usize;
        for &v in indices {
            if v as u16 >= limit {
                return Err(Error::Domain(format!("index {v} does not fit in {bits} bits")));
            }
            acc |= (v as u32) << filled;
            filled += bits as u32;
            while filled >= 8 {
                bytes[out] = acc as u8;
                out += 1;
                acc >>= 8;
                filled -= 8;
            }
        }
        if filled > 0 {
            bytes[out] = acc as u8;
        }
        Ok(Self {
            bits,
            len: indices.len(),
            bytes,
        })
    }

    pub fn from_bytes(bits: u8, len: usize, bytes: Vec<u8>) -> Result<Self> {
        if !(1..=8).contains(&bits) || bytes.len() != packed_len(bits, len) {
            return Err(Error::CorruptData(format!(
                "{} bytes cannot hold {len} {bits}-bit indices",
                bytes.len()
            )));
        }
        Ok(Self { bits, len, bytes })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: usize) -> u8 {
        let bit = i * self.bits as usize;
        let byte = bit / 8;
        let shift = bit % 8;
        let lo = self.bytes[byte] as u16;
        let hi = self.bytes.get(byte + 1).copied().unwrap_or(0) as u16;
        (((lo | (hi << 8)) >> shift) & ((1u16 << self.bits) - 1)) as u8
    }

    pub fn unpack(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len);
        let mask = (1u32 << self.bits) - 1;
        let mut acc: u32 = 0;
        let mut filled = 0u32;
        let mut bytes = self.bytes.iter();
        for _ in 0..self.len {
            while filled < self.bits as u32 {
                acc |= (*bytes.next().unwrap() as u32) << filled;
                filled += 8;
            }
            out.push((acc & mask) as u8);
            acc >>= self.bits;
            filled -= self.bits as u32;
        }
        out
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f16(&mut self, v: f16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_layer(layer: &QuantizedLayer) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    let name = layer.name.as_bytes();
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::Format("layer name longer than 65535 bytes".into()))?;
    w.u16(name_len);
    w.bytes(name);
    w.u32(to_u32(layer.d_in, "d_in")?);
    w.u32(to_u32(layer.d_out, "d_out")?);
    w.u8(layer.mask as u8);
    let t = layer.precision.thresholds;
    w.u8(t.low.is_some() as u8 | (t.high.is_some() as u8) << 1);
    w.f64(t.low.unwrap_or(0.0));
    w.f64(t.high.unwrap_or(0.0));

    let codes: Vec<u8> = layer.precision.channels().iter().map(|p| p.code()).collect();
    w.bytes(PackedIndices::pack(&codes, 2)?.as_bytes());

    for ch in &layer.channels {
        w.u8(ch.codebook.len() as u8);
        for &c in ch.codebook.centroids() {
            w.f16(c);
        }
        w.bytes(ch.indices.as_bytes());
    }

    let csr = &layer.outliers;
    w.u32(to_u32(csr.nnz(), "nnz")?);
    for &p in &csr.row_ptr {
        w.u32(p);
    }
    for &c in &csr.col_idx {
        w.u32(c);
    }
    for &v in &csr.values {
        w.f16(v);
    }
    w.f64(layer.stats.recon_mse);
    w.f64(layer.stats.nominal_bits);
    w.f64(layer.stats.effective_bits);
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptData("layer record is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(overflow)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn f16s(&mut self, n: usize) -> Result<Vec<f16>> {
        let raw = self.take(n.checked_mul(2).ok_or_else(overflow)?)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]))
            .collect())
    }
}

fn overflow() -> Error {
    Error::CorruptData("layer record sizes overflow".into())
}

pub fn decode_layer(record: &[u8]) -> Result<QuantizedLayer> {
    let mut r = Reader { buf: record, pos: 0 };
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::CorruptData("layer name is not UTF-8".into()))?;
    let d_in = r.u32()? as usize;
    let d_out = r.u32()? as usize;
    let mask = MaskMode::from_u8(r.u8()?)?;
    let flags = r.u8()?;
    if flags > 3 {
        return Err(Error::CorruptData(format!("bad threshold flags {flags}")));
    }
    let low = r.f64()?;
    let high = r.f64()?;
    let thresholds = Thresholds {
        low: (flags & 1 != 0).then_some(low),
        high: (flags & 2 != 0).then_some(high),
    };

    let codes = PackedIndices::from_bytes(2, d_in, r.take(packed_len(2, d_in))?.to_vec())?;
    let channels_prec: Vec<ChannelPrecision> = codes
        .unpack()
        .into_iter()
        .map(|c| ChannelPrecision::from_code(c).expect("2-bit code"))
        .collect();
    let precision = PrecisionMap::new(channels_prec, thresholds);

    let mut channels = Vec::new();
    for (i, p) in precision.channels().iter().enumerate() {
        let Some(bits) = p.bits() else { continue };
        let k = r.u8()? as usize;
        if k == 0 || k > 1 << bits {
            return Err(Error::CorruptData(format!(
                "channel {i}: {k} centroids for a {bits}-bit channel"
            )));
        }
        let centroids = r.f16s(k)?;
        if centroids.windows(2).any(|p| !(p[0].to_f32() < p[1].to_f32())) {
            return Err(Error::CorruptData(format!("channel {i}: codebook not ascending")));
        }
        let codebook = ChannelCodebook::from_f16(centroids)?;
        let bytes = r.take(packed_len(bits, d_out))?.to_vec();
        let indices = PackedIndices::from_bytes(bits, d_out, bytes)?;
        channels.push(QuantizedChannel { codebook, indices });
    }

    let nnz = r.u32()? as usize;
    let row_ptr = r.u32s(d_in.checked_add(1).ok_or_else(overflow)?)?;
    let col_idx = r.u32s(nnz)?;
    let values = r.f16s(nnz)?;
    let outliers = SparseMatrixCSR {
        rows: d_in,
        cols: d_out,
        row_ptr,
        col_idx,
        values,
    };
    outliers.validate()?;
    let stats = LayerStats {
        recon_mse: r.f64()?,
        nominal_bits: r.f64()?,
        effective_bits: r.f64()?,
    };
    if r.pos != record.len() {
        return Err(Error::CorruptData(format!(
            "{} unexpected bytes at the end of layer record",
            record.len() - r.pos
        )));
    }
    let layer = QuantizedLayer {
        name,
        d_in,
        d_out,
        precision,
        channels,
        outliers,
        mask,
        stats,
    };
    layer.validate()?;
    Ok(layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_bit_layout() {
        // 1,2,3 -> 001 010 011 -> bits 0..9 = 0b011_010_001
        let p = PackedIndices::pack(&[1, 2, 3], 3).unwrap();
        assert_eq!(p.as_bytes(), &[0b1101_0001, 0b0000_0000]);
        assert_eq!(p.unpack(), vec![1, 2, 3]);
    }

    #[test]
    fn rejects_wide_index() {
        assert!(PackedIndices::pack(&[4], 2).is_err());
        assert!(PackedIndices::from_bytes(3, 3, vec![0]).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(bits in 1u8..=8, raw in prop::collection::vec(any::<u8>(), 0..200)) {
            let v: Vec<u8> = raw.iter().map(|x| (*x as u16 % (1u16 << bits)) as u8).collect();
            let p = PackedIndices::pack(&v, bits).unwrap();
            prop_assert_eq!(p.as_bytes().len(), packed_len(bits, v.len()));
            prop_assert_eq!(&p.unpack(), &v);
            for (i, &x) in v.iter().enumerate() {
                prop_assert_eq!(p.get(i), x);
            }
        }
    }
}
