//! Little-endian binary helpers shared by the checkpoint and packet formats.

use crate::error::{M2ktError, Result};
use crate::numerics::{Activation, MlpModel, Tensor};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn mlp(&mut self, m: &MlpModel) {
        let dims = m.layer_dims();
        self.u32((dims.len() - 1) as u32);
        for &d in dims {
            self.u32(d as u32);
        }
        for a in m.activations() {
            self.u8(a.code());
        }
        let params = m.params_flat();
        self.u64(params.len() as u64);
        for p in params {
            self.f64(p);
        }
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(M2ktError::Decode(format!(
                "truncated input: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// Element count read from the input, bounded by the bytes that remain.
    pub fn count(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_size) > self.remaining() {
            return Err(M2ktError::Decode(format!("count {n} exceeds remaining input")));
        }
        Ok(n)
    }

    pub fn mlp(&mut self) -> Result<MlpModel> {
        let layers = self.count(4)?;
        let dims = (0..=layers)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let acts = (0..layers)
            .map(|_| {
                let code = self.u8()?;
                Activation::from_code(code)
                    .ok_or_else(|| M2ktError::Decode(format!("unknown activation code {code}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = self.u64()? as usize;
        if n.saturating_mul(8) > self.remaining() {
            return Err(M2ktError::Decode("parameter count exceeds input".into()));
        }
        let params = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let mut model = MlpModel::zeros(&dims, &acts).map_err(|e| M2ktError::Decode(e.to_string()))?;
        model.set_params_flat(&params).map_err(|e| M2ktError::Decode(e.to_string()))?;
        if !params.iter().all(|p| p.is_finite()) {
            return Err(M2ktError::Decode("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.count(4)?;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.remaining() {
            return Err(M2ktError::Decode("tensor larger than input".into()));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::from_vec(&shape, data)
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(M2ktError::Decode(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Wraps a payload as `magic | version u16 | payload_len u64 | payload`.
pub(crate) fn frame_file(magic: &[u8; 4], version: u16, payload: &[u8]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(magic);
    w.u16(version);
    w.u64(payload.len() as u64);
    w.bytes(payload);
    w.buf
}

pub(crate) fn unframe_file<'a>(magic: &[u8; 4], version: u16, bytes: &'a [u8]) -> Result<&'a [u8]> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != magic {
        return Err(M2ktError::Decode(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.u16()?;
    if v != version {
        return Err(M2ktError::Decode(format!("unsupported version {v}")));
    }
    let len = r.u64()? as usize;
    if len != r.remaining() {
        return Err(M2ktError::Decode(format!(
            "payload length {len} but {} bytes follow",
            r.remaining()
        )));
    }
    r.take(len)
}
