//! The rank-<=4 dense tensor that carries every numeric value in the
//! toolkit: images (H, W), batches (N, C, H, W), weights, and A-line
//! volumes. Data is 64-bit, row-major.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const TNS_MAGIC: &[u8; 4] = b"TNS1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).unwrap()
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::Dim(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Interpret as NCHW, extending leading singleton axes as needed.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        let mut d = [1usize; 4];
        let off = 4 - self.shape.len();
        for (i, &s) in self.shape.iter().enumerate() {
            d[off + i] = s;
        }
        (d[0], d[1], d[2], d[3])
    }

    /// Height/width of a rank-2 image tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dim(format!(
                "expected a rank-2 image, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// FNV-1a hash over the shape and the raw bit patterns of the data.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for &d in &self.shape {
            eat(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            eat(&x.to_bits().to_le_bytes());
        }
        h
    }

    // ── .tns container ──────────────────────────────────────────────

    /// Serialize to the .tns container: magic "TNS1", u32 rank, rank x
    /// u64 dims, then little-endian f64 data in row-major order.
    pub fn to_tns_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 8 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(TNS_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_tns_bytes(bytes: &[u8]) -> Result<Tensor> {
        let fail = |m: String| Err(Error::Config(m));
        if bytes.len() < 8 {
            return fail(format!("tns container truncated at {} bytes", bytes.len()));
        }
        if &bytes[..4] != TNS_MAGIC {
            return fail(format!("bad tns magic {:?}", &bytes[..4]));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if rank == 0 || rank > 4 {
            return fail(format!("tns rank {rank} outside 1..=4"));
        }
        let header = 8 + 8 * rank;
        if bytes.len() < header {
            return fail(format!("tns container truncated in dims"));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = 8 + 8 * i;
            let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            shape.push(d as usize);
        }
        let n = check_shape(&shape)?;
        if bytes.len() != header + 8 * n {
            return fail(format!(
                "tns payload is {} bytes, shape {shape:?} needs {}",
                bytes.len() - header,
                8 * n
            ));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let off = header + 8 * i;
            data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
        }
        Tensor::from_vec(&shape, data)
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::Dim(format!("rank {} outside 1..=4", shape.len())));
    }
    let mut n = 1usize;
    for &d in shape {
        if d == 0 {
            return Err(Error::Dim(format!("zero-sized axis in shape {shape:?}")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Dim(format!("shape {shape:?} overflows usize")))?;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_length_agree() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.numel(), 24);
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 5]).is_err());
        assert!(Tensor::from_vec(&[0], vec![]).is_err());
        assert!(Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn tns_round_trip_is_bit_exact() {
        let t = Tensor::from_vec(&[2, 1, 3], vec![0.5, -1.25, 3e-300, f64::MIN_POSITIVE, 7.0, 0.0])
            .unwrap();
        let back = Tensor::from_tns_bytes(&t.to_tns_bytes()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tns_header_layout() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = t.to_tns_bytes();
        assert_eq!(&b[..4], b"TNS1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 2);
        assert_eq!(b.len(), 4 + 4 + 16 + 16);
    }

    #[test]
    fn tns_rejects_corruption() {
        let t = Tensor::zeros(&[2, 2]);
        let mut b = t.to_tns_bytes();
        b[0] = b'X';
        assert!(Tensor::from_tns_bytes(&b).is_err());
        let b = t.to_tns_bytes();
        assert!(Tensor::from_tns_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn content_hash_tracks_bits() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.data_mut()[1] = 2.0 + 2.0 * f64::EPSILON;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
