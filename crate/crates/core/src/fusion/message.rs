//! Byte-exact V2X message: a little-endian `u32` instance count, then per
//! instance the motion row and semantic row as `f32`, the reference point
//! as three `f32`, the score as `f32`, and the class id as `u8`.

use cooptrack_numerics::Matrix;

use crate::error::{CoopError, Result};

pub const HEADER_BYTES: usize = 4;

/// Bytes per transmitted instance for feature width `d`.
pub fn instance_bytes(d: usize) -> usize {
    2 * d * 4 + 3 * 4 + 4 + 1
}

pub fn message_bytes(n: usize, d: usize) -> usize {
    HEADER_BYTES + n * instance_bytes(d)
}

/// Infrastructure instances in the infrastructure frame.
#[derive(Clone, Debug, PartialEq)]
pub struct V2xMessage {
    pub m: Matrix,
    pub s: Matrix,
    pub ref_points: Matrix,
    pub scores: Vec<f64>,
    pub classes: Vec<u8>,
}

impl V2xMessage {
    pub fn empty(d: usize) -> Self {
        Self {
            m: Matrix::zeros(0, d),
            s: Matrix::zeros(0, d),
            ref_points: Matrix::zeros(0, 3),
            scores: Vec::new(),
            classes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn d(&self) -> usize {
        self.m.cols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            m: self.m.select_rows(rows),
            s: self.s.select_rows(rows),
            ref_points: self.ref_points.select_rows(rows),
            scores: rows.iter().map(|&r| self.scores[r]).collect(),
            classes: rows.iter().map(|&r| self.classes[r]).collect(),
        }
    }

    pub fn byte_size(&self) -> usize {
        message_bytes(self.len(), self.d())
    }

    pub fn encode(&self) -> Vec<u8> {
        let d = self.d();
        let mut out = Vec::with_capacity(self.byte_size());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for i in 0..self.len() {
            let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
            self.m.row(i).iter().for_each(|&v| put(v));
            self.s.row(i).iter().for_each(|&v| put(v));
            self.ref_points.row(i).iter().for_each(|&v| put(v));
            put(self.scores[i]);
            out.push(self.classes[i]);
        }
        debug_assert_eq!(out.len(), message_bytes(self.len(), d));
        out
    }

    pub fn decode(bytes: &[u8], d: usize) -> Result<Self> {
        let bad = |m: String| CoopError::Parse {
            context: "v2x message".into(),
            message: m,
        };
        if bytes.len() < HEADER_BYTES {
            return Err(bad("truncated header".into()));
        }
        let n = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        if bytes.len() != message_bytes(n, d) {
            return Err(bad(format!("{} bytes for {n} instances of width {d}", bytes.len())));
        }
        let mut cur = Cursor { bytes, pos: HEADER_BYTES };
        let mut msg = Self::empty(d);
        for _ in 0..n {
            let m: Vec<f64> = (0..d).map(|_| cur.f32()).collect();
            let s: Vec<f64> = (0..d).map(|_| cur.f32()).collect();
            let p = [cur.f32(), cur.f32(), cur.f32()];
            msg.m.push_row(&m);
            msg.s.push_row(&s);
            msg.ref_points.push_row(&p);
            msg.scores.push(cur.f32());
            msg.classes.push(cur.u8());
        }
        Ok(msg)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn f32(&mut self) -> f64 {
        let v = f32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().expect("4 bytes"));
        self.pos += 4;
        v as f64
    }

    fn u8(&mut self) -> u8 {
        self.pos += 1;
        self.bytes[self.pos - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_instances_at_width_32() {
        assert_eq!(instance_bytes(32), 273);
        assert_eq!(10 * instance_bytes(32), 2730);
        assert_eq!(message_bytes(10, 32), 2734);
        assert_eq!(message_bytes(0, 32), HEADER_BYTES);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut msg = V2xMessage::empty(2);
        msg.m.push_row(&[0.5, -1.25]);
        msg.s.push_row(&[3.0, 0.1]);
        msg.ref_points.push_row(&[10.0, -2.5, 0.75]);
        msg.scores.push(0.875);
        msg.classes.push(2);
        let bytes = msg.encode();
        assert_eq!(bytes.len(), msg.byte_size());
        assert_eq!(&bytes[..4], &[1, 0, 0, 0]);
        let back = V2xMessage::decode(&bytes, 2).unwrap();
        assert_eq!(back.classes, vec![2]);
        assert_eq!(back.m, msg.m);
        assert!((back.s[(0, 1)] - 0.1).abs() < 1e-7);
        assert!(V2xMessage::decode(&bytes[..bytes.len() - 1], 2).is_err());
        assert_eq!(V2xMessage::decode(&V2xMessage::empty(4).encode(), 4).unwrap(), V2xMessage::empty(4));
    }
}
