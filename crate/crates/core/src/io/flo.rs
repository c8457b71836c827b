//! FLO1 flow dumps: magic "FLO1", u32 width, u32 height, then `2*H*W`
//! 32-bit floats, u then v interleaved per pixel, little-endian.

use super::ByteReader;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"FLO1";

pub fn write_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&(flow.u(y, x) as f32).to_le_bytes());
            out.extend_from_slice(&(flow.v(y, x) as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_flo(bytes: &[u8]) -> Result<FlowField> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    if w == 0 || h == 0 {
        return Err(Error::format(format!("degenerate flow size {w}x{h}"), Some(4)));
    }
    let mut data = vec![0.0f64; 2 * h * w];
    for pix in 0..h * w {
        data[pix] = r.f32()? as f64;
        data[h * w + pix] = r.f32()? as f64;
    }
    r.done()?;
    FlowField::new(Tensor::from_vec(vec![2, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn flo_bitwise_roundtrip() {
        let mut rng = Rng::new(11);
        let data: Vec<f64> = (0..2 * 6 * 9).map(|_| rng.uniform(-8.0, 8.0) as f32 as f64).collect();
        let flow = FlowField::new(Tensor::from_vec(vec![2, 6, 9], data)).unwrap();
        let bytes = write_flo(&flow);
        let back = read_flo(&bytes).unwrap();
        assert_eq!(back.data.data(), flow.data.data());
        assert_eq!(write_flo(&back), bytes);
    }

    #[test]
    fn flo_truncation_is_reported() {
        let flow = FlowField::zeros(4, 4);
        let bytes = write_flo(&flow);
        assert!(read_flo(&bytes[..bytes.len() - 1]).is_err());
    }
}
