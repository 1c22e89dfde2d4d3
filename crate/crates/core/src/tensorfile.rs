//! Flat named-tensor records: the byte layout shared by model checkpoints
//! and corpus feature sidecars.
//!
//! One record is `name_len: u32 LE`, `name: utf-8`, `rank: u32 LE`,
//! `dims: u32 LE × rank`, then `f32 LE` data in row-major order. Records
//! repeat until EOF. Callers add their own magic/version framing.

use std::io::{self, Read, Write};

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

pub fn write_records<W: Write>(w: &mut W, records: &[TensorRecord]) -> io::Result<()> {
    for rec in records {
        let expected: usize = rec.dims.iter().product::<u32>() as usize;
        assert_eq!(rec.data.len(), expected, "tensor {} data/dims mismatch", rec.name);
        w.write_all(&(rec.name.len() as u32).to_le_bytes())?;
        w.write_all(rec.name.as_bytes())?;
        w.write_all(&(rec.dims.len() as u32).to_le_bytes())?;
        for &d in &rec.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for &x in &rec.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records<R: Read>(r: &mut R) -> io::Result<Vec<TensorRecord>> {
    let mut out = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        r.read_exact(&mut len4)?;
        let rank = u32::from_le_bytes(len4) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len4)?;
            dims.push(u32::from_le_bytes(len4));
        }
        let count: usize = dims.iter().product::<u32>() as usize;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut len4)?;
            data.push(f32::from_le_bytes(len4));
        }
        out.push(TensorRecord { name, dims, data });
    }
    Ok(out)
}
