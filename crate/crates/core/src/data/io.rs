//! Flat binary token files: a sequence of records, each a `u32` length
//! followed by that many `u32` ids, all little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_token_records<W: Write>(mut w: W, records: &[Vec<u32>]) -> Result<()> {
    for rec in records {
        let n = u32::try_from(rec.len())
            .map_err(|_| Error::Format(format!("record of {} ids is too long", rec.len())))?;
        w.write_all(&n.to_le_bytes())?;
        for id in rec {
            w.write_all(&id.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_token_records<R: Read>(mut r: R) -> Result<Vec<Vec<u32>>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut words = bytes.chunks(4);
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("token file length is not a multiple of 4".into()));
    }
    let mut out = Vec::new();
    while let Some(len) = words.next() {
        let n = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        let rec = (0..n)
            .map(|_| {
                words
                    .next()
                    .map(|w| u32::from_le_bytes(w.try_into().unwrap()))
                    .ok_or_else(|| Error::Format("truncated token record".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(rec);
    }
    Ok(out)
}
