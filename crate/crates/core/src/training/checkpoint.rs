//! Binary checkpoint format.
//!
//! ```text
//! "MDDM" | u32 version | u64 len | canonical JSON config blob
//! repeated: u64 len | name | u8 dtype (0 = f32 LE) | u32 rank | rank x u64 dims | data
//! ```
//!
//! All integers are little-endian. The blob holds the run configuration,
//! the step counter and the RNG state; tensors are the parameters
//! (`param/*`) and the two AdamW moments (`adam_m/*`, `adam_v/*`).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde_json::{json, Value};

use super::{AdamState, TrainState};
use crate::backbone::ParameterSet;
use crate::config::{canonical_json, RunConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MDDM";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub state: TrainState,
}

fn rng_to_json(rng: &ChaCha8Rng) -> Value {
    json!({
        "seed": hex::encode(rng.get_seed()),
        "stream": rng.get_stream(),
        "word_pos": rng.get_word_pos().to_string(),
    })
}

fn rng_from_json(v: &Value) -> Result<ChaCha8Rng> {
    let bad = |m: &str| Error::Format(format!("rng state: {m}"));
    let seed_hex = v["seed"].as_str().ok_or_else(|| bad("missing seed"))?;
    let bytes = hex::decode(seed_hex).map_err(|_| bad("seed is not hex"))?;
    let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
    let stream = v["stream"].as_u64().ok_or_else(|| bad("missing stream"))?;
    let word_pos: u128 = v["word_pos"]
        .as_str()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing word_pos"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u64).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes a checkpoint to bytes.
pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let state = &ckpt.state;
    let blob = json!({
        "run": serde_json::to_value(&ckpt.run)?,
        "step": state.step,
        "rng": rng_to_json(&state.rng),
    });
    let blob = canonical_json(&blob);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob.as_bytes());
    let params = state.params.as_slice();
    for (prefix, data) in [
        ("param", params),
        ("adam_m", state.adam.m.as_slice()),
        ("adam_v", state.adam.v.as_slice()),
    ] {
        for spec in state.params.tensors() {
            put_tensor(
                &mut out,
                &format!("{prefix}/{}", spec.name),
                &spec.shape,
                &data[spec.range()],
            );
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Format(format!("length {n} too large")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn read_tensor(r: &mut Reader<'_>) -> Result<RawTensor> {
    let n = r.len()?;
    let name = String::from_utf8(r.take(n)?.to_vec())
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("tensor {name}: unknown dtype tag {dtype}")));
    }
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor {name}: shape overflow")))?;
    let bytes = r.take(numel.checked_mul(4).ok_or_else(|| {
        Error::Format(format!("tensor {name}: size overflow"))
    })?)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawTensor { name, shape, data })
}

/// Parses checkpoint bytes, validating every tensor against the config.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Version {
        found: "a file shorter than the magic".into(),
        expected: format!("magic {:?}", std::str::from_utf8(MAGIC).unwrap()),
    })?;
    if magic != MAGIC {
        return Err(Error::Version {
            found: format!("magic {:?}", String::from_utf8_lossy(magic)),
            expected: format!("magic {:?}", std::str::from_utf8(MAGIC).unwrap()),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: format!("version {version}"),
            expected: format!("version {VERSION}"),
        });
    }
    let blob_len = r.len()?;
    let blob: Value = serde_json::from_slice(r.take(blob_len)?)?;
    let run: RunConfig = serde_json::from_value(blob["run"].clone())?;
    run.validate()?;
    let step = blob["step"]
        .as_u64()
        .ok_or_else(|| Error::Format("missing step".into()))?;
    let rng = rng_from_json(&blob["rng"])?;

    let mut params = ParameterSet::<f32>::zeros(&run.backbone)?;
    let mut adam = AdamState::zeros(params.len());
    let specs = params.tensors().to_vec();
    for prefix in ["param", "adam_m", "adam_v"] {
        for spec in &specs {
            let t = read_tensor(&mut r)?;
            let want = format!("{prefix}/{}", spec.name);
            if t.name != want {
                return Err(Error::Format(format!(
                    "expected tensor {want}, found {}",
                    t.name
                )));
            }
            if t.shape != spec.shape {
                return Err(Error::Format(format!(
                    "tensor {want}: shape {:?} does not match config shape {:?}",
                    t.shape, spec.shape
                )));
            }
            let dst = match prefix {
                "param" => &mut params.as_mut_slice()[spec.range()],
                "adam_m" => &mut adam.m[spec.range()],
                _ => &mut adam.v[spec.range()],
            };
            dst.copy_from_slice(&t.data);
        }
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(Checkpoint {
        run,
        state: TrainState {
            params,
            adam,
            step,
            rng,
        },
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let run = RunConfig::default();
        let mut state = TrainState::new(&run.backbone, 3).unwrap();
        for (i, m) in state.adam.m.iter_mut().enumerate() {
            *m = i as f32 * 1e-3;
        }
        state.step = 17;
        Checkpoint { run, state }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = small();
        let a = write_checkpoint(&ckpt).unwrap();
        let back = read_checkpoint(&a).unwrap();
        let b = write_checkpoint(&back).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.state.step, 17);
        assert_eq!(back.state.params.as_slice(), ckpt.state.params.as_slice());
        assert_eq!(back.state.adam, ckpt.state.adam);
    }

    #[test]
    fn header_layout() {
        let bytes = write_checkpoint(&small()).unwrap();
        assert_eq!(&bytes[..4], b"MDDM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let blob: Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
        assert_eq!(blob["step"], 17);
    }

    #[test]
    fn bad_magic_is_a_version_error() {
        let mut bytes = write_checkpoint(&small()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Version { .. })));
        let mut bytes = write_checkpoint(&small()).unwrap();
        bytes[4] = 9;
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Version { .. })));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = write_checkpoint(&small()).unwrap();
        for cut in [3, 10, 100, bytes.len() - 1] {
            assert!(read_checkpoint(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(read_checkpoint(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_with_config_is_rejected() {
        let mut ckpt = small();
        let bytes = write_checkpoint(&ckpt).unwrap();
        // Same tensors, but a config that expects a wider model.
        ckpt.run.backbone.mlp_ratio = 2;
        let other = write_checkpoint(&ckpt).unwrap();
        let n_old = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let n_new = u64::from_le_bytes(other[8..16].try_into().unwrap()) as usize;
        let mut franken = other[..16 + n_new].to_vec();
        franken.extend_from_slice(&bytes[16 + n_old..]);
        assert!(matches!(read_checkpoint(&franken), Err(Error::Format(_))));
    }
}
