//! Binary checkpoint container, all integers little-endian:
//!
//! ```text
//! "AUSEG" 0x01
//! u32 config length, config text (UTF-8)
//! per parameter: u32 name length, name, u32 rank, u32 extent × rank, f64 × numel
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use auseg::model::UnetModel;
use auseg::Tensor;

use crate::config::RunConfig;
use crate::error::CliError;

pub const MAGIC: &[u8; 6] = b"AUSEG\x01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration the parameters were produced under.
    pub config: String,
    pub params: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, model: &UnetModel) -> Self {
        Checkpoint {
            config: config.resolved(),
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.detached()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, self.config.len());
        out.extend_from_slice(self.config.as_bytes());
        for (name, t) in &self.params {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Decodes and verifies a checkpoint; the error text describes the defect.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(format!("file is only {} bytes", bytes.len()));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err("bad magic; not an auseg v1 checkpoint".into());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let n = r.u32()?;
        let config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| "config echo is not UTF-8".to_string())?;
        let mut params = Vec::new();
        while r.pos < body.len() {
            let n = r.u32()?;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| format!("parameter name at byte {} is not UTF-8", r.pos - n))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| format!("parameter {name} has implausible shape {shape:?}"))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| format!("parameter {name}: {e}"))?;
            params.push((name, t));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()).map_err(|e| auseg::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| auseg::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes).map_err(|message| CliError::Corrupt {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Rebuilds the model described by the embedded config.
    pub fn restore(&self, path: &Path) -> Result<(RunConfig, UnetModel), CliError> {
        let corrupt = |message: String| CliError::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        let cfg = RunConfig::parse(&self.config).map_err(|e| corrupt(format!("embedded config: {e}")))?;
        let mut model =
            auseg::train::init_model(&cfg.model, 0).map_err(|e| corrupt(format!("embedded config: {e}")))?;
        model
            .load_params(self.params.clone())
            .map_err(|e| corrupt(e.to_string()))?;
        Ok((cfg, model))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated: need {n} bytes at offset {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "epochs = 1\n".into(),
            params: vec![
                ("a".into(), Tensor::from_vec(&[2], vec![1.5, -0.0]).unwrap()),
                (
                    "bb".into(),
                    Tensor::from_vec(&[1, 1, 1], vec![f64::MIN_POSITIVE]).unwrap(),
                ),
            ],
        }
    }

    #[test]
    fn layout_matches_the_format() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..6], b"AUSEG\x01");
        assert_eq!(&bytes[6..10], &11u32.to_le_bytes());
        assert_eq!(&bytes[10..21], b"epochs = 1\n");
        assert_eq!(&bytes[21..25], &1u32.to_le_bytes());
        assert_eq!(bytes[25], b'a');
        assert_eq!(&bytes[26..30], &1u32.to_le_bytes());
        assert_eq!(&bytes[30..34], &2u32.to_le_bytes());
        assert_eq!(&bytes[34..42], &1.5f64.to_le_bytes());
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        assert_eq!(&bytes[bytes.len() - 4..], &crc.to_le_bytes());
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().contains("CRC"));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }
}
