//! `SPAW` weight files: magic, `u16` version, then records of
//! `(u16 name length, name, u8 ndim, u64 dims, f32 payload)` until EOF.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::precond::Preconditioner;
use super::tiny::{TinyDenoiserWeights, TinyUNetConfig};
use crate::cxg::{read_dims, write_dims};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"SPAW";
pub const WEIGHTS_VERSION: u16 = 1;

const PRECOND_MOMENTS: &str = "precond.moments";
const PRECOND_ALPHA_BAR: &str = "precond.alpha_bar";

impl TinyDenoiserWeights {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        for (name, dims, data) in self.tensors() {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("layer name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[dims.len() as u8])?;
            write_dims(&mut w, &dims)?;
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        if let Some(p) = &self.precond {
            let moments = [p.mean, p.var];
            for (name, data) in [(PRECOND_MOMENTS, &moments[..]), (PRECOND_ALPHA_BAR, &p.alpha_bar[..])] {
                w.write_all(&(name.len() as u16).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&[1u8])?;
                write_dims(&mut w, &[data.len()])?;
                for v in data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("truncated weight header".into()))?;
        if &head[..4] != WEIGHTS_MAGIC {
            return Err(Error::Format("bad weight file magic".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weight version {version}")));
        }
        let mut records: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
        loop {
            let mut len = [0u8; 2];
            match r.read(&mut len[..1])? {
                0 => break,
                _ => r.read_exact(&mut len[1..])?,
            }
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("layer name is not UTF-8".into()))?;
            let mut nd = [0u8; 1];
            r.read_exact(&mut nd)?;
            let dims = read_dims(&mut r, nd[0] as usize)?;
            let n: usize = dims.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated payload for {name}")))?;
            let data = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            records.insert(name, (dims, data));
        }
        let precond = match (records.remove(PRECOND_MOMENTS), records.remove(PRECOND_ALPHA_BAR)) {
            (None, None) => None,
            (Some((_, m)), Some((_, alpha_bar))) if m.len() == 2 => {
                let p = Preconditioner {
                    mean: m[0],
                    var: m[1],
                    alpha_bar,
                };
                p.validate()?;
                Some(p)
            }
            _ => return Err(Error::Format("incomplete preconditioner records".into())),
        };
        let config = infer_config(&records)?;
        let mut weights = TinyDenoiserWeights::zeros(config)?;
        let expected: Vec<(String, Vec<usize>)> = weights
            .tensors()
            .into_iter()
            .map(|(n, d, _)| (n, d))
            .collect();
        if records.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} weight records, found {}",
                expected.len(),
                records.len()
            )));
        }
        for ((name, dims), buf) in expected.into_iter().zip(weights.buffers_mut()) {
            let (d, data) = records
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing weight record {name}")))?;
            if d != dims {
                return Err(Error::Format(format!(
                    "record {name} has dims {d:?}, expected {dims:?}"
                )));
            }
            *buf = data;
        }
        if !weights.is_finite() {
            return Err(Error::Format("weights contain non-finite values".into()));
        }
        weights.precond = precond;
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }
}

fn infer_config(records: &HashMap<String, (Vec<usize>, Vec<f32>)>) -> Result<TinyUNetConfig> {
    let dims = |name: &str| -> Result<&Vec<usize>> {
        records
            .get(name)
            .map(|(d, _)| d)
            .ok_or_else(|| Error::Format(format!("missing weight record {name}")))
    };
    let time = dims("time.weight")?;
    let conv_in = dims("conv_in.weight")?;
    if time.len() != 2 || conv_in.len() != 4 {
        return Err(Error::Format("unexpected layer ranks".into()));
    }
    let mut channels = Vec::new();
    while let Some((d, _)) = records.get(&format!("enc{}.conv_a.weight", channels.len())) {
        channels.push(d[0]);
    }
    Ok(TinyUNetConfig {
        in_channels: conv_in[1],
        channels,
        emb_dim: time[1],
        hidden_dim: time[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_weights() {
        let w = TinyDenoiserWeights::init(TinyUNetConfig::new(2), 3).unwrap();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SPAW");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), WEIGHTS_VERSION);
        let back = TinyDenoiserWeights::read_from(&buf[..]).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn round_trip_preserves_preconditioner() {
        let s = crate::schedule::cosine_schedule(30).unwrap();
        let w = TinyDenoiserWeights::init(TinyUNetConfig::new(2), 3)
            .unwrap()
            .with_preconditioner(Preconditioner::new(0.05, 0.2, &s).unwrap());
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert_eq!(TinyDenoiserWeights::read_from(&buf[..]).unwrap(), w);
    }

    #[test]
    fn rejects_corruption() {
        let w = TinyDenoiserWeights::init(TinyUNetConfig::new(2), 3).unwrap();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert!(TinyDenoiserWeights::read_from(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(TinyDenoiserWeights::read_from(&bad[..]).is_err());
        let mut v2 = buf.clone();
        v2[4] = 9;
        assert!(TinyDenoiserWeights::read_from(&v2[..]).is_err());
    }
}
