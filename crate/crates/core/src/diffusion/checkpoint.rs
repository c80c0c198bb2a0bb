use std::io::{Read, Write};
use std::path::Path;

use super::{NoiseSchedule, ScheduleConfig};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::emulator::Emulator;
use crate::error::{Error, Result};
use crate::gradcore::{ParamSet, Tensor};
use crate::physops::SpectralPrior;

const ABD1_MAGIC: &[u8; 4] = b"ABD1";

/// Writes named tensors as `ABD1`: magic, `u32` count, then per tensor a
/// `u16` name length, the UTF-8 name, `u8` rank, `u32` dims and the `f64`
/// payload. Little-endian throughout; entries go out in name order.
pub fn write_abd1<W: Write>(tensors: &ParamSet, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ABD1_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank of {name} too large")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for d in t.shape() {
            let d = u32::try_from(*d).map_err(|_| Error::Format(format!("dimension of {name} too large")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("ABD1 truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_abd1<R: Read>(mut input: R) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4).ok() != Some(ABD1_MAGIC.as_slice()) {
        return Err(Error::Format("not an ABD1 checkpoint".into()));
    }
    let count = cur.u32()?;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = cur
            .take(numel)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after ABD1 payload", bytes.len() - cur.pos)));
    }
    Ok(out)
}

/// Everything repair needs: both networks, the schedule, the band grid and
/// the spectral prior.
#[derive(Clone)]
pub struct Checkpoint {
    pub denoiser: Denoiser,
    pub emulator: Emulator,
    pub schedule: NoiseSchedule,
    pub prior: SpectralPrior,
    pub wavelengths: Vec<f64>,
}

// JSON configs ride along as one byte per element.
fn json_tensor<T: serde::Serialize>(value: &T) -> Result<Tensor> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Tensor::from_vec(bytes.into_iter().map(f64::from).collect()))
}

fn json_from_tensor<T: serde::de::DeserializeOwned>(t: &Tensor, what: &str) -> Result<T> {
    let bytes = t
        .data()
        .iter()
        .map(|v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(v) {
                Ok(*v as u8)
            } else {
                Err(Error::Format(format!("{what} is not a byte string")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(serde_json::from_slice(&bytes)?)
}

impl Checkpoint {
    pub fn to_tensors(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        out.extend_prefixed("denoiser/", self.denoiser.params());
        out.extend_prefixed("emulator/", self.emulator.params());
        out.insert("config/denoiser", json_tensor(self.denoiser.config())?);
        out.insert("config/schedule", json_tensor(&self.schedule.config())?);
        out.insert("config/wavelengths", Tensor::from_vec(self.wavelengths.clone()));
        out.insert("prior/s", self.prior.matrix().clone());
        Ok(out)
    }

    pub fn from_tensors(t: &ParamSet) -> Result<Self> {
        let missing = |e: Error| match e {
            Error::State(msg) => Error::Format(msg),
            other => other,
        };
        let dcfg: DenoiserConfig = json_from_tensor(t.get("config/denoiser").map_err(missing)?, "config/denoiser")?;
        let scfg: ScheduleConfig = json_from_tensor(t.get("config/schedule").map_err(missing)?, "config/schedule")?;
        let wavelengths = t.get("config/wavelengths").map_err(missing)?.data().to_vec();
        let prior = SpectralPrior::new(t.get("prior/s").map_err(missing)?.clone())?;
        let denoiser = Denoiser::from_params(dcfg, t.with_prefix("denoiser/")).map_err(missing)?;
        let emulator = Emulator::from_params(t.with_prefix("emulator/")).map_err(missing)?;
        let schedule = NoiseSchedule::from_config(&scfg)?;
        if wavelengths.len() != prior.bands() || wavelengths.len() != emulator.bands() {
            return Err(Error::Format("checkpoint band counts disagree".into()));
        }
        Ok(Self {
            denoiser,
            emulator,
            schedule,
            prior,
            wavelengths,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_abd1(&ckpt.to_tensors()?, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_tensors(&read_abd1(std::fs::File::open(path)?)?)
}
