//! Binary expert checkpoints.
//!
//! Layout: magic `DMCK`, `u32` format version, `u32` header length, a JSON header,
//! then the raw parameters as little-endian `f64` in declaration order, followed by
//! the EMA parameters when `has_ema` is set. Analytic experts carry their data spec
//! in the header and no parameter block.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoxSpec, Expert, ExpertModel, GaussianMixtureSpec, ParamKind, ScoreNet};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"DMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub model_kind: String,
    pub dim: usize,
    pub param_kind: ParamKind,
    pub schedule: NoiseSchedule<f64>,
    pub layer_sizes: Vec<usize>,
    pub n_params: usize,
    pub has_ema: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<GaussianMixtureSpec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoxSpec<f64>>,
}

/// A loaded checkpoint. `expert` evaluates with the EMA weights when present.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub expert: Expert<T>,
    pub raw_params: Option<Vec<T>>,
}

fn to_f64s<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

fn from_f64s<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn mixture_f64<T: Scalar>(s: &GaussianMixtureSpec<T>) -> GaussianMixtureSpec<f64> {
    GaussianMixtureSpec {
        weights: to_f64s(&s.weights),
        means: s.means.iter().map(|m| to_f64s(m)).collect(),
        variances: to_f64s(&s.variances),
    }
}

fn mixture_t<T: Scalar>(s: &GaussianMixtureSpec<f64>) -> GaussianMixtureSpec<T> {
    GaussianMixtureSpec {
        weights: from_f64s(&s.weights),
        means: s.means.iter().map(|m| from_f64s(m)).collect(),
        variances: from_f64s(&s.variances),
    }
}

/// Writes `expert`; for networks, `raw_params` are the un-averaged training weights
/// and the expert's own parameters are stored as the EMA block.
pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, expert: &Expert<T>, raw_params: Option<&[T]>) -> Result<()> {
    let s = &expert.native_schedule;
    let schedule = NoiseSchedule { form: s.form, gamma_min: s.gamma_min.to_f64_lossy(), gamma_max: s.gamma_max.to_f64_lossy() };
    let mut header = Header {
        format_version: FORMAT_VERSION,
        model_kind: expert.model.kind_str().to_string(),
        dim: expert.dim,
        param_kind: expert.param_kind,
        schedule,
        layer_sizes: Vec::new(),
        n_params: 0,
        has_ema: false,
        mixture: None,
        bounds: None,
    };
    let mut blocks: Vec<Vec<f64>> = Vec::new();
    match &expert.model {
        ExpertModel::AnalyticGaussian(m) | ExpertModel::AnalyticGmm(m) => header.mixture = Some(mixture_f64(m)),
        ExpertModel::AnalyticBox(b) => header.bounds = Some(BoxSpec { lo: to_f64s(&b.lo), hi: to_f64s(&b.hi) }),
        ExpertModel::Net(n) => {
            header.layer_sizes = n.layer_sizes();
            header.n_params = n.n_params();
            match raw_params {
                Some(raw) => {
                    if raw.len() != n.n_params() {
                        return Err(Error::Shape { expected: n.n_params(), got: raw.len() });
                    }
                    header.has_ema = true;
                    blocks.push(to_f64s(raw));
                    blocks.push(to_f64s(n.params()));
                }
                None => blocks.push(to_f64s(n.params())),
            }
        }
    }
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for block in blocks {
        for x in block {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated parameter block: {e}")))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Checkpoint<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let schedule = NoiseSchedule { form: h.schedule.form, gamma_min: T::lit(h.schedule.gamma_min), gamma_max: T::lit(h.schedule.gamma_max) };
    let missing = |what: &str| Error::Format(format!("{} checkpoint without {what}", h.model_kind));
    let (model, raw_params) = match h.model_kind.as_str() {
        "analytic-gaussian" => (ExpertModel::AnalyticGaussian(mixture_t(h.mixture.as_ref().ok_or_else(|| missing("mixture"))?)), None),
        "analytic-gmm" => (ExpertModel::AnalyticGmm(mixture_t(h.mixture.as_ref().ok_or_else(|| missing("mixture"))?)), None),
        "analytic-box" => {
            let b = h.bounds.as_ref().ok_or_else(|| missing("bounds"))?;
            (ExpertModel::AnalyticBox(BoxSpec { lo: from_f64s(&b.lo), hi: from_f64s(&b.hi) }), None)
        }
        "neural-net" => {
            let sizes = &h.layer_sizes;
            if sizes.len() < 2 || sizes[sizes.len() - 1] != h.dim || sizes[0] != h.dim + super::EMBED_WIDTH {
                return Err(Error::Format(format!("layer sizes {sizes:?} inconsistent with dim {}", h.dim)));
            }
            let hidden = &sizes[1..sizes.len() - 1];
            let first = from_f64s::<T>(&read_f64s(&mut r, h.n_params)?);
            let (active, raw) = if h.has_ema {
                let ema = from_f64s::<T>(&read_f64s(&mut r, h.n_params)?);
                (ema, Some(first))
            } else {
                (first, None)
            };
            (ExpertModel::Net(ScoreNet::from_params(h.dim, hidden, active)?), raw)
        }
        other => return Err(Error::Format(format!("unknown model kind {other:?}"))),
    };
    let expert = Expert::new(model, schedule, h.param_kind)?;
    if expert.dim != h.dim {
        return Err(Error::Format("header dim disagrees with model".into()));
    }
    Ok(Checkpoint { expert, raw_params })
}

pub fn save<T: Scalar>(path: &Path, expert: &Expert<T>, raw_params: Option<&[T]>) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, expert, raw_params)
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(f)
}
