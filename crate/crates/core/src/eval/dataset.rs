//! Toy data sets standing in for image benchmarks.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::GaussianMixtureSpec;
use crate::likelihood::scale_quantized;
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Standard normal in `dim` dimensions.
    UnitGaussian,
    Gmm,
    Checkerboard,
    Rings,
    QuantizedGmm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Quantized kinds only; they fall back to `DEFAULT_BIT_DEPTH` when absent.
    pub bit_depth: Option<u32>,
    pub seed: u64,
}

impl Default for ToyDataset {
    fn default() -> Self {
        Self { kind: DatasetKind::QuantizedGmm, dim: 2, n_train: 20_000, n_test: 500, bit_depth: None, seed: 0 }
    }
}

/// Generated splits. Quantized kinds also carry the integer symbols; their continuous
/// rows are dequantized once with uniform offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub dim: usize,
    pub train: Vec<f64>,
    pub test: Vec<f64>,
    pub test_symbols: Option<Vec<u32>>,
    pub bit_depth: Option<u32>,
}

impl Splits {
    pub fn n_test(&self) -> usize {
        self.test.len() / self.dim
    }
}

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_BIT_DEPTH: u32 = 5;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitsFile {
    format_version: u32,
    dim: usize,
    bit_depth: Option<u32>,
    train: Vec<f64>,
    test: Vec<f64>,
    test_symbols: Option<Vec<u32>>,
}

impl Splits {
    fn check(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 || self.train.is_empty() || self.train.len() % d != 0 || self.test.len() % d != 0 {
            return Err(Error::Data(format!(
                "split lengths ({} train, {} test values) are not multiples of dim {d}",
                self.train.len(),
                self.test.len()
            )));
        }
        if self.train.iter().chain(&self.test).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in data set".into()));
        }
        match (&self.test_symbols, self.bit_depth) {
            (Some(s), Some(b)) => {
                if s.len() != self.test.len() {
                    return Err(Error::Data("test_symbols must match the test split in length".into()));
                }
                if let Some(&x) = s.iter().find(|&&x| b >= 32 || x >= 1 << b) {
                    return Err(Error::Data(format!("symbol {x} out of range for bit depth {b}")));
                }
                Ok(())
            }
            (None, None) => Ok(()),
            _ => Err(Error::Data("test_symbols and bit_depth must be given together".into())),
        }
    }

    /// Writes the splits as a versioned JSON document.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = SplitsFile {
            format_version: DATASET_FORMAT_VERSION,
            dim: self.dim,
            bit_depth: self.bit_depth,
            train: self.train.clone(),
            test: self.test.clone(),
            test_symbols: self.test_symbols.clone(),
        };
        let w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(w, &f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Data(format!("dataset file {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        let f: SplitsFile = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Format(format!("dataset file {}: {e}", path.display())))?;
        if f.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "dataset format version {} unsupported (expected {DATASET_FORMAT_VERSION})",
                f.format_version
            )));
        }
        let s = Splits { dim: f.dim, train: f.train, test: f.test, test_symbols: f.test_symbols, bit_depth: f.bit_depth };
        s.check()?;
        Ok(s)
    }
}

const TRAIN_SPLIT: u64 = 0;
const TEST_SPLIT: u64 = 1;

impl ToyDataset {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dataset dim must be at least 1".into()));
        }
        if matches!(self.kind, DatasetKind::Checkerboard | DatasetKind::Rings) && self.dim != 2 {
            return Err(Error::Config(format!("{:?} data is two-dimensional", self.kind)));
        }
        match (self.kind, self.bit_depth) {
            (DatasetKind::QuantizedGmm, Some(b)) if !(1..=16).contains(&b) => {
                Err(Error::Config(format!("bit_depth must be in 1..=16, got {b}")))
            }
            (DatasetKind::QuantizedGmm, _) => Ok(()),
            (_, Some(_)) => Err(Error::Config("bit_depth applies to quantized kinds only".into())),
            _ => Ok(()),
        }
    }

    /// Four components with unequal weights at the corners of a square, repeated over
    /// coordinate pairs in higher dimensions.
    pub fn mixture(&self) -> GaussianMixtureSpec<f64> {
        let corners = [(-0.5, -0.5), (0.5, 0.5), (-0.5, 0.5), (0.5, -0.5)];
        let means = corners
            .iter()
            .map(|&(a, b)| (0..self.dim).map(|j| if j % 2 == 0 { a } else { b }).collect())
            .collect();
        GaussianMixtureSpec::new(vec![0.4, 0.3, 0.2, 0.1], means, vec![0.12f64.powi(2); 4]).expect("valid mixture")
    }

    fn draw_point<R: Rng>(&self, r: &mut R, out: &mut [f64]) {
        match self.kind {
            DatasetKind::Gmm | DatasetKind::QuantizedGmm => {
                let spec = self.mixture();
                let u: f64 = r.random();
                let mut acc = 0.0;
                let mut k = spec.weights.len() - 1;
                for (i, w) in spec.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let sd = spec.variances[k].sqrt();
                for (o, m) in out.iter_mut().zip(&spec.means[k]) {
                    *o = m + sd * rng::normal::<f64, _>(r);
                }
            }
            DatasetKind::UnitGaussian => rng::fill_normal(r, out),
            DatasetKind::Checkerboard => loop {
                let (x, y): (f64, f64) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
                let cell = ((x + 1.0) * 2.0).floor() as i64 + ((y + 1.0) * 2.0).floor() as i64;
                if cell % 2 == 0 {
                    out[0] = x;
                    out[1] = y;
                    break;
                }
            },
            DatasetKind::Rings => {
                let radius = if r.random::<bool>() { 0.4 } else { 0.8 };
                let a = r.random_range(0.0..TAU);
                let rr = radius + 0.04 * rng::normal::<f64, _>(r);
                out[0] = rr * a.cos();
                out[1] = rr * a.sin();
            }
        }
    }

    /// Bit depth in effect: `Some` exactly for quantized kinds.
    pub fn effective_bit_depth(&self) -> Option<u32> {
        (self.kind == DatasetKind::QuantizedGmm).then(|| self.bit_depth.unwrap_or(DEFAULT_BIT_DEPTH))
    }

    fn quantize(&self, y: f64, bits: u32) -> u32 {
        let levels = 1u32 << bits;
        let q = ((y + 1.0) / 2.0 * levels as f64).floor();
        q.clamp(0.0, (levels - 1) as f64) as u32
    }

    fn split(&self, which: u64, n: usize) -> (Vec<f64>, Option<Vec<u32>>) {
        let d = self.dim;
        let mut cont = vec![0.0; n * d];
        let mut symbols = (self.kind == DatasetKind::QuantizedGmm).then(|| vec![0u32; n * d]);
        for i in 0..n {
            let mut r = rng::stream(self.seed, &[tag::DATASET, which, i as u64]);
            let row = &mut cont[i * d..(i + 1) * d];
            self.draw_point(&mut r, row);
            if let (Some(s), Some(b)) = (symbols.as_mut(), self.effective_bit_depth()) {
                for j in 0..d {
                    let x = self.quantize(row[j], b);
                    s[i * d + j] = x;
                    row[j] = scale_quantized(x, r.random::<f64>(), b);
                }
            }
        }
        (cont, symbols)
    }

    pub fn generate(&self) -> Result<Splits> {
        self.validate()?;
        let (train, _) = self.split(TRAIN_SPLIT, self.n_train);
        let (test, test_symbols) = self.split(TEST_SPLIT, self.n_test);
        Ok(Splits { dim: self.dim, train, test, test_symbols, bit_depth: self.effective_bit_depth() })
    }
}
