//! Sequence dataset files.
//!
//! Stored in the library's array container under its own magic. Sequences
//! may differ in length; `y`, `observed` and `latents` are concatenated
//! time-major (`ΣT × N`) with a `lengths` array to split them again.

use std::collections::BTreeMap;
use std::path::Path;

use lrssm::container::{Array, Container};
use lrssm::dynamics::MeanFnSpec;
use lrssm::likelihoods::ObsSpec;
use lrssm::sequence::Sequence;
use lrssm::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::generate::GeneratorSpec;

pub const DATASET_MAGIC: &[u8; 8] = b"LRSSMDS1";

/// Parameters of the process that generated a dataset, as named blocks in
/// the model's parameter naming (`dyn.a`, `obs.c`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// `None` when the generating dynamics are outside the model family.
    pub mean_fn: Option<MeanFnSpec>,
    pub obs: ObsSpec,
    pub blocks: BTreeMap<String, DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceDataset {
    pub sequences: Vec<Sequence>,
    /// Ground-truth latent paths, `L×T` per sequence.
    pub latents: Option<Vec<DMatrix<f64>>>,
    pub truth: Option<Truth>,
    pub generator: Option<GeneratorSpec>,
    pub seed: Option<u64>,
    /// Observations are event counts.
    pub counts: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    obs_dim: usize,
    latent_dim: Option<usize>,
    counts: bool,
    seed: Option<u64>,
    generator: Option<GeneratorSpec>,
    truth_mean_fn: Option<MeanFnSpec>,
    truth_obs: Option<ObsSpec>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl SequenceDataset {
    pub fn obs_dim(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.obs_dim())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.obs_dim();
        if self.sequences.iter().any(|s| s.obs_dim() != n) {
            return Err(Error::Invalid("sequences differ in observation dimension".into()));
        }
        if let Some(lat) = &self.latents {
            if lat.len() != self.sequences.len() {
                return Err(Error::Invalid("one latent path per sequence required".into()));
            }
            let l = lat.first().map_or(0, |z| z.nrows());
            for (z, s) in lat.iter().zip(&self.sequences) {
                if z.ncols() != s.len() || z.nrows() != l {
                    return Err(Error::Invalid("latent path shape does not match its sequence".into()));
                }
            }
        }
        if self.counts {
            for s in &self.sequences {
                for (v, o) in s.y.iter().zip(s.observed.iter()) {
                    if *o && !(*v >= 0.0 && v.fract() == 0.0) {
                        return Err(Error::Domain(*v));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let n = self.obs_dim();
        let latent_dim = self.latents.as_ref().and_then(|l| l.first()).map(|z| z.nrows());
        let header = Header {
            obs_dim: n,
            latent_dim,
            counts: self.counts,
            seed: self.seed,
            generator: self.generator.clone(),
            truth_mean_fn: self.truth.as_ref().and_then(|t| t.mean_fn.clone()),
            truth_obs: self.truth.as_ref().map(|t| t.obs.clone()),
        };
        let mut c = Container::new(serde_json::to_value(header).map_err(|e| fmt_err(e.to_string()))?);
        let total: usize = self.sequences.iter().map(|s| s.len()).sum();
        c.push(Array::i64(
            "lengths",
            vec![self.sequences.len()],
            self.sequences.iter().map(|s| s.len() as i64).collect(),
        ));
        let mut y = Vec::with_capacity(total * n);
        let mut obs = Vec::with_capacity(total * n);
        for s in &self.sequences {
            // column-major N×T is already time-major rows of N
            y.extend_from_slice(s.y.as_slice());
            obs.extend(s.observed.iter().map(|o| u8::from(*o)));
        }
        c.push(Array::f64("y", vec![total, n], y));
        c.push(Array::u8("observed", vec![total, n], obs));
        if let (Some(lat), Some(l)) = (&self.latents, latent_dim) {
            let mut z = Vec::with_capacity(total * l);
            for m in lat {
                z.extend_from_slice(m.as_slice());
            }
            c.push(Array::f64("latents", vec![total, l], z));
        }
        if let Some(t) = &self.truth {
            for (name, m) in &t.blocks {
                c.push(Array::f64(format!("truth.{name}"), vec![m.nrows(), m.ncols()], m.as_slice().to_vec()));
            }
        }
        c.encode(DATASET_MAGIC)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = Container::decode(DATASET_MAGIC, bytes)?;
        let h: Header = serde_json::from_value(c.meta.clone()).map_err(|e| fmt_err(format!("dataset header: {e}")))?;
        let lengths = c.get("lengths")?;
        if lengths.shape.len() != 1 {
            return Err(fmt_err("lengths must be one-dimensional"));
        }
        let lengths: Vec<usize> = lengths
            .as_i64()?
            .iter()
            .map(|&v| usize::try_from(v).map_err(|_| fmt_err("negative sequence length")))
            .collect::<Result<_>>()?;
        let total = lengths
            .iter()
            .try_fold(0usize, |a, &b| a.checked_add(b))
            .ok_or_else(|| fmt_err("sequence lengths overflow"))?;
        let n = h.obs_dim;
        let check = |a: &Array, cols: usize| -> Result<()> {
            if a.shape != [total, cols] {
                return Err(fmt_err(format!("array {} has shape {:?}, expected [{total}, {cols}]", a.name, a.shape)));
            }
            Ok(())
        };
        let y = c.get("y")?;
        check(y, n)?;
        let y = y.as_f64()?;
        let observed = c.get("observed")?;
        check(observed, n)?;
        let observed = observed.as_u8()?;
        if observed.iter().any(|&v| v > 1) {
            return Err(fmt_err("observed mask must be 0/1"));
        }
        let latents = match (c.find("latents"), h.latent_dim) {
            (Some(a), Some(l)) => {
                check(a, l)?;
                Some(a.as_f64()?)
            }
            (None, None) => None,
            _ => return Err(fmt_err("latent array and header disagree")),
        };
        let mut sequences = Vec::with_capacity(lengths.len());
        let mut lat_out = latents.map(|_| Vec::with_capacity(lengths.len()));
        let mut off = 0;
        for &t in &lengths {
            let ys = DMatrix::from_column_slice(n, t, &y[off * n..(off + t) * n]);
            let os = DMatrix::from_iterator(n, t, observed[off * n..(off + t) * n].iter().map(|v| *v == 1));
            let seq = Sequence::new(ys, os)?;
            if seq.y.iter().zip(&y[off * n..(off + t) * n]).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(fmt_err("missing entries must be stored as zero"));
            }
            sequences.push(seq);
            if let (Some(out), Some(z), Some(l)) = (lat_out.as_mut(), latents, h.latent_dim) {
                out.push(DMatrix::from_column_slice(l, t, &z[off * l..(off + t) * l]));
            }
            off += t;
        }
        let mut blocks = BTreeMap::new();
        for a in &c.arrays {
            if let Some(name) = a.name.strip_prefix("truth.") {
                if a.shape.len() != 2 {
                    return Err(fmt_err(format!("truth block {name} must be a matrix")));
                }
                blocks.insert(name.to_string(), DMatrix::from_column_slice(a.shape[0], a.shape[1], a.as_f64()?));
            }
        }
        let truth = match h.truth_obs {
            Some(obs) => Some(Truth {
                mean_fn: h.truth_mean_fn,
                obs,
                blocks,
            }),
            None if blocks.is_empty() => None,
            None => return Err(fmt_err("truth blocks without a truth model")),
        };
        let ds = SequenceDataset {
            sequences,
            latents: lat_out,
            truth,
            generator: h.generator,
            seed: h.seed,
            counts: h.counts,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    /// First `n_train` sequences and the rest.
    pub fn split(&self, n_train: usize) -> (SequenceDataset, SequenceDataset) {
        let cut = n_train.min(self.len());
        let part = |r: std::ops::Range<usize>| SequenceDataset {
            sequences: self.sequences[r.clone()].to_vec(),
            latents: self.latents.as_ref().map(|l| l[r].to_vec()),
            truth: self.truth.clone(),
            generator: self.generator.clone(),
            seed: self.seed,
            counts: self.counts,
        };
        (part(0..cut), part(cut..self.len()))
    }
}
