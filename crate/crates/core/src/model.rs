//! Trained model and its on-disk format.
//!
//! A file is a short text header of structural integers terminated by an
//! `end` line, followed by a little-endian payload: `n_train` as `u64`, then
//! `f64` arrays for the packed hyperparameters, `beta`, the noise variance,
//! the prior weights, the lower triangle of the posterior factor (row-major)
//! and the standardization statistics. Nothing in the payload grows with the
//! number of training points.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::fastfood::{build_gaussian_stack, FastfoodStack};
use crate::features::compute_features;
use crate::gp::{predict, PosteriorState};
use crate::kernel::{unpack, Family, HyperVector, KernelParams, KernelShape, KernelSpec, ScaleParam};

const MAGIC: &str = "alacarte-model";
const VERSION: u32 = 1;

/// Seeds for the per-group Fastfood stacks, derived from one base seed.
pub fn group_seeds(seed: u64, groups: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..groups).map(|_| rng.next_u64()).collect()
}

pub fn build_stacks(shape: &KernelShape, seed: u64) -> Result<Vec<FastfoodStack>> {
    group_seeds(seed, shape.groups)
        .into_iter()
        .map(|s| build_gaussian_stack(s, shape.geometry()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub shape: KernelShape,
    pub seed: u64,
    pub hyper: HyperVector,
    pub posterior: PosteriorState,
    pub standardizer: Standardizer,
    pub n_train: u64,
    stacks: Vec<FastfoodStack>,
}

impl PartialEq for TrainedModel {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.seed == other.seed
            && self.hyper == other.hyper
            && self.posterior == other.posterior
            && self.standardizer == other.standardizer
            && self.n_train == other.n_train
    }
}

impl TrainedModel {
    pub fn new(
        shape: KernelShape,
        seed: u64,
        hyper: HyperVector,
        posterior: PosteriorState,
        standardizer: Standardizer,
        n_train: u64,
    ) -> Result<Self> {
        unpack(&shape, &hyper)?;
        if posterior.beta.len() != shape.feature_count() {
            return Err(Error::ModelFormat(format!(
                "beta has length {}, kernel has {} features",
                posterior.beta.len(),
                shape.feature_count()
            )));
        }
        if standardizer.x_mean.len() != shape.input_dim {
            return Err(Error::ModelFormat(
                "standardization does not match input dimension".into(),
            ));
        }
        Ok(Self {
            stacks: build_stacks(&shape, seed)?,
            shape,
            seed,
            hyper,
            posterior,
            standardizer,
            n_train,
        })
    }

    pub fn spec(&self) -> KernelSpec {
        unpack(&self.shape, &self.hyper).expect("validated at construction").0
    }

    pub fn noise_var(&self) -> ScaleParam {
        unpack(&self.shape, &self.hyper).expect("validated at construction").1
    }

    pub fn stacks(&self) -> &[FastfoodStack] {
        &self.stacks
    }

    /// Predictive mean and variance in original target units.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.ncols() != self.shape.input_dim && x.nrows() > 0 {
            return Err(Error::InvalidDimension(format!(
                "model expects {} input columns, data has {}",
                self.shape.input_dim,
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        let phi = compute_features(&self.spec(), &self.stacks, &self.standardizer.transform_x(x))?;
        let (mean, var) = predict(&self.posterior, &phi)?;
        Ok((self.standardizer.inverse_y(&mean), self.standardizer.inverse_var(&var)))
    }

    /// GM component means converted to frequencies of the raw inputs.
    pub fn gm_means(&self) -> Option<Vec<Vec<f64>>> {
        match self.spec().params {
            KernelParams::Gm { groups } => Some(
                groups
                    .iter()
                    .map(|g| g.mu.iter().zip(&self.standardizer.x_std).map(|(m, s)| m / s).collect())
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.shape;
        let d_feat = s.feature_count();
        let mut out = format!(
            "{MAGIC} {VERSION}\nfamily {}\ninput_dim {}\ngroups {}\nfreqs_per_group {}\nseed {}\nparams {}\nfeatures {}\nend\n",
            s.family.tag(),
            s.input_dim,
            s.groups,
            s.freqs_per_group,
            self.seed,
            self.hyper.len(),
            d_feat
        )
        .into_bytes();
        out.extend_from_slice(&self.n_train.to_le_bytes());
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        self.hyper.0.iter().for_each(|v| put(*v));
        self.posterior.beta.iter().for_each(|v| put(*v));
        put(self.posterior.noise_var);
        self.posterior.weight_diag.iter().for_each(|v| put(*v));
        for i in 0..d_feat {
            for j in 0..=i {
                put(self.posterior.chol_factor[(i, j)]);
            }
        }
        let st = &self.standardizer;
        st.x_mean.iter().chain(&st.x_std).for_each(|v| put(*v));
        put(st.y_mean);
        put(st.y_std);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        let mut header = std::collections::BTreeMap::new();
        let mut pos = 0;
        let mut first = true;
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not text"))?;
            pos += end + 1;
            if first {
                if line != format!("{MAGIC} {VERSION}") {
                    return Err(bad(&format!("unsupported model header {line:?}")));
                }
                first = false;
                continue;
            }
            if line == "end" {
                break;
            }
            let (k, v) = line.split_once(' ').ok_or_else(|| bad("malformed header line"))?;
            header.insert(k.to_string(), v.to_string());
        }
        let field = |k: &str| header.get(k).ok_or_else(|| bad(&format!("missing header field {k}")));
        let int = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| bad(&format!("bad integer for {k}"))) };
        let family: Family = field("family")?.parse()?;
        let shape = KernelShape::new(
            family,
            int("input_dim")? as usize,
            int("groups")? as usize,
            int("freqs_per_group")? as usize,
        )?;
        let seed = int("seed")?;
        if int("params")? as usize != shape.param_count() || int("features")? as usize != shape.feature_count() {
            return Err(bad("header sizes disagree with the kernel shape"));
        }
        let (p, d_feat, d) = (shape.param_count(), shape.feature_count(), shape.input_dim);
        let floats = p + d_feat + 1 + d_feat + d_feat * (d_feat + 1) / 2 + 2 * d + 2;
        let payload = &bytes[pos..];
        if payload.len() != 8 + 8 * floats {
            return Err(bad(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                8 + 8 * floats
            )));
        }
        let n_train = u64::from_le_bytes(payload[..8].try_into().expect("8 bytes"));
        let mut it = payload[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |k: usize| (&mut it).take(k).collect::<Vec<f64>>();
        let hyper = HyperVector(take(p));
        let beta = DVector::from_vec(take(d_feat));
        let noise_var = take(1)[0];
        let weight_diag = take(d_feat);
        let tri = take(d_feat * (d_feat + 1) / 2);
        let mut chol = DMatrix::zeros(d_feat, d_feat);
        let mut k = 0;
        for i in 0..d_feat {
            for j in 0..=i {
                chol[(i, j)] = tri[k];
                k += 1;
            }
        }
        let x_mean = take(d);
        let x_std = take(d);
        let y = take(2);
        Self::new(
            shape,
            seed,
            hyper,
            PosteriorState {
                beta,
                chol_factor: chol,
                noise_var,
                weight_diag,
            },
            Standardizer {
                x_mean,
                x_std,
                y_mean: y[0],
                y_std: y[1],
            },
            n_train,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
