//! INNCKPT1 checkpoints.
//!
//! Layout: 8-byte magic `INNCKPT1`, u64 LE header length, UTF-8 JSON
//! header, then every parameter as f64 LE in [`InnModel::params_flat`]
//! order. When the header says so, an optimizer block follows: magic
//! `ADAMEXT1`, u64 LE step, first moments, second moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coupling::{CouplingLayer, Subnet};
use crate::error::{Error, Result};
use crate::model::{DimSpec, InnModel};
use crate::numerics::{Permutation, RngSnapshot};
use crate::objective::LossWeights;
use crate::training::AdamMoments;

const MAGIC: &[u8; 8] = b"INNCKPT1";
const ADAM_MAGIC: &[u8; 8] = b"ADAMEXT1";
pub const OUTPUT_LAYOUT: [&str; 3] = ["z", "yz_pad", "y"];
pub const PARAM_ORDER: &str = "layer-major; s1,t1,s2,t2; hidden.w,hidden.b,output.w,output.b";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    dims: DimSpec,
    layers: usize,
    hidden: usize,
    clamp: f64,
    pad_noise: f64,
    output_layout: Vec<String>,
    param_order: String,
    permutations: Vec<Vec<usize>>,
    seed: u64,
    rng: Option<RngSnapshot>,
    step: u64,
    loss_weights: LossWeights,
    param_count: usize,
    optimizer: bool,
}

/// Everything needed to resume or deploy a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: InnModel,
    pub pad_noise: f64,
    pub seed: u64,
    pub rng: Option<RngSnapshot>,
    pub step: u64,
    pub weights: LossWeights,
    pub optimizer: Option<AdamMoments>,
}

impl Checkpoint {
    pub fn new(model: InnModel, pad_noise: f64, seed: u64) -> Self {
        Self {
            model,
            pad_noise,
            seed,
            rng: None,
            step: 0,
            weights: LossWeights::default(),
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        let n = model.param_count();
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != n || opt.v.len() != n {
                return Err(Error::shape("optimizer moments", n, opt.m.len().max(opt.v.len())));
            }
        }
        let header = Header {
            format: "INNCKPT1".into(),
            dims: *model.spec(),
            layers: model.layers().len(),
            hidden: model.hidden_width(),
            clamp: model.clamp(),
            pad_noise: self.pad_noise,
            output_layout: OUTPUT_LAYOUT.iter().map(|s| s.to_string()).collect(),
            param_order: PARAM_ORDER.into(),
            permutations: model
                .layers()
                .iter()
                .map(|l| l.permutation().indices().to_vec())
                .collect(),
            seed: self.seed,
            rng: self.rng.clone(),
            step: self.step,
            loss_weights: self.weights,
            param_count: n,
            optimizer: self.optimizer.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        let extra = self.optimizer.as_ref().map_or(0, |_| 16 + 16 * n);
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n + extra);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in model.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(ADAM_MAGIC);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for v in opt.m.iter().chain(&opt.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "INNCKPT1",
            });
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| r.format(format!("header: {e}")))?;
        if header.format != "INNCKPT1" {
            return Err(r.format(format!("header format {:?}", header.format)));
        }
        if header.output_layout != OUTPUT_LAYOUT {
            return Err(r.format(format!("unsupported output layout {:?}", header.output_layout)));
        }
        if header.permutations.len() != header.layers || header.layers == 0 {
            return Err(r.format("permutation count does not match layer count".into()));
        }
        let spec = header.dims;
        spec.validate()?;
        let half = spec.d_total / 2;
        let layers = header
            .permutations
            .iter()
            .map(|p| {
                let zero = Subnet::zeros(half, header.hidden);
                CouplingLayer::from_parts(
                    Permutation::new(p.clone())?,
                    [zero.clone(), zero.clone(), zero.clone(), zero],
                    header.clamp,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = InnModel::from_layers(spec, layers)?;
        let n = model.param_count();
        if header.param_count != n {
            return Err(r.format(format!(
                "header lists {} parameters, layout implies {n}",
                header.param_count
            )));
        }
        model.set_params_flat(&r.f64s(n)?)?;

        let optimizer = if header.optimizer {
            if r.take(8)? != ADAM_MAGIC {
                return Err(Error::BadMagic {
                    path: path.to_path_buf(),
                    expected: "ADAMEXT1",
                });
            }
            let step = r.u64()?;
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            Some(AdamMoments { step, m, v })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(r.format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        header.loss_weights.validate()?;
        Ok(Self {
            model,
            pad_noise: header.pad_noise,
            seed: header.seed,
            rng: header.rng,
            step: header.step,
            weights: header.loss_weights,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                needed: (self.pos as u64).saturating_add(n as u64) - self.bytes.len() as u64,
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn format(&self, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, RngState};

    fn sample() -> Checkpoint {
        let spec = DimSpec::new(5, 3, 2, 10).unwrap();
        let mut rng = RngState::new(4);
        let mut model = InnModel::new(spec, 3, 6, 2.0, &mut rng).unwrap();
        model.perturb(&mut rng, 0.3);
        let n = model.param_count();
        let mut ck = Checkpoint::new(model, 0.01, 4);
        ck.rng = Some(rng.snapshot());
        ck.step = 17;
        ck.weights = LossWeights::from_array([1.0, 0.1, 1.0 / 3.0, 2.5, 1e-7, 7.0]);
        ck.optimizer = Some(AdamMoments {
            step: 17,
            m: (0..n).map(|i| i as f64 * 1e-3).collect(),
            v: (0..n).map(|i| (i as f64).sqrt()).collect(),
        });
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.innckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), fs::read(&path).unwrap());

        let x = gaussian(&mut RngState::new(1), 8, 5, 1.0).unwrap();
        let pad = ck.model.pad_for_inference(8);
        let a = ck.model.forward(&x, &pad).unwrap();
        let b = back.model.forward(&x, &pad).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn without_optimizer() {
        let mut ck = sample();
        ck.optimizer = None;
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap(), ck);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(cut, Path::new("x")),
            Err(Error::Truncated { needed: 3, .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&long, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn invalid_permutation_rejected() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        header["permutations"][0][0] = serde_json::json!(1);
        header["permutations"][0][1] = serde_json::json!(1);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + hlen..]);
        assert!(Checkpoint::from_bytes(&out, Path::new("x")).is_err());
    }
}
