//! Model architecture presets, weight containers and the `FRWT` tensor file.
//!
//! `FRWT` layout (little-endian):
//!
//! ```text
//! magic      b"FRWT"
//! version    u32 (currently 1)
//! count      u32, number of tensors
//! count × {
//!     name_len  u32
//!     name      UTF-8 bytes
//!     rank      u32
//!     dims      rank × u64
//!     data      product(dims) × f32, row-major
//! }
//! ```
//!
//! Trainable tensors are `sa{1..4}.mlp.{i}.weight` (`in × out`),
//! `sa{1..4}.mlp.{i}.bias`, `fp.mlp.{i}.weight|bias` and
//! `att.self.wf|ws`, `att.cross.wf|ws` (`2D × D`). Architecture scalars are
//! stored alongside as rank-1 tensors of length one: `sa{l}.num_samples`,
//! `sa{l}.radius`, `encoder.max_neighbors`, `encoder.input_dim` and `att.k`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Dense, Mlp};

pub const FRWT_MAGIC: &[u8; 4] = b"FRWT";
pub const FRWT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SaConfig {
    pub num_samples: usize,
    pub radius: f64,
    pub widths: Vec<usize>,
}

impl SaConfig {
    pub fn new(num_samples: usize, radius: f64, widths: &[usize]) -> Self {
        Self {
            num_samples,
            radius,
            widths: widths.to_vec(),
        }
    }
}

/// Encoder and attention hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub sa: [SaConfig; 4],
    pub fp_widths: Vec<usize>,
    pub max_neighbors: usize,
    /// Per-point input feature dimension (1: intensity).
    pub input_dim: usize,
    /// Neighbors per node in both attention graphs.
    pub k: usize,
}

impl ModelConfig {
    /// Inference-size model: 512 key points with 128-dimensional features.
    pub fn full() -> Self {
        Self {
            sa: [
                SaConfig::new(4096, 1.0, &[32, 32]),
                SaConfig::new(2048, 2.0, &[64, 64]),
                SaConfig::new(512, 4.0, &[128, 128]),
                SaConfig::new(128, 8.0, &[256, 256]),
            ],
            fp_widths: vec![128, 128],
            max_neighbors: 64,
            input_dim: 1,
            k: 32,
        }
    }

    /// Desk-scale model used for the toy training runs (256 key points, D = 32).
    pub fn desk() -> Self {
        Self {
            sa: [
                SaConfig::new(1024, 2.0, &[16, 16]),
                SaConfig::new(512, 4.0, &[32, 32]),
                SaConfig::new(256, 8.0, &[32, 32]),
                SaConfig::new(64, 16.0, &[64, 64]),
            ],
            fp_widths: vec![32, 32],
            max_neighbors: 32,
            input_dim: 1,
            k: 16,
        }
    }

    /// Minimal model for finite-difference gradient checks (16 key points, D = 4, k = 2).
    pub fn tiny() -> Self {
        Self {
            sa: [
                SaConfig::new(32, 1.0, &[4, 4]),
                SaConfig::new(24, 1.5, &[6]),
                SaConfig::new(16, 2.0, &[6]),
                SaConfig::new(8, 3.0, &[8]),
            ],
            fp_widths: vec![6, 4],
            max_neighbors: 8,
            input_dim: 1,
            k: 2,
        }
    }

    pub fn keypoints(&self) -> usize {
        self.sa[2].num_samples
    }

    pub fn feature_dim(&self) -> usize {
        self.fp_widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        for (l, sa) in self.sa.iter().enumerate() {
            if sa.num_samples == 0 || !(sa.radius > 0.0) || sa.widths.is_empty() {
                return Err(Error::Config(format!(
                    "sa{}: samples, radius and widths must be positive/non-empty",
                    l + 1
                )));
            }
            if l > 0 {
                let prev = &self.sa[l - 1];
                if sa.num_samples > prev.num_samples {
                    return Err(Error::Config(format!(
                        "sa{} samples {} exceed sa{} samples {}",
                        l + 1,
                        sa.num_samples,
                        l,
                        prev.num_samples
                    )));
                }
                if sa.radius <= prev.radius {
                    return Err(Error::Config(format!("sa{} radius must exceed sa{} radius", l + 1, l)));
                }
            }
        }
        if self.sa[3].num_samples < 3 {
            return Err(Error::Config("sa4 needs at least 3 samples for interpolation".into()));
        }
        if self.fp_widths.is_empty() || self.fp_widths.contains(&0) {
            return Err(Error::Config("fp widths must be non-empty and positive".into()));
        }
        if self.max_neighbors == 0 || self.input_dim == 0 {
            return Err(Error::Config("max_neighbors and input_dim must be positive".into()));
        }
        if self.k == 0 || self.k + 1 > self.keypoints() {
            return Err(Error::Config(format!(
                "attention k = {} needs at least k + 1 key points, have {}",
                self.k,
                self.keypoints()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaLayer {
    pub num_samples: usize,
    pub radius: f64,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpLayer {
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub sa: [SaLayer; 4],
    pub fp: FpLayer,
    pub max_neighbors: usize,
    pub input_dim: usize,
}

impl EncoderWeights {
    pub fn feature_dim(&self) -> usize {
        self.fp.mlp.output_dim()
    }

    pub fn min_points(&self) -> usize {
        self.sa[0].num_samples
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = self.input_dim;
        for (l, sa) in self.sa.iter().enumerate() {
            sa.mlp.check_chain(prev + 3, &format!("sa{}", l + 1))?;
            prev = sa.mlp.output_dim();
        }
        let skip = self.sa[2].mlp.output_dim();
        let upper = self.sa[3].mlp.output_dim();
        self.fp.mlp.check_chain(skip + upper, "fp")
    }
}

/// Attention matrices, each `2D × D`; no bias terms.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub k: usize,
    pub self_wf: Array2<f64>,
    pub self_ws: Array2<f64>,
    pub cross_wf: Array2<f64>,
    pub cross_ws: Array2<f64>,
}

impl AttentionWeights {
    pub fn zeros(dim: usize, k: usize) -> Self {
        let z = Array2::zeros((2 * dim, dim));
        Self {
            k,
            self_wf: z.clone(),
            self_ws: z.clone(),
            cross_wf: z.clone(),
            cross_ws: z,
        }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, k: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((2 * dim) as f64).sqrt();
        let mut m = || Array2::from_shape_simple_fn((2 * dim, dim), || rng.random_range(-bound..=bound));
        Self {
            k,
            self_wf: m(),
            self_ws: m(),
            cross_wf: m(),
            cross_ws: m(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for (name, m) in self.named() {
            if m.dim() != (2 * dim, dim) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has shape {:?}, expected ({}, {dim})",
                    m.dim(),
                    2 * dim
                )));
            }
            if !m.iter().all(|v| v.is_finite()) {
                return Err(Error::ShapeMismatch(format!("{name} has non-finite entries")));
            }
        }
        if self.k == 0 {
            return Err(Error::ShapeMismatch("att.k must be positive".into()));
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, &Array2<f64>); 4] {
        [
            ("att.self.wf", &self.self_wf),
            ("att.self.ws", &self.self_ws),
            ("att.cross.wf", &self.cross_wf),
            ("att.cross.ws", &self.cross_ws),
        ]
    }
}

/// Encoder plus attention weights: everything the pipeline learns.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderWeights,
    pub attention: AttentionWeights,
}

/// Tensor shape and flat row-major data, borrowed from a [`Model`].
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl Model {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = build_encoder(cfg, |i, w| Mlp::init(i, w, rng));
        let attention = AttentionWeights::init(cfg.feature_dim(), cfg.k, rng);
        Ok(Self { encoder, attention })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: build_encoder(cfg, Mlp::zeros),
            attention: AttentionWeights::zeros(cfg.feature_dim(), cfg.k),
        })
    }

    pub fn config(&self) -> ModelConfig {
        let e = &self.encoder;
        ModelConfig {
            sa: std::array::from_fn(|l| SaConfig {
                num_samples: e.sa[l].num_samples,
                radius: e.sa[l].radius,
                widths: e.sa[l].mlp.widths(),
            }),
            fp_widths: e.fp.mlp.widths(),
            max_neighbors: e.max_neighbors,
            input_dim: e.input_dim,
            k: self.attention.k,
        }
    }

    /// All-zero weights with this model's shapes, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.params_mut() {
            t.1.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attention.validate(self.encoder.feature_dim())?;
        self.config().validate()
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<TensorRef<'_>> {
        fn push_mlp<'a>(prefix: &str, mlp: &'a Mlp, out: &mut Vec<TensorRef<'a>>) {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push(TensorRef {
                    name: format!("{prefix}.mlp.{i}.weight"),
                    shape: l.weight.shape().to_vec(),
                    data: l.weight.as_slice().expect("standard layout"),
                });
                out.push(TensorRef {
                    name: format!("{prefix}.mlp.{i}.bias"),
                    shape: l.bias.shape().to_vec(),
                    data: l.bias.as_slice().expect("standard layout"),
                });
            }
        }
        let mut out = Vec::new();
        for (l, sa) in self.encoder.sa.iter().enumerate() {
            push_mlp(&format!("sa{}", l + 1), &sa.mlp, &mut out);
        }
        push_mlp("fp", &self.encoder.fp.mlp, &mut out);
        for (name, m) in self.attention.named() {
            out.push(TensorRef {
                name: name.to_string(),
                shape: m.shape().to_vec(),
                data: m.as_slice().expect("standard layout"),
            });
        }
        out
    }

    /// Mutable views of the trainable tensors, same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        fn push_mlp<'a>(prefix: &str, mlp: &'a mut Mlp, out: &mut Vec<(String, &'a mut [f64])>) {
            for (i, l) in mlp.layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.mlp.{i}.weight"), l.weight.as_slice_mut().expect("standard layout")));
                out.push((format!("{prefix}.mlp.{i}.bias"), l.bias.as_slice_mut().expect("standard layout")));
            }
        }
        let Model { encoder, attention } = self;
        for (l, sa) in encoder.sa.iter_mut().enumerate() {
            push_mlp(&format!("sa{}", l + 1), &mut sa.mlp, &mut out);
        }
        push_mlp("fp", &mut encoder.fp.mlp, &mut out);
        let AttentionWeights {
            self_wf,
            self_ws,
            cross_wf,
            cross_ws,
            ..
        } = attention;
        for (name, m) in [
            ("att.self.wf", self_wf),
            ("att.self.ws", self_ws),
            ("att.cross.wf", cross_wf),
            ("att.cross.ws", cross_ws),
        ] {
            out.push((name.to_string(), m.as_slice_mut().expect("standard layout")));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Model, scale: f64) {
        let src = other.params();
        for ((_, dst), s) in self.params_mut().into_iter().zip(src) {
            dst.iter_mut().zip(s.data).for_each(|(d, v)| *d += scale * v);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .params()
            .into_iter()
            .map(|t| (t.name, t.shape, t.data.to_vec()))
            .collect();
        let scalar = |name: String, v: f64| (name, vec![1], vec![v]);
        for (l, sa) in self.encoder.sa.iter().enumerate() {
            tensors.push(scalar(format!("sa{}.num_samples", l + 1), sa.num_samples as f64));
            tensors.push(scalar(format!("sa{}.radius", l + 1), sa.radius));
        }
        tensors.push(scalar("encoder.max_neighbors".into(), self.encoder.max_neighbors as f64));
        tensors.push(scalar("encoder.input_dim".into(), self.encoder.input_dim as f64));
        tensors.push(scalar("att.k".into(), self.attention.k as f64));

        let mut buf = Vec::new();
        buf.extend_from_slice(FRWT_MAGIC);
        buf.extend_from_slice(&FRWT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    /// Parses an `FRWT` buffer and validates the full dimension chain.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let tensors = parse_frwt(bytes, path)?;
        Self::from_tensors(tensors).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn from_tensors(mut t: BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut scalar = |name: &str| -> Result<f64> {
            match t.remove(name) {
                Some((shape, data)) if shape == [1] => Ok(data[0]),
                Some((shape, _)) => Err(Error::ShapeMismatch(format!("{name} has shape {shape:?}, expected [1]"))),
                None => Err(Error::ShapeMismatch(format!("missing tensor {name}"))),
            }
        };
        let mut hp = Vec::new();
        for l in 1..=4 {
            hp.push((scalar(&format!("sa{l}.num_samples"))?, scalar(&format!("sa{l}.radius"))?));
        }
        let max_neighbors = scalar("encoder.max_neighbors")? as usize;
        let input_dim = scalar("encoder.input_dim")? as usize;
        let k = scalar("att.k")? as usize;

        let mut take_mlp = |prefix: &str| -> Result<Mlp> {
            let mut layers = Vec::new();
            for i in 0.. {
                let wname = format!("{prefix}.mlp.{i}.weight");
                let bname = format!("{prefix}.mlp.{i}.bias");
                let Some((wshape, wdata)) = t.remove(&wname) else { break };
                let (bshape, bdata) = t
                    .remove(&bname)
                    .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {bname}")))?;
                if wshape.len() != 2 || bshape.len() != 1 {
                    return Err(Error::ShapeMismatch(format!("{wname}/{bname} have wrong rank")));
                }
                layers.push(Dense {
                    weight: Array2::from_shape_vec((wshape[0], wshape[1]), wdata)
                        .map_err(|e| Error::ShapeMismatch(format!("{wname}: {e}")))?,
                    bias: Array1::from_vec(bdata),
                });
            }
            Ok(Mlp { layers })
        };
        let mut sa = Vec::new();
        for (l, &(n, r)) in hp.iter().enumerate() {
            sa.push(SaLayer {
                num_samples: n as usize,
                radius: r,
                mlp: take_mlp(&format!("sa{}", l + 1))?,
            });
        }
        let fp = FpLayer {
            mlp: take_mlp("fp")?,
        };
        let mut mat = |name: &str| -> Result<Array2<f64>> {
            let (shape, data) = t
                .remove(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name}")))?;
            if shape.len() != 2 {
                return Err(Error::ShapeMismatch(format!("{name} must be rank 2")));
            }
            Array2::from_shape_vec((shape[0], shape[1]), data)
                .map_err(|e| Error::ShapeMismatch(format!("{name}: {e}")))
        };
        let attention = AttentionWeights {
            k,
            self_wf: mat("att.self.wf")?,
            self_ws: mat("att.self.ws")?,
            cross_wf: mat("att.cross.wf")?,
            cross_ws: mat("att.cross.ws")?,
        };
        if let Some(name) = t.keys().next() {
            return Err(Error::ShapeMismatch(format!("unexpected tensor {name}")));
        }
        let model = Model {
            encoder: EncoderWeights {
                sa: sa.try_into().expect("four SA layers"),
                fp,
                max_neighbors,
                input_dim,
            },
            attention,
        };
        model.validate()?;
        Ok(model)
    }
}

fn build_encoder(cfg: &ModelConfig, mut mlp: impl FnMut(usize, &[usize]) -> Mlp) -> EncoderWeights {
    let mut prev = cfg.input_dim;
    let sa: Vec<SaLayer> = cfg
        .sa
        .iter()
        .map(|c| {
            let layer = SaLayer {
                num_samples: c.num_samples,
                radius: c.radius,
                mlp: mlp(prev + 3, &c.widths),
            };
            prev = layer.mlp.output_dim();
            layer
        })
        .collect();
    let fp_in = cfg.sa[2].widths.last().unwrap() + cfg.sa[3].widths.last().unwrap();
    EncoderWeights {
        sa: sa.try_into().expect("four SA layers"),
        fp: FpLayer {
            mlp: mlp(fp_in, &cfg.fp_widths),
        },
        max_neighbors: cfg.max_neighbors,
        input_dim: cfg.input_dim,
    }
}

type TensorTable = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn parse_frwt(bytes: &[u8], path: &Path) -> Result<TensorTable> {
    struct Reader<'a> {
        b: &'a [u8],
        pos: usize,
    }
    impl Reader<'_> {
        fn take(&mut self, n: usize) -> Option<&[u8]> {
            let end = self.pos.checked_add(n)?;
            let s = self.b.get(self.pos..end)?;
            self.pos = end;
            Some(s)
        }
        fn u32(&mut self) -> Option<u32> {
            self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
        }
        fn u64(&mut self) -> Option<u64> {
            self.take(8).map(|s| u64::from_le_bytes(s.try_into().unwrap()))
        }
    }
    let truncated = || Error::format(path, "truncated FRWT file");
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(4).ok_or_else(truncated)? != FRWT_MAGIC {
        return Err(Error::format(path, "bad magic, expected FRWT"));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != FRWT_VERSION {
        return Err(Error::format(path, format!("unsupported FRWT version {version}")));
    }
    let count = r.u32().ok_or_else(truncated)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        if rank > 8 {
            return Err(Error::format(path, format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(truncated)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(path, format!("{name}: shape overflow")))?;
        let raw = r
            .take(numel.checked_mul(4).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if out.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor table"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rounded(m: &Model) -> Model {
        let mut r = m.clone();
        for (_, t) in r.params_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        r
    }

    #[test]
    fn presets_are_valid() {
        for cfg in [ModelConfig::full(), ModelConfig::desk(), ModelConfig::tiny()] {
            cfg.validate().unwrap();
            let m = Model::zeros(&cfg).unwrap();
            m.validate().unwrap();
            assert_eq!(m.config(), cfg);
        }
        assert_eq!(ModelConfig::full().keypoints(), 512);
        assert_eq!(ModelConfig::full().feature_dim(), 128);
        let full = ModelConfig::full();
        assert!(full.sa.windows(2).all(|w| w[0].radius < w[1].radius));
    }

    #[test]
    fn frwt_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(&ModelConfig::tiny(), &mut rng).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"FRWT");
        let back = Model::from_bytes(&bytes, Path::new("m.frwt")).unwrap();
        assert_eq!(back, rounded(&m));
        // f32-representable weights survive exactly
        assert_eq!(Model::from_bytes(&back.to_bytes(), Path::new("m")).unwrap(), back);
    }

    #[test]
    fn frwt_rejects_broken_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Model::init(&ModelConfig::tiny(), &mut rng).unwrap();
        m.encoder.sa[1].mlp.layers[0] = Dense::zeros(5, 6);
        let err = Model::from_bytes(&m.to_bytes(), Path::new("bad.frwt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.frwt") && msg.contains("sa2.mlp.0.weight"), "{msg}");

        let m = Model::init(&ModelConfig::tiny(), &mut rng).unwrap();
        let bytes = m.to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3], Path::new("t")).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Model::from_bytes(&bad, Path::new("v")).is_err());
    }

    #[test]
    fn param_views_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::init(&ModelConfig::tiny(), &mut rng).unwrap();
        let names: Vec<String> = m.params().into_iter().map(|t| t.name).collect();
        let names_mut: Vec<String> = m.params_mut().into_iter().map(|t| t.0).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"fp.mlp.1.bias".to_string()));
        let g = m.clone();
        m.add_scaled(&g, -1.0);
        assert!(m.params().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk();
        cfg.sa[2].radius = cfg.sa[1].radius;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.k = 16;
        assert!(cfg.validate().is_err());
    }
}
