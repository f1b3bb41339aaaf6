//! Deep intensity field network: a shared 2D U-Net encoder over the K
//! projections, per-point view-specific features gathered through the scanner
//! projection, cross-view fusion and an MLP intensity regressor.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use difct_tensor::{read_checkpoint, write_checkpoint, Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::ScannerGeometry;
use crate::projector::ProjectionStack;
use crate::volume::{PointBatch, Volume3D};

/// Default number of points evaluated per inference chunk.
const OUTPUT_WEIGHT: &str = "head.fc4.weight";

pub const DEFAULT_CHUNK: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Two-layer MLP across the view axis, applied per channel.
    Mlp,
    MaxPool,
    AvgPool,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "max" | "max_pool" => Ok(Self::MaxPool),
            "avg" | "avg_pool" | "mean" => Ok(Self::AvgPool),
            other => Err(invalid(format!("unknown fusion {other:?} (expected mlp, max_pool or avg_pool)"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::MaxPool => "max_pool",
            Self::AvgPool => "avg_pool",
        })
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifConfig {
    /// Encoder output channels `C`.
    pub channels: usize,
    /// Width of the first encoder level; doubles per level.
    pub base_width: usize,
    /// Number of 2x down-sampling stages.
    pub depth: usize,
    pub fusion: Fusion,
    /// Number of views `K` the model is built for.
    pub n_views: usize,
}

impl DifConfig {
    /// Desk-scale defaults: `C = 32` on a three-stage encoder of base width 8.
    pub fn desk(n_views: usize, fusion: Fusion) -> Self {
        Self {
            channels: 32,
            base_width: 8,
            depth: 3,
            fusion,
            n_views,
        }
    }

    /// Full-scale defaults: `C = 128` on a standard four-stage U-Net of base width 64.
    pub fn full(n_views: usize, fusion: Fusion) -> Self {
        Self {
            channels: 128,
            base_width: 64,
            depth: 4,
            fusion,
            n_views,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 {
            return Err(invalid(format!("need at least 8 feature channels, got {}", self.channels)));
        }
        if self.base_width == 0 || self.n_views == 0 {
            return Err(invalid("base width and view count must be positive"));
        }
        if self.depth > 8 {
            return Err(invalid(format!("encoder depth {} is unreasonably large", self.depth)));
        }
        Ok(())
    }

    /// `C -> 2C -> C/2 -> C/8 -> 1`.
    pub fn head_widths(&self) -> [usize; 5] {
        let c = self.channels;
        [c, 2 * c, c / 2, c / 8, 1]
    }

    /// Fusion MLP hidden width `floor(K/2)`, at least 1.
    pub fn fusion_hidden(&self) -> usize {
        (self.n_views / 2).max(1)
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// `(name, shape, fan_in)` of every parameter, in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<_>, name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k));
            out.push((format!("{name}.bias"), vec![cout], cin * k * k));
        };
        let mut cin = 1;
        for level in 0..self.depth {
            let w = self.width(level);
            conv(&mut out, format!("enc.down{level}.conv1"), cin, w, 3);
            conv(&mut out, format!("enc.down{level}.conv2"), w, w, 3);
            cin = w;
        }
        let bottom = self.width(self.depth);
        conv(&mut out, "enc.bottom.conv1".into(), cin, bottom, 3);
        conv(&mut out, "enc.bottom.conv2".into(), bottom, bottom, 3);
        let mut below = bottom;
        for level in (0..self.depth).rev() {
            let w = self.width(level);
            conv(&mut out, format!("enc.up{level}.conv1"), below + w, w, 3);
            conv(&mut out, format!("enc.up{level}.conv2"), w, w, 3);
            below = w;
        }
        conv(&mut out, "enc.out".into(), below, self.channels, 1);
        let linear = |out: &mut Vec<_>, name: String, din: usize, dout: usize| {
            out.push((format!("{name}.weight"), vec![dout, din], din));
            out.push((format!("{name}.bias"), vec![dout], din));
        };
        if self.fusion == Fusion::Mlp {
            linear(&mut out, "fusion.fc1".into(), self.n_views, self.fusion_hidden());
            linear(&mut out, "fusion.fc2".into(), self.fusion_hidden(), 1);
        }
        let widths = self.head_widths();
        for (i, pair) in widths.windows(2).enumerate() {
            linear(&mut out, format!("head.fc{}", i + 1), pair[0], pair[1]);
        }
        out
    }
}

/// Text manifest stored next to a `.difw` checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub fusion: Fusion,
    pub n_views: usize,
    pub angles: Vec<f64>,
    pub input_scale: f64,
}

pub const MANIFEST_FORMAT: &str = "difw-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Path of the manifest belonging to a checkpoint.
pub fn manifest_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".toml");
    checkpoint.with_file_name(name)
}

/// Parameters plus the acquisition binding they were trained for.
#[derive(Debug, Clone)]
pub struct DifModel<T> {
    config: DifConfig,
    angles: Vec<f64>,
    input_scale: f64,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// Parameter vars registered on a graph, looked up by name.
struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

impl<T: Scalar> DifModel<T> {
    /// He-uniform weights and zero biases; the output layer starts at zero.
    pub fn new(config: DifConfig, angles: Vec<f64>, input_scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout();
        let names = layout.iter().map(|(n, _, _)| n.clone()).collect();
        let params = layout
            .iter()
            .map(|(name, shape, fan_in)| {
                if name.ends_with(".bias") || name == OUTPUT_WEIGHT {
                    Tensor::zeros(shape)
                } else {
                    let bound = (6.0 / *fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
                }
            })
            .collect();
        let model = Self {
            config,
            angles,
            input_scale,
            names,
            params,
        };
        model.validate()?;
        Ok(model)
    }

    /// Rebuilds a model from named tensors, checking names and shapes against the layout.
    pub fn from_named(config: DifConfig, angles: Vec<f64>, input_scale: f64, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let layout = config.layout();
        if named.len() != layout.len() {
            return Err(invalid(format!(
                "model needs {} tensors, checkpoint has {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for ((name, t), (want, shape, _)) in named.into_iter().zip(&layout) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(invalid(format!(
                    "tensor {name:?} {:?} does not match expected {want:?} {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        let model = Self {
            config,
            angles,
            input_scale,
            names,
            params,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.angles.len() != self.config.n_views {
            return Err(invalid(format!(
                "model is configured for {} views but has {} angles",
                self.config.n_views,
                self.angles.len()
            )));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(invalid(format!("input scale must be positive, got {}", self.input_scale)));
        }
        Ok(())
    }

    pub fn config(&self) -> &DifConfig {
        &self.config
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Divisor applied to raw projection values before encoding.
    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> DifModel<U> {
        DifModel {
            config: self.config.clone(),
            angles: self.angles.clone(),
            input_scale: self.input_scale,
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            channels: self.config.channels,
            base_width: self.config.base_width,
            depth: self.config.depth,
            fusion: self.config.fusion,
            n_views: self.config.n_views,
            angles: self.angles.clone(),
            input_scale: self.input_scale,
        }
    }

    /// Writes the `.difw` checkpoint and its `.difw.toml` manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, &Tensor<T>)> = self.names.iter().cloned().zip(&self.params).collect();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &named)?;
        let manifest = toml::to_string(&self.manifest()).map_err(|e| invalid(format!("cannot encode manifest: {e}")))?;
        crate::io::write_atomic(path, &buf)?;
        crate::io::write_atomic(&manifest_path(path), manifest.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mpath = manifest_path(path);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: ModelManifest = toml::from_str(&text).map_err(|e| Error::Format {
            path: mpath.display().to_string(),
            detail: e.to_string(),
        })?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format {
                path: mpath.display().to_string(),
                detail: format!("expected format {MANIFEST_FORMAT:?}, found {:?}", m.format),
            });
        }
        if m.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: "model manifest",
                path: mpath.display().to_string(),
                expected: MANIFEST_VERSION.to_string(),
                found: m.version.to_string(),
            });
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let named = read_checkpoint(bytes.as_slice()).map_err(|e| crate::io::tensor_format_error(path, e))?;
        let config = DifConfig {
            channels: m.channels,
            base_width: m.base_width,
            depth: m.depth,
            fusion: m.fusion,
            n_views: m.n_views,
        };
        let named = named.into_iter().map(|(n, t)| (n, t.cast())).collect();
        Self::from_named(config, m.angles, m.input_scale, named)
    }

    /// Checks detector size, view count and (for MLP fusion) the angle list.
    pub fn check_inputs(&self, proj: &ProjectionStack, geom: &ScannerGeometry) -> Result<()> {
        proj.check_compatible(geom)?;
        let unit = 1usize << self.config.depth;
        if !geom.det_rows.is_multiple_of(unit) || !geom.det_cols.is_multiple_of(unit) {
            return Err(invalid(format!(
                "detector {}x{} is not divisible by 2^{} required by the encoder",
                geom.det_rows, geom.det_cols, self.config.depth
            )));
        }
        if self.config.fusion == Fusion::Mlp {
            if proj.n_views() != self.config.n_views {
                return Err(invalid(format!(
                    "MLP fusion was trained for K = {} views, got {}",
                    self.config.n_views,
                    proj.n_views()
                )));
            }
            if proj.angles().iter().zip(&self.angles).any(|(a, b)| (a - b).abs() > 1e-9) {
                return Err(invalid("MLP fusion requires the training angle list"));
            }
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool, filter: impl Fn(&str) -> bool) -> Bound {
        let mut vars = Vec::new();
        let mut index = HashMap::new();
        for (name, p) in self.names.iter().zip(&self.params) {
            if !filter(name) {
                continue;
            }
            let v = if trainable { g.param(p.clone()) } else { g.constant(p.clone()) };
            index.insert(name.clone(), vars.len());
            vars.push(v);
        }
        Bound { vars, index }
    }

    /// Normalized projections as an encoder batch `[K, 1, R, C]`.
    fn input_tensor(&self, proj: &ProjectionStack) -> Result<Tensor<T>> {
        let scale = 1.0 / self.input_scale;
        let data = proj.data().iter().map(|&v| T::lit(v as f64 * scale)).collect();
        Ok(Tensor::new(&[proj.n_views(), 1, proj.rows(), proj.cols()], data)?)
    }

    fn conv_relu(g: &mut Graph<T>, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let y = g.conv2d(x, b.get(&format!("{name}.weight")), b.get(&format!("{name}.bias")), 1, 1)?;
        Ok(g.relu(y))
    }

    fn encode_graph(&self, g: &mut Graph<T>, b: &Bound, input: Var) -> Result<Var> {
        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth);
        for level in 0..self.config.depth {
            x = Self::conv_relu(g, b, x, &format!("enc.down{level}.conv1"))?;
            x = Self::conv_relu(g, b, x, &format!("enc.down{level}.conv2"))?;
            skips.push(x);
            x = g.max_pool2d(x)?;
        }
        x = Self::conv_relu(g, b, x, "enc.bottom.conv1")?;
        x = Self::conv_relu(g, b, x, "enc.bottom.conv2")?;
        for level in (0..self.config.depth).rev() {
            let up = g.upsample2x(x)?;
            x = g.concat(up, skips[level], 1)?;
            x = Self::conv_relu(g, b, x, &format!("enc.up{level}.conv1"))?;
            x = Self::conv_relu(g, b, x, &format!("enc.up{level}.conv2"))?;
        }
        Ok(g.conv2d(x, b.get("enc.out.weight"), b.get("enc.out.bias"), 1, 0)?)
    }

    /// `[K, N, C]` view-specific features -> `[N, C]`.
    fn fuse_graph(&self, g: &mut Graph<T>, b: &Bound, set: Var) -> Result<Var> {
        let s = g.shape(set).to_vec();
        match self.config.fusion {
            Fusion::MaxPool => Ok(g.max_axis(set, 0)?),
            Fusion::AvgPool => Ok(g.mean_axis(set, 0)?),
            Fusion::Mlp => {
                if s[0] != self.config.n_views {
                    return Err(invalid(format!(
                        "MLP fusion expects K = {} views, got {}",
                        self.config.n_views, s[0]
                    )));
                }
                let per_channel = g.permute(set, &[1, 2, 0])?;
                let h = g.linear(per_channel, b.get("fusion.fc1.weight"), b.get("fusion.fc1.bias"))?;
                let h = g.relu(h);
                let y = g.linear(h, b.get("fusion.fc2.weight"), b.get("fusion.fc2.bias"))?;
                Ok(g.reshape(y, &[s[1], s[2]])?)
            }
        }
    }

    /// `[N, C]` -> `[N]`.
    fn regress_graph(&self, g: &mut Graph<T>, b: &Bound, fused: Var) -> Result<Var> {
        let n = g.shape(fused)[0];
        let mut x = fused;
        for layer in 1..=4 {
            x = g.linear(x, b.get(&format!("head.fc{layer}.weight")), b.get(&format!("head.fc{layer}.bias")))?;
            if layer < 4 {
                x = g.relu(x);
            }
        }
        Ok(g.reshape(x, &[n])?)
    }

    fn points_graph(&self, g: &mut Graph<T>, b: &Bound, features: Var, coords: &Tensor<T>) -> Result<Var> {
        let set = g.grid_sample_bilinear(features, coords)?;
        let fused = self.fuse_graph(g, b, set)?;
        self.regress_graph(g, b, fused)
    }

    /// One feature map `[C, R, C_det]` per view, stacked as `[K, C, R, C_det]`.
    pub fn encode(&self, proj: &ProjectionStack) -> Result<Tensor<T>> {
        let unit = 1usize << self.config.depth;
        if !proj.rows().is_multiple_of(unit) || !proj.cols().is_multiple_of(unit) {
            return Err(invalid(format!(
                "projection size {}x{} is not divisible by 2^{}",
                proj.rows(),
                proj.cols(),
                self.config.depth
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, |n| n.starts_with("enc."));
        let input = g.constant(self.input_tensor(proj)?);
        let out = self.encode_graph(&mut g, &b, input)?;
        Ok(g.value(out).clone())
    }

    /// MLP or pooling fusion of a `[K, N, C]` feature set into `[N, C]`.
    pub fn fuse(&self, feature_set: &Tensor<T>) -> Result<Tensor<T>> {
        if feature_set.rank() != 3 || feature_set.shape()[2] != self.config.channels {
            return Err(invalid(format!(
                "feature set must be [K, N, {}], got {:?}",
                self.config.channels,
                feature_set.shape()
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, |n| n.starts_with("fusion."));
        let set = g.constant(feature_set.clone());
        let out = self.fuse_graph(&mut g, &b, set)?;
        Ok(g.value(out).clone())
    }

    /// Head MLP on fused features `[N, C]`, giving `[N]` unclipped intensities.
    pub fn regress(&self, fused: &Tensor<T>) -> Result<Tensor<T>> {
        if fused.rank() != 2 || fused.shape()[1] != self.config.channels {
            return Err(invalid(format!(
                "fused features must be [N, {}], got {:?}",
                self.config.channels,
                fused.shape()
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, |n| n.starts_with("head."));
        let x = g.constant(fused.clone());
        let out = self.regress_graph(&mut g, &b, x)?;
        Ok(g.value(out).clone())
    }

    /// Unclipped predictions at arbitrary world points.
    pub fn predict_points(&self, proj: &ProjectionStack, geom: &ScannerGeometry, points: &[[f64; 3]]) -> Result<Vec<T>> {
        self.check_inputs(proj, geom)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, |_| true);
        let input = g.constant(self.input_tensor(proj)?);
        let features = self.encode_graph(&mut g, &b, input)?;
        let coords = projection_coords(geom, points)?;
        let out = self.points_graph(&mut g, &b, features, &coords)?;
        Ok(g.value(out).data().to_vec())
    }

    /// MSE on `batch` and the gradient of every parameter (storage order).
    pub fn loss_and_grads(&self, proj: &ProjectionStack, geom: &ScannerGeometry, batch: &PointBatch) -> Result<(f64, Vec<Vec<T>>)> {
        self.check_inputs(proj, geom)?;
        let values = batch
            .values
            .as_ref()
            .ok_or_else(|| invalid("training points need ground-truth values"))?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, true, |_| true);
        let input = g.constant(self.input_tensor(proj)?);
        let features = self.encode_graph(&mut g, &b, input)?;
        let coords = projection_coords(geom, &batch.coords)?;
        let pred = self.points_graph(&mut g, &b, features, &coords)?;
        let target = g.constant(Tensor::new(&[values.len()], values.iter().map(|&v| T::lit(v as f64)).collect())?);
        let loss = g.mse_loss(pred, target)?;
        let loss_value = g.value(loss).item()?.as_f64();
        if !loss_value.is_finite() {
            return Ok((loss_value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = b
            .vars
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| g.grad(v).map_or_else(|| vec![T::zero(); p.numel()], <[T]>::to_vec))
            .collect();
        Ok((loss_value, grads))
    }

    /// MSE on `batch` without gradients.
    pub fn loss(&self, proj: &ProjectionStack, geom: &ScannerGeometry, batch: &PointBatch) -> Result<f64> {
        let values = batch
            .values
            .as_ref()
            .ok_or_else(|| invalid("evaluation points need ground-truth values"))?;
        let pred = self.predict_points(proj, geom, &batch.coords)?;
        let sse: f64 = pred.iter().zip(values).map(|(p, &v)| (p.as_f64() - v as f64).powi(2)).sum();
        Ok(sse / values.len().max(1) as f64)
    }

    /// Evaluates the field on an `out_shape` voxel-center lattice over the
    /// geometry's volume extent, `chunk_size` points at a time, clipped to `[0, 1]`.
    pub fn reconstruct(&self, proj: &ProjectionStack, geom: &ScannerGeometry, out_shape: [usize; 3], chunk_size: usize) -> Result<Volume3D> {
        self.check_inputs(proj, geom)?;
        if chunk_size == 0 {
            return Err(invalid("chunk size must be positive"));
        }
        if out_shape.contains(&0) {
            return Err(invalid(format!("output shape must be positive, got {out_shape:?}")));
        }
        let features = self.encode(proj)?;
        let extent = geom.volume_extent();
        let step: [f64; 3] = std::array::from_fn(|a| extent[a] / out_shape[a] as f64);
        let n: usize = out_shape.iter().product();
        let mut data = vec![0f32; n];
        let plane = out_shape[1] * out_shape[2];
        data.par_chunks_mut(chunk_size).enumerate().try_for_each_init(
            || {
                let mut g = Graph::new();
                let f = g.constant(features.clone());
                let b = self.bind(&mut g, false, |n| !n.starts_with("enc."));
                (g, f, b)
            },
            |(g, f, b), (ci, out)| -> Result<()> {
                let base = g.len();
                let start = ci * chunk_size;
                let pts: Vec<[f64; 3]> = (start..start + out.len())
                    .map(|idx| {
                        let (i, j, k) = (idx / plane, idx % plane / out_shape[2], idx % out_shape[2]);
                        [
                            (i as f64 + 0.5) * step[0],
                            (j as f64 + 0.5) * step[1],
                            (k as f64 + 0.5) * step[2],
                        ]
                    })
                    .collect();
                let coords = projection_coords(geom, &pts)?;
                let pred = self.points_graph(g, b, *f, &coords)?;
                for (o, p) in out.iter_mut().zip(g.value(pred).data()) {
                    *o = p.as_f64().clamp(0.0, 1.0) as f32;
                }
                g.truncate(base);
                Ok(())
            },
        )?;
        Volume3D::new(out_shape, step, data)
    }
}

/// Continuous detector coordinates `[K, N, 2]` (column, row) of `points` in every view.
pub fn projection_coords<T: Scalar>(geom: &ScannerGeometry, points: &[[f64; 3]]) -> Result<Tensor<T>> {
    let k = geom.n_views();
    let mut data = Vec::with_capacity(k * points.len() * 2);
    for view in 0..k {
        let vp = geom.view_projector(view)?;
        for &p in points {
            let (u, v) = vp.project(p)?;
            data.push(T::lit(u));
            data.push(T::lit(v));
        }
    }
    Ok(Tensor::new(&[k, points.len(), 2], data)?)
}

/// View-specific features `[K, N, C]` of `points` gathered from `features [K, C, R, C_det]`.
pub fn query_features<T: Scalar>(features: &Tensor<T>, geom: &ScannerGeometry, points: &[[f64; 3]]) -> Result<Tensor<T>> {
    if features.rank() != 4 || features.shape()[0] != geom.n_views() {
        return Err(invalid(format!(
            "features must be [K = {}, C, H, W], got {:?}",
            geom.n_views(),
            features.shape()
        )));
    }
    let coords = projection_coords(geom, points)?;
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let out = g.grid_sample_bilinear(f, &coords)?;
    Ok(g.value(out).clone())
}
