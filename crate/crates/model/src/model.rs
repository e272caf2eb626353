//! Convolutional encoder, query decoder and prediction heads.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::ops::{layer_norm_slow, sigmoid, softmax};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rise_core::frame::RgbImage;

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::output::ModelOutput;

const LN_EPS: f32 = 1e-5;
/// Side of the initial box around each query's reference centre.
const REF_BOX: f64 = 0.25;
/// Width of the per-query dynamic mask layer.
const DYN_HIDDEN: usize = 8;
/// Relative coordinates fed to the mask head are divided by this.
const REL_SCALE: f64 = 0.25;

/// Named trainable tensors in a fixed creation order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamStore {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }
}

struct Builder {
    rng: ChaCha8Rng,
    device: Device,
    store: ParamStore,
}

impl Builder {
    fn tensor(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.store.names.push(name.to_string());
        self.store.vars.push(var);
        Ok(t)
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound) as f32).collect();
        self.tensor(name, shape, data)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.tensor(name, shape, vec![value; n])
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Conv> {
        let fan_in = (c_in * k * k) as f64;
        Ok(Conv {
            w: self.uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], (6.0 / fan_in).sqrt())?,
            b: self.constant(&format!("{name}.bias"), &[c_out], 0.0)?,
            pad: k / 2,
        })
    }

    fn linear_with(&mut self, name: &str, d_in: usize, d_out: usize, bound: f64, bias: f32) -> Result<Linear> {
        Ok(Linear {
            w: self.uniform(&format!("{name}.weight"), &[d_in, d_out], bound)?,
            b: self.constant(&format!("{name}.bias"), &[d_out], bias)?,
        })
    }

    /// He-uniform for layers followed by ReLU.
    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        self.linear_with(name, d_in, d_out, (6.0 / d_in as f64).sqrt(), 0.0)
    }

    /// Glorot-uniform for layers feeding attention, norms and heads.
    fn linear_xavier(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        self.linear_with(name, d_in, d_out, (6.0 / (d_in + d_out) as f64).sqrt(), 0.0)
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.constant(&format!("{name}.gamma"), &[d], 1.0)?,
            beta: self.constant(&format!("{name}.beta"), &[d], 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear_xavier(&format!("{name}.q"), d, d)?,
            k: self.linear_xavier(&format!("{name}.k"), d, d)?,
            v: self.linear_xavier(&format!("{name}.v"), d, d)?,
            o: self.linear_xavier(&format!("{name}.o"), d, d)?,
            scale: 1.0 / (d as f64).sqrt(),
        })
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: Tensor,
    b: Tensor,
    pad: usize,
}

impl Conv {
    /// Convolution as shifted views times a weight matrix; on CPU this
    /// backpropagates far faster than the native kernel at these sizes.
    fn forward(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        let (c_out, c_in, k, _) = self.w.dims4()?;
        let (b, _, h, w) = x.dims4()?;
        let weight = self.w.reshape((c_out, c_in * k * k))?;
        let bias = self.b.reshape((c_out, 1))?;
        if k == 1 && stride == 1 {
            let y = weight.broadcast_matmul(&x.flatten_from(2)?)?.broadcast_add(&bias)?;
            return Ok(y.reshape((b, c_out, h, w))?);
        }
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        let (ho, wo) = ((hp - k) / stride + 1, (wp - k) / stride + 1);
        // pad to a multiple of the stride so each tap is a plain slice of
        // the phase-split input
        let (hs, ws) = (hp.div_ceil(stride), wp.div_ceil(stride));
        let xp = x
            .pad_with_zeros(2, self.pad, self.pad + hs * stride - hp)?
            .pad_with_zeros(3, self.pad, self.pad + ws * stride - wp)?
            .reshape((b, c_in, hs, stride, ws, stride))?;
        let mut views = Vec::with_capacity(k * k);
        for dy in 0..k {
            for dx in 0..k {
                let v = xp
                    .narrow(2, dy / stride, ho)?
                    .narrow(3, dy % stride, 1)?
                    .narrow(4, dx / stride, wo)?
                    .narrow(5, dx % stride, 1)?;
                views.push(v.reshape((b, c_in, ho, wo))?);
            }
        }
        let cols = Tensor::stack(&views, 2)?;
        let cols = cols.reshape((b, c_in * k * k, ho * wo))?;
        let y = weight.broadcast_matmul(&cols)?.broadcast_add(&bias)?;
        Ok(y.reshape((b, c_out, ho, wo))?)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.w)?.broadcast_add(&self.b)?)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: Tensor,
    beta: Tensor,
}

impl Norm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm_slow(x, &self.gamma, &self.beta, LN_EPS)?)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    scale: f64,
}

impl Attention {
    fn forward(&self, queries: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(queries)?;
        let k = self.k.forward(memory)?;
        let v = self.v.forward(memory)?;
        let logits = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * self.scale)?;
        let weights = softmax(&logits, D::Minus1)?;
        self.o.forward(&weights.matmul(&v)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attention,
    norm_self: Norm,
    cross_attn: Attention,
    norm_cross: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm_ffn: Norm,
}

impl DecoderLayer {
    fn forward(&self, q: &Tensor, qpos: &Tensor, memory: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let qp = q.broadcast_add(qpos)?;
        let q = self.norm_self.forward(&(q + self.self_attn.forward(&qp, &qp)?)?)?;
        let keyed = memory.broadcast_add(pos)?;
        let q = self.norm_cross.forward(&(&q + self.cross_attn.forward(&q.broadcast_add(qpos)?, &keyed)?)?)?;
        let hidden = self.ffn_in.forward(&q)?.relu()?;
        self.norm_ffn.forward(&(&q + self.ffn_out.forward(&hidden)?)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv,
    refine: Conv,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.down.forward(x, 2)?.relu()?;
        Ok(self.refine.forward(&x, 1)?.relu()?)
    }
}

/// The segmentation network. Cloning shares parameters.
#[derive(Debug, Clone)]
pub struct SegModel {
    config: ModelConfig,
    device: Device,
    params: ParamStore,
    stem: Conv,
    stages: [Stage; 3],
    input_proj: Conv,
    queries: Tensor,
    layers: Vec<DecoderLayer>,
    class_head: Linear,
    box_hidden: Linear,
    box_out: Linear,
    mask_hidden: Linear,
    mask_out: Linear,
    embed_head: Linear,
    laterals: [Conv; 4],
    coord_proj: Conv,
    mask_refine: Conv,
    pos: Tensor,
    query_pos: Tensor,
    /// Memory token under each query's reference centre.
    query_cells: Tensor,
    anchors: Vec<[f64; 2]>,
    box_prior: Tensor,
    coords: Tensor,
    unit_coords: Tensor,
}

impl SegModel {
    /// Builds a model with parameters drawn from a seeded ChaCha stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
            store: ParamStore {
                names: Vec::new(),
                vars: Vec::new(),
            },
        };
        let c = config.channels;
        let d = config.d_model;
        let m = config.mask_dim;

        let stem = b.conv("stem", 3, c[0], 3)?;
        let stages = [
            Stage { down: b.conv("stage1.down", c[0], c[1], 3)?, refine: b.conv("stage1.refine", c[1], c[1], 3)? },
            Stage { down: b.conv("stage2.down", c[1], c[2], 3)?, refine: b.conv("stage2.refine", c[2], c[2], 3)? },
            Stage { down: b.conv("stage3.down", c[2], c[3], 3)?, refine: b.conv("stage3.refine", c[3], c[3], 3)? },
        ];
        let input_proj = b.conv("input_proj", c[3], d, 1)?;
        let queries = b.uniform("queries", &[config.queries, d], 1.0)?;
        let mut layers = Vec::with_capacity(config.decoder_layers);
        for i in 0..config.decoder_layers {
            let p = format!("decoder{i}");
            layers.push(DecoderLayer {
                self_attn: b.attention(&format!("{p}.self_attn"), d)?,
                norm_self: b.norm(&format!("{p}.norm_self"), d)?,
                cross_attn: b.attention(&format!("{p}.cross_attn"), d)?,
                norm_cross: b.norm(&format!("{p}.norm_cross"), d)?,
                ffn_in: b.linear(&format!("{p}.ffn_in"), d, config.ffn_dim)?,
                ffn_out: b.linear_xavier(&format!("{p}.ffn_out"), config.ffn_dim, d)?,
                norm_ffn: b.norm(&format!("{p}.norm_ffn"), d)?,
            });
        }
        let prior_bias = -((1.0 - config.prior_prob) / config.prior_prob).ln() as f32;
        let class_head = b.linear_with("class_head", d, config.num_classes, (6.0 / (d + 1) as f64).sqrt() * 0.1, prior_bias)?;
        let box_hidden = b.linear("box_hidden", d, d)?;
        // small init so early boxes follow the reference prior
        let box_out = b.linear_with("box_out", d, 4, 0.01, 0.0)?;
        let mask_hidden = b.linear("mask_hidden", d, d)?;
        let mask_out = b.linear_xavier("mask_out", d, dynamic_params(m))?;
        let embed_head = b.linear_xavier("embed_head", d, config.embed_dim)?;
        let laterals = [
            b.conv("lateral0", c[0], m, 1)?,
            b.conv("lateral1", c[1], m, 1)?,
            b.conv("lateral2", c[2], m, 1)?,
            b.conv("lateral3", c[3], m, 1)?,
        ];
        let coord_proj = b.conv("coord_proj", 2, m, 1)?;
        let mask_refine = b.conv("mask_refine", m, m, 1)?;

        let pos = positional_encoding(config.height / 8, config.width / 8, d, &device)?;
        let coords = coordinate_grid(config.height, config.width, &device)?;
        let unit_coords = ((coords.reshape((1, 1, 2, config.height * config.width))? + 1.0)? * 0.5)?;
        let refs = reference_points(config.queries, config.height, config.width);
        let query_pos = Tensor::from_vec(encode_points(&refs, d), (1, config.queries, d), &device)?;
        let box_prior = box_prior(&refs, &device)?;
        let (mh, mw) = (config.height / 8, config.width / 8);
        let cells: Vec<u32> = refs
            .iter()
            .map(|&(x, y)| (((y * mh as f64) as usize).min(mh - 1) * mw + ((x * mw as f64) as usize).min(mw - 1)) as u32)
            .collect();
        let query_cells = Tensor::new(cells, &device)?;
        Ok(Self {
            params: b.store,
            config,
            device,
            stem,
            stages,
            input_proj,
            queries,
            layers,
            class_head,
            box_hidden,
            box_out,
            mask_hidden,
            mask_out,
            embed_head,
            laterals,
            coord_proj,
            mask_refine,
            pos,
            query_pos,
            query_cells,
            anchors: refs.iter().map(|&(x, y)| [x, y]).collect(),
            box_prior,
            coords,
            unit_coords,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars.clone()
    }

    /// Stacks frames into a `B×3×H×W` tensor.
    pub fn images_to_tensor(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let (h, w) = (self.config.height, self.config.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height() != h || img.width() != w {
                return Err(ModelError::Config(format!(
                    "image is {}x{}, model expects {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
            data.extend(img.to_chw());
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &self.device)?)
    }

    /// Full forward pass, differentiable with respect to the parameters.
    pub fn forward(&self, images: &Tensor) -> Result<ModelOutput> {
        let (bsz, _, h, w) = images.dims4()?;
        if h != self.config.height || w != self.config.width {
            return Err(ModelError::Config(format!(
                "input is {h}x{w}, model expects {}x{}",
                self.config.height, self.config.width
            )));
        }
        let x = ((images - 0.5)? * 4.0)?;
        let f0 = self.stem.forward(&x, 1)?.relu()?;
        let f1 = self.stages[0].forward(&f0)?;
        let f2 = self.stages[1].forward(&f1)?;
        let f3 = self.stages[2].forward(&f2)?;

        let d = self.config.d_model;
        let memory = self.input_proj.forward(&f3, 1)?.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let local = memory.index_select(&self.query_cells, 1)?;
        let mut q = local.broadcast_add(&self.queries.unsqueeze(0)?)?;
        debug_assert_eq!(q.dims(), &[bsz, self.config.queries, d]);
        for layer in &self.layers {
            q = layer.forward(&q, &self.query_pos, &memory, &self.pos)?;
        }

        let class_logits = self.class_head.forward(&q)?;
        let box_logits = self
            .box_out
            .forward(&self.box_hidden.forward(&q)?.relu()?)?
            .broadcast_add(&self.box_prior)?;
        let mask_params = self.mask_out.forward(&self.mask_hidden.forward(&q)?.relu()?)?;
        let embeddings = self.embed_head.forward(&q)?;

        let up = |t: &Tensor| -> Result<Tensor> {
            let (_, _, th, tw) = t.dims4()?;
            Ok(t.upsample_nearest2d(th * 2, tw * 2)?)
        };
        let p3 = self.laterals[3].forward(&f3, 1)?;
        let p2 = (self.laterals[2].forward(&f2, 1)? + up(&p3)?)?;
        let p1 = (self.laterals[1].forward(&f1, 1)? + up(&p2)?)?;
        let coord = self.coord_proj.forward(&self.coords, 1)?;
        let p0 = (self.laterals[0].forward(&f0, 1)? + up(&p1)?)?.broadcast_add(&coord)?.relu()?;
        let feats = self.mask_refine.forward(&p0, 1)?.flatten_from(2)?;
        let mask_logits = self
            .dynamic_masks(&feats, &mask_params, &box_logits.detach())?
            .reshape((bsz, self.config.queries, h, w))?;

        Ok(ModelOutput {
            class_logits,
            box_logits,
            mask_logits,
            embeddings,
            anchors: self.anchors.clone(),
        })
    }

    /// Per-query two-layer pixel classifier over the shared mask features and
    /// pixel coordinates relative to the query's (detached) box centre.
    fn dynamic_masks(&self, feats: &Tensor, params: &Tensor, box_logits: &Tensor) -> Result<Tensor> {
        let (b, p, _) = params.dims3()?;
        let (m, hw) = (feats.dim(1)?, feats.dim(2)?);
        let (hd, n_in) = (DYN_HIDDEN, m + 2);
        let s = sigmoid(box_logits)?;
        let (lo, span) = (s.narrow(2, 0, 2)?, s.narrow(2, 2, 2)?);
        let centre = (&lo + ((lo.affine(-1.0, 1.0)? * span)? * 0.5)?)?;
        let rel = (self.unit_coords.broadcast_sub(&centre.unsqueeze(3)?)? / REL_SCALE)?;
        let f = feats.unsqueeze(1)?.broadcast_as((b, p, m, hw))?;
        let x = Tensor::cat(&[&f, &rel], 2)?.contiguous()?;
        let w1 = params.narrow(2, 0, hd * n_in)?.reshape((b, p, hd, n_in))?;
        let b1 = params.narrow(2, hd * n_in, hd)?.reshape((b, p, hd, 1))?;
        let w2 = params.narrow(2, hd * n_in + hd, hd)?.reshape((b, p, 1, hd))?;
        let b2 = params.narrow(2, hd * n_in + 2 * hd, 1)?.reshape((b, p, 1, 1))?;
        let hidden = w1.matmul(&x)?.broadcast_add(&b1)?.relu()?;
        Ok(w2.matmul(&hidden)?.broadcast_add(&b2)?)
    }

    /// Forward pass whose outputs are detached from the parameters.
    pub fn forward_no_grad(&self, images: &Tensor) -> Result<ModelOutput> {
        Ok(self.forward(images)?.detach())
    }

    /// Overwrites every parameter with `values`, matched by position.
    pub(crate) fn set_parameters(&self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.vars.len() {
            return Err(ModelError::Format(format!(
                "checkpoint has {} tensors, model has {}",
                values.len(),
                self.params.vars.len()
            )));
        }
        for (var, t) in self.params.vars.iter().zip(values) {
            if var.shape() != t.shape() {
                return Err(ModelError::Format(format!(
                    "tensor shape {:?} does not match parameter shape {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

/// Generated weights per query for the dynamic mask head on `m` feature channels.
fn dynamic_params(m: usize) -> usize {
    DYN_HIDDEN * (m + 2) + 2 * DYN_HIDDEN + 1
}

/// Sinusoidal encoding of normalized points `(x, y)` in `[0, 1]`, `n×d` row-major.
fn encode_points(points: &[(f64, f64)], d: usize) -> Vec<f32> {
    let quarter = (d / 4).max(1);
    let mut data = vec![0f32; points.len() * d];
    for (row, &(x, y)) in data.chunks_mut(d).zip(points) {
        for k in 0..quarter {
            let freq = 10000f64.powf(-(k as f64) / quarter as f64) * std::f64::consts::PI;
            let (xs, ys) = (x * 8.0, y * 8.0);
            let vals = [(xs * freq).sin(), (xs * freq).cos(), (ys * freq).sin(), (ys * freq).cos()];
            for (j, v) in vals.iter().enumerate() {
                let idx = j * quarter + k;
                if idx < d {
                    row[idx] = *v as f32;
                }
            }
        }
    }
    data
}

/// Fixed 2D sinusoidal encoding of an `h×w` grid of cell centres, `1×(h·w)×d`.
fn positional_encoding(h: usize, w: usize, d: usize, device: &Device) -> Result<Tensor> {
    let points: Vec<(f64, f64)> = (0..h * w)
        .map(|i| (((i % w) as f64 + 0.5) / w as f64, ((i / w) as f64 + 0.5) / h as f64))
        .collect();
    Ok(Tensor::from_vec(encode_points(&points, d), (1, h * w, d), device)?)
}

/// Reference centres of the queries on a near-square grid over the image.
fn reference_points(queries: usize, h: usize, w: usize) -> Vec<(f64, f64)> {
    let rows = ((queries as f64 * h as f64 / w as f64).sqrt().round() as usize).max(1);
    let cols = queries.div_ceil(rows);
    (0..queries)
        .map(|i| (((i % cols) as f64 + 0.5) / cols as f64, ((i / cols) as f64 + 0.5) / rows as f64))
        .collect()
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(0.01, 0.99);
    (p / (1.0 - p)).ln()
}

/// Box logits that decode to a box of side `REF_BOX` around each centre.
fn box_prior(points: &[(f64, f64)], device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(points.len() * 4);
    // the span ratio stays off the sigmoid plateau so edge boxes can still shrink
    let ratio = |lo: f64| (REF_BOX / (1.0 - lo)).min(0.9);
    for &(x, y) in points {
        let (x0, y0) = ((x - REF_BOX / 2.0).max(0.0), (y - REF_BOX / 2.0).max(0.0));
        for v in [logit(x0), logit(y0), logit(ratio(x0)), logit(ratio(y0))] {
            data.push(v as f32);
        }
    }
    Ok(Tensor::from_vec(data, (1, points.len(), 4), device)?)
}

/// `1×2×h×w` grid of pixel-centre coordinates in `[-1, 1]`.
fn coordinate_grid(h: usize, w: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = ((x as f64 + 0.5) / w as f64 * 2.0 - 1.0) as f32;
            data[h * w + y * w + x] = ((y as f64 + 0.5) / h as f64 * 2.0 - 1.0) as f32;
        }
    }
    Ok(Tensor::from_vec(data, (1, 2, h, w), device)?)
}
