//! FiLM-conditioned mask-based separation network and its unconditional twin.
//!
//! Pipeline: learned filterbank encoder, bottleneck, `B` U-shaped depthwise
//! convolution blocks (each preceded by a FiLM lookup when conditioned), a
//! two-slot mask head, a shared decoder filterbank and a mixture-consistency
//! projection.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditions::{ConceptValue, ConditionVector, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::nn::{frame_signal, row, ParamId, ParamStore, Tape, Var};
use crate::rng::rng_for;
use crate::signal::Waveform;

pub const OUT_SLOTS: usize = 2;
pub const CHECKPOINT_VERSION: u32 = 1;
const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub encoder_bases: usize,
    pub kernel_taps: usize,
    pub hop: usize,
    pub vocab_size: usize,
    pub conditioned: bool,
    /// Number of stride-2 levels inside each U-block.
    pub block_depth: usize,
    pub expansion: usize,
    pub dw_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 16,
            channels: 512,
            encoder_bases: 512,
            kernel_taps: 41,
            hop: 20,
            vocab_size: VOCAB_SIZE,
            conditioned: true,
            block_depth: 4,
            expansion: 512,
            dw_kernel: 5,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self { num_blocks: 4, channels: 64, encoder_bases: 64, expansion: 128, ..Self::default() }
    }

    pub fn unconditional(self) -> Self {
        Self { conditioned: false, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.num_blocks,
            self.channels,
            self.encoder_bases,
            self.kernel_taps,
            self.hop,
            self.expansion,
            self.dw_kernel,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        if self.hop > self.kernel_taps {
            return Err(Error::Config(format!("hop {} exceeds kernel taps {}", self.hop, self.kernel_taps)));
        }
        if self.conditioned && self.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "a conditioned model uses the {VOCAB_SIZE}-concept vocabulary, got {}",
                self.vocab_size
            )));
        }
        if self.dw_kernel % 2 == 0 {
            return Err(Error::Config("depthwise kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Trainable parameters in FiLM tables: `2 * B * |V| * C`.
pub fn film_parameter_count(cfg: &ModelConfig) -> usize {
    2 * cfg.num_blocks * cfg.vocab_size * cfg.channels
}

/// Exact trainable-parameter count for a configuration.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let (n, c, e, k) = (cfg.encoder_bases, cfg.channels, cfg.expansion, cfg.kernel_taps);
    let norm = |ch: usize| 2 * ch;
    let encoder = n * k;
    let bottleneck = norm(n) + c * n + c;
    let dw = (cfg.block_depth + 1) * (e * cfg.dw_kernel + e + norm(e));
    let block = (e * c + e) + norm(e) + e + dw + norm(e) + e + (c * e + c);
    let film = if cfg.conditioned { film_parameter_count(cfg) } else { 0 };
    let mask = c + OUT_SLOTS * n * c + OUT_SLOTS * n;
    let decoder = k * n;
    encoder + bottleneck + cfg.num_blocks * block + film + mask + decoder
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    film: Option<(ParamId, ParamId)>,
    expand_w: ParamId,
    expand_b: ParamId,
    expand_norm: Norm,
    expand_prelu: ParamId,
    dw: Vec<(ParamId, ParamId, Norm)>,
    out_norm: Norm,
    out_prelu: ParamId,
    project_w: ParamId,
    project_b: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    encoder: ParamId,
    bottleneck_norm: Norm,
    bottleneck_w: ParamId,
    bottleneck_b: ParamId,
    blocks: Vec<BlockIds>,
    mask_prelu: ParamId,
    mask_w: ParamId,
    mask_b: ParamId,
    decoder: ParamId,
}

struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let v = Array2::from_shape_fn((rows, cols), |_| self.rng.gen_range(-bound..bound));
        self.store.add(name, v)
    }

    fn fill(&mut self, name: String, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Array2::from_elem((rows, cols), value))
    }

    fn norm(&mut self, prefix: &str, ch: usize) -> Norm {
        Norm { gain: self.fill(format!("{prefix}.gain"), ch, 1, 1.0), bias: self.fill(format!("{prefix}.bias"), ch, 1, 0.0) }
    }
}

fn build_params(cfg: &ModelConfig, seed: u64) -> (ParamStore, Ids) {
    let mut store = ParamStore::new();
    let mut rng = rng_for(&[seed, 0x6d6f_6465_6c]);
    let mut b = Builder { store: &mut store, rng: &mut rng };
    let (n, c, e, k) = (cfg.encoder_bases, cfg.channels, cfg.expansion, cfg.kernel_taps);
    let encoder = b.uniform("encoder.weight".into(), n, k, k);
    let bottleneck_norm = b.norm("bottleneck.norm", n);
    let bottleneck_w = b.uniform("bottleneck.weight".into(), c, n, n);
    let bottleneck_b = b.uniform("bottleneck.bias".into(), c, 1, n);
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for i in 0..cfg.num_blocks {
        let p = format!("blocks.{i}");
        let film = cfg.conditioned.then(|| {
            (
                b.fill(format!("{p}.film.gamma"), cfg.vocab_size, c, 1.0),
                b.fill(format!("{p}.film.beta"), cfg.vocab_size, c, 0.0),
            )
        });
        let expand_w = b.uniform(format!("{p}.expand.weight"), e, c, c);
        let expand_b = b.uniform(format!("{p}.expand.bias"), e, 1, c);
        let expand_norm = b.norm(&format!("{p}.expand.norm"), e);
        let expand_prelu = b.fill(format!("{p}.expand.prelu"), e, 1, PRELU_INIT);
        let dw = (0..=cfg.block_depth)
            .map(|j| {
                (
                    b.uniform(format!("{p}.dw.{j}.weight"), e, cfg.dw_kernel, cfg.dw_kernel),
                    b.uniform(format!("{p}.dw.{j}.bias"), e, 1, cfg.dw_kernel),
                    b.norm(&format!("{p}.dw.{j}.norm"), e),
                )
            })
            .collect();
        let out_norm = b.norm(&format!("{p}.out.norm"), e);
        let out_prelu = b.fill(format!("{p}.out.prelu"), e, 1, PRELU_INIT);
        let project_w = b.uniform(format!("{p}.project.weight"), c, e, e);
        let project_b = b.uniform(format!("{p}.project.bias"), c, 1, e);
        blocks.push(BlockIds {
            film,
            expand_w,
            expand_b,
            expand_norm,
            expand_prelu,
            dw,
            out_norm,
            out_prelu,
            project_w,
            project_b,
        });
    }
    let mask_prelu = b.fill("mask.prelu".into(), c, 1, PRELU_INIT);
    let mask_w = b.uniform("mask.weight".into(), OUT_SLOTS * n, c, c);
    let mask_b = b.uniform("mask.bias".into(), OUT_SLOTS * n, 1, c);
    let decoder = b.uniform("decoder.weight".into(), k, n, k);
    let ids = Ids {
        encoder,
        bottleneck_norm,
        bottleneck_w,
        bottleneck_b,
        blocks,
        mask_prelu,
        mask_w,
        mask_b,
        decoder,
    };
    (store, ids)
}

/// Output of a taped forward pass.
pub struct ForwardVars {
    pub target: Var,
    pub other: Var,
}

#[derive(Debug, Clone)]
pub struct SeparationModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl SeparationModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, ids) = build_params(&config, seed);
        Ok(Self { config, params, ids })
    }

    /// Rebuild from stored tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids() {
            let (want, got) = (model.params.get(id), params.get(id));
            if model.params.name(id) != params.name(id) || want.dim() != got.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, stored {} has {:?}",
                    model.params.name(id),
                    want.dim(),
                    params.name(id),
                    got.dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Copy every tensor whose name exists in `other` with the same shape.
    pub fn copy_shared_from(&mut self, other: &SeparationModel) -> usize {
        let mut copied = 0;
        for id in self.params.ids().collect::<Vec<_>>() {
            if let Some(src) = other.params.find(self.params.name(id)) {
                if other.params.get(src).dim() == self.params.get(id).dim() {
                    self.params.get_mut(id).assign(other.params.get(src));
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn film_tables(&self, block: usize) -> Option<(&Array2<f64>, &Array2<f64>)> {
        let (g, b) = self.ids.blocks.get(block)?.film?;
        Some((self.params.get(g), self.params.get(b)))
    }

    pub fn film_tables_mut(&mut self, block: usize) -> Option<(&mut Array2<f64>, &mut Array2<f64>)> {
        let (g, b) = self.ids.blocks.get(block)?.film?;
        let values = self.params.values_mut();
        let (lo, hi) = values.split_at_mut(b.0);
        Some((&mut lo[g.0], &mut hi[0]))
    }

    fn concept_row(&self, c: Option<&ConditionVector>) -> Result<Option<usize>> {
        match (self.config.conditioned, c) {
            (true, Some(c)) => {
                let i = c.index()?;
                if i >= self.config.vocab_size {
                    return Err(Error::InvalidCondition(format!("index {i} outside vocabulary")));
                }
                Ok(Some(i))
            }
            (true, None) => Err(Error::InvalidCondition("conditioned model needs a condition vector".into())),
            (false, Some(_)) => Err(Error::InvalidCondition("unconditional model takes no condition".into())),
            (false, None) => Ok(None),
        }
    }

    fn apply_norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Var {
        let y = tape.global_norm(x);
        let g = tape.param(n.gain);
        let b = tape.param(n.bias);
        let y = tape.mul_col(y, g);
        tape.add_col(y, b)
    }

    fn pointwise(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = tape.param(w);
        let b = tape.param(b);
        let y = tape.matmul(w, x);
        tape.add_col(y, b)
    }

    fn taped_encode(&self, tape: &mut Tape, x: &[f64]) -> Var {
        let frames = tape.constant(frame_signal(x, self.config.kernel_taps, self.config.hop));
        let w = tape.param(self.ids.encoder);
        let z = tape.matmul(w, frames);
        tape.relu(z)
    }

    fn taped_film(&self, tape: &mut Tape, y: Var, block: usize, row: usize) -> Var {
        let (g, b) = self.ids.blocks[block].film.expect("conditioned");
        let g = tape.param(g);
        let b = tape.param(b);
        let gamma = tape.row_select(g, row);
        let beta = tape.row_select(b, row);
        let y = tape.mul_col(y, gamma);
        tape.add_col(y, beta)
    }

    fn taped_block(&self, tape: &mut Tape, y: Var, block: usize) -> Var {
        let ids = &self.ids.blocks[block];
        let h = self.pointwise(tape, y, ids.expand_w, ids.expand_b);
        let h = self.apply_norm(tape, h, ids.expand_norm);
        let a = tape.param(ids.expand_prelu);
        let h = tape.prelu(h, a);
        let pad = self.config.dw_kernel / 2;
        let mut levels = Vec::with_capacity(ids.dw.len());
        let mut cur = h;
        for (j, &(w, b, norm)) in ids.dw.iter().enumerate() {
            let stride = if j == 0 { 1 } else { 2 };
            let (w, b) = (tape.param(w), tape.param(b));
            let d = tape.depthwise_conv(cur, w, b, stride, pad);
            cur = self.apply_norm(tape, d, norm);
            levels.push(cur);
        }
        let mut up = levels.pop().expect("at least one level");
        while let Some(skip) = levels.pop() {
            let len = tape.value(skip).ncols();
            let u = tape.upsample(up, len);
            up = tape.add(skip, u);
        }
        let o = self.apply_norm(tape, up, ids.out_norm);
        let a = tape.param(ids.out_prelu);
        let o = tape.prelu(o, a);
        let o = self.pointwise(tape, o, ids.project_w, ids.project_b);
        tape.add(y, o)
    }

    /// Record the full forward pass on `tape`.
    pub fn forward_taped(&self, tape: &mut Tape, x: &[f64], c: Option<&ConditionVector>) -> Result<ForwardVars> {
        if x.is_empty() {
            return Err(Error::Empty("zero-length input".into()));
        }
        let row_idx = self.concept_row(c)?;
        let n = self.config.encoder_bases;
        let enc = self.taped_encode(tape, x);
        let h = self.apply_norm(tape, enc, self.ids.bottleneck_norm);
        let mut h = self.pointwise(tape, h, self.ids.bottleneck_w, self.ids.bottleneck_b);
        for b in 0..self.config.num_blocks {
            if let Some(r) = row_idx {
                h = self.taped_film(tape, h, b, r);
            }
            h = self.taped_block(tape, h, b);
        }
        let a = tape.param(self.ids.mask_prelu);
        let h = tape.prelu(h, a);
        let logits = self.pointwise(tape, h, self.ids.mask_w, self.ids.mask_b);
        let l1 = tape.slice_rows(logits, 0, n);
        let l2 = tape.slice_rows(logits, n, 2 * n);
        let diff = tape.sub(l1, l2);
        let m1 = tape.sigmoid(diff);
        let m2 = tape.affine(m1, -1.0, 1.0);
        let dec = tape.param(self.ids.decoder);
        let mut outs = [m1, m2].map(|m| {
            let masked = tape.mul(m, enc);
            let frames = tape.matmul(dec, masked);
            tape.overlap_add(frames, self.config.hop, x.len())
        });
        let mix = tape.constant(row(x));
        let sum = tape.add(outs[0], outs[1]);
        let residual = tape.sub(mix, sum);
        let half = tape.scale(residual, 0.5);
        for o in outs.iter_mut() {
            *o = tape.add(*o, half);
        }
        Ok(ForwardVars { target: outs[0], other: outs[1] })
    }

    fn run(&self, x: &Waveform, c: Option<&ConditionVector>) -> Result<(Waveform, Waveform)> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward_taped(&mut tape, &x.samples, c)?;
        let to_wave = |v: Var| Waveform::new(tape.value(v).row(0).to_vec(), x.sample_rate);
        Ok((to_wave(out.target), to_wave(out.other)))
    }

    /// `(s_T, s_O)` estimates for the queried concept.
    pub fn forward(&self, x: &Waveform, c: &ConditionVector) -> Result<(Waveform, Waveform)> {
        self.run(x, Some(c))
    }

    pub fn forward_concept(&self, x: &Waveform, v: ConceptValue) -> Result<(Waveform, Waveform)> {
        self.forward(x, &crate::conditions::encode_concept(v))
    }

    /// Two unordered estimates from the FiLM-free twin.
    pub fn forward_unconditional(&self, x: &Waveform) -> Result<(Waveform, Waveform)> {
        self.run(x, None)
    }

    /// Rectified filterbank latent, `encoder_bases x frames`.
    pub fn encode(&self, x: &Waveform) -> Result<Array2<f64>> {
        if x.is_empty() {
            return Err(Error::Empty("zero-length input".into()));
        }
        let mut tape = Tape::new(&self.params);
        let v = self.taped_encode(&mut tape, &x.samples);
        Ok(tape.value(v).clone())
    }

    /// One U-block applied to a `channels x frames` latent.
    pub fn u_conv_block(&self, block: usize, y: &Array2<f64>) -> Result<Array2<f64>> {
        if block >= self.config.num_blocks || y.nrows() != self.config.channels || y.ncols() == 0 {
            return Err(Error::Shape(format!("block {block} on latent {:?}", y.dim())));
        }
        let mut tape = Tape::new(&self.params);
        let v = tape.constant(y.clone());
        let out = self.taped_block(&mut tape, v, block);
        Ok(tape.value(out).clone())
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        Checkpoint::new(self, step).save(path)
    }
}

/// Per-channel affine modulation selected by a one-hot vector.
pub fn film_modulate(
    y: &Array2<f64>,
    c: &ConditionVector,
    w_gamma: &Array2<f64>,
    w_beta: &Array2<f64>,
) -> Result<Array2<f64>> {
    let i = c.index()?;
    if w_gamma.dim() != w_beta.dim() || i >= w_gamma.nrows() || w_gamma.ncols() != y.nrows() {
        return Err(Error::Shape(format!(
            "FiLM tables {:?}/{:?} for latent {:?}",
            w_gamma.dim(),
            w_beta.dim(),
            y.dim()
        )));
    }
    let gamma = w_gamma.row(i).insert_axis(ndarray::Axis(1));
    let beta = w_beta.row(i).insert_axis(ndarray::Axis(1));
    Ok(y * &gamma + &beta)
}

/// Serialized model state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub step: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &SeparationModel, step: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config,
            vocabulary: ConceptValue::vocabulary(),
            step,
            params: model.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        bincode::serialize(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = bincode::deserialize(bytes).map_err(|e| Error::Checkpoint(format!("corrupt archive: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.vocabulary != ConceptValue::vocabulary() {
            return Err(Error::Checkpoint(format!(
                "vocabulary order {:?} does not match {:?}",
                ck.vocabulary,
                ConceptValue::vocabulary()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn into_model(self) -> Result<SeparationModel> {
        SeparationModel::from_params(self.config, self.params)
    }
}
