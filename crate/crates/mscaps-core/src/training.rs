//! Mini-batch training of the capsule network on pseudo-labeled patches
//! with Adam, plus bit-exact checkpoint serialization.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsnet::{
    network_loss, shape_chain, CapsConfig, LossConfig, MsCapsParams, MsCapsVals,
};
use crate::error::{err_arg, err_dim, err_format, Result};
use crate::fmath;
use crate::preprocessing::{extract_patch, DifferenceImage};
use crate::pseudo_label::TrainingSet;
use crate::runner::{BatchRunner, SequentialRunner};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Decouples the shuffle stream from the init stream under one user seed.
const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Everything the training loop needs besides the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Routing iterations per capsule layer.
    pub iters: usize,
    pub seed: u64,
    /// Patch size.
    pub r: usize,
    /// Training-set size drawn from the label map.
    pub n: usize,
    pub loss: LossConfig,
    pub caps: CapsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 64,
            epochs: 50,
            iters: 3,
            seed: 0,
            r: 9,
            n: 1000,
            loss: LossConfig::default(),
            caps: CapsConfig::default(),
        }
    }
}

impl TrainConfig {
    /// `epochs` may be zero (yielding the initial parameters) and `lr` may
    /// be zero (a no-op optimizer); everything else must be positive.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(err_arg!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if self.batch == 0 || self.iters == 0 || self.n == 0 {
            return Err(err_arg!("batch, iters, and n must be positive"));
        }
        if self.r % 2 == 0 {
            return Err(err_arg!("patch size must be odd, got {}", self.r));
        }
        self.caps.validate()?;
        shape_chain(self.r, &self.caps)?;
        Ok(())
    }
}

/// Glorot half-width for one parameter tensor, keyed by its position in the
/// canonical order (capsule transforms are matrices d -> jd per window cell,
/// not convolutions over their full extent).
fn glorot_halfwidth(idx: usize, shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match idx {
        // Front-end and primary conv kernels [kh,kw,cin,cout].
        0..=2 | 6..=8 | 9..=10 => {
            let taps = shape[0] * shape[1];
            (taps * shape[2], taps * shape[3])
        }
        // Attention taps: single-channel 1-D conv.
        3..=5 => (shape[0], shape[0]),
        // Windowed capsule transforms [e,e,n,d,jn,jd].
        11..=12 => (shape[3], shape[5]),
        // Class capsule transforms [i,d,k,jd].
        _ => (shape[1], shape[3]),
    };
    fmath::sqrt(6.0 / (fan_in + fan_out) as f64)
}

/// Uniform Glorot initialization of every tensor, deterministic given seed.
pub fn init_params(seed: u64, cfg: &TrainConfig) -> Result<MsCapsParams> {
    cfg.validate()?;
    let mut params = MsCapsParams::zeros(cfg.r, cfg.caps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (idx, t) in params.tensors_mut().into_iter().enumerate() {
        let a = glorot_halfwidth(idx, t.shape());
        let dist = Uniform::new_inclusive(-a, a)
            .map_err(|_| err_arg!("bad init half-width {a}"))?;
        for v in t.data_mut() {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Adam moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MsCapsParams) -> Self {
        Self::for_tensors(&params.tensors())
    }

    pub fn for_tensors(params: &[&Tensor]) -> Self {
        let m: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let v = m.clone();
        Self { m, v, step: 0 }
    }
}

/// One bias-corrected Adam update over an arbitrary tensor list.
pub fn adam_update(
    mut params: Vec<&mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(err_dim!(
            "{} params, {} grads, {} moment pairs",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(err_dim!(
                "parameter shape {:?} does not match gradient {:?} or moments",
                p.shape(),
                g.shape()
            ));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - fmath::powi(beta1, state.step);
    let bc2 = 1.0 - fmath::powi(beta2, state.step);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for k in 0..pd.len() {
            md[k] = beta1 * md[k] + (1.0 - beta1) * gd[k];
            vd[k] = beta2 * vd[k] + (1.0 - beta2) * gd[k] * gd[k];
            let m_hat = md[k] / bc1;
            let v_hat = vd[k] / bc2;
            pd[k] -= lr * m_hat / (fmath::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}

/// Adam with the conventional defaults on a full parameter set.
pub fn adam_step(
    params: &mut MsCapsParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    adam_update(
        params.tensors_mut(),
        grads,
        state,
        lr,
        ADAM_BETA1,
        ADAM_BETA2,
        ADAM_EPS,
    )
}

/// Final parameters plus the configuration and loss trace that produced
/// them; serializes bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: MsCapsParams,
    pub cfg: TrainConfig,
    /// Mean margin loss per epoch.
    pub history: Vec<f64>,
}

/// Margin loss and canonical-order parameter gradients for one sample.
fn loss_and_grads(
    di: &DifferenceImage,
    center: (usize, usize),
    label: u8,
    params: &MsCapsParams,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let vals = MsCapsVals::load(&tape, params);
    let patch = extract_patch(di, center, cfg.r)?;
    let loss = network_loss(
        &tape,
        tape.leaf(patch.values),
        usize::from(label),
        &vals,
        &cfg.caps,
        &cfg.loss,
        cfg.iters,
    )?;
    let loss_value = tape.scalar_value(loss);
    tape.backward(loss)?;
    let grads = vals
        .vals()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => Tensor::from_vec(t.shape(), g),
            None => Ok(Tensor::zeros(t.shape())),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_value, grads))
}

/// Mini-batch Adam over the training set, fanning each batch's per-sample
/// gradient passes out through `runner`. Gradients are averaged in sample
/// order, so any order-preserving runner is bit-identical to sequential.
pub fn train_with_runner<R: BatchRunner>(
    di: &DifferenceImage,
    set: &TrainingSet,
    cfg: &TrainConfig,
    runner: &R,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if set.samples.is_empty() {
        return Err(err_arg!("training set is empty"));
    }
    let mut params = init_params(cfg.seed, cfg)?;
    let mut state = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut history = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..set.samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let results = runner.run(chunk.len(), &|i| {
                let s = set.samples[chunk[i]];
                loss_and_grads(di, s.center, s.label, &params, cfg)
            });
            let mut acc: Vec<Tensor> =
                params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for result in results {
                let (loss, grads) = result?;
                epoch_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    let ad = a.data_mut();
                    for (x, y) in ad.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for a in acc.iter_mut() {
                a.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            adam_step(&mut params, &acc, &mut state, cfg.lr)?;
        }
        history.push(epoch_loss / set.samples.len() as f64);
    }
    Ok(Checkpoint { params, cfg: *cfg, history })
}

/// Single-threaded training; the bit-reproducibility reference.
pub fn train(di: &DifferenceImage, set: &TrainingSet, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with_runner(di, set, cfg, &SequentialRunner)
}

const MAGIC: &[u8; 8] = b"MSCAPS01";

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| err_format!("checkpoint truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| err_format!("length overflow"))?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}

fn meta_string(cfg: &TrainConfig) -> String {
    // Shortest round-trip float formatting keeps text metadata bit-exact.
    let mut s = String::new();
    s.push_str(&format!("lr={}\n", cfg.lr));
    s.push_str(&format!("batch={}\n", cfg.batch));
    s.push_str(&format!("epochs={}\n", cfg.epochs));
    s.push_str(&format!("iters={}\n", cfg.iters));
    s.push_str(&format!("seed={}\n", cfg.seed));
    s.push_str(&format!("r={}\n", cfg.r));
    s.push_str(&format!("n={}\n", cfg.n));
    s.push_str(&format!("m_plus={}\n", cfg.loss.m_plus));
    s.push_str(&format!("m_minus={}\n", cfg.loss.m_minus));
    s.push_str(&format!("lambda={}\n", cfg.loss.lambda));
    s.push_str(&format!("c0={}\n", cfg.caps.c0));
    s.push_str(&format!("c={}\n", cfg.caps.c));
    s.push_str(&format!("d={}\n", cfg.caps.d));
    s.push_str(&format!("class_d={}\n", cfg.caps.class_d));
    s.push_str(&format!("attn_k={}\n", cfg.caps.attn_k));
    s.push_str(&format!("extent={}\n", cfg.caps.conv_caps_extent));
    s
}

fn parse_meta(text: &str) -> Result<TrainConfig> {
    let mut map = BTreeMap::new();
    for line in text.split('\n').filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err_format!("metadata line without '=': {line:?}"))?;
        map.insert(k, v);
    }
    fn get<'m, T: core::str::FromStr>(
        map: &BTreeMap<&'m str, &'m str>,
        key: &str,
    ) -> Result<T> {
        map.get(key)
            .ok_or_else(|| err_format!("metadata key {key} missing"))?
            .parse::<T>()
            .map_err(|_| err_format!("metadata key {key} unparsable"))
    }
    let cfg = TrainConfig {
        lr: get(&map, "lr")?,
        batch: get(&map, "batch")?,
        epochs: get(&map, "epochs")?,
        iters: get(&map, "iters")?,
        seed: get(&map, "seed")?,
        r: get(&map, "r")?,
        n: get(&map, "n")?,
        loss: LossConfig {
            m_plus: get(&map, "m_plus")?,
            m_minus: get(&map, "m_minus")?,
            lambda: get(&map, "lambda")?,
        },
        caps: CapsConfig {
            c0: get(&map, "c0")?,
            c: get(&map, "c")?,
            d: get(&map, "d")?,
            class_d: get(&map, "class_d")?,
            attn_k: get(&map, "attn_k")?,
            conv_caps_extent: get(&map, "extent")?,
        },
    };
    cfg.validate().map_err(|e| err_format!("checkpoint config invalid: {e}"))?;
    Ok(cfg)
}

impl Checkpoint {
    /// Magic, length-prefixed text metadata, the parameter tensors in
    /// canonical order (rank, dims, little-endian f64 data each), then the
    /// loss history as a length-prefixed f64 block.
    pub fn encode(&self) -> Vec<u8> {
        let meta = meta_string(&self.cfg);
        let tensors = self.params.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(meta.as_bytes());
        push_u32(&mut out, tensors.len() as u32);
        for t in tensors {
            push_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                push_u32(&mut out, d as u32);
            }
            push_f64s(&mut out, t.data());
        }
        push_u32(&mut out, self.history.len() as u32);
        push_f64s(&mut out, &self.history);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(err_format!("bad checkpoint magic"));
        }
        let meta_len = r.u32()? as usize;
        let meta = core::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| err_format!("metadata is not UTF-8"))?;
        let cfg = parse_meta(meta)?;

        let count = r.u32()? as usize;
        let mut params = MsCapsParams::zeros(cfg.r, cfg.caps)
            .map_err(|e| err_format!("checkpoint shapes unreachable: {e}"))?;
        let slots = params.tensors_mut();
        if count != slots.len() {
            return Err(err_format!("expected {} tensors, found {count}", slots.len()));
        }
        for slot in slots {
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(err_format!("tensor rank {rank} out of range"));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            if dims != slot.shape() {
                return Err(err_format!(
                    "tensor shape {dims:?} does not match expected {:?}",
                    slot.shape()
                ));
            }
            let data = r.f64s(slot.numel())?;
            slot.data_mut().copy_from_slice(&data);
        }
        let hist_len = r.u32()? as usize;
        let history = r.f64s(hist_len)?;
        if r.pos != buf.len() {
            return Err(err_format!("{} trailing bytes after checkpoint", buf.len() - r.pos));
        }
        Ok(Checkpoint { params, cfg, history })
    }
}
