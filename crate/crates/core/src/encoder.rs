//! Pre-norm transformer encoder shared by student and teacher.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamSet};
use crate::tensor::{self, Tensor};

const NORM_EPS: f64 = 1e-5;

thread_local! {
    static FORWARDS: std::cell::Cell<[u64; 2]> = const { std::cell::Cell::new([0, 0]) };
}

/// Encoder forward passes started on this thread, `(student, teacher)`.
pub fn forward_counts() -> (u64, u64) {
    let [s, t] = FORWARDS.with(|c| c.get());
    (s, t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Probability of skipping a whole block in student mode.
    pub layerdrop: f64,
    pub final_norm: bool,
}

impl EncoderConfig {
    /// `d_ff` defaults to `4·d_model`.
    pub fn new(layers: usize, heads: usize, d_model: usize) -> Self {
        Self {
            layers,
            heads,
            d_model,
            d_ff: 4 * d_model,
            layerdrop: 0.0,
            final_norm: true,
        }
    }

    /// 12 layers, 8 heads, width 768.
    pub fn base() -> Self {
        Self::new(12, 8, 768)
    }

    /// 24 layers, 16 heads, width 1024.
    pub fn large() -> Self {
        Self::new(24, 16, 1024)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.layerdrop) {
            return Err(Error::Config(format!("layerdrop {} outside [0, 1)", self.layerdrop)));
        }
        Ok(())
    }

    /// Closed-form parameter count of the layer stack.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        self.layers * per_layer + if self.final_norm { 2 * d } else { 0 }
    }

    pub fn init<R: Rng>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut init = Init { rng };
        for l in 0..self.layers {
            let p = format!("encoder.layers.{l}");
            params.insert(&format!("{p}.attn_norm.gain"), &[d], vec![1.0; d], false)?;
            params.insert(&format!("{p}.attn_norm.bias"), &[d], vec![0.0; d], false)?;
            for proj in ["q", "k", "v", "o"] {
                params.insert(&format!("{p}.attn.{proj}.weight"), &[d, d], init.normal(d * d, 0.02), true)?;
                params.insert(&format!("{p}.attn.{proj}.bias"), &[d], vec![0.0; d], false)?;
            }
            params.insert(&format!("{p}.ff_norm.gain"), &[d], vec![1.0; d], false)?;
            params.insert(&format!("{p}.ff_norm.bias"), &[d], vec![0.0; d], false)?;
            params.insert(&format!("{p}.ff.up.weight"), &[d, f], init.normal(d * f, 0.02), true)?;
            params.insert(&format!("{p}.ff.up.bias"), &[f], vec![0.0; f], false)?;
            params.insert(&format!("{p}.ff.down.weight"), &[f, d], init.normal(f * d, 0.02), true)?;
            params.insert(&format!("{p}.ff.down.bias"), &[d], vec![0.0; d], false)?;
        }
        if self.final_norm {
            params.insert("encoder.final_norm.gain", &[d], vec![1.0; d], false)?;
            params.insert("encoder.final_norm.bias", &[d], vec![0.0; d], false)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    /// Layerdrop applies and the graph is recorded.
    Student,
    /// Every layer runs and no graph is recorded.
    Teacher,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final representation `[T × d_model]`, after the final norm.
    pub output: Tensor,
    /// Input followed by the residual stream after every block (`layers + 1`
    /// entries); empty unless requested.
    pub layer_outputs: Vec<Tensor>,
}

/// Which blocks run in one forward pass.
pub fn draw_layer_plan<R: Rng + ?Sized>(cfg: &EncoderConfig, mode: EncoderMode, rng: &mut R) -> Vec<bool> {
    if mode == EncoderMode::Teacher || cfg.layerdrop == 0.0 {
        return vec![true; cfg.layers];
    }
    (0..cfg.layers).map(|_| rng.random::<f64>() >= cfg.layerdrop).collect()
}

pub fn encode<R: Rng + ?Sized>(
    features: &Tensor,
    cfg: &EncoderConfig,
    binder: &Binder,
    mode: EncoderMode,
    keep_layer_outputs: bool,
    rng: &mut R,
) -> Result<EncoderOutput> {
    let plan = draw_layer_plan(cfg, mode, rng);
    encode_with_plan(features, cfg, binder, mode, keep_layer_outputs, &plan)
}

/// Forward pass with layer-skip decisions fixed in advance. A skipped block
/// passes its input straight through.
pub fn encode_with_plan(
    features: &Tensor,
    cfg: &EncoderConfig,
    binder: &Binder,
    mode: EncoderMode,
    keep_layer_outputs: bool,
    plan: &[bool],
) -> Result<EncoderOutput> {
    let _guard = (mode == EncoderMode::Teacher).then(tensor::no_grad);
    FORWARDS.with(|c| {
        let mut n = c.get();
        n[usize::from(mode == EncoderMode::Teacher)] += 1;
        c.set(n);
    });
    if plan.len() != cfg.layers {
        return Err(Error::Contract(format!(
            "layer plan has {} entries for {} layers",
            plan.len(),
            cfg.layers
        )));
    }
    match features.shape() {
        [t, d] if *t >= 1 && *d == cfg.d_model => {}
        s => {
            return Err(Error::Input(format!(
                "encoder expects [T × {}] features, got {s:?}",
                cfg.d_model
            )))
        }
    }
    let mut x = features.clone();
    let mut layer_outputs = Vec::new();
    if keep_layer_outputs {
        layer_outputs.push(x.clone());
    }
    for (l, &run) in plan.iter().enumerate() {
        if run {
            x = block(&x, cfg, binder, l)?;
        }
        if keep_layer_outputs {
            layer_outputs.push(x.clone());
        }
    }
    let output = if cfg.final_norm {
        x.layer_norm(
            &binder.get("encoder.final_norm.gain")?,
            &binder.get("encoder.final_norm.bias")?,
            NORM_EPS,
        )?
    } else {
        x
    };
    Ok(EncoderOutput {
        output,
        layer_outputs,
    })
}

fn linear(x: &Tensor, binder: &Binder, name: &str) -> Result<Tensor> {
    Ok(x.matmul(&binder.get(&format!("{name}.weight"))?)?
        .add_row(&binder.get(&format!("{name}.bias"))?)?)
}

fn norm(x: &Tensor, binder: &Binder, name: &str) -> Result<Tensor> {
    Ok(x.layer_norm(
        &binder.get(&format!("{name}.gain"))?,
        &binder.get(&format!("{name}.bias"))?,
        NORM_EPS,
    )?)
}

/// Multi-head self-attention of layer `layer` on already-normalized input.
/// Returns the projected output and the per-head attention matrices.
pub fn self_attention(
    h: &Tensor,
    cfg: &EncoderConfig,
    binder: &Binder,
    layer: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let p = format!("encoder.layers.{layer}.attn");
    let q = linear(h, binder, &format!("{p}.q"))?;
    let k = linear(h, binder, &format!("{p}.k"))?;
    let v = linear(h, binder, &format!("{p}.v"))?;
    let dh = cfg.d_model / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = q.slice_cols(head * dh, dh)?;
        let kh = k.slice_cols(head * dh, dh)?;
        let vh = v.slice_cols(head * dh, dh)?;
        let attn = qh.matmul(&kh.transpose()?)?.scale(scale).softmax(1)?;
        contexts.push(attn.matmul(&vh)?);
        weights.push(attn);
    }
    let ctx = if contexts.len() == 1 {
        contexts.pop().expect("one head")
    } else {
        Tensor::concat_cols(&contexts)?
    };
    Ok((linear(&ctx, binder, &format!("{p}.o"))?, weights))
}

fn block(x: &Tensor, cfg: &EncoderConfig, binder: &Binder, layer: usize) -> Result<Tensor> {
    let p = format!("encoder.layers.{layer}");
    let h = norm(x, binder, &format!("{p}.attn_norm"))?;
    let (attn, _) = self_attention(&h, cfg, binder, layer)?;
    let x = x.add(&attn)?;
    let h = norm(&x, binder, &format!("{p}.ff_norm"))?;
    let h = linear(&h, binder, &format!("{p}.ff.up"))?.gelu();
    let h = linear(&h, binder, &format!("{p}.ff.down"))?;
    Ok(x.add(&h)?)
}
