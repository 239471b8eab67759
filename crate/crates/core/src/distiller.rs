//! Teacher–student masked latent prediction.
//!
//! One teacher pass over the full, unmasked sequence yields the regression
//! targets: the last `K` teacher layer outputs, each normalized per time step
//! and then averaged. The student encodes only the visible frames of each
//! mask clone; a convolutional decoder fills masked slots with a learned
//! embedding and predicts the targets. The loss is the mean squared error
//! over masked positions, plus (for text) a λ-weighted cross-entropy over the
//! masked token ids computed from the same decoder.

use rand::Rng;

use crate::encoder::{self, EncoderConfig, EncoderMode};
use crate::error::{Error, Result};
use crate::masking::{self, MaskSpec, VisibleIndex};
use crate::params::{Binder, Init, ParamSet};
use crate::prenet::{self, Example, Modality, PrenetConfig};
use crate::tensor::{self, ConvGeometry, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Parameter-name prefixes tracked by the teacher.
pub const TEACHER_PREFIXES: [&str; 2] = ["prenet.", "encoder."];

/// Linear ramp from `start` to `end` over `steps`, constant afterwards.
fn linear_ramp(start: f64, end: f64, steps: u64, step: u64) -> f64 {
    if steps == 0 {
        return end;
    }
    if step >= steps {
        return end;
    }
    start + (end - start) * (step as f64 / steps as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl EmaSchedule {
    pub fn decay_at(&self, step: u64) -> f64 {
        linear_ramp(self.start, self.end, self.anneal_steps, step)
    }
}

/// EMA coefficient `τ_start + (τ_end − τ_start)·min(step/N, 1)`.
pub fn ema_decay(step: u64, schedule: &EmaSchedule) -> f64 {
    schedule.decay_at(step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

/// MLM weight `λ_start + (λ_end − λ_start)·min(step/N_λ, 1)`.
pub fn lambda_at(step: u64, schedule: &LambdaSchedule) -> f64 {
    linear_ramp(schedule.start, schedule.end, schedule.steps, step)
}

/// `shadow ← τ·shadow + (1 − τ)·student` for every shadow parameter.
pub fn ema_update(shadow: &mut ParamSet, student: &ParamSet, tau: f64) -> Result<()> {
    for p in shadow.iter_mut() {
        let s = student
            .get(&p.name)
            .ok_or_else(|| Error::Contract(format!("student lacks teacher parameter {}", p.name)))?;
        if s.shape != p.shape {
            return Err(Error::Contract(format!(
                "shape drift on {}: teacher {:?}, student {:?}",
                p.name, p.shape, s.shape
            )));
        }
        for (t, v) in p.value.iter_mut().zip(&s.value) {
            *t = tau * *t + (1.0 - tau) * v;
        }
    }
    Ok(())
}

/// EMA shadow of the student's pre-net and encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub shadow: ParamSet,
    pub schedule: EmaSchedule,
    /// Coefficient used by the most recent update (`start` before any).
    pub decay: f64,
}

impl TeacherState {
    pub fn from_student(student: &ParamSet, schedule: EmaSchedule) -> Self {
        Self {
            shadow: student.subset(&TEACHER_PREFIXES),
            schedule,
            decay: schedule.start,
        }
    }

    /// Applies one EMA update with `τ = ema_decay(step)` and returns τ.
    pub fn update(&mut self, student: &ParamSet, step: u64) -> Result<f64> {
        let tau = self.schedule.decay_at(step);
        ema_update(&mut self.shadow, student, tau)?;
        self.decay = tau;
        Ok(tau)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub groups: usize,
    pub kernel: usize,
}

impl DecoderConfig {
    pub fn speech_base() -> Self {
        Self { layers: 4, dim: 384, groups: 16, kernel: 7 }
    }

    pub fn speech_large() -> Self {
        Self { layers: 4, dim: 768, groups: 16, kernel: 7 }
    }

    pub fn text() -> Self {
        Self { layers: 5, dim: 768, groups: 1, kernel: 9 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.groups == 0 || self.dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} not divisible by {} groups",
                self.dim, self.groups
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("decoder kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Number of top teacher layers averaged into the target.
    pub top_k: usize,
    pub decoder: DecoderConfig,
    /// MLM weight schedule; `None` disables the MLM term.
    pub lambda: Option<LambdaSchedule>,
}

impl DistillConfig {
    pub fn speech_base() -> Self {
        Self { top_k: 8, decoder: DecoderConfig::speech_base(), lambda: None }
    }

    pub fn speech_large() -> Self {
        Self { top_k: 16, decoder: DecoderConfig::speech_large(), lambda: None }
    }

    /// Hybrid-loss text setup (λ 20 → 1 over 250k steps).
    pub fn text_mlm() -> Self {
        Self {
            top_k: 12,
            decoder: DecoderConfig::text(),
            lambda: Some(LambdaSchedule { start: 20.0, end: 1.0, steps: 250_000 }),
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig, modality: Modality) -> Result<()> {
        if self.top_k == 0 || self.top_k > encoder.layers {
            return Err(Error::Config(format!(
                "top_k {} must lie in 1..={}",
                self.top_k, encoder.layers
            )));
        }
        if self.lambda.is_some() && modality == Modality::Speech {
            return Err(Error::Config("the MLM term applies to text only".into()));
        }
        self.decoder.validate()
    }
}

/// Pre-net and encoder shape of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub prenet: PrenetConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn modality(&self) -> Modality {
        self.prenet.modality()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prenet.validate(self.encoder.d_model)
    }

    /// Closed-form parameter count of pre-net plus encoder.
    pub fn encoder_param_count(&self) -> usize {
        self.prenet.param_count(self.encoder.d_model) + self.encoder.param_count()
    }
}

/// Fresh student parameters: pre-net, encoder, decoder and (when the MLM
/// term is on) the MLM head.
pub fn init_student<R: Rng>(model: &ModelConfig, distill: &DistillConfig, rng: &mut R) -> Result<ParamSet> {
    model.validate()?;
    distill.validate(&model.encoder, model.modality())?;
    let mut ps = ParamSet::new();
    model.prenet.init(model.encoder.d_model, &mut ps, rng)?;
    model.encoder.init(&mut ps, rng)?;
    let d = model.encoder.d_model;
    let dec = &distill.decoder;
    let mut init = Init { rng };
    ps.insert("decoder.mask_embedding", &[d], init.normal(d, 0.02), false)?;
    ps.insert("decoder.input.weight", &[d, dec.dim], init.normal(d * dec.dim, (1.0 / d as f64).sqrt()), true)?;
    ps.insert("decoder.input.bias", &[dec.dim], vec![0.0; dec.dim], false)?;
    let per_group = dec.dim / dec.groups;
    let fan_in = per_group * dec.kernel;
    for i in 0..dec.layers {
        let w = init.normal(dec.dim * fan_in, (1.0 / fan_in as f64).sqrt());
        ps.insert(&format!("decoder.blocks.{i}.conv.weight"), &[dec.dim, per_group, dec.kernel], w, true)?;
        ps.insert(&format!("decoder.blocks.{i}.conv.bias"), &[dec.dim], vec![0.0; dec.dim], false)?;
        ps.insert(&format!("decoder.blocks.{i}.norm.gain"), &[dec.dim], vec![1.0; dec.dim], false)?;
        ps.insert(&format!("decoder.blocks.{i}.norm.bias"), &[dec.dim], vec![0.0; dec.dim], false)?;
    }
    ps.insert("decoder.output.weight", &[dec.dim, d], init.normal(dec.dim * d, (1.0 / dec.dim as f64).sqrt()), true)?;
    ps.insert("decoder.output.bias", &[d], vec![0.0; d], false)?;
    if distill.lambda.is_some() {
        let PrenetConfig::Text(text) = &model.prenet else {
            return Err(Error::Config("the MLM term applies to text only".into()));
        };
        ps.insert("mlm.dense.weight", &[dec.dim, d], init.normal(dec.dim * d, 0.02), true)?;
        ps.insert("mlm.dense.bias", &[d], vec![0.0; d], false)?;
        ps.insert("mlm.norm.gain", &[d], vec![1.0; d], false)?;
        ps.insert("mlm.norm.bias", &[d], vec![0.0; d], false)?;
        ps.insert("mlm.bias", &[text.vocab_size], vec![0.0; text.vocab_size], false)?;
    }
    Ok(ps)
}

/// Regression target plus its statistics.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `[T × d]`, outside the gradient graph.
    pub values: Tensor,
    /// Standard deviation over time steps, averaged over features.
    pub std: f64,
    /// Same statistic for the un-normalized average of the top `K` layers.
    pub raw_std: f64,
}

/// Mean over features of the per-feature standard deviation across rows.
pub fn std_over_time(values: &[f64], rows: usize, cols: usize) -> f64 {
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let total: f64 = (0..cols)
        .map(|j| {
            let col: Vec<f64> = (0..rows).map(|i| values[i * cols + j]).collect();
            tensor::mean_var(&col).1.sqrt()
        })
        .sum();
    total / cols as f64
}

/// Normalizes each of the last `k` layer outputs per time step over the
/// feature axis, then averages them.
pub fn build_targets(layer_outputs: &[Tensor], k: usize) -> Result<Targets> {
    if k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    if k > layer_outputs.len() {
        return Err(Error::Config(format!(
            "top_k {k} exceeds {} available layers",
            layer_outputs.len()
        )));
    }
    let top = &layer_outputs[layer_outputs.len() - k..];
    let shape = top[0].shape().to_vec();
    let [rows, cols] = shape[..] else {
        return Err(Error::Contract(format!("layer outputs must be matrices, got {shape:?}")));
    };
    let mut avg = vec![0.0; rows * cols];
    let mut raw = vec![0.0; rows * cols];
    for layer in top {
        if layer.shape() != shape.as_slice() {
            return Err(Error::Contract("layer outputs differ in shape".into()));
        }
        for (r, row) in layer.data().chunks(cols).enumerate() {
            let (mean, var) = tensor::mean_var(row);
            let s = 1.0 / (var + NORM_EPS).sqrt();
            for j in 0..cols {
                avg[r * cols + j] += (row[j] - mean) * s / k as f64;
                raw[r * cols + j] += row[j] / k as f64;
            }
        }
    }
    Ok(Targets {
        std: std_over_time(&avg, rows, cols),
        raw_std: std_over_time(&raw, rows, cols),
        values: Tensor::new(&shape, avg)?,
    })
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Full-length predictions in target width, `[T × d_model]`.
    pub prediction: Tensor,
    /// Last hidden state, `[T × decoder.dim]`.
    pub hidden: Tensor,
}

/// Scatters visible student outputs back to their positions, fills masked
/// slots with the mask embedding, and runs the residual convolution stack.
pub fn decode(
    student_out: &Tensor,
    index: &VisibleIndex,
    cfg: &DecoderConfig,
    binder: &Binder,
) -> Result<DecoderOutput> {
    let x = Tensor::scatter_rows(student_out, &binder.get("decoder.mask_embedding")?, &index.slots)?;
    let mut h = x
        .matmul(&binder.get("decoder.input.weight")?)?
        .add_row(&binder.get("decoder.input.bias")?)?;
    let geom = ConvGeometry::new(1, cfg.kernel / 2, cfg.groups);
    for i in 0..cfg.layers {
        let p = format!("decoder.blocks.{i}");
        let y = h
            .transpose()?
            .conv1d(
                &binder.get(&format!("{p}.conv.weight"))?,
                Some(&binder.get(&format!("{p}.conv.bias"))?),
                geom,
            )?
            .transpose()?
            .layer_norm(
                &binder.get(&format!("{p}.norm.gain"))?,
                &binder.get(&format!("{p}.norm.bias"))?,
                NORM_EPS,
            )?
            .gelu();
        h = h.add(&y)?;
    }
    let prediction = h
        .matmul(&binder.get("decoder.output.weight")?)?
        .add_row(&binder.get("decoder.output.bias")?)?;
    Ok(DecoderOutput { prediction, hidden: h })
}

fn masked_positions(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Mean over masked positions and features of the squared difference.
pub fn l2_masked_loss(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(tensor::TensorError::Shape {
            op: "l2_masked_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        }
        .into());
    }
    if mask.len() != pred.shape()[0] {
        return Err(Error::Contract("mask length differs from sequence length".into()));
    }
    let rows = masked_positions(mask);
    if rows.is_empty() {
        return Err(Error::Contract("L2 loss needs at least one masked position".into()));
    }
    let diff = pred.gather_rows(&rows)?.sub(&target.gather_rows(&rows)?)?;
    Ok(diff.mul(&diff)?.mean())
}

/// Vocabulary head on decoder hidden states, with output weights tied to the
/// input embedding table.
pub struct MlmHead {
    dense_weight: Tensor,
    dense_bias: Tensor,
    norm_gain: Tensor,
    norm_bias: Tensor,
    embedding: Tensor,
    bias: Tensor,
}

impl MlmHead {
    pub fn bind(binder: &Binder, modality: Modality) -> Result<Self> {
        if modality != Modality::Text {
            return Err(Error::Config("MLM is only defined for text".into()));
        }
        Ok(Self {
            dense_weight: binder.get("mlm.dense.weight")?,
            dense_bias: binder.get("mlm.dense.bias")?,
            norm_gain: binder.get("mlm.norm.gain")?,
            norm_bias: binder.get("mlm.norm.bias")?,
            embedding: binder.get("prenet.embed.tokens")?,
            bias: binder.get("mlm.bias")?,
        })
    }

    /// `[n × V]` logits for `[n × decoder.dim]` hidden rows.
    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let h = hidden
            .matmul(&self.dense_weight)?
            .add_row(&self.dense_bias)?
            .gelu()
            .layer_norm(&self.norm_gain, &self.norm_bias, NORM_EPS)?;
        Ok(h.matmul(&self.embedding.transpose()?)?.add_row(&self.bias)?)
    }
}

/// Cross-entropy of the masked token ids, averaged over masked positions.
pub fn mlm_loss(hidden: &Tensor, head: &MlmHead, ids: &[usize], mask: &[bool]) -> Result<Tensor> {
    if ids.len() != mask.len() || hidden.shape()[0] != ids.len() {
        return Err(Error::Contract("token ids, mask and decoder output disagree in length".into()));
    }
    let rows = masked_positions(mask);
    if rows.is_empty() {
        return Err(Error::Contract("MLM loss needs at least one masked position".into()));
    }
    let targets: Vec<usize> = rows.iter().map(|&r| ids[r]).collect();
    let logits = head.logits(&hidden.gather_rows(&rows)?)?;
    Ok(logits.cross_entropy(&targets)?)
}

/// Everything the per-example objective needs.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub model: &'a ModelConfig,
    pub mask: &'a MaskSpec,
    pub distill: &'a DistillConfig,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepDiagnostics {
    pub loss: f64,
    pub l2: f64,
    pub mlm: Option<f64>,
    pub lambda: Option<f64>,
    pub teacher_forwards: usize,
    pub examples: usize,
    pub target_std: f64,
    pub target_raw_std: f64,
}

/// Regression targets from one teacher pass over the unmasked example.
pub fn teacher_targets(example: &Example, teacher: &Binder, objective: Objective<'_>) -> Result<Targets> {
    let model = objective.model;
    let _guard = tensor::no_grad();
    let feats = prenet::featurize(example, &model.prenet, teacher)?;
    let out = encoder::encode_with_plan(
        &feats.frames,
        &model.encoder,
        teacher,
        EncoderMode::Teacher,
        true,
        &vec![true; model.encoder.layers],
    )?;
    build_targets(&out.layer_outputs[1..], objective.distill.top_k)
}

/// Masks and layer plans for every clone of a `len`-frame example.
pub fn draw_clones<R: Rng + ?Sized>(len: usize, objective: Objective<'_>, rng: &mut R) -> Result<Vec<(Vec<bool>, Vec<bool>)>> {
    let masks = masking::sample_masks(len, objective.mask, rng)?;
    Ok(masks
        .masks
        .into_iter()
        .map(|m| (m, encoder::draw_layer_plan(&objective.model.encoder, EncoderMode::Student, rng)))
        .collect())
}

/// Student side of the objective for fixed targets and clones: the mean
/// over clones of the masked L2 loss plus, for text, the λ-weighted MLM term.
pub fn student_loss(
    example: &Example,
    student: &Binder,
    targets: &Targets,
    clones: &[(Vec<bool>, Vec<bool>)],
    objective: Objective<'_>,
    step: u64,
) -> Result<(Tensor, StepDiagnostics)> {
    let model = objective.model;
    let distill = objective.distill;
    if clones.is_empty() {
        return Err(Error::Contract("no mask clones".into()));
    }
    let feats = prenet::featurize(example, &model.prenet, student)?;
    let mlm = match (distill.lambda, example) {
        (Some(sched), Example::Text(ids)) => Some((lambda_at(step, &sched), MlmHead::bind(student, Modality::Text)?, ids)),
        (Some(_), Example::Speech(_)) => {
            return Err(Error::Config("the MLM term applies to text only".into()))
        }
        (None, _) => None,
    };

    let n = clones.len() as f64;
    let mut total: Option<Tensor> = None;
    let mut l2_sum = 0.0;
    let mut mlm_sum = 0.0;
    for (mask, plan) in clones {
        let (visible, index) = masking::split_visible(&feats.frames, mask)?;
        let enc = encoder::encode_with_plan(&visible, &model.encoder, student, EncoderMode::Student, false, plan)?;
        let dec = decode(&enc.output, &index, &distill.decoder, student)?;
        let l2 = l2_masked_loss(&dec.prediction, &targets.values, mask)?;
        l2_sum += l2.item();
        let clone_loss = match &mlm {
            Some((lambda, head, ids)) => {
                let m = mlm_loss(&dec.hidden, head, ids, mask)?;
                mlm_sum += m.item();
                l2.add(&m.scale(*lambda))?
            }
            None => l2,
        };
        let scaled = clone_loss.scale(1.0 / n);
        total = Some(match total {
            Some(t) => t.add(&scaled)?,
            None => scaled,
        });
    }
    let loss = total.expect("at least one clone");
    let diag = StepDiagnostics {
        loss: loss.item(),
        l2: l2_sum / n,
        mlm: mlm.as_ref().map(|_| mlm_sum / n),
        lambda: mlm.as_ref().map(|(l, _, _)| *l),
        teacher_forwards: 0,
        examples: 1,
        target_std: targets.std,
        target_raw_std: targets.raw_std,
    };
    Ok((loss, diag))
}

/// Per-example loss: one teacher pass, then `clones` masked student passes
/// whose losses are averaged. Masks and layer plans for all clones are drawn
/// before any student pass.
pub fn pretrain_step_loss<R: Rng + ?Sized>(
    example: &Example,
    student: &Binder,
    teacher: &Binder,
    objective: Objective<'_>,
    step: u64,
    rng: &mut R,
) -> Result<(Tensor, StepDiagnostics)> {
    let (_, teacher_before) = encoder::forward_counts();
    let targets = teacher_targets(example, teacher, objective)?;
    let teacher_forwards = (encoder::forward_counts().1 - teacher_before) as usize;
    let frames = targets.values.shape()[0];
    let clones = draw_clones(frames, objective, rng)?;
    let (loss, mut diag) = student_loss(example, student, &targets, &clones, objective, step)?;
    diag.teacher_forwards = teacher_forwards;
    Ok((loss, diag))
}

/// Mean of [`pretrain_step_loss`] over a batch; diagnostics are averaged,
/// teacher-forward counts summed.
pub fn pretrain_batch_loss<R: Rng + ?Sized>(
    batch: &[&Example],
    student: &Binder,
    teacher: &Binder,
    objective: Objective<'_>,
    step: u64,
    rng: &mut R,
) -> Result<(Tensor, StepDiagnostics)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut total: Option<Tensor> = None;
    let mut diag = StepDiagnostics::default();
    for example in batch {
        let (loss, d) = pretrain_step_loss(example, student, teacher, objective, step, rng)?;
        let scaled = loss.scale(1.0 / n);
        total = Some(match total {
            Some(t) => t.add(&scaled)?,
            None => scaled,
        });
        diag.l2 += d.l2 / n;
        diag.mlm = d.mlm.map(|m| diag.mlm.unwrap_or(0.0) + m / n);
        diag.lambda = d.lambda;
        diag.teacher_forwards += d.teacher_forwards;
        diag.examples += 1;
        diag.target_std += d.target_std / n;
        diag.target_raw_std += d.target_raw_std / n;
    }
    let loss = total.expect("non-empty batch");
    diag.loss = loss.item();
    Ok((loss, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchor_points() {
        let speech = EmaSchedule { start: 0.999, end: 0.99999, anneal_steps: 75_000 };
        assert_eq!(ema_decay(0, &speech), 0.999);
        assert_eq!(ema_decay(75_000, &speech), 0.99999);
        assert_eq!(ema_decay(1_000_000, &speech), 0.99999);
        assert!((ema_decay(37_500, &speech) - 0.999495).abs() < 1e-12);
        let lam = DistillConfig::text_mlm().lambda.unwrap();
        assert_eq!(lambda_at(0, &lam), 20.0);
        assert_eq!(lambda_at(250_000, &lam), 1.0);
        assert_eq!(lambda_at(125_000, &lam), 10.5);
        let flat = EmaSchedule { start: 0.5, end: 0.9, anneal_steps: 0 };
        assert_eq!(ema_decay(0, &flat), 0.9);
    }

    fn one_param(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("encoder.w", &[2], vec![v, v], true).unwrap();
        ps
    }

    #[test]
    fn ema_extremes_and_recurrence() {
        let student = one_param(3.0);
        let mut shadow = one_param(1.0);
        ema_update(&mut shadow, &student, 1.0).unwrap();
        assert_eq!(shadow.get("encoder.w").unwrap().value, vec![1.0, 1.0]);
        ema_update(&mut shadow, &student, 0.0).unwrap();
        assert_eq!(shadow.get("encoder.w").unwrap().value, vec![3.0, 3.0]);

        let tau: f64 = 0.9;
        let mut shadow = one_param(1.0);
        for _ in 0..10 {
            ema_update(&mut shadow, &student, tau).unwrap();
        }
        let expected = tau.powi(10) * 1.0 + (1.0 - tau.powi(10)) * 3.0;
        assert!((shadow.get("encoder.w").unwrap().value[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn ema_rejects_shape_drift() {
        let mut shadow = one_param(1.0);
        let mut student = ParamSet::new();
        student.insert("encoder.w", &[3], vec![0.0; 3], true).unwrap();
        assert!(matches!(ema_update(&mut shadow, &student, 0.5), Err(Error::Contract(_))));
    }

    fn layer(data: &[f64]) -> Tensor {
        Tensor::new(&[2, 3], data.to_vec()).unwrap()
    }

    #[test]
    fn targets_by_hand() {
        // Rows [1,2,3] and [0,0,3]: mean 2 / 1, variance 2/3 / 2.
        let a = layer(&[1.0, 2.0, 3.0, 0.0, 0.0, 3.0]);
        let b = layer(&[3.0, 2.0, 1.0, 1.0, 1.0, 1.0]);
        let t = build_targets(&[a.clone(), b], 2).unwrap();
        let s1 = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        let s2 = 1.0 / (2.0f64 + 1e-5).sqrt();
        // Second layer: row 0 is the mirror of the first, row 1 is constant.
        let expected = [
            (-s1 + s1) / 2.0,
            0.0,
            (s1 - s1) / 2.0,
            (-s2 + 0.0) / 2.0,
            (-s2 + 0.0) / 2.0,
            (2.0 * s2 + 0.0) / 2.0,
        ];
        for (got, want) in t.values.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let single = build_targets(&[a], 1).unwrap();
        assert!((single.values.data()[0] + s1).abs() < 1e-12);
    }

    #[test]
    fn identical_layers_give_normalized_value() {
        let a = layer(&[1.0, 2.0, 3.0, 4.0, 0.0, -4.0]);
        let one = build_targets(&[a.clone()], 1).unwrap();
        let three = build_targets(&[a.clone(), a.clone(), a], 3).unwrap();
        for (x, y) in one.values.data().iter().zip(three.values.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(!three.values.requires_grad());
    }

    #[test]
    fn targets_reject_bad_k() {
        let a = layer(&[0.0; 6]);
        assert!(matches!(build_targets(&[a.clone()], 0), Err(Error::Config(_))));
        assert!(matches!(build_targets(&[a], 2), Err(Error::Config(_))));
    }

    #[test]
    fn l2_cases() {
        let p = Tensor::new(&[2, 2], vec![1.0, 1.0, 5.0, 5.0]).unwrap();
        let t = Tensor::new(&[2, 2], vec![0.0, 0.0, 5.0, 5.0]).unwrap();
        assert_eq!(l2_masked_loss(&p, &t, &[true, false]).unwrap().item(), 1.0);
        assert_eq!(l2_masked_loss(&p, &p, &[true, true]).unwrap().item(), 0.0);
        assert!(matches!(l2_masked_loss(&p, &t, &[false, false]), Err(Error::Contract(_))));
    }

    #[test]
    fn decoder_presets() {
        assert_eq!(DecoderConfig::speech_base(), DecoderConfig { layers: 4, dim: 384, groups: 16, kernel: 7 });
        assert_eq!(DecoderConfig::speech_large(), DecoderConfig { layers: 4, dim: 768, groups: 16, kernel: 7 });
        assert_eq!(DecoderConfig::text(), DecoderConfig { layers: 5, dim: 768, groups: 1, kernel: 9 });
        assert_eq!(DistillConfig::speech_base().top_k, 8);
        assert_eq!(DistillConfig::speech_large().top_k, 16);
        assert_eq!(DistillConfig::text_mlm().top_k, 12);
    }
}
