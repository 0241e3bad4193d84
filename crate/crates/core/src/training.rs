//! End-to-end and cascade training, and per-tap probe classifiers.
//!
//! Cascade training splits the taps into contiguous sub-modules. Each
//! sub-module is trained together with an [`AuxHead`] attached at its last tap
//! while every earlier sub-module is frozen, then frozen itself. Its input is
//! the cached output of the frozen prefix.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{invalid, Error, Result};
use crate::network::{
    backward_layers, forward_layers, run_layers, AuxHead, ModelParams, NetworkSpec, Provenance, Scheme,
};
use crate::numerics::{softmax_cross_entropy, Momentum};
use crate::rng::Rng;
use crate::tensor::{Shape4, Tensor4};

/// Images are processed in chunks of this many items when no gradient is needed.
pub(crate) const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Epoch budget per stage.
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation-loss improvement before a stage stops.
    /// Zero disables early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Labelled images, one label per batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "dataset",
                expected: format!("{} labels", images.shape().n),
                found: format!("{}", labels.len()),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(l) => Err(invalid(format!("label {l} outside 0..{classes}"))),
            None => Ok(()),
        }
    }
}

/// Ordered partition of taps `1..=L` into contiguous sub-modules.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    parts: Vec<Range<usize>>,
}

impl SplitPlan {
    /// Builds a plan from inclusive tap ranges, checking that they partition `1..=tap_count`.
    pub fn from_parts(tap_count: usize, parts: Vec<Range<usize>>) -> Result<Self> {
        let mut next = 1;
        for p in &parts {
            if p.start != next || p.end <= p.start {
                return Err(invalid(format!("split parts {parts:?} do not partition taps 1..={tap_count}")));
            }
            next = p.end;
        }
        if next != tap_count + 1 || parts.is_empty() {
            return Err(invalid(format!("split parts {parts:?} do not partition taps 1..={tap_count}")));
        }
        Ok(Self { parts })
    }

    /// Half-open tap ranges, e.g. `1..3` covers taps 1 and 2.
    pub fn parts(&self) -> &[Range<usize>] {
        &self.parts
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn tap_count(&self) -> usize {
        self.parts.last().map_or(0, |p| p.end - 1)
    }

    /// Last tap of each part.
    pub fn boundaries(&self) -> Vec<usize> {
        self.parts.iter().map(|p| p.end - 1).collect()
    }
}

/// Splits `tap_count` taps into `k` contiguous parts whose sizes differ by
/// at most one, with the larger parts first.
pub fn make_split_plan(tap_count: usize, k: usize) -> Result<SplitPlan> {
    if k == 0 || k > tap_count {
        return Err(invalid(format!("split count {k} outside 1..={tap_count}")));
    }
    let base = tap_count / k;
    let extra = tap_count % k;
    let mut parts = Vec::with_capacity(k);
    let mut start = 1;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        parts.push(start..start + size);
        start += size;
    }
    SplitPlan::from_parts(tap_count, parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageKind {
    /// Whole network at once.
    EndToEnd,
    /// Cascade sub-module covering these taps.
    Cascade(Range<usize>),
    /// The network's own classifier fitted on frozen features.
    Classifier,
    /// Probe at a tap.
    Probe(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLog {
    pub stage: usize,
    pub kind: StageKind,
    pub epochs: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stages: Vec<StageLog>,
    /// Training accuracy of the auxiliary head of each cascade stage, keyed by its tap.
    pub stage_head_accuracy: Vec<(usize, f64)>,
    pub provenance: Provenance,
}

pub(crate) struct BatchStats {
    pub(crate) loss: f64,
    pub(crate) correct: usize,
    pub(crate) grads: Vec<Vec<f64>>,
}

/// Mini-batch momentum SGD over `blocks` with optional early stopping.
pub(crate) fn fit(
    blocks: &mut [Vec<f64>],
    n_train: usize,
    cfg: &TrainConfig,
    stage: usize,
    rng: &mut Rng,
    mut batch: impl FnMut(&[Vec<f64>], &[usize]) -> Result<BatchStats>,
    mut val_loss: impl FnMut(&[Vec<f64>]) -> Result<Option<f64>>,
) -> Result<Vec<EpochLog>> {
    let mut opts: Vec<Momentum> = blocks.iter().map(|b| Momentum::new(b.len())).collect();
    let mut logs = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    if n_train == 0 {
        return Ok(logs);
    }
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(n_train);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let stats = batch(blocks, chunk)?;
            if !stats.loss.is_finite() {
                return Err(Error::Diverged {
                    stage,
                    epoch,
                    loss: stats.loss,
                });
            }
            loss_sum += stats.loss;
            correct += stats.correct;
            let scale = 1.0 / chunk.len() as f64;
            for ((block, grad), opt) in blocks.iter_mut().zip(stats.grads).zip(&mut opts) {
                if grad.is_empty() {
                    continue;
                }
                let grad: Vec<f64> = grad.into_iter().map(|g| g * scale).collect();
                opt.step(block, &grad, cfg.learning_rate, cfg.momentum)?;
            }
        }
        let train_loss = loss_sum / n_train as f64;
        let val = val_loss(blocks)?;
        logs.push(EpochLog {
            epoch,
            train_loss,
            train_accuracy: correct as f64 / n_train as f64,
            val_loss: val,
        });
        if let (Some(v), true) = (val, cfg.patience > 0) {
            if !v.is_finite() {
                return Err(Error::Diverged { stage, epoch, loss: v });
            }
            if v < best {
                best = v;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(logs)
}

/// Softmax cross-entropy over a score batch: summed loss, correct count and
/// the per-item gradient.
fn classify_loss(scores: &Tensor4, labels: &[usize]) -> Result<(f64, usize, Tensor4)> {
    let s = scores.shape();
    let mut grad = Tensor4::zeros(s);
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = scores.item(i);
        let (l, g) = softmax_cross_entropy(row, label)?;
        loss += l;
        if argmax(row) == label {
            correct += 1;
        }
        grad.item_mut(i).copy_from_slice(&g);
    }
    Ok((loss, correct, grad))
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A trainable segment: layers `range` of the network, optionally followed by
/// an auxiliary head, fed with precomputed inputs.
struct Segment<'a> {
    spec: &'a NetworkSpec,
    range: Range<usize>,
    head: Option<AuxHead>,
}

impl Segment<'_> {
    fn scores(&self, params: &ModelParams, head: Option<&[f64]>, x: &Tensor4) -> Result<Tensor4> {
        let out = run_layers(self.spec, params, x, self.range.clone())?;
        match (&self.head, head) {
            (Some(h), Some(hp)) => {
                let mut h = h.clone();
                h.params = hp.to_vec();
                h.forward(&out)
            }
            _ => Ok(out),
        }
    }

    /// Trains the segment's layers (and head) in place inside `params`.
    /// Returns the epoch log and the trained head.
    #[allow(clippy::too_many_arguments)]
    fn train(
        &self,
        params: &mut ModelParams,
        inputs: &Tensor4,
        labels: &[usize],
        val: Option<(&Tensor4, &[usize])>,
        cfg: &TrainConfig,
        stage: usize,
        rng: &mut Rng,
    ) -> Result<(Vec<EpochLog>, Option<AuxHead>)> {
        let n_layers = self.range.len();
        let mut blocks: Vec<Vec<f64>> = self.range.clone().map(|i| params.blocks[i].clone()).collect();
        if let Some(h) = &self.head {
            blocks.push(h.params.clone());
        }
        let range = self.range.clone();
        let spec = self.spec;
        let head_template = self.head.clone();
        let mut scratch = params.clone();
        let load = |scratch: &mut ModelParams, blocks: &[Vec<f64>]| {
            for (i, b) in range.clone().zip(blocks) {
                scratch.blocks[i].clone_from(b);
            }
        };
        let logs = {
            let mut eval_scratch = params.clone();
            fit(
                &mut blocks,
                labels.len(),
                cfg,
                stage,
                rng,
                |blocks, idx| {
                    load(&mut scratch, blocks);
                    let x = inputs.gather(idx);
                    let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    let acts = forward_layers(spec, &scratch, &x, range.clone())?;
                    let out = acts.last().expect("trace");
                    let (loss, correct, d_scores, head_grad) = match &head_template {
                        Some(h) => {
                            let mut h = h.clone();
                            h.params.clone_from(&blocks[n_layers]);
                            let scores = h.forward(out)?;
                            let (loss, correct, d_scores) = classify_loss(&scores, &batch_labels)?;
                            let lg = h.backward(out, &d_scores)?;
                            (loss, correct, lg.d_input, Some(lg.d_params))
                        }
                        None => {
                            let (loss, correct, d) = classify_loss(out, &batch_labels)?;
                            (loss, correct, d, None)
                        }
                    };
                    let (_, mut grads) = backward_layers(spec, &scratch, &acts, d_scores, range.clone(), true)?;
                    if let Some(hg) = head_grad {
                        grads.push(hg);
                    }
                    Ok(BatchStats { loss, correct, grads })
                },
                |blocks| {
                    let Some((vx, vl)) = val else { return Ok(None) };
                    if vl.is_empty() {
                        return Ok(None);
                    }
                    load(&mut eval_scratch, blocks);
                    let head = head_template.as_ref().map(|_| blocks[n_layers].as_slice());
                    let mut total = 0.0;
                    for start in (0..vl.len()).step_by(EVAL_CHUNK) {
                        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(vl.len())).collect();
                        let scores = self.scores(&eval_scratch, head, &vx.gather(&idx))?;
                        let labels: Vec<usize> = idx.iter().map(|&i| vl[i]).collect();
                        total += classify_loss(&scores, &labels)?.0;
                    }
                    Ok(Some(total / vl.len() as f64))
                },
            )?
        };
        for (i, b) in self.range.clone().zip(&blocks) {
            params.blocks[i].clone_from(b);
        }
        let head = self.head.clone().map(|mut h| {
            h.params.clone_from(&blocks[n_layers]);
            h
        });
        Ok((logs, head))
    }
}

fn check_inputs(spec: &NetworkSpec, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    for d in core::iter::once(train).chain(val) {
        if d.images.shape().with_n(1) != spec.input_shape() {
            return Err(Error::ShapeMismatch {
                context: "training data",
                expected: format!("items of {}", spec.input_shape()),
                found: format!("{}", d.images.shape()),
            });
        }
        d.check_classes(spec.classes())?;
    }
    Ok(())
}

/// Trains every layer jointly on softmax cross-entropy.
pub fn train_e2e(
    spec: &NetworkSpec,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    check_inputs(spec, train, val, cfg)?;
    let root = Rng::new(cfg.seed);
    let mut params = ModelParams::init(spec, root.derive("init").seed());
    let mut rng = root.derive("shuffle");
    let segment = Segment {
        spec,
        range: 0..spec.layers().len(),
        head: None,
    };
    let (epochs, _) = segment.train(
        &mut params,
        &train.images,
        &train.labels,
        val.map(|v| (&v.images, v.labels.as_slice())),
        cfg,
        0,
        &mut rng,
    )?;
    params.provenance = Provenance {
        scheme: Scheme::EndToEnd,
        seed: cfg.seed,
    };
    let report = TrainReport {
        stages: vec![StageLog {
            stage: 0,
            kind: StageKind::EndToEnd,
            epochs,
        }],
        stage_head_accuracy: Vec::new(),
        provenance: params.provenance.clone(),
    };
    Ok((params, report))
}

/// Cascade training along `plan`, followed by fitting the network's own
/// classifier on the frozen backbone so the full network produces scores.
pub fn train_cascade(
    spec: &NetworkSpec,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    plan: &SplitPlan,
) -> Result<(ModelParams, TrainReport)> {
    check_inputs(spec, train, val, cfg)?;
    if plan.tap_count() != spec.tap_count() {
        return Err(invalid(format!(
            "split plan covers {} taps, network has {}",
            plan.tap_count(),
            spec.tap_count()
        )));
    }
    let root = Rng::new(cfg.seed);
    let mut params = ModelParams::init(spec, root.derive("init").seed());
    let mut rng = root.derive("shuffle");
    let mut head_rng = root.derive("heads");
    let mut cur_train = train.images.clone();
    let mut cur_val = val.map(|v| v.images.clone());
    let mut stages = Vec::new();
    let mut head_acc = Vec::new();
    let mut prev_tap = 0;

    for (stage, part) in plan.parts().iter().enumerate() {
        let last_tap = part.end - 1;
        let range = spec.layers_between_taps(prev_tap, last_tap)?;
        let channels = spec.tap_shape(last_tap)?.c;
        let segment = Segment {
            spec,
            range: range.clone(),
            head: Some(AuxHead::new(last_tap, channels, spec.classes(), &mut head_rng)),
        };
        let val_pair = match (&cur_val, val) {
            (Some(vx), Some(v)) => Some((vx, v.labels.as_slice())),
            _ => None,
        };
        let (epochs, head) = segment.train(&mut params, &cur_train, &train.labels, val_pair, cfg, stage, &mut rng)?;
        for i in range.clone() {
            params.frozen[i] = true;
        }
        let head = head.expect("cascade stage has a head");
        cur_train = run_chunked(spec, &params, &cur_train, range.clone())?;
        if let Some(vx) = &cur_val {
            cur_val = Some(run_chunked(spec, &params, vx, range.clone())?);
        }
        head_acc.push((last_tap, pooled_accuracy(&head, &AuxHead::pool(&cur_train), &train.labels)?));
        stages.push(StageLog {
            stage,
            kind: StageKind::Cascade(part.clone()),
            epochs,
        });
        prev_tap = last_tap;
    }

    // The auxiliary heads are discarded; the network's own classifier is fitted
    // on the frozen backbone so that full-network scores exist.
    let range = spec.layers_after_tap(prev_tap)?;
    let segment = Segment {
        spec,
        range: range.clone(),
        head: None,
    };
    let val_pair = match (&cur_val, val) {
        (Some(vx), Some(v)) => Some((vx, v.labels.as_slice())),
        _ => None,
    };
    let (epochs, _) = segment.train(
        &mut params,
        &cur_train,
        &train.labels,
        val_pair,
        cfg,
        plan.len(),
        &mut rng,
    )?;
    stages.push(StageLog {
        stage: plan.len(),
        kind: StageKind::Classifier,
        epochs,
    });
    params.provenance = Provenance {
        scheme: Scheme::Cascade(plan.clone()),
        seed: cfg.seed,
    };
    let report = TrainReport {
        stages,
        stage_head_accuracy: head_acc,
        provenance: params.provenance.clone(),
    };
    Ok((params, report))
}

pub(crate) fn run_chunked(spec: &NetworkSpec, params: &ModelParams, x: &Tensor4, range: Range<usize>) -> Result<Tensor4> {
    let n = x.shape().n;
    if n == 0 {
        let item = if range.is_empty() {
            x.shape()
        } else {
            spec.layer_output_shape(range.end - 1)
        };
        return Ok(Tensor4::zeros(item.with_n(0)));
    }
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        parts.push(run_layers(spec, params, &x.gather(&idx), range.clone())?);
    }
    Tensor4::concat(&parts)
}

/// Activations at `tap` for every image, computed in chunks. Bitwise equal to
/// the tap entry of [`crate::network::forward_with_taps`].
pub fn cache_frozen_features(spec: &NetworkSpec, params: &ModelParams, images: &Tensor4, tap: usize) -> Result<Tensor4> {
    if tap > spec.tap_count() {
        return Err(invalid(format!("tap {tap} outside 0..={}", spec.tap_count())));
    }
    let range = spec.layers_between_taps(0, tap)?;
    let item = spec.tap_shape(tap)?;
    // fail early rather than deep inside the loop
    Tensor4::try_zeros(item.with_n(images.shape().n))?;
    run_chunked(spec, params, images, range)
}

/// Global-average-pooled activations at every tap, `result[t - 1]` for tap `t`.
pub fn pooled_tap_features(spec: &NetworkSpec, params: &ModelParams, images: &Tensor4) -> Result<Vec<Tensor4>> {
    let n = images.shape().n;
    let mut per_tap: Vec<Vec<Tensor4>> = vec![Vec::new(); spec.tap_count()];
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let x = images.gather(&idx);
        let (_, taps) = crate::network::forward_with_taps(spec, params, &x, spec.tap_count())?;
        for (t, acts) in taps.iter() {
            per_tap[t - 1].push(AuxHead::pool(acts));
        }
    }
    per_tap
        .into_iter()
        .enumerate()
        .map(|(t, parts)| {
            if parts.is_empty() {
                Ok(Tensor4::zeros(Shape4::new(0, spec.tap_shape(t + 1)?.c, 1, 1)))
            } else {
                Tensor4::concat(&parts)
            }
        })
        .collect()
}

fn pooled_accuracy(head: &AuxHead, pooled: &Tensor4, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let scores = head.forward_pooled(pooled)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(scores.item(*i)) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Trains an [`AuxHead`] on precomputed pooled features.
pub fn train_head_on_pooled(
    head: AuxHead,
    pooled: &Tensor4,
    labels: &[usize],
    val: Option<(&Tensor4, &[usize])>,
    cfg: &TrainConfig,
    stage: usize,
    rng: &mut Rng,
) -> Result<(AuxHead, Vec<EpochLog>)> {
    let mut blocks = vec![head.params.clone()];
    let template = head;
    let logs = fit(
        &mut blocks,
        labels.len(),
        cfg,
        stage,
        rng,
        |blocks, idx| {
            let mut h = template.clone();
            h.params.clone_from(&blocks[0]);
            let x = pooled.gather(idx);
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let scores = h.forward_pooled(&x)?;
            let (loss, correct, d) = classify_loss(&scores, &batch_labels)?;
            let lg = h.backward_pooled(&x, &d)?;
            Ok(BatchStats {
                loss,
                correct,
                grads: vec![lg.d_params],
            })
        },
        |blocks| {
            let Some((vx, vl)) = val else { return Ok(None) };
            if vl.is_empty() {
                return Ok(None);
            }
            let mut h = template.clone();
            h.params.clone_from(&blocks[0]);
            let scores = h.forward_pooled(vx)?;
            Ok(Some(classify_loss(&scores, vl)?.0 / vl.len() as f64))
        },
    )?;
    let mut head = template;
    head.params = blocks.pop().expect("one block");
    Ok((head, logs))
}

/// Fresh probes trained on the frozen features of every tap.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    /// `heads[t - 1]` probes tap `t`.
    pub heads: Vec<AuxHead>,
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<Option<f64>>,
    pub logs: Vec<StageLog>,
}

impl ProbeSet {
    pub fn head(&self, tap: usize) -> Result<&AuxHead> {
        if tap == 0 || tap > self.heads.len() {
            return Err(invalid(format!("no probe at tap {tap}")));
        }
        Ok(&self.heads[tap - 1])
    }
}

/// Trains one fresh [`AuxHead`] per tap on frozen backbone features. The
/// backbone is only read.
pub fn train_probes(
    spec: &NetworkSpec,
    params: &ModelParams,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<ProbeSet> {
    check_inputs(spec, train, val, cfg)?;
    params.check_against(spec)?;
    let train_feats = pooled_tap_features(spec, params, &train.images)?;
    let val_feats = match val {
        Some(v) => Some(pooled_tap_features(spec, params, &v.images)?),
        None => None,
    };
    let root = Rng::new(cfg.seed);
    let mut out = ProbeSet {
        heads: Vec::new(),
        train_accuracy: Vec::new(),
        val_accuracy: Vec::new(),
        logs: Vec::new(),
    };
    for tap in 1..=spec.tap_count() {
        let mut rng = root.derive(&format!("probe-{tap}"));
        let channels = spec.tap_shape(tap)?.c;
        let head = AuxHead::new(tap, channels, spec.classes(), &mut rng);
        let feats = &train_feats[tap - 1];
        let val_pair = match (&val_feats, val) {
            (Some(vf), Some(v)) => Some((&vf[tap - 1], v.labels.as_slice())),
            _ => None,
        };
        let (head, epochs) = train_head_on_pooled(head, feats, &train.labels, val_pair, cfg, tap, &mut rng)?;
        out.train_accuracy.push(pooled_accuracy(&head, feats, &train.labels)?);
        out.val_accuracy.push(match val_pair {
            Some((vf, vl)) if !vl.is_empty() => Some(pooled_accuracy(&head, vf, vl)?),
            _ => None,
        });
        out.logs.push(StageLog {
            stage: tap,
            kind: StageKind::Probe(tap),
            epochs,
        });
        out.heads.push(head);
    }
    Ok(out)
}

/// Retrains the network's own classifier (the layers after the last tap) on
/// frozen features, starting from a fresh initialisation. Used to compare
/// against the last-tap probe.
pub fn retrain_classifier(
    spec: &NetworkSpec,
    params: &ModelParams,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    check_inputs(spec, train, None, cfg)?;
    let last = spec.tap_count();
    let feats = cache_frozen_features(spec, params, &train.images, last)?;
    let range = spec.layers_after_tap(last)?;
    let mut out = params.clone();
    let fresh = ModelParams::init(spec, Rng::new(cfg.seed).derive("classifier").seed());
    for i in range.clone() {
        out.blocks[i].clone_from(&fresh.blocks[i]);
    }
    let segment = Segment {
        spec,
        range,
        head: None,
    };
    let mut rng = Rng::new(cfg.seed).derive("classifier-shuffle");
    segment.train(&mut out, &feats, &train.labels, None, cfg, 0, &mut rng)?;
    Ok(out)
}

/// Fraction of items whose arg-max class score equals the label.
pub fn accuracy(spec: &NetworkSpec, params: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let scores = run_chunked(spec, params, &data.images, 0..spec.layers().len())?;
    let correct = data
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(scores.item(*i)) == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of a probe on raw images.
pub fn probe_accuracy(spec: &NetworkSpec, params: &ModelParams, head: &AuxHead, data: &Dataset) -> Result<f64> {
    let feats = cache_frozen_features(spec, params, &data.images, head.tap)?;
    pooled_accuracy(head, &AuxHead::pool(&feats), &data.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_six_layer_net;

    #[test]
    fn split_plan_examples() {
        let p = make_split_plan(6, 3).unwrap();
        assert_eq!(p.parts(), &[1..3, 3..5, 5..7]);
        let p = make_split_plan(6, 6).unwrap();
        assert_eq!(p.boundaries(), vec![1, 2, 3, 4, 5, 6]);
        let p = make_split_plan(6, 4).unwrap();
        assert_eq!(p.parts(), &[1..3, 3..5, 5..6, 6..7]);
        assert!(make_split_plan(6, 0).is_err());
        assert!(make_split_plan(6, 7).is_err());
    }

    #[test]
    fn split_plan_is_partition_for_all_k() {
        for taps in 1..=12 {
            for k in 1..=taps {
                let p = make_split_plan(taps, k).unwrap();
                assert_eq!(p.len(), k);
                let covered: Vec<usize> = p.parts().iter().flat_map(|r| r.clone()).collect();
                assert_eq!(covered, (1..=taps).collect::<Vec<_>>());
                let sizes: Vec<usize> = p.parts().iter().map(|r| r.len()).collect();
                assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
            }
        }
    }

    #[test]
    fn zero_epochs_leaves_initialisation() {
        let spec = build_six_layer_net((1, 8, 8), 2, &[2; 6]).unwrap();
        let data = Dataset::new(Tensor4::zeros(Shape4::new(4, 1, 8, 8)), vec![0, 1, 0, 1]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (params, _) = train_e2e(&spec, &data, None, &cfg).unwrap();
        let init = ModelParams::init(&spec, Rng::new(cfg.seed).derive("init").seed());
        assert_eq!(params.blocks, init.blocks);
    }

    #[test]
    fn divergence_is_reported_with_stage() {
        let spec = build_six_layer_net((1, 8, 8), 2, &[2; 6]).unwrap();
        let mut rng = Rng::new(1);
        let images = Tensor4::from_vec(Shape4::new(4, 1, 8, 8), (0..256).map(|_| rng.uniform()).collect()).unwrap();
        let data = Dataset::new(images, vec![0, 1, 0, 1]).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 1e200,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let err = train_cascade(&spec, &data, None, &cfg, &make_split_plan(6, 2).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Diverged { stage: 0, .. }), "{err:?}");
    }

    #[test]
    fn rejects_bad_labels_and_config() {
        let spec = build_six_layer_net((1, 8, 8), 2, &[2; 6]).unwrap();
        let data = Dataset::new(Tensor4::zeros(Shape4::new(2, 1, 8, 8)), vec![0, 2]).unwrap();
        assert!(train_e2e(&spec, &data, None, &TrainConfig::default()).is_err());
        let ok = Dataset::new(Tensor4::zeros(Shape4::new(2, 1, 8, 8)), vec![0, 1]).unwrap();
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train_e2e(&spec, &ok, None, &bad).is_err());
        assert!(Dataset::new(Tensor4::zeros(Shape4::new(2, 1, 8, 8)), vec![0]).is_err());
    }

    #[test]
    fn cache_of_empty_set_is_empty() {
        let spec = build_six_layer_net((1, 8, 8), 2, &[2; 6]).unwrap();
        let params = ModelParams::init(&spec, 1);
        let c = cache_frozen_features(&spec, &params, &Tensor4::zeros(Shape4::new(0, 1, 8, 8)), 3).unwrap();
        assert_eq!(c.shape().n, 0);
        assert_eq!(c.shape().with_n(1), spec.tap_shape(3).unwrap());
    }
}
