//! Inner/outer-loop optimization: offline meta-training and deployment-time
//! continual learning.
//!
//! Meta-training runs first-order nested optimization over a class stream:
//! each outer step snapshots the classifier, adapts it with k single-sample
//! SGD steps on one class trajectory, computes the meta-loss on that
//! trajectory plus random samples from all classes, restores the snapshot,
//! and applies one Adam step to every slow weight with the gradients taken
//! at the adapted point. Deployment freezes the extractor and learns unseen
//! classes one at a time: inner SGD on the classifier over cached latents,
//! then outer Adam epochs over the current latents concatenated with the
//! decompressed rehearsal buffer.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::compress::PQCodebook;
use crate::data::{shuffled_trajectory, ClassData};
use crate::memory::memory_report;
use crate::model::ModelState;
use crate::replay::{ReplayBuffer, StoredSample};
use crate::rng::stream;
use crate::tensor::{sgd_step, Adam, Tape, Tensor};
use crate::{Error, Result};

/// Learning-rate and loop-shape configuration shared by both phases.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainConfig {
    /// Inner-loop learning rate (alpha).
    pub inner_lr: f32,
    /// Outer-loop learning rate (beta).
    pub outer_lr: f32,
    /// Inner-loop step count k; each step consumes one trajectory sample.
    pub inner_steps: usize,
    pub outer_steps: usize,
    /// Inner-loop batch size (one sample per update).
    pub inner_batch: usize,
    /// Meta-loss batch size during meta-training.
    pub outer_batch: usize,
    /// Random-sample count mixed into the meta-loss; 0 fills the outer
    /// batch after the trajectory.
    pub rand_sample_count: usize,
    /// Outer-loop batch size during deployment replay.
    pub replay_batch: usize,
    /// Ring-buffer cap on collected latents for codebook training.
    pub corpus_cap: usize,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-3,
            outer_lr: 1e-3,
            inner_steps: 20,
            outer_steps: 20_000,
            inner_batch: 1,
            outer_batch: 64,
            rand_sample_count: 0,
            replay_batch: 8,
            corpus_cap: 4096,
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    /// Small preset that meta-trains in seconds.
    pub fn desk_preset(seed: u64) -> Self {
        Self { outer_steps: 500, inner_steps: 15, corpus_cap: 2048, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_lr < 0.0 || self.outer_lr <= 0.0 {
            return Err(Error::Validation("learning rates must be positive".into()));
        }
        if self.inner_steps < 1 {
            return Err(Error::Validation("inner_steps must be >= 1".into()));
        }
        if self.outer_steps < 1 {
            return Err(Error::Validation("outer_steps must be >= 1".into()));
        }
        if self.inner_batch != 1 {
            return Err(Error::Validation("inner updates are single-sample (inner_batch = 1)".into()));
        }
        if self.outer_batch < 2 || self.replay_batch < 1 {
            return Err(Error::Validation("batch sizes too small".into()));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("inner_lr".into(), format!("{}", self.inner_lr)),
            ("outer_lr".into(), format!("{}", self.outer_lr)),
            ("inner_steps".into(), self.inner_steps.to_string()),
            ("outer_steps".into(), self.outer_steps.to_string()),
            ("inner_batch".into(), self.inner_batch.to_string()),
            ("outer_batch".into(), self.outer_batch.to_string()),
            ("rand_sample_count".into(), self.rand_sample_count.to_string()),
            ("replay_batch".into(), self.replay_batch.to_string()),
            ("corpus_cap".into(), self.corpus_cap.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// The ordered few-shot sample set of one class.
#[derive(Debug, Clone)]
pub struct ClassTrajectory {
    pub class_id: u32,
    pub samples: Vec<Tensor>,
}

/// What meta-training leaves behind besides the updated weights.
#[derive(Debug)]
pub struct MetaTrainOutcome {
    /// Post-gate latents collected across outer steps (ring-buffered to
    /// `corpus_cap`); the training corpus for the PQ codebook.
    pub latent_corpus: Vec<Vec<f32>>,
    pub final_loss: f32,
}

/// First-order meta-training over `train_classes`, updating `model` in
/// place and collecting the latent corpus.
pub fn meta_train(
    model: &mut ModelState,
    train_classes: &[ClassData],
    cfg: &MetaTrainConfig,
) -> Result<MetaTrainOutcome> {
    cfg.validate()?;
    if train_classes.len() < 2 {
        return Err(Error::Validation("meta-training needs at least two classes".into()));
    }
    if model.extractor_frozen() || model.is_quantized() {
        return Err(Error::State("meta-training requires a trainable (unfrozen) extractor".into()));
    }
    for class in train_classes {
        if class.train.is_empty() {
            return Err(Error::Validation(format!("class {} has no training samples", class.class_id)));
        }
    }

    let mut rng_class = stream(cfg.seed, "meta-class");
    let mut rng_traj = stream(cfg.seed, "meta-traj");
    let mut rng_rand = stream(cfg.seed, "meta-rand");

    let mut adam =
        Adam::for_groups(&[model.nm_weights(), model.pred_weights(), model.classifier_weights()]);
    let mut corpus: Vec<Vec<f32>> = Vec::new();
    let mut corpus_cursor = 0usize;
    let mut final_loss = f32::NAN;

    // Flat (class, sample) index for drawing the random meta-loss half.
    let all_samples: Vec<(u32, &Tensor)> = train_classes
        .iter()
        .flat_map(|c| c.train.iter().map(move |t| (c.class_id, t)))
        .collect();

    for step in 1..=cfg.outer_steps as u64 {
        let class = &train_classes[rng_class.gen_range(0..train_classes.len())];
        let traj = shuffled_trajectory(class, &mut rng_traj);

        // Inner loop: fast-weight adaptation of the classifier only.
        let snapshot = model.classifier_weights().snapshot();
        for i in 0..cfg.inner_steps {
            let sample = traj[i % traj.len()];
            let batch = Tensor::stack(&[sample])?;
            let mut tape = Tape::new();
            let x = tape.input(&batch);
            let latent = model.forward_latent(&mut tape, x, false)?;
            let logits = model.forward_logits(&mut tape, latent, true)?;
            let loss = tape.softmax_cross_entropy(logits, &[class.class_id as usize])?;
            tape.backward(loss)?;
            sgd_step(model.classifier_weights(), cfg.inner_lr)?;
        }

        // Meta-loss over the trajectory plus random samples from all classes.
        let rand_count = if cfg.rand_sample_count > 0 {
            cfg.rand_sample_count
        } else {
            cfg.outer_batch.saturating_sub(traj.len()).max(1)
        };
        let mut batch_refs: Vec<&Tensor> = traj.clone();
        let mut labels: Vec<usize> = vec![class.class_id as usize; traj.len()];
        for _ in 0..rand_count {
            let (label, sample) = all_samples[rng_rand.gen_range(0..all_samples.len())];
            batch_refs.push(sample);
            labels.push(label as usize);
        }

        let batch = Tensor::stack(&batch_refs)?;
        let mut tape = Tape::new();
        let x = tape.input(&batch);
        let latent = model.forward_latent(&mut tape, x, true)?;
        let logits = model.forward_logits(&mut tape, latent, true)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        let loss_value = tape.data(loss)[0];
        if !loss_value.is_finite() {
            return Err(Error::Training(format!(
                "meta-training diverged at outer step {step}: loss {loss_value}"
            )));
        }
        final_loss = loss_value;

        // Ring-buffer the post-gate latents for offline codebook learning.
        let latent_dim = tape.shape(latent)[1];
        for row in tape.data(latent).chunks(latent_dim) {
            if corpus.len() < cfg.corpus_cap {
                corpus.push(row.to_vec());
            } else if cfg.corpus_cap > 0 {
                corpus[corpus_cursor] = row.to_vec();
                corpus_cursor = (corpus_cursor + 1) % cfg.corpus_cap;
            }
        }

        tape.backward(loss)?;
        // First-order scheme: gradients were taken at the adapted fast
        // weights; the update applies to the restored base weights.
        model.classifier_weights().restore(&snapshot);
        adam.step_at(cfg.outer_lr, step)?;
    }

    Ok(MetaTrainOutcome { latent_corpus: corpus, final_loss })
}

/// How rehearsal latents are stored during deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayCodec {
    /// Dense f32 control.
    Raw,
    /// Lossless bitmap stage only.
    Bitmap,
    /// Bitmap + product quantization (the deployment codec).
    BitPq,
}

impl ReplayCodec {
    pub fn name(&self) -> &'static str {
        match self {
            ReplayCodec::Raw => "raw",
            ReplayCodec::Bitmap => "bitmap",
            ReplayCodec::BitPq => "bitpq",
        }
    }
}

/// Deployment-time options on top of [`MetaTrainConfig`].
#[derive(Debug, Clone)]
pub struct ContinualOptions {
    /// Outer-loop epochs per class; 0 disables replay entirely (inner loop
    /// only, nothing stored).
    pub replay_epochs: usize,
    pub codec: ReplayCodec,
}

impl Default for ContinualOptions {
    fn default() -> Self {
        Self { replay_epochs: 2, codec: ReplayCodec::BitPq }
    }
}

/// One row of the continual-learning table.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStep {
    pub class_id: u32,
    /// Accuracy on this class's training latents after its adaptation.
    pub train_acc: f32,
    /// Test accuracy over all classes seen so far.
    pub test_acc_all_seen: f32,
    pub buffer_bytes: usize,
    /// Test accuracy on the first stream class (forgetting witness).
    pub first_class_test_acc: f32,
}

/// Outcome of one continual-learning run.
#[derive(Debug, Clone)]
pub struct CLRunReport {
    pub steps: Vec<ClassStep>,
    /// `(class_id, train_acc, test_acc)` after the full run.
    pub per_class_final: Vec<(u32, f32, f32)>,
    /// Test accuracy over all stream classes after the full run.
    pub final_accuracy: f32,
    pub buffer_bytes: usize,
    pub peak_memory_bytes: usize,
    pub wall_time_secs: f64,
    pub config_echo: Vec<(String, String)>,
}

impl CLRunReport {
    /// Key=value report, configuration first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config_echo {
            out.push_str(&format!("config.{k}={v}\n"));
        }
        out.push_str(&format!("final_accuracy={:.6}\n", self.final_accuracy));
        out.push_str(&format!("buffer_bytes={}\n", self.buffer_bytes));
        out.push_str(&format!("peak_memory_bytes={}\n", self.peak_memory_bytes));
        out.push_str(&format!("wall_time_secs={:.3}\n", self.wall_time_secs));
        for (class, train, test) in &self.per_class_final {
            out.push_str(&format!("class.{class}.train_acc={train:.6}\n"));
            out.push_str(&format!("class.{class}.test_acc={test:.6}\n"));
        }
        out
    }

    /// One row per class step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,train_acc,test_acc_all_seen,buffer_bytes\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                s.class_id, s.train_acc, s.test_acc_all_seen, s.buffer_bytes
            ));
        }
        out
    }
}

/// Argmax over `row`, restricted to `allowed` class ids when given.
fn argmax_allowed(row: &[f32], allowed: Option<&[u32]>) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f32::NEG_INFINITY;
    match allowed {
        Some(ids) => {
            for &id in ids {
                let v = row[id as usize];
                if best == usize::MAX || v > best_v {
                    best_v = v;
                    best = id as usize;
                }
            }
        }
        None => {
            for (i, &v) in row.iter().enumerate() {
                if best == usize::MAX || v > best_v {
                    best_v = v;
                    best = i;
                }
            }
        }
    }
    best
}

/// Top-1 accuracy of the deployed model over `(sample, label)` pairs.
///
/// `allowed` restricts the prediction to the given class ids — the
/// continual-learning protocol scores over the classes learned so far, not
/// over classifier rows that were never trained.
pub fn evaluate(model: &ModelState, pairs: &[(&Tensor, u32)], allowed: Option<&[u32]>) -> Result<f32> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let classes = model.arch().num_classes_max;
    let mut correct = 0usize;
    // batched in chunks to bound activation size
    for chunk in pairs.chunks(64) {
        let refs: Vec<&Tensor> = chunk.iter().map(|(t, _)| *t).collect();
        let batch = Tensor::stack(&refs)?;
        let latent = model.latent(&batch)?;
        let logits = model.classify(&latent)?;
        for (i, (_, label)) in chunk.iter().enumerate() {
            if argmax_allowed(&logits.data()[i * classes..(i + 1) * classes], allowed)
                == *label as usize
            {
                correct += 1;
            }
        }
    }
    Ok(correct as f32 / pairs.len() as f32)
}

/// Accuracy of the classifier on cached latent rows.
fn latent_accuracy(
    model: &ModelState,
    latents: &[Vec<f32>],
    labels: &[u32],
    allowed: Option<&[u32]>,
) -> Result<f32> {
    if latents.is_empty() {
        return Ok(0.0);
    }
    let dim = latents[0].len();
    let classes = model.arch().num_classes_max;
    let mut data = Vec::with_capacity(latents.len() * dim);
    for row in latents {
        data.extend_from_slice(row);
    }
    let logits = model.classify(&Tensor::new(vec![latents.len(), dim], data)?)?;
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if argmax_allowed(&logits.data()[i * classes..(i + 1) * classes], allowed) == label as usize
        {
            correct += 1;
        }
    }
    Ok(correct as f32 / latents.len() as f32)
}

/// One classifier update (cross-entropy over cached latent rows).
fn classifier_step(
    model: &ModelState,
    latents: &[&[f32]],
    labels: &[usize],
) -> Result<f32> {
    let dim = latents[0].len();
    let mut data = Vec::with_capacity(latents.len() * dim);
    for row in latents {
        data.extend_from_slice(row);
    }
    let batch = Tensor::new(vec![latents.len(), dim], data)?;
    let mut tape = Tape::new();
    let x = tape.input(&batch);
    let logits = model.forward_logits(&mut tape, x, true)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = tape.data(loss)[0];
    tape.backward(loss)?;
    Ok(loss_value)
}

/// Deployment-time continual learning over a stream of unseen classes.
///
/// Per class: latents of the trajectory are computed once through the
/// frozen extractor and cached; the classifier's row for the class is
/// freshly initialized; k inner SGD steps adapt it sample-by-sample; then
/// `replay_epochs` outer Adam epochs run over the current latents
/// concatenated with the decompressed buffer (batch `replay_batch`), after
/// which the trajectory is compressed into the buffer. Test accuracy over
/// all seen classes is recorded after every class.
pub fn continual_learn(
    model: &mut ModelState,
    stream_classes: &[ClassData],
    codebook: Option<&PQCodebook>,
    cfg: &MetaTrainConfig,
    options: &ContinualOptions,
) -> Result<CLRunReport> {
    cfg.validate()?;
    if stream_classes.is_empty() {
        return Err(Error::Validation("continual learning needs at least one class".into()));
    }
    for class in stream_classes {
        if class.train.is_empty() {
            return Err(Error::Validation(format!("class {} has no samples", class.class_id)));
        }
        if class.class_id as usize >= model.arch().num_classes_max {
            return Err(Error::Validation(format!(
                "class {} exceeds classifier capacity {}",
                class.class_id,
                model.arch().num_classes_max
            )));
        }
    }
    if !model.extractor_frozen() {
        return Err(Error::State("deployment requires a frozen extractor".into()));
    }
    if options.codec == ReplayCodec::BitPq && codebook.is_none() {
        return Err(Error::Config("bitpq codec requires a codebook".into()));
    }

    let start = Instant::now();
    let mut rng_traj = stream(cfg.seed, "cl-traj");
    let mut rng_init = stream(cfg.seed, "cl-init");
    let mut rng_shuffle = stream(cfg.seed, "cl-shuffle");

    let capacity = stream_classes.iter().map(|c| c.train.len()).max().unwrap_or(0);
    let mut buffer = ReplayBuffer::new(capacity);
    let mut steps: Vec<ClassStep> = Vec::with_capacity(stream_classes.len());
    let mut peak_memory = 0usize;
    // cached training latents per seen class, for final train accuracies
    let mut cached: Vec<(u32, Vec<Vec<f32>>)> = Vec::new();

    let first_class_pairs: Vec<(&Tensor, u32)> = stream_classes[0]
        .test
        .iter()
        .map(|t| (t, stream_classes[0].class_id))
        .collect();

    for (seen, class) in stream_classes.iter().enumerate() {
        // (a) latents through the frozen extractor, computed once
        let traj = shuffled_trajectory(class, &mut rng_traj);
        let batch = Tensor::stack(&traj)?;
        let latent_batch = model.latent(&batch)?;
        let dim = latent_batch.shape()[1];
        let latents: Vec<Vec<f32>> =
            latent_batch.data().chunks(dim).map(|c| c.to_vec()).collect();

        // (b) fresh fast weights for the incoming class
        model.reinit_classifier_row(class.class_id, &mut rng_init)?;

        // inner loop: single-sample SGD on the classifier
        for i in 0..cfg.inner_steps {
            let row = &latents[i % latents.len()];
            classifier_step(model, &[row.as_slice()], &[class.class_id as usize])?;
            sgd_step(model.classifier_weights(), cfg.inner_lr)?;
        }

        // outer loop: replay epochs over current + rehearsal latents
        if options.replay_epochs > 0 {
            let (mut pool, mut pool_labels) = buffer.decompress_all(codebook)?;
            for row in &latents {
                pool.push(row.clone());
                pool_labels.push(class.class_id);
            }
            let mut adam = Adam::for_groups(&[model.classifier_weights()]);
            let mut t = 0u64;
            let mut order: Vec<usize> = (0..pool.len()).collect();
            for _epoch in 0..options.replay_epochs {
                order.shuffle(&mut rng_shuffle);
                for chunk in order.chunks(cfg.replay_batch) {
                    let rows: Vec<&[f32]> = chunk.iter().map(|&i| pool[i].as_slice()).collect();
                    let labels: Vec<usize> =
                        chunk.iter().map(|&i| pool_labels[i] as usize).collect();
                    let loss = classifier_step(model, &rows, &labels)?;
                    if !loss.is_finite() {
                        return Err(Error::Training(format!(
                            "replay diverged on class {}: loss {loss}",
                            class.class_id
                        )));
                    }
                    t += 1;
                    adam.step_at(cfg.outer_lr, t)?;
                }
            }

            // (c) store this class's latents for future rehearsal
            for row in &latents {
                let sample = match options.codec {
                    ReplayCodec::Raw => StoredSample::raw(class.class_id, row.clone()),
                    ReplayCodec::Bitmap => StoredSample::bitmap(class.class_id, row)?,
                    ReplayCodec::BitPq => StoredSample::bit_pq(
                        class.class_id,
                        row,
                        codebook.expect("checked above"),
                    )?,
                };
                buffer.store(sample)?;
            }
        }

        debug_assert_eq!(buffer.byte_size(), buffer.recompute_byte_size());
        cached.push((class.class_id, latents.clone()));

        // evaluate on everything seen so far, scored over seen classes
        let seen_ids: Vec<u32> = stream_classes[..=seen].iter().map(|c| c.class_id).collect();
        let train_labels = vec![class.class_id; latents.len()];
        let train_acc = latent_accuracy(model, &latents, &train_labels, Some(&seen_ids))?;
        let seen_pairs: Vec<(&Tensor, u32)> = stream_classes[..=seen]
            .iter()
            .flat_map(|c| c.test.iter().map(move |t| (t, c.class_id)))
            .collect();
        let test_acc_all_seen = evaluate(model, &seen_pairs, Some(&seen_ids))?;
        let first_class_test_acc = evaluate(model, &first_class_pairs, Some(&seen_ids))?;

        let mem = memory_report(model, Some(&buffer), cfg.replay_batch)?;
        peak_memory = peak_memory.max(mem.total_bytes());

        steps.push(ClassStep {
            class_id: class.class_id,
            train_acc,
            test_acc_all_seen,
            buffer_bytes: buffer.byte_size(),
            first_class_test_acc,
        });
    }

    // final per-class accuracies under the finished classifier
    let stream_ids: Vec<u32> = stream_classes.iter().map(|c| c.class_id).collect();
    let mut per_class_final = Vec::with_capacity(stream_classes.len());
    for (class, latents) in &cached {
        let labels = vec![*class; latents.len()];
        let train_acc = latent_accuracy(model, latents, &labels, Some(&stream_ids))?;
        let class_data = stream_classes.iter().find(|c| c.class_id == *class).unwrap();
        let pairs: Vec<(&Tensor, u32)> =
            class_data.test.iter().map(|t| (t, *class)).collect();
        let test_acc = evaluate(model, &pairs, Some(&stream_ids))?;
        per_class_final.push((*class, train_acc, test_acc));
    }
    let all_pairs: Vec<(&Tensor, u32)> = stream_classes
        .iter()
        .flat_map(|c| c.test.iter().map(move |t| (t, c.class_id)))
        .collect();
    let final_accuracy = evaluate(model, &all_pairs, Some(&stream_ids))?;

    let mut config_echo = cfg.to_key_values();
    config_echo.push(("replay_epochs".into(), options.replay_epochs.to_string()));
    config_echo.push(("codec".into(), options.codec.name().to_string()));
    config_echo.push(("quantized".into(), model.is_quantized().to_string()));
    config_echo.push(("stream_classes".into(), stream_classes.len().to_string()));

    Ok(CLRunReport {
        steps,
        per_class_final,
        final_accuracy,
        buffer_bytes: buffer.byte_size(),
        peak_memory_bytes: peak_memory,
        wall_time_secs: start.elapsed().as_secs_f64(),
        config_echo,
    })
}
