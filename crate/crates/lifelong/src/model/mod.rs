//! The two-branch gated architecture and its deployment-time freezing.
//!
//! A neuromodulatory branch (conv stack + gating head) multiplicatively
//! gates the flattened output of a prediction branch (conv stack); the gated
//! product is the latent layer, and a single fully-connected classifier maps
//! it to logits. Both branches end in ReLU, so the latent is elementwise
//! non-negative and, in practice, heavily sparse — that sparsity is what the
//! replay codec exploits.

mod quant;

pub use quant::{QConvLayer, QFcLayer, QParams, QuantizedExtractor, QuantizedTensor};

use rand_chacha::ChaCha8Rng;

use crate::tensor::{kaiming_uniform, shared, NodeId, ParamGroup, Role, SharedTensor, Tape, Tensor};
use crate::{Error, Result};

/// Structural hyperparameters. Channel counts are the full-width values and
/// are scaled by `width_multiplier` (rounded, floor 1) at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureConfig {
    /// Input sample shape `[channels, height, width]`.
    pub input_shape: [usize; 3],
    /// Neuromodulatory-branch channel count at width 1.0.
    pub nm_channels: usize,
    /// Prediction-branch channel count at width 1.0.
    pub pred_channels: usize,
    pub num_conv_layers: usize,
    pub num_classes_max: usize,
    pub width_multiplier: f32,
    pub kernel_size: usize,
    pub stride: usize,
}

impl ArchitectureConfig {
    /// Full-width channel counts with a reduced desk-scale width so tests
    /// run in seconds.
    pub fn desk_default(input_shape: [usize; 3], num_classes_max: usize) -> Self {
        Self {
            input_shape,
            nm_channels: 112,
            pred_channels: 256,
            num_conv_layers: 3,
            num_classes_max,
            width_multiplier: 0.25,
            kernel_size: 3,
            stride: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_multiplier <= 0.0 {
            return Err(Error::Validation("width multiplier must be > 0".into()));
        }
        if self.num_conv_layers == 0 || self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::Validation("conv layers, kernel size, and stride must be >= 1".into()));
        }
        if self.num_classes_max == 0 {
            return Err(Error::Validation("need at least one class".into()));
        }
        self.conv_output_hw()?;
        Ok(())
    }

    pub fn nm_width(&self) -> usize {
        scale_width(self.nm_channels, self.width_multiplier)
    }

    pub fn pred_width(&self) -> usize {
        scale_width(self.pred_channels, self.width_multiplier)
    }

    /// Spatial size after the conv stack (both branches share geometry).
    pub fn conv_output_hw(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for layer in 0..self.num_conv_layers {
            if self.kernel_size > h || self.kernel_size > w {
                return Err(Error::Validation(format!(
                    "conv layer {} kernel {} larger than remaining {}x{} input",
                    layer, self.kernel_size, h, w
                )));
            }
            h = (h - self.kernel_size) / self.stride + 1;
            w = (w - self.kernel_size) / self.stride + 1;
        }
        Ok((h, w))
    }

    /// Flattened length of the prediction branch output == latent length.
    pub fn latent_dim(&self) -> Result<usize> {
        let (h, w) = self.conv_output_hw()?;
        Ok(self.pred_width() * h * w)
    }

    fn nm_flat_len(&self) -> Result<usize> {
        let (h, w) = self.conv_output_hw()?;
        Ok(self.nm_width() * h * w)
    }
}

fn scale_width(base: usize, multiplier: f32) -> usize {
    ((base as f32 * multiplier).round() as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: SharedTensor,
    pub bias: SharedTensor,
}

#[derive(Debug, Clone)]
pub struct FcLayer {
    pub weight: SharedTensor,
    pub bias: SharedTensor,
}

/// Per-layer post-ReLU activations of one extractor forward pass. Used for
/// quantization calibration and for testing the gated composition directly.
pub struct ExtractorTrace {
    pub nm_conv_outs: Vec<Tensor>,
    /// Post-ReLU gate vector, `[batch, latent_dim]`.
    pub nm_gate: Tensor,
    pub pred_conv_outs: Vec<Tensor>,
    /// Flattened post-ReLU prediction output, `[batch, latent_dim]`.
    pub pred_flat: Tensor,
    /// `nm_gate * pred_flat`.
    pub latent: Tensor,
}

/// Weights of both branches and the classifier, partitioned into parameter
/// groups. During meta-training the extractor groups carry `SlowWeights`;
/// deployment freezes them (and may attach an int8 copy), after which the
/// classifier is the only trainable group.
pub struct ModelState {
    arch: ArchitectureConfig,
    nm_convs: Vec<ConvLayer>,
    nm_gate: FcLayer,
    pred_convs: Vec<ConvLayer>,
    classifier: FcLayer,
    nm_group: ParamGroup,
    pred_group: ParamGroup,
    classifier_group: ParamGroup,
    quantized: Option<QuantizedExtractor>,
}

impl std::fmt::Debug for ModelState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelState")
            .field("arch", &self.arch)
            .field("frozen", &self.extractor_frozen())
            .field("quantized", &self.quantized.is_some())
            .finish_non_exhaustive()
    }
}

impl ModelState {
    pub fn init(arch: ArchitectureConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let k = arch.kernel_size;
        let latent_dim = arch.latent_dim()?;
        let nm_flat = arch.nm_flat_len()?;

        let make_branch = |width: usize, rng: &mut ChaCha8Rng| -> Vec<ConvLayer> {
            let mut layers = Vec::with_capacity(arch.num_conv_layers);
            let mut in_ch = arch.input_shape[0];
            for _ in 0..arch.num_conv_layers {
                let fan_in = in_ch * k * k;
                layers.push(ConvLayer {
                    weight: shared(kaiming_uniform(&[width, in_ch, k, k], fan_in, rng)),
                    bias: shared(Tensor::zeros(&[width])),
                });
                in_ch = width;
            }
            layers
        };

        let nm_convs = make_branch(arch.nm_width(), rng);
        let nm_gate = FcLayer {
            weight: shared(kaiming_uniform(&[latent_dim, nm_flat], nm_flat, rng)),
            bias: shared(Tensor::zeros(&[latent_dim])),
        };
        let pred_convs = make_branch(arch.pred_width(), rng);
        let classifier = FcLayer {
            weight: shared(kaiming_uniform(&[arch.num_classes_max, latent_dim], latent_dim, rng)),
            bias: shared(Tensor::zeros(&[arch.num_classes_max])),
        };

        let mut nm_group = ParamGroup::new("nm", Role::SlowWeights);
        for l in &nm_convs {
            nm_group.push(l.weight.clone());
            nm_group.push(l.bias.clone());
        }
        nm_group.push(nm_gate.weight.clone());
        nm_group.push(nm_gate.bias.clone());

        let mut pred_group = ParamGroup::new("pred", Role::SlowWeights);
        for l in &pred_convs {
            pred_group.push(l.weight.clone());
            pred_group.push(l.bias.clone());
        }

        let mut classifier_group = ParamGroup::new("classifier", Role::FastWeights);
        classifier_group.push(classifier.weight.clone());
        classifier_group.push(classifier.bias.clone());

        Ok(Self {
            arch,
            nm_convs,
            nm_gate,
            pred_convs,
            classifier,
            nm_group,
            pred_group,
            classifier_group,
            quantized: None,
        })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn nm_weights(&self) -> &ParamGroup {
        &self.nm_group
    }

    pub fn pred_weights(&self) -> &ParamGroup {
        &self.pred_group
    }

    pub fn classifier_weights(&self) -> &ParamGroup {
        &self.classifier_group
    }

    pub fn classifier_layer(&self) -> &FcLayer {
        &self.classifier
    }

    pub fn nm_conv_layers(&self) -> &[ConvLayer] {
        &self.nm_convs
    }

    pub fn nm_gate_layer(&self) -> &FcLayer {
        &self.nm_gate
    }

    pub fn pred_conv_layers(&self) -> &[ConvLayer] {
        &self.pred_convs
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized.is_some()
    }

    pub fn quantized_extractor(&self) -> Option<&QuantizedExtractor> {
        self.quantized.as_ref()
    }

    pub(crate) fn attach_quantized(&mut self, q: QuantizedExtractor) {
        self.quantized = Some(q);
    }

    /// Mark both extractor groups frozen; only the classifier may train.
    pub fn freeze_extractor(&mut self) {
        self.nm_group.set_role(Role::Frozen);
        self.pred_group.set_role(Role::Frozen);
    }

    pub fn extractor_frozen(&self) -> bool {
        self.nm_group.role() == Role::Frozen && self.pred_group.role() == Role::Frozen
    }

    fn check_batch_shape(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        let want = &self.arch.input_shape;
        if s.len() != 4 || s[1] != want[0] || s[2] != want[1] || s[3] != want[2] {
            return Err(Error::Shape {
                op: "extract_latent",
                detail: format!("batch shape {:?}, expected [N, {}, {}, {}]", s, want[0], want[1], want[2]),
            });
        }
        Ok(())
    }

    fn conv_stack(
        &self,
        tape: &mut Tape,
        mut x: NodeId,
        layers: &[ConvLayer],
        trainable: bool,
    ) -> Result<NodeId> {
        for layer in layers {
            let w = tape.param(&layer.weight, trainable);
            let b = tape.param(&layer.bias, trainable);
            x = tape.conv2d(x, w, b, self.arch.stride)?;
            x = tape.relu(x);
        }
        Ok(x)
    }

    /// Record the gated latent computation on `tape`. With
    /// `train_extractor = false` the branch weights are bound frozen and the
    /// backward pass stops at the latent.
    pub fn forward_latent(&self, tape: &mut Tape, input: NodeId, train_extractor: bool) -> Result<NodeId> {
        let trainable = train_extractor && !self.extractor_frozen();
        let nm_out = self.conv_stack(tape, input, &self.nm_convs, trainable)?;
        let nm_flat = tape.flatten(nm_out)?;
        let gw = tape.param(&self.nm_gate.weight, trainable);
        let gb = tape.param(&self.nm_gate.bias, trainable);
        let gate = tape.fc(nm_flat, gw, gb)?;
        let gate = tape.relu(gate);

        let pred_out = self.conv_stack(tape, input, &self.pred_convs, trainable)?;
        let pred_flat = tape.flatten(pred_out)?;

        tape.mul(gate, pred_flat)
    }

    /// Record the classifier on `tape`: `[N, latent_dim] -> [N, classes]`.
    pub fn forward_logits(&self, tape: &mut Tape, latent: NodeId, train_classifier: bool) -> Result<NodeId> {
        let w = tape.param(&self.classifier.weight, train_classifier);
        let b = tape.param(&self.classifier.bias, train_classifier);
        tape.fc(latent, w, b)
    }

    /// Pure f32 latent extraction: `[N, C, H, W] -> [N, latent_dim]`,
    /// elementwise >= 0.
    pub fn extract_latent(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch_shape(batch)?;
        let mut tape = Tape::new();
        let x = tape.input(batch);
        let latent = self.forward_latent(&mut tape, x, false)?;
        Ok(tape.value(latent))
    }

    /// Deployment entry point: int8 path when the extractor is quantized,
    /// f32 otherwise.
    pub fn latent(&self, batch: &Tensor) -> Result<Tensor> {
        if self.quantized.is_some() {
            self.infer_quantized_latent(batch)
        } else {
            self.extract_latent(batch)
        }
    }

    /// Classifier logits for a latent batch.
    pub fn classify(&self, latent: &Tensor) -> Result<Tensor> {
        let s = latent.shape();
        let want = self.arch.latent_dim()?;
        if s.len() != 2 || s[1] != want {
            return Err(Error::Shape {
                op: "classify",
                detail: format!("latent shape {:?}, expected [N, {}]", s, want),
            });
        }
        let mut tape = Tape::new();
        let x = tape.input(latent);
        let logits = self.forward_logits(&mut tape, x, false)?;
        Ok(tape.value(logits))
    }

    /// Forward pass through the f32 extractor keeping every post-ReLU
    /// activation.
    pub fn extractor_trace(&self, batch: &Tensor) -> Result<ExtractorTrace> {
        self.check_batch_shape(batch)?;
        let mut tape = Tape::new();
        let x = tape.input(batch);

        let mut nm_conv_outs = Vec::with_capacity(self.nm_convs.len());
        let mut cur = x;
        for layer in &self.nm_convs {
            let w = tape.param(&layer.weight, false);
            let b = tape.param(&layer.bias, false);
            cur = tape.conv2d(cur, w, b, self.arch.stride)?;
            cur = tape.relu(cur);
            nm_conv_outs.push(tape.value(cur));
        }
        let nm_flat = tape.flatten(cur)?;
        let gw = tape.param(&self.nm_gate.weight, false);
        let gb = tape.param(&self.nm_gate.bias, false);
        let gate = tape.fc(nm_flat, gw, gb)?;
        let gate = tape.relu(gate);

        let mut pred_conv_outs = Vec::with_capacity(self.pred_convs.len());
        cur = x;
        for layer in &self.pred_convs {
            let w = tape.param(&layer.weight, false);
            let b = tape.param(&layer.bias, false);
            cur = tape.conv2d(cur, w, b, self.arch.stride)?;
            cur = tape.relu(cur);
            pred_conv_outs.push(tape.value(cur));
        }
        let pred_flat = tape.flatten(cur)?;
        let latent = tape.mul(gate, pred_flat)?;

        Ok(ExtractorTrace {
            nm_conv_outs,
            nm_gate: tape.value(gate),
            pred_conv_outs,
            pred_flat: tape.value(pred_flat),
            latent: tape.value(latent),
        })
    }

    /// Re-initialize one classifier row (fresh fast weights for a class that
    /// is about to be learned).
    pub fn reinit_classifier_row(&self, class_id: u32, rng: &mut ChaCha8Rng) -> Result<()> {
        let latent_dim = self.arch.latent_dim()?;
        let row = class_id as usize;
        if row >= self.arch.num_classes_max {
            return Err(Error::Validation(format!(
                "class {} outside classifier capacity {}",
                class_id, self.arch.num_classes_max
            )));
        }
        let fresh = kaiming_uniform(&[latent_dim], latent_dim, rng);
        {
            let mut w = self.classifier.weight.borrow_mut();
            w.data_mut()[row * latent_dim..(row + 1) * latent_dim].copy_from_slice(fresh.data());
        }
        self.classifier.bias.borrow_mut().data_mut()[row] = 0.0;
        Ok(())
    }

    /// Iterate `(name, tensor)` over all f32 weights in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, SharedTensor)> {
        let mut out = Vec::new();
        for (i, l) in self.nm_convs.iter().enumerate() {
            out.push((format!("nm.conv{i}.weight"), l.weight.clone()));
            out.push((format!("nm.conv{i}.bias"), l.bias.clone()));
        }
        out.push(("nm.gate.weight".to_string(), self.nm_gate.weight.clone()));
        out.push(("nm.gate.bias".to_string(), self.nm_gate.bias.clone()));
        for (i, l) in self.pred_convs.iter().enumerate() {
            out.push((format!("pred.conv{i}.weight"), l.weight.clone()));
            out.push((format!("pred.conv{i}.bias"), l.bias.clone()));
        }
        out.push(("classifier.weight".to_string(), self.classifier.weight.clone()));
        out.push(("classifier.bias".to_string(), self.classifier.bias.clone()));
        out
    }

    /// FNV-1a over the extractor's stored bytes (f32 weights and, when
    /// present, the int8 copy). Changing any frozen weight changes this.
    pub fn extractor_checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, tensor) in self.named_tensors() {
            if name.starts_with("classifier") {
                continue;
            }
            for v in tensor.borrow().data() {
                eat(&v.to_le_bytes());
            }
        }
        if let Some(q) = &self.quantized {
            q.hash_into(&mut eat);
        }
        hash
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn toy_arch() -> ArchitectureConfig {
        ArchitectureConfig::desk_default([1, 16, 16], 10)
    }

    fn rand_batch(arch: &ArchitectureConfig, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let numel = n * arch.input_shape.iter().product::<usize>();
        Tensor::new(
            vec![n, arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]],
            (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn latent_dim_matches_geometry() {
        let arch = toy_arch();
        // 16 -> 7 -> 3 -> 1 spatial, 256 * 0.25 = 64 channels
        assert_eq!(arch.conv_output_hw().unwrap(), (1, 1));
        assert_eq!(arch.pred_width(), 64);
        assert_eq!(arch.nm_width(), 28);
        assert_eq!(arch.latent_dim().unwrap(), 64);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_latent() {
        let mut rng = stream(2, "model");
        let model = ModelState::init(toy_arch(), &mut rng).unwrap();
        let batch = Tensor::zeros(&[2, 1, 16, 16]);
        let latent = model.extract_latent(&batch).unwrap();
        assert!(latent.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_gate_passes_prediction_branch_through() {
        let mut rng = stream(3, "model");
        let model = ModelState::init(toy_arch(), &mut rng).unwrap();
        {
            let mut w = model.nm_gate_layer().weight.borrow_mut();
            w.data_mut().fill(0.0);
        }
        {
            let mut b = model.nm_gate_layer().bias.borrow_mut();
            b.data_mut().fill(1.0);
        }
        let batch = rand_batch(model.arch(), 3, &mut rng);
        let trace = model.extractor_trace(&batch).unwrap();
        assert_eq!(trace.latent.data(), trace.pred_flat.data());
    }

    #[test]
    fn latent_is_gate_times_prediction() {
        let mut rng = stream(4, "model");
        let model = ModelState::init(toy_arch(), &mut rng).unwrap();
        let batch = rand_batch(model.arch(), 2, &mut rng);
        let trace = model.extractor_trace(&batch).unwrap();
        let latent = model.extract_latent(&batch).unwrap();
        for ((l, g), p) in latent.data().iter().zip(trace.nm_gate.data()).zip(trace.pred_flat.data()) {
            assert!((l - g * p).abs() < 1e-6);
        }
    }

    #[test]
    fn latent_is_non_negative() {
        let mut rng = stream(5, "model");
        let model = ModelState::init(toy_arch(), &mut rng).unwrap();
        let batch = rand_batch(model.arch(), 4, &mut rng);
        let latent = model.extract_latent(&batch).unwrap();
        assert!(latent.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn frozen_extraction_is_bit_pure() {
        let mut rng = stream(6, "model");
        let mut model = ModelState::init(toy_arch(), &mut rng).unwrap();
        model.freeze_extractor();
        let batch = rand_batch(model.arch(), 2, &mut rng);
        let a = model.extract_latent(&batch).unwrap();
        let b = model.extract_latent(&batch).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn classify_zero_latent_zero_bias_gives_zero_logits() {
        let mut rng = stream(7, "model");
        let model = ModelState::init(toy_arch(), &mut rng).unwrap();
        let latent = Tensor::zeros(&[2, model.arch().latent_dim().unwrap()]);
        let logits = model.classify(&latent).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(logits.shape(), &[2, 10]);
    }

    #[test]
    fn one_hot_latent_selects_weight_column() {
        let mut rng = stream(8, "model");
        let model = ModelState::init(toy_arch(), &mut rng).unwrap();
        let d = model.arch().latent_dim().unwrap();
        let mut latent = Tensor::zeros(&[1, d]);
        latent.data_mut()[5] = 1.0;
        let logits = model.classify(&latent).unwrap();
        let w = model.classifier_layer().weight.borrow();
        for (c, &logit) in logits.data().iter().enumerate() {
            let want = w.data()[c * d + 5]; // bias is zero at init
            assert!((logit - want).abs() < 1e-7);
        }
    }

    #[test]
    fn classify_matches_direct_matmul() {
        let mut rng = stream(9, "model");
        let model = ModelState::init(toy_arch(), &mut rng).unwrap();
        let d = model.arch().latent_dim().unwrap();
        let latent =
            Tensor::new(vec![3, d], (0..3 * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let logits = model.classify(&latent).unwrap();
        let w = model.classifier_layer().weight.borrow();
        let b = model.classifier_layer().bias.borrow();
        for n in 0..3 {
            for c in 0..10 {
                let mut acc = f64::from(b.data()[c]);
                for i in 0..d {
                    acc += f64::from(latent.data()[n * d + i]) * f64::from(w.data()[c * d + i]);
                }
                let got = f64::from(logits.data()[n * 10 + c]);
                assert!((got - acc).abs() < 1e-4, "{got} vs {acc}");
            }
        }
    }

    #[test]
    fn batch_shape_mismatch_rejected() {
        let mut rng = stream(10, "model");
        let model = ModelState::init(toy_arch(), &mut rng).unwrap();
        let bad = Tensor::zeros(&[2, 1, 8, 8]);
        assert!(model.extract_latent(&bad).is_err());
        let bad_latent = Tensor::zeros(&[2, 3]);
        assert!(model.classify(&bad_latent).is_err());
    }

    #[test]
    fn reinit_row_touches_only_that_row() {
        let mut rng = stream(11, "model");
        let model = ModelState::init(toy_arch(), &mut rng).unwrap();
        let d = model.arch().latent_dim().unwrap();
        let before = model.classifier_layer().weight.borrow().data().to_vec();
        model.reinit_classifier_row(4, &mut rng).unwrap();
        let after = model.classifier_layer().weight.borrow().data().to_vec();
        for (i, (b, a)) in before.iter().zip(&after).enumerate() {
            let row = i / d;
            if row == 4 {
                continue;
            }
            assert_eq!(b.to_bits(), a.to_bits(), "row {row} changed");
        }
        assert!(before[4 * d..5 * d] != after[4 * d..5 * d]);
    }

    #[test]
    fn extractor_checksum_ignores_classifier() {
        let mut rng = stream(12, "model");
        let model = ModelState::init(toy_arch(), &mut rng).unwrap();
        let sum = model.extractor_checksum();
        model.classifier_layer().weight.borrow_mut().data_mut()[0] = 42.0;
        assert_eq!(sum, model.extractor_checksum());
        model.nm_gate_layer().bias.borrow_mut().data_mut()[0] = 42.0;
        assert_ne!(sum, model.extractor_checksum());
    }
}
