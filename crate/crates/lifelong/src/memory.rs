//! Byte-exact footprint accounting: model, optimizer, activations, buffer.

use std::fmt;

use crate::model::ModelState;
use crate::replay::ReplayBuffer;
use crate::tensor::{Role, Tape, Tensor};
use crate::Result;

/// Extra bytes stored per quantized tensor beyond its i8 payload: the f64
/// scale and i32 zero-point.
pub const QTENSOR_OVERHEAD_BYTES: usize = 12;

/// Deployment-time footprint breakdown, all in bytes.
///
/// * `extractor_bytes` — branch weights as stored: 4 per f32 value, or
///   1 per value plus [`QTENSOR_OVERHEAD_BYTES`] per tensor when quantized.
/// * `classifier_bytes` — always f32 (4 per value).
/// * `optimizer_bytes` — two f32 Adam moments per trainable (non-frozen)
///   parameter: `2 * 4 * count`.
/// * `activation_bytes` — recorded tape footprint of one classifier
///   training step at the configured batch size (the extractor is frozen at
///   deployment and keeps no activations).
/// * `buffer_bytes` — serialized size of the rehearsal buffer.
/// * `raw_rehearsal_bytes` — counterfactual dense cost of the same buffer:
///   4 bytes per latent element.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub extractor_bytes: usize,
    pub classifier_bytes: usize,
    pub optimizer_bytes: usize,
    pub activation_bytes: usize,
    pub buffer_bytes: usize,
    pub raw_rehearsal_bytes: usize,
    pub batch_size: usize,
}

impl MemoryReport {
    pub fn total_bytes(&self) -> usize {
        self.extractor_bytes
            + self.classifier_bytes
            + self.optimizer_bytes
            + self.activation_bytes
            + self.buffer_bytes
    }

    /// Buffer compression vs storing the same latents densely.
    pub fn compression_ratio(&self) -> f64 {
        if self.buffer_bytes == 0 {
            return 1.0;
        }
        self.raw_rehearsal_bytes as f64 / self.buffer_bytes as f64
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("extractor_bytes".into(), self.extractor_bytes.to_string()),
            ("classifier_bytes".into(), self.classifier_bytes.to_string()),
            ("optimizer_bytes".into(), self.optimizer_bytes.to_string()),
            ("activation_bytes".into(), self.activation_bytes.to_string()),
            ("buffer_bytes".into(), self.buffer_bytes.to_string()),
            ("raw_rehearsal_bytes".into(), self.raw_rehearsal_bytes.to_string()),
            ("total_bytes".into(), self.total_bytes().to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("compression_ratio".into(), format!("{:.4}", self.compression_ratio())),
        ]
    }
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_key_values() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Compute the footprint of a model plus (optionally) its rehearsal buffer
/// for training at `batch_size`.
pub fn memory_report(
    model: &ModelState,
    buffer: Option<&ReplayBuffer>,
    batch_size: usize,
) -> Result<MemoryReport> {
    let extractor_param_count: usize =
        model.nm_weights().param_count() + model.pred_weights().param_count();
    let extractor_bytes = if let Some(q) = model.quantized_extractor() {
        let mut tensors = 0usize;
        let mut values = 0usize;
        for layer in q.nm_convs.iter().chain(&q.pred_convs) {
            tensors += 1;
            values += layer.weight.data().len();
            values += layer.bias.len() * 4; // biases stay f32
        }
        tensors += 1;
        values += q.nm_gate.weight.data().len();
        values += q.nm_gate.bias.len() * 4;
        values + tensors * QTENSOR_OVERHEAD_BYTES
    } else {
        4 * extractor_param_count
    };

    let classifier_bytes = 4 * model.classifier_weights().param_count();

    let mut trainable = 0usize;
    for group in [model.nm_weights(), model.pred_weights(), model.classifier_weights()] {
        if group.role() != Role::Frozen {
            trainable += group.param_count();
        }
    }
    let optimizer_bytes = 2 * 4 * trainable;

    // Activation footprint of one classifier training step, measured off a
    // real recorded tape rather than re-derived arithmetic.
    let latent_dim = model.arch().latent_dim()?;
    let activation_bytes = {
        let mut tape = Tape::new();
        let latent = tape.input(&Tensor::zeros(&[batch_size.max(1), latent_dim]));
        let logits = model.forward_logits(&mut tape, latent, false)?;
        let labels = vec![0usize; batch_size.max(1)];
        let _loss = tape.softmax_cross_entropy(logits, &labels)?;
        tape.activation_bytes()
    };

    let (buffer_bytes, raw_rehearsal_bytes) = match buffer {
        Some(b) => {
            let raw: usize = b.samples().map(|s| 4 * s.latent_len()).sum();
            (b.byte_size(), raw)
        }
        None => (0, 0),
    };

    Ok(MemoryReport {
        extractor_bytes,
        classifier_bytes,
        optimizer_bytes,
        activation_bytes,
        buffer_bytes,
        raw_rehearsal_bytes,
        batch_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureConfig;
    use crate::replay::{ReplayBuffer, StoredSample};
    use crate::rng::stream;

    fn toy_model() -> ModelState {
        let mut rng = stream(1, "memory");
        ModelState::init(ArchitectureConfig::desk_default([1, 16, 16], 10), &mut rng).unwrap()
    }

    #[test]
    fn optimizer_bytes_are_eight_per_trainable_param() {
        let mut model = toy_model();
        let all = model.nm_weights().param_count()
            + model.pred_weights().param_count()
            + model.classifier_weights().param_count();
        let report = memory_report(&model, None, 8).unwrap();
        assert_eq!(report.optimizer_bytes, 8 * all);

        model.freeze_extractor();
        let report = memory_report(&model, None, 8).unwrap();
        assert_eq!(report.optimizer_bytes, 8 * model.classifier_weights().param_count());
    }

    #[test]
    fn empty_buffer_contributes_nothing() {
        let model = toy_model();
        let buffer = ReplayBuffer::new(8);
        let report = memory_report(&model, Some(&buffer), 8).unwrap();
        assert_eq!(report.buffer_bytes, 0);
        assert_eq!(report.raw_rehearsal_bytes, 0);
        assert_eq!(report.compression_ratio(), 1.0);
    }

    #[test]
    fn f32_param_bytes_match_hand_count() {
        let model = toy_model();
        let report = memory_report(&model, None, 8).unwrap();
        // nm branch: convs 28*1*3*3 + 28 + 2 * (28*28*3*3 + 28), gate fc 64*28 + 64
        let nm = (28 * 9 + 28) + 2 * (28 * 28 * 9 + 28) + (64 * 28 + 64);
        // pred branch: 64*1*3*3 + 64 + 2 * (64*64*3*3 + 64)
        let pred = (64 * 9 + 64) + 2 * (64 * 64 * 9 + 64);
        assert_eq!(report.extractor_bytes, 4 * (nm + pred));
        assert_eq!(report.classifier_bytes, 4 * (10 * 64 + 10));
    }

    #[test]
    fn activation_bytes_match_tape_contents() {
        let model = toy_model();
        let report = memory_report(&model, None, 8).unwrap();
        // latent [8,64] + bound classifier weight/bias + logits [8,10]
        // + loss scalar + cached softmax [8,10]
        let d = 64;
        let expected = 4 * (8 * d + (10 * d + 10) + 8 * 10 + 1 + 8 * 10);
        assert_eq!(report.activation_bytes, expected);
    }

    #[test]
    fn buffer_bytes_flow_through() {
        let model = toy_model();
        let mut buffer = ReplayBuffer::new(4);
        buffer.store(StoredSample::raw(0, vec![1.0; 64])).unwrap();
        let report = memory_report(&model, Some(&buffer), 8).unwrap();
        assert_eq!(report.buffer_bytes, 8 + 4 * 64);
        assert_eq!(report.raw_rehearsal_bytes, 4 * 64);
    }
}
