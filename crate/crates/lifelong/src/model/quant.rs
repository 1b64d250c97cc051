//! Post-training int8 quantization of the frozen extractor.
//!
//! Per-tensor asymmetric (scale + zero-point) quantization over observed
//! min/max, with activation ranges calibrated from a forward pass over
//! calibration batches. Inference accumulates in i32 with one requantization
//! per layer; the classifier stays f32.

use super::ModelState;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Affine quantization parameters mapping f32 to i8:
/// `q = round(x / scale) + zero_point`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QParams {
    /// Derive parameters from an observed value range.
    ///
    /// Degenerate ranges (min == max == c) use `scale = max(|c|, 1) / 127`
    /// with a zero zero-point. Otherwise the range is extended to include
    /// zero so that 0.0 is exactly representable, and an asymmetric scale
    /// spans it over the full 256-step grid.
    pub fn from_range(min: f32, max: f32) -> Self {
        debug_assert!(min <= max);
        let (min, max) = (f64::from(min), f64::from(max));
        if min == max {
            let c = min.abs().max(1.0);
            return Self { scale: c / 127.0, zero_point: 0 };
        }
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = (hi - lo) / 255.0;
        let zp = (-128.0 - lo / scale).round();
        Self { scale, zero_point: zp.clamp(-128.0, 127.0) as i32 }
    }

    pub fn quantize_value(&self, x: f32) -> i8 {
        let q = (f64::from(x) / self.scale).round() + f64::from(self.zero_point);
        q.clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize_value(&self, q: i8) -> f32 {
        self.dequantize_f64(q) as f32
    }

    /// Exact affine inverse. The quantizer guarantees
    /// `|x - dequantize_f64(quantize_value(x))| <= scale / 2` for every
    /// element inside the calibrated range; the f32 cast in
    /// [`QParams::dequantize_value`] may add at most half an ULP on top.
    pub fn dequantize_f64(&self, q: i8) -> f64 {
        (f64::from(q) - f64::from(self.zero_point)) * self.scale
    }
}

/// An i8 tensor with its affine mapping back to f32.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    params: QParams,
}

impl QuantizedTensor {
    /// Per-tensor min/max quantization.
    pub fn quantize(t: &Tensor) -> Self {
        let (mut min, mut max) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in t.data() {
            min = min.min(v);
            max = max.max(v);
        }
        if t.data().is_empty() {
            min = 0.0;
            max = 0.0;
        }
        let params = QParams::from_range(min, max);
        let data = t.data().iter().map(|&v| params.quantize_value(v)).collect();
        Self { shape: t.shape().to_vec(), data, params }
    }

    pub fn from_parts(shape: Vec<usize>, data: Vec<i8>, scale: f64, zero_point: i32) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Corruption(format!(
                "quantized tensor shape {:?} does not match {} values",
                shape,
                data.len()
            )));
        }
        Ok(Self { shape, data, params: QParams { scale, zero_point } })
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self.data.iter().map(|&q| self.params.dequantize_value(q)).collect();
        Tensor::new(self.shape.clone(), data).expect("shape/data consistent")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn params(&self) -> QParams {
        self.params
    }

    pub fn scale(&self) -> f64 {
        self.params.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.params.zero_point
    }
}

#[derive(Debug, Clone)]
pub struct QConvLayer {
    pub weight: QuantizedTensor,
    /// Bias stays f32 and is folded into the i32 accumulator at inference.
    pub bias: Vec<f32>,
    /// Post-ReLU activation parameters of this layer's output.
    pub out: QParams,
}

#[derive(Debug, Clone)]
pub struct QFcLayer {
    pub weight: QuantizedTensor,
    pub bias: Vec<f32>,
    pub out: QParams,
}

/// Int8 copy of both branches plus the calibrated activation grid.
#[derive(Debug, Clone)]
pub struct QuantizedExtractor {
    pub input: QParams,
    pub nm_convs: Vec<QConvLayer>,
    pub nm_gate: QFcLayer,
    pub pred_convs: Vec<QConvLayer>,
}

impl QuantizedExtractor {
    pub(crate) fn hash_into(&self, eat: &mut impl FnMut(&[u8])) {
        let eat_params = |p: &QParams, eat: &mut dyn FnMut(&[u8])| {
            eat(&p.scale.to_le_bytes());
            eat(&p.zero_point.to_le_bytes());
        };
        eat_params(&self.input, eat);
        for layer in self.nm_convs.iter().chain(&self.pred_convs) {
            eat(&layer.weight.data.iter().map(|&v| v as u8).collect::<Vec<_>>());
            eat_params(&layer.weight.params, eat);
            eat_params(&layer.out, eat);
        }
        eat(&self.nm_gate.weight.data.iter().map(|&v| v as u8).collect::<Vec<_>>());
        eat_params(&self.nm_gate.weight.params, eat);
        eat_params(&self.nm_gate.out, eat);
    }
}

/// Running min/max per calibration site.
#[derive(Clone, Copy)]
struct Range {
    min: f32,
    max: f32,
}

impl Range {
    fn new() -> Self {
        Self { min: f32::INFINITY, max: f32::NEG_INFINITY }
    }

    fn observe(&mut self, values: &[f32]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    fn params(&self) -> QParams {
        if self.min > self.max {
            // site never observed; treat as constant zero
            return QParams::from_range(0.0, 0.0);
        }
        QParams::from_range(self.min, self.max)
    }
}

impl ModelState {
    /// Quantize the (frozen) extractor to int8 using `calibration` batches
    /// to fix activation ranges. Consumes the model and returns a new state
    /// with the int8 copy attached and the extractor groups frozen; the
    /// classifier is untouched.
    pub fn quantize_extractor(mut self, calibration: &[Tensor]) -> Result<ModelState> {
        if self.is_quantized() {
            return Err(Error::State("extractor is already quantized".into()));
        }
        if calibration.is_empty() {
            return Err(Error::Validation("quantization needs at least one calibration batch".into()));
        }

        let layers = self.arch().num_conv_layers;
        let mut input_range = Range::new();
        let mut nm_ranges = vec![Range::new(); layers];
        let mut gate_range = Range::new();
        let mut pred_ranges = vec![Range::new(); layers];

        for batch in calibration {
            let trace = self.extractor_trace(batch)?;
            input_range.observe(batch.data());
            for (range, out) in nm_ranges.iter_mut().zip(&trace.nm_conv_outs) {
                range.observe(out.data());
            }
            gate_range.observe(trace.nm_gate.data());
            for (range, out) in pred_ranges.iter_mut().zip(&trace.pred_conv_outs) {
                range.observe(out.data());
            }
        }

        let quantize_conv = |layer: &super::ConvLayer, out: QParams| QConvLayer {
            weight: QuantizedTensor::quantize(&layer.weight.borrow()),
            bias: layer.bias.borrow().data().to_vec(),
            out,
        };

        let nm_convs = self
            .nm_conv_layers()
            .iter()
            .zip(&nm_ranges)
            .map(|(l, r)| quantize_conv(l, r.params()))
            .collect();
        let pred_convs = self
            .pred_conv_layers()
            .iter()
            .zip(&pred_ranges)
            .map(|(l, r)| quantize_conv(l, r.params()))
            .collect();
        let nm_gate = QFcLayer {
            weight: QuantizedTensor::quantize(&self.nm_gate_layer().weight.borrow()),
            bias: self.nm_gate_layer().bias.borrow().data().to_vec(),
            out: gate_range.params(),
        };

        self.freeze_extractor();
        self.attach_quantized(QuantizedExtractor {
            input: input_range.params(),
            nm_convs,
            nm_gate,
            pred_convs,
        });
        Ok(self)
    }

    /// Integer-arithmetic latent extraction. Both branches run in i8/i32
    /// with requantization between layers; the two branch outputs are
    /// dequantized and multiplied in f32 to form the latent.
    pub fn infer_quantized_latent(&self, batch: &Tensor) -> Result<Tensor> {
        let q = self
            .quantized_extractor()
            .ok_or_else(|| Error::State("integer inference on an unquantized model".into()))?;
        self.check_batch_shape(batch)?;

        let s = batch.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let input_q: Vec<i8> = batch.data().iter().map(|&v| q.input.quantize_value(v)).collect();

        let run_branch = |convs: &[QConvLayer]| -> (Vec<i8>, usize, usize, usize, QParams) {
            let mut data = input_q.clone();
            let mut dims = (c, h, w);
            let mut params = q.input;
            for layer in convs {
                let (out, odims) = conv2d_i8(&data, n, dims, params, layer, self.arch().stride);
                data = out;
                dims = odims;
                params = layer.out;
            }
            (data, dims.0, dims.1, dims.2, params)
        };

        let (pred_q, pc, ph, pw, pred_params) = run_branch(&q.pred_convs);
        let (nm_q, nc, nh, nw, nm_params) = run_branch(&q.nm_convs);

        // NM head: flatten + int8 fully-connected + ReLU.
        let nm_flat_dim = nc * nh * nw;
        let gate_q = fc_i8(&nm_q, n, nm_flat_dim, nm_params, &q.nm_gate);

        let latent_dim = self.arch().latent_dim()?;
        debug_assert_eq!(pc * ph * pw, latent_dim);
        let mut latent = vec![0.0f32; n * latent_dim];
        for (i, slot) in latent.iter_mut().enumerate() {
            let gate = q.nm_gate.out.dequantize_value(gate_q[i]);
            let pred = pred_params.dequantize_value(pred_q[i]);
            *slot = gate * pred;
        }
        Tensor::new(vec![n, latent_dim], latent)
    }
}

/// i8 valid cross-correlation with i32 accumulation, requantized to the
/// layer's post-ReLU output grid.
fn conv2d_i8(
    input: &[i8],
    n: usize,
    (c, h, w): (usize, usize, usize),
    in_params: QParams,
    layer: &QConvLayer,
    stride: usize,
) -> (Vec<i8>, (usize, usize, usize)) {
    let wshape = layer.weight.shape();
    let (k, kh, kw) = (wshape[0], wshape[2], wshape[3]);
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;

    let zp_x = in_params.zero_point;
    let zp_w = layer.weight.zero_point();
    let acc_scale = in_params.scale * layer.weight.scale();
    let requant = acc_scale / layer.out.scale;
    let zp_y = layer.out.zero_point;
    let wq = layer.weight.data();

    let mut out = vec![0i8; n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            let bias_acc = (f64::from(layer.bias[ki]) / acc_scale).round() as i64;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc: i64 = bias_acc;
                    for ci in 0..c {
                        let xbase = ((ni * c + ci) * h + oy * stride) * w + ox * stride;
                        let wbase = ((ki * c + ci) * kh) * kw;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let xv = i64::from(input[xbase + dy * w + dx]) - i64::from(zp_x);
                                let wv = i64::from(wq[wbase + dy * kw + dx]) - i64::from(zp_w);
                                acc += xv * wv;
                            }
                        }
                    }
                    let y = (acc as f64 * requant).round() + f64::from(zp_y);
                    let y = y.clamp(-128.0, 127.0) as i8;
                    // ReLU on the quantized grid: zero sits at the zero-point.
                    out[((ni * k + ki) * oh + oy) * ow + ox] = y.max(zp_y as i8);
                }
            }
        }
    }
    (out, (k, oh, ow))
}

/// i8 fully-connected + ReLU on the output grid.
fn fc_i8(input: &[i8], n: usize, d: usize, in_params: QParams, layer: &QFcLayer) -> Vec<i8> {
    let o = layer.weight.shape()[0];
    let zp_x = in_params.zero_point;
    let zp_w = layer.weight.zero_point();
    let acc_scale = in_params.scale * layer.weight.scale();
    let requant = acc_scale / layer.out.scale;
    let zp_y = layer.out.zero_point;
    let wq = layer.weight.data();

    let mut out = vec![0i8; n * o];
    for ni in 0..n {
        for oi in 0..o {
            let mut acc: i64 = (f64::from(layer.bias[oi]) / acc_scale).round() as i64;
            for di in 0..d {
                let xv = i64::from(input[ni * d + di]) - i64::from(zp_x);
                let wv = i64::from(wq[oi * d + di]) - i64::from(zp_w);
                acc += xv * wv;
            }
            let y = (acc as f64 * requant).round() + f64::from(zp_y);
            out[ni * o + oi] = (y.clamp(-128.0, 127.0) as i8).max(zp_y as i8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureConfig;
    use crate::rng::stream;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(seed: u64) -> ModelState {
        let mut rng = stream(seed, "quant-model");
        ModelState::init(ArchitectureConfig::desk_default([1, 16, 16], 10), &mut rng).unwrap()
    }

    fn rand_batch(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            vec![n, 1, 16, 16],
            (0..n * 256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Worst-case |x - deq(q(x))| over a tensor, in the affine (f64) domain.
    fn max_roundtrip_error(t: &Tensor, q: &QuantizedTensor) -> f64 {
        t.data()
            .iter()
            .zip(q.data())
            .map(|(&x, &qv)| (f64::from(x) - q.params().dequantize_f64(qv)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_tensor_uses_degenerate_rule() {
        let t = Tensor::filled(&[4], 5.0);
        let q = QuantizedTensor::quantize(&t);
        assert!((q.scale() - 5.0 / 127.0).abs() < 1e-12);
        assert_eq!(q.zero_point(), 0);
        assert!(max_roundtrip_error(&t, &q) <= q.scale() / 2.0 * (1.0 + 1e-9));
        // small constants clamp the scale at 1/127
        let tiny = QuantizedTensor::quantize(&Tensor::filled(&[2], 0.001));
        assert!((tiny.scale() - 1.0 / 127.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_grid_roundtrips_within_half_step() {
        let t = Tensor::from_vec(vec![-1.0, 0.0, 1.0, 0.0, -1.0, 1.0]);
        let q = QuantizedTensor::quantize(&t);
        assert!((q.scale() - 2.0 / 255.0).abs() < 1e-12);
        assert!(max_roundtrip_error(&t, &q) <= q.scale() / 2.0 * (1.0 + 1e-9));
        // zero must be exact
        let z = q.params().quantize_value(0.0);
        assert_eq!(q.params().dequantize_value(z), 0.0);
    }

    #[test]
    fn quantize_bound_holds_on_random_tensors() {
        let mut rng = stream(40, "quant");
        for _ in 0..200 {
            let n = rng.gen_range(1..64);
            let lo = rng.gen_range(-10.0f32..5.0);
            let hi = lo + rng.gen_range(0.0f32..20.0);
            let t = Tensor::from_vec((0..n).map(|_| rng.gen_range(lo..=hi)).collect());
            let q = QuantizedTensor::quantize(&t);
            let err = max_roundtrip_error(&t, &q);
            assert!(err <= q.scale() / 2.0 * (1.0 + 1e-9), "error {err} > {}/2", q.scale());
        }
    }

    #[test]
    fn empty_calibration_rejected() {
        let model = toy_model(1);
        assert!(matches!(model.quantize_extractor(&[]).unwrap_err(), Error::Validation(_)));
    }

    #[test]
    fn double_quantization_rejected() {
        let mut rng = stream(2, "quant");
        let model = toy_model(2);
        let calib = [rand_batch(4, &mut rng)];
        let model = model.quantize_extractor(&calib).unwrap();
        assert!(matches!(model.quantize_extractor(&calib).unwrap_err(), Error::State(_)));
    }

    #[test]
    fn quantized_inference_requires_quantized_model() {
        let model = toy_model(3);
        let batch = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(matches!(model.infer_quantized_latent(&batch).unwrap_err(), Error::State(_)));
    }

    #[test]
    fn zero_input_gives_zero_latent_via_zero_points() {
        let mut rng = stream(4, "quant");
        let model = toy_model(4);
        let calib = [rand_batch(8, &mut rng)];
        let model = model.quantize_extractor(&calib).unwrap();
        let latent = model.infer_quantized_latent(&Tensor::zeros(&[2, 1, 16, 16])).unwrap();
        assert!(latent.data().iter().all(|&v| v == 0.0), "zero_point mismatch");
    }

    #[test]
    fn quantized_latent_close_to_f32_latent() {
        let mut rng = stream(5, "quant");
        let model = toy_model(5);
        let calib: Vec<Tensor> = (0..4).map(|_| rand_batch(16, &mut rng)).collect();
        let model = model.quantize_extractor(&calib).unwrap();

        let batch = rand_batch(64, &mut rng);
        let f32_latent = model.extract_latent(&batch).unwrap();
        let q_latent = model.infer_quantized_latent(&batch).unwrap();

        let mut rel_sum = 0.0f64;
        let mut count = 0usize;
        let denom = f32_latent.data().iter().map(|v| f64::from(v.abs())).sum::<f64>()
            / f32_latent.numel() as f64;
        for (f, q) in f32_latent.data().iter().zip(q_latent.data()) {
            rel_sum += f64::from((f - q).abs()) / denom.max(1e-9);
            count += 1;
        }
        let mean_rel = rel_sum / count as f64;
        assert!(mean_rel < 0.05, "mean relative latent error {mean_rel}");
    }

    #[test]
    fn single_layer_matches_simulated_quantization() {
        // One conv layer: the integer path must agree with
        // quantize(f32_forward(dequantized weights/inputs)) within one step.
        let mut rng = stream(6, "quant");
        let arch = ArchitectureConfig {
            input_shape: [1, 6, 6],
            nm_channels: 4,
            pred_channels: 4,
            num_conv_layers: 1,
            num_classes_max: 2,
            width_multiplier: 1.0,
            kernel_size: 3,
            stride: 1,
        };
        let model = ModelState::init(arch, &mut rng).unwrap();
        let calib: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::new(vec![4, 1, 6, 6], (0..4 * 36).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let model = model.quantize_extractor(&calib).unwrap();
        let q = model.quantized_extractor().unwrap();

        let batch =
            Tensor::new(vec![2, 1, 6, 6], (0..2 * 36).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .unwrap();

        // Simulated-quantization reference for the first pred conv layer.
        let layer = &q.pred_convs[0];
        let w_deq = layer.weight.dequantize();
        let x_deq: Vec<f32> =
            batch.data().iter().map(|&v| q.input.dequantize_value(q.input.quantize_value(v))).collect();
        let x_deq = Tensor::new(batch.shape().to_vec(), x_deq).unwrap();

        let mut tape = crate::tensor::Tape::new();
        let xi = tape.input(&x_deq);
        let wi = tape.input(&w_deq);
        let bi = tape.input(&Tensor::from_vec(layer.bias.clone()));
        let conv = tape.conv2d(xi, wi, bi, 1).unwrap();
        let reference = tape.relu(conv);

        let input_q: Vec<i8> = batch.data().iter().map(|&v| q.input.quantize_value(v)).collect();
        let (got_q, _) = super::conv2d_i8(&input_q, 2, (1, 6, 6), q.input, layer, 1);

        for (g, r) in got_q.iter().zip(tape.data(reference)) {
            let ref_q = layer.out.quantize_value(*r);
            let diff = (i32::from(*g) - i32::from(ref_q)).abs();
            assert!(diff <= 1, "integer path {} vs simulated {}", g, ref_q);
        }
    }

    #[test]
    fn top1_agreement_with_f32_path() {
        let mut rng = stream(7, "quant");
        let model = toy_model(7);
        let calib: Vec<Tensor> = (0..4).map(|_| rand_batch(16, &mut rng)).collect();
        let model = model.quantize_extractor(&calib).unwrap();

        let batch = rand_batch(200, &mut rng);
        let f32_logits = model.classify(&model.extract_latent(&batch).unwrap()).unwrap();
        let q_logits = model.classify(&model.infer_quantized_latent(&batch).unwrap()).unwrap();

        let argmax = |row: &[f32]| {
            row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
        };
        let mut agree = 0usize;
        for n in 0..200 {
            let f = argmax(&f32_logits.data()[n * 10..(n + 1) * 10]);
            let q = argmax(&q_logits.data()[n * 10..(n + 1) * 10]);
            if f == q {
                agree += 1;
            }
        }
        assert!(agree >= 190, "top-1 agreement {agree}/200");
    }
}
