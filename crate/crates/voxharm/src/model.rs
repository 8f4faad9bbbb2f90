//! The style-transfer model: a 4-layer convolutional encoder producing a
//! feature pyramid, an adaptive instance normalization module that re-scales
//! content features to the style features' channel statistics, a mirrored
//! decoder, sliding-window whole-volume inference, and checkpoint i/o.
//!
//! Checkpoint layout (little-endian): magic `HCKP`, version u32, phase tag
//! u8, base width u32, patch size u32, three loss weights f32, parameter
//! count u32, then per parameter: name length u16 + UTF-8 name, element
//! count u64, f32 payload.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::LossWeights;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};
use crate::volume::{crop_paired_patch, PatchSpec, Volume, VolumeError};
use crate::STATS_EPSILON;

pub const HCKP_MAGIC: [u8; 4] = *b"HCKP";
pub const HCKP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("encoder input must be [b, 1, s, s, s] with s divisible by 8, got {shape:?}")]
    BadEncoderInput { shape: Vec<usize> },
    #[error("decoder input must carry {expected} channels, got shape {shape:?}")]
    BadDecoderInput { expected: usize, shape: Vec<usize> },
    #[error("adain operands must share a shape: {content:?} vs {style:?}")]
    AdainShapeMismatch {
        content: Vec<usize>,
        style: Vec<usize>,
    },
    #[error("bad checkpoint magic: expected \"HCKP\"")]
    BadMagic,
    #[error("unknown checkpoint version {0}")]
    UnknownVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint parameter {name} has {got} elements, expected {expected}")]
    ParamSizeMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("checkpoint parameter {0} does not belong to this architecture")]
    UnknownParam(String),
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("volumes must be normalized to [0, 1] before harmonization")]
    NotNormalized,
    #[error("input dims {0:?} do not match exemplar dims {1:?}")]
    DimsMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("patch size {patch} with overlap {overlap} cannot tile dims {dims:?}")]
    BadWindowing {
        patch: usize,
        overlap: usize,
        dims: (usize, usize, usize),
    },
}

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl ConvLayer {
    fn init(name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
        // fan-in scaled normal init, zero biases
        let fan_in = (c_in * 27) as f32;
        let std = (2.0 / fan_in).sqrt();
        let n = c_out * c_in * 27;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            // Box-Muller from two uniforms keeps the stream simple and seedable
            let u1: f32 = rng.random_range(f32::EPSILON..1.0);
            let u2: f32 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos();
            data.push(z * std);
        }
        ConvLayer {
            weight: Parameter {
                name: format!("{name}.weight"),
                value: Tensor::new(vec![c_out, c_in, 3, 3, 3], data).expect("init shape"),
            },
            bias: Parameter {
                name: format!("{name}.bias"),
                value: Tensor::zeros(vec![c_out]),
            },
        }
    }
}

/// Tape-bound conv layer: leaf ids for its weight and bias.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: TensorId,
    pub bias: TensorId,
}

fn bind_layer(tape: &mut Tape, layer: &ConvLayer, trainable: bool) -> BoundConv {
    BoundConv {
        weight: tape.leaf(layer.weight.value.clone().with_requires_grad(trainable)),
        bias: tape.leaf(layer.bias.value.clone().with_requires_grad(trainable)),
    }
}

/// Post-activation feature maps of the four encoder layers; level `k` has
/// spatial size `input / 2^k` for `k = 0..3`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub phi: [TensorId; 4],
}

impl FeaturePyramid {
    /// The deepest level, which feeds adaptive instance normalization.
    pub fn top(&self) -> TensorId {
        self.phi[3]
    }
}

/// Four conv+ReLU blocks with 2×2×2 max pooling after the first three.
/// Channel widths are `base · (1, 2, 4, 8)`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub base: usize,
    pub layers: Vec<ConvLayer>,
}

impl Encoder {
    pub fn channels(base: usize) -> [usize; 4] {
        [base, base * 2, base * 4, base * 8]
    }

    fn new(base: usize, rng: &mut ChaCha8Rng) -> Encoder {
        let ch = Encoder::channels(base);
        let mut layers = Vec::with_capacity(4);
        let mut c_in = 1;
        for (k, &c_out) in ch.iter().enumerate() {
            layers.push(ConvLayer::init(&format!("enc{}", k + 1), c_in, c_out, rng));
            c_in = c_out;
        }
        Encoder { base, layers }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            layers: self
                .layers
                .iter()
                .map(|l| bind_layer(tape, l, trainable))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub layers: Vec<BoundConv>,
}

impl BoundEncoder {
    /// Runs the encoder, returning all four post-ReLU feature maps.
    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<FeaturePyramid, ModelError> {
        let shape = tape.shape(x).to_vec();
        let ok = matches!(shape.as_slice(),
            [_, 1, d, h, w] if d == h && h == w && d % 8 == 0 && *d >= 8);
        if !ok {
            return Err(ModelError::BadEncoderInput { shape });
        }
        let mut phi = [x; 4];
        let mut cur = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let conv = tape.conv3d(cur, layer.weight, layer.bias)?;
            let act = tape.relu(conv);
            phi[k] = act;
            cur = if k < 3 { tape.maxpool3d(act)? } else { act };
        }
        Ok(FeaturePyramid { phi })
    }
}

/// Mirror of the encoder: conv+ReLU alternating with nearest-neighbour
/// upsampling, then a final linear conv down to one channel.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub base: usize,
    pub layers: Vec<ConvLayer>,
}

impl Decoder {
    fn new(base: usize, rng: &mut ChaCha8Rng) -> Decoder {
        let ch = Encoder::channels(base);
        let layers = vec![
            ConvLayer::init("dec1", ch[3], ch[2], rng),
            ConvLayer::init("dec2", ch[2], ch[1], rng),
            ConvLayer::init("dec3", ch[1], ch[0], rng),
            ConvLayer::init("dec4", ch[0], 1, rng),
        ];
        Decoder { base, layers }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDecoder {
        BoundDecoder {
            base: self.base,
            layers: self
                .layers
                .iter()
                .map(|l| bind_layer(tape, l, trainable))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundDecoder {
    base: usize,
    pub layers: Vec<BoundConv>,
}

impl BoundDecoder {
    /// Expands `[b, 8·base, m, m, m]` features back to a `[b, 1, 8m, 8m, 8m]`
    /// patch. The last conv has no nonlinearity; values are unbounded here
    /// and only clamped during volume assembly.
    pub fn forward(&self, tape: &mut Tape, features: TensorId) -> Result<TensorId, ModelError> {
        let shape = tape.shape(features).to_vec();
        let expected = self.base * 8;
        if shape.len() != 5 || shape[1] != expected {
            return Err(ModelError::BadDecoderInput { expected, shape });
        }
        let mut cur = features;
        for (k, layer) in self.layers.iter().enumerate() {
            let conv = tape.conv3d(cur, layer.weight, layer.bias)?;
            if k < 3 {
                let act = tape.relu(conv);
                cur = tape.upsample_nearest3d(act)?;
            } else {
                cur = conv;
            }
        }
        Ok(cur)
    }
}

/// Re-scales `content` so each (batch, channel) slice carries the mean and
/// standard deviation of the matching `style` slice:
/// `σ(style) · (content − μ(content)) / σ(content) + μ(style)`.
pub fn adain(tape: &mut Tape, content: TensorId, style: TensorId) -> Result<TensorId, ModelError> {
    if tape.shape(content) != tape.shape(style) {
        return Err(ModelError::AdainShapeMismatch {
            content: tape.shape(content).to_vec(),
            style: tape.shape(style).to_vec(),
        });
    }
    let (mu_c, sd_c) = tape.channel_stats(content, STATS_EPSILON)?;
    let (mu_s, sd_s) = tape.channel_stats(style, STATS_EPSILON)?;
    let centered = tape.sub_channel(content, mu_c)?;
    let normalized = tape.div_channel(centered, sd_c)?;
    let styled = tape.mul_channel(normalized, sd_s)?;
    Ok(tape.add_channel(styled, mu_s)?)
}

/// Encoder plus decoder with a shared base width.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Fresh model with fan-in-scaled conv weights and zero biases.
    pub fn new(base: usize, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model {
            encoder: Encoder::new(base, &mut rng),
            decoder: Decoder::new(base, &mut rng),
        }
    }

    pub fn base(&self) -> usize {
        self.encoder.base
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.encoder
            .layers
            .iter()
            .chain(self.decoder.layers.iter())
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn encoder_parameters(&self) -> Vec<&Parameter> {
        self.encoder
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn decoder_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.decoder
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.encoder
            .layers
            .iter_mut()
            .chain(self.decoder.layers.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

// ── checkpoints ─────────────────────────────────────────────────────────

/// Header fields echoed into every checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub phase: u8,
    pub base: u32,
    pub patch_size: u32,
    pub weights: LossWeights,
}

pub fn save_checkpoint(
    model: &Model,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&HCKP_MAGIC)?;
    w.write_u32::<LittleEndian>(HCKP_VERSION)?;
    w.write_u8(meta.phase)?;
    w.write_u32::<LittleEndian>(meta.base)?;
    w.write_u32::<LittleEndian>(meta.patch_size)?;
    w.write_f32::<LittleEndian>(meta.weights.lambda_style)?;
    w.write_f32::<LittleEndian>(meta.weights.lambda_content)?;
    w.write_f32::<LittleEndian>(meta.weights.lambda_consistency)?;
    let params = model.parameters();
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name)?;
        w.write_u64::<LittleEndian>(p.value.numel() as u64)?;
        for &v in p.value.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta), ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let map_eof = |e: io::Error| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ModelError::Truncated
        } else {
            ModelError::Io(e)
        }
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(map_eof)?;
    if magic != HCKP_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>().map_err(map_eof)?;
    if version != HCKP_VERSION {
        return Err(ModelError::UnknownVersion(version));
    }
    let phase = r.read_u8().map_err(map_eof)?;
    let base = r.read_u32::<LittleEndian>().map_err(map_eof)?;
    let patch_size = r.read_u32::<LittleEndian>().map_err(map_eof)?;
    let lambda_style = r.read_f32::<LittleEndian>().map_err(map_eof)?;
    let lambda_content = r.read_f32::<LittleEndian>().map_err(map_eof)?;
    let lambda_consistency = r.read_f32::<LittleEndian>().map_err(map_eof)?;
    let count = r.read_u32::<LittleEndian>().map_err(map_eof)? as usize;

    let mut model = Model::new(base as usize, 0);
    let mut filled = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>().map_err(map_eof)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(map_eof)?;
        let name = String::from_utf8(name).map_err(|_| ModelError::BadMagic)?;
        let numel = r.read_u64::<LittleEndian>().map_err(map_eof)? as usize;
        let mut data = vec![0.0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(map_eof)?;
        filled.insert(name, data);
    }

    for p in model.parameters_mut() {
        let data = filled
            .remove(&p.name)
            .ok_or_else(|| ModelError::MissingParam(p.name.clone()))?;
        if data.len() != p.value.numel() {
            return Err(ModelError::ParamSizeMismatch {
                name: p.name.clone(),
                expected: p.value.numel(),
                got: data.len(),
            });
        }
        p.value.data_mut().copy_from_slice(&data);
    }
    if let Some((name, _)) = filled.into_iter().next() {
        return Err(ModelError::UnknownParam(name));
    }

    Ok((
        model,
        CheckpointMeta {
            phase,
            base,
            patch_size,
            weights: LossWeights {
                lambda_style,
                lambda_content,
                lambda_consistency,
            },
        },
    ))
}

// ── whole-volume inference ──────────────────────────────────────────────

/// Window origins covering `0..extent` with the given stride; the final
/// window is clamped flush with the boundary.
fn window_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        if pos + patch >= extent {
            out.push(extent - patch);
            break;
        }
        out.push(pos);
        pos += stride;
    }
    out.dedup();
    out
}

/// Harmonizes a whole volume against an exemplar by sliding-window style
/// transfer: each input window is paired with the exemplar window at the
/// same location, overlaps are averaged uniformly, and the result is clamped
/// to `[0, 1]`. The output keeps the input's dims, spacing, site id and
/// normalization record.
pub fn harmonize_volume(
    input: &Volume,
    exemplar: &Volume,
    model: &Model,
    patch: usize,
    overlap: usize,
) -> Result<Volume, ModelError> {
    if input.norm.is_none() || exemplar.norm.is_none() {
        return Err(ModelError::NotNormalized);
    }
    if input.dims != exemplar.dims {
        return Err(ModelError::DimsMismatch(input.dims, exemplar.dims));
    }
    let (nz, ny, nx) = input.dims;
    let windowing_ok = patch >= 8
        && patch % 8 == 0
        && overlap < patch
        && patch <= nz.min(ny).min(nx);
    if !windowing_ok {
        return Err(ModelError::BadWindowing {
            patch,
            overlap,
            dims: input.dims,
        });
    }
    let stride = patch - overlap;
    let mut specs = Vec::new();
    for z in window_origins(nz, patch, stride) {
        for y in window_origins(ny, patch, stride) {
            for x in window_origins(nx, patch, stride) {
                specs.push(PatchSpec::new((z, y, x), patch)?);
            }
        }
    }

    let mut accum = vec![0.0f64; input.numel()];
    let mut weight = vec![0u32; input.numel()];
    // windows are processed in small batches, each on a fresh tape
    for chunk in specs.chunks(4) {
        let mut in_data = Vec::with_capacity(chunk.len() * patch * patch * patch);
        let mut ex_data = Vec::with_capacity(in_data.capacity());
        for spec in chunk {
            let (pi, pe) = crop_paired_patch(input, exemplar, spec)?;
            in_data.extend_from_slice(pi.data());
            ex_data.extend_from_slice(pe.data());
        }
        let shape = vec![chunk.len(), 1, patch, patch, patch];
        let mut tape = Tape::new();
        let enc = model.encoder.bind(&mut tape, false);
        let dec = model.decoder.bind(&mut tape, false);
        let xi = tape.leaf(Tensor::new(shape.clone(), in_data)?);
        let ei = tape.leaf(Tensor::new(shape, ex_data)?);
        let content = enc.forward(&mut tape, xi)?;
        let style = enc.forward(&mut tape, ei)?;
        let translated = adain(&mut tape, content.top(), style.top())?;
        let pred = dec.forward(&mut tape, translated)?;
        let pred_data = tape.data(pred);

        let window_vol = patch * patch * patch;
        for (w_idx, spec) in chunk.iter().enumerate() {
            let (oz, oy, ox) = spec.origin;
            let base = w_idx * window_vol;
            for z in 0..patch {
                for y in 0..patch {
                    let row = input.index(oz + z, oy + y, ox);
                    let src = base + (z * patch + y) * patch;
                    for x in 0..patch {
                        accum[row + x] += pred_data[src + x] as f64;
                        weight[row + x] += 1;
                    }
                }
            }
        }
    }

    let data: Vec<f32> = accum
        .iter()
        .zip(&weight)
        .map(|(a, &w)| ((a / w as f64) as f32).clamp(0.0, 1.0))
        .collect();
    let mut out = Volume::new(input.dims, input.spacing, data, input.site_id.clone())?;
    out.norm = input.norm;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;
    use crate::volume::NormalizationRecord;
    use rand::Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn pyramid_shapes_at_desk_scale() {
        let model = Model::new(8, 1);
        let mut tape = Tape::new();
        let enc = model.encoder.bind(&mut tape, false);
        let x = tape.leaf(random_tensor(&[2, 1, 16, 16, 16], 3));
        let pyr = enc.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(pyr.phi[0]), &[2, 8, 16, 16, 16]);
        assert_eq!(tape.shape(pyr.phi[1]), &[2, 16, 8, 8, 8]);
        assert_eq!(tape.shape(pyr.phi[2]), &[2, 32, 4, 4, 4]);
        assert_eq!(tape.shape(pyr.phi[3]), &[2, 64, 2, 2, 2]);
    }

    #[test]
    fn paper_scale_channel_progression() {
        // base 64 gives a 512-channel deepest level; check arithmetic only
        assert_eq!(Encoder::channels(64), [64, 128, 256, 512]);
        let ch = Encoder::channels(64);
        assert_eq!(ch[3], 512);
        // and a 64³ patch pools down to 8³ at the deepest level
        assert_eq!(64 / 2 / 2 / 2, 8);
    }

    #[test]
    fn encoder_rejects_bad_patch_size() {
        let model = Model::new(8, 1);
        let mut tape = Tape::new();
        let enc = model.encoder.bind(&mut tape, false);
        let x = tape.leaf(random_tensor(&[1, 1, 12, 12, 12], 5));
        assert!(matches!(
            enc.forward(&mut tape, x),
            Err(ModelError::BadEncoderInput { .. })
        ));
    }

    #[test]
    fn zero_input_yields_bias_driven_first_layer() {
        let mut model = Model::new(8, 1);
        // give the first conv a non-zero bias so the effect is visible
        model.encoder.layers[0]
            .bias
            .value
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.1 * (i as f32 + 1.0));
        let mut tape = Tape::new();
        let enc = model.encoder.bind(&mut tape, false);
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 8, 8, 8]));
        let pyr = enc.forward(&mut tape, x).unwrap();
        let phi1 = tape.data(pyr.phi[0]);
        for c in 0..8 {
            let expect = (0.1 * (c as f32 + 1.0)).max(0.0);
            for &v in &phi1[c * 512..(c + 1) * 512] {
                assert_eq!(v, expect);
            }
        }
    }

    #[test]
    fn decode_restores_patch_shape_and_is_deterministic() {
        let model = Model::new(8, 2);
        let mut tape = Tape::new();
        let dec = model.decoder.bind(&mut tape, false);
        let f = tape.leaf(random_tensor(&[1, 64, 2, 2, 2], 7));
        let out1 = dec.forward(&mut tape, f).unwrap();
        assert_eq!(tape.shape(out1), &[1, 1, 16, 16, 16]);
        let out2 = dec.forward(&mut tape, f).unwrap();
        assert_eq!(tape.data(out1), tape.data(out2));
    }

    #[test]
    fn decode_rejects_wrong_channel_count() {
        let model = Model::new(8, 2);
        let mut tape = Tape::new();
        let dec = model.decoder.bind(&mut tape, false);
        let f = tape.leaf(random_tensor(&[1, 32, 2, 2, 2], 7));
        assert!(matches!(
            dec.forward(&mut tape, f),
            Err(ModelError::BadDecoderInput { .. })
        ));
    }

    #[test]
    fn encode_decode_round_trips_shape() {
        let model = Model::new(8, 3);
        let mut tape = Tape::new();
        let enc = model.encoder.bind(&mut tape, false);
        let dec = model.decoder.bind(&mut tape, false);
        let x = tape.leaf(random_tensor(&[2, 1, 16, 16, 16], 11));
        let pyr = enc.forward(&mut tape, x).unwrap();
        let out = dec.forward(&mut tape, pyr.top()).unwrap();
        assert_eq!(tape.shape(out), tape.shape(x));
    }

    #[test]
    fn adain_self_style_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[1, 4, 4, 4, 4], 13));
        let out = adain(&mut tape, x, x).unwrap();
        for (a, b) in tape.data(out).iter().zip(tape.data(x)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn adain_transfers_channel_statistics() {
        let mut tape = Tape::new();
        let content = tape.leaf(random_tensor(&[2, 3, 4, 4, 4], 17));
        let style_t = {
            let mut t = random_tensor(&[2, 3, 4, 4, 4], 19);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = *v * 3.0 + (i % 3) as f32; // distinct scales/means per channel
            }
            t
        };
        let style = tape.leaf(style_t);
        let out = adain(&mut tape, content, style).unwrap();
        let (mu_o, sd_o) = tape.channel_stats(out, STATS_EPSILON).unwrap();
        let (mu_s, sd_s) = tape.channel_stats(style, STATS_EPSILON).unwrap();
        for (a, b) in tape.data(mu_o).iter().zip(tape.data(mu_s)) {
            assert!((a - b).abs() < 1e-4, "mean {a} vs {b}");
        }
        for (a, b) in tape.data(sd_o).iter().zip(tape.data(sd_s)) {
            assert!((a - b).abs() < 1e-4, "std {a} vs {b}");
        }
    }

    #[test]
    fn adain_matches_hand_computed_case() {
        // two channels of 2³ voxels with known statistics
        let content_data: Vec<f32> = (0..16).map(|i| i as f32 / 8.0).collect();
        let style_data: Vec<f32> = (0..16).map(|i| 1.0 + (i as f32 % 4.0) * 0.5).collect();
        let mut tape = Tape::new();
        let c = tape
            .leaf(Tensor::new(vec![1, 2, 2, 2, 2], content_data.clone()).unwrap());
        let s = tape.leaf(Tensor::new(vec![1, 2, 2, 2, 2], style_data.clone()).unwrap());
        let out = adain(&mut tape, c, s).unwrap();

        // oracle: direct evaluation with two-pass statistics
        let stats = |d: &[f32]| {
            let n = d.len() as f64;
            let m = d.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
            (m, (var + STATS_EPSILON as f64).sqrt())
        };
        for ch in 0..2 {
            let cs = &content_data[ch * 8..(ch + 1) * 8];
            let ss = &style_data[ch * 8..(ch + 1) * 8];
            let (mc, sc) = stats(cs);
            let (ms, sstd) = stats(ss);
            for i in 0..8 {
                let expect = sstd * (cs[i] as f64 - mc) / sc + ms;
                let got = tape.data(out)[ch * 8 + i] as f64;
                assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn adain_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&[1, 2, 2, 2, 2], 23));
        let b = tape.leaf(random_tensor(&[1, 2, 4, 4, 4], 29));
        assert!(matches!(
            adain(&mut tape, a, b),
            Err(ModelError::AdainShapeMismatch { .. })
        ));
    }

    #[test]
    fn decoder_gradient_passes_finite_difference_check() {
        let model = Model::new(4, 5);
        let f = random_tensor(&[1, 32, 2, 2, 2], 31);
        let err = check_gradients(
            |tape, fi| {
                let dec = model.decoder.bind(tape, false);
                let out = dec.forward(tape, fi).unwrap();
                tape.mean(out)
            },
            &f,
            1e-3,
        );
        assert!(err < 1e-2, "decoder gradcheck: {err}");
    }

    #[test]
    fn encoder_gradient_passes_finite_difference_check() {
        let model = Model::new(4, 6);
        let mut x = random_tensor(&[1, 1, 8, 8, 8], 37);
        for v in x.data_mut() {
            *v += 0.05; // keep activations away from the ReLU kink
        }
        let err = check_gradients(
            |tape, xi| {
                let enc = model.encoder.bind(tape, false);
                let pyr = enc.forward(tape, xi).unwrap();
                tape.mean(pyr.top())
            },
            &x,
            1e-3,
        );
        assert!(err < 5e-2, "encoder gradcheck: {err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hckp");
        let model = Model::new(8, 41);
        let meta = CheckpointMeta {
            phase: 1,
            base: 8,
            patch_size: 16,
            weights: LossWeights::default(),
        };
        save_checkpoint(&model, &meta, &path).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        for (a, b) in model.parameters().iter().zip(back.parameters()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "parameter {}", a.name);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hckp");
        let model = Model::new(4, 43);
        let meta = CheckpointMeta {
            phase: 2,
            base: 4,
            patch_size: 16,
            weights: LossWeights::default(),
        };
        save_checkpoint(&model, &meta, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad = dir.path().join("bad.hckp");
        std::fs::write(&bad, b"XXXXrest").unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(ModelError::BadMagic)));

        let trunc = dir.path().join("trunc.hckp");
        std::fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&trunc), Err(ModelError::Truncated)));
    }

    fn normalized_volume(edge: usize, seed: u64, site: &str) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..edge * edge * edge)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Volume::new((edge, edge, edge), (1.0, 1.0, 1.0), data, site)
            .unwrap()
            .with_norm(NormalizationRecord::new(0.0, 100.0).unwrap())
    }

    #[test]
    fn harmonize_keeps_dims_and_record() {
        let model = Model::new(4, 47);
        let input = normalized_volume(16, 1, "site_a");
        let exemplar = normalized_volume(16, 2, "site_b");
        let out = harmonize_volume(&input, &exemplar, &model, 8, 4).unwrap();
        assert_eq!(out.dims, input.dims);
        assert_eq!(out.norm, input.norm);
        assert_eq!(out.site_id, input.site_id);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn single_window_equals_sliding_assembly() {
        let model = Model::new(4, 53);
        let input = normalized_volume(16, 3, "site_a");
        let exemplar = normalized_volume(16, 4, "site_b");
        // patch == volume, overlap 0: exactly one window
        let whole = harmonize_volume(&input, &exemplar, &model, 16, 0).unwrap();

        // manual single-shot forward
        let mut tape = Tape::new();
        let enc = model.encoder.bind(&mut tape, false);
        let dec = model.decoder.bind(&mut tape, false);
        let spec = PatchSpec::new((0, 0, 0), 16).unwrap();
        let (pi, pe) = crop_paired_patch(&input, &exemplar, &spec).unwrap();
        let xi = tape.leaf(pi);
        let ei = tape.leaf(pe);
        let c = enc.forward(&mut tape, xi).unwrap();
        let s = enc.forward(&mut tape, ei).unwrap();
        let t = adain(&mut tape, c.top(), s.top()).unwrap();
        let pred = dec.forward(&mut tape, t).unwrap();
        for (a, b) in whole.data().iter().zip(tape.data(pred)) {
            assert_eq!(*a, b.clamp(0.0, 1.0));
        }
    }

    #[test]
    fn harmonize_rejects_unnormalized_and_mismatched() {
        let model = Model::new(4, 59);
        let mut input = normalized_volume(16, 5, "a");
        let exemplar = normalized_volume(16, 6, "b");
        input.norm = None;
        assert!(matches!(
            harmonize_volume(&input, &exemplar, &model, 8, 0),
            Err(ModelError::NotNormalized)
        ));
        let input = normalized_volume(16, 5, "a");
        let small = {
            let v = normalized_volume(8, 7, "b");
            v
        };
        assert!(matches!(
            harmonize_volume(&input, &small, &model, 8, 0),
            Err(ModelError::DimsMismatch(..))
        ));
    }
}
