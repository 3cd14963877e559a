//! Differentiable building blocks: image encoders, classification heads and
//! the adversarial attribute classifier, all backed by a tagged parameter
//! store so training can route gradients per submodule.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Axis;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Probability clipping bound applied before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Owning submodule of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodule {
    Encoder,
    AttributeHead,
    TargetHead,
    Adversary,
    AttributeMlp,
    Refusion,
    OutputHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tag: Submodule,
    pub value: Matrix,
}

/// Named, tagged parameter tensors of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tag: Submodule, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, tag, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_tag(&self, tag: Submodule) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.tag == tag)
            .map(|(id, _)| id)
            .collect()
    }

    /// Puts parameter `id` on the tape.
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id.0, &self.params[id.0].value)
    }

    /// Copies every parameter carrying `tag` from `other`, matched by name.
    pub fn copy_tagged_from(&mut self, other: &ParamStore, tag: Submodule) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| p.tag == tag) {
            let src = other
                .find(&p.name)
                .map(|id| other.value(id))
                .ok_or_else(|| Error::Shape(format!("source store lacks parameter {}", p.name)))?;
            if src.dim() != p.value.dim() {
                return Err(Error::Shape(format!(
                    "parameter {}: {:?} vs {:?}",
                    p.name,
                    src.dim(),
                    p.value.dim()
                )));
            }
            p.value.assign(src);
        }
        Ok(())
    }

    /// Replaces values from a loaded store, requiring identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for p in &mut self.params {
            let id = other
                .find(&p.name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {}", p.name)))?;
            let src = other.get(id);
            if src.value.dim() != p.value.dim() || src.tag != p.tag {
                return Err(Error::Shape(format!("tensor {} does not match model", p.name)));
            }
            p.value.assign(&src.value);
        }
        Ok(())
    }
}

/// Forward-pass mode. Training mode owns the randomness for dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout; identity in evaluation mode or at rate 0.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode<'_>) -> Var {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let dim = tape.value(x).raw_dim();
            let mask = Matrix::from_shape_simple_fn(dim, || {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            tape.mask(x, mask)
        }
        _ => x,
    }
}

pub(crate) fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// Fully connected layer `x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        tag: Submodule,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            tag,
            uniform_init(rng, in_dim, out_dim, bound),
        );
        let bias = store.add(format!("{name}.bias"), tag, uniform_init(rng, 1, out_dim, bound));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let width = tape.value(x).ncols();
        if width != self.in_dim {
            return Err(Error::Shape(format!(
                "linear layer expects width {}, got {width}",
                self.in_dim
            )));
        }
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        Ok(tape.affine(x, w, b))
    }
}

/// Architecture of an image encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    /// Output channels of each stride-2 convolution stage.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            latent_dim: 128,
            dropout: 0.1,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self, num_attributes: usize) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "encoder needs at least one conv stage with nonzero channels".into(),
            ));
        }
        if self.latent_dim < 8.max(num_attributes) {
            return Err(Error::Config(format!(
                "latent_dim {} must be at least max(8, d_a = {num_attributes})",
                self.latent_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "encoder dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Convolutional image encoder: stride-2 conv stages with ReLU, global
/// average pooling, dropout, then a linear map to the latent space.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub height: usize,
    pub width: usize,
    convs: Vec<(ParamId, ParamId)>,
    proj: Linear,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: &EncoderSpec,
        height: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut convs = Vec::with_capacity(spec.channels.len());
        let mut in_ch = 1;
        for (i, &out_ch) in spec.channels.iter().enumerate() {
            let fan_in = 9 * in_ch;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = store.add(
                format!("{prefix}.conv{i}.weight"),
                Submodule::Encoder,
                uniform_init(rng, fan_in, out_ch, bound),
            );
            let b = store.add(
                format!("{prefix}.conv{i}.bias"),
                Submodule::Encoder,
                uniform_init(rng, 1, out_ch, bound),
            );
            convs.push((w, b));
            in_ch = out_ch;
        }
        let proj = Linear::new(
            store,
            &format!("{prefix}.proj"),
            Submodule::Encoder,
            in_ch,
            spec.latent_dim,
            rng,
        );
        Self {
            spec: spec.clone(),
            height,
            width,
            convs,
            proj,
        }
    }

    /// `images` holds one row per pixel (`batch·height·width × 1`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let pixels = self.height * self.width;
        let rows = tape.value(images).nrows();
        if tape.value(images).ncols() != 1 || rows % pixels != 0 || rows == 0 {
            return Err(Error::Shape(format!(
                "encoder expects {}x{} single-channel images, got a {:?} pixel matrix",
                self.height,
                self.width,
                tape.value(images).dim()
            )));
        }
        let batch = rows / pixels;
        let (mut h, mut w, mut c) = (self.height, self.width, 1);
        // Map pixel intensities from [0, 1] to [-1, 1].
        let offset = tape.constant(Matrix::from_elem((1, 1), -0.5));
        let shifted = tape.add_bias(images, offset);
        let mut x = tape.scale(shifted, 2.0);
        for (i, &(wid, bid)) in self.convs.iter().enumerate() {
            let geom = ConvGeometry {
                batch,
                height: h,
                width: w,
                in_channels: c,
                out_channels: self.spec.channels[i],
                kernel: 3,
                stride: 2,
                padding: 1,
            };
            let wv = store.var(tape, wid);
            let bv = store.var(tape, bid);
            let conv = tape.conv2d(x, wv, bv, geom);
            x = tape.relu(conv);
            h = geom.out_height();
            w = geom.out_width();
            c = geom.out_channels;
        }
        let pooled = tape.avg_pool_rows(x, h * w);
        let dropped = dropout(tape, pooled, self.spec.dropout, mode);
        self.proj.forward(tape, store, dropped)
    }
}

/// Negative-side slope of the adversary's hidden activation. A plain ReLU
/// lets the encoder silence the adversary by driving every hidden unit
/// negative, after which the adversary can no longer recover.
const ADVERSARY_LEAK: f64 = 0.2;
/// Variance floor of the adversary's input standardization. Standardizing
/// with batch statistics keeps the encoder from hiding attribute
/// information in low-variance directions.
const ADVERSARY_EPS: f64 = 1e-5;

/// Batch-standardized two-layer perceptron (hidden width = input width)
/// emitting attribute logits.
#[derive(Debug, Clone)]
pub struct Adversary {
    hidden: Linear,
    out: Linear,
}

impl Adversary {
    pub fn new(
        store: &mut ParamStore,
        latent_dim: usize,
        num_attributes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = Linear::new(
            store,
            "adversary.hidden",
            Submodule::Adversary,
            latent_dim,
            latent_dim,
            rng,
        );
        let out = Linear::new(
            store,
            "adversary.out",
            Submodule::Adversary,
            latent_dim,
            num_attributes,
            rng,
        );
        Self { hidden, out }
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let z = tape.standardize_columns(z, ADVERSARY_EPS);
        let h = self.hidden.forward(tape, store, z)?;
        let h = tape.leaky_relu(h, ADVERSARY_LEAK);
        self.out.forward(tape, store, h)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Element-wise logistic squashing clipped to `[ε, 1−ε]`.
pub fn clipped_probabilities(logits: &Matrix) -> Matrix {
    logits.mapv(|v| sigmoid(v).clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// Rows of latent vectors aligned with sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Matrix,
    pub ids: Vec<String>,
}

impl LatentBatch {
    pub fn new(z: Matrix, ids: Vec<String>) -> Result<Self> {
        if z.nrows() == 0 || z.nrows() != ids.len() {
            return Err(Error::Shape(format!(
                "latent batch has {} rows for {} ids",
                z.nrows(),
                ids.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("latent batch contains non-finite values".into()));
        }
        Ok(Self { z, ids })
    }
}

/// Evaluation-mode encoding of a pixel matrix into an `n × d_z` latent batch.
pub fn encode(
    encoder: &Encoder,
    store: &ParamStore,
    images: &Matrix,
    ids: Vec<String>,
) -> Result<LatentBatch> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let z = encoder.forward(&mut tape, store, x, &mut Mode::Eval)?;
    LatentBatch::new(tape.value(z).clone(), ids)
}

/// Logits of a linear head over latent rows.
pub fn head_predict(head: &Linear, store: &ParamStore, z: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let out = head.forward(&mut tape, store, zv)?;
    Ok(tape.value(out).clone())
}

/// Adversary attribute probabilities, clipped to `[ε, 1−ε]`.
pub fn adversary_predict(adversary: &Adversary, store: &ParamStore, z: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let logits = adversary.logits(&mut tape, store, zv)?;
    Ok(clipped_probabilities(tape.value(logits)))
}

/// Mean and population std of each column; used for standardizing features.
pub fn column_stats(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mean = m.mean_axis(Axis(0)).expect("nonempty").to_vec();
    let std = m.std_axis(Axis(0), 0.0).to_vec();
    (mean, std)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FRCKPT01";

#[derive(Serialize, Deserialize)]
struct TensorIndexEntry {
    name: String,
    tag: Submodule,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: String,
    tensors: Vec<TensorIndexEntry>,
}

/// Writes a checkpoint: magic, little-endian u64 header length, a JSON
/// header holding the config snapshot and the tensor index (name, shape,
/// dtype, byte offset into the data section), then raw little-endian f64s.
pub fn save_checkpoint(path: &Path, store: &ParamStore, config_snapshot: &str) -> Result<()> {
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let (r, c) = p.value.dim();
        tensors.push(TensorIndexEntry {
            name: p.name.clone(),
            tag: p.tag,
            shape: [r, c],
            dtype: "f64".into(),
            offset,
        });
        offset += (r * c * 8) as u64;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: config_snapshot.to_string(),
        tensors,
    })
    .map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset as usize);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, p) in store.iter() {
        for v in p.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16 + header_len;
    if bytes.len() < data_start {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(e.to_string()))?;
    let data = &bytes[data_start..];
    let mut store = ParamStore::new();
    for t in header.tensors {
        if t.dtype != "f64" {
            return Err(bad(format!("unsupported dtype {}", t.dtype)));
        }
        let len = t.shape[0] * t.shape[1];
        let start = t.offset as usize;
        let end = start + len * 8;
        if end > data.len() {
            return Err(bad(format!("tensor {} runs past end of file", t.name)));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::from_shape_vec((t.shape[0], t.shape[1]), values)
            .map_err(|e| bad(e.to_string()))?;
        store.add(t.name, t.tag, m);
    }
    Ok((store, header.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Encoder {
        let spec = EncoderSpec {
            channels: vec![2, 3],
            latent_dim: 8,
            dropout: 0.3,
        };
        Encoder::new(store, "enc", &spec, 8, 8, rng)
    }

    fn random_images(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        Matrix::from_shape_simple_fn((n * 64, 1), || rng.random::<f64>())
    }

    #[test]
    fn encode_shape_and_eval_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store, &mut rng);
        let images = random_images(&mut rng, 5);
        let ids: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let a = encode(&enc, &store, &images, ids.clone()).unwrap();
        let b = encode(&enc, &store, &images, ids).unwrap();
        assert_eq!(a.z.dim(), (5, 8));
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn encoder_rejects_wrong_image_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store, &mut rng);
        let images = Matrix::zeros((50, 1));
        let err = encode(&enc, &store, &images, vec!["a".into()]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn head_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let target = Linear::new(&mut store, "t", Submodule::TargetHead, 8, 1, &mut rng);
        let attr = Linear::new(&mut store, "a", Submodule::AttributeHead, 8, 3, &mut rng);
        let z = Matrix::from_shape_simple_fn((4, 8), || rng.random::<f64>());
        assert_eq!(head_predict(&target, &store, &z).unwrap().dim(), (4, 1));
        assert_eq!(head_predict(&attr, &store, &z).unwrap().dim(), (4, 3));
        store.value_mut(target.weight).fill(0.0);
        store.value_mut(target.bias).fill(0.0);
        assert!(head_predict(&target, &store, &z)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let narrow = Matrix::zeros((4, 7));
        assert!(head_predict(&target, &store, &narrow).is_err());
    }

    #[test]
    fn adversary_zero_logits_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let adv = Adversary::new(&mut store, 8, 3, &mut rng);
        for id in store.ids_with_tag(Submodule::Adversary) {
            store.value_mut(id).fill(0.0);
        }
        let z = Matrix::from_shape_simple_fn((4, 8), || rng.random::<f64>());
        let p = adversary_predict(&adv, &store, &z).unwrap();
        assert_eq!(p.dim(), (4, 3));
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn clipped_probabilities_stay_open() {
        let logits = Matrix::from_shape_vec((1, 4), vec![-1e3, -40.0, 40.0, 1e3]).unwrap();
        let p = clipped_probabilities(&logits);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p[[0, 0]], PROB_EPS);
        assert_eq!(p[[0, 3]], 1.0 - PROB_EPS);
    }

    #[test]
    fn encoder_spec_validation() {
        let mut spec = EncoderSpec::default();
        assert!(spec.validate(3).is_ok());
        spec.latent_dim = 7;
        assert!(spec.validate(3).is_err());
        spec.latent_dim = 16;
        spec.dropout = 1.0;
        assert!(spec.validate(3).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_elem((3, 3), 2.0));
        let y = dropout(&mut tape, x, 0.5, &mut Mode::Eval);
        assert_eq!(x, y);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let _ = small_encoder(&mut store, &mut rng);
        let _ = Adversary::new(&mut store, 8, 3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &store, "seed = 4\n").unwrap();
        let (loaded, cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, "seed = 4\n");
        assert_eq!(loaded.len(), store.len());
        for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tag, b.tag);
            let same = a
                .value
                .iter()
                .zip(b.value.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
    }
}
