//! Attribute re-fusion: the attribute vector is encoded into rescaling
//! statistics that modulate the attribute-free representation through a
//! stack of project–rescale–unproject–multiply blocks.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    dropout, Adversary, Encoder, EncoderSpec, Linear, Mode, ParamId, ParamStore,
    Submodule,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefusionConfig {
    /// Number of (re-fusion block, convolution block) repetitions.
    pub blocks: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl Default for RefusionConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            hidden_dim: 64,
            dropout: 0.1,
        }
    }
}

impl RefusionConfig {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("re-fusion needs at least one block".into()));
        }
        if self.hidden_dim == 0 || self.hidden_dim > latent_dim {
            return Err(Error::Config(format!(
                "hidden_dim {} must lie in 1..={latent_dim}",
                self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "re-fusion dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Per-sample rescaling statistics, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaleStats {
    pub mu: Matrix,
    pub sigma2: Matrix,
}

/// Shared two-layer perceptron with a mean branch and a variance branch.
#[derive(Debug, Clone)]
pub struct AttributeEncoder {
    hidden: Linear,
    pub mu: Linear,
    pub sigma2: Linear,
}

impl AttributeEncoder {
    pub fn new(
        store: &mut ParamStore,
        num_attributes: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let tag = Submodule::AttributeMlp;
        Self {
            hidden: Linear::new(store, "attr_mlp.hidden", tag, num_attributes, hidden_dim, rng),
            mu: Linear::new(store, "attr_mlp.mu", tag, hidden_dim, hidden_dim, rng),
            sigma2: Linear::new(store, "attr_mlp.sigma2", tag, hidden_dim, hidden_dim, rng),
        }
    }

    pub fn num_attributes(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, attrs: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(tape, store, attrs)?;
        let h = tape.relu(h);
        let mu = self.mu.forward(tape, store, h)?;
        let sigma2 = self.sigma2.forward(tape, store, h)?;
        Ok((mu, sigma2))
    }
}

/// `z ∗ Proj⁻¹(σ² ∗ Proj(z) + μ)` followed by a width-preserving
/// convolution block.
#[derive(Debug, Clone)]
pub struct RefusionBlock {
    pub proj: Linear,
    pub unproj: Linear,
    conv_kernel: ParamId,
    conv_bias: ParamId,
}

impl RefusionBlock {
    pub fn new(
        store: &mut ParamStore,
        index: usize,
        latent_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let tag = Submodule::Refusion;
        let proj = Linear::new(store, &format!("refusion{index}.proj"), tag, latent_dim, hidden_dim, rng);
        let unproj = Linear::new(
            store,
            &format!("refusion{index}.unproj"),
            tag,
            hidden_dim,
            latent_dim,
            rng,
        );
        // Start near the identity: the rescale factor is centred on one and
        // the convolution passes its input straight to the ReLU.
        *store.value_mut(unproj.bias) = Matrix::ones((1, latent_dim));
        let conv_kernel = store.add(
            format!("refusion{index}.conv.kernel"),
            tag,
            Matrix::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).expect("1x3"),
        );
        let conv_bias = store.add(format!("refusion{index}.conv.bias"), tag, Matrix::zeros((1, 1)));
        Self {
            proj,
            unproj,
            conv_kernel,
            conv_bias,
        }
    }

    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        mu: Var,
        sigma2: Var,
    ) -> Result<Var> {
        let projected = self.proj.forward(tape, store, z)?;
        if tape.value(mu).dim() != tape.value(projected).dim()
            || tape.value(sigma2).dim() != tape.value(projected).dim()
        {
            return Err(Error::Shape(format!(
                "rescaling stats {:?}/{:?} do not match projection {:?}",
                tape.value(mu).dim(),
                tape.value(sigma2).dim(),
                tape.value(projected).dim()
            )));
        }
        let scaled = tape.mul(sigma2, projected);
        let shifted = tape.add(scaled, mu);
        let back = self.unproj.forward(tape, store, shifted)?;
        Ok(tape.mul(z, back))
    }

    pub fn conv_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        rate: f64,
        mode: &mut Mode<'_>,
    ) -> Var {
        let k = store.var(tape, self.conv_kernel);
        let b = store.var(tape, self.conv_bias);
        let conv = tape.conv1d_same(x, k, b);
        let act = tape.relu(conv);
        dropout(tape, act, rate, mode)
    }
}

/// Architecture of the complete second-stage model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairReadArch {
    pub encoder: EncoderSpec,
    pub refusion: RefusionConfig,
    pub num_attributes: usize,
    pub height: usize,
    pub width: usize,
}

/// Intermediate representations of one forward pass, as tape handles.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub z_t: Var,
    pub mu: Var,
    pub sigma2: Var,
    pub fused: Vec<Var>,
    pub logits: Var,
}

/// Evaluation-mode outputs, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub z_t: Matrix,
    pub mu: Matrix,
    pub sigma2: Matrix,
    pub fused: Vec<Matrix>,
    pub logits: Matrix,
}

/// Fair image encoder, attribute encoder, re-fusion stack, output head and
/// the adversary that watches the encoder output.
#[derive(Debug, Clone)]
pub struct FairRead {
    pub arch: FairReadArch,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub attr_encoder: AttributeEncoder,
    pub blocks: Vec<RefusionBlock>,
    pub output: Linear,
    pub adversary: Adversary,
}

impl FairRead {
    /// `main_rng` initializes the predictive path, `adversary_rng` the adversary.
    pub fn new(arch: &FairReadArch, main_rng: &mut ChaCha8Rng, adversary_rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let d_z = arch.encoder.latent_dim;
        let encoder = Encoder::new(&mut store, "phi_t", &arch.encoder, arch.height, arch.width, main_rng);
        let attr_encoder = AttributeEncoder::new(
            &mut store,
            arch.num_attributes,
            arch.refusion.hidden_dim,
            main_rng,
        );
        let blocks = (0..arch.refusion.blocks)
            .map(|i| RefusionBlock::new(&mut store, i, d_z, arch.refusion.hidden_dim, main_rng))
            .collect();
        let output = Linear::new(&mut store, "output", Submodule::OutputHead, d_z, 1, main_rng);
        let adversary = Adversary::new(&mut store, d_z, arch.num_attributes, adversary_rng);
        Self {
            arch: arch.clone(),
            store,
            encoder,
            attr_encoder,
            blocks,
            output,
            adversary,
        }
    }

    /// Full forward pass on the tape with the given parameter values.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        images: Var,
        attrs: Var,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardVars> {
        let d_a = tape.value(attrs).ncols();
        if d_a != self.attr_encoder.num_attributes() {
            return Err(Error::Shape(format!(
                "model expects {} attributes, got {d_a}",
                self.attr_encoder.num_attributes()
            )));
        }
        let z_t = self.encoder.forward(tape, store, images, mode)?;
        if tape.value(z_t).nrows() != tape.value(attrs).nrows() {
            return Err(Error::Shape("image and attribute batch sizes differ".into()));
        }
        let (mu, sigma2) = self.attr_encoder.forward(tape, store, attrs)?;
        let mut x = z_t;
        let mut fused = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let f = block.fuse(tape, store, x, mu, sigma2)?;
            fused.push(f);
            x = block.conv_block(tape, store, f, self.arch.refusion.dropout, mode);
        }
        let logits = self.output.forward(tape, store, x)?;
        Ok(ForwardVars {
            z_t,
            mu,
            sigma2,
            fused,
            logits,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        images: Var,
        attrs: Var,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardVars> {
        self.forward_with(&self.store, tape, images, attrs, mode)
    }

    /// Evaluation-mode pass returning every intermediate representation.
    pub fn predict(&self, images: &Matrix, attrs: &Matrix) -> Result<ForwardOutputs> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let a = tape.constant(attrs.clone());
        let v = self.forward(&mut tape, x, a, &mut Mode::Eval)?;
        Ok(ForwardOutputs {
            z_t: tape.value(v.z_t).clone(),
            mu: tape.value(v.mu).clone(),
            sigma2: tape.value(v.sigma2).clone(),
            fused: v.fused.iter().map(|&f| tape.value(f).clone()).collect(),
            logits: tape.value(v.logits).clone(),
        })
    }

    /// Evaluation-mode rescaling statistics for an `n × d_a` attribute matrix.
    pub fn attribute_encode(&self, attrs: &Matrix) -> Result<RescaleStats> {
        attribute_encode(&self.attr_encoder, &self.store, attrs)
    }
}

pub fn attribute_encode(
    encoder: &AttributeEncoder,
    store: &ParamStore,
    attrs: &Matrix,
) -> Result<RescaleStats> {
    if attrs.ncols() != encoder.num_attributes() {
        return Err(Error::Shape(format!(
            "attribute encoder expects width {}, got {}",
            encoder.num_attributes(),
            attrs.ncols()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(attrs.clone());
    let (mu, sigma2) = encoder.forward(&mut tape, store, a)?;
    Ok(RescaleStats {
        mu: tape.value(mu).clone(),
        sigma2: tape.value(sigma2).clone(),
    })
}

/// Applies one re-fusion block (without its convolution block) to latent rows.
pub fn refusion_block(
    block: &RefusionBlock,
    store: &ParamStore,
    z: &Matrix,
    stats: &RescaleStats,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let mu = tape.constant(stats.mu.clone());
    let s2 = tape.constant(stats.sigma2.clone());
    let out = block.fuse(&mut tape, store, zv, mu, s2)?;
    Ok(tape.value(out).clone())
}
