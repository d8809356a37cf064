//! Conditional generator/discriminator pair with hinge losses, plus
//! seeded synthesis of labeled feature sets for unseen classes.

use super::block::{msa_block_tape, MsaBlockParams, MsaBlockVars};
use super::{FeatureMap, GanConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, MlpParams, MlpVars, Rng, Tape, Var};
use crate::taxonomy::TaxonomyTree;

/// Noise→base-map projection, a stack of fusion blocks, and a final 1×1
/// channel projection.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GanConfig,
    pub z_w: Matrix, // (C·base_h·base_w)×noise_dim
    pub z_b: Matrix,
    pub blocks: Vec<MsaBlockParams>,
    pub out_w: Matrix, // out_channels×C
    pub out_b: Matrix,
}

#[derive(Debug, Clone)]
pub struct GeneratorVars {
    pub z_w: Var,
    pub z_b: Var,
    pub blocks: Vec<MsaBlockVars>,
    pub out_w: Var,
    pub out_b: Var,
}

impl Generator {
    pub fn new(config: GanConfig, text_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.channels != text_dim {
            return Err(Error::DimMismatch(format!(
                "block channels {} must equal text embedding dim {text_dim}",
                config.channels
            )));
        }
        let mut rng = Rng::new(seed);
        let base = config.channels * config.base_h * config.base_w;
        let z_w = Matrix::new(
            base,
            config.noise_dim,
            rng.uniform_vec(base * config.noise_dim, -0.1, 0.1),
        )?;
        let z_b = Matrix::new(base, 1, rng.uniform_vec(base, -0.1, 0.1))?;
        let blocks = (0..config.blocks)
            .map(|_| MsaBlockParams::new(text_dim, config.channels, config.mlp_hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let out_w = Matrix::new(
            config.out_channels,
            config.channels,
            rng.uniform_vec(config.out_channels * config.channels, -0.1, 0.1),
        )?;
        let out_b = Matrix::new(config.out_channels, 1, rng.uniform_vec(config.out_channels, -0.1, 0.1))?;
        Ok(Self {
            config,
            z_w,
            z_b,
            blocks,
            out_w,
            out_b,
        })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> GeneratorVars {
        let reg = |tape: &mut Tape, m: &Matrix| {
            if trainable {
                tape.input(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        GeneratorVars {
            z_w: reg(tape, &self.z_w),
            z_b: reg(tape, &self.z_b),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.register(tape, trainable))
                .collect(),
            out_w: reg(tape, &self.out_w),
            out_b: reg(tape, &self.out_b),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.z_w, &mut self.z_b];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = vec![&self.z_w, &self.z_b];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.push(&self.out_w);
        out.push(&self.out_b);
        out
    }

    pub fn grads(&self, tape: &Tape, vars: &GeneratorVars) -> Vec<Matrix> {
        let mut out = vec![tape.grad(vars.z_w), tape.grad(vars.z_b)];
        for (b, bv) in self.blocks.iter().zip(vars.blocks.iter()) {
            out.extend(b.grads(tape, bv));
        }
        out.push(tape.grad(vars.out_w));
        out.push(tape.grad(vars.out_b));
        out
    }

    /// Tape forward: noise column → feature-map node; returns (map, h, w).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &GeneratorVars,
        z: Var,
        words: Var,
        sentence: Var,
    ) -> Result<(Var, usize, usize)> {
        let zc = tape.value(z);
        if zc.shape() != (self.config.noise_dim, 1) {
            return Err(Error::DimMismatch(format!(
                "noise must be {}x1, got {}x{}",
                self.config.noise_dim,
                zc.rows(),
                zc.cols()
            )));
        }
        let wz = tape.matmul(vars.z_w, z)?;
        let flat = tape.add(wz, vars.z_b)?;
        let mut fmap = tape.reshape(flat, self.config.channels, self.config.base_h * self.config.base_w)?;
        let (mut h, mut w) = (self.config.base_h, self.config.base_w);
        for (params, bvars) in self.blocks.iter().zip(vars.blocks.iter()) {
            let (next, h2, w2) = msa_block_tape(
                tape,
                params,
                bvars,
                words,
                sentence,
                fmap,
                h,
                w,
                self.config.attention,
            )?;
            fmap = next;
            h = h2;
            w = w2;
        }
        let projected = tape.matmul(vars.out_w, fmap)?;
        let out = tape.add_col_broadcast(projected, vars.out_b)?;
        Ok((out, h, w))
    }

    /// Plain generation; deterministic given (z, parameters).
    pub fn generate(&self, z: &[f64], words: &Matrix, sentence: &[f64]) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let zv = tape.constant(Matrix::column(z.to_vec())?);
        let e = tape.constant(words.clone());
        let s = tape.constant(Matrix::column(sentence.to_vec())?);
        let (out, h, w) = self.forward_tape(&mut tape, &vars, zv, e, s)?;
        FeatureMap::from_matrix(tape.value(out), h, w)
    }
}

/// Flattened-map MLP critic conditioned by concatenating the sentence
/// vector; three affine layers.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub mlp: MlpParams,
    pub map_channels: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub text_dim: usize,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorVars {
    pub mlp: MlpVars,
}

impl Discriminator {
    pub fn new(
        map_channels: usize,
        map_h: usize,
        map_w: usize,
        text_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let in_dim = map_channels * map_h * map_w + text_dim;
        Ok(Self {
            mlp: MlpParams::new(&[in_dim, hidden, hidden, 1], &mut rng)?,
            map_channels,
            map_h,
            map_w,
            text_dim,
        })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            mlp: self.mlp.register(tape, trainable),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.mlp.params_mut()
    }

    pub fn grads(&self, tape: &Tape, vars: &DiscriminatorVars) -> Vec<Matrix> {
        self.mlp.grads(tape, &vars.mlp)
    }

    /// Score a C×(H·W) map node conditioned on a sentence column node.
    pub fn score_tape(
        &self,
        tape: &mut Tape,
        vars: &DiscriminatorVars,
        fmap: Var,
        sentence: Var,
    ) -> Result<Var> {
        let (c, p) = tape.value(fmap).shape();
        if c != self.map_channels || p != self.map_h * self.map_w {
            return Err(Error::DimMismatch(format!(
                "discriminator expects {}x{} map, got {c}x{p}",
                self.map_channels,
                self.map_h * self.map_w
            )));
        }
        let flat = tape.reshape(fmap, c * p, 1)?;
        let joined = tape.concat_rows(flat, sentence)?;
        self.mlp.forward_tape(tape, &vars.mlp, joined)
    }

    pub fn score(&self, fmap: &FeatureMap, sentence: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let f = tape.constant(fmap.to_matrix());
        let s = tape.constant(Matrix::column(sentence.to_vec())?);
        let out = self.score_tape(&mut tape, &vars, f, s)?;
        Ok(tape.value(out).scalar_value())
    }
}

/// Hinge adversarial losses from per-sample critic scores.
///
/// L_D = −E[min(0, −1+D(x,e))] − ½E[min(0, −1−D(G(z),e))] − ½E[min(0, −1−D(x,ê))]
/// L_G = −E[D(G(z), e)]
pub fn gan_losses(d_real: &[f64], d_fake: &[f64], d_mismatch: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() || d_mismatch.is_empty() {
        return Err(Error::EmptyInput("gan_losses score batch".into()));
    }
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| {
        xs.iter().map(|&v| f(v)).sum::<f64>() / xs.len() as f64
    };
    let real = -mean(d_real, &|d| (-1.0 + d).min(0.0));
    let fake = -0.5 * mean(d_fake, &|d| (-1.0 - d).min(0.0));
    let mism = -0.5 * mean(d_mismatch, &|d| (-1.0 - d).min(0.0));
    let l_d = real + fake + mism;
    let l_g = -mean(d_fake, &|d| d);
    Ok((l_d, l_g))
}

/// Tape version over scalar score nodes; returns (L_D, L_G).
pub fn gan_losses_tape(
    tape: &mut Tape,
    d_real: &[Var],
    d_fake: &[Var],
    d_mismatch: &[Var],
) -> Result<(Var, Var)> {
    if d_real.is_empty() || d_fake.is_empty() || d_mismatch.is_empty() {
        return Err(Error::EmptyInput("gan_losses score batch".into()));
    }
    let hinge_mean = |tape: &mut Tape, scores: &[Var], sign: f64| -> Result<Var> {
        let mut terms = Vec::with_capacity(scores.len());
        for &s in scores {
            let signed = tape.scale(s, sign);
            let shifted = tape.add_const(signed, -1.0);
            let h = tape.min_zero(shifted);
            terms.push(h);
        }
        let m = tape.mean_of(&terms)?;
        Ok(tape.neg(m))
    };
    let real = hinge_mean(tape, d_real, 1.0)?;
    let fake = hinge_mean(tape, d_fake, -1.0)?;
    let mism = hinge_mean(tape, d_mismatch, -1.0)?;
    let fake_half = tape.scale(fake, 0.5);
    let mism_half = tape.scale(mism, 0.5);
    let partial = tape.add(real, fake_half)?;
    let l_d = tape.add(partial, mism_half)?;

    let fake_mean = tape.mean_of(d_fake)?;
    let l_g = tape.neg(fake_mean);
    Ok((l_d, l_g))
}

/// One synthesized sample tagged with its leaf class and taxonomy path.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub class: String,
    pub path: Vec<String>,
    pub map: FeatureMap,
}

/// Draws `count` samples per class from the generator, seeded; classes are
/// processed in the given order so output is reproducible.
pub fn synthesize_unseen(
    generator: &Generator,
    encoded: &[(String, Matrix, Vec<f64>)], // (leaf class, word matrix, sentence)
    count: usize,
    seed: u64,
    tree: &TaxonomyTree,
) -> Result<Vec<SynthSample>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(encoded.len() * count);
    for (class, words, sentence) in encoded {
        let leaf = tree
            .leaf(class)
            .map_err(|_| Error::UnknownClass(class.clone()))?;
        let path: Vec<String> = tree
            .path(&tree.node(leaf).name)?
            .iter()
            .map(|id| tree.node(*id).name.clone())
            .collect();
        for _ in 0..count {
            let z = rng.normal_vec(generator.config.noise_dim);
            let map = generator.generate(&z, words, sentence)?;
            out.push(SynthSample {
                class: class.clone(),
                path: path.clone(),
                map,
            });
        }
    }
    Ok(out)
}
