//! Fusion blocks: channel affines predicted from the sentence vector and
//! from attention-weighted word vectors, stacked around a bilinear
//! upsample with a residual link.

use super::FeatureMap;
use crate::alignment::{attention_tape, AttentionMode};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, MlpParams, MlpVars, Rng, Tape, Var};

/// The four conditioning MLPs of one fusion sub-block: sentence scale/shift
/// and word scale/shift, all mapping into the block's channel count.
#[derive(Debug, Clone)]
pub struct FusionMlps {
    pub gamma_s: MlpParams,
    pub theta_s: MlpParams,
    pub gamma_w: MlpParams,
    pub theta_w: MlpParams,
}

#[derive(Debug, Clone)]
pub struct FusionMlpVars {
    pub gamma_s: MlpVars,
    pub theta_s: MlpVars,
    pub gamma_w: MlpVars,
    pub theta_w: MlpVars,
}

impl FusionMlps {
    pub fn new(text_dim: usize, channels: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let dims = [text_dim, hidden, channels];
        Ok(Self {
            gamma_s: MlpParams::new(&dims, rng)?,
            theta_s: MlpParams::new(&dims, rng)?,
            gamma_w: MlpParams::new(&dims, rng)?,
            theta_w: MlpParams::new(&dims, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma_s.output_dim()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> FusionMlpVars {
        FusionMlpVars {
            gamma_s: self.gamma_s.register(tape, trainable),
            theta_s: self.theta_s.register(tape, trainable),
            gamma_w: self.gamma_w.register(tape, trainable),
            theta_w: self.theta_w.register(tape, trainable),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.gamma_s.params_mut();
        out.extend(self.theta_s.params_mut());
        out.extend(self.gamma_w.params_mut());
        out.extend(self.theta_w.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = self.gamma_s.params();
        out.extend(self.theta_s.params());
        out.extend(self.gamma_w.params());
        out.extend(self.theta_w.params());
        out
    }

    pub fn grads(&self, tape: &Tape, vars: &FusionMlpVars) -> Vec<Matrix> {
        let mut out = self.gamma_s.grads(tape, &vars.gamma_s);
        out.extend(self.theta_s.grads(tape, &vars.theta_s));
        out.extend(self.gamma_w.grads(tape, &vars.gamma_w));
        out.extend(self.theta_w.grads(tape, &vars.theta_w));
        out
    }
}

/// One upsampling block: two fusion sub-blocks and a residual link around
/// the doubled-resolution map.
#[derive(Debug, Clone)]
pub struct MsaBlockParams {
    pub fuse: [FusionMlps; 2],
}

#[derive(Debug, Clone)]
pub struct MsaBlockVars {
    pub fuse: [FusionMlpVars; 2],
}

impl MsaBlockParams {
    pub fn new(text_dim: usize, channels: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            fuse: [
                FusionMlps::new(text_dim, channels, hidden, rng)?,
                FusionMlps::new(text_dim, channels, hidden, rng)?,
            ],
        })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> MsaBlockVars {
        MsaBlockVars {
            fuse: [
                self.fuse[0].register(tape, trainable),
                self.fuse[1].register(tape, trainable),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let [a, b] = &mut self.fuse;
        let mut out = a.params_mut();
        out.extend(b.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = self.fuse[0].params();
        out.extend(self.fuse[1].params());
        out
    }

    pub fn grads(&self, tape: &Tape, vars: &MsaBlockVars) -> Vec<Matrix> {
        let mut out = self.fuse[0].grads(tape, &vars.fuse[0]);
        out.extend(self.fuse[1].grads(tape, &vars.fuse[1]));
        out
    }
}

/// out[c,·] = γ[c]·f[c,·] + θ[c] with γ, θ predicted from the sentence.
pub fn sentence_affine_tape(
    tape: &mut Tape,
    mlps: &FusionMlps,
    vars: &FusionMlpVars,
    sentence: Var,
    fmap: Var,
) -> Result<Var> {
    let gamma = mlps.gamma_s.forward_tape(tape, &vars.gamma_s, sentence)?;
    let theta = mlps.theta_s.forward_tape(tape, &vars.theta_s, sentence)?;
    if tape.value(gamma).rows() != tape.value(fmap).rows() {
        return Err(Error::DimMismatch(format!(
            "sentence affine: {} channels predicted for a {}-channel map",
            tape.value(gamma).rows(),
            tape.value(fmap).rows()
        )));
    }
    let scaled = tape.mul_col_broadcast(fmap, gamma)?;
    tape.add_col_broadcast(scaled, theta)
}

/// Word-level affine: per-word scale/shift predictions weighted by the
/// relevance of each word to the map's region-context vector. Zero-norm
/// context columns contribute weight 0.
pub fn word_affine_tape(
    tape: &mut Tape,
    mlps: &FusionMlps,
    vars: &FusionMlpVars,
    words: Var,
    fmap: Var,
    mode: AttentionMode,
) -> Result<Var> {
    let n_text = tape.value(words).cols();
    // Zero word vectors are malformed conditioning input.
    for j in 0..n_text {
        if crate::numerics::norm(&tape.value(words).col(j)) < crate::numerics::ZERO_NORM_TOL {
            return Err(Error::ZeroNorm(format!("word vector {j}")));
        }
    }
    let (_, context) = attention_tape(tape, words, fmap, mode)?;
    let rel = tape.cosine_cols(context, words, true)?; // 1×N_text

    let mut gamma: Option<Var> = None;
    let mut theta: Option<Var> = None;
    for i in 0..n_text {
        let word = tape.col(words, i)?;
        let w_rel = tape.entry(rel, 0, i)?;
        let g_i = mlps.gamma_w.forward_tape(tape, &vars.gamma_w, word)?;
        let t_i = mlps.theta_w.forward_tape(tape, &vars.theta_w, word)?;
        let g_i = tape.mul_scalar(g_i, w_rel)?;
        let t_i = tape.mul_scalar(t_i, w_rel)?;
        gamma = Some(match gamma {
            Some(acc) => tape.add(acc, g_i)?,
            None => g_i,
        });
        theta = Some(match theta {
            Some(acc) => tape.add(acc, t_i)?,
            None => t_i,
        });
    }
    let gamma = gamma.expect("n_text >= 1 by matrix invariants");
    let theta = theta.expect("n_text >= 1 by matrix invariants");
    if tape.value(gamma).rows() != tape.value(fmap).rows() {
        return Err(Error::DimMismatch(format!(
            "word affine: {} channels predicted for a {}-channel map",
            tape.value(gamma).rows(),
            tape.value(fmap).rows()
        )));
    }
    let scaled = tape.mul_col_broadcast(fmap, gamma)?;
    tape.add_col_broadcast(scaled, theta)
}

fn fuse_tape(
    tape: &mut Tape,
    mlps: &FusionMlps,
    vars: &FusionMlpVars,
    words: Var,
    sentence: Var,
    fmap: Var,
    mode: AttentionMode,
) -> Result<Var> {
    let h = sentence_affine_tape(tape, mlps, vars, sentence, fmap)?;
    let h = tape.relu(h);
    let h = word_affine_tape(tape, mlps, vars, words, h, mode)?;
    Ok(tape.relu(h))
}

/// Upsample ×2, run both fusion sub-blocks, add the residual. The map is a
/// C×(H·W) matrix node; returns the node plus the doubled (h, w).
pub fn msa_block_tape(
    tape: &mut Tape,
    params: &MsaBlockParams,
    vars: &MsaBlockVars,
    words: Var,
    sentence: Var,
    fmap: Var,
    h: usize,
    w: usize,
    mode: AttentionMode,
) -> Result<(Var, usize, usize)> {
    let up = tape.upsample2x(fmap, h, w)?;
    let (h2, w2) = (2 * h, 2 * w);
    let f1 = fuse_tape(tape, &params.fuse[0], &vars.fuse[0], words, sentence, up, mode)?;
    let f2 = fuse_tape(tape, &params.fuse[1], &vars.fuse[1], words, sentence, f1, mode)?;
    let out = tape.add(f2, up)?;
    Ok((out, h2, w2))
}

// ---- plain wrappers ------------------------------------------------------

/// Plain sentence-level affine on a feature map.
pub fn sentence_affine(mlps: &FusionMlps, sentence: &[f64], fmap: &FeatureMap) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let vars = mlps.register(&mut tape, false);
    let s = tape.constant(Matrix::column(sentence.to_vec())?);
    let f = tape.constant(fmap.to_matrix());
    let out = sentence_affine_tape(&mut tape, mlps, &vars, s, f)?;
    FeatureMap::from_matrix(tape.value(out), fmap.height, fmap.width)
}

/// Plain word-level affine on a feature map.
pub fn word_affine(
    mlps: &FusionMlps,
    words: &Matrix,
    fmap: &FeatureMap,
    mode: AttentionMode,
) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let vars = mlps.register(&mut tape, false);
    let e = tape.constant(words.clone());
    let f = tape.constant(fmap.to_matrix());
    let out = word_affine_tape(&mut tape, mlps, &vars, e, f, mode)?;
    FeatureMap::from_matrix(tape.value(out), fmap.height, fmap.width)
}

/// Plain full block forward.
pub fn msa_block(
    params: &MsaBlockParams,
    words: &Matrix,
    sentence: &[f64],
    fmap: &FeatureMap,
    mode: AttentionMode,
) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let e = tape.constant(words.clone());
    let s = tape.constant(Matrix::column(sentence.to_vec())?);
    let f = tape.constant(fmap.to_matrix());
    let (out, h2, w2) = msa_block_tape(
        &mut tape, params, &vars, e, s, f, fmap.height, fmap.width, mode,
    )?;
    FeatureMap::from_matrix(tape.value(out), h2, w2)
}
