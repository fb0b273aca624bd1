//! Two-stage fusion of slice BEV features.
//!
//! Stage 1 merges a stack of per-slice grids (J x C x He x We) into one
//! C x He x We map with an SE residual block: the stack is viewed as a
//! (J*C)-channel image; a sigmoid gate computed from globally pooled
//! statistics reweights those channels before a 1x1 convolution, while an
//! ungated 3x3 convolution forms the residual branch, and the two are
//! summed. Stage 2 merges the fused global and local maps with a dual-branch
//! single-head cross-attention transformer (G2L: local queries against
//! global keys/values; L2G the reverse) whose branch outputs are summed.

use crate::tensor::{Tape, Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("stack (J={j}, C={c}) does not match params sized for (J={pj}, C={pc})")]
    ParamMismatch {
        j: usize,
        c: usize,
        pj: usize,
        pc: usize,
    },
    #[error("stack must be rank 4 (J x C x He x We), got {0:?}")]
    BadStack(Vec<usize>),
    #[error("global stack must have exactly 3 slices, got {0}")]
    GlobalCount(usize),
    #[error("feature maps differ: {0:?} vs {1:?}")]
    FeatureMismatch(Vec<usize>, Vec<usize>),
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(data, shape).expect("init shape")
}

/// Parameters of one SE residual fusion block for a J-slice stack of
/// C-channel grids.
#[derive(Debug, Clone)]
pub struct SeFusionParams {
    /// 1x1 conv reducing J*C channels to C (gated branch).
    pub w1: Tensor,
    pub b1: Tensor,
    /// Full-width gate projection (J*C -> J*C).
    pub w_gate: Tensor,
    pub b_gate: Tensor,
    /// 3x3 conv reducing J*C channels to C (residual branch).
    pub w2: Tensor,
    pub b2: Tensor,
}

impl SeFusionParams {
    pub fn init(j: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let jc = j * c;
        SeFusionParams {
            w1: uniform_tensor(rng, &[c, jc, 1, 1], jc),
            b1: Tensor::zeros(&[c]),
            w_gate: uniform_tensor(rng, &[jc, jc], jc),
            b_gate: Tensor::zeros(&[jc]),
            w2: uniform_tensor(rng, &[c, jc, 3, 3], jc * 9),
            b2: Tensor::zeros(&[c]),
        }
    }

    /// (J, C) this parameter set was built for.
    pub fn dims(&self) -> (usize, usize) {
        let c = self.w1.shape()[0];
        (self.w1.shape()[1] / c, c)
    }

    /// Copy whose tensors are gradient-enabled leaves of `tape`.
    pub fn tracked(&self, tape: &mut Tape) -> Self {
        SeFusionParams {
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w_gate: tape.leaf(&self.w_gate),
            b_gate: tape.leaf(&self.b_gate),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w_gate", &self.w_gate),
            ("b_gate", &self.b_gate),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w_gate", &mut self.w_gate),
            ("b_gate", &mut self.b_gate),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// Query/key/value/output projections of one attention branch, all C -> C
/// with bias.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionParams {
    pub fn init(c: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            wq: uniform_tensor(rng, &[c, c], c),
            bq: Tensor::zeros(&[c]),
            wk: uniform_tensor(rng, &[c, c], c),
            bk: Tensor::zeros(&[c]),
            wv: uniform_tensor(rng, &[c, c], c),
            bv: Tensor::zeros(&[c]),
            wo: uniform_tensor(rng, &[c, c], c),
            bo: Tensor::zeros(&[c]),
        }
    }

    pub fn tracked(&self, tape: &mut Tape) -> Self {
        AttentionParams {
            wq: tape.leaf(&self.wq),
            bq: tape.leaf(&self.bq),
            wk: tape.leaf(&self.wk),
            bk: tape.leaf(&self.bk),
            wv: tape.leaf(&self.wv),
            bv: tape.leaf(&self.bv),
            wo: tape.leaf(&self.wo),
            bo: tape.leaf(&self.bo),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ]
    }
}

/// Both branches of the stage-2 transformer. G2L attends local queries to
/// global keys/values; L2G the reverse.
#[derive(Debug, Clone)]
pub struct DualBranchParams {
    pub g2l: AttentionParams,
    pub l2g: AttentionParams,
}

impl DualBranchParams {
    pub fn init(c: usize, rng: &mut ChaCha8Rng) -> Self {
        DualBranchParams {
            g2l: AttentionParams::init(c, rng),
            l2g: AttentionParams::init(c, rng),
        }
    }

    pub fn tracked(&self, tape: &mut Tape) -> Self {
        DualBranchParams {
            g2l: self.g2l.tracked(tape),
            l2g: self.l2g.tracked(tape),
        }
    }
}

fn stack_dims(stack: &Tensor) -> Result<(usize, usize, usize, usize), FusionError> {
    let s = stack.shape();
    if s.len() != 4 {
        return Err(FusionError::BadStack(s.to_vec()));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// SE residual fusion of a J x C x He x We stack into C x He x We.
pub fn se_fuse(tape: &mut Tape, stack: &Tensor, p: &SeFusionParams) -> Result<Tensor, FusionError> {
    let (j, c, he, we) = stack_dims(stack)?;
    let (pj, pc) = p.dims();
    if (pj, pc) != (j, c) {
        return Err(FusionError::ParamMismatch {
            j,
            c,
            pj,
            pc,
        });
    }
    let jc = j * c;
    let x = tape.reshape(stack, &[jc, he, we])?;

    // Gate: sigmoid of a projection of the globally pooled channel stats.
    let pooled = tape.global_avg_pool(&x)?;
    let pooled_col = tape.reshape(&pooled, &[jc, 1])?;
    let projected = tape.matmul(&p.w_gate, &pooled_col)?;
    let projected = tape.reshape(&projected, &[jc])?;
    let gate = tape.add(&projected, &p.b_gate)?;
    let gate = tape.sigmoid(&gate);

    let gated = tape.channel_scale(&x, &gate)?;
    let reduced = tape.conv2d(&gated, &p.w1, &p.b1)?;
    // Residual branch consumes the ungated stack.
    let residual = tape.conv2d(&x, &p.w2, &p.b2)?;
    Ok(tape.add(&reduced, &residual)?)
}

// Intermediates are only inspected by the invariant tests.
#[cfg_attr(not(test), allow(dead_code))]
struct AttentionTrace {
    /// Row-stochastic attention matrix, N x N.
    attn: Tensor,
    /// Attention-mixed value tokens before the output projection, N x C.
    mixed: Tensor,
    /// Projected value tokens, N x C.
    values: Tensor,
    output: Tensor,
}

fn cross_attention_trace(
    tape: &mut Tape,
    q_feat: &Tensor,
    kv_feat: &Tensor,
    p: &AttentionParams,
) -> Result<AttentionTrace, FusionError> {
    if q_feat.shape() != kv_feat.shape() {
        return Err(FusionError::FeatureMismatch(
            q_feat.shape().to_vec(),
            kv_feat.shape().to_vec(),
        ));
    }
    let s = q_feat.shape();
    if s.len() != 3 {
        return Err(FusionError::BadStack(s.to_vec()));
    }
    let (c, he, we) = (s[0], s[1], s[2]);
    let n = he * we;

    let tokens = |tape: &mut Tape, feat: &Tensor| -> Result<Tensor, TensorError> {
        let flat = tape.reshape(feat, &[c, n])?;
        tape.transpose(&flat)
    };
    let project = |tape: &mut Tape, t: &Tensor, w: &Tensor, b: &Tensor| -> Result<Tensor, TensorError> {
        let p = tape.matmul(t, w)?;
        tape.add_bias(&p, b)
    };

    let q_tokens = tokens(tape, q_feat)?;
    let kv_tokens = tokens(tape, kv_feat)?;
    let q = project(tape, &q_tokens, &p.wq, &p.bq)?;
    let k = project(tape, &kv_tokens, &p.wk, &p.bk)?;
    let v = project(tape, &kv_tokens, &p.wv, &p.bv)?;

    let kt = tape.transpose(&k)?;
    let scores = tape.matmul(&q, &kt)?;
    let scores = tape.scale(&scores, 1.0 / (c as f64).sqrt());
    let attn = tape.softmax(&scores, 1)?;
    let mixed = tape.matmul(&attn, &v)?;
    let out_tokens = project(tape, &mixed, &p.wo, &p.bo)?;
    let out_flat = tape.transpose(&out_tokens)?;
    let output = tape.reshape(&out_flat, &[c, he, we])?;
    Ok(AttentionTrace {
        attn,
        mixed,
        values: v,
        output,
    })
}

/// Single-head scaled dot-product cross-attention over BEV tokens. Both
/// feature maps are flattened to He*We tokens of width C; queries come from
/// `q_feat`, keys and values from `kv_feat`.
pub fn cross_attention(
    tape: &mut Tape,
    q_feat: &Tensor,
    kv_feat: &Tensor,
    p: &AttentionParams,
) -> Result<Tensor, FusionError> {
    Ok(cross_attention_trace(tape, q_feat, kv_feat, p)?.output)
}

/// Stage-2 fusion: sum of the G2L branch (local queries, global keys/values)
/// and the L2G branch (global queries, local keys/values).
pub fn dual_branch_fuse(
    tape: &mut Tape,
    b_global: &Tensor,
    b_local: &Tensor,
    p: &DualBranchParams,
) -> Result<Tensor, FusionError> {
    let g2l = cross_attention(tape, b_local, b_global, &p.g2l)?;
    let l2g = cross_attention(tape, b_global, b_local, &p.l2g)?;
    Ok(tape.add(&g2l, &l2g)?)
}

/// All parameters of the two-stage fusion pipeline.
#[derive(Debug, Clone)]
pub struct FusePipelineParams {
    pub se_global: SeFusionParams,
    pub se_local: SeFusionParams,
    pub dual: DualBranchParams,
}

impl FusePipelineParams {
    /// `j_local` local slices, 3 global slices, C channels.
    pub fn init(j_local: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        FusePipelineParams {
            se_global: SeFusionParams::init(3, c, rng),
            se_local: SeFusionParams::init(j_local, c, rng),
            dual: DualBranchParams::init(c, rng),
        }
    }

    pub fn tracked(&self, tape: &mut Tape) -> Self {
        FusePipelineParams {
            se_global: self.se_global.tracked(tape),
            se_local: self.se_local.tracked(tape),
            dual: self.dual.tracked(tape),
        }
    }
}

/// Full two-stage fusion: SE-fuse the 3-slice global stack and the J-slice
/// local stack separately, then merge with the dual-branch transformer.
pub fn fuse_pipeline(
    tape: &mut Tape,
    global_stack: &Tensor,
    local_stack: &Tensor,
    p: &FusePipelineParams,
) -> Result<Tensor, FusionError> {
    let (jg, ..) = stack_dims(global_stack)?;
    if jg != 3 {
        return Err(FusionError::GlobalCount(jg));
    }
    let b_global = se_fuse(tape, global_stack, &p.se_global)?;
    let b_local = se_fuse(tape, local_stack, &p.se_local)?;
    dual_branch_fuse(tape, &b_global, &b_local, &p.dual)
}
