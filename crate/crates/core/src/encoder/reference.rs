//! Reference transformer encoder with explicit forward and backward passes.
//!
//! A pre-norm encoder stack over token + position embeddings, followed by a
//! final LayerNorm and an untied masked-LM head. Everything runs in `f64`
//! on a single flat parameter vector addressed through a named tensor
//! layout, which keeps the optimizer, finite-difference checks, and
//! checkpointing trivially in sync. There is no dropout or other run-time
//! stochasticity: outputs depend only on parameters and input ids.
//!
//! The feed-forward activation is the tanh approximation of GELU, chosen
//! because it is smooth everywhere and therefore friendly to central
//! finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::softmax;

use super::{EncoderModel, PooledVector, VocabDistribution};

/// LayerNorm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

const INIT_STD: f64 = 0.02;
const GELU_C: f64 = 0.044715;

/// Architecture hyperparameters; `seed` fixes the initialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ReferenceEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            ff_dim: 256,
            max_positions: 512,
            vocab_size: 0,
            seed: 0,
        }
    }
}

impl ReferenceEncoderConfig {
    fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.heads == 0
            || self.dim == 0
            || self.ff_dim == 0
            || self.max_positions == 0
            || self.vocab_size == 0
        {
            return Err(Error::InvalidParameter(
                "encoder config dimensions must all be positive".into(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "hidden dim {} is not divisible by head count {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// One named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// Per-layer parameter offsets into the flat vector.
#[derive(Debug, Clone)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    final_g: usize,
    final_b: usize,
    mlm_w: usize,
    mlm_b: usize,
    total: usize,
    specs: Vec<TensorSpec>,
}

impl Layout {
    fn build(cfg: &ReferenceEncoderConfig) -> Self {
        let (d, f, v, p) = (cfg.dim, cfg.ff_dim, cfg.vocab_size, cfg.max_positions);
        let mut specs = Vec::new();
        let mut cursor = 0usize;
        let mut push = |specs: &mut Vec<TensorSpec>, name: String, shape: Vec<usize>| {
            let offset = cursor;
            cursor += shape.iter().product::<usize>();
            specs.push(TensorSpec { name, shape, offset });
            offset
        };

        let tok_emb = push(&mut specs, "tok_emb".into(), vec![v, d]);
        let pos_emb = push(&mut specs, "pos_emb".into(), vec![p, d]);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let pre = format!("layer{l}");
            layers.push(LayerOffsets {
                ln1_g: push(&mut specs, format!("{pre}.ln1.gamma"), vec![d]),
                ln1_b: push(&mut specs, format!("{pre}.ln1.beta"), vec![d]),
                wq: push(&mut specs, format!("{pre}.attn.wq"), vec![d, d]),
                bq: push(&mut specs, format!("{pre}.attn.bq"), vec![d]),
                wk: push(&mut specs, format!("{pre}.attn.wk"), vec![d, d]),
                bk: push(&mut specs, format!("{pre}.attn.bk"), vec![d]),
                wv: push(&mut specs, format!("{pre}.attn.wv"), vec![d, d]),
                bv: push(&mut specs, format!("{pre}.attn.bv"), vec![d]),
                wo: push(&mut specs, format!("{pre}.attn.wo"), vec![d, d]),
                bo: push(&mut specs, format!("{pre}.attn.bo"), vec![d]),
                ln2_g: push(&mut specs, format!("{pre}.ln2.gamma"), vec![d]),
                ln2_b: push(&mut specs, format!("{pre}.ln2.beta"), vec![d]),
                w1: push(&mut specs, format!("{pre}.ffn.w1"), vec![f, d]),
                b1: push(&mut specs, format!("{pre}.ffn.b1"), vec![f]),
                w2: push(&mut specs, format!("{pre}.ffn.w2"), vec![d, f]),
                b2: push(&mut specs, format!("{pre}.ffn.b2"), vec![d]),
            });
        }
        let final_g = push(&mut specs, "final_ln.gamma".into(), vec![d]);
        let final_b = push(&mut specs, "final_ln.beta".into(), vec![d]);
        let mlm_w = push(&mut specs, "mlm.weight".into(), vec![v, d]);
        let mlm_b = push(&mut specs, "mlm.bias".into(), vec![v]);

        Self {
            tok_emb,
            pos_emb,
            layers,
            final_g,
            final_b,
            mlm_w,
            mlm_b,
            total: cursor,
            specs,
        }
    }
}

// Cached activations for one layer, kept for the backward pass.
struct LayerCache {
    xhat1: Vec<Vec<f64>>,
    istd1: Vec<f64>,
    h1: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    probs: Vec<Vec<Vec<f64>>>, // [head][query][key]
    ctx: Vec<Vec<f64>>,
    xhat2: Vec<Vec<f64>>,
    istd2: Vec<f64>,
    h2: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
}

/// Activations of one forward pass; feed back into
/// [`ReferenceEncoder::backward`] to get parameter gradients.
pub struct ForwardPass {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    xhatf: Vec<Vec<f64>>,
    istdf: Vec<f64>,
    final_states: Vec<Vec<f64>>,
}

impl ForwardPass {
    /// Post-LayerNorm hidden state per input position.
    pub fn final_states(&self) -> &[Vec<f64>] {
        &self.final_states
    }

    /// First-position hidden state.
    pub fn pooled(&self) -> &[f64] {
        &self.final_states[0]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The trainable reference encoder.
#[derive(Debug)]
pub struct ReferenceEncoder {
    config: ReferenceEncoderConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl ReferenceEncoder {
    /// Build with seeded random weights: N(0, 0.02) matrices and
    /// embeddings, zero biases, identity LayerNorms.
    pub fn new(config: ReferenceEncoderConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid stddev");
        for spec in &layout.specs {
            let slice = &mut params[spec.offset..spec.offset + spec.len()];
            if spec.name.ends_with("gamma") {
                slice.fill(1.0);
            } else if spec.shape.len() == 2 {
                for p in slice {
                    *p = normal.sample(&mut rng);
                }
            }
            // 1-D non-gamma tensors (biases, betas) stay zero.
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ReferenceEncoderConfig {
        &self.config
    }

    /// Named views into the flat parameter vector.
    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout.specs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::InvalidParameter("empty input sequence".into()));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::OversizeInput {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::VocabId {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    // ---- forward ----------------------------------------------------

    /// Run the full stack, caching activations for `backward`.
    pub fn forward(&self, ids: &[u32]) -> Result<ForwardPass> {
        self.check_ids(ids)?;
        let d = self.config.dim;
        let ff = self.config.ff_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = ids.len();
        let p = &self.params;

        // Token + position embeddings.
        let mut x: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (pos, &id) in ids.iter().enumerate() {
            let t = self.layout.tok_emb + id as usize * d;
            let e = self.layout.pos_emb + pos * d;
            x.push((0..d).map(|j| p[t + j] + p[e + j]).collect());
        }

        let mut layer_caches = Vec::with_capacity(self.config.layers);
        for off in &self.layout.layers {
            // Pre-norm self-attention block.
            let mut xhat1 = Vec::with_capacity(n);
            let mut istd1 = Vec::with_capacity(n);
            let mut h1 = Vec::with_capacity(n);
            for row in &x {
                let (y, xh, istd) =
                    ln_forward(row, &p[off.ln1_g..off.ln1_g + d], &p[off.ln1_b..off.ln1_b + d]);
                h1.push(y);
                xhat1.push(xh);
                istd1.push(istd);
            }
            let q: Vec<Vec<f64>> =
                h1.iter().map(|h| linear(p, off.wq, off.bq, h, d, d)).collect();
            let k: Vec<Vec<f64>> =
                h1.iter().map(|h| linear(p, off.wk, off.bk, h, d, d)).collect();
            let v: Vec<Vec<f64>> =
                h1.iter().map(|h| linear(p, off.wv, off.bv, h, d, d)).collect();

            let mut probs = vec![vec![Vec::new(); n]; heads];
            let mut ctx = vec![vec![0.0; d]; n];
            for head in 0..heads {
                let lo = head * dh;
                for i in 0..n {
                    let scores: Vec<f64> = (0..n)
                        .map(|j| {
                            (0..dh).map(|t| q[i][lo + t] * k[j][lo + t]).sum::<f64>() * scale
                        })
                        .collect();
                    let pr = softmax(&scores);
                    for (j, &pj) in pr.iter().enumerate() {
                        for t in 0..dh {
                            ctx[i][lo + t] += pj * v[j][lo + t];
                        }
                    }
                    probs[head][i] = pr;
                }
            }
            for (row, c) in x.iter_mut().zip(&ctx) {
                let out = linear(p, off.wo, off.bo, c, d, d);
                for (xv, ov) in row.iter_mut().zip(&out) {
                    *xv += ov;
                }
            }

            // Pre-norm feed-forward block.
            let mut xhat2 = Vec::with_capacity(n);
            let mut istd2 = Vec::with_capacity(n);
            let mut h2 = Vec::with_capacity(n);
            for row in &x {
                let (y, xh, istd) =
                    ln_forward(row, &p[off.ln2_g..off.ln2_g + d], &p[off.ln2_b..off.ln2_b + d]);
                h2.push(y);
                xhat2.push(xh);
                istd2.push(istd);
            }
            let a: Vec<Vec<f64>> =
                h2.iter().map(|h| linear(p, off.w1, off.b1, h, ff, d)).collect();
            let g: Vec<Vec<f64>> = a
                .iter()
                .map(|row| row.iter().map(|&t| gelu(t)).collect())
                .collect();
            for (row, gr) in x.iter_mut().zip(&g) {
                let out = linear(p, off.w2, off.b2, gr, d, ff);
                for (xv, ov) in row.iter_mut().zip(&out) {
                    *xv += ov;
                }
            }

            layer_caches.push(LayerCache {
                xhat1,
                istd1,
                h1,
                q,
                k,
                v,
                probs,
                ctx,
                xhat2,
                istd2,
                h2,
                a,
                g,
            });
        }

        // Final LayerNorm.
        let g_off = self.layout.final_g;
        let b_off = self.layout.final_b;
        let mut xhatf = Vec::with_capacity(n);
        let mut istdf = Vec::with_capacity(n);
        let mut final_states = Vec::with_capacity(n);
        for row in &x {
            let (y, xh, istd) = ln_forward(row, &p[g_off..g_off + d], &p[b_off..b_off + d]);
            final_states.push(y);
            xhatf.push(xh);
            istdf.push(istd);
        }

        Ok(ForwardPass {
            ids: ids.to_vec(),
            layers: layer_caches,
            xhatf,
            istdf,
            final_states,
        })
    }

    /// Masked-LM logits read off one position of a finished pass.
    pub fn mlm_logits(&self, pass: &ForwardPass, position: usize) -> Result<Vec<f64>> {
        if position >= pass.len() {
            return Err(Error::MaskPosition);
        }
        let v = self.config.vocab_size;
        let d = self.config.dim;
        Ok(linear(
            &self.params,
            self.layout.mlm_w,
            self.layout.mlm_b,
            &pass.final_states[position],
            v,
            d,
        ))
    }

    // ---- backward ---------------------------------------------------

    /// Accumulate parameter gradients for `d_final`, the loss gradient
    /// with respect to each row of `final_states`. `grads` must have
    /// `param_count()` entries and is added to, not overwritten.
    pub fn backward(&self, pass: &ForwardPass, d_final: &[Vec<f64>], grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        assert_eq!(d_final.len(), pass.len(), "one gradient row per position");
        let d = self.config.dim;
        let ff = self.config.ff_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = pass.len();
        let p = &self.params;

        // Final LayerNorm.
        let mut d_x: Vec<Vec<f64>> = Vec::with_capacity(n);
        {
            let g_off = self.layout.final_g;
            let b_off = self.layout.final_b;
            for i in 0..n {
                let dx = ln_backward(
                    &d_final[i],
                    &pass.xhatf[i],
                    pass.istdf[i],
                    &p[g_off..g_off + d],
                    grads,
                    g_off,
                    b_off,
                );
                d_x.push(dx);
            }
        }

        for (off, cache) in self.layout.layers.iter().zip(&pass.layers).rev() {
            // Feed-forward block backward.
            let mut d_h2 = vec![vec![0.0; d]; n];
            for i in 0..n {
                // d_x[i] is the gradient at the block output; the residual
                // passes it through unchanged, the branch adds more below.
                let d_f = d_x[i].clone();
                let mut d_g = vec![0.0; ff];
                linear_backward(p, off.w2, &cache.g[i], &d_f, grads, off.w2, off.b2, &mut d_g, d, ff);
                let d_a: Vec<f64> = d_g
                    .iter()
                    .zip(&cache.a[i])
                    .map(|(&dg, &av)| dg * gelu_prime(av))
                    .collect();
                linear_backward(
                    p, off.w1, &cache.h2[i], &d_a, grads, off.w1, off.b1, &mut d_h2[i], ff, d,
                );
            }
            for i in 0..n {
                let dx = ln_backward(
                    &d_h2[i],
                    &cache.xhat2[i],
                    cache.istd2[i],
                    &p[off.ln2_g..off.ln2_g + d],
                    grads,
                    off.ln2_g,
                    off.ln2_b,
                );
                for (acc, v) in d_x[i].iter_mut().zip(dx) {
                    *acc += v;
                }
            }

            // Attention block backward.
            let mut d_ctx = vec![vec![0.0; d]; n];
            for i in 0..n {
                let d_out = d_x[i].clone();
                linear_backward(
                    p, off.wo, &cache.ctx[i], &d_out, grads, off.wo, off.bo, &mut d_ctx[i], d, d,
                );
            }
            let mut d_q = vec![vec![0.0; d]; n];
            let mut d_k = vec![vec![0.0; d]; n];
            let mut d_v = vec![vec![0.0; d]; n];
            for head in 0..heads {
                let lo = head * dh;
                for i in 0..n {
                    let pr = &cache.probs[head][i];
                    let d_pr: Vec<f64> = (0..n)
                        .map(|j| {
                            (0..dh)
                                .map(|t| d_ctx[i][lo + t] * cache.v[j][lo + t])
                                .sum::<f64>()
                        })
                        .collect();
                    for (j, &pj) in pr.iter().enumerate() {
                        for t in 0..dh {
                            d_v[j][lo + t] += pj * d_ctx[i][lo + t];
                        }
                    }
                    let dot: f64 = pr.iter().zip(&d_pr).map(|(&pj, &dj)| pj * dj).sum();
                    for j in 0..n {
                        let d_score = pr[j] * (d_pr[j] - dot) * scale;
                        for t in 0..dh {
                            d_q[i][lo + t] += d_score * cache.k[j][lo + t];
                            d_k[j][lo + t] += d_score * cache.q[i][lo + t];
                        }
                    }
                }
            }
            let mut d_h1 = vec![vec![0.0; d]; n];
            for i in 0..n {
                linear_backward(
                    p, off.wq, &cache.h1[i], &d_q[i], grads, off.wq, off.bq, &mut d_h1[i], d, d,
                );
                linear_backward(
                    p, off.wk, &cache.h1[i], &d_k[i], grads, off.wk, off.bk, &mut d_h1[i], d, d,
                );
                linear_backward(
                    p, off.wv, &cache.h1[i], &d_v[i], grads, off.wv, off.bv, &mut d_h1[i], d, d,
                );
            }
            for i in 0..n {
                let dx = ln_backward(
                    &d_h1[i],
                    &cache.xhat1[i],
                    cache.istd1[i],
                    &p[off.ln1_g..off.ln1_g + d],
                    grads,
                    off.ln1_g,
                    off.ln1_b,
                );
                for (acc, v) in d_x[i].iter_mut().zip(dx) {
                    *acc += v;
                }
            }
        }

        // Embedding tables.
        for (pos, &id) in pass.ids.iter().enumerate() {
            let t = self.layout.tok_emb + id as usize * d;
            let e = self.layout.pos_emb + pos * d;
            for j in 0..d {
                grads[t + j] += d_x[pos][j];
                grads[e + j] += d_x[pos][j];
            }
        }
    }

    /// Masked-LM cross-entropy over `targets` (position, gold id) pairs,
    /// averaged across targets; gradients accumulate into `grads`.
    pub fn mlm_step_loss(
        &self,
        ids: &[u32],
        targets: &[(usize, u32)],
        grads: &mut [f64],
    ) -> Result<f64> {
        if targets.is_empty() {
            return Err(Error::InvalidParameter("no masked-LM targets".into()));
        }
        let pass = self.forward(ids)?;
        let d = self.config.dim;
        let v = self.config.vocab_size;
        let inv = 1.0 / targets.len() as f64;
        let mut d_final = vec![vec![0.0; d]; pass.len()];
        let mut loss = 0.0;
        for &(pos, target) in targets {
            if pos >= pass.len() {
                return Err(Error::MaskPosition);
            }
            if target as usize >= v {
                return Err(Error::VocabId {
                    id: target,
                    vocab: v,
                });
            }
            let logits = self.mlm_logits(&pass, pos)?;
            let probs = softmax(&logits);
            loss -= probs[target as usize].max(1e-12).ln() * inv;
            let mut d_logits = probs;
            d_logits[target as usize] -= 1.0;
            for dl in &mut d_logits {
                *dl *= inv;
            }
            // Head gradients, then push back into the final states.
            let state = &pass.final_states[pos];
            for (o, &dl) in d_logits.iter().enumerate() {
                grads[self.layout.mlm_b + o] += dl;
                let w_row = self.layout.mlm_w + o * d;
                for j in 0..d {
                    grads[w_row + j] += dl * state[j];
                    d_final[pos][j] += dl * self.params[w_row + j];
                }
            }
        }
        self.backward(&pass, &d_final, grads);
        Ok(loss)
    }
}

impl EncoderModel for ReferenceEncoder {
    fn model_id(&self) -> String {
        let c = &self.config;
        format!(
            "refenc-l{}-h{}-d{}-f{}-v{}-s{}",
            c.layers, c.heads, c.dim, c.ff_dim, c.vocab_size, c.seed
        )
    }

    fn hidden_dim(&self) -> usize {
        self.config.dim
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_input_len(&self) -> usize {
        self.config.max_positions
    }

    fn encode(&self, token_ids: &[u32]) -> Result<PooledVector> {
        let pass = self.forward(token_ids)?;
        Ok(PooledVector {
            values: pass.pooled().to_vec(),
        })
    }

    fn mlm_distribution(
        &self,
        token_ids: &[u32],
        mask_position: usize,
    ) -> Result<VocabDistribution> {
        let pass = self.forward(token_ids)?;
        let logits = self.mlm_logits(&pass, mask_position)?;
        Ok(VocabDistribution {
            probs: softmax(&logits),
            instance_id: String::new(),
            model_id: self.model_id(),
        })
    }

    fn token_embedding(&self, token_id: u32) -> Result<Vec<f64>> {
        if token_id as usize >= self.config.vocab_size {
            return Err(Error::VocabId {
                id: token_id,
                vocab: self.config.vocab_size,
            });
        }
        let d = self.config.dim;
        let off = self.layout.tok_emb + token_id as usize * d;
        Ok(self.params[off..off + d].to_vec())
    }
}

// ---- primitive ops --------------------------------------------------

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x.powi(3));
    0.5 * x * (1.0 + u.tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_prime(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_C * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_C * x * x)
}

fn ln_forward(x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let istd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|&v| (v - mean) * istd).collect();
    let y = xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&xh, (&g, &b))| g * xh + b)
        .collect();
    (y, xhat, istd)
}

// Accumulates gamma/beta gradients at the given offsets, returns d_x.
fn ln_backward(
    d_y: &[f64],
    xhat: &[f64],
    istd: f64,
    gamma: &[f64],
    grads: &mut [f64],
    gamma_off: usize,
    beta_off: usize,
) -> Vec<f64> {
    let d = d_y.len() as f64;
    let mut g_mean = 0.0;
    let mut gx_mean = 0.0;
    let mut g = vec![0.0; d_y.len()];
    for i in 0..d_y.len() {
        grads[gamma_off + i] += d_y[i] * xhat[i];
        grads[beta_off + i] += d_y[i];
        g[i] = d_y[i] * gamma[i];
        g_mean += g[i];
        gx_mean += g[i] * xhat[i];
    }
    g_mean /= d;
    gx_mean /= d;
    g.iter()
        .zip(xhat)
        .map(|(&gi, &xh)| istd * (gi - g_mean - xh * gx_mean))
        .collect()
}

// y = W x + b with W row-major (out_dim x in_dim) at `w_off`.
fn linear(params: &[f64], w_off: usize, b_off: usize, x: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = w_off + o * in_dim;
        let mut acc = params[b_off + o];
        for i in 0..in_dim {
            acc += params[row + i] * x[i];
        }
        out.push(acc);
    }
    out
}

// Backward of `linear`: accumulates dW/db, adds W^T d_out into d_x.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    params: &[f64],
    w_off: usize,
    x: &[f64],
    d_out: &[f64],
    grads: &mut [f64],
    w_grad_off: usize,
    b_grad_off: usize,
    d_x: &mut [f64],
    out_dim: usize,
    in_dim: usize,
) {
    for o in 0..out_dim {
        let row = w_off + o * in_dim;
        let g_row = w_grad_off + o * in_dim;
        let d = d_out[o];
        grads[b_grad_off + o] += d;
        for i in 0..in_dim {
            grads[g_row + i] += d * x[i];
            d_x[i] += params[row + i] * d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn tiny_config() -> ReferenceEncoderConfig {
        ReferenceEncoderConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            ff_dim: 16,
            max_positions: 8,
            vocab_size: 12,
            seed: 7,
        }
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = ReferenceEncoder::new(tiny_config()).unwrap();
        let b = ReferenceEncoder::new(tiny_config()).unwrap();
        assert_eq!(a.params(), b.params());
        let mut other = tiny_config();
        other.seed = 8;
        let c = ReferenceEncoder::new(other).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn layout_covers_params_exactly() {
        let enc = ReferenceEncoder::new(tiny_config()).unwrap();
        let total: usize = enc.layout().iter().map(|s| s.len()).sum();
        assert_eq!(total, enc.param_count());
        // Contiguous, non-overlapping, in offset order.
        let mut cursor = 0;
        for spec in enc.layout() {
            assert_eq!(spec.offset, cursor);
            cursor += spec.len();
        }
    }

    #[test]
    fn encode_is_deterministic_and_order_sensitive() {
        let enc = ReferenceEncoder::new(tiny_config()).unwrap();
        let a = enc.encode(&[2, 5, 6, 3]).unwrap();
        let b = enc.encode(&[2, 5, 6, 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.len(), 8);
        let c = enc.encode(&[2, 6, 5, 3]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn input_validation_errors() {
        let enc = ReferenceEncoder::new(tiny_config()).unwrap();
        assert!(matches!(
            enc.encode(&[2, 99]),
            Err(crate::Error::VocabId { id: 99, vocab: 12 })
        ));
        assert!(matches!(
            enc.encode(&[1; 9]),
            Err(crate::Error::OversizeInput { len: 9, max: 8 })
        ));
        assert!(enc.encode(&[]).is_err());
        assert!(matches!(
            enc.mlm_distribution(&[1, 2], 2),
            Err(crate::Error::MaskPosition)
        ));
        let mut bad = tiny_config();
        bad.dim = 9; // not divisible by heads
        assert!(ReferenceEncoder::new(bad).is_err());
    }

    #[test]
    fn mlm_distribution_is_a_probability_vector() {
        let enc = ReferenceEncoder::new(tiny_config()).unwrap();
        let dist = enc.mlm_distribution(&[2, 4, 3], 1).unwrap();
        assert_eq!(dist.probs.len(), 12);
        assert!(dist.probs.iter().all(|&p| p > 0.0));
        assert_abs_diff_eq!(dist.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(dist.model_id.starts_with("refenc-"));
    }

    #[test]
    fn gelu_prime_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 2.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_prime(x), fd, epsilon = 1e-8);
        }
    }

    // Loss used by the gradient checks: sum of squares of all final
    // states, so d_final = 2 * final_states.
    fn sq_loss(enc: &ReferenceEncoder, ids: &[u32]) -> f64 {
        let pass = enc.forward(ids).unwrap();
        pass.final_states()
            .iter()
            .flat_map(|row| row.iter())
            .map(|&v| v * v)
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut enc = ReferenceEncoder::new(tiny_config()).unwrap();
        let ids = [2u32, 5, 6, 3, 1];
        let pass = enc.forward(&ids).unwrap();
        let d_final: Vec<Vec<f64>> = pass
            .final_states()
            .iter()
            .map(|row| row.iter().map(|&v| 2.0 * v).collect())
            .collect();
        let mut grads = vec![0.0; enc.param_count()];
        enc.backward(&pass, &d_final, &mut grads);

        let h = 1e-5;
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..25 {
            let i = rng.random_range(0..enc.param_count());
            let orig = enc.params()[i];
            enc.params_mut()[i] = orig + h;
            let up = sq_loss(&enc, &ids);
            enc.params_mut()[i] = orig - h;
            let down = sq_loss(&enc, &ids);
            enc.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((a - fd) / denom).abs() < 1e-4 || (a - fd).abs() < 1e-8,
                "param {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn mlm_loss_gradient_matches_finite_differences() {
        let mut enc = ReferenceEncoder::new(tiny_config()).unwrap();
        let ids = [2u32, 4, 6, 3];
        let targets = [(1usize, 7u32), (2usize, 5u32)];
        let mut grads = vec![0.0; enc.param_count()];
        let loss = enc.mlm_step_loss(&ids, &targets, &mut grads).unwrap();
        assert!(loss > 0.0);

        let h = 1e-5;
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut scratch = vec![0.0; enc.param_count()];
        for _ in 0..20 {
            let i = rng.random_range(0..enc.param_count());
            let orig = enc.params()[i];
            enc.params_mut()[i] = orig + h;
            scratch.fill(0.0);
            let up = enc.mlm_step_loss(&ids, &targets, &mut scratch).unwrap();
            enc.params_mut()[i] = orig - h;
            scratch.fill(0.0);
            let down = enc.mlm_step_loss(&ids, &targets, &mut scratch).unwrap();
            enc.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((a - fd) / denom).abs() < 1e-4 || (a - fd).abs() < 1e-8,
                "param {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn token_embedding_returns_table_row() {
        let enc = ReferenceEncoder::new(tiny_config()).unwrap();
        let row = enc.token_embedding(3).unwrap();
        assert_eq!(row.len(), 8);
        assert!(enc.token_embedding(12).is_err());
        // Row 3 of tok_emb starts at offset 3 * dim.
        assert_eq!(&row[..], &enc.params()[3 * 8..4 * 8]);
    }
}
