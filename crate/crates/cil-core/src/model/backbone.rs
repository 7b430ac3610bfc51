//! Transformer encoder backbone, frozen during incremental learning.
//!
//! Pre-norm blocks: attention and MLP sub-layers each normalize their input
//! and add their output to the residual stream. Task adapters hook into the
//! MLP sub-layer only: the sub-layer output becomes
//! `MLP(x) + ReLU(x W_down) W_up` before the residual addition. A final
//! layer norm precedes readout, and the feature is the class token's
//! representation (mean pooling over the other tokens is a config switch).

use serde::{Deserialize, Serialize};

use super::adapter::AdapterSet;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub seq_len: usize,
    pub token_dim: usize,
    /// Read the feature out as the mean of the non-class tokens instead of
    /// the class token.
    pub mean_pool: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_blocks: 2,
            embed_dim: 32,
            num_heads: 4,
            mlp_hidden: 64,
            seq_len: 8,
            token_dim: 16,
            mean_pool: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("num_blocks", self.num_blocks),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("seq_len", self.seq_len),
            ("token_dim", self.token_dim),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::Config(format!("backbone {name} must be at least 1")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct Backbone {
    pub config: BackboneConfig,
    pub w_embed: Tensor,
    pub b_embed: Tensor,
    pub cls_token: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    frozen: bool,
}

impl Backbone {
    pub fn init(config: BackboneConfig, rng: &mut Rng) -> Result<Backbone> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.mlp_hidden;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for _ in 0..config.num_blocks {
            blocks.push(BlockWeights {
                ln1_gamma: Tensor::from_shape_vec(vec![d], vec![1.0; d]),
                ln1_beta: Tensor::zeros(vec![d]),
                wq: Tensor::gaussian(vec![d, d], INIT_STD, rng),
                bq: Tensor::zeros(vec![d]),
                wk: Tensor::gaussian(vec![d, d], INIT_STD, rng),
                bk: Tensor::zeros(vec![d]),
                wv: Tensor::gaussian(vec![d, d], INIT_STD, rng),
                bv: Tensor::zeros(vec![d]),
                wo: Tensor::gaussian(vec![d, d], INIT_STD, rng),
                bo: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::from_shape_vec(vec![d], vec![1.0; d]),
                ln2_beta: Tensor::zeros(vec![d]),
                w1: Tensor::gaussian(vec![d, h], INIT_STD, rng),
                b1: Tensor::zeros(vec![h]),
                w2: Tensor::gaussian(vec![h, d], INIT_STD, rng),
                b2: Tensor::zeros(vec![d]),
            });
        }
        Ok(Backbone {
            w_embed: Tensor::gaussian(vec![config.token_dim, d], INIT_STD, rng),
            b_embed: Tensor::zeros(vec![d]),
            cls_token: Tensor::gaussian(vec![d], INIT_STD, rng),
            blocks,
            final_ln_gamma: Tensor::from_shape_vec(vec![d], vec![1.0; d]),
            final_ln_beta: Tensor::zeros(vec![d]),
            config,
            frozen: false,
        })
    }

    /// Every backbone parameter, paired with a stable dotted name. The
    /// order is fixed and doubles as the checkpoint layout.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = vec![
            ("embed.w".into(), self.w_embed.clone()),
            ("embed.b".into(), self.b_embed.clone()),
            ("cls_token".into(), self.cls_token.clone()),
        ];
        for (i, blk) in self.blocks.iter().enumerate() {
            let named: [(&str, &Tensor); 16] = [
                ("ln1.gamma", &blk.ln1_gamma),
                ("ln1.beta", &blk.ln1_beta),
                ("attn.wq", &blk.wq),
                ("attn.bq", &blk.bq),
                ("attn.wk", &blk.wk),
                ("attn.bk", &blk.bk),
                ("attn.wv", &blk.wv),
                ("attn.bv", &blk.bv),
                ("attn.wo", &blk.wo),
                ("attn.bo", &blk.bo),
                ("ln2.gamma", &blk.ln2_gamma),
                ("ln2.beta", &blk.ln2_beta),
                ("mlp.w1", &blk.w1),
                ("mlp.b1", &blk.b1),
                ("mlp.w2", &blk.w2),
                ("mlp.b2", &blk.b2),
            ];
            for (name, t) in named {
                out.push((format!("block{i}.{name}"), (*t).clone()));
            }
        }
        out.push(("final_ln.gamma".into(), self.final_ln_gamma.clone()));
        out.push(("final_ln.beta".into(), self.final_ln_beta.clone()));
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn freeze(&mut self) {
        for p in self.params() {
            p.set_requires_grad(false);
        }
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        for p in self.params() {
            p.set_requires_grad(true);
        }
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Flat copy of every parameter, for bitwise freeze checks.
    pub fn snapshot(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data_vec()).collect()
    }

    /// MLP sub-layer output for one block, including the adapter residual
    /// when adapters are given: `MLP(x) + ReLU(x W_down) W_up`.
    pub fn adapter_forward(&self, x: &Tensor, block: usize, adapters: Option<&AdapterSet>) -> Tensor {
        assert!(
            block < self.blocks.len(),
            "adapter_forward: block {block} out of range for {} blocks",
            self.blocks.len()
        );
        let blk = &self.blocks[block];
        let mlp = x.matmul(&blk.w1).add_bias(&blk.b1).relu().matmul(&blk.w2).add_bias(&blk.b2);
        match adapters {
            None => mlp,
            Some(a) => {
                let residual = x.matmul(&a.w_down[block]).relu().matmul(&a.w_up[block]);
                mlp.add(&residual)
            }
        }
    }

    /// Encode a row-stacked batch of instances into one feature per
    /// instance. `tokens` is `(batch * seq_len) x token_dim`; the result is
    /// `batch x embed_dim`, differentiable through any trainable adapter.
    pub fn forward_batch(&self, tokens: &Tensor, adapters: Option<&AdapterSet>) -> Tensor {
        let cfg = &self.config;
        let shape = tokens.shape();
        assert!(
            shape.len() == 2 && shape[1] == cfg.token_dim && shape[0] % cfg.seq_len == 0,
            "forward: token matrix {:?} does not match seq_len {} x token_dim {}",
            shape,
            cfg.seq_len,
            cfg.token_dim
        );
        let batch = shape[0] / cfg.seq_len;
        if let Some(a) = adapters {
            a.validate_for(cfg).expect("forward: adapter does not fit backbone");
        }

        let projected = tokens.matmul(&self.w_embed).add_bias(&self.b_embed);
        let mut x = Tensor::prepend_token(&projected, &self.cls_token, batch);
        for (bi, blk) in self.blocks.iter().enumerate() {
            let h = x.layer_norm(&blk.ln1_gamma, &blk.ln1_beta, LN_EPS);
            let q = h.matmul(&blk.wq).add_bias(&blk.bq);
            let k = h.matmul(&blk.wk).add_bias(&blk.bk);
            let v = h.matmul(&blk.wv).add_bias(&blk.bv);
            let attn = Tensor::scaled_dot_attention(&q, &k, &v, batch, cfg.num_heads);
            let attn_out = attn.matmul(&blk.wo).add_bias(&blk.bo);
            x = x.add(&attn_out);

            let h2 = x.layer_norm(&blk.ln2_gamma, &blk.ln2_beta, LN_EPS);
            let sublayer = self.adapter_forward(&h2, bi, adapters);
            x = x.add(&sublayer);
        }
        let normed = x.layer_norm(&self.final_ln_gamma, &self.final_ln_beta, LN_EPS);
        if cfg.mean_pool {
            normed.mean_token_rows(batch)
        } else {
            normed.take_leading_rows(batch)
        }
    }

    /// Feature vector for a single instance (`seq_len x token_dim` tokens).
    pub fn embed(&self, instance: &Tensor, adapters: Option<&AdapterSet>) -> Tensor {
        self.forward_batch(instance, adapters)
    }
}
