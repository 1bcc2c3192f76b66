//! Micro hybrid transformer.
//!
//! Non-causal stack: token (or mask) embedding plus position embedding,
//! pre-norm blocks with full attention, final layer norm. Its output `hn`
//! is the cache; a linear head on `hn` gives the draft logits.
//!
//! Causal stack: runs over the sequence in ordering order. Track `j`
//! (`0 ≤ j < D − 1`) carries the token at rank `j` and predicts the token
//! at rank `j + 1`. Its input is
//!
//! ```text
//! c.tok_emb[x_σ(j)] + c.pos_emb[σ(j)] + c.pos_next[σ(j+1)] + [hn_σ(j); hn_σ(j+1)]·W_inj + b_inj
//! ```
//!
//! and attention is lower-triangular over tracks. The target logits for rank
//! `r > i` are `c.head(track r − 1) + draft_logits[σ(r)]`; the target at
//! rank `i` is the draft row itself. `c.head` starts at zero, so target and
//! draft coincide at initialization.
//!
//! Parameters named `c.*` form `φ`; everything else is `θ`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::nn::{self, LnCache};
use super::DraftTargetModel;
use crate::error::{Error, Result};
use crate::types::{Ordering, ProbRow, RevealState, SequenceSpec, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub alphabet: usize,
    pub len: usize,
    pub hidden: usize,
    pub heads: usize,
    pub nc_blocks: usize,
    pub c_blocks: usize,
    pub mlp_ratio: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            alphabet: 16,
            len: 32,
            hidden: 64,
            heads: 4,
            nc_blocks: 2,
            c_blocks: 1,
            mlp_ratio: 4,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        SequenceSpec::new(self.alphabet, self.len)?;
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "hidden width {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.nc_blocks == 0 || self.c_blocks == 0 || self.mlp_ratio == 0 {
            return Err(Error::Invalid("block counts and mlp ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> SequenceSpec {
        SequenceSpec::new(self.alphabet, self.len).expect("validated config")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridParams {
    tensors: Vec<Tensor>,
}

impl HybridParams {
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn fill(&mut self, v: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x = v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn d(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }

    fn m(&mut self, idx: usize) -> &mut [f64] {
        &mut self.tensors[idx].data
    }

    fn pair(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        assert!(a < b);
        let (lo, hi) = self.tensors.split_at_mut(b);
        (&mut lo[a].data, &mut hi[0].data)
    }
}

/// Whether a parameter belongs to the causal stack.
pub fn is_causal_param(name: &str) -> bool {
    name.starts_with("c.")
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    nc: Vec<BlockIdx>,
    nc_lnf_g: usize,
    nc_lnf_b: usize,
    nc_head_w: usize,
    nc_head_b: usize,
    c_tok_emb: usize,
    c_pos_emb: usize,
    c_pos_next: usize,
    c_inj_w: usize,
    c_inj_b: usize,
    c: Vec<BlockIdx>,
    c_lnf_g: usize,
    c_lnf_b: usize,
    c_head_w: usize,
    c_head_b: usize,
}

struct Builder {
    tensors: Vec<Tensor>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.tensors.push(Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        });
        self.inits.push(init);
        self.tensors.len() - 1
    }

    fn block(&mut self, prefix: &str, h: usize, m: usize, out_std: f64) -> BlockIdx {
        let w = Init::Normal(0.02);
        BlockIdx {
            ln1_g: self.add(format!("{prefix}.ln1.g"), &[h], Init::Ones),
            ln1_b: self.add(format!("{prefix}.ln1.b"), &[h], Init::Zeros),
            wq: self.add(format!("{prefix}.attn.wq"), &[h, h], w),
            wk: self.add(format!("{prefix}.attn.wk"), &[h, h], w),
            wv: self.add(format!("{prefix}.attn.wv"), &[h, h], w),
            wo: self.add(format!("{prefix}.attn.wo"), &[h, h], Init::Normal(out_std)),
            bo: self.add(format!("{prefix}.attn.bo"), &[h], Init::Zeros),
            ln2_g: self.add(format!("{prefix}.ln2.g"), &[h], Init::Ones),
            ln2_b: self.add(format!("{prefix}.ln2.b"), &[h], Init::Zeros),
            w1: self.add(format!("{prefix}.mlp.w1"), &[h, m], w),
            b1: self.add(format!("{prefix}.mlp.b1"), &[m], Init::Zeros),
            w2: self.add(format!("{prefix}.mlp.w2"), &[m, h], Init::Normal(out_std)),
            b2: self.add(format!("{prefix}.mlp.b2"), &[h], Init::Zeros),
        }
    }
}

fn build_layout(cfg: &HybridConfig) -> (Layout, Builder) {
    let (s, d, h) = (cfg.alphabet, cfg.len, cfg.hidden);
    let m = h * cfg.mlp_ratio;
    let out_std = 0.02 / ((2 * (cfg.nc_blocks + cfg.c_blocks)) as f64).sqrt();
    let emb = Init::Normal(0.02);
    let mut b = Builder {
        tensors: Vec::new(),
        inits: Vec::new(),
    };
    let tok_emb = b.add("tok_emb", &[s + 1, h], emb);
    let pos_emb = b.add("pos_emb", &[d, h], emb);
    let nc = (0..cfg.nc_blocks).map(|l| b.block(&format!("nc.{l}"), h, m, out_std)).collect();
    let nc_lnf_g = b.add("nc.lnf.g", &[h], Init::Ones);
    let nc_lnf_b = b.add("nc.lnf.b", &[h], Init::Zeros);
    let nc_head_w = b.add("nc.head.w", &[h, s], Init::Normal(0.02));
    let nc_head_b = b.add("nc.head.b", &[s], Init::Zeros);
    let c_tok_emb = b.add("c.tok_emb", &[s, h], emb);
    let c_pos_emb = b.add("c.pos_emb", &[d, h], emb);
    let c_pos_next = b.add("c.pos_next", &[d, h], emb);
    let c_inj_w = b.add("c.inject.w", &[2 * h, h], Init::Normal(0.02));
    let c_inj_b = b.add("c.inject.b", &[h], Init::Zeros);
    let c = (0..cfg.c_blocks).map(|l| b.block(&format!("c.{l}"), h, m, out_std)).collect();
    let c_lnf_g = b.add("c.lnf.g", &[h], Init::Ones);
    let c_lnf_b = b.add("c.lnf.b", &[h], Init::Zeros);
    let c_head_w = b.add("c.head.w", &[h, s], Init::Zeros);
    let c_head_b = b.add("c.head.b", &[s], Init::Zeros);
    let layout = Layout {
        tok_emb,
        pos_emb,
        nc,
        nc_lnf_g,
        nc_lnf_b,
        nc_head_w,
        nc_head_b,
        c_tok_emb,
        c_pos_emb,
        c_pos_next,
        c_inj_w,
        c_inj_b,
        c,
        c_lnf_g,
        c_lnf_b,
        c_head_w,
        c_head_b,
    };
    (layout, b)
}

/// A training example: complete tokens, an ordering and the revealed count.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub tokens: Vec<Token>,
    pub ordering: Ordering,
    pub revealed: usize,
}

/// Batch-mean losses, each already `D/(D−i)`-weighted per sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub noncausal: f64,
    pub causal: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.noncausal + self.causal
    }
}

struct BlockCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    a2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    gt: Vec<f64>,
}

struct StackOut {
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

struct CausalOut {
    tracks: Vec<(Token, usize, usize)>,
    inj_in: Vec<f64>,
    stack: StackOut,
}

#[derive(Clone, Debug)]
pub struct HybridModel {
    config: HybridConfig,
    params: HybridParams,
    layout: Layout,
}

/// Non-causal state reused by every target computation of one outer step.
#[derive(Clone, Debug)]
pub struct HybridCache {
    pub state: RevealState,
    /// Final non-causal activations, `D × h`.
    pub hidden: Vec<f64>,
    /// Draft logits, `D × S`.
    pub logits: Vec<f64>,
}

impl HybridModel {
    pub fn new<R: Rng + ?Sized>(config: HybridConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layout, mut b) = build_layout(&config);
        for (t, init) in b.tensors.iter_mut().zip(&b.inits) {
            match *init {
                Init::Zeros => {}
                Init::Ones => t.data.iter_mut().for_each(|v| *v = 1.0),
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("positive std");
                    t.data.iter_mut().for_each(|v| *v = n.sample(rng));
                }
            }
        }
        Ok(Self {
            config,
            params: HybridParams { tensors: b.tensors },
            layout,
        })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match the layout.
    pub fn from_parts(config: HybridConfig, params: HybridParams) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(&config);
        if b.tensors.len() != params.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                b.tensors.len(),
                params.tensors.len()
            )));
        }
        for (want, got) in b.tensors.iter().zip(&params.tensors) {
            if want.name != got.name || want.shape != got.shape || got.data.len() != want.data.len() {
                return Err(Error::Format(format!(
                    "tensor '{}' {:?} does not match expected '{}' {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("loaded parameters".into()));
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &HybridConfig {
        &self.config
    }

    pub fn params(&self) -> &HybridParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut HybridParams {
        &mut self.params
    }

    pub fn into_params(self) -> HybridParams {
        self.params
    }

    fn block_forward(
        &self,
        bi: &BlockIdx,
        x: Vec<f64>,
        batch: usize,
        t: usize,
        causal: bool,
    ) -> (Vec<f64>, BlockCache) {
        let p = &self.params;
        let h = self.config.hidden;
        let m = h * self.config.mlp_ratio;
        let n = batch * t;
        let (a, ln1) = nn::layer_norm(&x, n, h, p.d(bi.ln1_g), p.d(bi.ln1_b));
        let q = nn::linear(&a, n, h, p.d(bi.wq), None, h);
        let k = nn::linear(&a, n, h, p.d(bi.wk), None, h);
        let v = nn::linear(&a, n, h, p.d(bi.wv), None, h);
        let (ctx, probs) = nn::attention(&q, &k, &v, batch, t, h, self.config.heads, causal);
        let att = nn::linear(&ctx, n, h, p.d(bi.wo), Some(p.d(bi.bo)), h);
        let x2: Vec<f64> = x.iter().zip(&att).map(|(a, b)| a + b).collect();
        let (a2, ln2) = nn::layer_norm(&x2, n, h, p.d(bi.ln2_g), p.d(bi.ln2_b));
        let u = nn::linear(&a2, n, h, p.d(bi.w1), Some(p.d(bi.b1)), m);
        let (g, gt): (Vec<f64>, Vec<f64>) = u.iter().map(|&v| nn::gelu_with_tanh(v)).unzip();
        let mlp = nn::linear(&g, n, m, p.d(bi.w2), Some(p.d(bi.b2)), h);
        let out = x2.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        (
            out,
            BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                a2,
                u,
                g,
                gt,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        bi: &BlockIdx,
        c: &BlockCache,
        dout: Vec<f64>,
        grads: &mut HybridParams,
        batch: usize,
        t: usize,
        causal: bool,
    ) -> Vec<f64> {
        let p = &self.params;
        let h = self.config.hidden;
        let m = h * self.config.mlp_ratio;
        let n = batch * t;
        // MLP branch.
        let (dw2, db2) = grads.pair(bi.w2, bi.b2);
        let dg = nn::linear_backward(&dout, &c.g, n, m, p.d(bi.w2), h, dw2, Some(db2), true);
        let du: Vec<f64> = dg
            .iter()
            .zip(c.u.iter().zip(&c.gt))
            .map(|(d, (&u, &t))| d * nn::gelu_grad_cached(u, t))
            .collect();
        let (dw1, db1) = grads.pair(bi.w1, bi.b1);
        let da2 = nn::linear_backward(&du, &c.a2, n, h, p.d(bi.w1), m, dw1, Some(db1), true);
        let (dg2, db2) = grads.pair(bi.ln2_g, bi.ln2_b);
        let dx2_ln = nn::layer_norm_backward(&da2, &c.ln2, n, h, p.d(bi.ln2_g), dg2, db2);
        let dx2: Vec<f64> = dout.iter().zip(&dx2_ln).map(|(a, b)| a + b).collect();
        // Attention branch.
        let (dwo, dbo) = grads.pair(bi.wo, bi.bo);
        let dctx = nn::linear_backward(&dx2, &c.ctx, n, h, p.d(bi.wo), h, dwo, Some(dbo), true);
        let (dq, dk, dv) =
            nn::attention_backward(&dctx, &c.q, &c.k, &c.v, &c.probs, batch, t, h, self.config.heads, causal);
        let mut da = nn::linear_backward(&dq, &c.a, n, h, p.d(bi.wq), h, grads.m(bi.wq), None, true);
        let dak = nn::linear_backward(&dk, &c.a, n, h, p.d(bi.wk), h, grads.m(bi.wk), None, true);
        let dav = nn::linear_backward(&dv, &c.a, n, h, p.d(bi.wv), h, grads.m(bi.wv), None, true);
        for ((x, y), z) in da.iter_mut().zip(&dak).zip(&dav) {
            *x += y + z;
        }
        let (dg1, db1) = grads.pair(bi.ln1_g, bi.ln1_b);
        let dx_ln = nn::layer_norm_backward(&da, &c.ln1, n, h, p.d(bi.ln1_g), dg1, db1);
        dx2.iter().zip(&dx_ln).map(|(a, b)| a + b).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stack(
        &self,
        blocks: &[BlockIdx],
        mut x: Vec<f64>,
        batch: usize,
        t: usize,
        causal: bool,
        lnf: (usize, usize),
        head: (usize, usize),
    ) -> Result<StackOut> {
        let h = self.config.hidden;
        let s = self.config.alphabet;
        let n = batch * t;
        let stack = if causal { "causal" } else { "non-causal" };
        let mut caches = Vec::with_capacity(blocks.len());
        for (l, bi) in blocks.iter().enumerate() {
            let (out, cache) = self.block_forward(bi, x, batch, t, causal);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{stack} block {l}")));
            }
            caches.push(cache);
            x = out;
        }
        let p = &self.params;
        let (hidden, lnf_cache) = nn::layer_norm(&x, n, h, p.d(lnf.0), p.d(lnf.1));
        let logits = nn::linear(&hidden, n, h, p.d(head.0), Some(p.d(head.1)), s);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{stack} head")));
        }
        Ok(StackOut {
            blocks: caches,
            lnf: lnf_cache,
            hidden,
            logits,
        })
    }

    /// Non-causal stack over `batch` sequences of model inputs (tokens or mask).
    fn noncausal_forward(&self, inputs: &[Token], batch: usize) -> Result<StackOut> {
        let (d, h) = (self.config.len, self.config.hidden);
        let l = &self.layout;
        let tok = self.params.d(l.tok_emb);
        let pos = self.params.d(l.pos_emb);
        let mut x = vec![0.0; batch * d * h];
        for (r, &t) in inputs.iter().enumerate() {
            let (te, pe) = (&tok[t as usize * h..][..h], &pos[(r % d) * h..][..h]);
            for c in 0..h {
                x[r * h + c] = te[c] + pe[c];
            }
        }
        self.run_stack(
            &l.nc,
            x,
            batch,
            d,
            false,
            (l.nc_lnf_g, l.nc_lnf_b),
            (l.nc_head_w, l.nc_head_b),
        )
    }

    /// Causal stack. `tracks[b·tc + j] = (token, p, q)` with `p = σ(j)`, `q = σ(j+1)`;
    /// `hn` rows are indexed `b·D + position`.
    fn causal_forward(&self, hn: &[f64], tracks: Vec<(Token, usize, usize)>, batch: usize, tc: usize) -> Result<CausalOut> {
        let (d, h) = (self.config.len, self.config.hidden);
        let l = &self.layout;
        let n = batch * tc;
        let mut inj_in = vec![0.0; n * 2 * h];
        for (r, &(_, p, q)) in tracks.iter().enumerate() {
            let b = r / tc.max(1);
            inj_in[r * 2 * h..r * 2 * h + h].copy_from_slice(&hn[(b * d + p) * h..][..h]);
            inj_in[r * 2 * h + h..(r + 1) * 2 * h].copy_from_slice(&hn[(b * d + q) * h..][..h]);
        }
        let mut x = nn::linear(&inj_in, n, 2 * h, self.params.d(l.c_inj_w), Some(self.params.d(l.c_inj_b)), h);
        let (te, pe, pn) = (
            self.params.d(l.c_tok_emb),
            self.params.d(l.c_pos_emb),
            self.params.d(l.c_pos_next),
        );
        for (r, &(t, p, q)) in tracks.iter().enumerate() {
            for c in 0..h {
                x[r * h + c] += te[t as usize * h + c] + pe[p * h + c] + pn[q * h + c];
            }
        }
        let stack = self.run_stack(&l.c, x, batch, tc, true, (l.c_lnf_g, l.c_lnf_b), (l.c_head_w, l.c_head_b))?;
        Ok(CausalOut { tracks, inj_in, stack })
    }

    fn check_example(&self, ex: &MaskedExample) -> Result<()> {
        let spec = self.config.spec();
        if ex.tokens.len() != spec.len() {
            return Err(Error::LengthMismatch {
                expected: spec.len(),
                actual: ex.tokens.len(),
            });
        }
        if ex.ordering.len() != spec.len() {
            return Err(Error::NotAPermutation(spec.len()));
        }
        if ex.revealed > spec.len() {
            return Err(Error::RevealOutOfRange {
                count: ex.revealed,
                len: spec.len(),
            });
        }
        for (p, &t) in ex.tokens.iter().enumerate() {
            spec.check_token(t, p)?;
        }
        Ok(())
    }

    /// Weighted losses of a batch; with `grads`, also accumulates the gradient
    /// of `noncausal + causal`. With `frozen_theta`, only `φ` receives gradient.
    pub fn batch_loss(
        &self,
        batch: &[MaskedExample],
        grads: Option<&mut HybridParams>,
        frozen_theta: bool,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Ok(LossParts::default());
        }
        for ex in batch {
            self.check_example(ex)?;
        }
        let (d, s, h) = (self.config.len, self.config.alphabet, self.config.hidden);
        let nb = batch.len();
        let tc = d - 1;
        let mask = self.config.alphabet as Token;
        let mut inputs = vec![mask; nb * d];
        let mut tracks = Vec::with_capacity(nb * tc);
        for (b, ex) in batch.iter().enumerate() {
            for r in 0..ex.revealed {
                let p = ex.ordering.at(r);
                inputs[b * d + p] = ex.tokens[p];
            }
            for j in 0..tc {
                let (p, q) = (ex.ordering.at(j), ex.ordering.at(j + 1));
                tracks.push((ex.tokens[p], p, q));
            }
        }
        let nc = self.noncausal_forward(&inputs, nb)?;
        let co = self.causal_forward(&nc.hidden, tracks, nb, tc)?;

        let inv_b = 1.0 / nb as f64;
        let mut d_nc = vec![0.0; nb * d * s];
        let mut d_c = vec![0.0; nb * tc * s];
        let mut parts = LossParts::default();
        for (b, ex) in batch.iter().enumerate() {
            let i = ex.revealed;
            if i == d {
                continue;
            }
            let w = crate::train::loss_weight(d, i);
            for r in i..d {
                let p = ex.ordering.at(r);
                let x = ex.tokens[p] as usize;
                let row = (b * d + p) * s;
                let (lp, sm) = nn::log_softmax_at(&nc.logits[row..row + s], x);
                parts.noncausal -= w * lp * inv_b;
                // The draft term, plus the rank-i target term which is the same row.
                let mult = if r == i { 2.0 } else { 1.0 };
                if r == i {
                    parts.causal -= w * lp * inv_b;
                }
                for c in 0..s {
                    let g = sm[c] - if c == x { 1.0 } else { 0.0 };
                    d_nc[row + c] += mult * w * inv_b * g;
                }
                if r > i {
                    let crow = (b * tc + r - 1) * s;
                    let tl: Vec<f64> = (0..s).map(|c| co.stack.logits[crow + c] + nc.logits[row + c]).collect();
                    let (lt, st) = nn::log_softmax_at(&tl, x);
                    parts.causal -= w * lt * inv_b;
                    for c in 0..s {
                        let g = w * inv_b * (st[c] - if c == x { 1.0 } else { 0.0 });
                        d_c[crow + c] += g;
                        d_nc[row + c] += g;
                    }
                }
            }
        }
        if !parts.noncausal.is_finite() || !parts.causal.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let Some(grads) = grads else {
            return Ok(parts);
        };

        let l = &self.layout;
        let p = &self.params;
        // Causal stack.
        let nct = nb * tc;
        let (dw, db) = grads.pair(l.c_head_w, l.c_head_b);
        let dhc = nn::linear_backward(&d_c, &co.stack.hidden, nct, h, p.d(l.c_head_w), s, dw, Some(db), true);
        let (dg, db) = grads.pair(l.c_lnf_g, l.c_lnf_b);
        let mut dx = nn::layer_norm_backward(&dhc, &co.stack.lnf, nct, h, p.d(l.c_lnf_g), dg, db);
        for (bi, cache) in l.c.iter().zip(&co.stack.blocks).rev() {
            dx = self.block_backward(bi, cache, dx, grads, nb, tc, true);
        }
        {
            let gt = grads.m(l.c_tok_emb);
            for (r, &(t, _, _)) in co.tracks.iter().enumerate() {
                for c in 0..h {
                    gt[t as usize * h + c] += dx[r * h + c];
                }
            }
            let gp = grads.m(l.c_pos_emb);
            for (r, &(_, pp, _)) in co.tracks.iter().enumerate() {
                for c in 0..h {
                    gp[pp * h + c] += dx[r * h + c];
                }
            }
            let gn = grads.m(l.c_pos_next);
            for (r, &(_, _, q)) in co.tracks.iter().enumerate() {
                for c in 0..h {
                    gn[q * h + c] += dx[r * h + c];
                }
            }
        }
        let (dw, db) = grads.pair(l.c_inj_w, l.c_inj_b);
        let d_inj = nn::linear_backward(&dx, &co.inj_in, nct, 2 * h, p.d(l.c_inj_w), h, dw, Some(db), !frozen_theta);
        if frozen_theta {
            return Ok(parts);
        }

        // Non-causal stack.
        let n = nb * d;
        let (dw, db) = grads.pair(l.nc_head_w, l.nc_head_b);
        let mut dhn = nn::linear_backward(&d_nc, &nc.hidden, n, h, p.d(l.nc_head_w), s, dw, Some(db), true);
        for (r, &(_, pp, q)) in co.tracks.iter().enumerate() {
            let b = r / tc;
            for c in 0..h {
                dhn[(b * d + pp) * h + c] += d_inj[r * 2 * h + c];
                dhn[(b * d + q) * h + c] += d_inj[r * 2 * h + h + c];
            }
        }
        let (dg, db) = grads.pair(l.nc_lnf_g, l.nc_lnf_b);
        let mut dx = nn::layer_norm_backward(&dhn, &nc.lnf, n, h, p.d(l.nc_lnf_g), dg, db);
        for (bi, cache) in l.nc.iter().zip(&nc.blocks).rev() {
            dx = self.block_backward(bi, cache, dx, grads, nb, d, false);
        }
        let gt = grads.m(l.tok_emb);
        for (r, &t) in inputs.iter().enumerate() {
            for c in 0..h {
                gt[t as usize * h + c] += dx[r * h + c];
            }
        }
        let gp = grads.m(l.pos_emb);
        for r in 0..n {
            for c in 0..h {
                gp[(r % d) * h + c] += dx[r * h + c];
            }
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(parts)
    }

    /// Draft logits (`D × S`) and hidden states for one reveal state.
    pub fn noncausal(&self, state: &RevealState) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_state(state)?;
        let out = self.noncausal_forward(state.tokens(), 1)?;
        Ok((out.hidden, out.logits))
    }

    fn check_state(&self, state: &RevealState) -> Result<()> {
        let spec = self.config.spec();
        if *state.spec() != spec {
            return Err(Error::InvalidSpec(format!(
                "state spec {:?} does not match model spec {:?}",
                state.spec(),
                spec
            )));
        }
        Ok(())
    }

    fn row_at(logits: &[f64], s: usize, p: usize) -> ProbRow {
        ProbRow::softmax(&logits[p * s..(p + 1) * s])
    }
}

impl DraftTargetModel for HybridModel {
    type Cache = HybridCache;

    fn spec(&self) -> SequenceSpec {
        self.config.spec()
    }

    fn block_counts(&self) -> (usize, usize) {
        (self.config.nc_blocks, self.config.c_blocks)
    }

    fn draft_pass(&self, state: &RevealState, horizon: usize) -> Result<(Vec<ProbRow>, HybridCache)> {
        let (hidden, logits) = self.noncausal(state)?;
        let s = self.config.alphabet;
        let i = state.revealed();
        let end = (i + horizon).min(self.config.len);
        let rows = (i..end)
            .map(|r| Self::row_at(&logits, s, state.ordering().at(r)))
            .collect();
        Ok((
            rows,
            HybridCache {
                state: state.clone(),
                hidden,
                logits,
            },
        ))
    }

    fn target_rows(&self, cache: &HybridCache, drafted: &[Token], ranks: std::ops::Range<usize>) -> Result<Vec<ProbRow>> {
        let state = &cache.state;
        let (d, s) = (self.config.len, self.config.alphabet);
        let i = state.revealed();
        if ranks.start < i || ranks.end > d || ranks.start > ranks.end {
            return Err(Error::OutOfRange(format!(
                "target ranks {ranks:?} outside {i}..{d}"
            )));
        }
        if ranks.is_empty() {
            return Ok(Vec::new());
        }
        let need = ranks.end - 1 - i;
        if drafted.len() < need {
            return Err(Error::LengthMismatch {
                expected: need,
                actual: drafted.len(),
            });
        }
        let ord = state.ordering();
        let tc = ranks.end - 1;
        let c_logits = if ranks.end > i + 1 {
            let mut tracks = Vec::with_capacity(tc);
            for j in 0..tc {
                let p = ord.at(j);
                let t = if j < i { state.tokens()[p] } else { drafted[j - i] };
                self.config.spec().check_token(t, p)?;
                tracks.push((t, p, ord.at(j + 1)));
            }
            self.causal_forward(&cache.hidden, tracks, 1, tc)?.stack.logits
        } else {
            Vec::new()
        };
        Ok(ranks
            .map(|r| {
                let p = ord.at(r);
                if r == i {
                    Self::row_at(&cache.logits, s, p)
                } else {
                    let tl: Vec<f64> = (0..s)
                        .map(|c| c_logits[(r - 1) * s + c] + cache.logits[p * s + c])
                        .collect();
                    ProbRow::softmax(&tl)
                }
            })
            .collect())
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Relative error floor for coordinates whose gradient is numerically zero.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of `noncausal + causal` with central
/// differences on up to `per_block` random coordinates of every tensor.
pub fn gradient_check<R: Rng + ?Sized>(
    model: &HybridModel,
    batch: &[MaskedExample],
    per_block: usize,
    step: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut grads = model.params.zeros_like();
    model.batch_loss(batch, Some(&mut grads), false)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for ti in 0..model.params.tensors.len() {
        let len = model.params.tensors[ti].data.len();
        let coords: Vec<usize> = if len <= per_block {
            (0..len).collect()
        } else {
            rand::seq::index::sample(rng, len, per_block).into_vec()
        };
        for c in coords {
            let orig = probe.params.tensors[ti].data[c];
            probe.params.tensors[ti].data[c] = orig + step;
            let up = probe.batch_loss(batch, None, false)?.total();
            probe.params.tensors[ti].data[c] = orig - step;
            let down = probe.batch_loss(batch, None, false)?.total();
            probe.params.tensors[ti].data[c] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.tensors[ti].data[c];
            let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{c}]: analytic {analytic:e}, numeric {numeric:e}", model.params.tensors[ti].name);
            }
        }
    }
    Ok(report)
}
