//! The noise-prediction network: a DiffWave-style stack of residual blocks,
//! each wrapping a sub-stack of Conformer/Transformer layers with
//! translation-invariant self-attention, gated conditioning, and skip
//! aggregation, driven by a sinusoidal diffusion-step embedding.
//!
//! Parameters live in one flat `Vec<f64>` described by a named [`Layout`];
//! gradients are hand-derived and verified against central finite
//! differences in the test suite.

use crate::data::ConditioningSequence;
use crate::diffusion::EpsilonPredictor;
use crate::error::{Error, Result};
use crate::nn::{
    self, conv1d_bwd, conv1d_fwd, gate_bwd, gate_fwd, gelu_bwd, gelu_fwd, layer_norm_bwd,
    layer_norm_fwd, linear_bwd, linear_fwd, softmax_rows, softmax_rows_bwd, GateCache, Layout,
    LnCache, PaddingMode,
};
use ndarray::{s, Array1, Array2, Axis};
use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. The `Default`-backed constructors reproduce
/// the reference configuration: 10 blocks of 4 attention layers, 8 heads,
/// 256 attention channels, 1024 feedforward channels, dilation cycle 3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_blocks: usize,
    pub layers_per_block: usize,
    pub dilation_cycle: usize,
    pub n_heads: usize,
    pub attention_width: usize,
    pub feedforward_width: usize,
    pub input_dim: usize,
    pub cond_dim: usize,
    pub step_embed_dim: usize,
    pub max_relative_distance: usize,
    #[serde(default)]
    pub padding: PaddingMode,
}

impl DenoiserConfig {
    /// Reference architecture at the given data dimensions.
    pub fn with_dims(input_dim: usize, cond_dim: usize) -> Self {
        Self {
            n_blocks: 10,
            layers_per_block: 4,
            dilation_cycle: 3,
            n_heads: 8,
            attention_width: 256,
            feedforward_width: 1024,
            input_dim,
            cond_dim,
            step_embed_dim: 128,
            max_relative_distance: 64,
            padding: PaddingMode::Zero,
        }
    }

    /// Small architecture for smoke training and integration tests.
    pub fn tiny(input_dim: usize, cond_dim: usize) -> Self {
        Self {
            n_blocks: 2,
            layers_per_block: 2,
            dilation_cycle: 3,
            n_heads: 4,
            attention_width: 32,
            feedforward_width: 64,
            input_dim,
            cond_dim,
            step_embed_dim: 32,
            max_relative_distance: 16,
            padding: PaddingMode::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0
            || self.layers_per_block == 0
            || self.dilation_cycle == 0
            || self.input_dim == 0
            || self.cond_dim == 0
            || self.attention_width == 0
            || self.feedforward_width == 0
        {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        if self.n_heads == 0 || !self.attention_width.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "attention width {} not divisible into {} heads",
                self.attention_width, self.n_heads
            )));
        }
        if self.step_embed_dim == 0 || !self.step_embed_dim.is_multiple_of(2) {
            return Err(Error::config("step embedding dimension must be even"));
        }
        Ok(())
    }

    /// Block dilation `d(l) = 2^((l mod cycle) - 1)`. Values below one select
    /// Transformer mode (kernel 1); one and above select Conformer mode
    /// (kernel 3 at this integer dilation).
    pub fn dilation(&self, block: usize) -> f64 {
        let e = (block % self.dilation_cycle) as i32 - 1;
        2f64.powi(e)
    }

    /// Feedforward convolution kernel size for a block: 1 or 3.
    pub fn kernel(&self, block: usize) -> usize {
        if self.dilation(block) < 1.0 {
            1
        } else {
            3
        }
    }

    /// Integer dilation actually applied to the feedforward convolutions.
    pub fn conv_dilation(&self, block: usize) -> usize {
        let d = self.dilation(block);
        if d < 1.0 {
            1
        } else {
            d as usize
        }
    }

    /// Temporal radius reachable through convolutions alone (attention is
    /// global but offset-only): the zero-padding equivariance margin.
    pub fn receptive_radius(&self) -> usize {
        (0..self.n_blocks)
            .map(|l| {
                let per_conv = (self.kernel(l) - 1) / 2 * self.conv_dilation(l);
                self.layers_per_block * 2 * per_conv
            })
            .sum()
    }

    fn head_dim(&self) -> usize {
        self.attention_width / self.n_heads
    }

    fn tisa_width(&self) -> usize {
        2 * self.max_relative_distance + 1
    }
}

/// Interleaved sin/cos of the step index against a geometric frequency
/// ladder spanning wavelengths 1 to 1e4. Pure and deterministic; the learned
/// feedforward over it is applied inside the network, not here.
pub fn step_embedding(n: usize, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!(
            "step embedding dimension {dim} must be positive and even"
        )));
    }
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for k in 0..half {
        let exponent = if half > 1 {
            k as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let omega = 10f64.powf(-4.0 * exponent);
        let phase = n as f64 * omega;
        e[2 * k] = phase.sin();
        e[2 * k + 1] = phase.cos();
    }
    Ok(e)
}

fn block_prefix(l: usize) -> String {
    format!("block{l}")
}

fn layer_prefix(l: usize, j: usize) -> String {
    format!("block{l}.layer{j}")
}

/// The network: a validated config plus the derived parameter layout.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    layout: Layout,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        Ok(Self { config, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    /// Seeded initialization: uniform `±sqrt(1/fan_in)` for weights, zeros
    /// for biases and the TISA tables, ones for layer-norm gains, and a
    /// zeroed final head so the untrained network predicts zero noise.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut data = vec![0.0; self.layout.total_len()];
        let mut rng = crate::rng::stream(seed);
        for slot in self.layout.slots() {
            let vals = &mut data[slot.offset..slot.offset + slot.len()];
            let name = slot.name.as_str();
            if name.ends_with("ln1.g") || name.ends_with("ln2.g") {
                vals.fill(1.0);
                continue;
            }
            let is_weight = name.ends_with(".w");
            let zero_init = name.ends_with("attn.tisa") || name.starts_with("head.1.");
            if !is_weight || zero_init {
                continue; // biases, TISA, final head stay zero
            }
            let fan_in: usize = slot.shape[1..].iter().product();
            let a = (1.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a);
            for v in vals.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        data
    }

    /// Learned attention-logit bias between two positions for one head:
    /// depends only on the signed offset `t_key - t_query` clamped to the
    /// configured radius (minimal circular offset in circular mode).
    #[allow(clippy::too_many_arguments)]
    pub fn tisa_bias(
        &self,
        params: &[f64],
        block: usize,
        layer: usize,
        head: usize,
        t_query: usize,
        t_key: usize,
        t_len: usize,
    ) -> Result<f64> {
        if head >= self.config.n_heads || t_query >= t_len || t_key >= t_len {
            return Err(Error::contract("tisa_bias index out of range"));
        }
        let table = self
            .layout
            .view2(params, &format!("{}.attn.tisa", layer_prefix(block, layer)))?;
        let idx = self.offset_index(t_query, t_key, t_len);
        Ok(table[[head, idx]])
    }

    fn offset_index(&self, i: usize, j: usize, t_len: usize) -> usize {
        let r = self.config.max_relative_distance as isize;
        let mut off = j as isize - i as isize;
        if self.config.padding == PaddingMode::Circular {
            let t = t_len as isize;
            off = off.rem_euclid(t);
            if off > t / 2 {
                off -= t;
            }
        }
        (off.clamp(-r, r) + r) as usize
    }

    fn offset_matrix(&self, t_len: usize) -> Array2<usize> {
        let mut m = Array2::zeros((t_len, t_len));
        for i in 0..t_len {
            for j in 0..t_len {
                m[[i, j]] = self.offset_index(i, j, t_len);
            }
        }
        m
    }

    /// Noise prediction without retaining intermediates.
    pub fn forward(
        &self,
        params: &[f64],
        x: &Array2<f64>,
        cond: &Array2<f64>,
        n: usize,
    ) -> Result<Array2<f64>> {
        Ok(self.forward_cached(params, x, cond, n)?.0)
    }

    /// Noise prediction plus the activation cache consumed by [`backward`].
    ///
    /// [`backward`]: Denoiser::backward
    pub fn forward_cached(
        &self,
        params: &[f64],
        x: &Array2<f64>,
        cond: &Array2<f64>,
        n: usize,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let c = &self.config;
        if x.ncols() != c.input_dim {
            return Err(Error::contract(format!(
                "input has {} channels, config expects {}",
                x.ncols(),
                c.input_dim
            )));
        }
        if cond.ncols() != c.cond_dim {
            return Err(Error::contract(format!(
                "conditioning has {} channels, config expects {}",
                cond.ncols(),
                c.cond_dim
            )));
        }
        if cond.nrows() != x.nrows() {
            return Err(Error::contract(format!(
                "conditioning has {} frames, input {}",
                cond.nrows(),
                x.nrows()
            )));
        }
        if n == 0 {
            return Err(Error::contract("diffusion step index must be >= 1"));
        }
        if x.nrows() == 0 {
            return Err(Error::contract("input must contain at least one frame"));
        }
        if params.len() != self.layout.total_len() {
            return Err(Error::contract(format!(
                "parameter vector has {} values, layout needs {}",
                params.len(),
                self.layout.total_len()
            )));
        }
        let t_len = x.nrows();
        let p = params;

        // Shared step-embedding feedforward.
        let e_raw = step_embedding(n, c.step_embed_dim)?;
        let e_row = e_raw.clone().insert_axis(Axis(0));
        let pre1 = linear_fwd(
            &e_row,
            &self.layout.view2(p, "step_ff.0.w")?,
            &self.layout.view1(p, "step_ff.0.b")?,
        );
        let act1 = gelu_fwd(&pre1);
        let pre2 = linear_fwd(
            &act1,
            &self.layout.view2(p, "step_ff.1.w")?,
            &self.layout.view1(p, "step_ff.1.b")?,
        );
        let e_ff = gelu_fwd(&pre2);

        // Input projection.
        let offsets = self.offset_matrix(t_len);
        let mut h = linear_fwd(
            x,
            &self.layout.view2(p, "in_proj.w")?,
            &self.layout.view1(p, "in_proj.b")?,
        );
        let mut skip_sum = Array2::zeros((t_len, c.attention_width));
        let mut blocks = Vec::with_capacity(c.n_blocks);
        for l in 0..c.n_blocks {
            let (res, skip, cache) = self.block_forward(p, l, &h, cond, &e_ff, &offsets)?;
            if !res.iter().all(|v| v.is_finite()) || !skip.iter().all(|v| v.is_finite()) {
                return Err(Error::Eval {
                    context: format!("non-finite activation leaving block {l}"),
                });
            }
            skip_sum += &skip;
            h = res;
            blocks.push(cache);
        }

        // Output head: two-layer projection, GELU between.
        let head_pre = linear_fwd(
            &skip_sum,
            &self.layout.view2(p, "head.0.w")?,
            &self.layout.view1(p, "head.0.b")?,
        );
        let head_act = gelu_fwd(&head_pre);
        let eps_hat = linear_fwd(
            &head_act,
            &self.layout.view2(p, "head.1.w")?,
            &self.layout.view1(p, "head.1.b")?,
        );

        let cache = ForwardCache {
            x: x.clone(),
            cond: cond.clone(),
            e_row,
            pre1,
            act1,
            pre2,
            e_ff,
            offsets,
            blocks,
            skip_sum,
            head_pre,
            head_act,
        };
        Ok((eps_hat, cache))
    }

    fn block_forward(
        &self,
        p: &[f64],
        l: usize,
        h_in: &Array2<f64>,
        cond: &Array2<f64>,
        e_ff: &Array2<f64>,
        offsets: &Array2<usize>,
    ) -> Result<(Array2<f64>, Array2<f64>, BlockCache)> {
        let c = &self.config;
        let w = c.attention_width;
        let bp = block_prefix(l);

        // Per-block projection of the shared step embedding, broadcast over
        // frames.
        let step_vec = linear_fwd(
            e_ff,
            &self.layout.view2(p, &format!("{bp}.step_proj.w"))?,
            &self.layout.view1(p, &format!("{bp}.step_proj.b"))?,
        );
        let mut g = h_in.clone();
        g += &step_vec.row(0);

        let mut layers = Vec::with_capacity(c.layers_per_block);
        for j in 0..c.layers_per_block {
            let (out, cache) = self.layer_forward_cached(p, l, j, &g, offsets)?;
            g = out;
            layers.push(cache);
        }

        // Conditioning gate: the tanh half mixes the stack output with the
        // conditioning, the sigmoid half is conditioning-driven, so zero
        // conditioning with zero bias gates at exactly 0.5.
        let z = linear_fwd(
            cond,
            &self.layout.view2(p, &format!("{bp}.cond_proj.w"))?,
            &self.layout.view1(p, &format!("{bp}.cond_proj.b"))?,
        );
        let mut u = linear_fwd(
            &g,
            &self.layout.view2(p, &format!("{bp}.gate_proj.w"))?,
            &self.layout.view1(p, &format!("{bp}.gate_proj.b"))?,
        );
        u += &z.slice(s![.., ..w]);
        let v = z.slice(s![.., w..]).to_owned();
        let (gated, gate) = gate_fwd(&u, &v);

        let res_part = linear_fwd(
            &gated,
            &self.layout.view2(p, &format!("{bp}.res_proj.w"))?,
            &self.layout.view1(p, &format!("{bp}.res_proj.b"))?,
        );
        let res = (h_in + &res_part) / std::f64::consts::SQRT_2;
        let skip = linear_fwd(
            &gated,
            &self.layout.view2(p, &format!("{bp}.skip_proj.w"))?,
            &self.layout.view1(p, &format!("{bp}.skip_proj.b"))?,
        );

        let cache = BlockCache {
            layers,
            g,
            gate,
            gated,
        };
        Ok((res, skip, cache))
    }

    /// One pre-norm Conformer/Transformer layer: TISA self-attention with a
    /// residual add, then the gated convolutional feedforward with a
    /// residual add.
    pub fn layer_forward(
        &self,
        params: &[f64],
        block: usize,
        layer: usize,
        h: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let offsets = self.offset_matrix(h.nrows());
        Ok(self
            .layer_forward_cached(params, block, layer, h, &offsets)?
            .0)
    }

    fn layer_forward_cached(
        &self,
        p: &[f64],
        l: usize,
        j: usize,
        x_in: &Array2<f64>,
        offsets: &Array2<usize>,
    ) -> Result<(Array2<f64>, LayerCache)> {
        let c = &self.config;
        let lp = layer_prefix(l, j);
        let t_len = x_in.nrows();
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // Attention sublayer.
        let (x_ln, ln1) = layer_norm_fwd(
            x_in,
            &self.layout.view1(p, &format!("{lp}.ln1.g"))?,
            &self.layout.view1(p, &format!("{lp}.ln1.b"))?,
        );
        let q = linear_fwd(
            &x_ln,
            &self.layout.view2(p, &format!("{lp}.attn.q.w"))?,
            &self.layout.view1(p, &format!("{lp}.attn.q.b"))?,
        );
        let k = linear_fwd(
            &x_ln,
            &self.layout.view2(p, &format!("{lp}.attn.k.w"))?,
            &self.layout.view1(p, &format!("{lp}.attn.k.b"))?,
        );
        let v = linear_fwd(
            &x_ln,
            &self.layout.view2(p, &format!("{lp}.attn.v.w"))?,
            &self.layout.view1(p, &format!("{lp}.attn.v.b"))?,
        );
        let tisa = self.layout.view2(p, &format!("{lp}.attn.tisa"))?;
        let mut concat = Array2::zeros((t_len, c.attention_width));
        let mut probs = Vec::with_capacity(c.n_heads);
        for head in 0..c.n_heads {
            let cols = head * dh..(head + 1) * dh;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            for i in 0..t_len {
                for jj in 0..t_len {
                    scores[[i, jj]] += tisa[[head, offsets[[i, jj]]]];
                }
            }
            let ph = softmax_rows(&scores);
            let oh = ph.dot(&vh);
            concat.slice_mut(s![.., cols]).assign(&oh);
            probs.push(ph);
        }
        let attn_out = linear_fwd(
            &concat,
            &self.layout.view2(p, &format!("{lp}.attn.o.w"))?,
            &self.layout.view1(p, &format!("{lp}.attn.o.b"))?,
        );
        let h1 = x_in + &attn_out;

        // Gated convolutional feedforward sublayer.
        let (h1_ln, ln2) = layer_norm_fwd(
            &h1,
            &self.layout.view1(p, &format!("{lp}.ln2.g"))?,
            &self.layout.view1(p, &format!("{lp}.ln2.b"))?,
        );
        let dil = c.conv_dilation(l);
        let pre = conv1d_fwd(
            &h1_ln,
            &self.layout.view3(p, &format!("{lp}.ff1.w"))?,
            &self.layout.view1(p, &format!("{lp}.ff1.b"))?,
            dil,
            c.padding,
        );
        let f_w = c.feedforward_width;
        let a = pre.slice(s![.., ..f_w]).to_owned();
        let b = pre.slice(s![.., f_w..]).to_owned();
        let gelu_a = gelu_fwd(&a);
        let sig_b = b.mapv(nn::sigmoid);
        let act = &gelu_a * &sig_b;
        let ff_out = conv1d_fwd(
            &act,
            &self.layout.view3(p, &format!("{lp}.ff2.w"))?,
            &self.layout.view1(p, &format!("{lp}.ff2.b"))?,
            dil,
            c.padding,
        );
        let out = &h1 + &ff_out;

        let cache = LayerCache {
            ln1,
            x_ln,
            q,
            k,
            v,
            probs,
            concat,
            ln2,
            h1_ln,
            a,
            gelu_a,
            sig_b,
            act,
        };
        Ok((out, cache))
    }

    /// Backpropagates `d_eps` (gradient of a scalar loss w.r.t. the network
    /// output) through the cached forward pass, returning the gradient for
    /// every parameter in layout order.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        d_eps: &Array2<f64>,
    ) -> Result<Vec<f64>> {
        let c = &self.config;
        let p = params;
        if d_eps.dim() != (cache.x.nrows(), c.input_dim) {
            return Err(Error::contract(format!(
                "output gradient has shape {:?}, expected ({}, {})",
                d_eps.dim(),
                cache.x.nrows(),
                c.input_dim
            )));
        }
        let mut grad = vec![0.0; self.layout.total_len()];

        // Output head.
        let (d_head_act, dw, db) = linear_bwd(
            &cache.head_act,
            &self.layout.view2(p, "head.1.w")?,
            d_eps,
        );
        self.layout.add_grad_from(&mut grad, "head.1.w", dw.iter())?;
        self.layout
            .add_grad_from(&mut grad, "head.1.b", db.iter())?;
        let d_head_pre = gelu_bwd(&cache.head_pre, &d_head_act);
        let (d_skip_sum, dw, db) = linear_bwd(
            &cache.skip_sum,
            &self.layout.view2(p, "head.0.w")?,
            &d_head_pre,
        );
        self.layout.add_grad_from(&mut grad, "head.0.w", dw.iter())?;
        self.layout
            .add_grad_from(&mut grad, "head.0.b", db.iter())?;

        // Blocks in reverse; every block sees the same skip gradient, the
        // residual gradient threads down from the block above (the final
        // block's residual output is unused).
        let mut d_res = Array2::zeros(d_skip_sum.dim());
        let mut d_e_ff = Array2::zeros(cache.e_ff.dim());
        for l in (0..c.n_blocks).rev() {
            let (d_h_in, d_e) = self.block_backward(
                p,
                l,
                &cache.blocks[l],
                &cache.cond,
                &cache.e_ff,
                &d_res,
                &d_skip_sum,
                &cache.offsets,
                &mut grad,
            )?;
            d_res = d_h_in;
            d_e_ff += &d_e;
        }

        // Input projection.
        let (_, dw, db) = linear_bwd(&cache.x, &self.layout.view2(p, "in_proj.w")?, &d_res);
        self.layout
            .add_grad_from(&mut grad, "in_proj.w", dw.iter())?;
        self.layout
            .add_grad_from(&mut grad, "in_proj.b", db.iter())?;

        // Shared step feedforward.
        let d_pre2 = gelu_bwd(&cache.pre2, &d_e_ff);
        let (d_act1, dw, db) = linear_bwd(
            &cache.act1,
            &self.layout.view2(p, "step_ff.1.w")?,
            &d_pre2,
        );
        self.layout
            .add_grad_from(&mut grad, "step_ff.1.w", dw.iter())?;
        self.layout
            .add_grad_from(&mut grad, "step_ff.1.b", db.iter())?;
        let d_pre1 = gelu_bwd(&cache.pre1, &d_act1);
        let (_, dw, db) = linear_bwd(
            &cache.e_row,
            &self.layout.view2(p, "step_ff.0.w")?,
            &d_pre1,
        );
        self.layout
            .add_grad_from(&mut grad, "step_ff.0.w", dw.iter())?;
        self.layout
            .add_grad_from(&mut grad, "step_ff.0.b", db.iter())?;

        Ok(grad)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        p: &[f64],
        l: usize,
        cache: &BlockCache,
        cond: &Array2<f64>,
        e_ff: &Array2<f64>,
        d_res: &Array2<f64>,
        d_skip: &Array2<f64>,
        offsets: &Array2<usize>,
        grad: &mut [f64],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let c = &self.config;
        let w = c.attention_width;
        let bp = block_prefix(l);
        let inv_sqrt2 = 1.0 / std::f64::consts::SQRT_2;

        // res = (h_in + res_proj(gated)) / sqrt(2); skip = skip_proj(gated).
        let d_res_part = d_res * inv_sqrt2;
        let mut d_h_in = d_res_part.clone();
        let (d_gated_r, dw, db) = linear_bwd(
            &cache.gated,
            &self.layout.view2(p, &format!("{bp}.res_proj.w"))?,
            &d_res_part,
        );
        self.layout
            .add_grad_from(grad, &format!("{bp}.res_proj.w"), dw.iter())?;
        self.layout
            .add_grad_from(grad, &format!("{bp}.res_proj.b"), db.iter())?;
        let (d_gated_s, dw, db) = linear_bwd(
            &cache.gated,
            &self.layout.view2(p, &format!("{bp}.skip_proj.w"))?,
            d_skip,
        );
        self.layout
            .add_grad_from(grad, &format!("{bp}.skip_proj.w"), dw.iter())?;
        self.layout
            .add_grad_from(grad, &format!("{bp}.skip_proj.b"), db.iter())?;
        let d_gated = d_gated_r + d_gated_s;

        // Gate halves.
        let (d_u, d_v) = gate_bwd(&cache.gate, &d_gated);

        // u = gate_proj(g) + z[:, :w]; v = z[:, w:].
        let (d_g_gate, dw, db) = linear_bwd(
            &cache.g,
            &self.layout.view2(p, &format!("{bp}.gate_proj.w"))?,
            &d_u,
        );
        self.layout
            .add_grad_from(grad, &format!("{bp}.gate_proj.w"), dw.iter())?;
        self.layout
            .add_grad_from(grad, &format!("{bp}.gate_proj.b"), db.iter())?;
        let mut d_z = Array2::zeros((cond.nrows(), 2 * w));
        d_z.slice_mut(s![.., ..w]).assign(&d_u);
        d_z.slice_mut(s![.., w..]).assign(&d_v);
        let (_, dw, db) = linear_bwd(
            cond,
            &self.layout.view2(p, &format!("{bp}.cond_proj.w"))?,
            &d_z,
        );
        self.layout
            .add_grad_from(grad, &format!("{bp}.cond_proj.w"), dw.iter())?;
        self.layout
            .add_grad_from(grad, &format!("{bp}.cond_proj.b"), db.iter())?;

        // Layer stack in reverse.
        let mut d_g = d_g_gate;
        for j in (0..c.layers_per_block).rev() {
            d_g = self.layer_backward(p, l, j, &cache.layers[j], &d_g, offsets, grad)?;
        }

        // g0 = h_in + broadcast(step_proj(e_ff)).
        d_h_in += &d_g;
        let d_step_vec = d_g.sum_axis(Axis(0)).insert_axis(Axis(0));
        let (d_e_ff, dw, db) = linear_bwd(
            e_ff,
            &self.layout.view2(p, &format!("{bp}.step_proj.w"))?,
            &d_step_vec,
        );
        self.layout
            .add_grad_from(grad, &format!("{bp}.step_proj.w"), dw.iter())?;
        self.layout
            .add_grad_from(grad, &format!("{bp}.step_proj.b"), db.iter())?;
        Ok((d_h_in, d_e_ff))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        p: &[f64],
        l: usize,
        j: usize,
        cache: &LayerCache,
        d_out: &Array2<f64>,
        offsets: &Array2<usize>,
        grad: &mut [f64],
    ) -> Result<Array2<f64>> {
        let c = &self.config;
        let lp = layer_prefix(l, j);
        let t_len = cache.act.nrows();
        let dh = c.head_dim();
        let f_w = c.feedforward_width;
        let dil = c.conv_dilation(l);
        let scale = 1.0 / (dh as f64).sqrt();

        // out = h1 + conv2(act).
        let mut d_h1 = d_out.clone();
        let (d_act, dw, db) = conv1d_bwd(
            &cache.act,
            &self.layout.view3(p, &format!("{lp}.ff2.w"))?,
            d_out,
            dil,
            c.padding,
        );
        self.layout
            .add_grad_from(grad, &format!("{lp}.ff2.w"), dw.iter())?;
        self.layout
            .add_grad_from(grad, &format!("{lp}.ff2.b"), db.iter())?;

        // act = gelu(a) * sigmoid(b).
        let d_gelu_a = &d_act * &cache.sig_b;
        let d_a = gelu_bwd(&cache.a, &d_gelu_a);
        let d_b = &d_act * &cache.gelu_a * &cache.sig_b.mapv(|s| s * (1.0 - s));
        let mut d_pre = Array2::zeros((t_len, 2 * f_w));
        d_pre.slice_mut(s![.., ..f_w]).assign(&d_a);
        d_pre.slice_mut(s![.., f_w..]).assign(&d_b);
        let (d_h1_ln, dw, db) = conv1d_bwd(
            &cache.h1_ln,
            &self.layout.view3(p, &format!("{lp}.ff1.w"))?,
            &d_pre,
            dil,
            c.padding,
        );
        self.layout
            .add_grad_from(grad, &format!("{lp}.ff1.w"), dw.iter())?;
        self.layout
            .add_grad_from(grad, &format!("{lp}.ff1.b"), db.iter())?;
        let (d_h1_from_ln, dgain, dbias) = layer_norm_bwd(
            &self.layout.view1(p, &format!("{lp}.ln2.g"))?,
            &cache.ln2,
            &d_h1_ln,
        );
        d_h1 += &d_h1_from_ln;
        self.layout
            .add_grad_from(grad, &format!("{lp}.ln2.g"), dgain.iter())?;
        self.layout
            .add_grad_from(grad, &format!("{lp}.ln2.b"), dbias.iter())?;

        // h1 = x_in + out_proj(concat(heads)).
        let mut d_x_in = d_h1.clone();
        let (d_concat, dw, db) = linear_bwd(
            &cache.concat,
            &self.layout.view2(p, &format!("{lp}.attn.o.w"))?,
            &d_h1,
        );
        self.layout
            .add_grad_from(grad, &format!("{lp}.attn.o.w"), dw.iter())?;
        self.layout
            .add_grad_from(grad, &format!("{lp}.attn.o.b"), db.iter())?;

        let mut d_q = Array2::zeros((t_len, c.attention_width));
        let mut d_k = Array2::zeros((t_len, c.attention_width));
        let mut d_v = Array2::zeros((t_len, c.attention_width));
        let mut d_tisa = Array2::zeros((c.n_heads, c.tisa_width()));
        for head in 0..c.n_heads {
            let cols = head * dh..(head + 1) * dh;
            let qh = cache.q.slice(s![.., cols.clone()]);
            let kh = cache.k.slice(s![.., cols.clone()]);
            let vh = cache.v.slice(s![.., cols.clone()]);
            let ph = &cache.probs[head];
            let d_oh = d_concat.slice(s![.., cols.clone()]).to_owned();
            let d_ph = d_oh.dot(&vh.t());
            let d_vh = ph.t().dot(&d_oh);
            let d_scores = softmax_rows_bwd(ph, &d_ph);
            for i in 0..t_len {
                for jj in 0..t_len {
                    d_tisa[[head, offsets[[i, jj]]]] += d_scores[[i, jj]];
                }
            }
            let d_qh = d_scores.dot(&kh) * scale;
            let d_kh = d_scores.t().dot(&qh) * scale;
            d_q.slice_mut(s![.., cols.clone()]).assign(&d_qh);
            d_k.slice_mut(s![.., cols.clone()]).assign(&d_kh);
            d_v.slice_mut(s![.., cols]).assign(&d_vh);
        }
        self.layout
            .add_grad_from(grad, &format!("{lp}.attn.tisa"), d_tisa.iter())?;

        let mut d_x_ln = Array2::zeros((t_len, c.attention_width));
        for (name, d_y, x_src) in [
            ("q", &d_q, &cache.x_ln),
            ("k", &d_k, &cache.x_ln),
            ("v", &d_v, &cache.x_ln),
        ] {
            let (dx, dw, db) = linear_bwd(
                x_src,
                &self.layout.view2(p, &format!("{lp}.attn.{name}.w"))?,
                d_y,
            );
            d_x_ln += &dx;
            self.layout
                .add_grad_from(grad, &format!("{lp}.attn.{name}.w"), dw.iter())?;
            self.layout
                .add_grad_from(grad, &format!("{lp}.attn.{name}.b"), db.iter())?;
        }
        let (d_x_from_ln, dgain, dbias) = layer_norm_bwd(
            &self.layout.view1(p, &format!("{lp}.ln1.g"))?,
            &cache.ln1,
            &d_x_ln,
        );
        d_x_in += &d_x_from_ln;
        self.layout
            .add_grad_from(grad, &format!("{lp}.ln1.g"), dgain.iter())?;
        self.layout
            .add_grad_from(grad, &format!("{lp}.ln1.b"), dbias.iter())?;

        Ok(d_x_in)
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array2<f64>,
    cond: Array2<f64>,
    e_row: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    e_ff: Array2<f64>,
    offsets: Array2<usize>,
    blocks: Vec<BlockCache>,
    skip_sum: Array2<f64>,
    head_pre: Array2<f64>,
    head_act: Array2<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    layers: Vec<LayerCache>,
    g: Array2<f64>,
    gate: GateCache,
    gated: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    x_ln: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    ln2: LnCache,
    h1_ln: Array2<f64>,
    a: Array2<f64>,
    gelu_a: Array2<f64>,
    sig_b: Array2<f64>,
    act: Array2<f64>,
}

/// Derives the named parameter layout for a configuration. The total length
/// is a pure function of the config.
pub fn build_layout(c: &DenoiserConfig) -> Layout {
    let w = c.attention_width;
    let f = c.feedforward_width;
    let e = c.step_embed_dim;
    let mut layout = Layout::default();
    layout.push("in_proj.w", &[w, c.input_dim]);
    layout.push("in_proj.b", &[w]);
    layout.push("step_ff.0.w", &[e, e]);
    layout.push("step_ff.0.b", &[e]);
    layout.push("step_ff.1.w", &[e, e]);
    layout.push("step_ff.1.b", &[e]);
    for l in 0..c.n_blocks {
        let bp = block_prefix(l);
        let k = c.kernel(l);
        layout.push(format!("{bp}.step_proj.w"), &[w, e]);
        layout.push(format!("{bp}.step_proj.b"), &[w]);
        layout.push(format!("{bp}.cond_proj.w"), &[2 * w, c.cond_dim]);
        layout.push(format!("{bp}.cond_proj.b"), &[2 * w]);
        layout.push(format!("{bp}.gate_proj.w"), &[w, w]);
        layout.push(format!("{bp}.gate_proj.b"), &[w]);
        layout.push(format!("{bp}.res_proj.w"), &[w, w]);
        layout.push(format!("{bp}.res_proj.b"), &[w]);
        layout.push(format!("{bp}.skip_proj.w"), &[w, w]);
        layout.push(format!("{bp}.skip_proj.b"), &[w]);
        for j in 0..c.layers_per_block {
            let lp = layer_prefix(l, j);
            layout.push(format!("{lp}.ln1.g"), &[w]);
            layout.push(format!("{lp}.ln1.b"), &[w]);
            for proj in ["q", "k", "v", "o"] {
                layout.push(format!("{lp}.attn.{proj}.w"), &[w, w]);
                layout.push(format!("{lp}.attn.{proj}.b"), &[w]);
            }
            layout.push(format!("{lp}.attn.tisa"), &[c.n_heads, c.tisa_width()]);
            layout.push(format!("{lp}.ln2.g"), &[w]);
            layout.push(format!("{lp}.ln2.b"), &[w]);
            layout.push(format!("{lp}.ff1.w"), &[2 * f, w, k]);
            layout.push(format!("{lp}.ff1.b"), &[2 * f]);
            layout.push(format!("{lp}.ff2.w"), &[w, f, k]);
            layout.push(format!("{lp}.ff2.b"), &[w]);
        }
    }
    layout.push("head.0.w", &[w, w]);
    layout.push("head.0.b", &[w]);
    layout.push("head.1.w", &[c.input_dim, w]);
    layout.push("head.1.b", &[c.input_dim]);
    layout
}

/// A network bundled with its parameters: the sampling-side predictor.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub net: Denoiser,
    pub params: Vec<f64>,
}

impl DenoiserModel {
    pub fn new(net: Denoiser, params: Vec<f64>) -> Result<Self> {
        if params.len() != net.param_count() {
            return Err(Error::config(format!(
                "parameter vector has {} values, layout needs {}",
                params.len(),
                net.param_count()
            )));
        }
        Ok(Self { net, params })
    }
}

impl EpsilonPredictor for DenoiserModel {
    fn predict(
        &self,
        x: &Array2<f64>,
        cond: &ConditioningSequence,
        n: usize,
    ) -> Result<Array2<f64>> {
        self.net.forward(&self.params, x, &cond.frames, n)
    }
}
