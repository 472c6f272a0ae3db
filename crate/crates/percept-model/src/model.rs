//! Parameter registration and initialization for the full perception stack:
//! vision pyramid, connector, causal language model, dynamic query
//! machinery, deformable decoder, shared heads, and denoising embeddings.

use crate::config::ModelConfig;
use crate::tokenizer::Tokenizer;
use percept_autograd::{ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("sequence of {len} tokens (incl. {prefix} visual) exceeds context cap {cap}")]
    ContextOverflow { len: usize, prefix: usize, cap: usize },
    #[error("no summary token recorded in sequence")]
    MissingSummary,
    #[error("sequence has no response tokens to supervise")]
    EmptyResponse,
    #[error("label span {index} is empty")]
    EmptySpan { index: usize },
    #[error("no text embeddings supplied")]
    NoTextEmbeddings,
    #[error("top-{n} selection needs at most {cells} cells")]
    SelectionOverflow { n: usize, cells: usize },
    #[error("count mismatch: {detail}")]
    CountMismatch { detail: String },
    #[error(transparent)]
    Image(#[from] percept_core::ImageError),
}

/// Initial sigmoid-space value giving reference sizes of 0.2.
pub const SIZE_INIT_RAW: f64 = -1.3862943611198906;

/// The model: a configuration, a tokenizer, and a named parameter store.
/// Forward passes borrow the store immutably; the optimizer mutates it
/// between steps.
pub struct Model {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub store: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

impl Model {
    /// Stem channel widths (strides 2 and 4) derived from the feature width.
    pub fn stem_channels(config: &ModelConfig) -> (usize, usize) {
        ((config.d_vis / 4).max(4), (config.d_vis / 2).max(8))
    }

    pub fn new(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::BadConfig)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let (c1, c2) = Self::stem_channels(c);
        let vocab = tokenizer.vocab_size();

        let reg = |name: &str, t: Tensor, store: &mut ParamStore| {
            store.register(name, t).expect("unique parameter names");
        };
        macro_rules! linear_init {
            ($name:expr, $rows:expr, $cols:expr) => {{
                reg(&format!("{}.w", $name), xavier(&mut rng, $rows, $cols), &mut store);
                reg(&format!("{}.b", $name), Tensor::zeros(1, $cols), &mut store);
            }};
        }
        macro_rules! norm_init {
            ($name:expr, $dim:expr) => {{
                reg(&format!("{}.g", $name), Tensor::full(1, $dim, 1.0), &mut store);
                reg(&format!("{}.b", $name), Tensor::zeros(1, $dim), &mut store);
            }};
        }

        // Vision pyramid: three stride-2 stem convolutions to stride 8, then
        // two more for strides 16 and 32; a stride-4 tap feeds the pixel map.
        linear_init!("enc.stem1", 9 * 3, c1);
        linear_init!("enc.stem2", 9 * c1, c2);
        linear_init!("enc.stem3", 9 * c2, c.d_vis);
        linear_init!("enc.lvl16", 9 * c.d_vis, c.d_vis);
        linear_init!("enc.lvl32", 9 * c.d_vis, c.d_vis);
        linear_init!("enc.pix_from4", c2, c.d_dec);
        linear_init!("enc.pix_from8", c.d_vis, c.d_dec);
        norm_init!("enc.pix_norm", c.d_dec);

        // Connector: coarsest level to LM width.
        linear_init!("conn", c.d_vis, c.d_lm);

        // Language model.
        reg("lm.tok_embed", uniform(&mut rng, vocab, c.d_lm, 0.05), &mut store);
        reg("lm.pos_embed", uniform(&mut rng, c.context_cap, c.d_lm, 0.05), &mut store);
        for i in 0..c.lm_layers {
            norm_init!(&format!("lm.{i}.ln1"), c.d_lm);
            for part in ["wq", "wk", "wv", "wo"] {
                linear_init!(&format!("lm.{i}.attn.{part}"), c.d_lm, c.d_lm);
            }
            norm_init!(&format!("lm.{i}.ln2"), c.d_lm);
            linear_init!(&format!("lm.{i}.ff1"), c.d_lm, c.ffn_mult * c.d_lm);
            linear_init!(&format!("lm.{i}.ff2"), c.ffn_mult * c.d_lm, c.d_lm);
        }
        norm_init!("lm.lnf", c.d_lm);
        linear_init!("lm.head", c.d_lm, vocab);

        // Query machinery.
        linear_init!("qry.expand1", c.d_lm, c.d_lm);
        linear_init!("qry.expand2", c.d_lm, c.num_queries * c.d_dec);
        linear_init!("qry.align1", c.d_lm, c.d_lm);
        linear_init!("qry.align2", c.d_lm, c.d_vis);
        reg("qry.log_tau", Tensor::full(1, 1, 10f64.ln()), &mut store);
        if c.query_selection {
            linear_init!("qry.resid", c.d_vis, c.d_dec);
            reg("qry.size_raw", Tensor::full(1, 2, SIZE_INIT_RAW), &mut store);
        } else {
            reg("qry.bank.content", uniform(&mut rng, c.num_queries, c.d_dec, 0.5), &mut store);
            reg("qry.bank.ref_raw", uniform(&mut rng, c.num_queries, 4, 1.5), &mut store);
        }
        if c.num_stuff_queries > 0 {
            reg("qry.stuff", uniform(&mut rng, c.num_stuff_queries, c.d_dec, 0.5), &mut store);
        }

        // Decoder: shared value projection; per-layer deformable attention,
        // self-attention, feed-forward, and (layer-local) norms.
        linear_init!("dec.value", c.d_vis, c.d_dec);
        let lp = 3 * c.sampling_points;
        for l in 0..c.decoder_layers {
            linear_init!(&format!("dec.{l}.off"), c.d_dec, lp * 2);
            linear_init!(&format!("dec.{l}.aw"), c.d_dec, lp);
            linear_init!(&format!("dec.{l}.cross_out"), c.d_dec, c.d_dec);
            norm_init!(&format!("dec.{l}.norm1"), c.d_dec);
            for part in ["wq", "wk", "wv", "wo"] {
                linear_init!(&format!("dec.{l}.attn.{part}"), c.d_dec, c.d_dec);
            }
            norm_init!(&format!("dec.{l}.norm2"), c.d_dec);
            linear_init!(&format!("dec.{l}.ff1"), c.d_dec, c.ffn_mult * c.d_dec);
            linear_init!(&format!("dec.{l}.ff2"), c.ffn_mult * c.d_dec, c.d_dec);
            norm_init!(&format!("dec.{l}.norm3"), c.d_dec);
        }

        // Shared heads. The final box projection starts at zero so the
        // initial prediction is exactly the reference box.
        linear_init!("head.sim1", c.d_dec, c.d_dec);
        linear_init!("head.sim2", c.d_dec, c.d_vis);
        reg("head.no_obj", Tensor::zeros(1, 1), &mut store);
        linear_init!("head.box1", c.d_dec, c.d_dec);
        reg("head.box2.w", Tensor::zeros(c.d_dec, 4), &mut store);
        reg("head.box2.b", Tensor::zeros(1, 4), &mut store);
        linear_init!("head.mask1", c.d_dec, c.d_dec);
        linear_init!("head.mask2", c.d_dec, c.d_dec);

        // Denoising label embeddings.
        reg("dn.label_embed", uniform(&mut rng, c.max_labels, c.d_dec, 0.5), &mut store);

        Ok(Self { config, tokenizer, store })
    }

    /// Parameter id by name; model-internal names are a stable contract, so
    /// a missing one is a construction bug.
    pub fn pid(&self, name: &str) -> ParamId {
        self.store.id_of(name).expect("registered parameter")
    }

    /// True when the parameter belongs to the vision encoder (the component
    /// frozen in the second training stage).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.")
    }

    /// True for the connector parameters (the only trainable component in
    /// the first training stage).
    pub fn is_connector_param(name: &str) -> bool {
        name.starts_with("conn.")
    }
}
