//! The query-based detector: a small vision transformer encoder over image
//! patches, a cross-attention decoder over learned object queries, and heads
//! for objectness, boxes, and mask prototypes.
//!
//! Masks come from an inner product between per-query prototypes and
//! per-pixel features. The pixel features are a linear projection of the
//! encoder tokens upsampled bilinearly to full resolution; because both the
//! upsampling and the inner product are linear, the forward pass computes
//! the cheap order (dot at token resolution, then upsample) while
//! `render_mask_logits` exposes the literal per-pixel formulation. The two
//! agree to floating-point noise, which a test pins down.

use thiserror::Error;

use crate::ndtensor::{init, ParamStore, Tensor, TensorError};
use crate::setmatch::Candidates;
use crate::util::{stream_rng, Stream};
use crate::geom::BBox;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad image: expected [{expect_h}, {expect_w}, 3], got {got:?}")]
    BadImage { expect_h: usize, expect_w: usize, got: Vec<usize> },
    #[error("config invalid: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub num_queries: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 64,
            patch: 8,
            dim: 64,
            heads: 4,
            mlp_ratio: 2,
            enc_blocks: 2,
            dec_blocks: 2,
            num_queries: 16,
        }
    }
}

impl DetectorConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.image_size % self.patch != 0 {
            return Err(ModelError::BadConfig(format!(
                "patch {} does not tile a {} px image",
                self.patch, self.image_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;

/// Exact number of scalar parameters `init_params` creates.
pub fn param_count(cfg: &DetectorConfig) -> usize {
    let d = cfg.dim;
    let hidden = d * cfg.mlp_ratio;
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let mlp = d * hidden + hidden + hidden * d + d;
    let block = 2 * ln + attn + mlp;
    let patch_in = cfg.patch * cfg.patch * 3;
    (patch_in * d + d)                      // patch embed
        + cfg.tokens() * d                  // positional table
        + cfg.enc_blocks * block
        + ln                                // encoder final norm
        + cfg.dec_blocks * block
        + cfg.num_queries * d               // query embeddings
        + ln                                // decoder final norm
        + (d + 1)                           // score head
        + (4 * d + 4)                       // box head
        + (d * d + d)                       // prototype head
        + (d * d + d)                       // pixel projection
}

/// Fresh parameters for `cfg`, drawn from the weight-init stream of `seed`.
/// The score and box heads start at zero so an untrained detector emits
/// scores and boxes of exactly 0.5.
pub fn init_params(cfg: &DetectorConfig, seed: u64) -> ParamStore {
    let mut rng = stream_rng(seed, Stream::WeightInit, 0);
    let d = cfg.dim;
    let hidden = d * cfg.mlp_ratio;
    let mut p = ParamStore::new();
    let add = |store: &mut ParamStore, name: String, t: Tensor| {
        store.insert(&name, t).expect("init names are unique");
    };

    add(&mut p, "patch.w".into(), init::linear_weight(&mut rng, cfg.patch * cfg.patch * 3, d));
    add(&mut p, "patch.b".into(), init::zeros(&[d]));
    add(&mut p, "pos".into(), init::normal(&mut rng, &[cfg.tokens(), d], 0.02));

    let block = |store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, prefix: &str| {
        for ln in ["ln1", "ln2"] {
            store.insert(&format!("{prefix}.{ln}.g"), init::ones(&[d])).unwrap();
            store.insert(&format!("{prefix}.{ln}.b"), init::zeros(&[d])).unwrap();
        }
        for proj in ["q", "k", "v", "o"] {
            store
                .insert(&format!("{prefix}.attn.{proj}.w"), init::linear_weight(rng, d, d))
                .unwrap();
            store.insert(&format!("{prefix}.attn.{proj}.b"), init::zeros(&[d])).unwrap();
        }
        store
            .insert(&format!("{prefix}.mlp.fc1.w"), init::linear_weight(rng, d, hidden))
            .unwrap();
        store.insert(&format!("{prefix}.mlp.fc1.b"), init::zeros(&[hidden])).unwrap();
        store
            .insert(&format!("{prefix}.mlp.fc2.w"), init::linear_weight(rng, hidden, d))
            .unwrap();
        store.insert(&format!("{prefix}.mlp.fc2.b"), init::zeros(&[d])).unwrap();
    };

    for i in 0..cfg.enc_blocks {
        block(&mut p, &mut rng, &format!("enc{i}"));
    }
    add(&mut p, "enc_ln.g".into(), init::ones(&[d]));
    add(&mut p, "enc_ln.b".into(), init::zeros(&[d]));

    for i in 0..cfg.dec_blocks {
        block(&mut p, &mut rng, &format!("dec{i}"));
    }
    add(&mut p, "query".into(), init::normal(&mut rng, &[cfg.num_queries, d], 0.02));
    add(&mut p, "dec_ln.g".into(), init::ones(&[d]));
    add(&mut p, "dec_ln.b".into(), init::zeros(&[d]));

    add(&mut p, "head.score.w".into(), init::zeros(&[d, 1]));
    add(&mut p, "head.score.b".into(), init::zeros(&[1]));
    add(&mut p, "head.box.w".into(), init::zeros(&[d, 4]));
    add(&mut p, "head.box.b".into(), init::zeros(&[4]));
    add(&mut p, "head.proto.w".into(), init::linear_weight(&mut rng, d, d));
    add(&mut p, "head.proto.b".into(), init::zeros(&[d]));
    add(&mut p, "pix.w".into(), init::linear_weight(&mut rng, d, d));
    add(&mut p, "pix.b".into(), init::zeros(&[d]));

    debug_assert_eq!(p.num_values(), param_count(cfg));
    p
}

/// Everything a forward pass produces, still attached to the graph.
pub struct DetectorOutput {
    /// `[n_q, dim]` decoded query embeddings (the consistency targets).
    pub queries: Tensor,
    /// `[n_q]` objectness logits.
    pub score_logits: Tensor,
    /// `[n_q, 4]` center-size boxes, each coordinate in (0, 1).
    pub boxes: Tensor,
    /// `[n_q, pixels]` mask logits at full image resolution.
    pub mask_logits: Tensor,
    /// `[n_q, dim]` mask prototypes.
    pub prototypes: Tensor,
    pixel_tokens: Tensor,
    cfg: DetectorConfig,
}

impl DetectorOutput {
    /// `[image, image, dim]` per-pixel features: the projected encoder
    /// tokens upsampled to full resolution.
    pub fn pixel_features(&self) -> Result<Tensor, ModelError> {
        let g = self.cfg.grid();
        let grid = self.pixel_tokens.reshape(&[g, g, self.cfg.dim])?;
        Ok(grid.upsample_bilinear(self.cfg.image_size, self.cfg.image_size)?)
    }

    /// Mask logits of one query by the literal definition: the prototype
    /// dotted with the feature at every pixel, scaled by 1/sqrt(dim).
    pub fn render_mask_logits(&self, query: usize) -> Result<Tensor, ModelError> {
        let s = self.cfg.image_size;
        let flat = self.pixel_features()?.reshape(&[s * s, self.cfg.dim])?;
        let proto = self.prototypes.index_select0(&[query])?;
        let scaled = flat.matmul_nt(&proto)?.mul_scalar(1.0 / (self.cfg.dim as f64).sqrt());
        Ok(scaled.reshape(&[s, s])?)
    }

    /// Detached inputs for the matcher: sigmoided scores and masks, boxes as
    /// plain geometry.
    pub fn candidates(&self) -> Candidates {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let scores: Vec<f64> = self.score_logits.data().iter().map(|&z| sig(z)).collect();
        let boxes: Vec<BBox> = self
            .boxes
            .data()
            .chunks_exact(4)
            .map(|c| BBox::new(c[0], c[1], c[2], c[3]))
            .collect();
        let mask_probs: Vec<f64> = self.mask_logits.data().iter().map(|&z| sig(z)).collect();
        Candidates { scores, boxes, mask_probs, hw: self.cfg.pixels() }
    }
}

/// Splits an `[h, w, 3]` image into flattened per-patch rows `[tokens,
/// patch*patch*3]`, row-major over the patch grid.
fn patchify(cfg: &DetectorConfig, image: &Tensor) -> Result<Tensor, ModelError> {
    let s = cfg.image_size;
    if image.shape() != [s, s, 3] {
        return Err(ModelError::BadImage {
            expect_h: s,
            expect_w: s,
            got: image.shape().to_vec(),
        });
    }
    let g = cfg.grid();
    let p = cfg.patch;
    let mut data = Vec::with_capacity(cfg.tokens() * p * p * 3);
    let src = image.data();
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                let y = gy * p + py;
                let row = &src[(y * s + gx * p) * 3..(y * s + gx * p + p) * 3];
                data.extend_from_slice(row);
            }
        }
    }
    Ok(Tensor::new(data, &[cfg.tokens(), p * p * 3])?)
}

struct Linear<'a> {
    w: &'a Tensor,
    b: &'a Tensor,
}

impl Linear<'_> {
    fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.matmul(self.w)?.add(self.b)
    }
}

fn linear<'a>(p: &'a ParamStore, name: &str) -> Result<Linear<'a>, TensorError> {
    Ok(Linear { w: p.get(&format!("{name}.w"))?, b: p.get(&format!("{name}.b"))? })
}

fn layer_norm(p: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor, TensorError> {
    x.layer_norm(p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?, LN_EPS)
}

/// Multi-head attention of `x_q` attending into `x_kv`.
fn attention(
    cfg: &DetectorConfig,
    p: &ParamStore,
    prefix: &str,
    x_q: &Tensor,
    x_kv: &Tensor,
) -> Result<Tensor, TensorError> {
    let (h, d) = (cfg.heads, cfg.dim);
    let dh = d / h;
    let n = x_q.shape()[0];
    let m = x_kv.shape()[0];
    let split = |t: &Tensor, len: usize| -> Result<Tensor, TensorError> {
        t.reshape(&[len, h, dh])?.permute(&[1, 0, 2])
    };
    let q = split(&linear(p, &format!("{prefix}.q"))?.apply(x_q)?, n)?;
    let k = split(&linear(p, &format!("{prefix}.k"))?.apply(x_kv)?, m)?;
    let v = split(&linear(p, &format!("{prefix}.v"))?.apply(x_kv)?, m)?;

    let scores = q.matmul_nt(&k)?.mul_scalar(1.0 / (dh as f64).sqrt());
    let mixed = scores.softmax_last()?.matmul(&v)?; // [h, n, dh]
    let merged = mixed.permute(&[1, 0, 2])?.reshape(&[n, d])?;
    linear(p, &format!("{prefix}.o"))?.apply(&merged)
}

fn mlp(p: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor, TensorError> {
    let hidden = linear(p, &format!("{prefix}.fc1"))?.apply(x)?.relu();
    linear(p, &format!("{prefix}.fc2"))?.apply(&hidden)
}

/// Lift a stored f32 view buffer into a forward-ready `[s, s, 3]` tensor.
/// The widening cast is lossless, so pixels stay bit-faithful to disk.
pub fn image_tensor(view: &[f32], cfg: &DetectorConfig) -> Result<Tensor, ModelError> {
    let s = cfg.image_size;
    if view.len() != s * s * 3 {
        return Err(ModelError::BadImage {
            expect_h: s,
            expect_w: s,
            got: vec![view.len()],
        });
    }
    let data: Vec<f64> = view.iter().map(|&v| v as f64).collect();
    Ok(Tensor::new(data, &[s, s, 3])?)
}

/// Full forward pass over one `[image, image, 3]` tensor.
pub fn forward(
    cfg: &DetectorConfig,
    params: &ParamStore,
    image: &Tensor,
) -> Result<DetectorOutput, ModelError> {
    cfg.validate()?;
    let patches = patchify(cfg, image)?;
    let mut x = linear(params, "patch")?.apply(&patches)?.add(params.get("pos")?)?;
    for i in 0..cfg.enc_blocks {
        let pre = layer_norm(params, &format!("enc{i}.ln1"), &x)?;
        x = x.add(&attention(cfg, params, &format!("enc{i}.attn"), &pre, &pre)?)?;
        let pre = layer_norm(params, &format!("enc{i}.ln2"), &x)?;
        x = x.add(&mlp(params, &format!("enc{i}.mlp"), &pre)?)?;
    }
    let tokens = layer_norm(params, "enc_ln", &x)?;

    let mut q = params.get("query")?.clone();
    for i in 0..cfg.dec_blocks {
        let pre = layer_norm(params, &format!("dec{i}.ln1"), &q)?;
        q = q.add(&attention(cfg, params, &format!("dec{i}.attn"), &pre, &tokens)?)?;
        let pre = layer_norm(params, &format!("dec{i}.ln2"), &q)?;
        q = q.add(&mlp(params, &format!("dec{i}.mlp"), &pre)?)?;
    }
    let queries = layer_norm(params, "dec_ln", &q)?;

    let score_logits = linear(params, "head.score")?
        .apply(&queries)?
        .reshape(&[cfg.num_queries])?;
    let boxes = linear(params, "head.box")?.apply(&queries)?.sigmoid();
    let prototypes = linear(params, "head.proto")?.apply(&queries)?;
    let pixel_tokens = linear(params, "pix")?.apply(&tokens)?;

    // dot at token resolution, then upsample (see module docs)
    let g = cfg.grid();
    let coarse = prototypes
        .matmul_nt(&pixel_tokens)?
        .mul_scalar(1.0 / (cfg.dim as f64).sqrt())
        .reshape(&[cfg.num_queries, g, g])?
        .permute(&[1, 2, 0])?;
    let mask_logits = coarse
        .upsample_bilinear(cfg.image_size, cfg.image_size)?
        .permute(&[2, 0, 1])?
        .reshape(&[cfg.num_queries, cfg.pixels()])?;

    Ok(DetectorOutput {
        queries,
        score_logits,
        boxes,
        mask_logits,
        prototypes,
        pixel_tokens,
        cfg: *cfg,
    })
}
